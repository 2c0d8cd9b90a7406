#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ddcn/arch.hpp"
#include "ddcn/checkpoint.hpp"
#include "ddcn/dataset.hpp"
#include "ddcn/errors.hpp"
#include "ddcn/network.hpp"
#include "ddcn/optim.hpp"
#include "ddcn/si_loss.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

enum class CoarseArch { Ours, Vgg };

inline const char* to_string(CoarseArch a) { return a == CoarseArch::Ours ? "ours" : "vgg"; }

inline CoarseArch parse_coarse_arch(const std::string& s) {
  if (s == "ours") return CoarseArch::Ours;
  if (s == "vgg") return CoarseArch::Vgg;
  throw ConfigError("unknown architecture '" + s + "' (ours|vgg)");
}

// The prediction grid of both stacks and the input of everything but the
// VGG baseline, which sees the RGB image at twice this size.
inline constexpr Size2 kOutputSize{80, 60};
inline constexpr Size2 kVggInputSize{160, 120};

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  std::size_t epochs_phase1 = 300;
  std::size_t epochs_phase2 = 300;
  std::uint64_t seed = 0;
  double width_scale = 1.0;
  bool freeze_coarse_in_phase2 = true;
  CoarseArch arch = CoarseArch::Ours;
  bool zero_init_final = false;          // fine stack's prediction layer starts at zero
  std::optional<double> target_loss;     // leave a phase once train loss drops below
  int phases = 3;                        // bit 0: phase 1, bit 1: phase 2

  void check() const {
    SgdConfig{learning_rate, momentum}.check();
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (phases < 1 || phases > 3) throw ConfigError("no training phase selected");
    scale_channels(64, width_scale, "1.1");
  }

  std::map<std::string, std::string> echo() const {
    return {{"lr", detail::format_scale(learning_rate)},
            {"momentum", detail::format_scale(momentum)},
            {"batch", std::to_string(batch_size)},
            {"epochs_phase1", std::to_string(epochs_phase1)},
            {"epochs_phase2", std::to_string(epochs_phase2)},
            {"seed", std::to_string(seed)},
            {"width_scale", detail::format_scale(width_scale)},
            {"freeze_coarse", freeze_coarse_in_phase2 ? "true" : "false"},
            {"arch", to_string(arch)},
            {"zero_init_final", zero_init_final ? "true" : "false"},
            {"target_loss", target_loss ? detail::format_scale(*target_loss) : "none"}};
  }
};

// ---------------------------------------------------------------------------
// Two-stack model

template <Real T>
struct Pipeline {
  CoarseArch arch;
  double width_scale;
  Network<T> coarse;
  Network<T> fine;

  Pipeline(CoarseArch a, double scale, std::uint64_t seed, bool zero_final)
      : arch(a),
        width_scale(scale),
        coarse(a == CoarseArch::Ours ? coarse_dilated_spec(scale, kOutputSize)
                                     : coarse_vgg_spec(scale, kVggInputSize),
               InitOptions{Rng::mix(seed, 1), false}),
        fine(fine_spec(scale, kOutputSize), InitOptions{Rng::mix(seed, 2), zero_final}) {}

  // Architecture description covered by a checkpoint's fingerprint.
  ArchSpec spec(bool with_fine) const {
    ArchSpec a{{coarse.spec()}, width_scale};
    if (with_fine) a.stacks.push_back(fine.spec());
    return a;
  }

  // Coarse-stack view of an RGB batch at the output grid.
  Tensor4<T> coarse_input(const Tensor4<float>& rgb) const {
    if (arch == CoarseArch::Ours) return rgb.template cast<T>();
    const Shape4 s = rgb.shape();
    Tensor4<T> out(Shape4{s.n, s.c, kVggInputSize.h, kVggInputSize.w});
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const std::vector<float> plane(rgb.plane(n, c), rgb.plane(n, c) + s.h * s.w);
        const auto up = resize_bilinear(plane, s.h, s.w, kVggInputSize.h, kVggInputSize.w);
        std::transform(up.begin(), up.end(), out.plane(n, c), [](float v) { return static_cast<T>(v); });
      }
    return out;
  }

  // Log-depth prediction of the coarse stack alone or of both stacks.
  Tensor4<T> predict(const Tensor4<float>& rgb, bool with_fine) const {
    Tensor4<T> c = coarse.forward(coarse_input(rgb));
    if (!with_fine) return c;
    return fine.forward(rgb.template cast<T>(), &c);
  }
};

namespace detail {

inline std::string fmt_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

template <Real T>
Tensor4<T> slice(const Tensor4<T>& t, std::size_t n) {
  const Shape4 s = t.shape();
  Tensor4<T> out(Shape4{1, s.c, s.h, s.w});
  std::copy(t.plane(n, 0), t.plane(n, 0) + s.c * s.h * s.w, out.plane(0, 0));
  return out;
}

template <Real T>
void put_params(Checkpoint& ckpt, const std::string& prefix, Network<T>& net, const Sgd<T>* opt) {
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    ckpt.blobs.push_back(Blob::from<T>(prefix + p.name, p.dims, std::span<const T>(p.value)));
    if (opt) {
      const auto& v = opt->velocities()[i];
      ckpt.blobs.push_back(Blob::from<T>("velocity/" + prefix + p.name, p.dims, std::span<const T>(v)));
    }
  }
}

template <Real T>
void get_params(const Checkpoint& ckpt, const std::string& prefix, Network<T>& net, Sgd<T>* opt) {
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const Blob& b = ckpt.blob(prefix + p.name);
    if (b.dims != p.dims) throw FormatError("blob " + b.name + " has mismatched dimensions");
    b.template copy_to<T>(p.value);
    if (opt) ckpt.blob("velocity/" + prefix + p.name).template copy_to<T>(std::span<T>(opt->velocities()[i]));
  }
}

}  // namespace detail

inline const std::string kCoarsePrefix = "coarse/";
inline const std::string kFinePrefix = "fine/";

// Rebuilds the pipeline recorded in a checkpoint and loads its weights;
// refuses when the rebuilt architecture's fingerprint differs.
template <Real T>
Pipeline<T> load_pipeline(const Checkpoint& ckpt, bool* has_fine = nullptr) {
  const CoarseArch arch = parse_coarse_arch(ckpt.meta("arch"));
  const double scale = std::stod(ckpt.meta("width_scale"));
  const bool with_fine = ckpt.meta("stages") == "coarse+fine";
  Pipeline<T> p(arch, scale, 0, false);
  const std::string expected = std::to_string(fingerprint(p.spec(with_fine)));
  if (ckpt.meta("fingerprint") != expected)
    throw FormatError("checkpoint fingerprint " + ckpt.meta("fingerprint") + " does not match architecture " +
                      expected);
  detail::get_params<T>(ckpt, kCoarsePrefix, p.coarse, nullptr);
  if (with_fine) detail::get_params<T>(ckpt, kFinePrefix, p.fine, nullptr);
  if (has_fine) *has_fine = with_fine;
  return p;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Metrics {
  double L = 0.0;
  double D = 0.0;
  double rmse_log = 0.0;
  std::size_t n_images = 0;
};

// Per-image metrics of log-depth predictions, then averaged over images.
template <Real T>
Metrics evaluate_predictions(const std::vector<Tensor4<T>>& log_preds, const std::vector<Sample>& samples) {
  if (samples.empty()) throw ConfigError("cannot evaluate an empty split");
  if (log_preds.size() != samples.size()) throw ShapeError("prediction count does not match sample count");
  Metrics m;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    LogDepthPair<T> pair(log_preds[i], samples[i].depth.template cast<T>(), samples[i].mask);
    const auto d = pair.log_difference();
    double sq = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k)
      if (pair.mask()[k]) sq += d[k] * d[k];
    m.L += loss_pairwise(pair).loss;
    m.D += scale_invariant_D(pair);
    m.rmse_log += std::sqrt(sq / static_cast<double>(pair.n_valid()));
  }
  const double n = static_cast<double>(samples.size());
  m.L /= n;
  m.D /= n;
  m.rmse_log /= n;
  m.n_images = samples.size();
  return m;
}

// Built-in oracles: the prediction is the truth itself, or scale times it.
template <Real T>
std::vector<Tensor4<T>> truth_predictions(const std::vector<Sample>& samples, double scale = 1.0) {
  std::vector<Tensor4<T>> out;
  for (const auto& s : samples) {
    Tensor4<T> p(s.depth.shape());
    for (std::size_t i = 0; i < p.size(); ++i)
      if (s.mask[i]) p[i] = static_cast<T>(std::log(scale * static_cast<double>(s.depth[i])));
    out.push_back(std::move(p));
  }
  return out;
}

template <Real T>
std::vector<Tensor4<T>> model_predictions(const Pipeline<T>& model, bool with_fine, const std::vector<Sample>& samples,
                                          std::size_t batch_size = 16) {
  std::vector<Tensor4<T>> out;
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    std::vector<std::size_t> picks;
    for (std::size_t i = b; i < std::min(samples.size(), b + batch_size); ++i) picks.push_back(i);
    const Batch batch = assemble_batch(samples, picks);
    const Tensor4<T> y = model.predict(batch.rgb, with_fine);
    for (std::size_t k = 0; k < picks.size(); ++k) out.push_back(detail::slice(y, k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  std::vector<double> phase1_losses, phase2_losses;
  std::string last_checkpoint;
};

template <Real T>
class Trainer {
 public:
  using LogFn = std::function<void(const std::string&)>;

  Trainer(TrainConfig cfg, std::vector<Sample> train, std::vector<Sample> val, std::string out_dir, LogFn log)
      : cfg_(std::move(cfg)),
        train_(std::move(train)),
        val_(std::move(val)),
        out_dir_(std::move(out_dir)),
        log_(std::move(log)),
        model_(cfg_.arch, cfg_.width_scale, cfg_.seed, cfg_.zero_init_final),
        coarse_opt_(model_.coarse, SgdConfig{cfg_.learning_rate, cfg_.momentum}),
        fine_opt_(model_.fine, SgdConfig{cfg_.learning_rate, cfg_.momentum}) {
    cfg_.check();
    if (train_.empty()) throw ConfigError("training set is empty");
    if (!out_dir_.empty()) std::filesystem::create_directories(out_dir_);
  }

  Pipeline<T>& model() { return model_; }
  bool keep_every_epoch = false;

  // Loads trained coarse weights (phase-2-only runs).
  void load_coarse(const Checkpoint& ckpt) {
    check_fingerprint(ckpt);
    detail::get_params<T>(ckpt, kCoarsePrefix, model_.coarse, nullptr);
  }

  // Restores weights, momentum and position from a checkpoint written by a
  // run with the same architecture.
  void resume(const Checkpoint& ckpt) {
    check_fingerprint(ckpt);
    const int phase = std::stoi(ckpt.meta("phase"));
    const bool done = ckpt.meta("phase_done") == "true";
    const std::size_t epoch = std::stoul(ckpt.meta("epoch"));
    detail::get_params<T>(ckpt, kCoarsePrefix, model_.coarse, phase == 1 ? &coarse_opt_ : nullptr);
    if (phase == 2) {
      detail::get_params<T>(ckpt, kFinePrefix, model_.fine, &fine_opt_);
      if (ckpt.has_blob("velocity/" + kCoarsePrefix + model_.coarse.parameters().front().name))
        detail::get_params<T>(ckpt, kCoarsePrefix, model_.coarse, &coarse_opt_);
    }
    start_phase_ = done ? phase + 1 : phase;
    start_epoch_ = done ? 0 : epoch;
  }

  TrainResult run() {
    TrainResult result;
    if ((cfg_.phases & 1) && start_phase_ <= 1) result.phase1_losses = run_phase(1);
    if ((cfg_.phases & 2) && start_phase_ <= 2) result.phase2_losses = run_phase(2);
    result.last_checkpoint = last_checkpoint_;
    return result;
  }

  Checkpoint snapshot(int phase, std::size_t epoch, bool phase_done) {
    Checkpoint ckpt;
    const bool with_fine = phase == 2;
    const bool coarse_moving = phase == 1 || !cfg_.freeze_coarse_in_phase2;
    detail::put_params<T>(ckpt, kCoarsePrefix, model_.coarse, coarse_moving ? &coarse_opt_ : nullptr);
    if (with_fine) detail::put_params<T>(ckpt, kFinePrefix, model_.fine, &fine_opt_);
    ckpt.metadata = cfg_.echo();
    ckpt.metadata["fingerprint"] = std::to_string(fingerprint(model_.spec(with_fine)));
    ckpt.metadata["stages"] = with_fine ? "coarse+fine" : "coarse";
    ckpt.metadata["phase"] = std::to_string(phase);
    ckpt.metadata["epoch"] = std::to_string(epoch);
    ckpt.metadata["phase_done"] = phase_done ? "true" : "false";
    ckpt.metadata["precision"] = to_string(precision_of<T>());
    ckpt.metadata["init"] = "uniform_fanin";
    return ckpt;
  }

 private:
  void check_fingerprint(const Checkpoint& ckpt) const {
    const bool with_fine = ckpt.meta("stages") == "coarse+fine";
    const std::string expected = std::to_string(fingerprint(model_.spec(with_fine)));
    if (ckpt.meta("fingerprint") != expected)
      throw FormatError("checkpoint fingerprint " + ckpt.meta("fingerprint") +
                        " does not match the configured architecture (" + expected + ")");
    if (ckpt.meta("precision") != to_string(precision_of<T>()))
      throw FormatError("checkpoint precision " + ckpt.meta("precision") + " differs from " +
                        to_string(precision_of<T>()));
  }

  std::vector<double> run_phase(int phase) {
    const std::size_t epochs = phase == 1 ? cfg_.epochs_phase1 : cfg_.epochs_phase2;
    const std::size_t first = phase == start_phase_ ? start_epoch_ : 0;
    if (phase == 2 && cfg_.freeze_coarse_in_phase2) cache_coarse();
    std::vector<double> losses;
    for (std::size_t epoch = first; epoch < epochs; ++epoch) {
      const double train_loss = run_epoch(phase, epoch);
      losses.push_back(train_loss);
      const bool reached = cfg_.target_loss && train_loss < *cfg_.target_loss;
      const bool done = reached || epoch + 1 == epochs;
      std::string val = "nan";
      if (!val_.empty())
        val = detail::fmt_value(evaluate_predictions(model_predictions(model_, phase == 2, val_, cfg_.batch_size), val_).L);
      log_("epoch " + std::to_string(epoch + 1) + " phase " + std::to_string(phase) + " train_loss " +
           detail::fmt_value(train_loss) + " val_loss " + val);
      write_checkpoint(phase, epoch + 1, done);
      if (reached) break;
    }
    if (epochs == 0 || first >= epochs) write_checkpoint(phase, epochs, true);
    coarse_cache_.clear();
    return losses;
  }

  void write_checkpoint(int phase, std::size_t epoch, bool done) {
    if (out_dir_.empty()) return;
    const Checkpoint ckpt = snapshot(phase, epoch, done);
    const std::string last = out_dir_ + "/last.ddcn";
    save_checkpoint(ckpt, last);
    last_checkpoint_ = last;
    if (keep_every_epoch)
      save_checkpoint(ckpt, out_dir_ + "/phase" + std::to_string(phase) + "_epoch" + std::to_string(epoch) + ".ddcn");
    if (done) {
      last_checkpoint_ = out_dir_ + "/phase" + std::to_string(phase) + ".ddcn";
      save_checkpoint(ckpt, last_checkpoint_);
    }
  }

  // Frozen coarse outputs do not change during phase 2, so compute them once.
  void cache_coarse() {
    coarse_cache_ = model_predictions(model_, false, train_, cfg_.batch_size);
  }

  // Mean of the per-image losses seen before each update, summed in batch order.
  double run_epoch(int phase, std::size_t epoch) {
    const auto batches = batch_iter(train_.size(), cfg_.batch_size, Rng::mix(cfg_.seed, 100 + phase), epoch);
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const double batch_sum = phase == 1 ? step_coarse(batches[bi]) : step_fine(batches[bi]);
      if (!std::isfinite(batch_sum))
        throw NumericError("divergence in phase " + std::to_string(phase) + " epoch " + std::to_string(epoch + 1) +
                           " batch " + std::to_string(bi + 1) + ": loss is " + detail::fmt_value(batch_sum));
      total += batch_sum;
    }
    return total / static_cast<double>(train_.size());
  }

  // Fills upstream with the batch-mean loss gradient; returns the summed loss.
  double loss_and_grad(const Tensor4<T>& pred, const Batch& batch, Tensor4<T>& upstream) const {
    const std::size_t B = pred.shape().n;
    upstream = Tensor4<T>(pred.shape());
    double sum = 0.0;
    const Tensor4<T> truth = batch.depth.template cast<T>();
    for (std::size_t k = 0; k < B; ++k) {
      LogDepthPair<T> pair(detail::slice(pred, k), detail::slice(truth, k), batch.masks[k]);
      const auto report = loss_pairwise(pair);
      sum += report.loss;
      const T scale = static_cast<T>(1.0 / static_cast<double>(B));
      T* dst = upstream.plane(k, 0);
      for (std::size_t i = 0; i < report.grad.size(); ++i) dst[i] = report.grad[i] * scale;
    }
    return sum;
  }

  double step_coarse(const std::vector<std::size_t>& picks) {
    const Batch batch = assemble_batch(train_, picks);
    typename Network<T>::Tape tape;
    const Tensor4<T> pred = model_.coarse.forward(model_.coarse_input(batch.rgb), nullptr, tape);
    Tensor4<T> upstream;
    const double sum = loss_and_grad(pred, batch, upstream);
    if (!std::isfinite(sum)) return sum;
    model_.coarse.zero_grad();
    model_.coarse.backward(tape, upstream);
    coarse_opt_.step();
    return sum;
  }

  double step_fine(const std::vector<std::size_t>& picks) {
    const Batch batch = assemble_batch(train_, picks);
    const bool frozen = cfg_.freeze_coarse_in_phase2;
    typename Network<T>::Tape coarse_tape, fine_tape;
    Tensor4<T> coarse_out;
    if (frozen) {
      const Shape4 s = coarse_cache_.front().shape();
      coarse_out = Tensor4<T>(Shape4{picks.size(), s.c, s.h, s.w});
      for (std::size_t k = 0; k < picks.size(); ++k) {
        const auto& src = coarse_cache_[picks[k]];
        std::copy(src.data().begin(), src.data().end(), coarse_out.plane(k, 0));
      }
    } else {
      coarse_out = model_.coarse.forward(model_.coarse_input(batch.rgb), nullptr, coarse_tape);
    }
    const Tensor4<T> pred = model_.fine.forward(batch.rgb.template cast<T>(), &coarse_out, fine_tape);
    Tensor4<T> upstream;
    const double sum = loss_and_grad(pred, batch, upstream);
    if (!std::isfinite(sum)) return sum;
    model_.fine.zero_grad();
    model_.fine.backward(fine_tape, upstream);
    if (!frozen) {
      model_.coarse.zero_grad();
      model_.coarse.backward(coarse_tape, *fine_tape.aux_grad);
      coarse_opt_.step();
    }
    fine_opt_.step();
    return sum;
  }

  TrainConfig cfg_;
  std::vector<Sample> train_, val_;
  std::string out_dir_;
  LogFn log_;
  Pipeline<T> model_;
  Sgd<T> coarse_opt_, fine_opt_;
  std::vector<Tensor4<T>> coarse_cache_;
  int start_phase_ = 1;
  std::size_t start_epoch_ = 0;
  std::string last_checkpoint_;
};

}  // namespace ddcn

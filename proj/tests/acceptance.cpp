// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
// Criteria 1-6 run in-process (plus the analyze CLI for 1); 7-9 drive the
// ddcn binary end to end and take a few minutes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "cli_run.hpp"
#include "ddcn/arch.hpp"
#include "ddcn/gradcheck.hpp"
#include "ddcn/receptive_field.hpp"
#include "ddcn/reference.hpp"
#include "ddcn/si_loss.hpp"

using namespace ddcn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---------------------------------------------------------------------------

constexpr std::uint64_t conv(std::uint64_t in, std::uint64_t out, std::uint64_t k) { return out * in * k * k + out; }
constexpr std::uint64_t fc(std::uint64_t in, std::uint64_t out) { return in * out + out; }

Outcome parameter_reduction() {
  // Hand count, layer by layer; the VGG fc6 sees 512 x 10 x 7 features.
  const std::uint64_t blocks = conv(3, 64, 3) + conv(64, 64, 3) + conv(64, 128, 3) + conv(128, 128, 3) +
                               conv(128, 256, 3) + 2 * conv(256, 256, 3) + conv(256, 512, 3) +
                               5 * conv(512, 512, 3);
  const std::uint64_t ours = blocks + conv(512, 512, 7) + conv(512, 512, 1) + conv(512, 1, 1);
  const std::uint64_t vgg = blocks + fc(512 * 10 * 7, 4096) + fc(4096, 4096) + fc(4096, 80 * 60);

  const auto t0 = Clock::now();
  const auto r = run_cli("analyze both --width-scale 1");
  const double secs = seconds_since(t0);
  const std::string ours_line = "total Stack 1 (OUR)=" + std::to_string(ours) + "\n";
  const std::string vgg_line = "total Stack 1 (VGG)=" + std::to_string(vgg) + "\n";
  const double ratio = field(r.out, "ratio_vgg_over_ours");
  const bool ok = r.code == 0 && r.out.find(ours_line) != std::string::npos &&
                  r.out.find(vgg_line) != std::string::npos && ratio >= 7.0 && secs < 1.0;
  return {ok, "ours=" + std::to_string(ours) + " vgg=" + std::to_string(vgg) + " ratio=" + fmt("%.6f", ratio) +
                  " exit=" + std::to_string(r.code) + " time=" + fmt("%.3f", secs) + "s"};
}

Outcome resolution_preserved() {
  const auto t0 = Clock::now();
  const auto g = geometry_report(coarse_dilated_spec(1.0, {80, 60}), Size2{80, 60});
  std::size_t bad = 0;
  for (const auto& l : g)
    if (l.size != Size2{80, 60} || l.out != Size2{80, 60}) ++bad;
  const double secs = seconds_since(t0);
  return {bad == 0 && g.size() == 8 && secs < 1.0,
          std::to_string(g.size()) + " layers, " + std::to_string(bad) + " not 80x60, time=" + fmt("%.3f", secs) + "s"};
}

Outcome receptive_fields() {
  const std::vector<RfLayer> one{RfLayer::square(3, 1, 1)};
  const std::vector<RfLayer> two{RfLayer::square(3, 1, 1), RfLayer::square(3, 2, 1)};
  const auto a = receptive_field(one), b = receptive_field(two);
  return {a == ReceptiveField{3, 3} && b == ReceptiveField{7, 7},
          "rf([(3,1,1)])=" + std::to_string(a.h) + " rf([(3,1,1),(3,2,1)])=" + std::to_string(b.h)};
}

Outcome conv_oracle() {
  const auto t0 = Clock::now();
  Rng rng(404);
  double worst = 0.0;
  int checked = 0;
  while (checked < 200) {
    const std::size_t k = 1 + 2 * rng.below(3);
    const std::size_t l = 1 + rng.below(3);
    const Shape4 in{1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8)};
    ConvParams<double> p;
    p.weights = gradcheck::detail::random_tensor(Shape4{1 + rng.below(8), in.c, k, k}, rng);
    p.bias.resize(p.weights.shape().n);
    for (auto& b : p.bias) b = rng.uniform(-1.0, 1.0);
    p.dilation = l;
    p.padding = rng.below(2) ? same_padding(k, k, l) : Padding{rng.below(3), rng.below(3)};
    if (conv_out_extent(in.h, p.padding.h, k, l, 1) == 0 || conv_out_extent(in.w, p.padding.w, k, l, 1) == 0)
      continue;
    const auto x = gradcheck::detail::random_tensor(in, rng);
    const auto fast = conv2d_forward(x, p);
    const auto slow = reference::conv2d_direct(x, p);
    for (std::size_t i = 0; i < fast.size(); ++i)
      worst = std::max(worst, std::abs(fast[i] - slow[i]) / std::max({std::abs(fast[i]), std::abs(slow[i]), 1e-12}));
    ++checked;
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 10.0,
          std::to_string(checked) + " instances, max rel error " + fmt("%.3g", worst) + ", time=" + fmt("%.2f", secs) + "s"};
}

Outcome gradients() {
  const auto t0 = Clock::now();
  const auto results = gradcheck::run_all(5, 20);
  bool ok = true;
  std::ostringstream detail;
  for (const auto& r : results) {
    ok = ok && r.pass() && r.instances >= 20;
    detail << r.op << "=" << fmt("%.2g", r.max_rel_error) << "/" << fmt("%.0e", r.tolerance) << " ";
  }
  const double secs = seconds_since(t0);
  detail << "time=" << fmt("%.2f", secs) << "s";
  return {ok && secs < 60.0, detail.str()};
}

LogDepthPair<double> random_pair(std::size_t n, Rng& rng, double shift) {
  Tensor4<double> truth(Shape4{1, 1, 1, n}), pred(Shape4{1, 1, 1, n});
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = rng.uniform(0.5, 10.0);
    pred[i] = std::log(truth[i]) + rng.uniform(-0.7, 0.7) + shift;
  }
  return LogDepthPair<double>::from_depth(pred, truth);
}

Outcome loss_algebra() {
  const auto t0 = Clock::now();
  Rng rng(606);
  double inv = 0.0, pair_err = 0.0, alpha_gap = 1e300;
  for (int t = 0; t < 50; ++t) {
    const auto p = random_pair(2 + rng.below(63), rng, rng.uniform(-1.0, 1.0));
    const double base = loss_pairwise(p).loss;
    for (double c : {0.1, 1.0, std::numbers::e, 10.0}) {
      auto pred = p.y_pred();
      for (auto& v : pred.data()) v += std::log(c);
      inv = std::max(inv, std::abs(loss_pairwise(LogDepthPair<double>(pred, p.y_true(), p.mask())).loss - base));
    }
    const double slow = reference::loss_pairwise_quadratic(p);
    pair_err = std::max(pair_err, std::abs(slow - loss_reformulated(p)) / std::abs(slow));
    const double a = alpha(p);
    const double best = shifted_error(p, a);
    for (int k = -300; k <= 300; ++k) {
      if (k == 0) continue;
      alpha_gap = std::min(alpha_gap, shifted_error(p, a + 0.01 * k) - best);
    }
  }
  const double secs = seconds_since(t0);
  return {inv <= 1e-9 && pair_err <= 1e-10 && alpha_gap > 0.0 && secs < 10.0,
          "(a) max |dL|=" + fmt("%.2g", inv) + " (b) max rel=" + fmt("%.2g", pair_err) +
              " (c) min D(t)-D(alpha)=" + fmt("%.2g", alpha_gap) + " time=" + fmt("%.2f", secs) + "s"};
}

// ---------------------------------------------------------------------------
// End-to-end runs

const std::string kRoot = (fs::temp_directory_path() / "ddcn_acceptance").string();
const std::string kTrainArgs =
    "train --synthetic 8 --width-scale 0.125 --epochs 300 --lr 0.01 --batch 2 --target-loss 0.01 --seed 0 "
    "--deterministic";

std::size_t epochs_of(const std::string& log, int phase) {
  std::istringstream in(log);
  std::string line;
  std::size_t n = 0;
  const std::string tag = " phase " + std::to_string(phase) + " ";
  while (std::getline(in, line))
    if (line.find(tag) != std::string::npos) ++n;
  return n;
}

Outcome training_smoke(double& minutes) {
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);
  const auto t0 = Clock::now();
  const auto run = run_cli(kTrainArgs + " --out " + kRoot + "/run_a");
  minutes = seconds_since(t0) / 60.0;
  if (run.code != 0) return {false, "train exited with " + std::to_string(run.code)};
  const std::string log = slurp(kRoot + "/run_a/train.log");

  // Same scenes as the trainer's synthetic set, evaluated after training.
  if (run_cli("synth --count 8 --seed 0 --out " + kRoot + "/data").code != 0) return {false, "synth failed"};
  const std::string manifest = kRoot + "/data/manifest.tsv";
  const auto e1 = run_cli("eval --checkpoint " + kRoot + "/run_a/phase1.ddcn --manifest " + manifest + " --split all");
  const auto e2 = run_cli("eval --checkpoint " + kRoot + "/run_a/phase2.ddcn --manifest " + manifest + " --split all");
  const double l1 = field(e1.out, "L"), l2 = field(e2.out, "L");
  const std::size_t n1 = epochs_of(log, 1), n2 = epochs_of(log, 2);
  const bool ok = e1.code == 0 && e2.code == 0 && l1 >= 0.0 && l1 < 0.01 && l2 >= 0.0 && l2 < 0.02 && n1 <= 300 &&
                  n2 <= 300 && minutes < 10.0;
  return {ok, "phase1 L=" + fmt("%.5f", l1) + " after " + std::to_string(n1) + " epochs, two-stack L=" +
                  fmt("%.5f", l2) + " after " + std::to_string(n2) + " epochs, time=" + fmt("%.1f", minutes) + "min"};
}

Outcome determinism() {
  const auto run = run_cli(kTrainArgs + " --out " + kRoot + "/run_b");
  if (run.code != 0) return {false, "second train exited with " + std::to_string(run.code)};
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(kRoot + "/run_a")) {
    const auto name = entry.path().filename().string();
    ++compared;
    if (!fs::exists(kRoot + "/run_b/" + name) || slurp(entry.path().string()) != slurp(kRoot + "/run_b/" + name))
      ++differing;
  }
  std::size_t in_b = 0;
  for (const auto& entry : fs::directory_iterator(kRoot + "/run_b")) (void)entry, ++in_b;
  return {compared >= 4 && differing == 0 && in_b == compared,
          std::to_string(compared) + " files compared (train.log, checkpoints), " + std::to_string(differing) +
              " differ"};
}

Outcome vgg_smoke() {
  const auto r = run_cli("train --arch vgg --synthetic 8 --width-scale 0.125 --epochs 2 --lr 0.01 --batch 2 "
                         "--deterministic --out " + kRoot + "/run_vgg");
  const std::string log = slurp(kRoot + "/run_vgg/train.log");
  const std::size_t n1 = epochs_of(log, 1), n2 = epochs_of(log, 2);
  return {r.code == 0 && n1 == 2 && n2 == 2 && log.find("nan val") == std::string::npos,
          "exit=" + std::to_string(r.code) + " phase1 epochs=" + std::to_string(n1) + " phase2 epochs=" +
              std::to_string(n2)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %d [PRIMARY] %s: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };
  double minutes = 0.0;
  report(1, "parameter reduction >= 7x, exact hand counts", parameter_reduction);
  report(2, "dilated stack keeps 80x60 at every layer", resolution_preserved);
  report(3, "receptive fields 3 and 7", receptive_fields);
  report(4, "dilated convolution equals direct sum", conv_oracle);
  report(5, "analytic gradients match finite differences", gradients);
  report(6, "loss scale invariance, pairwise form, optimal alpha", loss_algebra);
  report(7, "training smoke on 8 synthetic scenes", [&] { return training_smoke(minutes); });
  report(8, "deterministic runs are byte-identical", determinism);
  report(9, "VGG baseline trains for 2 epochs", vgg_smoke);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

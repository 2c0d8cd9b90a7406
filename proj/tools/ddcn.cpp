// ddcn: analyze / gradcheck / synth / train / predict / eval
//
// Exit codes: 0 ok, 1 usage or configuration, 2 data or file format,
// 3 numeric failure (divergence, gradcheck mismatch).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ddcn/arch.hpp"
#include "ddcn/checkpoint.hpp"
#include "ddcn/dataset.hpp"
#include "ddcn/gradcheck.hpp"
#include "ddcn/parallel.hpp"
#include "ddcn/trainer.hpp"

namespace {

using namespace ddcn;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Thread count is left out for the single-threaded commands so their output
// stays byte-stable across machines.
void print_config(const std::string& command, const std::map<std::string, std::string>& kv, bool threaded = true) {
  std::cout << "config command=" << command;
  for (const auto& [k, v] : kv) std::cout << ' ' << k << '=' << v;
  if (threaded) std::cout << " threads=" << thread_cap();
  std::cout << '\n';
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOptions {
  std::string arch = "both";
  std::string input = "80x60";
  double width_scale = 1.0;
};

void print_stack_analysis(const StackSpec& stack, const ParamReport& report) {
  const auto geometry = geometry_report(stack, stack.input);
  std::printf("stack %s input=%zux%s\n", stack.name.c_str(), stack.input_channels, stack.input.str().c_str());
  std::printf("  %-8s %-8s %-9s %-9s %6s %-7s %8s %-9s %12s\n", "layer", "kind", "size", "out", "chan", "kernel",
              "dilation", "rf", "params");
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    const auto& l = stack.layers[i];
    const bool conv = l.kind == LayerKind::Conv;
    std::uint64_t params = 0;
    for (const auto& e : report.per_layer)
      if (e.stack == stack.name && e.layer == l.name) params = e.params;
    const std::string kernel = conv ? std::to_string(l.conv_count) + "x" + l.kernel.str() : "-";
    const std::string rf = geometry[i].rf ? Size2{geometry[i].rf->h, geometry[i].rf->w}.str() : "-";
    std::printf("  %-8s %-8s %-9s %-9s %6zu %-7s %8s %-9s %12llu\n", l.name.c_str(), to_string(l.kind),
                geometry[i].size.str().c_str(), geometry[i].out.str().c_str(), l.out_channels, kernel.c_str(),
                conv ? std::to_string(l.dilation).c_str() : "-", rf.c_str(),
                static_cast<unsigned long long>(params));
  }
  std::printf("total %s=%llu\n", stack.name.c_str(),
              static_cast<unsigned long long>(report.stack_totals.at(stack.name)));
}

int cmd_analyze(const AnalyzeOptions& o) {
  const Size2 input = parse_size2(o.input);
  if (o.arch != "ours" && o.arch != "vgg" && o.arch != "both")
    throw ConfigError("analyze expects ours, vgg or both, got '" + o.arch + "'");
  print_config("analyze", {{"arch", o.arch}, {"input", input.str()}, {"width_scale", detail::format_scale(o.width_scale)}},
               false);

  ArchSpec arch{{}, o.width_scale};
  if (o.arch != "vgg") arch.stacks.push_back(coarse_dilated_spec(o.width_scale, input));
  if (o.arch != "ours") arch.stacks.push_back(coarse_vgg_spec(o.width_scale, Size2{2 * input.h, 2 * input.w}));
  arch.stacks.push_back(fine_spec(o.width_scale, input));

  std::cout << render_table(arch);
  const ParamReport report = count_parameters(arch);
  for (const auto& s : arch.stacks) print_stack_analysis(s, report);

  const std::uint64_t fine = report.stack_totals.at(kStackFine);
  if (o.arch != "vgg") std::printf("framework_ours=%llu\n", static_cast<unsigned long long>(report.stack_totals.at(kStackOurs) + fine));
  if (o.arch != "ours") std::printf("framework_vgg=%llu\n", static_cast<unsigned long long>(report.stack_totals.at(kStackVgg) + fine));
  if (report.ratio_vgg_over_ours) {
    const double framework = static_cast<double>(report.stack_totals.at(kStackVgg) + fine) /
                             static_cast<double>(report.stack_totals.at(kStackOurs) + fine);
    std::cout << "framework_ratio=" << fmt("%.6f", framework) << '\n';
    std::cout << "ratio_vgg_over_ours=" << fmt("%.6f", *report.ratio_vgg_over_ours) << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::size_t instances = 20;
  bool sabotage = false;
};

int cmd_gradcheck(const GradcheckOptions& o) {
  print_config("gradcheck", {{"seed", std::to_string(o.seed)},
                             {"precision", o.precision},
                             {"instances", std::to_string(o.instances)},
                             {"sabotage", o.sabotage ? "true" : "false"},
                             {"step", fmt("%g", gradcheck::kStep)}});
  if (o.precision != "f64") throw ConfigError("gradcheck requires 64-bit precision (--precision f64)");
  if (o.instances < 1) throw ConfigError("gradcheck needs at least one instance per op");
  hooks::sabotage_conv_backward = o.sabotage;
  bool ok = true;
  for (const auto& r : gradcheck::run_all(o.seed, o.instances)) {
    std::printf("op %-16s instances %zu coords %zu max_rel_err %.3e tol %.0e %s\n", r.op.c_str(), r.instances,
                r.coordinates, r.max_rel_error, r.tolerance, r.pass() ? "PASS" : "FAIL");
    ok = ok && r.pass();
  }
  hooks::sabotage_conv_backward = false;
  std::cout << (ok ? "gradcheck PASS" : "gradcheck FAIL") << '\n';
  return ok ? kOk : kNumeric;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::size_t count = 8;
  std::uint64_t seed = 0;
  std::string out = "synthetic";
  std::string input = "80x60";
};

int cmd_synth(const SynthOptions& o) {
  const Size2 size = parse_size2(o.input);
  print_config("synth", {{"count", std::to_string(o.count)},
                         {"seed", std::to_string(o.seed)},
                         {"out", o.out},
                         {"input", size.str()}},
               false);
  std::filesystem::create_directories(o.out);
  std::vector<ManifestEntry> entries;
  const auto samples = synthetic_set(o.count, o.seed, size);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04zu", i);
    save_pair(samples[i], o.out + "/" + id + ".ppm", o.out + "/" + id + ".pgm");
    entries.push_back({id, std::string(id) + ".ppm", std::string(id) + ".pgm"});
  }
  write_manifest(o.out + "/manifest.tsv", entries);
  std::cout << "wrote " << samples.size() << " scenes and " << o.out << "/manifest.tsv\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  TrainConfig cfg;
  std::optional<std::size_t> epochs;
  std::string arch = "ours";
  std::string phase = "both";
  bool freeze_coarse = true;
  std::string manifest;
  std::size_t synthetic = 0;
  std::size_t synthetic_val = 2;
  std::string out = "run";
  bool deterministic = false;
  std::string resume;
  std::string coarse;
  std::string precision = "f32";
  bool keep_checkpoints = false;
};

struct DataSplit {
  std::vector<Sample> train, val;
};

DataSplit load_training_data(const TrainOptions& o) {
  if (o.synthetic > 0 && !o.manifest.empty()) throw ConfigError("--synthetic and --manifest are exclusive");
  if (o.synthetic > 0)
    return {synthetic_set(o.synthetic, o.cfg.seed, kOutputSize),
            synthetic_set(o.synthetic_val, o.cfg.seed, kOutputSize, kSyntheticValOffset)};
  if (o.manifest.empty()) throw ConfigError("train needs --manifest <path> or --synthetic <n>");
  const Manifest m = read_manifest(o.manifest);
  std::vector<std::string> ids;
  std::map<std::string, ManifestEntry> by_id;
  for (const auto& e : m.entries) {
    ids.push_back(e.id);
    by_id[e.id] = e;
  }
  const DatasetIndex index = shuffle_split(ids, o.cfg.seed, default_split_sizes(ids.size()));
  auto load = [&](Split s) {
    Manifest part;
    for (const auto& id : index.ids(s)) part.entries.push_back(by_id.at(id));
    return load_manifest_samples(part, kOutputSize);
  };
  return {load(Split::Train), load(Split::Val)};
}

template <Real T>
int run_train(TrainOptions o) {
  DataSplit data = load_training_data(o);
  std::filesystem::create_directories(o.out);
  std::ofstream log_file(o.out + "/train.log", std::ios::trunc);
  Trainer<T> trainer(o.cfg, std::move(data.train), std::move(data.val), o.out, [&](const std::string& line) {
    std::cout << line << '\n' << std::flush;
    log_file << line << '\n' << std::flush;
  });
  trainer.keep_every_epoch = o.keep_checkpoints;
  if (!o.coarse.empty()) trainer.load_coarse(load_checkpoint(o.coarse));
  if (!o.resume.empty()) trainer.resume(load_checkpoint(o.resume));
  const TrainResult r = trainer.run();
  auto last = [](const std::vector<double>& v) { return v.empty() ? std::string("nan") : detail::fmt_value(v.back()); };
  std::cout << "final phase1_train_loss " << last(r.phase1_losses) << " phase2_train_loss " << last(r.phase2_losses)
            << " checkpoint " << r.last_checkpoint << '\n';
  return kOk;
}

int cmd_train(TrainOptions o) {
  if (o.deterministic) set_thread_cap(1);
  o.cfg.arch = parse_coarse_arch(o.arch);
  o.cfg.freeze_coarse_in_phase2 = o.freeze_coarse;
  if (o.epochs) o.cfg.epochs_phase1 = o.cfg.epochs_phase2 = *o.epochs;
  if (o.phase == "1") o.cfg.phases = 1;
  else if (o.phase == "2") o.cfg.phases = 2;
  else if (o.phase == "both") o.cfg.phases = 3;
  else throw ConfigError("--phase expects 1, 2 or both");
  if (o.cfg.phases == 2 && o.coarse.empty() && o.resume.empty())
    throw ConfigError("--phase 2 needs trained coarse weights (--coarse <checkpoint>) or --resume");
  o.cfg.check();

  auto kv = o.cfg.echo();
  kv["phase"] = o.phase;
  kv["out"] = o.out;
  kv["precision"] = o.precision;
  kv["deterministic"] = o.deterministic ? "true" : "false";
  kv["data"] = o.synthetic > 0 ? "synthetic:" + std::to_string(o.synthetic) + "+val:" + std::to_string(o.synthetic_val)
                               : "manifest:" + o.manifest;
  if (!o.resume.empty()) kv["resume"] = o.resume;
  if (!o.coarse.empty()) kv["coarse"] = o.coarse;
  print_config("train", kv);

  if (o.precision == "f32") return run_train<float>(std::move(o));
  if (o.precision == "f64") return run_train<double>(std::move(o));
  throw ConfigError("--precision expects f32 or f64");
}

// ---------------------------------------------------------------------------
// predict

struct PredictOptions {
  std::string checkpoint;
  std::string rgb;
  std::string out = "depth.pgm";
  std::string preview;
  bool deterministic = false;
};

template <Real T>
int run_predict(const PredictOptions& o, const Checkpoint& ckpt) {
  bool with_fine = false;
  const Pipeline<T> model = load_pipeline<T>(ckpt, &with_fine);
  const Tensor4<float> rgb = load_rgb(o.rgb, kOutputSize);
  const Tensor4<T> pred = model.predict(rgb, with_fine);
  const Shape4 s = pred.shape();
  DepthImage img{s.w, s.h, 65535, std::vector<std::uint16_t>(s.h * s.w)};
  double lo = 1e300, hi = -1e300, sum = 0.0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double mm = std::clamp(std::round(std::exp(static_cast<double>(pred[i])) * 1000.0), 1.0, 65535.0);
    img.pixels[i] = static_cast<std::uint16_t>(mm);
    lo = std::min(lo, mm / 1000.0);
    hi = std::max(hi, mm / 1000.0);
    sum += mm / 1000.0;
  }
  write_pgm16(o.out, img);
  if (!o.preview.empty()) {
    // Non-normative: min-max stretched 8-bit view.
    std::vector<std::uint8_t> gray(img.pixels.size());
    for (std::size_t i = 0; i < gray.size(); ++i) {
      const double v = hi > lo ? (img.pixels[i] / 1000.0 - lo) / (hi - lo) : 0.0;
      gray[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
    write_pgm8(o.preview, s.w, s.h, gray);
  }
  std::cout << "wrote " << o.out << " size=" << Size2{s.h, s.w}.str() << " depth_m min=" << fmt("%.4f", lo)
            << " max=" << fmt("%.4f", hi) << " mean=" << fmt("%.4f", sum / static_cast<double>(img.pixels.size()))
            << '\n';
  return kOk;
}

int cmd_predict(const PredictOptions& o) {
  if (o.deterministic) set_thread_cap(1);
  print_config("predict", {{"checkpoint", o.checkpoint}, {"rgb", o.rgb}, {"out", o.out},
                           {"preview", o.preview.empty() ? "none" : o.preview}});
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  return ckpt.meta("precision") == "f64" ? run_predict<double>(o, ckpt) : run_predict<float>(o, ckpt);
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string mode = "model";
  double scale = 2.0;
  std::uint64_t seed = 0;
  bool deterministic = false;
};

std::vector<Sample> load_split(const EvalOptions& o) {
  const Manifest m = read_manifest(o.manifest);
  if (o.split == "all") return load_manifest_samples(m, kOutputSize);
  std::vector<std::string> ids;
  std::map<std::string, ManifestEntry> by_id;
  for (const auto& e : m.entries) {
    ids.push_back(e.id);
    by_id[e.id] = e;
  }
  const DatasetIndex index = shuffle_split(ids, o.seed, default_split_sizes(ids.size()));
  Manifest part;
  for (const auto& id : index.ids(parse_split(o.split))) part.entries.push_back(by_id.at(id));
  return load_manifest_samples(part, kOutputSize);
}

template <Real T>
Metrics eval_model(const Checkpoint& ckpt, const std::vector<Sample>& samples) {
  bool with_fine = false;
  const Pipeline<T> model = load_pipeline<T>(ckpt, &with_fine);
  return evaluate_predictions(model_predictions(model, with_fine, samples), samples);
}

int cmd_eval(const EvalOptions& o) {
  if (o.deterministic) set_thread_cap(1);
  if (o.mode != "model" && o.mode != "passthrough" && o.mode != "scaled")
    throw ConfigError("--mode expects model, passthrough or scaled");
  if (o.mode == "model" && o.checkpoint.empty()) throw ConfigError("eval --mode model needs --checkpoint");
  if (o.manifest.empty()) throw ConfigError("eval needs --manifest");
  print_config("eval", {{"checkpoint", o.checkpoint.empty() ? "none" : o.checkpoint},
                        {"manifest", o.manifest},
                        {"split", o.split},
                        {"mode", o.mode},
                        {"scale", detail::format_scale(o.scale)},
                        {"seed", std::to_string(o.seed)}});
  const auto samples = load_split(o);
  Metrics m;
  if (o.mode == "passthrough") {
    m = evaluate_predictions(truth_predictions<double>(samples), samples);
  } else if (o.mode == "scaled") {
    if (!(o.scale > 0.0)) throw ConfigError("--scale must be positive");
    m = evaluate_predictions(truth_predictions<double>(samples, o.scale), samples);
  } else {
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    m = ckpt.meta("precision") == "f64" ? eval_model<double>(ckpt, samples) : eval_model<float>(ckpt, samples);
  }
  std::cout << "L=" << fmt("%.9g", m.L) << " D=" << fmt("%.9g", m.D) << " rmse_log=" << fmt("%.9g", m.rmse_log)
            << " n_images=" << m.n_images << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dilated coarse-to-fine depth network: analysis, training and inference"};
  app.set_config("--config", "", "key=value file whose entries are overridden by flags");
  app.require_subcommand(1);

  AnalyzeOptions an;
  auto* analyze = app.add_subcommand("analyze", "per-layer geometry, receptive fields and parameter counts");
  analyze->add_option("arch", an.arch, "ours | vgg | both")->capture_default_str();
  analyze->add_option("--input", an.input, "input size HxW of the dilated stack (VGG sees twice this)")->capture_default_str();
  analyze->add_option("--width-scale", an.width_scale, "channel multiplier in (0, 1]")->capture_default_str();

  GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
  grad->add_option("--seed", gc.seed)->capture_default_str();
  grad->add_option("--precision", gc.precision, "must be f64")->capture_default_str();
  grad->add_option("--instances", gc.instances, "random instances per op")->capture_default_str();
  grad->add_flag("--sabotage", gc.sabotage, "perturb the convolution backward pass (negative control)");

  SynthOptions sy;
  auto* synth = app.add_subcommand("synth", "write synthetic RGB/depth scenes and a manifest");
  synth->add_option("--count", sy.count)->capture_default_str();
  synth->add_option("--seed", sy.seed)->capture_default_str();
  synth->add_option("--out", sy.out)->capture_default_str();
  synth->add_option("--input", sy.input, "scene size HxW")->capture_default_str();

  TrainOptions tr;
  auto* train = app.add_subcommand("train", "two-phase SGD training");
  train->add_option("--arch", tr.arch, "coarse stack: ours | vgg")->capture_default_str();
  train->add_option("--width-scale", tr.cfg.width_scale)->capture_default_str();
  train->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
  train->add_option("--momentum", tr.cfg.momentum)->capture_default_str();
  train->add_option("--batch", tr.cfg.batch_size)->capture_default_str();
  train->add_option("--epochs", tr.epochs, "epochs for each phase");
  train->add_option("--epochs-phase1", tr.cfg.epochs_phase1)->capture_default_str();
  train->add_option("--epochs-phase2", tr.cfg.epochs_phase2)->capture_default_str();
  train->add_option("--seed", tr.cfg.seed)->capture_default_str();
  train->add_option("--phase", tr.phase, "1 | 2 | both")->capture_default_str();
  train->add_option("--freeze-coarse", tr.freeze_coarse, "keep coarse weights fixed in phase 2")->capture_default_str();
  train->add_option("--manifest", tr.manifest);
  train->add_option("--synthetic", tr.synthetic, "train on n synthetic scenes");
  train->add_option("--synthetic-val", tr.synthetic_val, "synthetic validation scenes")->capture_default_str();
  train->add_option("--out", tr.out, "output directory")->capture_default_str();
  train->add_flag("--deterministic", tr.deterministic, "single-threaded execution");
  train->add_option("--resume", tr.resume, "continue from a checkpoint");
  train->add_option("--coarse", tr.coarse, "trained coarse checkpoint for --phase 2");
  train->add_option("--precision", tr.precision, "f32 | f64")->capture_default_str();
  train->add_option("--target-loss", tr.cfg.target_loss, "end a phase once its train loss drops below this");
  train->add_flag("--zero-init-final", tr.cfg.zero_init_final, "start the fine prediction layer at zero");
  train->add_flag("--keep-checkpoints", tr.keep_checkpoints, "also keep one checkpoint per epoch");

  PredictOptions pr;
  auto* predict = app.add_subcommand("predict", "depth map for one RGB image");
  predict->add_option("--checkpoint", pr.checkpoint)->required();
  predict->add_option("--rgb", pr.rgb, "binary PPM input")->required();
  predict->add_option("--out", pr.out, "16-bit PGM output (mm)")->capture_default_str();
  predict->add_option("--preview", pr.preview, "optional 8-bit preview PGM");
  predict->add_flag("--deterministic", pr.deterministic);

  EvalOptions ev;
  auto* eval = app.add_subcommand("eval", "metrics on a manifest split");
  eval->add_option("--checkpoint", ev.checkpoint);
  eval->add_option("--manifest", ev.manifest)->required();
  eval->add_option("--split", ev.split, "train | val | test | all")->capture_default_str();
  eval->add_option("--mode", ev.mode, "model | passthrough | scaled")->capture_default_str();
  eval->add_option("--scale", ev.scale, "factor for --mode scaled")->capture_default_str();
  eval->add_option("--seed", ev.seed, "split seed (as used for training)")->capture_default_str();
  eval->add_flag("--deterministic", ev.deterministic);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*analyze) return cmd_analyze(an);
    if (*grad) return cmd_gradcheck(gc);
    if (*synth) return cmd_synth(sy);
    if (*train) return cmd_train(tr);
    if (*predict) return cmd_predict(pr);
    if (*eval) return cmd_eval(ev);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const GeometryError& e) {
    std::cerr << "geometry error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "rescan/rescan.hpp"

namespace fs = std::filesystem;
using namespace rescan;

namespace {

enum ExitCode { kOk = 0, kCheckFailed = 1, kConfigError = 2, kIoError = 3, kNumericError = 4, kInternal = 5 };

struct ModelFlags {
  std::string arch = "rescan";
  int depth = 5;
  int width = 8;
  std::string unit = "auto";
  std::string framework = "full";
  int stages = 4;
  bool no_se = false;
  bool plain = false;
};

void add_model_options(CLI::App* sub, ModelFlags& m) {
  sub->add_option("--arch", m.arch, "scan | rescan")->check(CLI::IsMember({"scan", "rescan"}))->capture_default_str();
  sub->add_option("--depth", m.depth, "conv layers including the 1x1 decoder")->capture_default_str();
  sub->add_option("--width", m.width, "hidden channels")->capture_default_str();
  sub->add_option("--unit", m.unit, "auto | none | rnn | gru | lstm (auto: gru, or none for iter)")
      ->capture_default_str();
  sub->add_option("--framework", m.framework, "iter | additive | full")->capture_default_str();
  sub->add_option("--stages", m.stages, "recurrent stages S")->capture_default_str();
  sub->add_flag("--no-se", m.no_se, "disable squeeze-and-excitation");
  sub->add_flag("--plain", m.plain, "all dilations 1");
}

RescanConfig model_config(const ModelFlags& m, int channels) {
  ScanConfig scan;
  scan.depth = m.depth;
  scan.width = m.width;
  scan.in_channels = channels;
  scan.out_channels = channels;
  scan.use_se = !m.no_se;
  scan.all_dilation_one = m.plain;
  if (m.arch == "scan") return scan_only(scan);
  RescanConfig c;
  c.scan = scan;
  c.stages = m.stages;
  c.framework = parse_framework(m.framework);
  if (m.unit == "auto") {
    c.unit = c.framework == Framework::kIter ? UnitKind::kNone : UnitKind::kGru;
  } else {
    c.unit = parse_unit(m.unit);
  }
  validate(c);
  return c;
}

std::string describe(const RescanConfig& c) {
  std::ostringstream os;
  os << "depth=" << c.scan.depth << " width=" << c.scan.width << " stages=" << c.stages
     << " unit=" << unit_name(c.unit) << " framework=" << framework_name(c.framework)
     << " se=" << (c.scan.use_se ? "on" : "off") << " dilations=";
  const auto schedule = dilation_schedule(c.scan);
  for (std::size_t i = 0; i < schedule.size(); ++i) os << (i ? "," : "") << schedule[i];
  return os.str();
}

const char* verdict(bool ok) { return ok ? "PASS" : "FAIL"; }

// Images named on the command line; directories contribute their *.png files.
std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& s : inputs) {
    const fs::path p(s);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".png") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw IoError("no such input: " + p.string());
    }
  }
  if (out.empty()) throw ConfigError("derain: no input images");
  return out;
}

struct SynthFlags {
  std::string out;
  std::string from_manifest;
  int pairs = 25;
  int test_pairs = 5;
  int size = 64;
  int channels = 3;
  int layers = 3;
  std::string model = "eq2";
  std::uint64_t seed = 1;
};

int run_synth(const SynthFlags& f) {
  if (!f.from_manifest.empty()) {
    regenerate_from_manifest(f.from_manifest, f.out);
    std::cout << "regenerated pairs from " << f.from_manifest << " into " << f.out << "\n";
    return kOk;
  }
  DatasetSpec spec;
  spec.model = parse_rain_model(f.model);
  spec.size = f.size;
  spec.channels = f.channels;
  spec.layers = f.layers;
  spec.test_pairs = f.test_pairs;
  if (f.test_pairs < 0 || f.test_pairs > f.pairs) throw ConfigError("synth: test-pairs must lie in [0, pairs]");
  const auto records = make_dataset(f.pairs, spec, f.out, f.seed);
  const auto test = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.split == "test"; });
  std::cout << "wrote " << records.size() << " pairs (" << records.size() - test << " train, " << test
            << " test) to " << f.out << "\nmanifest: " << (fs::path(f.out) / "manifest.txt").string() << "\n";
  return kOk;
}

struct TrainFlags {
  std::string data;
  std::string out;
  std::string log;
  std::string checkpoint_dir;
  int iterations = 2000;
  int batch = 16;
  int patch = 64;
  int patches_per_image = 100;
  double lr = 5e-3;
  std::vector<int> drops = {1200, 1700};
  double drop_factor = 10.0;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;
  int eval_every = 0;
  int print_every = 100;
  bool full_scale = false;
};

int run_train(const ModelFlags& m, const TrainFlags& f) {
  const Dataset data = load_dataset(f.data);
  if (data.train.empty()) throw ConfigError("train: dataset " + f.data + " has no train split");
  const RescanConfig config = model_config(m, data.train.front().rainy.channels);

  TrainConfig tc;
  tc.patch_size = f.patch;
  tc.patches_per_image = f.patches_per_image;
  tc.batch_size = f.batch;
  tc.iterations = f.iterations;
  tc.learning_rate = f.lr;
  tc.lr_drops = f.drops;
  tc.drop_factor = f.drop_factor;
  if (f.full_scale) {
    const TrainConfig full = TrainConfig::full_scale();
    tc.batch_size = full.batch_size;
    tc.iterations = full.iterations;
    tc.lr_drops = full.lr_drops;
  }
  tc.seed = f.seed;
  tc.checkpoint_every = f.checkpoint_every;
  tc.eval_every = f.eval_every;
  const fs::path out(f.out);
  tc.checkpoint_dir = !f.checkpoint_dir.empty() ? fs::path(f.checkpoint_dir)
                      : out.has_parent_path()   ? out.parent_path()
                                                : fs::path(".");
  validate(tc);

  RescanModel<float> model(config, f.seed);
  const std::size_t count = model.parameter_count();
  const std::size_t analytic = analytic_parameter_count(config);
  std::cout << "model: " << describe(config) << "\n"
            << "parameters: " << count << " (analytic " << analytic << ") " << verdict(count == analytic) << "\n"
            << "training: " << tc.iterations << " iterations, batch " << tc.batch_size << ", patch "
            << tc.patch_size << ", " << data.train.size() << " train / " << data.test.size() << " test images\n"
            << std::flush;

  const auto progress = [&](int it, double loss, double lr) {
    if (f.print_every > 0 && ((it + 1) % f.print_every == 0 || it + 1 == tc.iterations)) {
      std::fprintf(stderr, "iter %6d  loss %.6g  lr %.3g\n", it + 1, loss, lr);
    }
  };
  const auto result = train(model, data.train, data.test, tc, progress);
  save_model(model, out);
  const fs::path log_path = f.log.empty() ? fs::path(out.string() + ".log.csv") : fs::path(f.log);
  write_csv(log_path, result.log);
  std::cout << "checkpoint: " << out.string() << "\nlog: " << log_path.string() << "\n";
  if (!data.test.empty()) {
    const MetricReport report = evaluate(model, data.test);
    std::cout << std::fixed << std::setprecision(4) << "test PSNR " << report.mean_psnr() << " dB (rainy "
              << report.baseline_psnr() << ")  SSIM " << report.mean_ssim() << " (rainy " << report.baseline_ssim()
              << ")\n";
    std::cout.unsetf(std::ios::fixed);
  }
  return count == analytic ? kOk : kCheckFailed;
}

struct DerainFlags {
  std::string checkpoint;
  std::vector<std::string> inputs;
  std::string out_dir;
  bool dump_stages = false;
  bool raw = false;
};

int run_derain(const DerainFlags& f) {
  const auto model = load_model<float>(f.checkpoint);
  const auto inputs = expand_inputs(f.inputs);
  std::error_code ec;
  fs::create_directories(f.out_dir, ec);
  if (ec) throw IoError("cannot create directory " + f.out_dir + ": " + ec.message());
  const fs::path dir(f.out_dir);
  for (const auto& path : inputs) {
    const Image rainy = read_png(path);
    const DerainOutput out = derain_image(model, rainy);
    const std::string stem = path.stem().string();
    write_png(dir / (stem + "_derained.png"), out.background);
    if (f.raw) write_raw(dir / (stem + "_derained.raw"), out.background);
    if (f.dump_stages) {
      for (std::size_t s = 0; s < out.stages.size(); ++s) {
        const std::string name = stem + "_stage" + std::to_string(s + 1);
        write_residual_png(dir / (name + ".png"), out.stages[s]);
        if (f.raw) write_raw(dir / (name + ".raw"), out.stages[s]);
      }
    }
    std::cout << path.string() << " -> " << (dir / (stem + "_derained.png")).string() << "\n";
  }
  return kOk;
}

struct EvalFlags {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string csv;
};

int run_eval(const EvalFlags& f) {
  const auto model = load_model<float>(f.checkpoint);
  const Dataset data = load_dataset(f.data);
  std::vector<Sample> samples;
  if (f.split == "train" || f.split == "all") samples.insert(samples.end(), data.train.begin(), data.train.end());
  if (f.split == "test" || f.split == "all") samples.insert(samples.end(), data.test.begin(), data.test.end());
  if (samples.empty()) throw ConfigError("eval: split '" + f.split + "' of " + f.data + " is empty");
  const MetricReport report = evaluate(model, samples);
  write_summary(std::cout, report);
  if (!f.csv.empty()) {
    write_csv(fs::path(f.csv), report);
    std::cout << "csv: " << f.csv << "\n";
  }
  return kOk;
}

int run_rf_check(int depth, bool plain, std::uint64_t seed) {
  ScanConfig scan;
  scan.depth = depth;
  const int analytic = receptive_field(depth);
  scan.all_dilation_one = plain;
  const FieldProbe probe = probe_receptive_field(scan, seed);
  bool ok = false;
  if (plain) {
    const int expected = 2 * depth - 1;
    ok = probe.height == expected && probe.width == expected && expected < analytic;
    std::cout << "depth " << depth << " plain: empirical " << probe.height << "x" << probe.width << ", expected "
              << expected << "x" << expected << ", dilated analytic " << analytic << "x" << analytic << "  "
              << verdict(ok) << "\n";
  } else {
    ok = probe.height == analytic && probe.width == analytic;
    std::cout << "depth " << depth << ": analytic " << analytic << "x" << analytic << ", empirical " << probe.height
              << "x" << probe.width << "  " << verdict(ok) << "\n";
  }
  return ok ? kOk : kCheckFailed;
}

int run_grad_check(const ModelFlags& m, int samples, std::uint64_t seed, double tolerance) {
  const RescanConfig config = model_config(m, 3);
  const GradCheckReport report = grad_check(config, samples, seed);
  const bool ok = report.max_rel_error < tolerance;
  std::cout << "model: " << describe(config) << "\n"
            << "checked " << report.checked << " parameters, max relative error " << std::scientific
            << std::setprecision(3) << report.max_rel_error << " at " << report.worst << " (tolerance "
            << tolerance << ")  " << verdict(ok) << "\n";
  std::cout.unsetf(std::ios::scientific);
  return ok ? kOk : kCheckFailed;
}

std::size_t weight_count(const ConvKernel<float>& k) { return k.weight.defined() ? k.weight.numel() : 0; }
std::size_t bias_count(const ConvKernel<float>& k) { return k.bias.defined() ? k.bias.numel() : 0; }

int run_param_audit(const std::string& which, int in, int width) {
  std::mt19937_64 rng(1);
  const ConvKernel<float> plain = make_conv<float>(in, width, 3, 1, true, rng);
  const std::size_t plain_weights = weight_count(plain);
  std::cout << "plain 3x3 conv " << in << "->" << width << ": " << plain_weights << " weights + "
            << bias_count(plain) << " biases\n";
  std::vector<UnitKind> units;
  if (which == "all") units = {UnitKind::kRnn, UnitKind::kGru, UnitKind::kLstm};
  else units = {parse_unit(which)};
  bool all_ok = true;
  for (UnitKind kind : units) {
    if (kind == UnitKind::kNone) throw ConfigError("param-audit: unit must be rnn, gru or lstm");
    const auto unit = make_unit<float>(kind, in, width, 1, rng);
    const std::size_t weights =
        weight_count(unit.input_gates) + weight_count(unit.state_gates) + weight_count(unit.state_candidate);
    const std::size_t biases = bias_count(unit.input_gates) + bias_count(unit.state_gates) + bias_count(unit.state_candidate);
    const int claimed = kind == UnitKind::kRnn ? 2 : kind == UnitKind::kGru ? 3 : 4;
    const bool ok = weights == static_cast<std::size_t>(claimed) * plain_weights;
    all_ok = all_ok && ok;
    std::cout << std::left << std::setw(5) << unit_name(kind) << std::right << ": " << weights << " weights + "
              << biases << " biases, ratio " << std::fixed << std::setprecision(3)
              << static_cast<double>(weights) / plain_weights << " (expected " << claimed << ".000)  "
              << verdict(ok) << "\n";
    std::cout.unsetf(std::ios::fixed);
  }
  return all_ok ? kOk : kCheckFailed;
}

void print_effective(const CLI::App* sub) {
  std::cout << "# effective configuration (usable with --config)\n[" << sub->get_name() << "]\n"
            << sub->config_to_str(true, false) << "\n"
            << std::flush;
}

}  // namespace

int main(int argc, char** argv) {
  detail::tune_allocator();
  CLI::App app{"RESCAN single-image rain removal toolkit"};
  app.set_config("--config", "", "key=value config file with [command] sections");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  SynthFlags synth;
  auto* synth_cmd = app.add_subcommand("synth", "render a synthetic rainy/clean dataset");
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--pairs", synth.pairs, "total pairs")->capture_default_str();
  synth_cmd->add_option("--test-pairs", synth.test_pairs, "pairs held out as test split")->capture_default_str();
  synth_cmd->add_option("--size", synth.size, "square image side")->capture_default_str();
  synth_cmd->add_option("--channels", synth.channels, "1 or 3")->capture_default_str();
  synth_cmd->add_option("--layers", synth.layers, "streak layers (eq2/eq3)")->capture_default_str();
  synth_cmd->add_option("--model", synth.model, "eq1 | eq2 | eq3")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "master seed")->capture_default_str();
  synth_cmd->add_option("--from-manifest", synth.from_manifest, "re-render the pairs listed in a manifest");

  ModelFlags train_model;
  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train SCAN or RESCAN on a synthetic dataset");
  train_cmd->add_option("--data", train_flags.data, "dataset directory")->required();
  train_cmd->add_option("--out", train_flags.out, "checkpoint path")->required();
  add_model_options(train_cmd, train_model);
  train_cmd->add_option("--iterations", train_flags.iterations)->capture_default_str();
  train_cmd->add_option("--batch", train_flags.batch)->capture_default_str();
  train_cmd->add_option("--patch", train_flags.patch, "square patch side")->capture_default_str();
  train_cmd->add_option("--patches-per-image", train_flags.patches_per_image)->capture_default_str();
  train_cmd->add_option("--lr", train_flags.lr, "initial Adam learning rate")->capture_default_str();
  train_cmd->add_option("--drops", train_flags.drops, "iterations where lr is divided")
      ->delimiter(',')
      ->capture_default_str();
  train_cmd->add_option("--drop-factor", train_flags.drop_factor)->capture_default_str();
  train_cmd->add_option("--seed", train_flags.seed, "weights, patches and batch order")->capture_default_str();
  train_cmd->add_option("--checkpoint-every", train_flags.checkpoint_every, "0 disables")->capture_default_str();
  train_cmd->add_option("--checkpoint-dir", train_flags.checkpoint_dir, "default: next to --out");
  train_cmd->add_option("--eval-every", train_flags.eval_every, "0 disables")->capture_default_str();
  train_cmd->add_option("--log", train_flags.log, "CSV loss log (default <out>.log.csv)");
  train_cmd->add_option("--print-every", train_flags.print_every)->capture_default_str();
  train_cmd->add_flag("--full-scale", train_flags.full_scale,
                      "batch 64, 20000 iterations, drops 15000,17500 (overrides those flags)");

  DerainFlags derain;
  auto* derain_cmd = app.add_subcommand("derain", "remove rain from PNG images");
  derain_cmd->add_option("--checkpoint", derain.checkpoint)->required();
  derain_cmd->add_option("inputs,--input", derain.inputs, "PNG files or directories")->required();
  derain_cmd->add_option("--out-dir", derain.out_dir)->required();
  derain_cmd->add_flag("--dump-stages", derain.dump_stages, "write each stage's streak estimate");
  derain_cmd->add_flag("--raw", derain.raw, "also write raw float32 dumps");

  EvalFlags eval;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--data", eval.data)->required();
  eval_cmd->add_option("--split", eval.split)->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
  eval_cmd->add_option("--csv", eval.csv, "per-image CSV report");

  int rf_depth = 7;
  bool rf_plain = false;
  std::uint64_t rf_seed = 1;
  auto* rf_cmd = app.add_subcommand("rf-check", "analytic vs empirical receptive field");
  rf_cmd->add_option("--depth", rf_depth)->capture_default_str();
  rf_cmd->add_flag("--plain", rf_plain, "all dilations 1");
  rf_cmd->add_option("--seed", rf_seed)->capture_default_str();

  ModelFlags gc_model;
  gc_model.width = 4;
  gc_model.stages = 2;
  int gc_samples = 50;
  std::uint64_t gc_seed = 1;
  double gc_tolerance = 1e-4;
  auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference check of the full model in double");
  add_model_options(gc_cmd, gc_model);
  gc_cmd->add_option("--samples", gc_samples, "parameters to check")->capture_default_str();
  gc_cmd->add_option("--seed", gc_seed)->capture_default_str();
  gc_cmd->add_option("--tolerance", gc_tolerance)->capture_default_str();

  std::string audit_unit = "all";
  int audit_in = 8;
  int audit_width = 8;
  auto* audit_cmd = app.add_subcommand("param-audit", "recurrent unit weights vs a plain conv layer");
  audit_cmd->add_option("--unit", audit_unit, "rnn | gru | lstm | all")->capture_default_str();
  audit_cmd->add_option("--in", audit_in, "input channels")->capture_default_str();
  audit_cmd->add_option("--width", audit_width, "output channels")->capture_default_str();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    for (auto* sub : app.get_subcommands()) print_effective(sub);
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(train_model, train_flags);
    if (*derain_cmd) return run_derain(derain);
    if (*eval_cmd) return run_eval(eval);
    if (*rf_cmd) return run_rf_check(rf_depth, rf_plain, rf_seed);
    if (*gc_cmd) return run_grad_check(gc_model, gc_samples, gc_seed, gc_tolerance);
    if (*audit_cmd) return run_param_audit(audit_unit, audit_in, audit_width);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIoError;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}

// attnmvs: synthetic data, training, inference, fusion, evaluation and gradient checks.
//
// Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "attnmvs/attnmvs.hpp"

namespace fs = std::filesystem;
using namespace attnmvs;

namespace {

struct Common {
  int threads = 0;
  std::string out;
};

constexpr const char* kConfigKeyGroup = "Config keys";

// Every option of the selected subcommand, as "--flag value" lines, so a run
// can be repeated from its own output. Unset config-key flags are left out:
// their values come from --config and are echoed once resolved.
void echo_effective_config(const CLI::App& sub) {
  std::cerr << "# attnmvs " << sub.get_name() << "\n";
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name().empty()) continue;
    if (opt->get_group() == kConfigKeyGroup && opt->count() == 0) continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    if (opt->get_type_size() == 0) value = opt->count() ? "true" : "false";
    std::cerr << "#   " << opt->get_name() << " " << (value.empty() ? "\"\"" : value) << "\n";
  }
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string scan = "scan1";
  int views = 3;
  std::uint64_t seed = 0;
  int height = 96, width = 96;
  std::string geometry = "steps";
  double arc_step = 10.0;
};

int run_synth(const SynthArgs& a, const Common& c) {
  if (c.out.empty()) throw ConfigError("synth: --out is required");
  SynthConfig cfg;
  cfg.height = a.height;
  cfg.width = a.width;
  cfg.views = a.views;
  cfg.geometry = parse_geometry(a.geometry);
  cfg.arc_step_deg = a.arc_step;
  cfg.validate();
  const auto scene = generate_synthetic_scene<float>(a.seed, cfg);
  write_scene(c.out, a.scan, scene);
  std::cout << "wrote " << scene.images.size() << " views of a " << geometry_name(cfg.geometry) << " scene to "
            << (fs::path(c.out) / a.scan).string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, dataset, scan = "scan1";
  std::map<std::string, std::string> settings;  // config key -> flag value
};

TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  for (const auto& [key, value] : a.settings)
    if (!value.empty()) apply_setting(cfg, key, value);
  cfg.validate();
  return cfg;
}

template <typename T>
int train_with(const TrainConfig& cfg, const TrainArgs& a, const Common& c) {
  const auto data = load_scan<T>(a.dataset, a.scan, cfg.train_views, cfg.levels);
  TrainOptions opt;
  opt.out_dir = c.out;
  opt.on_step = [](const StepRecord& r) {
    std::printf("step %lld epoch %d lr %.3g loss %.6f\n", static_cast<long long>(r.step), r.epoch, r.lr, r.loss);
    std::fflush(stdout);
  };
  const auto result = train(cfg, data, opt);
  std::printf("epoch mean loss: first %.6f last %.6f\n", result.epoch_mean_loss.front(), result.epoch_mean_loss.back());
  std::cout << "checkpoint: " << result.last_checkpoint.string() << "\n";
  return 0;
}

int run_train(const TrainArgs& a, const Common& c) {
  if (a.dataset.empty() || c.out.empty()) throw ConfigError("train: --dataset and --out are required");
  const auto cfg = resolve_train_config(a);
  std::istringstream resolved(format_train_config(cfg));
  std::cerr << "# resolved training config\n";
  for (std::string line; std::getline(resolved, line);) std::cerr << "#   " << line << "\n";
  fs::create_directories(c.out);
  std::ofstream(fs::path(c.out) / "config.txt") << format_train_config(cfg);
  return cfg.precision == 64 ? train_with<double>(cfg, a, c) : train_with<float>(cfg, a, c);
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string checkpoint, dataset, scan = "scan1";
  int views = 0;  // 0: eval_views from the checkpoint config
  std::vector<int> refs;
  int precision = 32;
};

template <typename T>
int infer_with(const InferArgs& a, const Common& c) {
  auto [weights, cfg] = load_network<T>(a.checkpoint);
  const int views = a.views > 0 ? a.views : cfg.eval_views;
  const ScenePaths paths{fs::path(a.dataset) / a.scan};
  auto refs = a.refs.empty() ? paths.view_ids() : a.refs;
  if (refs.empty()) throw EmptyInput("scan " + a.scan + " contains no views");
  const fs::path out = c.out;
  fs::create_directories(out / "depth");
  fs::create_directories(out / "confidence");
  const auto net = cfg.network();
  NoGradScope<T> no_grad;
  for (int ref : refs) {
    const auto sample = load_scene<T>(a.dataset, a.scan, ref, views, cfg.levels, false);
    const auto levels = infer_depth_pyramid(sample.images, sample.cams, weights, net);
    const auto stem = view_stem(ref);
    for (const auto& l : levels)
      write_pfm(out / "depth" / (stem + "_l" + std::to_string(l.level) + ".pfm"), l.depth);
    const auto& finest = levels.back();
    write_pfm(out / "confidence" / (stem + ".pfm"), confidence_map(finest.depth, finest.probability, finest.hypotheses));
    std::cout << "view " << ref;
    if (!sample.gt.empty()) {
      double err = 0;
      std::size_t n = 0;
      for (std::size_t p = 0; p < finest.depth.numel(); ++p)
        if (sample.gt[0].valid[p]) {
          err += std::abs(static_cast<double>(finest.depth[p]) - static_cast<double>(sample.gt[0].depth[p]));
          ++n;
        }
      if (n) std::cout << " depth MAE " << err / static_cast<double>(n);
    }
    std::cout << "\n";
  }
  return 0;
}

int run_infer(const InferArgs& a, const Common& c) {
  if (a.checkpoint.empty() || a.dataset.empty() || c.out.empty())
    throw ConfigError("infer: --checkpoint, --dataset and --out are required");
  if (a.precision != 32 && a.precision != 64) throw ConfigError("--precision must be 32 or 64");
  return a.precision == 64 ? infer_with<double>(a, c) : infer_with<float>(a, c);
}

// ---------------------------------------------------------------------------
// fuse

struct FuseArgs {
  std::string dataset, scan = "scan1", depths;
  bool ground_truth = false;
  FusionConfig fusion;
};

int run_fuse(const FuseArgs& a, const Common& c) {
  if (a.dataset.empty() || c.out.empty()) throw ConfigError("fuse: --dataset and --out are required");
  if (a.depths.empty() == !a.ground_truth) throw ConfigError("fuse: give exactly one of --depths and --ground-truth");
  a.fusion.validate();
  const ScenePaths paths{fs::path(a.dataset) / a.scan};
  const auto ids = paths.view_ids();
  if (ids.empty()) throw EmptyInput("scan " + a.scan + " contains no views");
  std::vector<Tensor<float>> depths, confidences, images;
  std::vector<Camera> cams;
  for (int id : ids) {
    images.push_back(read_image<float>(paths.image(id)));
    cams.push_back(read_camera_file(paths.camera(id)));
    if (a.ground_truth) {
      depths.push_back(read_pfm<float>(paths.depth(id)));
      confidences.push_back(Tensor<float>(depths.back().shape(), 1.0f));
    } else {
      const fs::path dir = a.depths;
      depths.push_back(read_pfm<float>(dir / "depth" / (view_stem(id) + "_l0.pfm")));
      confidences.push_back(read_pfm<float>(dir / "confidence" / (view_stem(id) + ".pfm")));
    }
  }
  FusionStats stats;
  const auto cloud = fuse(depths, confidences, images, cams, a.fusion, &stats);
  const fs::path out = c.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  export_ply(cloud, out);
  std::cout << "pixels " << stats.pixels << ", photometric " << stats.photometric_kept << ", geometric "
            << stats.geometric_kept << ", fused " << stats.fused << " -> " << out.string() << "\n";
  if (cloud.empty()) std::cout << "warning: no pixel survived filtering; wrote an empty cloud\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string recon, gt;
  double max_dist = 20.0;
};

int run_eval(const EvalArgs& a, const Common& c) {
  if (a.recon.empty() || a.gt.empty()) throw ConfigError("eval: --recon and --gt are required");
  const auto report = evaluate(load_ply(a.recon), load_ply(a.gt), a.max_dist);
  std::cout << report.table();
  std::cout << report.to_json().dump() << "\n";
  if (!c.out.empty()) std::ofstream(c.out) << report.to_json().dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::string op = "all";
  GradcheckOptions options;
  double op_tolerance = 1e-5, end_to_end_tolerance = 1e-4;
};

int run_gradcheck_cmd(const GradcheckArgs& a, const Common&) {
  const auto results = run_gradcheck(a.op, a.options);
  bool ok = true;
  std::printf("%-18s %14s %8s %9s  %s\n", "op", "max_rel_error", "entries", "seconds", "worst input");
  for (const auto& r : results) {
    const double tol = r.op == "end_to_end" ? a.end_to_end_tolerance : a.op_tolerance;
    const bool pass = r.max_rel_error < tol;
    ok = ok && pass;
    std::printf("%-18s %14.3e %8zu %9.3f  %s%s\n", r.op.c_str(), r.max_rel_error, r.entries, r.seconds,
                r.worst_input.c_str(), pass ? "" : "  FAIL");
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-aware cost-volume-pyramid multi-view stereo"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub, const std::string& out_help) {
    sub->add_option("--threads", common.threads, "worker threads (0 = auto); computation is single-threaded")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--out", common.out, out_help);
  };

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic multi-view scene");
  add_common(synth_cmd, "dataset root to write into");
  synth_cmd->add_option("--scan", synth.scan, "scan directory name")->capture_default_str();
  synth_cmd->add_option("--views", synth.views, "number of views")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "texture seed")->capture_default_str();
  synth_cmd->add_option("--height", synth.height, "image height")->capture_default_str();
  synth_cmd->add_option("--width", synth.width, "image width")->capture_default_str();
  synth_cmd->add_option("--geometry", synth.geometry, "plane | sphere | steps")->capture_default_str();
  synth_cmd->add_option("--arc-step", synth.arc_step, "degrees between neighbouring cameras")->capture_default_str();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train the depth network on a scan");
  add_common(train_cmd, "directory for checkpoints and the run log");
  train_cmd->add_option("--config", train_args.config, "key = value config file (flags override it)");
  train_cmd->add_option("--dataset", train_args.dataset, "dataset root");
  train_cmd->add_option("--scan", train_args.scan, "scan directory name")->capture_default_str();
  {
    // One flag per config key; defaults come from the config file, then TrainConfig.
    const auto defaults = to_key_values(TrainConfig{});
    const std::map<std::string, std::string> renamed{{"train_views", "views"}};
    for (const auto& [key, value] : defaults) {
      std::string flag = renamed.count(key) ? renamed.at(key) : key;
      for (auto& ch : flag)
        if (ch == '_') ch = '-';
      train_args.settings[key];
      train_cmd->add_option("--" + flag, train_args.settings[key], "config key " + key)
          ->default_str(value)
          ->group(kConfigKeyGroup);
    }
  }

  InferArgs infer_args;
  auto* infer_cmd = app.add_subcommand("infer", "write depth and confidence maps for each reference view");
  add_common(infer_cmd, "output directory");
  infer_cmd->add_option("--checkpoint", infer_args.checkpoint, "checkpoint written by train");
  infer_cmd->add_option("--dataset", infer_args.dataset, "dataset root");
  infer_cmd->add_option("--scan", infer_args.scan, "scan directory name")->capture_default_str();
  infer_cmd->add_option("--views", infer_args.views, "views per sample (0 = eval_views of the checkpoint)")
      ->capture_default_str();
  infer_cmd->add_option("--ref", infer_args.refs, "reference view ids (default: all)");
  infer_cmd->add_option("--precision", infer_args.precision, "32 or 64")->capture_default_str();

  FuseArgs fuse_args;
  auto* fuse_cmd = app.add_subcommand("fuse", "filter depth maps and fuse them into a PLY point cloud");
  add_common(fuse_cmd, "output PLY path");
  fuse_cmd->add_option("--dataset", fuse_args.dataset, "dataset root (images and cameras)");
  fuse_cmd->add_option("--scan", fuse_args.scan, "scan directory name")->capture_default_str();
  fuse_cmd->add_option("--depths", fuse_args.depths, "output directory of infer");
  fuse_cmd->add_flag("--ground-truth", fuse_args.ground_truth, "fuse the dataset's ground-truth depths instead");
  fuse_cmd->add_option("--prob-threshold", fuse_args.fusion.prob_threshold)->capture_default_str();
  fuse_cmd->add_option("--reproj-threshold", fuse_args.fusion.reproj_px_threshold, "pixels")->capture_default_str();
  fuse_cmd->add_option("--rel-depth-threshold", fuse_args.fusion.rel_depth_threshold)->capture_default_str();
  fuse_cmd->add_option("--min-views", fuse_args.fusion.min_consistent_views, "consistent views incl. the reference")
      ->capture_default_str();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "accuracy / completeness / overall accuracy of a point cloud");
  add_common(eval_cmd, "optional JSON report path");
  eval_cmd->add_option("--recon", eval_args.recon, "reconstructed PLY");
  eval_cmd->add_option("--gt", eval_args.gt, "ground-truth PLY");
  eval_cmd->add_option("--max-dist", eval_args.max_dist, "outlier distance")->capture_default_str();

  GradcheckArgs gc_args;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks in 64-bit");
  add_common(gc_cmd, "unused");
  gc_cmd->add_option("--op", gc_args.op, "probe name or 'all'")->capture_default_str();
  gc_cmd->add_option("--eps", gc_args.options.eps, "finite-difference step")->capture_default_str();
  gc_cmd->add_option("--seed", gc_args.options.seed, "probe seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  echo_effective_config(*sub);
  try {
    if (sub == synth_cmd) return run_synth(synth, common);
    if (sub == train_cmd) return run_train(train_args, common);
    if (sub == infer_cmd) return run_infer(infer_args, common);
    if (sub == fuse_cmd) return run_fuse(fuse_args, common);
    if (sub == eval_cmd) return run_eval(eval_args, common);
    if (sub == gc_cmd) return run_gradcheck_cmd(gc_args, common);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n" << sub->help();
    return 1;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

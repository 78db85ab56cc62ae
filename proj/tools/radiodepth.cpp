#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "radiodepth/common.hpp"
#include "radiodepth/depthfit.hpp"
#include "radiodepth/io.hpp"
#include "radiodepth/losses.hpp"
#include "radiodepth/metrics.hpp"
#include "radiodepth/phantom.hpp"
#include "radiodepth/pipeline.hpp"
#include "radiodepth/ssm.hpp"

using namespace radiodepth;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericError = 3;
constexpr int kValidationError = 4;

const std::vector<std::string> kCommands{"phantom",  "loss",      "fit-direct", "train",
                                         "predict",  "reconstruct", "ssm-build", "ssm-fit",
                                         "metrics",  "pipeline",  "compare",    "validate"};

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
}

// For every subcommand except pipeline, a --config JSON object supplies
// option values ({"variant": "casi_indep", "iters": 100}); the command line
// wins over the file.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string config;
  std::size_t sub = args.size();
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
    if (sub == args.size() &&
        std::find(kCommands.begin(), kCommands.end(), args[i]) != kCommands.end())
      sub = i;
  }
  if (config.empty() || sub == args.size() || args[sub] == "pipeline") return args;
  const json j = read_json(config);
  if (!j.is_object()) throw ConfigError(config + ": expected a JSON object");
  std::vector<std::string> extra;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string flag = "--" + it.key();
    if (std::find(args.begin(), args.end(), flag) != args.end()) continue;
    const json& v = it.value();
    if (v.is_boolean()) {
      if (v.get<bool>()) extra.push_back(flag);
    } else if (v.is_array()) {
      extra.push_back(flag);
      for (const auto& e : v) extra.push_back(e.is_string() ? e.get<std::string>() : e.dump());
    } else {
      extra.push_back(flag);
      extra.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub) + 1, extra.begin(), extra.end());
  return args;
}

ImagingGeometry geometry_for(int resolution) {
  if (resolution <= 0) return ImagingGeometry::standard();
  return ImagingGeometry::centered(resolution, resolution, 409.6 / resolution, 1000.0);
}

LossConfig loss_config(const std::string& variant, double alpha, double lambda_var,
                       const std::string& scope) {
  LossConfig c;
  c.variant = loss_variant_from_string(variant);
  c.alpha = alpha;
  c.lambda_var = lambda_var;
  c.alignment_scope = alignment_scope_from_string(scope);
  c.validate();
  return c;
}

// Phantom directory layout: <stem>_depth.dmap, <stem>_radiograph.dmap, <stem>_labels.dmap.
TrainingSample load_sample(const fs::path& depth_path) {
  std::string stem = depth_path.string();
  stem.resize(stem.size() - std::string("_depth.dmap").size());
  const DmapFile depth = read_dmap(depth_path);
  const DmapFile radio = read_dmap(stem + "_radiograph.dmap");
  const DmapFile labels = read_dmap(stem + "_labels.dmap");
  if (radio.channels.size() != 1) throw ValidationError(stem + "_radiograph.dmap: expected one channel");
  return {radio.channels[0], depth_set_from_dmap(depth),
          LabelMask::from_channels(labels.channels, labels.object_ids)};
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-face depth estimation from simulated radiographs, point cloud "
               "reconstruction and shape completion."};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  int threads = 0;
  bool deterministic = false;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--threads", threads, "Worker threads (default: RADIODEPTH_THREADS or all cores)");
  app.add_flag("--deterministic", deterministic, "Single-threaded reductions");

  // phantom
  auto* ph = app.add_subcommand("phantom", "Sample a scene and render its ground truth");
  std::uint64_t ph_seed = 0;
  std::string ph_template = "hip-like", ph_out = "phantom", ph_stem = "scene";
  bool ph_deformed = false, ph_no_jitter = false;
  int ph_res = 0, ph_surface = 0;
  double ph_noise = 0.0;
  ph->add_option("--seed", ph_seed);
  ph->add_option("--template", ph_template)->check(CLI::IsMember({"hip-like", "random-blobs"}));
  ph->add_option("--out-dir", ph_out);
  ph->add_option("--stem", ph_stem, "File name prefix");
  ph->add_flag("--deformed", ph_deformed);
  ph->add_flag("--no-jitter", ph_no_jitter);
  ph->add_option("--resolution", ph_res, "Square detector size (default 256)");
  ph->add_option("--noise", ph_noise, "Radiograph noise sigma");
  ph->add_option("--surface-points", ph_surface, "Also write sampled surface points");

  // loss
  auto* lo = app.add_subcommand("loss", "Evaluate a loss between two depth files");
  std::string lo_pred, lo_gt, lo_variant = "si_indep", lo_scope = "per_object";
  double lo_alpha = 10.0, lo_lambda = 0.85;
  lo->add_option("--pred", lo_pred)->required();
  lo->add_option("--gt", lo_gt)->required();
  lo->add_option("--variant", lo_variant);
  lo->add_option("--alpha", lo_alpha);
  lo->add_option("--lambda-var", lo_lambda);
  lo->add_option("--scope", lo_scope);

  // fit-direct
  auto* fd = app.add_subcommand("fit-direct", "Optimize depth maps directly against a target");
  std::string fd_gt, fd_out, fd_variant = "casi_indep", fd_scope = "per_object",
                         fd_init = "gt-plus-noise";
  FitConfig fd_cfg;
  fd->add_option("--gt", fd_gt)->required();
  fd->add_option("--out", fd_out);
  fd->add_option("--variant", fd_variant);
  fd->add_option("--scope", fd_scope);
  fd->add_option("--alpha", fd_cfg.loss.alpha);
  fd->add_option("--lambda-var", fd_cfg.loss.lambda_var);
  fd->add_option("--init", fd_init)->check(CLI::IsMember({"gt-plus-noise", "constant"}));
  fd->add_option("--sigma", fd_cfg.init_sigma);
  fd->add_option("--constant", fd_cfg.init_constant);
  fd->add_option("--iters", fd_cfg.max_iters);
  fd->add_option("--lr", fd_cfg.learning_rate);
  fd->add_option("--seed", fd_cfg.rng_seed);

  // train
  auto* tr = app.add_subcommand("train", "Train the patch regressor on phantom scenes");
  std::string tr_data, tr_out = "model.model", tr_variant = "casi_indep", tr_scope = "per_object";
  TrainConfig tr_cfg;
  bool tr_single = false;
  tr->add_option("--data", tr_data, "Directory of phantom outputs")->required();
  tr->add_option("--out", tr_out);
  tr->add_option("--variant", tr_variant);
  tr->add_option("--scope", tr_scope);
  tr->add_option("--epochs", tr_cfg.epochs);
  tr->add_option("--lr", tr_cfg.learning_rate);
  tr->add_option("--hidden", tr_cfg.hidden);
  tr->add_option("--patch-radius", tr_cfg.patch_radius);
  tr->add_option("--batch-size", tr_cfg.batch_size);
  tr->add_option("--grad-clip", tr_cfg.grad_clip);
  tr->add_option("--seed", tr_cfg.rng_seed);
  tr->add_flag("--single-face", tr_single);

  // predict
  auto* pr = app.add_subcommand("predict", "Predict depth maps from a radiograph");
  std::string pr_model, pr_radio, pr_labels, pr_out = "pred.dmap";
  pr->add_option("--model", pr_model)->required();
  pr->add_option("--radiograph", pr_radio)->required();
  pr->add_option("--labels", pr_labels)->required();
  pr->add_option("--out", pr_out);

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "Back-project depth maps to a labelled cloud");
  std::string rc_depth, rc_out = "cloud.ply";
  bool rc_single = false;
  rc->add_option("--depth", rc_depth)->required();
  rc->add_option("--out", rc_out);
  rc->add_flag("--single-face", rc_single, "Use front faces only");

  // ssm-build
  auto* sb = app.add_subcommand("ssm-build", "Build a shape model for one object");
  std::vector<std::string> sb_inputs;
  std::string sb_out = "object.ssm", sb_template = "hip-like", sb_align = "procrustes";
  int sb_object = 1, sb_shapes = 24, sb_points = 800, sb_modes = 8;
  std::uint64_t sb_seed = 0;
  sb->add_option("--inputs", sb_inputs, "Corresponded PLY shapes (otherwise sampled)");
  sb->add_option("--out", sb_out);
  sb->add_option("--template", sb_template);
  sb->add_option("--object-id", sb_object);
  sb->add_option("--shapes", sb_shapes);
  sb->add_option("--points", sb_points);
  sb->add_option("--modes", sb_modes);
  sb->add_option("--seed", sb_seed);
  sb->add_option("--alignment", sb_align)
      ->check(CLI::IsMember({"procrustes", "translation", "none"}));

  // ssm-fit
  auto* sf = app.add_subcommand("ssm-fit", "Complete a partial cloud with a shape model");
  std::string sf_model, sf_target, sf_out = "completed.ply", sf_distance = "bidirectional";
  SsmFitConfig sf_cfg;
  int sf_object = -1;
  sf->add_option("--model", sf_model)->required();
  sf->add_option("--target", sf_target)->required();
  sf->add_option("--out", sf_out);
  sf->add_option("--object-id", sf_object, "Select labelled points (default: the model's object)");
  sf->add_option("--distance", sf_distance)
      ->check(CLI::IsMember({"bidirectional", "target-to-model"}));
  sf->add_option("--lambda", sf_cfg.lambda_l2);
  sf->add_option("--clip-margin", sf_cfg.clip_margin);
  sf->add_option("--restarts", sf_cfg.restarts);
  sf->add_option("--max-iters", sf_cfg.lbfgs.max_iters);
  sf->add_option("--seed", sf_cfg.seed);

  // metrics
  auto* me = app.add_subcommand("metrics", "Surface metrics between two clouds");
  std::string me_pred, me_gt;
  bool me_json = false, me_batch = false;
  std::size_t me_cap = 512;
  me->add_option("--pred", me_pred)->required();
  me->add_option("--gt", me_gt)->required();
  me->add_flag("--json", me_json);
  me->add_flag("--batch", me_batch, "CSV with one row per object id");
  me->add_option("--emd-cap", me_cap);

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "Run the full experiment from a config");
  std::string pl_out;
  pl->add_option("--out-dir", pl_out, "Overrides output_dir");

  // compare
  auto* cm = app.add_subcommand("compare", "Per-metric deltas between two summaries");
  std::string cm_a, cm_b;
  bool cm_json = false;
  cm->add_option("a", cm_a)->required();
  cm->add_option("b", cm_b)->required();
  cm->add_flag("--json", cm_json);

  // validate
  auto* va = app.add_subcommand("validate", "Check artifact files");
  std::vector<std::string> va_paths;
  va->add_option("paths", va_paths)->required();

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (threads <= 0) {
      if (const char* env = std::getenv("RADIODEPTH_THREADS")) {
        try {
          threads = std::stoi(env);
        } catch (const std::exception&) {
          throw ConfigError(std::string("RADIODEPTH_THREADS is not an integer: ") + env);
        }
        if (threads <= 0) throw ConfigError("RADIODEPTH_THREADS must be positive");
      } else {
        threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
      }
    }
    set_thread_count(deterministic ? 1 : threads);

    if (*ph) {
      JitterParams jitter = ph_no_jitter ? JitterParams{} : JitterParams::typical();
      jitter.deformed = ph_deformed;
      const PhantomScene scene = sample_scene(ph_seed, ph_template, jitter, geometry_for(ph_res));
      const GroundTruth gt = render_ground_truth(scene, {ph_noise, derive_seed(ph_seed, "noise")});
      const fs::path dir = ph_out;
      write_file(dir / (ph_stem + ".json"), scene_to_json(scene).dump(1) + "\n");
      write_dmap(dir / (ph_stem + "_depth.dmap"), to_dmap(gt.depth));
      write_dmap(dir / (ph_stem + "_radiograph.dmap"), DmapFile{scene.geometry, {}, {gt.radiograph}});
      write_dmap(dir / (ph_stem + "_labels.dmap"),
                 DmapFile{scene.geometry, gt.labels.object_ids(), gt.labels.to_channels()});
      if (ph_surface > 0) {
        PointCloud all;
        for (const auto& obj : scene.objects)
          all.append(sample_surface_points(obj, static_cast<std::size_t>(ph_surface),
                                           derive_seed(ph_seed, "surface",
                                                       static_cast<std::uint64_t>(obj.object_id))));
        write_ply(dir / (ph_stem + "_surface.ply"), all);
      }
      print({{"scene", (dir / (ph_stem + ".json")).string()},
             {"objects", scene.object_ids()},
             {"deformed", scene.deformed}});
    } else if (*lo) {
      const LossConfig cfg = loss_config(lo_variant, lo_alpha, lo_lambda, lo_scope);
      const DepthMapSet pred = depth_set_from_dmap(read_dmap(lo_pred));
      const DepthMapSet gt = depth_set_from_dmap(read_dmap(lo_gt));
      if (!(pred.geometry == gt.geometry) || pred.object_ids != gt.object_ids)
        throw ConfigError("pred and gt differ in geometry or object ids");
      const LossResult r = evaluate_loss(pred.maps, gt.maps, cfg);
      print({{"variant", to_string(cfg.variant)},
             {"value", r.value},
             {"per_map", r.per_map_values},
             {"valid_counts", r.valid_counts},
             {"warnings", r.warnings}});
    } else if (*fd) {
      fd_cfg.loss = loss_config(fd_variant, fd_cfg.loss.alpha, fd_cfg.loss.lambda_var, fd_scope);
      fd_cfg.init = fd_init == "constant" ? InitKind::constant : InitKind::gt_plus_noise;
      const DepthMapSet gt = depth_set_from_dmap(read_dmap(fd_gt));
      const FitResult r = optimize_depth(gt, fd_cfg);
      if (!fd_out.empty()) write_dmap(fd_out, to_dmap(r.depth));
      print({{"iterations", r.iterations},
             {"converged", r.converged},
             {"initial_loss", r.trace.front()},
             {"final_loss", r.trace.back()}});
    } else if (*tr) {
      tr_cfg.loss = loss_config(tr_variant, tr_cfg.loss.alpha, tr_cfg.loss.lambda_var, tr_scope);
      tr_cfg.dual_face = !tr_single;
      std::vector<fs::path> depth_files;
      for (const auto& e : fs::directory_iterator(tr_data)) {
        const std::string name = e.path().filename().string();
        if (name.size() > 11 && name.compare(name.size() - 11, 11, "_depth.dmap") == 0)
          depth_files.push_back(e.path());
      }
      std::sort(depth_files.begin(), depth_files.end());
      if (depth_files.size() < 2)
        throw ConfigError(tr_data + ": need at least two *_depth.dmap scenes");
      std::vector<TrainingSample> data;
      for (const auto& p : depth_files) data.push_back(load_sample(p));
      const TrainResult r = train_regressor(data, tr_cfg);
      save_regressor(tr_out, r.model);
      print({{"model", tr_out},
             {"scenes", data.size()},
             {"initial_loss", r.initial_loss},
             {"final_loss", r.final_loss}});
    } else if (*pr) {
      const PatchRegressor model = load_regressor(pr_model);
      const DmapFile radio = read_dmap(pr_radio);
      const DmapFile labels = read_dmap(pr_labels);
      if (radio.channels.size() != 1) throw ValidationError(pr_radio + ": expected one channel");
      const DepthMapSet pred =
          predict(model, radio.geometry, radio.channels[0],
                  LabelMask::from_channels(labels.channels, labels.object_ids));
      write_dmap(pr_out, to_dmap(pred));
      print({{"prediction", pr_out}});
    } else if (*rc) {
      const DepthMapSet set = depth_set_from_dmap(read_dmap(rc_depth));
      PointCloud cloud;
      for (std::size_t k = 0; k < set.object_count(); ++k) {
        cloud.append(backproject(set.geometry, set.front(k), set.object_ids[k]));
        if (!rc_single) cloud.append(backproject(set.geometry, set.back(k), set.object_ids[k]));
      }
      write_ply(rc_out, cloud);
      print({{"cloud", rc_out}, {"points", cloud.size()}});
    } else if (*sb) {
      CorrespondedShapeSet set;
      set.object_id = sb_object;
      if (!sb_inputs.empty()) {
        for (const auto& p : sb_inputs) set.shapes.push_back(read_ply(p).points);
      } else {
        const PhantomScene reference =
            sample_scene(derive_seed(sb_seed, "ssm-reference"), sb_template, JitterParams{});
        const PhantomObject* ref = nullptr;
        for (const auto& o : reference.objects)
          if (o.object_id == sb_object) ref = &o;
        if (!ref) throw ConfigError("object id " + std::to_string(sb_object) + " not in template");
        const auto params = correspondence_params(*ref, static_cast<std::size_t>(sb_points));
        for (int s = 0; s < sb_shapes; ++s) {
          JitterParams j = JitterParams::typical();
          j.deformed = s % 2 == 1;
          const PhantomScene sc = sample_scene(
              derive_seed(sb_seed, "ssm-shape", static_cast<std::uint64_t>(s)), sb_template, j);
          for (const auto& o : sc.objects)
            if (o.object_id == sb_object) set.shapes.push_back(corresponded_points(o, params));
        }
      }
      if (sb_align != "none") set = procrustes_align(set, sb_align == "procrustes");
      const ShapeModel model = build_ssm(set, static_cast<std::size_t>(sb_modes));
      save_ssm(sb_out, model);
      std::vector<double> scales(model.mode_scales.data(),
                                 model.mode_scales.data() + model.mode_scales.size());
      print({{"model", sb_out},
             {"points", model.point_count()},
             {"modes", model.mode_count()},
             {"mode_scales", scales}});
    } else if (*sf) {
      const ShapeModel model = load_ssm(sf_model);
      PointCloud target = read_ply(sf_target);
      const int id = sf_object >= 0 ? sf_object : model.object_id;
      if (target.has_labels()) target = target.select(id);
      if (target.empty()) throw ConfigError(sf_target + ": no points for object " + std::to_string(id));
      sf_cfg.distance_mode = distance_mode_from_string(sf_distance);
      const SsmFitResult r = fit_ssm(model, target, sf_cfg);
      PointCloud completed;
      completed.points = r.completed;
      completed.object_ids.assign(r.completed.size(), id);
      write_ply(sf_out, completed);
      print({{"completed", sf_out},
             {"theta", std::vector<double>(r.theta.data(), r.theta.data() + r.theta.size())},
             {"cost", r.cost},
             {"cost_at_zero", r.cost_at_zero},
             {"restart_costs", r.restart_costs},
             {"warnings", r.warnings}});
    } else if (*me) {
      const PointCloud a = read_ply(me_pred);
      const PointCloud b = read_ply(me_gt);
      if (me_batch) {
        if (!a.has_labels() || !b.has_labels())
          throw ConfigError("--batch needs labelled clouds");
        std::cout << "object_id,assd,hd95,emd,cd_l2\n";
        std::vector<int> ids = b.object_ids;
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        std::cout.precision(10);
        for (int id : ids) {
          const PointCloud pa = a.select(id), pb = b.select(id);
          if (pa.empty()) {
            std::cerr << "object " << id << ": no predicted points, skipped\n";
            continue;
          }
          const SurfaceMetricReport r = surface_metrics(pa, pb, me_cap);
          std::cout << id << ',' << r.assd << ',' << r.hd95 << ',' << r.emd << ',' << r.cd_l2 << "\n";
        }
      } else {
        const SurfaceMetricReport r = surface_metrics(a, b, me_cap);
        const json j{{"assd", r.assd}, {"hd95", r.hd95}, {"emd", r.emd}, {"cd_l2", r.cd_l2},
                     {"pred_points", r.size_a}, {"gt_points", r.size_b},
                     {"emd_points", r.emd_points}};
        if (me_json)
          print(j);
        else
          std::cout << "assd " << r.assd << " mm\nhd95 " << r.hd95 << " mm\nemd " << r.emd
                    << " mm\ncd_l2 " << r.cd_l2 << " mm^2\n";
      }
    } else if (*pl) {
      if (config_path.empty()) throw ConfigError("pipeline needs --config");
      json j = read_json(config_path);
      if (!pl_out.empty()) j["output_dir"] = pl_out;
      const ExperimentConfig cfg = experiment_config_from_json(j);
      const PipelineOutputs out = run_pipeline(cfg);
      for (const auto& w : out.warnings) std::cerr << "warning: " << w << "\n";
      print({{"summary", out.summary_json.string()}, {"metrics", out.metrics_csv.string()}});
    } else if (*cm) {
      const auto rows = compare_report(read_json(cm_a), read_json(cm_b));
      if (cm_json) {
        json out = json::array();
        for (const auto& r : rows)
          out.push_back({{"key", r.key}, {"a", r.a}, {"b", r.b}, {"delta", r.delta},
                         {"improved", r.improved}});
        print(out);
      } else {
        std::cout << "key,a,b,delta,improved\n";
        std::cout.precision(10);
        for (const auto& r : rows)
          std::cout << r.key << ',' << r.a << ',' << r.b << ',' << r.delta << ','
                    << (r.improved ? "yes" : "no") << "\n";
      }
    } else if (*va) {
      std::vector<fs::path> paths(va_paths.begin(), va_paths.end());
      const auto diags = validate_files(paths);
      std::size_t bad = 0;
      for (const auto& d : diags) {
        if (d.ok()) {
          std::cout << "ok      " << d.path.string() << " (" << d.kind << ")\n";
        } else {
          ++bad;
          for (const auto& v : d.violations)
            std::cout << "INVALID " << d.path.string() << " (" << d.kind << "): " << v << "\n";
        }
      }
      std::cout << diags.size() << " files, " << bad << " with violations\n";
      return bad == 0 ? kOk : kValidationError;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const ValidationError& e) {
    std::cerr << "validation failure: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::domain_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kOk;
}

// Command-line driver: scene generation, detector training, universal mesh
// attacks, evaluation, defenses, transfer runs, and debug exports.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "advfusion/attack.hpp"
#include "advfusion/defense.hpp"
#include "advfusion/detector.hpp"
#include "advfusion/eval.hpp"
#include "advfusion/scene.hpp"

namespace {

using namespace advf;

constexpr const char* kVersion = "1.0.0";

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Every run leaves a manifest next to its primary output: enough (command,
// config, seeds, version) to reproduce it.
void write_manifest(const std::string& primary_output, const std::string& command,
                    const nlohmann::json& config, uint64_t seed) {
  nlohmann::json m;
  m["command"] = command;
  m["config"] = config;
  m["config_hash"] = fnv1a(config.dump());
  m["seed"] = seed;
  m["version"] = kVersion;
  std::string path = primary_output + ".manifest.json";
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write manifest " + path);
  f << m.dump(2) << "\n";
}

// ADVFUSION_SEED overrides any configured seed.
void apply_env_seed(uint64_t& seed) {
  if (const char* env = std::getenv("ADVFUSION_SEED")) seed = std::strtoull(env, nullptr, 10);
}

SceneGenConfig variant_config(const std::string& variant) {
  SceneGenConfig cfg;
  if (variant == "default") return cfg;
  if (variant == "alt") {
    // a second synthetic sensor rig for transfer experiments
    cfg.lidar_beams = 32;
    cfg.lidar_elev_min_deg = -12.0;
    cfg.lidar_elev_max_deg = 5.0;
    cfg.lidar_az_span_deg = 54.0;
    cfg.lidar_az_step_deg = 0.36;
    cfg.lidar_origin = {0.0, 0.0, 1.82};
    cfg.cam_f = 150.0;
    cfg.cam_position = {0.0, 0.0, 1.55};
    return cfg;
  }
  throw CLI::ValidationError("--variant must be 'default' or 'alt'");
}

BoxConstraint box_for_size(double size) {
  BoxConstraint box;
  if (size > 0) {
    box.lx = box.ly = size;
    box.lz = 0.625 * size;  // keep the default 0.8 : 0.5 aspect
  }
  return box;
}

DetectorConfig detector_config_for(const ParamMap& params) {
  DetectorConfig cfg;
  cfg.use_nonlocal = params.count("nl0.w_theta") > 0;
  return cfg;
}

TexturedMesh load_mesh_prefix(const std::string& prefix) {
  return load_mesh_obj(prefix + ".obj", prefix + ".tex.json");
}

void save_mesh_prefix(const TexturedMesh& mesh, const std::string& prefix) {
  save_mesh_obj(mesh, prefix + ".obj", prefix + ".tex.json");
}

nlohmann::json attack_config_json(const AttackConfig& a) {
  return {{"lambda_fp", a.lambda_fp},
          {"lambda_lap", a.lambda_lap},
          {"lr_texture", a.lr_texture},
          {"lr_vertex", a.lr_vertex},
          {"box", {a.box.lx, a.box.ly, a.box.lz}},
          {"target_lidar", a.target_lidar},
          {"target_image", a.target_image},
          {"steps", a.steps},
          {"batch_size", a.batch_size},
          {"relevance_score_min", a.relevance_score_min},
          {"relevance_requires_overlap", a.relevance_requires_overlap},
          {"seed", a.seed}};
}

int run_evaluate(const std::string& data_dir, const std::string& ckpt, const std::string& mesh_px,
                 const std::string& out_json, const std::string& out_csv, double box_size,
                 const std::string& defense, int quality, const std::string& command,
                 uint64_t seed) {
  auto scenes = load_dataset(data_dir);
  auto params = load_checkpoint(ckpt);
  DetectorConfig dcfg = detector_config_for(params);
  TexturedMesh mesh = load_mesh_prefix(mesh_px);
  BoxConstraint box = box_for_size(box_size);

  ImagePreproc preproc = nullptr;
  if (defense == "compression")
    preproc = [quality](const Tensor& img) { return dct_compress(img, quality); };
  else if (!defense.empty())
    throw CLI::ValidationError("--defense must be 'compression' when given");

  auto records = evaluate_attack(scenes, mesh, params, dcfg, box, {}, preproc);
  auto asr = attack_success_rates(records);
  std::vector<double> thresholds{0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  auto recall = recall_curve(records, thresholds);
  auto samples = clean_ap_samples(scenes, params, dcfg, preproc);
  auto ap50 = average_precision(samples, 0.5);
  auto ap70 = average_precision(samples, 0.7);

  nlohmann::json report = eval_report_json(records, asr, recall, ap50, ap70);
  std::ofstream f(out_json);
  if (!f) throw std::runtime_error("cannot write " + out_json);
  f << report.dump(2) << "\n";
  if (!out_csv.empty()) write_eval_csv(out_csv, command, asr);

  std::cout << "scenes: " << records.size() << "\n";
  std::cout << "FN ASR: " << (asr.fn_asr ? std::to_string(*asr.fn_asr) : "undefined") << "%\n";
  std::cout << "FP ASR: " << asr.fp_asr << "%\nASR: " << asr.asr << "%\n";
  if (ap50) std::cout << "clean AP@0.5: " << 100.0 * *ap50 << "%\n";
  if (ap70) std::cout << "clean AP@0.7: " << 100.0 * *ap70 << "%\n";

  nlohmann::json cfgj = {{"data", data_dir},   {"ckpt", ckpt},       {"mesh", mesh_px},
                         {"box_size", box_size}, {"defense", defense}, {"quality", quality}};
  write_manifest(out_json, command, cfgj, seed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal adversarial mesh toolkit for LiDAR+camera fusion detection"};
  app.require_subcommand(1);

  // --- gen-scenes ---
  auto* gen = app.add_subcommand("gen-scenes", "Generate a synthetic scene dataset");
  std::string gen_out, gen_variant = "default";
  int64_t gen_count = 96;
  uint64_t gen_seed = 7;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes");
  gen->add_option("--seed", gen_seed, "Base seed");
  gen->add_option("--variant", gen_variant, "Sensor rig: default|alt");

  // --- train-detector ---
  auto* train = app.add_subcommand("train-detector", "Train the fusion detector");
  std::string tr_data, tr_out, tr_eval;
  int64_t tr_steps = 1500, tr_batch = 2;
  double tr_lr = 1e-3;
  uint64_t tr_seed = 7;
  train->add_option("--data", tr_data, "Training dataset directory")->required();
  train->add_option("--out", tr_out, "Output checkpoint path")->required();
  train->add_option("--eval-data", tr_eval, "Optional eval dataset for a final AP report");
  train->add_option("--steps", tr_steps, "Optimizer steps");
  train->add_option("--batch", tr_batch, "Scenes per step");
  train->add_option("--lr", tr_lr, "Learning rate");
  train->add_option("--seed", tr_seed, "Seed");

  // --- attack ---
  auto* atk = app.add_subcommand("attack", "Optimize a universal adversarial mesh");
  std::string at_data, at_val, at_ckpt, at_out, at_target = "both";
  double at_box = 0.0, at_lfp = 1.0, at_llap = 0.001;
  int64_t at_steps = 250;
  uint64_t at_seed = 1;
  bool at_random = false;
  atk->add_option("--data", at_data, "Training dataset directory")->required();
  atk->add_option("--val", at_val, "Held-out dataset for validation logging");
  atk->add_option("--ckpt", at_ckpt, "Detector checkpoint")->required();
  atk->add_option("--out", at_out, "Output mesh prefix (<out>.obj, <out>.tex.json)")->required();
  atk->add_option("--target", at_target, "Gradient target: lidar|image|both");
  atk->add_option("--box-size", at_box, "Constraint half-size sweep value (0 = paper default)");
  atk->add_option("--steps", at_steps, "Attack steps");
  atk->add_option("--lambda-fp", at_lfp, "False-positive loss weight");
  atk->add_option("--lambda-lap", at_llap, "Laplacian loss weight");
  atk->add_option("--seed", at_seed, "Seed");
  atk->add_flag("--random-baseline", at_random, "Skip optimization; random mesh inside the box");

  // --- evaluate ---
  auto* ev = app.add_subcommand("evaluate", "Evaluate a mesh against a detector on a dataset");
  std::string ev_data, ev_ckpt, ev_mesh, ev_out = "report.json", ev_csv, ev_def;
  double ev_box = 0.0;
  int ev_quality = 50;
  uint64_t ev_seed = 0;
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--ckpt", ev_ckpt, "Detector checkpoint")->required();
  ev->add_option("--mesh", ev_mesh, "Mesh prefix")->required();
  ev->add_option("--out", ev_out, "Report JSON path");
  ev->add_option("--csv", ev_csv, "Optional summary CSV path");
  ev->add_option("--box-size", ev_box, "Constraint half-size used by the attack");
  ev->add_option("--defense", ev_def, "Inference-time defense: compression");
  ev->add_option("--quality", ev_quality, "Compression quality (1-100)");

  // --- defend ---
  auto* def = app.add_subcommand("defend", "Produce a hardened checkpoint");
  std::string df_data, df_ckpt, df_out, df_kind = "adv-train", df_mesh_out;
  int df_quality = 50, df_ratio = 5;
  int64_t df_updates = 150;
  uint64_t df_seed = 11;
  def->add_option("--data", df_data, "Training dataset directory")->required();
  def->add_option("--ckpt", df_ckpt, "Input checkpoint")->required();
  def->add_option("--out", df_out, "Output checkpoint path")->required();
  def->add_option("--kind", df_kind, "compression|adv-train|adv-train-fd");
  def->add_option("--quality", df_quality, "Compression quality");
  def->add_option("--adv-ratio", df_ratio, "Adversary updates per model update");
  def->add_option("--model-updates", df_updates, "Model updates");
  def->add_option("--mesh-out", df_mesh_out, "Optional prefix for the persistent adversary");
  def->add_option("--seed", df_seed, "Seed");

  // --- transfer ---
  auto* tf = app.add_subcommand("transfer", "Evaluate a mesh on another dataset/detector");
  std::string tf_data, tf_ckpt, tf_mesh, tf_out = "transfer_report.json", tf_csv;
  double tf_box = 0.0;
  tf->add_option("--data", tf_data, "Target dataset directory")->required();
  tf->add_option("--ckpt", tf_ckpt, "Target detector checkpoint")->required();
  tf->add_option("--mesh", tf_mesh, "Mesh prefix (optimized on the source dataset)")->required();
  tf->add_option("--out", tf_out, "Report JSON path");
  tf->add_option("--csv", tf_csv, "Optional summary CSV path");
  tf->add_option("--box-size", tf_box, "Constraint half-size used by the attack");

  // --- export-debug ---
  auto* ex = app.add_subcommand("export-debug", "Dump meshes, point clouds, and images");
  std::string ex_data, ex_out, ex_mesh;
  int64_t ex_scene = 0;
  ex->add_option("--data", ex_data, "Dataset directory")->required();
  ex->add_option("--out", ex_out, "Output directory")->required();
  ex->add_option("--scene", ex_scene, "Scene index");
  ex->add_option("--mesh", ex_mesh, "Optional adversary mesh prefix to insert");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      apply_env_seed(gen_seed);
      SceneGenConfig cfg = variant_config(gen_variant);
      auto scenes = generate_scenes(cfg, gen_count, gen_seed);
      nlohmann::json cfgj = {{"variant", gen_variant}, {"count", gen_count}, {"seed", gen_seed}};
      save_dataset(scenes, gen_out, cfgj);
      write_manifest(gen_out + "/index.json", "gen-scenes", cfgj, gen_seed);
      std::cout << "wrote " << scenes.size() << " scenes to " << gen_out << "\n";
    } else if (*train) {
      apply_env_seed(tr_seed);
      auto scenes = load_dataset(tr_data);
      DetectorConfig dcfg;
      std::mt19937_64 rng(tr_seed);
      ParamMap params = init_detector_params(dcfg, rng);
      AdamOptimizer opt;
      opt.lr = tr_lr;
      std::uniform_int_distribution<size_t> pick(0, scenes.size() - 1);
      for (int64_t step = 0; step < tr_steps; ++step) {
        std::vector<TrainSample> batch;
        for (int64_t b = 0; b < tr_batch; ++b) {
          const Scene& s = scenes[pick(rng)];
          batch.push_back({s.image, s.sweep.points, s.gt()});
        }
        double loss = train_step(batch, params, opt, dcfg, scenes[0].cam);
        if (step % 50 == 0)
          std::cout << "step " << step << "  loss " << loss << std::endl;
      }
      save_checkpoint(tr_out, params);
      nlohmann::json cfgj = {{"data", tr_data}, {"steps", tr_steps}, {"batch", tr_batch},
                             {"lr", tr_lr},     {"seed", tr_seed}};
      write_manifest(tr_out, "train-detector", cfgj, tr_seed);
      if (!tr_eval.empty()) {
        auto eval_scenes = load_dataset(tr_eval);
        auto samples = clean_ap_samples(eval_scenes, params, dcfg);
        auto ap50 = average_precision(samples, 0.5);
        auto ap70 = average_precision(samples, 0.7);
        if (ap50) std::cout << "AP@0.5: " << 100.0 * *ap50 << "%\n";
        if (ap70) std::cout << "AP@0.7: " << 100.0 * *ap70 << "%\n";
      }
    } else if (*atk) {
      apply_env_seed(at_seed);
      AttackConfig acfg;
      acfg.lambda_fp = at_lfp;
      acfg.lambda_lap = at_llap;
      acfg.steps = at_steps;
      acfg.seed = at_seed;
      acfg.box = box_for_size(at_box);
      if (at_target == "lidar") acfg.target_image = false;
      else if (at_target == "image") acfg.target_lidar = false;
      else if (at_target != "both")
        throw CLI::ValidationError("--target must be lidar|image|both");
      nlohmann::json cfgj = attack_config_json(acfg);
      cfgj["random_baseline"] = at_random;
      cfgj["data"] = at_data;
      cfgj["ckpt"] = at_ckpt;

      if (at_random) {
        TexturedMesh mesh = random_baseline_mesh(acfg.box, at_seed);
        save_mesh_prefix(mesh, at_out);
        write_attack_log(at_out + ".log.csv", {});
      } else {
        auto scenes = load_dataset(at_data);
        std::vector<Scene> val;
        if (!at_val.empty()) val = load_dataset(at_val);
        auto params = load_checkpoint(at_ckpt);
        DetectorConfig dcfg = detector_config_for(params);
        auto res = run_universal_attack(scenes, val, params, dcfg, acfg, true);
        save_mesh_prefix(res.mesh, at_out);
        write_attack_log(at_out + ".log.csv", res.log);
      }
      write_manifest(at_out + ".obj", "attack", cfgj, at_seed);
      std::cout << "wrote mesh " << at_out << ".obj\n";
    } else if (*ev) {
      apply_env_seed(ev_seed);
      return run_evaluate(ev_data, ev_ckpt, ev_mesh, ev_out, ev_csv, ev_box, ev_def, ev_quality,
                          "evaluate", ev_seed);
    } else if (*def) {
      apply_env_seed(df_seed);
      auto scenes = load_dataset(df_data);
      auto params = load_checkpoint(df_ckpt);
      DefenseConfig dfg;
      dfg.compression_quality = df_quality;
      dfg.adversary_updates_per_model_update = df_ratio;
      dfg.model_updates = df_updates;
      if (df_kind == "compression") {
        dfg.kind = DefenseKind::compression;
        save_checkpoint(df_out, params);  // params unchanged; sidecar documents the preproc
      } else if (df_kind == "adv-train" || df_kind == "adv-train-fd") {
        dfg.kind = df_kind == "adv-train" ? DefenseKind::adv_train : DefenseKind::adv_train_fd;
        DetectorConfig dcfg = detector_config_for(params);
        if (dfg.kind == DefenseKind::adv_train_fd && !dcfg.use_nonlocal) {
          std::mt19937_64 rng(df_seed ^ 0xfeedULL);
          add_nonlocal_params(params, dcfg, rng);
          dcfg.use_nonlocal = true;
        }
        AttackConfig acfg;
        acfg.seed = df_seed;
        auto res = free_adv_train(scenes, params, dcfg, acfg, dfg, df_seed, true);
        save_checkpoint(df_out, params);
        if (!df_mesh_out.empty()) save_mesh_prefix(res.mesh, df_mesh_out);
      } else {
        throw CLI::ValidationError("--kind must be compression|adv-train|adv-train-fd");
      }
      save_defense_meta(df_out + ".defense.json", dfg);
      nlohmann::json cfgj = {{"data", df_data},       {"ckpt", df_ckpt},
                             {"kind", df_kind},       {"quality", df_quality},
                             {"adv_ratio", df_ratio}, {"model_updates", df_updates},
                             {"seed", df_seed}};
      write_manifest(df_out, "defend", cfgj, df_seed);
      std::cout << "wrote hardened checkpoint " << df_out << "\n";
    } else if (*tf) {
      uint64_t seed = 0;
      apply_env_seed(seed);
      return run_evaluate(tf_data, tf_ckpt, tf_mesh, tf_out, tf_csv, tf_box, "", 50, "transfer",
                          seed);
    } else if (*ex) {
      namespace fs = std::filesystem;
      auto scenes = load_dataset(ex_data);
      if (ex_scene < 0 || ex_scene >= static_cast<int64_t>(scenes.size()))
        throw std::runtime_error("export-debug: scene index out of range");
      const Scene& s = scenes[ex_scene];
      fs::create_directories(ex_out);
      save_png(ex_out + "/clean_image.png", s.image);
      save_depth_pgm(ex_out + "/dense_depth.pgm", s.dense_depth);
      save_sweep(s.sweep, s.lidar, ex_out + "/clean_sweep.ply", ex_out + "/clean_sweep.json");
      TexturedMesh world = build_scene_mesh(s);
      save_mesh_obj(world, ex_out + "/scene_mesh.obj", ex_out + "/scene_mesh.tex.json");
      if (!ex_mesh.empty()) {
        TexturedMesh mesh = load_mesh_prefix(ex_mesh);
        BoxConstraint box;
        box.lz = 0;  // mesh vertices already carry their extents; offset by fitted top
        double max_z = 0;
        for (int64_t i = 0; i < mesh.num_vertices(); ++i)
          max_z = std::max(max_z, std::abs(mesh.vertices.at2(i, 2)));
        box.lz = max_z;
        Pose pose = placement_pose(s.host_roof, box);
        PerturbedInputs in = insert_adversary(s, make_const(mesh.vertices),
                                              make_const(mesh.textures), mesh.faces, pose);
        save_png(ex_out + "/perturbed_image.png", in.image->t);
        LidarSweep merged;
        merged.points = in.sweep.points->t;
        merged.ray_ids = in.sweep.ray_ids;
        merged.ray_count = in.sweep.ray_count;
        save_sweep(merged, s.lidar, ex_out + "/perturbed_sweep.ply",
                   ex_out + "/perturbed_sweep.json");
        save_mesh_obj(transform_mesh(mesh, pose), ex_out + "/adversary_world.obj",
                      ex_out + "/adversary_world.tex.json");
      }
      nlohmann::json cfgj = {{"data", ex_data}, {"scene", ex_scene}, {"mesh", ex_mesh}};
      write_manifest(ex_out + "/export", "export-debug", cfgj, 0);
      std::cout << "wrote debug artifacts to " << ex_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

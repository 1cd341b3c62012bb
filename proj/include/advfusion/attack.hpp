#pragma once

#include <functional>

#include "advfusion/detector.hpp"
#include "advfusion/optim.hpp"
#include "advfusion/scene.hpp"

namespace advf {

struct AttackConfig {
  double lambda_fp = 1.0;     // weight of the false-positive objective
  double lambda_lap = 0.001;  // weight of the Laplacian smoothness penalty
  double lr_texture = 0.004;
  double lr_vertex = 0.001;
  BoxConstraint box;
  bool target_lidar = true;
  bool target_image = true;
  int64_t steps = 250;
  int64_t batch_size = 4;
  double relevance_score_min = 0.1;
  bool relevance_requires_overlap = true;
  int64_t log_every = 25;    // validation cadence in the universal loop
  int64_t val_subset = 16;   // validation scenes scored per log point
  uint64_t seed = 1;

  void validate() const {
    if (!target_lidar && !target_image)
      throw std::invalid_argument("AttackConfig: target modality set must be non-empty");
    if (steps <= 0 || batch_size <= 0)
      throw std::invalid_argument("AttackConfig: steps and batch_size must be positive");
    if (lambda_fp < 0 || lambda_lap < 0)
      throw std::invalid_argument("AttackConfig: loss weights must be non-negative");
  }
};

// Proposal indices with score above the relevance threshold and (optionally)
// positive overlap with the host's ground-truth box, plus their IoUs.
struct RelevantSet {
  std::vector<int64_t> idx;
  std::vector<double> iou;
};

inline RelevantSet relevant_proposals(const DetectorOutput& out, const DetectionBox& host,
                                      const AttackConfig& cfg) {
  RelevantSet rel;
  for (size_t k = 0; k < out.proposals.size(); ++k) {
    const auto& p = out.proposals[k];
    if (p.score <= cfg.relevance_score_min) continue;
    double iou = rotated_iou(p, host);
    if (cfg.relevance_requires_overlap && iou <= 0) continue;
    rel.idx.push_back(static_cast<int64_t>(k));
    rel.iou.push_back(iou);
  }
  return rel;
}

namespace attackdetail {

// sum_k w_k * log(1 - sigmoid(logit_k)) with scores clipped to
// [1e-7, 1 - 1e-7]; w fixed (stop-gradient weights).
inline Value weighted_log_one_minus_score(const Value& cls_logits,
                                          const std::vector<int64_t>& idx,
                                          const std::vector<double>& w) {
  Value flat = reshape(cls_logits, {cls_logits->t.numel()});
  Value s = clampv(sigmoid(gather(flat, idx)), 1e-7, 1.0 - 1e-7);
  Value log1m = vlog(add_scalar(neg(s), 1.0));
  Tensor wt({static_cast<int64_t>(w.size())}, w);
  return vsum(mul(log1m, make_const(std::move(wt))));
}

}  // namespace attackdetail

// Eq-style false-negative objective: sum over relevant proposals of
// -IoU(b, b*) * log(1 - score(b)); the IoU acts as a constant weight.
inline Value loss_fn(const DetectorOutput& out, const DetectionBox& host,
                     const AttackConfig& cfg) {
  RelevantSet rel = relevant_proposals(out, host, cfg);
  if (rel.idx.empty()) return make_const(Tensor::scalar(0.0));
  std::vector<double> w(rel.iou.size());
  for (size_t i = 0; i < w.size(); ++i) w[i] = -rel.iou[i];
  return attackdetail::weighted_log_one_minus_score(out.cls_logits, rel.idx, w);
}

// False-positive objective: sum of log(1 - score) over proposals with zero
// IoU against every ground-truth box; minimizing drives those scores up.
inline Value loss_fp(const DetectorOutput& out, const std::vector<DetectionBox>& gt) {
  std::vector<int64_t> idx;
  for (size_t k = 0; k < out.proposals.size(); ++k) {
    bool overlaps = false;
    for (const auto& g : gt)
      if (rotated_iou(out.proposals[k], g) > 0) {
        overlaps = true;
        break;
      }
    if (!overlaps) idx.push_back(static_cast<int64_t>(k));
  }
  if (idx.empty()) return make_const(Tensor::scalar(0.0));
  std::vector<double> w(idx.size(), 1.0);
  return attackdetail::weighted_log_one_minus_score(out.cls_logits, idx, w);
}

// Zero the gradient path into the untargeted modality's input while leaving
// the forward simulation untouched.
inline Value gate_modality(const Value& input, bool targeted, const AttackConfig& cfg) {
  cfg.validate();
  return targeted ? input : detach(input);
}

// In-place l-inf projection after a gradient step.
inline void project_mesh(Value& verts, Value& textures, const BoxConstraint& box) {
  for (int64_t i = 0; i < verts->t.shape[0]; ++i) {
    verts->t.at2(i, 0) = std::clamp(verts->t.at2(i, 0), -box.lx, box.lx);
    verts->t.at2(i, 1) = std::clamp(verts->t.at2(i, 1), -box.ly, box.ly);
    verts->t.at2(i, 2) = std::clamp(verts->t.at2(i, 2), -box.lz, box.lz);
  }
  for (auto& v : textures->t.data) v = std::clamp(v, 0.0, 1.0);
}

struct AttackStepResult {
  double l_fn = 0, l_fp = 0, l_lap = 0, total = 0;
  bool applied = false;
};

// Optimizer state for the two mesh leaves.
struct MeshOptimizer {
  AdamState verts, textures;
};

// One projected gradient step of the universal objective over a scene batch.
// The detector stays frozen (its params are wrapped as constants upstream by
// requires_grad being irrelevant: backward only writes into grad-requiring
// leaves, and the step only applies V/T updates).
inline AttackStepResult attack_step(Value& verts, Value& textures,
                                    const std::vector<std::vector<int32_t>>& neighbors,
                                    const std::vector<std::array<int32_t, 3>>& faces,
                                    const std::vector<const Scene*>& batch,
                                    const ParamMap& params, const DetectorConfig& dcfg,
                                    const AttackConfig& cfg, MeshOptimizer& opt) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("attack_step: empty batch");
  std::vector<Value> fns, fps;
  for (const Scene* scene : batch) {
    Pose pose = placement_pose(scene->host_roof, cfg.box);
    PerturbedInputs in = insert_adversary(*scene, verts, textures, faces, pose);
    Value image = gate_modality(in.image, cfg.target_image, cfg);
    Value points = gate_modality(in.sweep.points, cfg.target_lidar, cfg);
    DetectorOutput out = detect(image, points, params, dcfg, scene->cam);
    fns.push_back(loss_fn(out, scene->host().box, cfg));
    fps.push_back(loss_fp(out, scene->gt()));
  }
  auto mean = [&](std::vector<Value>& vs) {
    Value s = vs[0];
    for (size_t i = 1; i < vs.size(); ++i) s = add(s, vs[i]);
    return mul_scalar(s, 1.0 / static_cast<double>(vs.size()));
  };
  Value l_fn = mean(fns), l_fp = mean(fps);
  Value l_lap = laplacian_loss(verts, neighbors);
  Value total = add(add(l_fn, mul_scalar(l_fp, cfg.lambda_fp)),
                    mul_scalar(l_lap, cfg.lambda_lap));

  AttackStepResult res;
  res.l_fn = l_fn->t.data[0];
  res.l_fp = l_fp->t.data[0];
  res.l_lap = l_lap->t.data[0];
  res.total = total->t.data[0];
  if (!std::isfinite(res.total)) return res;  // step skipped

  zero_grads(total);
  backward(total);
  if (!verts->grad.data.empty()) opt.verts.update(verts->t, verts->grad, cfg.lr_vertex);
  if (!textures->grad.data.empty()) opt.textures.update(textures->t, textures->grad, cfg.lr_texture);
  project_mesh(verts, textures, cfg.box);
  res.applied = true;
  return res;
}

// Adversary initialization: a 2-subdivision icosphere (162 vertices, 320
// faces) scaled per axis to fill the constraint box, 5x5 texel atlas at 0.5.
inline TexturedMesh init_adversary_mesh(const BoxConstraint& box) {
  TexturedMesh m = make_icosphere(2, 5);
  for (int64_t i = 0; i < m.num_vertices(); ++i) {
    m.vertices.at2(i, 0) *= box.lx;
    m.vertices.at2(i, 1) *= box.ly;
    m.vertices.at2(i, 2) *= box.lz;
  }
  return m;
}

// Unoptimized baseline: random vertex jitter inside the box, random texels.
inline TexturedMesh random_baseline_mesh(const BoxConstraint& box, uint64_t seed) {
  TexturedMesh m = init_adversary_mesh(box);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int64_t i = 0; i < m.num_vertices(); ++i) {
    m.vertices.at2(i, 0) = std::clamp(m.vertices.at2(i, 0) + (uni(rng) - 0.5) * 0.6 * box.lx,
                                      -box.lx, box.lx);
    m.vertices.at2(i, 1) = std::clamp(m.vertices.at2(i, 1) + (uni(rng) - 0.5) * 0.6 * box.ly,
                                      -box.ly, box.ly);
    m.vertices.at2(i, 2) = std::clamp(m.vertices.at2(i, 2) + (uni(rng) - 0.5) * 0.6 * box.lz,
                                      -box.lz, box.lz);
  }
  for (auto& v : m.textures.data) v = uni(rng);
  return m;
}

// Per-scene before/after records for a given adversary mesh (empty mesh
// pointer = clean pass only is not supported here; callers dealing with the
// clean baseline reuse the pre_detections field).
using ImagePreproc = std::function<Tensor(const Tensor&)>;

inline std::vector<EvalRecord> evaluate_attack(const std::vector<Scene>& scenes,
                                               const TexturedMesh& mesh, const ParamMap& params,
                                               const DetectorConfig& dcfg, const BoxConstraint& box,
                                               const EvalThresholds& thr = {},
                                               const ImagePreproc& preproc = nullptr) {
  std::vector<EvalRecord> records(scenes.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < static_cast<int64_t>(scenes.size()); ++i) {
    const Scene& scene = scenes[i];
    EvalRecord r;
    r.host_truth = scene.host().box;
    r.gt_boxes = scene.gt();
    Tensor clean_img = preproc ? preproc(scene.image) : scene.image;
    DetectorOutput pre = detect(make_const(clean_img), make_const(scene.sweep.points), params,
                                dcfg, scene.cam);
    r.pre_detections = final_detections(pre, dcfg);
    Pose pose = placement_pose(scene.host_roof, box);
    PerturbedInputs in = insert_adversary(scene, make_const(mesh.vertices),
                                          make_const(mesh.textures), mesh.faces, pose);
    Value post_img = preproc ? make_const(preproc(in.image->t)) : in.image;
    DetectorOutput post = detect(post_img, in.sweep.points, params, dcfg, scene.cam);
    r.post_detections = final_detections(post, dcfg);
    derive_flags(r, thr);
    records[i] = r;
  }
  return records;
}

// Detections-vs-truth samples on the clean inputs, for average precision.
inline std::vector<ApSample> clean_ap_samples(const std::vector<Scene>& scenes,
                                              const ParamMap& params, const DetectorConfig& dcfg,
                                              const ImagePreproc& preproc = nullptr) {
  std::vector<ApSample> samples(scenes.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < static_cast<int64_t>(scenes.size()); ++i) {
    const Scene& scene = scenes[i];
    Tensor img = preproc ? preproc(scene.image) : scene.image;
    DetectorOutput out =
        detect(make_const(img), make_const(scene.sweep.points), params, dcfg, scene.cam);
    samples[i] = {final_detections(out, dcfg), scene.gt()};
  }
  return samples;
}

struct AttackLogRow {
  int64_t step;
  double l_fn, l_fp, l_lap;
  double val_fn_asr = -1, val_fp_asr = -1;  // -1 = not measured this step
};

inline void write_attack_log(const std::string& path, const std::vector<AttackLogRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_attack_log: cannot open " + path);
  f << "step,L_fn,L_fp,L_lap,val_fn_asr,val_fp_asr\n";
  for (const auto& r : rows) {
    f << r.step << "," << r.l_fn << "," << r.l_fp << "," << r.l_lap << ",";
    if (r.val_fn_asr >= 0) f << r.val_fn_asr;
    f << ",";
    if (r.val_fp_asr >= 0) f << r.val_fp_asr;
    f << "\n";
  }
}

struct AttackRunResult {
  TexturedMesh mesh;
  std::vector<AttackLogRow> log;
};

// Universal (input-agnostic) attack: one mesh optimized over minibatches
// sampled with replacement across all training scenes, with periodic ASR
// validation on a held-out split.
inline AttackRunResult run_universal_attack(const std::vector<Scene>& train,
                                            const std::vector<Scene>& val, const ParamMap& params,
                                            const DetectorConfig& dcfg, const AttackConfig& cfg,
                                            bool verbose = false) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("run_universal_attack: no training scenes");
  AttackRunResult res;
  res.mesh = init_adversary_mesh(cfg.box);
  Value verts = make_leaf(res.mesh.vertices);
  Value textures = make_leaf(res.mesh.textures);
  MeshOptimizer opt;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<size_t> pick(0, train.size() - 1);

  std::vector<Scene> val_sub;
  if (!val.empty()) {
    size_t n = std::min<size_t>(static_cast<size_t>(cfg.val_subset), val.size());
    val_sub.assign(val.begin(), val.begin() + n);
  }

  for (int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<const Scene*> batch;
    for (int64_t b = 0; b < cfg.batch_size; ++b) batch.push_back(&train[pick(rng)]);
    AttackStepResult sr = attack_step(verts, textures, res.mesh.neighbors, res.mesh.faces, batch,
                                      params, dcfg, cfg, opt);
    AttackLogRow row{step, sr.l_fn, sr.l_fp, sr.l_lap};
    if (!sr.applied && verbose)
      std::fprintf(stderr, "attack step %lld skipped: non-finite loss\n",
                   static_cast<long long>(step));
    bool log_now = !val_sub.empty() &&
                   (step % cfg.log_every == cfg.log_every - 1 || step == cfg.steps - 1);
    if (log_now) {
      res.mesh.vertices = verts->t;
      res.mesh.textures = textures->t;
      auto records = evaluate_attack(val_sub, res.mesh, params, dcfg, cfg.box);
      auto asr = attack_success_rates(records);
      row.val_fn_asr = asr.fn_asr.value_or(-1);
      row.val_fp_asr = asr.fp_asr;
      if (verbose)
        std::fprintf(stderr, "step %lld  L_fn %.4f  L_fp %.4f  val FN ASR %.1f%%\n",
                     static_cast<long long>(step), sr.l_fn, sr.l_fp, row.val_fn_asr);
    }
    res.log.push_back(row);
  }
  res.mesh.vertices = verts->t;
  res.mesh.textures = textures->t;
  return res;
}

}  // namespace advf

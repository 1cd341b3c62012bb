#pragma once

#include "advfusion/attack.hpp"
#include "advfusion/denoise.hpp"
#include "advfusion/detector.hpp"

namespace advf {

enum class DefenseKind { compression, adv_train, adv_train_fd };

struct DefenseConfig {
  DefenseKind kind = DefenseKind::adv_train;
  int compression_quality = 50;               // 1..100
  int adversary_updates_per_model_update = 5; // the k:1 free-adversarial ratio
  std::vector<int> denoise_block_positions{0};
  int64_t model_updates = 150;
  double model_lr = 2e-4;
  int64_t batch_scenes = 2;  // scenes per model update; each yields clean + perturbed

  void validate() const {
    if (compression_quality < 1 || compression_quality > 100)
      throw std::invalid_argument("DefenseConfig: quality must be in [1,100]");
    if (adversary_updates_per_model_update < 0 || model_updates <= 0 || batch_scenes <= 0)
      throw std::invalid_argument("DefenseConfig: counts must be positive");
  }
};

inline std::string defense_kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::compression: return "compression";
    case DefenseKind::adv_train: return "adv-train";
    case DefenseKind::adv_train_fd: return "adv-train-fd";
  }
  return "?";
}

namespace dctdetail {

// JPEG luminance quantization table (zig-zag-free row-major layout).
inline const int kLumaTable[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline void scaled_table(int quality, double out[64]) {
  double s = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  for (int i = 0; i < 64; ++i)
    out[i] = std::clamp(std::floor((kLumaTable[i] * s + 50.0) / 100.0), 1.0, 255.0);
}

// Orthonormal 8x8 DCT-II basis.
inline const double* dct_basis() {
  static double b[64];
  static bool init = [] {
    for (int k = 0; k < 8; ++k) {
      double c = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int n = 0; n < 8; ++n) b[k * 8 + n] = c * std::cos((2 * n + 1) * k * M_PI / 16.0);
    }
    return true;
  }();
  (void)init;
  return b;
}

}  // namespace dctdetail

// JPEG-style high-frequency removal: per-channel 8x8 block DCT, quantization
// with the standard luminance table scaled by quality, inverse DCT, clamp.
// Applied as non-differentiated preprocessing at inference time.
inline Tensor dct_compress(const Tensor& image, int quality) {
  if (image.ndim() != 3 || image.shape[0] != 3)
    throw std::invalid_argument("dct_compress: expected 3xHxW image");
  if (quality < 1 || quality > 100)
    throw std::invalid_argument("dct_compress: quality must be in [1,100]");
  const int64_t h = image.shape[1], w = image.shape[2];
  double table[64];
  dctdetail::scaled_table(quality, table);
  const double* basis = dctdetail::dct_basis();

  Tensor out(image.shape);
  for (int ch = 0; ch < 3; ++ch)
    for (int64_t by = 0; by < h; by += 8)
      for (int64_t bx = 0; bx < w; bx += 8) {
        double block[64], tmp[64], coef[64];
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            int64_t y = std::min(by + i, h - 1), x = std::min(bx + j, w - 1);
            block[i * 8 + j] = image.at3(ch, y, x) * 255.0 - 128.0;
          }
        // rows then columns
        for (int i = 0; i < 8; ++i)
          for (int k = 0; k < 8; ++k) {
            double s = 0;
            for (int n = 0; n < 8; ++n) s += basis[k * 8 + n] * block[i * 8 + n];
            tmp[i * 8 + k] = s;
          }
        for (int j = 0; j < 8; ++j)
          for (int k = 0; k < 8; ++k) {
            double s = 0;
            for (int n = 0; n < 8; ++n) s += basis[k * 8 + n] * tmp[n * 8 + j];
            coef[k * 8 + j] = s;
          }
        for (int i = 0; i < 64; ++i) coef[i] = std::round(coef[i] / table[i]) * table[i];
        // inverse: columns then rows
        for (int j = 0; j < 8; ++j)
          for (int n = 0; n < 8; ++n) {
            double s = 0;
            for (int k = 0; k < 8; ++k) s += basis[k * 8 + n] * coef[k * 8 + j];
            tmp[n * 8 + j] = s;
          }
        for (int i = 0; i < 8; ++i)
          for (int n = 0; n < 8; ++n) {
            double s = 0;
            for (int k = 0; k < 8; ++k) s += basis[k * 8 + n] * tmp[i * 8 + k];
            block[i * 8 + n] = s;
          }
        for (int i = 0; i < 8 && by + i < h; ++i)
          for (int j = 0; j < 8 && bx + j < w; ++j)
            out.at3(ch, by + i, bx + j) = std::clamp((block[i * 8 + j] + 128.0) / 255.0, 0.0, 1.0);
      }
  return out;
}

struct FreeAdvTrainResult {
  TexturedMesh mesh;  // the persistent adversary at the end of training
  std::vector<double> model_losses;
};

// Free adversarial training: k projected-gradient updates of one persistent
// adversary per detector update; detector batches mix clean and perturbed
// renders of the same scenes 1:1. With k = 0 the mesh stays frozen and the
// loop reduces to clean fine-tuning.
inline FreeAdvTrainResult free_adv_train(const std::vector<Scene>& scenes, ParamMap& params,
                                         const DetectorConfig& dcfg, const AttackConfig& acfg_in,
                                         const DefenseConfig& dfg, uint64_t seed,
                                         bool verbose = false) {
  dfg.validate();
  AttackConfig acfg = acfg_in;
  acfg.validate();
  if (scenes.empty()) throw std::invalid_argument("free_adv_train: no scenes");
  const int k = dfg.adversary_updates_per_model_update;

  FreeAdvTrainResult res;
  res.mesh = init_adversary_mesh(acfg.box);
  Value verts = make_leaf(res.mesh.vertices);
  Value textures = make_leaf(res.mesh.textures);
  MeshOptimizer mesh_opt;
  AdamOptimizer model_opt;
  model_opt.lr = dfg.model_lr;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, scenes.size() - 1);

  for (int64_t m = 0; m < dfg.model_updates; ++m) {
    // adversary phase: detector frozen
    for (int a = 0; a < k; ++a) {
      std::vector<const Scene*> batch;
      for (int64_t b = 0; b < acfg.batch_size; ++b) batch.push_back(&scenes[pick(rng)]);
      attack_step(verts, textures, res.mesh.neighbors, res.mesh.faces, batch, params, dcfg, acfg,
                  mesh_opt);
    }
    res.mesh.vertices = verts->t;
    res.mesh.textures = textures->t;

    // model phase: mesh frozen; clean and perturbed renders of fresh hosts
    std::vector<TrainSample> batch;
    for (int64_t b = 0; b < dfg.batch_scenes; ++b) {
      const Scene& s = scenes[pick(rng)];
      TrainSample clean{s.image, s.sweep.points, s.gt()};
      batch.push_back(clean);
      if (k > 0) {
        Pose pose = placement_pose(s.host_roof, acfg.box);
        PerturbedInputs in = insert_adversary(s, make_const(res.mesh.vertices),
                                              make_const(res.mesh.textures), res.mesh.faces, pose);
        batch.push_back({in.image->t, in.sweep.points->t, s.gt()});
      }
    }
    double loss = train_step(batch, params, model_opt, dcfg, scenes[0].cam);
    res.model_losses.push_back(loss);
    if (verbose && m % 10 == 0)
      std::fprintf(stderr, "defense model update %lld  loss %.4f\n", static_cast<long long>(m),
                   loss);
  }
  return res;
}

inline void save_defense_meta(const std::string& path, const DefenseConfig& cfg) {
  nlohmann::json j;
  j["kind"] = defense_kind_name(cfg.kind);
  j["compression_quality"] = cfg.compression_quality;
  j["adversary_updates_per_model_update"] = cfg.adversary_updates_per_model_update;
  j["denoise_block_positions"] = cfg.denoise_block_positions;
  j["model_updates"] = cfg.model_updates;
  j["model_lr"] = cfg.model_lr;
  j["batch_scenes"] = cfg.batch_scenes;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_defense_meta: cannot open " + path);
  f << j.dump(2) << "\n";
}

}  // namespace advf

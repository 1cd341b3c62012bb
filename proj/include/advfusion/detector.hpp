#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "advfusion/autodiff.hpp"
#include "advfusion/camera.hpp"
#include "advfusion/denoise.hpp"
#include "advfusion/eval.hpp"
#include "advfusion/lidar.hpp"
#include "advfusion/optim.hpp"

namespace advf {

// Architecture and post-processing parameters of the BEV fusion detector.
struct DetectorConfig {
  // BEV grid (x forward, y left); tensor layout (z_slices, nx, ny)
  double x_min = 0.0, x_max = 40.0;
  double y_min = -16.0, y_max = 16.0;
  double cell = 0.5;
  double z_min = 0.0, z_max = 3.0;
  int64_t z_slices = 3;
  // image input
  int64_t image_h = 96, image_w = 320;
  // channel widths
  int64_t c_bev = 24, c_img = 24, c_fuse = 48;
  int64_t nl_embed = 8;
  int head_stride = 2;
  // anchors: one size prior at each listed heading
  double anchor_len = 4.6, anchor_wid = 1.9;
  std::vector<double> anchor_headings{0.0, M_PI / 2.0};
  // post-processing and training thresholds
  double score_threshold = 0.5;
  double nms_iou = 0.1;
  double pos_iou = 0.6, neg_iou = 0.45;
  double reg_weight = 2.0;
  bool use_nonlocal = false;

  int64_t nx() const { return check_div(x_max - x_min); }
  int64_t ny() const { return check_div(y_max - y_min); }
  int64_t hx() const { return nx() / head_stride; }
  int64_t hy() const { return ny() / head_stride; }
  int64_t n_anchors() const { return static_cast<int64_t>(anchor_headings.size()); }
  double head_cell() const { return cell * head_stride; }
  double anchor_diag() const { return std::hypot(anchor_len, anchor_wid); }

 private:
  int64_t check_div(double range) const {
    if (range <= 0 || cell <= 0)
      throw std::invalid_argument("DetectorConfig: ranges and cell size must be positive");
    double n = range / cell;
    if (std::abs(n - std::round(n)) > 1e-9)
      throw std::invalid_argument("DetectorConfig: cell size must divide the BEV range");
    return static_cast<int64_t>(std::round(n));
  }
};

using ParamMap = std::map<std::string, Value>;

namespace detdetail {

inline Value he_conv(std::vector<int64_t> shape, std::mt19937_64& rng) {
  double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = dist(rng);
  return make_leaf(std::move(t));
}

inline Value zeros_leaf(std::vector<int64_t> shape, double fill = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = fill;
  return make_leaf(std::move(t));
}

}  // namespace detdetail

inline void add_nonlocal_params(ParamMap& params, const DetectorConfig& cfg,
                                std::mt19937_64& rng) {
  auto nl = make_nonlocal_params(cfg.c_img, cfg.nl_embed, rng);
  params["nl0.w_theta"] = nl.w_theta;
  params["nl0.b_theta"] = nl.b_theta;
  params["nl0.w_phi"] = nl.w_phi;
  params["nl0.b_phi"] = nl.b_phi;
  params["nl0.w_g"] = nl.w_g;
  params["nl0.b_g"] = nl.b_g;
  params["nl0.w_out"] = nl.w_out;
  params["nl0.b_out"] = nl.b_out;
}

inline NonLocalParams nonlocal_from(const ParamMap& params, const std::string& prefix) {
  NonLocalParams nl;
  nl.w_theta = params.at(prefix + ".w_theta");
  nl.b_theta = params.at(prefix + ".b_theta");
  nl.w_phi = params.at(prefix + ".w_phi");
  nl.b_phi = params.at(prefix + ".b_phi");
  nl.w_g = params.at(prefix + ".w_g");
  nl.b_g = params.at(prefix + ".b_g");
  nl.w_out = params.at(prefix + ".w_out");
  nl.b_out = params.at(prefix + ".b_out");
  return nl;
}

inline ParamMap init_detector_params(const DetectorConfig& cfg, std::mt19937_64& rng) {
  using detdetail::he_conv;
  using detdetail::zeros_leaf;
  ParamMap p;
  p["bev1.w"] = he_conv({cfg.c_bev, cfg.z_slices, 3, 3}, rng);
  p["bev1.b"] = zeros_leaf({cfg.c_bev});
  p["bev2.w"] = he_conv({cfg.c_bev, cfg.c_bev, 3, 3}, rng);
  p["bev2.b"] = zeros_leaf({cfg.c_bev});
  p["img1.w"] = he_conv({16, 3, 3, 3}, rng);
  p["img1.b"] = zeros_leaf({16});
  p["img2.w"] = he_conv({cfg.c_img, 16, 3, 3}, rng);
  p["img2.b"] = zeros_leaf({cfg.c_img});
  p["res1.w"] = he_conv({cfg.c_img, cfg.c_img, 3, 3}, rng);
  p["res1.b"] = zeros_leaf({cfg.c_img});
  p["res2.w"] = he_conv({cfg.c_img, cfg.c_img, 3, 3}, rng);
  p["res2.b"] = zeros_leaf({cfg.c_img});
  p["fuse1.w"] = he_conv({cfg.c_fuse, cfg.c_bev + cfg.c_img, 3, 3}, rng);
  p["fuse1.b"] = zeros_leaf({cfg.c_fuse});
  p["fuse2.w"] = he_conv({cfg.c_fuse, cfg.c_fuse, 3, 3}, rng);
  p["fuse2.b"] = zeros_leaf({cfg.c_fuse});
  p["cls.w"] = he_conv({cfg.n_anchors(), cfg.c_fuse, 1, 1}, rng);
  p["cls.b"] = zeros_leaf({cfg.n_anchors()}, -2.0);  // low-score prior
  p["reg.w"] = he_conv({cfg.n_anchors() * 6, cfg.c_fuse, 1, 1}, rng);
  p["reg.b"] = zeros_leaf({cfg.n_anchors() * 6});
  if (cfg.use_nonlocal) add_nonlocal_params(p, cfg, rng);
  return p;
}

// Differentiable soft occupancy grid: each point spreads trilinear weights
// over the neighboring BEV cells and height slices. Out-of-range points drop.
inline Value voxelize_bev(const Value& points, const DetectorConfig& cfg) {
  if (points->t.ndim() != 2 || points->t.shape[1] != 3)
    throw std::invalid_argument("voxelize_bev: expected Px3 points, got " + points->t.shape_str());
  const int64_t nx = cfg.nx(), ny = cfg.ny(), nz = cfg.z_slices;
  const double zcell = (cfg.z_max - cfg.z_min) / static_cast<double>(nz);

  struct Contrib {
    int64_t flat;   // index into (nz, nx, ny)
    double w;
    double dwx, dwy, dwz;  // dw / d point coordinate
  };
  auto gather = [=](const Tensor& pts, int64_t i, std::vector<Contrib>& out) {
    double u = (pts.at2(i, 0) - cfg.x_min) / cfg.cell - 0.5;
    double v = (pts.at2(i, 1) - cfg.y_min) / cfg.cell - 0.5;
    double s = (pts.at2(i, 2) - cfg.z_min) / zcell - 0.5;
    int64_t i0 = static_cast<int64_t>(std::floor(u));
    int64_t j0 = static_cast<int64_t>(std::floor(v));
    int64_t k0 = static_cast<int64_t>(std::floor(s));
    double fu = u - i0, fv = v - j0, fs = s - k0;
    for (int di = 0; di < 2; ++di)
      for (int dj = 0; dj < 2; ++dj)
        for (int dk = 0; dk < 2; ++dk) {
          int64_t ii = i0 + di, jj = j0 + dj, kk = k0 + dk;
          if (ii < 0 || ii >= nx || jj < 0 || jj >= ny || kk < 0 || kk >= nz) continue;
          double wx = di ? fu : 1.0 - fu;
          double wy = dj ? fv : 1.0 - fv;
          double wz = dk ? fs : 1.0 - fs;
          double sx = (di ? 1.0 : -1.0) / cfg.cell;
          double sy = (dj ? 1.0 : -1.0) / cfg.cell;
          double sz = (dk ? 1.0 : -1.0) / zcell;
          out.push_back({(kk * nx + ii) * ny + jj, wx * wy * wz, sx * wy * wz, wx * sy * wz,
                         wx * wy * sz});
        }
  };

  Tensor out({nz, nx, ny});
  std::vector<Contrib> cs;
  for (int64_t i = 0; i < points->t.shape[0]; ++i) {
    cs.clear();
    gather(points->t, i, cs);
    for (const auto& c : cs) out.data[c.flat] += c.w;
  }
  return make_node(std::move(out), {points},
                   [gather](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     std::vector<Contrib> cs;
                     for (int64_t i = 0; i < p->t.shape[0]; ++i) {
                       cs.clear();
                       gather(p->t, i, cs);
                       for (const auto& c : cs) {
                         double g = n.grad.data[c.flat];
                         p->grad.at2(i, 0) += g * c.dwx;
                         p->grad.at2(i, 1) += g * c.dwy;
                         p->grad.at2(i, 2) += g * c.dwz;
                       }
                     }
                   },
                   "voxelize_bev");
}

// Image branch: two stride-2 conv stages then a residual block; output is a
// C_img x H/4 x W/4 feature map. The optional non-local denoising block sits
// after the residual block.
inline Value image_features(const Value& image, const ParamMap& params,
                            const DetectorConfig& cfg) {
  if (image->t.ndim() != 3 || image->t.shape[0] != 3 || image->t.shape[1] != cfg.image_h ||
      image->t.shape[2] != cfg.image_w)
    throw std::invalid_argument("image_features: expected 3x" + std::to_string(cfg.image_h) + "x" +
                                std::to_string(cfg.image_w) + " image, got " +
                                image->t.shape_str());
  Value x = relu(conv2d(image, params.at("img1.w"), params.at("img1.b"), 2, 1));
  x = relu(conv2d(x, params.at("img2.w"), params.at("img2.b"), 2, 1));
  Value r = relu(conv2d(x, params.at("res1.w"), params.at("res1.b"), 1, 1));
  r = conv2d(r, params.at("res2.w"), params.at("res2.b"), 1, 1);
  x = relu(add(x, r));
  if (cfg.use_nonlocal) x = nonlocal_block(x, nonlocal_from(params, "nl0"));
  return x;
}

// Point-wise projection fusion: each LiDAR point bilinearly samples the image
// feature map at its camera projection and scatter-adds the sampled vector
// into its BEV cell. Differentiable in both the feature map and the points.
inline Value project_fuse(const Value& img_feats, const Value& points, const CameraModel& cam,
                          const DetectorConfig& cfg, double z_near = 0.2) {
  if (img_feats->t.ndim() != 3)
    throw std::invalid_argument("project_fuse: expected CxHxW features");
  if (points->t.ndim() != 2 || points->t.shape[1] != 3)
    throw std::invalid_argument("project_fuse: expected Px3 points");
  const int64_t c = img_feats->t.shape[0], fh = img_feats->t.shape[1], fw = img_feats->t.shape[2];
  const int64_t nx = cfg.nx(), ny = cfg.ny();
  const double scale_u = static_cast<double>(cfg.image_w) / static_cast<double>(fw);
  const double scale_v = static_cast<double>(cfg.image_h) / static_cast<double>(fh);

  struct Samp {
    int64_t point;
    int64_t cell;    // flat BEV index ix * ny + iy
    int64_t x0, y0;  // feature-map corner
    double fx, fy;   // fractional position
    Vec3 q;          // camera-frame point
  };
  auto plan = [=](const Tensor& pts) {
    std::vector<Samp> out;
    for (int64_t i = 0; i < pts.shape[0]; ++i) {
      Vec3 p{pts.at2(i, 0), pts.at2(i, 1), pts.at2(i, 2)};
      Vec3 q = cam.to_cam(p);
      if (q.z <= z_near) continue;
      double u = cam.fx * q.x / q.z + cam.cx;
      double v = cam.fy * q.y / q.z + cam.cy;
      double uf = (u + 0.5) / scale_u - 0.5;
      double vf = (v + 0.5) / scale_v - 0.5;
      if (uf < 0 || uf > fw - 1 || vf < 0 || vf > fh - 1) continue;
      int64_t ix = static_cast<int64_t>(std::floor((p.x - cfg.x_min) / cfg.cell));
      int64_t iy = static_cast<int64_t>(std::floor((p.y - cfg.y_min) / cfg.cell));
      if (ix < 0 || ix >= nx || iy < 0 || iy >= ny) continue;
      Samp s;
      s.point = i;
      s.cell = ix * ny + iy;
      s.x0 = std::min(static_cast<int64_t>(std::floor(uf)), fw - 2);
      s.y0 = std::min(static_cast<int64_t>(std::floor(vf)), fh - 2);
      s.fx = uf - s.x0;
      s.fy = vf - s.y0;
      s.q = q;
      out.push_back(s);
    }
    return out;
  };

  Tensor out({c, nx, ny});
  for (const auto& s : plan(points->t)) {
    double w00 = (1 - s.fx) * (1 - s.fy), w10 = s.fx * (1 - s.fy);
    double w01 = (1 - s.fx) * s.fy, w11 = s.fx * s.fy;
    for (int64_t ch = 0; ch < c; ++ch) {
      double f = w00 * img_feats->t.at3(ch, s.y0, s.x0) + w10 * img_feats->t.at3(ch, s.y0, s.x0 + 1) +
                 w01 * img_feats->t.at3(ch, s.y0 + 1, s.x0) +
                 w11 * img_feats->t.at3(ch, s.y0 + 1, s.x0 + 1);
      out.data[(ch * nx * ny) + s.cell] += f;
    }
  }
  return make_node(
      std::move(out), {img_feats, points},
      [plan, c, nx, ny, scale_u, scale_v, cam](Node& n) {
        auto &pf = n.parents[0], &pp = n.parents[1];
        bool need_f = pf->requires_grad, need_p = pp->requires_grad;
        if (need_f) pf->ensure_grad();
        if (need_p) pp->ensure_grad();
        for (const auto& s : plan(pp->t)) {
          double w00 = (1 - s.fx) * (1 - s.fy), w10 = s.fx * (1 - s.fy);
          double w01 = (1 - s.fx) * s.fy, w11 = s.fx * s.fy;
          double guf = 0, gvf = 0;
          for (int64_t ch = 0; ch < c; ++ch) {
            double g = n.grad.data[(ch * nx * ny) + s.cell];
            if (g == 0) continue;
            double f00 = pf->t.at3(ch, s.y0, s.x0), f10 = pf->t.at3(ch, s.y0, s.x0 + 1);
            double f01 = pf->t.at3(ch, s.y0 + 1, s.x0), f11 = pf->t.at3(ch, s.y0 + 1, s.x0 + 1);
            if (need_f) {
              pf->grad.at3(ch, s.y0, s.x0) += g * w00;
              pf->grad.at3(ch, s.y0, s.x0 + 1) += g * w10;
              pf->grad.at3(ch, s.y0 + 1, s.x0) += g * w01;
              pf->grad.at3(ch, s.y0 + 1, s.x0 + 1) += g * w11;
            }
            guf += g * ((1 - s.fy) * (f10 - f00) + s.fy * (f11 - f01));
            gvf += g * ((1 - s.fx) * (f01 - f00) + s.fx * (f11 - f10));
          }
          if (!need_p || (guf == 0 && gvf == 0)) continue;
          double gu = guf / scale_u, gv = gvf / scale_v;
          const Vec3& q = s.q;
          Vec3 gq{gu * cam.fx / q.z, gv * cam.fy / q.z,
                  -gu * cam.fx * q.x / (q.z * q.z) - gv * cam.fy * q.y / (q.z * q.z)};
          Vec3 gw = cam.rot_t(gq);
          pp->grad.at2(s.point, 0) += gw.x;
          pp->grad.at2(s.point, 1) += gw.y;
          pp->grad.at2(s.point, 2) += gw.z;
        }
      },
      "project_fuse");
}

// Raw head outputs plus decoded anchor proposals. Proposal k corresponds to
// flat index k = (a * hx + i) * hy + j in the head tensors.
struct DetectorOutput {
  Value cls_logits;  // (A, hx, hy)
  Value reg;         // (A*6, hx, hy)
  std::vector<DetectionBox> proposals;
};

inline DetectionBox anchor_box(const DetectorConfig& cfg, int64_t a, int64_t i, int64_t j) {
  DetectionBox b;
  b.x = cfg.x_min + (i + 0.5) * cfg.head_cell();
  b.y = cfg.y_min + (j + 0.5) * cfg.head_cell();
  b.h = cfg.anchor_len;
  b.w = cfg.anchor_wid;
  b.alpha = cfg.anchor_headings[a];
  b.score = 1.0;
  return b;
}

inline DetectorOutput detect(const Value& image, const Value& points, const ParamMap& params,
                             const DetectorConfig& cfg, const CameraModel& cam) {
  Value occ = voxelize_bev(points, cfg);
  Value bev = relu(conv2d(occ, params.at("bev1.w"), params.at("bev1.b"), 1, 1));
  bev = relu(conv2d(bev, params.at("bev2.w"), params.at("bev2.b"), 1, 1));
  Value imgf = image_features(image, params, cfg);
  Value fused_img = project_fuse(imgf, points, cam, cfg);
  Value fused = concat0({bev, fused_img});
  fused = relu(conv2d(fused, params.at("fuse1.w"), params.at("fuse1.b"), cfg.head_stride, 1));
  fused = relu(conv2d(fused, params.at("fuse2.w"), params.at("fuse2.b"), 1, 1));

  DetectorOutput out;
  out.cls_logits = conv2d(fused, params.at("cls.w"), params.at("cls.b"), 1, 0);
  out.reg = conv2d(fused, params.at("reg.w"), params.at("reg.b"), 1, 0);

  const int64_t hx = cfg.hx(), hy = cfg.hy(), na = cfg.n_anchors();
  const double d = cfg.anchor_diag();
  out.proposals.reserve(na * hx * hy);
  for (int64_t a = 0; a < na; ++a)
    for (int64_t i = 0; i < hx; ++i)
      for (int64_t j = 0; j < hy; ++j) {
        DetectionBox anc = anchor_box(cfg, a, i, j);
        auto r = [&](int64_t ch) { return out.reg->t.at3(a * 6 + ch, i, j); };
        DetectionBox b;
        b.x = anc.x + r(0) * d;
        b.y = anc.y + r(1) * d;
        b.h = std::exp(std::clamp(r(2), -4.0, 4.0)) * cfg.anchor_len;
        b.w = std::exp(std::clamp(r(3), -4.0, 4.0)) * cfg.anchor_wid;
        double si = r(4), co = r(5);
        b.alpha = wrap_angle(anc.alpha + ((si == 0 && co == 0) ? 0.0 : std::atan2(si, co)));
        b.score = 1.0 / (1.0 + std::exp(-out.cls_logits->t.at3(a, i, j)));
        out.proposals.push_back(b);
      }
  return out;
}

// Score-thresholded, NMS-suppressed final detections.
inline std::vector<DetectionBox> final_detections(const DetectorOutput& out,
                                                  const DetectorConfig& cfg) {
  std::vector<DetectionBox> keep;
  for (const auto& p : out.proposals)
    if (p.score >= cfg.score_threshold) keep.push_back(p);
  return nms(std::move(keep), cfg.nms_iou);
}

namespace detdetail {

// Focal binary cross-entropy over per-anchor logits with fixed targets and
// per-anchor weights (zero weight = ignored anchor). Normalization is folded
// into the weights by the caller.
inline Value focal_bce(const Value& logits, std::vector<double> targets,
                       std::vector<double> weights, double gamma = 2.0, double alpha = 0.25) {
  if (targets.size() != logits->t.data.size() || weights.size() != logits->t.data.size())
    throw std::invalid_argument("focal_bce: target/weight size mismatch");
  auto eval = [gamma, alpha](double l, double t, double* dl) {
    double p = 1.0 / (1.0 + std::exp(-l));
    double pt = t > 0.5 ? p : 1.0 - p;
    pt = std::clamp(pt, 1e-7, 1.0 - 1e-7);
    double at = t > 0.5 ? alpha : 1.0 - alpha;
    double one = 1.0 - pt;
    double loss = -at * std::pow(one, gamma) * std::log(pt);
    // d loss / d pt, then chain through d pt / d logit = +/- p(1-p)
    double dpt = -at * (-gamma * std::pow(one, gamma - 1.0) * std::log(pt) +
                        std::pow(one, gamma) / pt);
    double sign = t > 0.5 ? 1.0 : -1.0;
    *dl = dpt * sign * p * (1.0 - p);
    return loss;
  };
  double total = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (weights[i] == 0) continue;
    double dl;
    total += weights[i] * eval(logits->t.data[i], targets[i], &dl);
  }
  return make_node(Tensor::scalar(total), {logits},
                   [targets = std::move(targets), weights = std::move(weights), eval](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     double g = n.grad.data[0];
                     for (size_t i = 0; i < targets.size(); ++i) {
                       if (weights[i] == 0) continue;
                       double dl;
                       eval(p->t.data[i], targets[i], &dl);
                       p->grad.data[i] += g * weights[i] * dl;
                     }
                   },
                   "focal_bce");
}

// Weighted smooth-L1 against fixed targets.
inline Value smooth_l1(const Value& pred, Tensor target, Tensor weight) {
  if (target.data.size() != pred->t.data.size() || weight.data.size() != pred->t.data.size())
    throw std::invalid_argument("smooth_l1: target/weight size mismatch");
  double total = 0;
  for (size_t i = 0; i < pred->t.data.size(); ++i) {
    if (weight.data[i] == 0) continue;
    double dd = pred->t.data[i] - target.data[i];
    total += weight.data[i] * (std::abs(dd) < 1.0 ? 0.5 * dd * dd : std::abs(dd) - 0.5);
  }
  return make_node(Tensor::scalar(total), {pred},
                   [target = std::move(target), weight = std::move(weight)](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     double g = n.grad.data[0];
                     for (size_t i = 0; i < target.data.size(); ++i) {
                       if (weight.data[i] == 0) continue;
                       double dd = p->t.data[i] - target.data[i];
                       double d1 = std::abs(dd) < 1.0 ? dd : (dd > 0 ? 1.0 : -1.0);
                       p->grad.data[i] += g * weight.data[i] * d1;
                     }
                   },
                   "smooth_l1");
}

}  // namespace detdetail

// Anchor assignment + focal classification + smooth-L1 regression loss.
// Anchors with IoU >= pos_iou are positive, <= neg_iou negative, in-between
// ignored; the best anchor per ground-truth box is always forced positive.
inline Value task_loss(const DetectorOutput& out, const std::vector<DetectionBox>& gt,
                       const DetectorConfig& cfg) {
  const int64_t hx = cfg.hx(), hy = cfg.hy(), na = cfg.n_anchors();
  const int64_t n = na * hx * hy;
  const double d = cfg.anchor_diag();

  std::vector<double> best_iou(n, 0.0);
  std::vector<int64_t> best_gt(n, -1);
  std::vector<int64_t> forced(gt.size(), -1);
  std::vector<double> forced_iou(gt.size(), -1.0);
  for (int64_t a = 0; a < na; ++a)
    for (int64_t i = 0; i < hx; ++i)
      for (int64_t j = 0; j < hy; ++j) {
        int64_t k = (a * hx + i) * hy + j;
        DetectionBox anc = anchor_box(cfg, a, i, j);
        for (size_t g = 0; g < gt.size(); ++g) {
          double iou = rotated_iou(anc, gt[g]);
          if (iou > best_iou[k]) {
            best_iou[k] = iou;
            best_gt[k] = static_cast<int64_t>(g);
          }
          if (iou > forced_iou[g]) {
            forced_iou[g] = iou;
            forced[g] = k;
          }
        }
      }

  std::vector<double> targets(n, 0.0), cls_w(n, 1.0);
  std::vector<char> positive(n, 0);
  for (int64_t k = 0; k < n; ++k) {
    if (best_iou[k] >= cfg.pos_iou) positive[k] = 1;
    else if (best_iou[k] > cfg.neg_iou) cls_w[k] = 0.0;  // ignore band
  }
  for (size_t g = 0; g < gt.size(); ++g)
    if (forced[g] >= 0 && forced_iou[g] > 0) {
      positive[forced[g]] = 1;
      best_gt[forced[g]] = static_cast<int64_t>(g);
    }
  int64_t npos = 0;
  for (int64_t k = 0; k < n; ++k)
    if (positive[k]) {
      targets[k] = 1.0;
      cls_w[k] = 1.0;
      ++npos;
    }
  double norm = 1.0 / static_cast<double>(std::max<int64_t>(npos, 1));
  for (auto& w : cls_w) w *= norm;

  Value cls = detdetail::focal_bce(out.cls_logits, std::move(targets), std::move(cls_w));
  if (npos == 0) return cls;

  Tensor rt(out.reg->t.shape), rw(out.reg->t.shape);
  for (int64_t a = 0; a < na; ++a)
    for (int64_t i = 0; i < hx; ++i)
      for (int64_t j = 0; j < hy; ++j) {
        int64_t k = (a * hx + i) * hy + j;
        if (!positive[k]) continue;
        const DetectionBox& g = gt[best_gt[k]];
        DetectionBox anc = anchor_box(cfg, a, i, j);
        double enc[6] = {(g.x - anc.x) / d,
                         (g.y - anc.y) / d,
                         std::log(g.h / cfg.anchor_len),
                         std::log(g.w / cfg.anchor_wid),
                         std::sin(g.alpha - anc.alpha),
                         std::cos(g.alpha - anc.alpha)};
        for (int ch = 0; ch < 6; ++ch) {
          rt.at3(a * 6 + ch, i, j) = enc[ch];
          rw.at3(a * 6 + ch, i, j) = norm;
        }
      }
  Value reg = detdetail::smooth_l1(out.reg, std::move(rt), std::move(rw));
  return add(cls, mul_scalar(reg, cfg.reg_weight));
}

// One training sample: rendered inputs plus ground truth.
struct TrainSample {
  Tensor image;   // 3 x H x W
  Tensor points;  // P x 3
  std::vector<DetectionBox> gt;
};

// One optimizer step on the averaged task loss over the batch. Returns the
// loss; a non-finite loss rejects the step and returns it unapplied.
inline double train_step(const std::vector<TrainSample>& batch, ParamMap& params,
                         AdamOptimizer& opt, const DetectorConfig& cfg, const CameraModel& cam) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<Value> losses;
  for (const auto& s : batch) {
    DetectorOutput out = detect(make_const(s.image), make_const(s.points), params, cfg, cam);
    losses.push_back(task_loss(out, s.gt, cfg));
  }
  Value total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  total = mul_scalar(total, 1.0 / static_cast<double>(losses.size()));
  double loss = total->t.data[0];
  if (!std::isfinite(loss)) return loss;  // step rejected
  zero_grads(total);
  backward(total);
  opt.step(params);
  return loss;
}

// --- checkpoint container: "ADVF" magic, version, named float64 tensors ----

inline void save_checkpoint(const std::string& path, const ParamMap& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write("ADVF", 4);
  uint32_t version = 1, count = static_cast<uint32_t>(params.size());
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, v] : params) {
    uint32_t nlen = static_cast<uint32_t>(name.size());
    f.write(reinterpret_cast<const char*>(&nlen), 4);
    f.write(name.data(), nlen);
    uint32_t ndim = static_cast<uint32_t>(v->t.shape.size());
    f.write(reinterpret_cast<const char*>(&ndim), 4);
    for (int64_t dim : v->t.shape) f.write(reinterpret_cast<const char*>(&dim), 8);
    f.write(reinterpret_cast<const char*>(v->t.data.data()),
            static_cast<std::streamsize>(v->t.data.size() * 8));
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ParamMap load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "ADVF", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  uint32_t version = 0, count = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&count), 4);
  if (version != 1) throw std::runtime_error("load_checkpoint: unsupported version");
  ParamMap params;
  for (uint32_t e = 0; e < count; ++e) {
    uint32_t nlen = 0;
    f.read(reinterpret_cast<char*>(&nlen), 4);
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    uint32_t ndim = 0;
    f.read(reinterpret_cast<char*>(&ndim), 4);
    std::vector<int64_t> shape(ndim);
    for (auto& dim : shape) f.read(reinterpret_cast<char*>(&dim), 8);
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
    if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
    params[name] = make_leaf(std::move(t));
  }
  return params;
}

}  // namespace advf

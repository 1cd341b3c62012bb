#pragma once

#include <limits>

#include "advfusion/geometry.hpp"
#include "advfusion/lidar.hpp"

namespace advf {

struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int64_t width = 0, height = 0;
  double rot[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};  // world-to-camera rotation, row-major
  Vec3 position;                                 // camera center, world frame

  Vec3 to_cam(const Vec3& p) const {
    Vec3 d = p - position;
    return {rot[0] * d.x + rot[1] * d.y + rot[2] * d.z,
            rot[3] * d.x + rot[4] * d.y + rot[5] * d.z,
            rot[6] * d.x + rot[7] * d.y + rot[8] * d.z};
  }
  Vec3 rot_t(const Vec3& q) const {  // transpose (camera-to-world direction)
    return {rot[0] * q.x + rot[3] * q.y + rot[6] * q.z,
            rot[1] * q.x + rot[4] * q.y + rot[7] * q.z,
            rot[2] * q.x + rot[5] * q.y + rot[8] * q.z};
  }

  // Forward-facing camera at `pos`: camera z = world +x, x = -y (right), y = -z (down).
  static CameraModel forward_facing(double fx_, double fy_, double cx_, double cy_, int64_t w,
                                    int64_t h, const Vec3& pos) {
    CameraModel cam;
    cam.fx = fx_; cam.fy = fy_; cam.cx = cx_; cam.cy = cy_;
    cam.width = w; cam.height = h;
    double r[9] = {0, -1, 0, 0, 0, -1, 1, 0, 0};
    std::copy(r, r + 9, cam.rot);
    cam.position = pos;
    return cam;
  }
};

struct CameraImage {
  Tensor pixels;       // 3 x H x W, values in [0,1]
  Tensor dense_depth;  // H x W (meters), optional (empty if absent)
};

struct DirectionalLight {
  Vec3 direction{0, 0, -1};  // unit, from light toward scene
  double diffuse = 0.7;
  double ambient = 0.3;
};

struct SoftRasterConfig {
  double sigma = 1e-4;  // silhouette sharpness, normalized screen units
  double gamma = 1e-4;  // depth aggregation temperature
  Vec3 background{0, 0, 0};  // used where no background image is supplied
  double z_near = 0.2;
  double z_far = 80.0;
  int max_faces_per_pixel = 16;
};

struct ProjectedPoints {
  Tensor uvz;               // K x 3: pixel u, v, camera-frame depth
  std::vector<bool> valid;  // depth > 0
};

inline ProjectedPoints project_points(const Tensor& points, const CameraModel& cam) {
  int64_t k = points.data.empty() ? 0 : points.shape[0];
  ProjectedPoints out;
  out.uvz = Tensor({std::max<int64_t>(k, 1), 3});
  out.valid.assign(k, false);
  for (int64_t i = 0; i < k; ++i) {
    Vec3 q = cam.to_cam({points.at2(i, 0), points.at2(i, 1), points.at2(i, 2)});
    out.uvz.at2(i, 2) = q.z;
    if (q.z > 0) {
      out.uvz.at2(i, 0) = cam.fx * q.x / q.z + cam.cx;
      out.uvz.at2(i, 1) = cam.fy * q.y / q.z + cam.cy;
      out.valid[i] = true;
    }
  }
  return out;
}

inline double shade_scale(const Vec3& normal, const DirectionalLight& light) {
  double lambert = std::max(0.0, -normal.dot(light.direction));
  return std::clamp(light.ambient + light.diffuse * lambert, 0.0, 1.0);
}

inline Vec3 shade_directional(const Vec3& base_color, const Vec3& normal,
                              const DirectionalLight& light) {
  return base_color * shade_scale(normal, light);
}

namespace rasterdetail {

// Per-face, per-pixel geometric evaluation with gradients to the projected
// 2D vertices. Distances are in pixel units.
struct PixEval {
  bool degenerate = false;
  bool inside = false;
  double d2 = 0;       // squared distance to nearest edge segment
  double w[3] = {0};   // barycentrics of the clamped sample point
  Vec2 dd2[3];         // d(d2)/d(vertex)
  Vec2 dw[3][3];       // dw[k]/d(vertex j)
};

inline void seg_dist_grads(const Vec2& p, const Vec2& q0, const Vec2& q1, double& d2, double& tpar,
                           Vec2& g0, Vec2& g1) {
  Vec2 e = q1 - q0, wv = p - q0;
  double ee = e.dot(e);
  double t = ee > 1e-18 ? wv.dot(e) / ee : 0.0;
  double tc = std::clamp(t, 0.0, 1.0);
  Vec2 diff = wv - e * tc;
  d2 = diff.dot(diff);
  tpar = tc;
  if (t <= 0.0) {
    g0 = diff * -2.0;
    g1 = {0, 0};
  } else if (t >= 1.0) {
    g0 = {0, 0};
    g1 = diff * -2.0;
  } else {
    g0 = diff * (-2.0 * (1.0 - tc));
    g1 = diff * (-2.0 * tc);
  }
}

inline PixEval eval_face_pixel(const Vec2& p, const Vec2& a, const Vec2& b, const Vec2& c) {
  PixEval ev;
  Vec2 v[3] = {a, b, c};
  double den = (b - a).cross(c - a);
  if (std::abs(den) < 1e-12) {
    ev.degenerate = true;
    return ev;
  }
  double na = (b - p).cross(c - p);
  double nb = (c - p).cross(a - p);
  double alpha = na / den, beta = nb / den;
  double gamma = 1.0 - alpha - beta;
  ev.inside = alpha >= 0 && beta >= 0 && gamma >= 0;

  // nearest edge: (a,b), (b,c), (c,a)
  double best_d2 = std::numeric_limits<double>::infinity();
  int best_e = 0;
  double best_t = 0;
  Vec2 best_g0, best_g1;
  for (int e = 0; e < 3; ++e) {
    double d2, t;
    Vec2 g0, g1;
    seg_dist_grads(p, v[e], v[(e + 1) % 3], d2, t, g0, g1);
    if (d2 < best_d2) {
      best_d2 = d2;
      best_e = e;
      best_t = t;
      best_g0 = g0;
      best_g1 = g1;
    }
  }
  ev.d2 = best_d2;
  ev.dd2[best_e] = ev.dd2[best_e] + best_g0;
  ev.dd2[(best_e + 1) % 3] = ev.dd2[(best_e + 1) % 3] + best_g1;

  if (ev.inside) {
    ev.w[0] = alpha;
    ev.w[1] = beta;
    ev.w[2] = gamma;
    // gradient of den and numerators
    Vec2 gden[3] = {{b.y - c.y, c.x - b.x}, {c.y - a.y, a.x - c.x}, {a.y - b.y, b.x - a.x}};
    Vec2 gna[3] = {{0, 0}, {c.y - p.y, p.x - c.x}, {p.y - b.y, b.x - p.x}};
    Vec2 gnb[3] = {{p.y - c.y, c.x - p.x}, {0, 0}, {a.y - p.y, p.x - a.x}};
    for (int j = 0; j < 3; ++j) {
      ev.dw[0][j] = (gna[j] - gden[j] * alpha) * (1.0 / den);
      ev.dw[1][j] = (gnb[j] - gden[j] * beta) * (1.0 / den);
      ev.dw[2][j] = (ev.dw[0][j] + ev.dw[1][j]) * -1.0;
    }
  } else {
    // sample point lives on the nearest edge; barycentrics from the edge param
    int i0 = best_e, i1 = (best_e + 1) % 3;
    ev.w[i0] = 1.0 - best_t;
    ev.w[i1] = best_t;
    if (best_t > 0.0 && best_t < 1.0) {
      Vec2 e = v[i1] - v[i0], wv = p - v[i0];
      double ee = e.dot(e);
      Vec2 dt0 = (e * -1.0 - wv + e * (2.0 * best_t)) * (1.0 / ee);
      Vec2 dt1 = (wv - e * (2.0 * best_t)) * (1.0 / ee);
      ev.dw[i0][i0] = dt0 * -1.0;
      ev.dw[i0][i1] = dt1 * -1.0;
      ev.dw[i1][i0] = dt0;
      ev.dw[i1][i1] = dt1;
    }
  }
  return ev;
}

// Bilinear sample of one face's CxC atlas at barycentric grid coords.
struct TexSample {
  double rgb[3];
  double ds[3], dt[3];  // d rgb / d (s, t) grid coords
  int64_t x0, y0;
  double fx, fy;
};

inline TexSample sample_atlas(const Tensor& tex, int64_t face, double s, double t) {
  int64_t cres = tex.shape[1];
  TexSample out{};
  double gx = s * static_cast<double>(cres - 1);
  double gy = t * static_cast<double>(cres - 1);
  int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(gx)), 0, cres - 2);
  int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(gy)), 0, cres - 2);
  double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
  out.x0 = x0; out.y0 = y0; out.fx = fx; out.fy = fy;
  for (int ch = 0; ch < 3; ++ch) {
    double v00 = tex.at4(face, y0, x0, ch), v01 = tex.at4(face, y0, x0 + 1, ch);
    double v10 = tex.at4(face, y0 + 1, x0, ch), v11 = tex.at4(face, y0 + 1, x0 + 1, ch);
    out.rgb[ch] = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 +
                  fx * fy * v11;
    out.ds[ch] = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * static_cast<double>(cres - 1);
    out.dt[ch] = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * static_cast<double>(cres - 1);
  }
  return out;
}

struct FaceShade {
  double fac = 0;
  Vec3 dv[3];  // d fac / d world vertex
};

inline FaceShade shade_face(const Vec3& v0, const Vec3& v1, const Vec3& v2,
                            const DirectionalLight& light) {
  FaceShade out;
  Vec3 e1 = v1 - v0, e2 = v2 - v0;
  Vec3 u = e1.cross(e2);
  double un = u.norm();
  if (un < 1e-12) return out;
  Vec3 n = u / un;
  double lambert = -n.dot(light.direction);
  double raw = light.ambient + light.diffuse * std::max(0.0, lambert);
  out.fac = std::clamp(raw, 0.0, 1.0);
  if (lambert > 0.0 && raw >= 0.0 && raw <= 1.0) {
    // m = d fac / d u = -diffuse * (I - n n^T) l / |u|
    Vec3 l = light.direction;
    Vec3 m = (l - n * n.dot(l)) * (-light.diffuse / un);
    Vec3 ge1 = e2.cross(m);
    Vec3 ge2 = m.cross(e1);
    out.dv[1] = ge1;
    out.dv[2] = ge2;
    out.dv[0] = (ge1 + ge2) * -1.0;
  }
  return out;
}

}  // namespace rasterdetail

struct RasterOutput {
  Value packed;  // 5 x H x W: rgb, alpha, depth
  Value rgb;     // 3 x H x W
  Value alpha;   // H x W
  Value depth;   // H x W
};

namespace rasterdetail {

struct VertProj {
  Vec2 uv;
  double z = 0;
  bool valid = false;
  Vec3 q;  // camera frame
};

struct FaceTerm {
  int64_t f = 0;
  double D = 0, zint = 0, zp = 0, logit = 0;
  PixEval ev;
};

// Shared state between the rasterizer forward pass and its backward closure.
struct RasterContext {
  std::vector<std::array<int32_t, 3>> faces;
  CameraModel cam;
  DirectionalLight light;
  SoftRasterConfig cfg;
  double sigma_px = 0, zspan = 0;
  bool has_bg = false;
  Tensor bg;
  // per-forward state
  std::vector<char> face_ok;
  std::vector<std::array<double, 4>> fbox;
  std::vector<FaceShade> shades;
  int64_t px0 = 0, py0 = 0, px1 = 0, py1 = 0;
  std::vector<std::vector<int32_t>> selected;  // per bbox pixel

  double bg_color(int64_t y, int64_t x, int ch) const {
    if (has_bg) return bg.at3(ch, y, x);
    return ch == 0 ? cfg.background.x : (ch == 1 ? cfg.background.y : cfg.background.z);
  }

  std::vector<VertProj> project_all(const Tensor& verts) const {
    std::vector<VertProj> vp(verts.shape[0]);
    for (int64_t i = 0; i < verts.shape[0]; ++i) {
      Vec3 q = cam.to_cam({verts.at2(i, 0), verts.at2(i, 1), verts.at2(i, 2)});
      vp[i].q = q;
      vp[i].z = q.z;
      if (q.z > cfg.z_near) {
        vp[i].uv = {cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy};
        vp[i].valid = true;
      }
    }
    return vp;
  }

  void gather_terms(int64_t y, int64_t x, const std::vector<VertProj>& vproj,
                    const std::vector<int32_t>* restrict_to, std::vector<FaceTerm>& terms) const {
    Vec2 p{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
    auto consider = [&](int64_t f) {
      if (!face_ok[f]) return;
      const auto& bb = fbox[f];
      if (p.x < bb[0] || p.x > bb[2] || p.y < bb[1] || p.y > bb[3]) return;
      const auto& fc = faces[f];
      PixEval ev = eval_face_pixel(p, vproj[fc[0]].uv, vproj[fc[1]].uv, vproj[fc[2]].uv);
      if (ev.degenerate) return;
      double sign = ev.inside ? 1.0 : -1.0;
      double arg = sign * ev.d2 / sigma_px;
      if (arg < -16.0) return;  // influence below 1e-7
      FaceTerm t;
      t.f = f;
      t.D = 1.0 / (1.0 + std::exp(-arg));
      t.zint = ev.w[0] * vproj[fc[0]].z + ev.w[1] * vproj[fc[1]].z + ev.w[2] * vproj[fc[2]].z;
      t.zp = std::clamp((cfg.z_far - t.zint) / zspan, 0.0, 1.0);
      t.logit = t.zp / cfg.gamma;
      t.ev = ev;
      terms.push_back(std::move(t));
    };
    if (restrict_to) {
      for (int32_t f : *restrict_to) consider(f);
    } else {
      for (int64_t f = 0; f < static_cast<int64_t>(faces.size()); ++f) consider(f);
    }
    if (!restrict_to && static_cast<int>(terms.size()) > cfg.max_faces_per_pixel) {
      std::partial_sort(terms.begin(), terms.begin() + cfg.max_faces_per_pixel, terms.end(),
                        [](const FaceTerm& a, const FaceTerm& b) {
                          return std::log(a.D) + a.logit > std::log(b.D) + b.logit;
                        });
      terms.resize(cfg.max_faces_per_pixel);
    }
  }
};

}  // namespace rasterdetail

// Soft rasterization of a world-frame textured mesh. Per-pixel face influence
// D = sigmoid(sign * d^2 / sigma) with d the normalized screen distance to the
// projected triangle; colors aggregated with softmax weights over depth plus a
// background term. Differentiable w.r.t. vertices and texels.
inline RasterOutput rasterize_soft(const Value& world_verts, const Value& textures,
                                   const std::vector<std::array<int32_t, 3>>& faces,
                                   const CameraModel& cam, const DirectionalLight& light,
                                   const SoftRasterConfig& cfg,
                                   const Tensor* background_image = nullptr) {
  using namespace rasterdetail;
  const int64_t h = cam.height, w = cam.width;
  const int64_t n_faces = static_cast<int64_t>(faces.size());

  auto ctx = std::make_shared<RasterContext>();
  ctx->faces = faces;
  ctx->cam = cam;
  ctx->light = light;
  ctx->cfg = cfg;
  ctx->sigma_px = cfg.sigma * static_cast<double>(w) * static_cast<double>(w);
  ctx->zspan = cfg.z_far - cfg.z_near;
  if (background_image) {
    ctx->has_bg = true;
    ctx->bg = *background_image;
  }

  auto vp = ctx->project_all(world_verts->t);

  // usable faces and their screen bboxes
  double margin = std::sqrt(std::max(ctx->sigma_px * std::log(1e7), 1.0)) + 2.0;
  ctx->face_ok.assign(n_faces, 0);
  ctx->fbox.resize(n_faces);
  double gx0 = 1e30, gy0 = 1e30, gx1 = -1e30, gy1 = -1e30;
  for (int64_t f = 0; f < n_faces; ++f) {
    const auto& fc = faces[f];
    if (!vp[fc[0]].valid || !vp[fc[1]].valid || !vp[fc[2]].valid) continue;
    ctx->face_ok[f] = 1;
    double x0 = 1e30, y0 = 1e30, x1 = -1e30, y1 = -1e30;
    for (int k = 0; k < 3; ++k) {
      x0 = std::min(x0, vp[fc[k]].uv.x); x1 = std::max(x1, vp[fc[k]].uv.x);
      y0 = std::min(y0, vp[fc[k]].uv.y); y1 = std::max(y1, vp[fc[k]].uv.y);
    }
    ctx->fbox[f] = {x0 - margin, y0 - margin, x1 + margin, y1 + margin};
    gx0 = std::min(gx0, ctx->fbox[f][0]); gy0 = std::min(gy0, ctx->fbox[f][1]);
    gx1 = std::max(gx1, ctx->fbox[f][2]); gy1 = std::max(gy1, ctx->fbox[f][3]);
  }
  ctx->px0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(gx0)), 0, w);
  ctx->py0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(gy0)), 0, h);
  ctx->px1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(gx1)) + 1, 0, w);
  ctx->py1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(gy1)) + 1, 0, h);

  Tensor out({5, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) out.at3(ch, y, x) = ctx->bg_color(y, x, ch);
      out.at3(4, y, x) = cfg.z_far;
    }

  ctx->shades.resize(n_faces);
  for (int64_t f = 0; f < n_faces; ++f)
    if (ctx->face_ok[f]) {
      const auto& fc = faces[f];
      auto vat = [&](int32_t i) {
        return Vec3{world_verts->t.at2(i, 0), world_verts->t.at2(i, 1), world_verts->t.at2(i, 2)};
      };
      ctx->shades[f] = shade_face(vat(fc[0]), vat(fc[1]), vat(fc[2]), light);
    }

  const int64_t bw = ctx->px1 - ctx->px0;
  ctx->selected.assign(static_cast<size_t>(std::max<int64_t>((ctx->py1 - ctx->py0) * bw, 0)), {});

  // forward aggregation
  for (int64_t y = ctx->py0; y < ctx->py1; ++y)
    for (int64_t x = ctx->px0; x < ctx->px1; ++x) {
      std::vector<FaceTerm> terms;
      ctx->gather_terms(y, x, vp, nullptr, terms);
      if (terms.empty()) continue;
      auto& sel = ctx->selected[(y - ctx->py0) * bw + (x - ctx->px0)];
      for (auto& t : terms) sel.push_back(static_cast<int32_t>(t.f));

      double m = 0.0;  // background logit is 0
      for (auto& t : terms) m = std::max(m, t.logit);
      double s_bg = std::exp(-m);
      double ssum = s_bg;
      std::vector<double> e(terms.size());
      for (size_t i = 0; i < terms.size(); ++i) {
        e[i] = terms[i].D * std::exp(terms[i].logit - m);
        ssum += e[i];
      }
      double rgb[3] = {0, 0, 0}, depth = 0;
      for (size_t i = 0; i < terms.size(); ++i) {
        const auto& t = terms[i];
        double wf = e[i] / ssum;
        auto ts = sample_atlas(textures->t, t.f, t.ev.w[1], t.ev.w[2]);
        double fac = ctx->shades[t.f].fac;
        for (int ch = 0; ch < 3; ++ch) rgb[ch] += wf * fac * ts.rgb[ch];
        depth += wf * t.zint;
      }
      double wbg = s_bg / ssum;
      for (int ch = 0; ch < 3; ++ch) out.at3(ch, y, x) = rgb[ch] + wbg * ctx->bg_color(y, x, ch);
      out.at3(3, y, x) = 1.0 - wbg;
      out.at3(4, y, x) = depth + wbg * cfg.z_far;
    }

  Value packed = make_node(
      std::move(out), {world_verts, textures},
      [ctx](Node& n) {
        using namespace rasterdetail;
        auto &pverts = n.parents[0], &ptex = n.parents[1];
        const auto& cfg = ctx->cfg;
        const auto& cam = ctx->cam;
        bool need_v = pverts->requires_grad, need_t = ptex->requires_grad;
        if (need_v) pverts->ensure_grad();
        if (need_t) ptex->ensure_grad();
        auto vproj = ctx->project_all(pverts->t);
        std::vector<Vec3> vgrad_uvz(vproj.size());
        const int64_t bw = ctx->px1 - ctx->px0;

        for (int64_t y = ctx->py0; y < ctx->py1; ++y)
          for (int64_t x = ctx->px0; x < ctx->px1; ++x) {
            const auto& sel = ctx->selected[(y - ctx->py0) * bw + (x - ctx->px0)];
            if (sel.empty()) continue;
            double gl[3] = {n.grad.at3(0, y, x), n.grad.at3(1, y, x), n.grad.at3(2, y, x)};
            double ga = n.grad.at3(3, y, x);
            double gd = n.grad.at3(4, y, x);
            if (gl[0] == 0 && gl[1] == 0 && gl[2] == 0 && ga == 0 && gd == 0) continue;

            std::vector<FaceTerm> terms;
            ctx->gather_terms(y, x, vproj, &sel, terms);
            if (terms.empty()) continue;
            double m = 0.0;
            for (auto& t : terms) m = std::max(m, t.logit);
            double s_bg = std::exp(-m);
            double ssum = s_bg;
            std::vector<double> e(terms.size());
            for (size_t i = 0; i < terms.size(); ++i) {
              e[i] = terms[i].D * std::exp(terms[i].logit - m);
              ssum += e[i];
            }
            double wbg = s_bg / ssum;

            std::vector<TexSample> samples(terms.size());
            std::vector<double> G(terms.size());  // dL/dw_f
            double g_bg = gd * cfg.z_far - ga;
            for (int ch = 0; ch < 3; ++ch) g_bg += gl[ch] * ctx->bg_color(y, x, ch);
            double wbar = g_bg * wbg;
            for (size_t i = 0; i < terms.size(); ++i) {
              const auto& t = terms[i];
              samples[i] = sample_atlas(ptex->t, t.f, t.ev.w[1], t.ev.w[2]);
              double fac = ctx->shades[t.f].fac;
              double gi = gd * t.zint;
              for (int ch = 0; ch < 3; ++ch) gi += gl[ch] * fac * samples[i].rgb[ch];
              G[i] = gi;
              wbar += gi * (e[i] / ssum);
            }

            for (size_t i = 0; i < terms.size(); ++i) {
              const auto& t = terms[i];
              const auto& fc = ctx->faces[t.f];
              double wf = e[i] / ssum;
              double gE = (G[i] - wbar) / ssum;  // dL/de_i
              double gD = gE * std::exp(t.logit - m);
              double gLogit = gE * e[i];
              double gZint = gd * wf;
              if (t.zp > 0.0 && t.zp < 1.0) gZint += gLogit * (-1.0 / (cfg.gamma * ctx->zspan));

              double gFac = 0, gS = 0, gT = 0;
              double fac = ctx->shades[t.f].fac;
              for (int ch = 0; ch < 3; ++ch) {
                double gc = gl[ch] * wf;
                gFac += gc * samples[i].rgb[ch];
                gS += gc * fac * samples[i].ds[ch];
                gT += gc * fac * samples[i].dt[ch];
                if (need_t) {
                  const auto& sm = samples[i];
                  double gtex = gc * fac;
                  ptex->grad.at4(t.f, sm.y0, sm.x0, ch) += gtex * (1 - sm.fx) * (1 - sm.fy);
                  ptex->grad.at4(t.f, sm.y0, sm.x0 + 1, ch) += gtex * sm.fx * (1 - sm.fy);
                  ptex->grad.at4(t.f, sm.y0 + 1, sm.x0, ch) += gtex * (1 - sm.fx) * sm.fy;
                  ptex->grad.at4(t.f, sm.y0 + 1, sm.x0 + 1, ch) += gtex * sm.fx * sm.fy;
                }
              }
              if (!need_v) continue;

              // shading gradient goes straight to world vertices
              if (gFac != 0.0)
                for (int k = 0; k < 3; ++k) {
                  Vec3 g = ctx->shades[t.f].dv[k] * gFac;
                  pverts->grad.at2(fc[k], 0) += g.x;
                  pverts->grad.at2(fc[k], 1) += g.y;
                  pverts->grad.at2(fc[k], 2) += g.z;
                }

              double sign = t.ev.inside ? 1.0 : -1.0;
              double gd2 = gD * t.D * (1.0 - t.D) * sign / ctx->sigma_px;
              double gw[3] = {gZint * vproj[fc[0]].z, gZint * vproj[fc[1]].z,
                              gZint * vproj[fc[2]].z};
              gw[1] += gS;
              gw[2] += gT;
              for (int j = 0; j < 3; ++j) {
                Vec2 guv = t.ev.dd2[j] * gd2;
                for (int k = 0; k < 3; ++k) guv = guv + t.ev.dw[k][j] * gw[k];
                vgrad_uvz[fc[j]].x += guv.x;
                vgrad_uvz[fc[j]].y += guv.y;
                vgrad_uvz[fc[j]].z += gZint * t.ev.w[j];
              }
            }
          }

        if (need_v) {
          for (size_t i = 0; i < vproj.size(); ++i) {
            if (!vproj[i].valid) continue;
            const Vec3& g = vgrad_uvz[i];
            if (g.x == 0 && g.y == 0 && g.z == 0) continue;
            const Vec3& q = vproj[i].q;
            Vec3 gq{g.x * cam.fx / q.z, g.y * cam.fy / q.z,
                    -g.x * cam.fx * q.x / (q.z * q.z) - g.y * cam.fy * q.y / (q.z * q.z) + g.z};
            Vec3 gw = cam.rot_t(gq);
            pverts->grad.at2(i, 0) += gw.x;
            pverts->grad.at2(i, 1) += gw.y;
            pverts->grad.at2(i, 2) += gw.z;
          }
        }
      },
      "rasterize_soft");

  RasterOutput ro;
  ro.packed = packed;
  ro.rgb = slice0(packed, 0, 3);
  ro.alpha = reshape(slice0(packed, 3, 1), {h, w});
  ro.depth = reshape(slice0(packed, 4, 1), {h, w});
  return ro;
}

// ---- sparse-to-dense depth ----

namespace edtdetail {
// 1D squared-distance transform with argmin propagation (lower envelope of
// parabolas). f holds input costs, src the carried source index.
inline void dt1d(std::vector<double>& f, std::vector<int64_t>& src) {
  const int64_t n = static_cast<int64_t>(f.size());
  std::vector<int64_t> v(n);
  std::vector<double> z(n + 1);
  std::vector<double> out(n);
  std::vector<int64_t> out_src(n);
  int64_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int64_t q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    double d = static_cast<double>(q - v[k]);
    out[q] = d * d + f[v[k]];
    out_src[q] = src[v[k]];
  }
  f = std::move(out);
  src = std::move(out_src);
}
}  // namespace edtdetail

// Dense depth from a sparse sweep: pixels with a direct projection keep the
// nearest projected depth exactly; all others copy the Euclidean-nearest
// projected pixel. Empty sweep yields the far plane everywhere.
inline Tensor densify_depth(const LidarSweep& sweep, const CameraModel& cam,
                            double far_plane = 80.0) {
  const int64_t h = cam.height, w = cam.width;
  Tensor depth({h, w}, far_plane);
  if (sweep.size() == 0) return depth;
  auto proj = project_points(sweep.points, cam);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> cost(static_cast<size_t>(h * w), inf);
  std::vector<double> anchor(static_cast<size_t>(h * w), far_plane);
  bool any = false;
  for (int64_t i = 0; i < sweep.size(); ++i) {
    if (!proj.valid[i]) continue;
    int64_t x = static_cast<int64_t>(std::floor(proj.uvz.at2(i, 0)));
    int64_t y = static_cast<int64_t>(std::floor(proj.uvz.at2(i, 1)));
    if (x < 0 || x >= w || y < 0 || y >= h) continue;
    double z = proj.uvz.at2(i, 2);
    size_t idx = static_cast<size_t>(y * w + x);
    if (cost[idx] == inf || z < anchor[idx]) anchor[idx] = z;
    cost[idx] = 0.0;
    any = true;
  }
  if (!any) return depth;

  std::vector<int64_t> src(static_cast<size_t>(h * w));
  for (int64_t i = 0; i < h * w; ++i) src[i] = i;
  // columns then rows
  std::vector<double> col(h);
  std::vector<int64_t> csrc(h);
  for (int64_t x = 0; x < w; ++x) {
    for (int64_t y = 0; y < h; ++y) {
      col[y] = cost[y * w + x];
      csrc[y] = src[y * w + x];
    }
    edtdetail::dt1d(col, csrc);
    for (int64_t y = 0; y < h; ++y) {
      cost[y * w + x] = col[y];
      src[y * w + x] = csrc[y];
    }
  }
  std::vector<double> row(w);
  std::vector<int64_t> rsrc(w);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      row[x] = cost[y * w + x];
      rsrc[x] = src[y * w + x];
    }
    edtdetail::dt1d(row, rsrc);
    for (int64_t x = 0; x < w; ++x) depth.data[y * w + x] = anchor[src[y * w + x] = rsrc[x]];
  }
  return depth;
}

// Occlusion-aware overlay of the rendered mesh onto the original image.
// Pixels with alpha above threshold and rendered depth nearer than the scene
// blend alpha*rendered + (1-alpha)*original; everything else stays original.
// depth_tolerance absorbs densified-depth anchoring error where the mesh sits
// directly on scene geometry (e.g. a rooftop contact line).
inline Value composite_image(const Tensor& original, const RasterOutput& render,
                             const Tensor& scene_depth, double alpha_threshold = 0.5,
                             double depth_tolerance = 0.0) {
  const Value& packed = render.packed;
  int64_t hch = packed->t.shape[1], wch = packed->t.shape[2];
  if (original.shape != std::vector<int64_t>{3, hch, wch} ||
      scene_depth.shape != std::vector<int64_t>{hch, wch})
    throw std::invalid_argument("composite_image: shape mismatch");
  Tensor out = original;
  std::vector<char> keep(static_cast<size_t>(hch * wch), 0);
  for (int64_t y = 0; y < hch; ++y)
    for (int64_t x = 0; x < wch; ++x) {
      double a = packed->t.at3(3, y, x);
      double d = packed->t.at3(4, y, x);
      if (a > alpha_threshold && d < scene_depth.at2(y, x) + depth_tolerance) {
        keep[y * wch + x] = 1;
        for (int ch = 0; ch < 3; ++ch)
          out.at3(ch, y, x) =
              a * packed->t.at3(ch, y, x) + (1.0 - a) * original.at3(ch, y, x);
      }
    }
  Tensor orig_copy = original;
  return make_node(std::move(out), {packed},
                   [keep, orig_copy, hch, wch](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (int64_t y = 0; y < hch; ++y)
                       for (int64_t x = 0; x < wch; ++x) {
                         if (!keep[y * wch + x]) continue;
                         double a = p->t.at3(3, y, x);
                         for (int ch = 0; ch < 3; ++ch) {
                           double g = n.grad.at3(ch, y, x);
                           p->grad.at3(ch, y, x) += g * a;
                           p->grad.at3(3, y, x) +=
                               g * (p->t.at3(ch, y, x) - orig_copy.at3(ch, y, x));
                         }
                       }
                   },
                   "composite_image");
}

}  // namespace advf

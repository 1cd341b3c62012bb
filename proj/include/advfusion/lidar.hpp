#pragma once

#include <limits>
#include <optional>
#include <unordered_map>

#include <json.hpp>

#include "advfusion/geometry.hpp"

namespace advf {

struct LidarSpec {
  std::vector<double> beam_elevations;  // radians
  double azimuth_step = 0.0;            // radians
  double azimuth_start = 0.0;
  double azimuth_end = 0.0;  // range is [start, end)
  Vec3 origin;

  int64_t azimuth_count() const {
    double range = azimuth_end - azimuth_start;
    double n = range / azimuth_step;
    if (std::abs(n - std::round(n)) > 1e-9 * std::max(1.0, std::abs(n)))
      throw std::invalid_argument("LidarSpec: azimuth_step does not divide azimuth_range");
    return static_cast<int64_t>(std::round(n));
  }
  int64_t ray_count() const {
    return static_cast<int64_t>(beam_elevations.size()) * azimuth_count();
  }
};

struct LidarSweep {
  Tensor points;                 // P x 3, world frame
  std::vector<int64_t> ray_ids;  // one generating ray per point
  int64_t ray_count = 0;         // size of the shared ray id space

  int64_t size() const { return points.data.empty() ? 0 : points.shape[0]; }
  Vec3 point(int64_t i) const { return {points.at2(i, 0), points.at2(i, 1), points.at2(i, 2)}; }
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
};

inline std::vector<Ray> generate_rays(const LidarSpec& spec) {
  int64_t n_az = spec.azimuth_count();
  std::vector<Ray> rays;
  rays.reserve(spec.beam_elevations.size() * n_az);
  for (double el : spec.beam_elevations) {
    double ce = std::cos(el), se = std::sin(el);
    for (int64_t a = 0; a < n_az; ++a) {
      double az = spec.azimuth_start + spec.azimuth_step * static_cast<double>(a);
      rays.push_back({spec.origin, {ce * std::cos(az), ce * std::sin(az), se}});
    }
  }
  return rays;
}

struct RayHit {
  double t = 0.0;
  int64_t face = -1;
  double u = 0.0, v = 0.0;  // barycentrics of v1, v2; v0 weight is 1-u-v
};

namespace detail {
// Moller-Trumbore. Near-parallel rays (|det| < 1e-12) are treated as misses.
inline std::optional<RayHit> moller_trumbore(const Ray& ray, const Vec3& v0, const Vec3& v1,
                                             const Vec3& v2) {
  Vec3 e1 = v1 - v0, e2 = v2 - v0;
  Vec3 p = ray.dir.cross(e2);
  double det = e1.dot(p);
  if (std::abs(det) < 1e-12) return std::nullopt;
  double inv = 1.0 / det;
  Vec3 tvec = ray.origin - v0;
  double u = tvec.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  Vec3 q = tvec.cross(e1);
  double v = ray.dir.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  double t = e2.dot(q) * inv;
  if (t <= 1e-9) return std::nullopt;
  return RayHit{t, -1, u, v};
}

inline bool ray_aabb(const Ray& r, const Vec3& lo, const Vec3& hi) {
  double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
  const double o[3] = {r.origin.x, r.origin.y, r.origin.z};
  const double d[3] = {r.dir.x, r.dir.y, r.dir.z};
  const double l[3] = {lo.x, lo.y, lo.z}, h[3] = {hi.x, hi.y, hi.z};
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (o[i] < l[i] || o[i] > h[i]) return false;
      continue;
    }
    double t0 = (l[i] - o[i]) / d[i], t1 = (h[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return false;
  }
  return true;
}
}  // namespace detail

// Nearest intersection of one ray with all mesh faces.
inline std::optional<RayHit> intersect_ray_mesh(const Ray& ray, const Tensor& verts,
                                                const std::vector<std::array<int32_t, 3>>& faces) {
  std::optional<RayHit> best;
  for (size_t f = 0; f < faces.size(); ++f) {
    Vec3 v0{verts.at2(faces[f][0], 0), verts.at2(faces[f][0], 1), verts.at2(faces[f][0], 2)};
    Vec3 v1{verts.at2(faces[f][1], 0), verts.at2(faces[f][1], 1), verts.at2(faces[f][1], 2)};
    Vec3 v2{verts.at2(faces[f][2], 0), verts.at2(faces[f][2], 1), verts.at2(faces[f][2], 2)};
    auto hit = detail::moller_trumbore(ray, v0, v1, v2);
    if (hit && (!best || hit->t < best->t)) {
      best = hit;
      best->face = static_cast<int64_t>(f);
    }
  }
  return best;
}

inline std::optional<RayHit> intersect_ray_mesh(const Ray& ray, const TexturedMesh& mesh) {
  return intersect_ray_mesh(ray, mesh.vertices, mesh.faces);
}

// Differentiable sweep: hit point positions carry gradient back to vertices
// through the hit distance t.
struct SweepValue {
  Value points;  // P x 3
  std::vector<int64_t> ray_ids;
  int64_t ray_count = 0;
};

inline SweepValue simulate_lidar(const Value& world_verts,
                                 const std::vector<std::array<int32_t, 3>>& faces,
                                 const LidarSpec& spec) {
  auto rays = generate_rays(spec);
  // bbox cull
  Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
  for (int64_t i = 0; i < world_verts->t.shape[0]; ++i) {
    lo.x = std::min(lo.x, world_verts->t.at2(i, 0));
    lo.y = std::min(lo.y, world_verts->t.at2(i, 1));
    lo.z = std::min(lo.z, world_verts->t.at2(i, 2));
    hi.x = std::max(hi.x, world_verts->t.at2(i, 0));
    hi.y = std::max(hi.y, world_verts->t.at2(i, 1));
    hi.z = std::max(hi.z, world_verts->t.at2(i, 2));
  }
  struct HitRec {
    int64_t ray;
    RayHit hit;
    Vec3 dir;
  };
  std::vector<HitRec> hits;
  for (size_t r = 0; r < rays.size(); ++r) {
    if (!detail::ray_aabb(rays[r], lo, hi)) continue;
    auto h = intersect_ray_mesh(rays[r], world_verts->t, faces);
    if (h) hits.push_back({static_cast<int64_t>(r), *h, rays[r].dir});
  }
  SweepValue sweep;
  sweep.ray_count = static_cast<int64_t>(rays.size());
  sweep.ray_ids.reserve(hits.size());
  if (hits.empty()) {
    sweep.points = make_const(Tensor());
    return sweep;
  }
  Tensor pts({static_cast<int64_t>(hits.size()), 3});
  for (size_t i = 0; i < hits.size(); ++i) {
    const auto& h = hits[i];
    Vec3 p = rays[h.ray].origin + h.dir * h.hit.t;
    pts.at2(i, 0) = p.x;
    pts.at2(i, 1) = p.y;
    pts.at2(i, 2) = p.z;
    sweep.ray_ids.push_back(h.ray);
  }
  sweep.points = make_node(
      std::move(pts), {world_verts},
      [hits, faces](Node& n) {
        auto& pv = n.parents[0];
        pv->ensure_grad();
        for (size_t i = 0; i < hits.size(); ++i) {
          const auto& h = hits[i];
          const auto& f = faces[h.hit.face];
          Vec3 v0{pv->t.at2(f[0], 0), pv->t.at2(f[0], 1), pv->t.at2(f[0], 2)};
          Vec3 v1{pv->t.at2(f[1], 0), pv->t.at2(f[1], 1), pv->t.at2(f[1], 2)};
          Vec3 v2{pv->t.at2(f[2], 0), pv->t.at2(f[2], 1), pv->t.at2(f[2], 2)};
          Vec3 nrm = (v1 - v0).cross(v2 - v0);
          double dn = h.dir.dot(nrm);
          if (std::abs(dn) < 1e-12) continue;
          // point = o + t*d; dt/dv_k = w_k * n / (d.n)
          Vec3 g{n.grad.at2(i, 0), n.grad.at2(i, 1), n.grad.at2(i, 2)};
          double gd = g.dot(h.dir);
          double w[3] = {1.0 - h.hit.u - h.hit.v, h.hit.u, h.hit.v};
          for (int k = 0; k < 3; ++k) {
            double s = gd * w[k] / dn;
            pv->grad.at2(f[k], 0) += s * nrm.x;
            pv->grad.at2(f[k], 1) += s * nrm.y;
            pv->grad.at2(f[k], 2) += s * nrm.z;
          }
        }
      },
      "simulate_lidar");
  return sweep;
}

inline LidarSweep simulate_lidar(const TexturedMesh& world_mesh, const LidarSpec& spec) {
  auto sv = simulate_lidar(make_const(world_mesh.vertices), world_mesh.faces, spec);
  LidarSweep out;
  out.points = sv.points->t;
  out.ray_ids = sv.ray_ids;
  out.ray_count = sv.ray_count;
  return out;
}

// Occlusion merge: per shared ray keep the nearer return.
inline SweepValue merge_sweeps(const LidarSweep& original, const SweepValue& rendered,
                               const Vec3& sensor_origin) {
  if (original.ray_count != rendered.ray_count)
    throw std::invalid_argument("merge_sweeps: mismatched ray_id spaces (" +
                                std::to_string(original.ray_count) + " vs " +
                                std::to_string(rendered.ray_count) + ")");
  int64_t n_orig = original.size();
  int64_t n_rend = rendered.ray_ids.empty() ? 0 : rendered.points->t.shape[0];
  std::unordered_map<int64_t, int64_t> rend_by_ray;
  for (int64_t i = 0; i < n_rend; ++i) rend_by_ray[rendered.ray_ids[i]] = i;

  auto depth_of = [&](const Tensor& pts, int64_t i) {
    Vec3 p{pts.at2(i, 0), pts.at2(i, 1), pts.at2(i, 2)};
    return (p - sensor_origin).norm();
  };

  // out entry: (from_rendered, source index)
  std::vector<std::pair<bool, int64_t>> sel;
  std::vector<int64_t> ray_ids;
  std::vector<bool> rend_used(n_rend, false);
  for (int64_t i = 0; i < n_orig; ++i) {
    int64_t ray = original.ray_ids[i];
    auto it = rend_by_ray.find(ray);
    if (it != rend_by_ray.end() &&
        depth_of(rendered.points->t, it->second) < depth_of(original.points, i)) {
      sel.push_back({true, it->second});
      rend_used[it->second] = true;
    } else {
      sel.push_back({false, i});
      if (it != rend_by_ray.end()) rend_used[it->second] = true;  // farther return dropped
    }
    ray_ids.push_back(ray);
  }
  for (int64_t i = 0; i < n_rend; ++i)
    if (!rend_used[i]) {
      sel.push_back({true, i});
      ray_ids.push_back(rendered.ray_ids[i]);
    }

  SweepValue out;
  out.ray_ids = std::move(ray_ids);
  out.ray_count = original.ray_count;
  if (sel.empty()) {
    out.points = make_const(Tensor());
    return out;
  }
  Tensor pts({static_cast<int64_t>(sel.size()), 3});
  for (size_t i = 0; i < sel.size(); ++i) {
    const Tensor& src = sel[i].first ? rendered.points->t : original.points;
    for (int c = 0; c < 3; ++c) pts.at2(i, c) = src.at2(sel[i].second, c);
  }
  out.points = make_node(std::move(pts), {rendered.points},
                         [sel](Node& n) {
                           auto& p = n.parents[0];
                           p->ensure_grad();
                           for (size_t i = 0; i < sel.size(); ++i)
                             if (sel[i].first)
                               for (int c = 0; c < 3; ++c)
                                 p->grad.at2(sel[i].second, c) += n.grad.at2(i, c);
                         },
                         "merge_sweeps");
  return out;
}

inline LidarSweep merge_sweeps(const LidarSweep& original, const LidarSweep& rendered,
                               const Vec3& sensor_origin) {
  SweepValue rv;
  rv.points = make_const(rendered.points);
  rv.ray_ids = rendered.ray_ids;
  rv.ray_count = rendered.ray_count;
  auto m = merge_sweeps(original, rv, sensor_origin);
  LidarSweep out;
  out.points = m.points->t;
  out.ray_ids = m.ray_ids;
  out.ray_count = m.ray_count;
  return out;
}

// Nearest (elevation, azimuth) bucket assignment for sweeps without ray ids.
inline std::vector<int64_t> assign_ray_ids(const Tensor& points, const LidarSpec& spec) {
  int64_t n_az = spec.azimuth_count();
  std::vector<int64_t> ids(points.data.empty() ? 0 : points.shape[0]);
  for (size_t i = 0; i < ids.size(); ++i) {
    Vec3 p{points.at2(i, 0), points.at2(i, 1), points.at2(i, 2)};
    Vec3 d = p - spec.origin;
    double az = std::atan2(d.y, d.x);
    double el = std::atan2(d.z, std::sqrt(d.x * d.x + d.y * d.y));
    size_t beam = 0;
    for (size_t b = 1; b < spec.beam_elevations.size(); ++b)
      if (std::abs(spec.beam_elevations[b] - el) <
          std::abs(spec.beam_elevations[beam] - el))
        beam = b;
    int64_t a = static_cast<int64_t>(std::llround((az - spec.azimuth_start) / spec.azimuth_step));
    a = std::clamp<int64_t>(a, 0, n_az - 1);
    ids[i] = static_cast<int64_t>(beam) * n_az + a;
  }
  return ids;
}

// ---- PLY (binary little-endian, float64 xyz) + JSON sidecar ----

inline void save_sweep(const LidarSweep& sweep, const LidarSpec& spec, const std::string& ply_path,
                       const std::string& json_path) {
  std::ofstream os(ply_path, std::ios::binary);
  if (!os) throw std::runtime_error("save_sweep: cannot open " + ply_path);
  int64_t n = sweep.size();
  os << "ply\nformat binary_little_endian 1.0\nelement vertex " << n
     << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  if (n > 0)
    os.write(reinterpret_cast<const char*>(sweep.points.data.data()),
             static_cast<std::streamsize>(n * 3 * sizeof(double)));
  nlohmann::json j;
  j["ray_ids"] = sweep.ray_ids;
  j["ray_count"] = sweep.ray_count;
  j["spec"] = {{"beam_elevations", spec.beam_elevations},
               {"azimuth_step", spec.azimuth_step},
               {"azimuth_start", spec.azimuth_start},
               {"azimuth_end", spec.azimuth_end},
               {"origin", {spec.origin.x, spec.origin.y, spec.origin.z}}};
  std::ofstream js(json_path);
  if (!js) throw std::runtime_error("save_sweep: cannot open " + json_path);
  js << j.dump();
}

inline std::pair<LidarSweep, LidarSpec> load_sweep(const std::string& ply_path,
                                                   const std::string& json_path) {
  std::ifstream is(ply_path, std::ios::binary);
  if (!is) throw std::runtime_error("load_sweep: cannot open " + ply_path);
  std::string line;
  int64_t n = -1;
  while (std::getline(is, line)) {
    if (line.rfind("element vertex", 0) == 0) n = std::stoll(line.substr(15));
    if (line == "end_header") break;
  }
  if (n < 0) throw std::runtime_error("load_sweep: bad PLY header in " + ply_path);
  LidarSweep sweep;
  if (n > 0) {
    sweep.points = Tensor({n, 3});
    is.read(reinterpret_cast<char*>(sweep.points.data.data()),
            static_cast<std::streamsize>(n * 3 * sizeof(double)));
    if (!is) throw std::runtime_error("load_sweep: truncated PLY " + ply_path);
  }
  std::ifstream js(json_path);
  if (!js) throw std::runtime_error("load_sweep: cannot open " + json_path);
  nlohmann::json j;
  js >> j;
  sweep.ray_ids = j["ray_ids"].get<std::vector<int64_t>>();
  sweep.ray_count = j["ray_count"].get<int64_t>();
  LidarSpec spec;
  spec.beam_elevations = j["spec"]["beam_elevations"].get<std::vector<double>>();
  spec.azimuth_step = j["spec"]["azimuth_step"].get<double>();
  spec.azimuth_start = j["spec"]["azimuth_start"].get<double>();
  spec.azimuth_end = j["spec"]["azimuth_end"].get<double>();
  auto o = j["spec"]["origin"].get<std::vector<double>>();
  spec.origin = {o[0], o[1], o[2]};
  return {sweep, spec};
}

}  // namespace advf

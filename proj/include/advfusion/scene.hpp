#pragma once

#include <filesystem>
#include <random>

#include <json.hpp>

#include "advfusion/camera.hpp"
#include "advfusion/eval.hpp"
#include "advfusion/geometry.hpp"
#include "advfusion/io_image.hpp"
#include "advfusion/lidar.hpp"
#include "advfusion/rooftop.hpp"

namespace advf {

// One placed object: a car (ground truth) or a decoy (car-shaped clutter with
// a dull paint job that only the image modality can tell apart from a car).
struct SceneVehicle {
  DetectionBox box;     // BEV footprint; score is always 1 for ground truth
  double height = 1.5;  // meters above ground
  bool is_car = true;
  bool is_host = false;
  Vec3 color;  // base body color
};

struct Scene {
  int64_t id = 0;
  uint64_t seed = 0;
  std::vector<SceneVehicle> vehicles;
  LidarSpec lidar;
  CameraModel cam;
  DirectionalLight light;
  Pose host_roof;  // rooftop center + heading from the rooftop fit

  // clean rendered inputs
  LidarSweep sweep;
  Tensor image;        // 3 x H x W in [0,1], quantized to 8 bits
  Tensor dense_depth;  // H x W meters, quantized to millimeters

  std::vector<DetectionBox> gt() const {
    std::vector<DetectionBox> out;
    for (const auto& v : vehicles)
      if (v.is_car) out.push_back(v.box);
    return out;
  }
  const SceneVehicle& host() const {
    for (const auto& v : vehicles)
      if (v.is_host) return v;
    throw std::logic_error("Scene: no host vehicle");
  }
};

struct SceneGenConfig {
  int cars_min = 2, cars_max = 4;
  int decoys_min = 0, decoys_max = 2;
  double x_min = 7.0, x_max = 32.0;  // vehicle center placement range
  double y_abs_max = 10.0;
  double y_fov_slope = 0.55;  // |y| <= slope * x keeps vehicles in view
  int min_host_points = 30;
  // sensors
  int lidar_beams = 40;
  double lidar_elev_min_deg = -14.0, lidar_elev_max_deg = 7.0;
  double lidar_az_span_deg = 60.0, lidar_az_step_deg = 0.3;
  Vec3 lidar_origin{0.0, 0.0, 1.73};
  double cam_f = 180.0;
  int64_t image_w = 320, image_h = 96;
  Vec3 cam_position{0.0, 0.0, 1.65};
  double render_sigma = 2e-5, render_gamma = 1e-4;
};

inline LidarSpec make_lidar_spec(const SceneGenConfig& cfg) {
  LidarSpec s;
  const double d2r = M_PI / 180.0;
  for (int i = 0; i < cfg.lidar_beams; ++i) {
    double f = cfg.lidar_beams == 1 ? 0.0 : static_cast<double>(i) / (cfg.lidar_beams - 1);
    s.beam_elevations.push_back((cfg.lidar_elev_min_deg +
                                 f * (cfg.lidar_elev_max_deg - cfg.lidar_elev_min_deg)) *
                                d2r);
  }
  s.azimuth_start = -cfg.lidar_az_span_deg * d2r;
  s.azimuth_end = cfg.lidar_az_span_deg * d2r;
  s.azimuth_step = cfg.lidar_az_step_deg * d2r;
  s.origin = cfg.lidar_origin;
  return s;
}

inline CameraModel make_camera(const SceneGenConfig& cfg) {
  return CameraModel::forward_facing(cfg.cam_f, cfg.cam_f, (cfg.image_w - 1) / 2.0,
                                     (cfg.image_h - 1) / 2.0, cfg.image_w, cfg.image_h,
                                     cfg.cam_position);
}

namespace scenedetail {

inline Vec3 hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  double r = std::clamp(std::abs(h * 6.0 - 3.0) - 1.0, 0.0, 1.0);
  double g = std::clamp(2.0 - std::abs(h * 6.0 - 2.0), 0.0, 1.0);
  double b = std::clamp(2.0 - std::abs(h * 6.0 - 4.0), 0.0, 1.0);
  auto mix = [&](double c) { return v * (1.0 + s * (c - 1.0)); };
  return {mix(r), mix(g), mix(b)};
}

// Append a second mesh's geometry and per-face textures.
inline void append_mesh(TexturedMesh& dst, const TexturedMesh& src) {
  int32_t base = static_cast<int32_t>(dst.num_vertices());
  Tensor verts({dst.num_vertices() + src.num_vertices(), 3});
  std::copy(dst.vertices.data.begin(), dst.vertices.data.end(), verts.data.begin());
  std::copy(src.vertices.data.begin(), src.vertices.data.end(),
            verts.data.begin() + dst.vertices.data.size());
  dst.vertices = std::move(verts);
  for (auto f : src.faces) dst.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
  Tensor tex({dst.textures.shape[0] + src.textures.shape[0], src.textures.shape[1],
              src.textures.shape[2], 3});
  std::copy(dst.textures.data.begin(), dst.textures.data.end(), tex.data.begin());
  std::copy(src.textures.data.begin(), src.textures.data.end(),
            tex.data.begin() + dst.textures.data.size());
  dst.textures = std::move(tex);
}

inline void set_face_color(TexturedMesh& m, int64_t face, const Vec3& c) {
  int64_t res = m.textures.shape[1];
  for (int64_t i = 0; i < res; ++i)
    for (int64_t j = 0; j < res; ++j) {
      m.textures.at4(face, i, j, 0) = std::clamp(c.x, 0.0, 1.0);
      m.textures.at4(face, i, j, 1) = std::clamp(c.y, 0.0, 1.0);
      m.textures.at4(face, i, j, 2) = std::clamp(c.z, 0.0, 1.0);
    }
}

// Axis-aligned box mesh in the local frame: x in [-l/2,l/2], y in [-w/2,w/2],
// z in [0,h]; per-face coloring derived from the base body color.
inline TexturedMesh make_box_vehicle(double l, double w, double h, const Vec3& color) {
  TexturedMesh m;
  m.vertices = Tensor({8, 3});
  int v = 0;
  for (int zi = 0; zi < 2; ++zi)
    for (int yi = 0; yi < 2; ++yi)
      for (int xi = 0; xi < 2; ++xi) {
        m.vertices.at2(v, 0) = (xi ? 0.5 : -0.5) * l;
        m.vertices.at2(v, 1) = (yi ? 0.5 : -0.5) * w;
        m.vertices.at2(v, 2) = zi ? h : 0.0;
        ++v;
      }
  // vertex index = xi + 2*yi + 4*zi; faces wound outward
  const int quads[6][4] = {
      {0, 1, 3, 2},  // bottom (z-)
      {4, 6, 7, 5},  // top (z+)
      {0, 4, 5, 1},  // y- side
      {2, 3, 7, 6},  // y+ side
      {1, 5, 7, 3},  // x+ front
      {0, 2, 6, 4},  // x- back
  };
  m.textures = Tensor({12, 2, 2, 3});
  for (int q = 0; q < 6; ++q) {
    m.faces.push_back({quads[q][0], quads[q][1], quads[q][2]});
    m.faces.push_back({quads[q][0], quads[q][2], quads[q][3]});
    Vec3 c = color;
    if (q == 1) c = color * 0.8;                   // roof slightly darker
    if (q == 4 || q == 5) c = color * 1.15;        // front/back slightly lighter
    set_face_color(m, q * 2, c);
    set_face_color(m, q * 2 + 1, c);
  }
  m.build_neighbors();
  return m;
}

inline TexturedMesh make_ground(double x0, double x1, double y_half, const Vec3& color) {
  TexturedMesh m;
  m.vertices = Tensor({4, 3}, {x0, -y_half, 0.0, x1, -y_half, 0.0, x1, y_half, 0.0, x0, y_half,
                               0.0});
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  m.textures = Tensor({2, 2, 2, 3});
  set_face_color(m, 0, color);
  set_face_color(m, 1, color);
  m.build_neighbors();
  return m;
}

}  // namespace scenedetail

// World-frame mesh of the whole scene (ground + vehicles): used for clean
// rendering only, never persisted.
inline TexturedMesh build_scene_mesh(const Scene& scene) {
  using namespace scenedetail;
  TexturedMesh world = make_ground(0.6, 80.0, 45.0, {0.46, 0.47, 0.44});
  for (const auto& v : scene.vehicles) {
    TexturedMesh box = make_box_vehicle(v.box.h, v.box.w, v.height, v.color);
    Pose pose({v.box.x, v.box.y, 0.0}, v.box.alpha);
    append_mesh(world, transform_mesh(box, pose));
  }
  return world;
}

// Points of the clean sweep lying inside (slightly inflated) vehicle footprint.
inline std::vector<Vec3> points_in_box(const LidarSweep& sweep, const SceneVehicle& v,
                                       double inflate = 1.05) {
  std::vector<Vec3> out;
  double c = std::cos(v.box.alpha), s = std::sin(v.box.alpha);
  for (int64_t i = 0; i < sweep.size(); ++i) {
    Vec3 p = sweep.point(i);
    if (p.z < 0.05 || p.z > v.height + 0.3) continue;
    double dx = p.x - v.box.x, dy = p.y - v.box.y;
    double u = c * dx + s * dy, t = -s * dx + c * dy;
    if (std::abs(u) <= 0.5 * v.box.h * inflate && std::abs(t) <= 0.5 * v.box.w * inflate)
      out.push_back(p);
  }
  return out;
}

namespace scenedetail {

// Attempt one scene layout + render; returns false when the layout is
// infeasible (placement retries exhausted or host has too few points).
inline bool try_generate(Scene& scene, const SceneGenConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  scene.seed = seed;
  scene.lidar = make_lidar_spec(cfg);
  scene.cam = make_camera(cfg);
  Vec3 ldir{0.35 + 0.3 * uni(rng), -0.5 + uni(rng), -0.9};
  scene.light.direction = ldir.normalized();
  scene.light.diffuse = 0.7;
  scene.light.ambient = 0.3;
  scene.vehicles.clear();

  int n_cars = cfg.cars_min + static_cast<int>(uni(rng) * (cfg.cars_max - cfg.cars_min + 1));
  n_cars = std::min(n_cars, cfg.cars_max);
  int n_dec = cfg.decoys_min + static_cast<int>(uni(rng) * (cfg.decoys_max - cfg.decoys_min + 1));
  n_dec = std::min(n_dec, cfg.decoys_max);

  auto place_one = [&](bool is_car) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      SceneVehicle v;
      v.is_car = is_car;
      v.box.x = cfg.x_min + uni(rng) * (cfg.x_max - cfg.x_min);
      double ymax = std::min(cfg.y_abs_max, cfg.y_fov_slope * v.box.x);
      v.box.y = (2.0 * uni(rng) - 1.0) * ymax;
      v.box.alpha = wrap_angle((2.0 * uni(rng) - 1.0) * M_PI);
      v.box.h = 4.2 + 0.8 * uni(rng);
      v.box.w = 1.7 + 0.3 * uni(rng);
      v.height = 1.4 + 0.2 * uni(rng);
      if (is_car) {
        v.color = hsv_to_rgb(uni(rng), 0.7 + 0.3 * uni(rng), 0.55 + 0.35 * uni(rng));
      } else {
        double g = 0.3 + 0.12 * uni(rng);
        v.color = {g, g, g * (0.95 + 0.1 * uni(rng))};
      }
      DetectionBox inflated = v.box;
      inflated.h += 1.6;
      inflated.w += 1.6;
      bool clash = false;
      for (const auto& other : scene.vehicles) {
        DetectionBox oi = other.box;
        oi.h += 1.6;
        oi.w += 1.6;
        if (rotated_iou(inflated, oi) > 0) {
          clash = true;
          break;
        }
      }
      if (!clash) {
        scene.vehicles.push_back(v);
        return true;
      }
    }
    return false;
  };
  for (int i = 0; i < n_cars; ++i)
    if (!place_one(true)) return false;
  for (int i = 0; i < n_dec; ++i)
    if (!place_one(false)) return false;

  // clean renders
  TexturedMesh world = build_scene_mesh(scene);
  scene.sweep = simulate_lidar(world, scene.lidar);

  SoftRasterConfig rc;
  rc.sigma = cfg.render_sigma;
  rc.gamma = cfg.render_gamma;
  rc.background = {0.70, 0.80, 0.95};  // sky
  auto ro = rasterize_soft(make_const(world.vertices), make_const(world.textures), world.faces,
                           scene.cam, scene.light, rc);
  scene.image = Tensor({3, scene.cam.height, scene.cam.width});
  for (int64_t i = 0; i < scene.image.numel(); ++i) {
    double v = std::clamp(ro.packed->t.data[i], 0.0, 1.0);
    scene.image.data[i] = std::round(v * 255.0) / 255.0;  // match PNG persistence
  }
  scene.dense_depth = densify_depth(scene.sweep, scene.cam);
  for (auto& d : scene.dense_depth.data)
    d = std::round(std::clamp(d * 1000.0, 0.0, 65535.0)) / 1000.0;  // match PGM persistence

  // host: nearest car with enough LiDAR points for a rooftop fit
  int64_t host = -1;
  double best_x = 1e30;
  for (size_t i = 0; i < scene.vehicles.size(); ++i) {
    auto& v = scene.vehicles[i];
    if (!v.is_car) continue;
    if (static_cast<int>(points_in_box(scene.sweep, v).size()) < cfg.min_host_points) continue;
    if (v.box.x < best_x) {
      best_x = v.box.x;
      host = static_cast<int64_t>(i);
    }
  }
  if (host < 0) return false;
  scene.vehicles[host].is_host = true;
  try {
    auto pts = points_in_box(scene.sweep, scene.vehicles[host]);
    VehicleFit fit = fit_vehicle_box(pts, scene.vehicles[host].box.alpha);
    scene.host_roof = rooftop_pose(fit);
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

}  // namespace scenedetail

inline Scene generate_scene(const SceneGenConfig& cfg, int64_t id, uint64_t base_seed) {
  Scene scene;
  scene.id = id;
  for (int sub = 0; sub < 50; ++sub) {
    uint64_t seed = base_seed + 0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(sub);
    if (scenedetail::try_generate(scene, cfg, seed)) return scene;
  }
  throw std::runtime_error("generate_scene: no feasible layout after 50 sub-seeds (scene " +
                           std::to_string(id) + ")");
}

inline std::vector<Scene> generate_scenes(const SceneGenConfig& cfg, int64_t count,
                                          uint64_t seed) {
  if (count <= 0) throw std::invalid_argument("generate_scenes: count must be positive");
  std::vector<Scene> scenes(count);
  std::vector<std::string> errors(count);
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < count; ++i) {
    try {
      scenes[i] = generate_scene(cfg, i, seed + 1000003ULL * static_cast<uint64_t>(i));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("generate_scenes: " + e);
  return scenes;
}

// --- adversary insertion ----------------------------------------------------

// Both perturbed inputs plus the intermediate sweep bookkeeping.
struct PerturbedInputs {
  Value image;   // 3 x H x W
  SweepValue sweep;  // merged LiDAR returns
};

// Rest the adversary's box on the rooftop: the mesh occupies z in [-lz, lz]
// around its origin, so raise the rooftop pose by lz.
inline Pose placement_pose(const Pose& roof, const BoxConstraint& box) {
  Pose p = roof;
  p.translation.z += box.lz;
  return p;
}

// Renders the mesh into both modalities of a scene. Always simulates both,
// regardless of which modality an attack targets (physical consistency).
inline PerturbedInputs insert_adversary(const Scene& scene, const Value& verts,
                                        const Value& textures,
                                        const std::vector<std::array<int32_t, 3>>& faces,
                                        const Pose& pose, double occlusion_tolerance = 0.5) {
  Value world_verts = transform_vertices(verts, pose);

  PerturbedInputs out;
  SweepValue rendered = simulate_lidar(world_verts, faces, scene.lidar);
  out.sweep = merge_sweeps(scene.sweep, rendered, scene.lidar.origin);

  SoftRasterConfig rc;  // default sigma/gamma for the adversary render
  auto ro = rasterize_soft(world_verts, textures, faces, scene.cam, scene.light, rc,
                           &scene.image);
  out.image = composite_image(scene.image, ro, scene.dense_depth, 0.5, occlusion_tolerance);
  return out;
}

// --- persistence ------------------------------------------------------------

namespace scenedetail {

inline nlohmann::json vec3_json(const Vec3& v) { return {v.x, v.y, v.z}; }
inline Vec3 vec3_from(const nlohmann::json& j) { return {j.at(0), j.at(1), j.at(2)}; }

}  // namespace scenedetail

inline void save_scene(const Scene& scene, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_sweep(scene.sweep, scene.lidar, dir + "/sweep.ply", dir + "/sweep.json");
  save_png(dir + "/image.png", scene.image);
  save_depth_pgm(dir + "/depth.pgm", scene.dense_depth);

  nlohmann::json j;
  j["id"] = scene.id;
  j["seed"] = scene.seed;
  nlohmann::json vs = nlohmann::json::array();
  for (const auto& v : scene.vehicles)
    vs.push_back({{"box", box_to_json(v.box)},
                  {"height", v.height},
                  {"is_car", v.is_car},
                  {"is_host", v.is_host},
                  {"color", scenedetail::vec3_json(v.color)}});
  j["vehicles"] = vs;
  j["camera"] = {{"fx", scene.cam.fx},     {"fy", scene.cam.fy},
                 {"cx", scene.cam.cx},     {"cy", scene.cam.cy},
                 {"width", scene.cam.width}, {"height", scene.cam.height},
                 {"rot", std::vector<double>(scene.cam.rot, scene.cam.rot + 9)},
                 {"position", scenedetail::vec3_json(scene.cam.position)}};
  j["light"] = {{"direction", scenedetail::vec3_json(scene.light.direction)},
                {"diffuse", scene.light.diffuse},
                {"ambient", scene.light.ambient}};
  j["host_roof"] = {{"translation", scenedetail::vec3_json(scene.host_roof.translation)},
                    {"heading", scene.host_roof.heading}};
  std::ofstream f(dir + "/annotations.json");
  if (!f) throw std::runtime_error("save_scene: cannot write annotations in " + dir);
  f << j.dump(2) << "\n";
}

inline Scene load_scene(const std::string& dir) {
  Scene scene;
  auto [sweep, spec] = load_sweep(dir + "/sweep.ply", dir + "/sweep.json");
  scene.sweep = std::move(sweep);
  scene.lidar = std::move(spec);
  scene.image = load_png(dir + "/image.png");
  scene.dense_depth = load_depth_pgm(dir + "/depth.pgm");

  std::ifstream f(dir + "/annotations.json");
  if (!f) throw std::runtime_error("load_scene: cannot open annotations in " + dir);
  nlohmann::json j;
  f >> j;
  scene.id = j.at("id");
  scene.seed = j.at("seed");
  for (const auto& vj : j.at("vehicles")) {
    SceneVehicle v;
    v.box = box_from_json(vj.at("box"));
    v.height = vj.at("height");
    v.is_car = vj.at("is_car");
    v.is_host = vj.at("is_host");
    v.color = scenedetail::vec3_from(vj.at("color"));
    scene.vehicles.push_back(v);
  }
  const auto& cj = j.at("camera");
  scene.cam.fx = cj.at("fx");
  scene.cam.fy = cj.at("fy");
  scene.cam.cx = cj.at("cx");
  scene.cam.cy = cj.at("cy");
  scene.cam.width = cj.at("width");
  scene.cam.height = cj.at("height");
  std::vector<double> rot = cj.at("rot");
  std::copy(rot.begin(), rot.end(), scene.cam.rot);
  scene.cam.position = scenedetail::vec3_from(cj.at("position"));
  scene.light.direction = scenedetail::vec3_from(j.at("light").at("direction"));
  scene.light.diffuse = j.at("light").at("diffuse");
  scene.light.ambient = j.at("light").at("ambient");
  scene.host_roof = Pose(scenedetail::vec3_from(j.at("host_roof").at("translation")),
                         j.at("host_roof").at("heading"));
  return scene;
}

inline void save_dataset(const std::vector<Scene>& scenes, const std::string& dir,
                         const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir + "/scenes");
  nlohmann::json index;
  index["scene_count"] = scenes.size();
  nlohmann::json names = nlohmann::json::array();
  for (const auto& s : scenes) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05lld", static_cast<long long>(s.id));
    save_scene(s, dir + "/scenes/" + buf);
    names.push_back(buf);
  }
  index["scenes"] = names;
  if (!extra.is_null()) index["config"] = extra;
  std::ofstream f(dir + "/index.json");
  if (!f) throw std::runtime_error("save_dataset: cannot write index in " + dir);
  f << index.dump(2) << "\n";
}

inline std::vector<Scene> load_dataset(const std::string& dir) {
  std::ifstream f(dir + "/index.json");
  if (!f) throw std::runtime_error("load_dataset: cannot open " + dir + "/index.json");
  nlohmann::json index;
  f >> index;
  std::vector<std::string> names = index.at("scenes");
  std::vector<Scene> scenes(names.size());
  std::vector<std::string> errors(names.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < static_cast<int64_t>(names.size()); ++i) {
    try {
      scenes[i] = load_scene(dir + "/scenes/" + names[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("load_dataset: " + e);
  return scenes;
}

}  // namespace advf

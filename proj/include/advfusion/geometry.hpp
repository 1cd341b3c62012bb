#pragma once

#include <array>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "advfusion/autodiff.hpp"
#include "advfusion/vec3.hpp"

namespace advf {

struct Pose {
  Vec3 translation;
  double heading = 0.0;  // yaw about +z, normalized to (-pi, pi]

  Pose() = default;
  Pose(Vec3 t, double h) : translation(t), heading(wrap_angle(h)) {}
};

struct BoxConstraint {
  double lx = 0.8, ly = 0.8, lz = 0.5;  // meters, per-axis l-inf bound
};

// Triangle mesh with a per-face texture atlas. Topology (faces, vertex
// neighborhoods) is fixed after construction; only vertex positions and
// texels change during optimization.
struct TexturedMesh {
  Tensor vertices;                              // N x 3, object frame
  std::vector<std::array<int32_t, 3>> faces;    // M x 3 vertex indices
  Tensor textures;                              // M x C x C x 3, values in [0,1]
  std::vector<std::vector<int32_t>> neighbors;  // 1-ring per vertex

  int64_t num_vertices() const { return vertices.shape[0]; }
  int64_t num_faces() const { return static_cast<int64_t>(faces.size()); }
  int64_t texture_res() const { return textures.shape[1]; }

  Vec3 vertex(int64_t i) const {
    return {vertices.at2(i, 0), vertices.at2(i, 1), vertices.at2(i, 2)};
  }

  void build_neighbors() {
    neighbors.assign(num_vertices(), {});
    std::set<std::pair<int32_t, int32_t>> edges;
    for (auto& f : faces)
      for (int e = 0; e < 3; ++e) {
        int32_t a = f[e], b = f[(e + 1) % 3];
        if (a > b) std::swap(a, b);
        edges.insert({a, b});
      }
    for (auto& [a, b] : edges) {
      neighbors[a].push_back(b);
      neighbors[b].push_back(a);
    }
  }
};

namespace detail {
inline int64_t midpoint(int64_t a, int64_t b, std::vector<Vec3>& verts,
                        std::map<std::pair<int64_t, int64_t>, int64_t>& cache) {
  auto key = std::minmax(a, b);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  Vec3 m = ((verts[a] + verts[b]) * 0.5).normalized();
  verts.push_back(m);
  int64_t id = static_cast<int64_t>(verts.size()) - 1;
  cache.emplace(key, id);
  return id;
}
}  // namespace detail

// Unit icosphere; textures initialized to mid-gray.
inline TexturedMesh make_icosphere(int subdivisions, int texture_res) {
  if (subdivisions < 0 || subdivisions > 5)
    throw std::invalid_argument("make_icosphere: subdivisions must be in [0,5]");
  if (texture_res <= 0) throw std::invalid_argument("make_icosphere: texture_res must be positive");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t},  {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : verts) v = v.normalized();
  std::vector<std::array<int64_t, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},  {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6},  {3, 6, 8},
      {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int64_t, int64_t>, int64_t> cache;
    std::vector<std::array<int64_t, 3>> next;
    next.reserve(faces.size() * 4);
    for (auto& f : faces) {
      int64_t a = detail::midpoint(f[0], f[1], verts, cache);
      int64_t b = detail::midpoint(f[1], f[2], verts, cache);
      int64_t c = detail::midpoint(f[2], f[0], verts, cache);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    faces = std::move(next);
  }
  TexturedMesh mesh;
  mesh.vertices = Tensor({static_cast<int64_t>(verts.size()), 3});
  for (size_t i = 0; i < verts.size(); ++i) {
    mesh.vertices.at2(i, 0) = verts[i].x;
    mesh.vertices.at2(i, 1) = verts[i].y;
    mesh.vertices.at2(i, 2) = verts[i].z;
  }
  mesh.faces.reserve(faces.size());
  for (auto& f : faces)
    mesh.faces.push_back({static_cast<int32_t>(f[0]), static_cast<int32_t>(f[1]),
                          static_cast<int32_t>(f[2])});
  mesh.textures =
      Tensor({static_cast<int64_t>(faces.size()), texture_res, texture_res, 3}, 0.5);
  mesh.build_neighbors();
  return mesh;
}

// L_lap = sum_i || v_i - mean of 1-ring ||^2, on a vertex Value for gradient flow.
inline Value laplacian_loss(const Value& verts, const std::vector<std::vector<int32_t>>& nbrs) {
  int64_t n = verts->t.shape[0];
  std::vector<double> delta(static_cast<size_t>(n) * 3);
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (nbrs[i].empty())
      throw std::invalid_argument("laplacian_loss: isolated vertex " + std::to_string(i));
    double inv = 1.0 / static_cast<double>(nbrs[i].size());
    for (int c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (int32_t j : nbrs[i]) mean += verts->t.at2(j, c);
      double d = verts->t.at2(i, c) - mean * inv;
      delta[i * 3 + c] = d;
      loss += d * d;
    }
  }
  return make_node(Tensor::scalar(loss), {verts},
                   [nbrs, delta, n](Node& node) {
                     auto& p = node.parents[0];
                     p->ensure_grad();
                     double g = node.grad.data[0];
                     for (int64_t i = 0; i < n; ++i) {
                       double inv = 1.0 / static_cast<double>(nbrs[i].size());
                       for (int c = 0; c < 3; ++c) {
                         p->grad.at2(i, c) += g * 2.0 * delta[i * 3 + c];
                         for (int32_t j : nbrs[i])
                           p->grad.at2(j, c) -= g * 2.0 * delta[i * 3 + c] * inv;
                       }
                     }
                   },
                   "laplacian_loss");
}

inline Value laplacian_loss(const TexturedMesh& mesh) {
  return laplacian_loss(make_const(mesh.vertices), mesh.neighbors);
}

// Projection step of PGD: vertices into the l-inf box, texels into [0,1].
inline TexturedMesh clamp_vertices(TexturedMesh mesh, const BoxConstraint& box) {
  const double lim[3] = {box.lx, box.ly, box.lz};
  for (int64_t i = 0; i < mesh.num_vertices(); ++i)
    for (int c = 0; c < 3; ++c)
      mesh.vertices.at2(i, c) = std::clamp(mesh.vertices.at2(i, c), -lim[c], lim[c]);
  for (auto& v : mesh.textures.data) v = std::clamp(v, 0.0, 1.0);
  return mesh;
}

// Yaw rotation then translation, on a vertex Value.
inline Value transform_vertices(const Value& verts, const Pose& pose) {
  double c = std::cos(pose.heading), s = std::sin(pose.heading);
  int64_t n = verts->t.shape[0];
  Tensor out({n, 3});
  for (int64_t i = 0; i < n; ++i) {
    double x = verts->t.at2(i, 0), y = verts->t.at2(i, 1), z = verts->t.at2(i, 2);
    out.at2(i, 0) = c * x - s * y + pose.translation.x;
    out.at2(i, 1) = s * x + c * y + pose.translation.y;
    out.at2(i, 2) = z + pose.translation.z;
  }
  return make_node(std::move(out), {verts},
                   [c, s, n](Node& node) {
                     auto& p = node.parents[0];
                     p->ensure_grad();
                     for (int64_t i = 0; i < n; ++i) {
                       double gx = node.grad.at2(i, 0), gy = node.grad.at2(i, 1);
                       p->grad.at2(i, 0) += c * gx + s * gy;
                       p->grad.at2(i, 1) += -s * gx + c * gy;
                       p->grad.at2(i, 2) += node.grad.at2(i, 2);
                     }
                   },
                   "transform_vertices");
}

inline TexturedMesh transform_mesh(const TexturedMesh& mesh, const Pose& pose) {
  TexturedMesh out = mesh;
  out.vertices = transform_vertices(make_const(mesh.vertices), pose)->t;
  return out;
}

// Unit face normals by right-hand rule.
inline Tensor face_normals(const TexturedMesh& mesh) {
  Tensor out({mesh.num_faces(), 3});
  for (int64_t f = 0; f < mesh.num_faces(); ++f) {
    Vec3 v0 = mesh.vertex(mesh.faces[f][0]);
    Vec3 e1 = mesh.vertex(mesh.faces[f][1]) - v0;
    Vec3 e2 = mesh.vertex(mesh.faces[f][2]) - v0;
    Vec3 n = e1.cross(e2);
    double len = n.norm();
    if (len < 1e-12)
      throw std::invalid_argument("face_normals: zero-area face " + std::to_string(f));
    out.at2(f, 0) = n.x / len;
    out.at2(f, 1) = n.y / len;
    out.at2(f, 2) = n.z / len;
  }
  return out;
}

// ---- OBJ + texture sidecar IO ----

inline void save_mesh_obj(const TexturedMesh& mesh, const std::string& obj_path,
                          const std::string& tex_json_path) {
  std::ofstream os(obj_path);
  if (!os) throw std::runtime_error("save_mesh_obj: cannot open " + obj_path);
  os.precision(17);
  for (int64_t i = 0; i < mesh.num_vertices(); ++i)
    os << "v " << mesh.vertices.at2(i, 0) << " " << mesh.vertices.at2(i, 1) << " "
       << mesh.vertices.at2(i, 2) << "\n";
  for (auto& f : mesh.faces) os << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
  nlohmann::json j;
  j["shape"] = mesh.textures.shape;
  j["texels"] = mesh.textures.data;
  std::ofstream ts(tex_json_path);
  if (!ts) throw std::runtime_error("save_mesh_obj: cannot open " + tex_json_path);
  ts << j.dump();
}

inline TexturedMesh load_mesh_obj(const std::string& obj_path, const std::string& tex_json_path) {
  std::ifstream is(obj_path);
  if (!is) throw std::runtime_error("load_mesh_obj: cannot open " + obj_path);
  std::vector<double> vdata;
  std::vector<std::array<int32_t, 3>> faces;
  std::string tok;
  while (is >> tok) {
    if (tok == "v") {
      double x, y, z;
      is >> x >> y >> z;
      vdata.insert(vdata.end(), {x, y, z});
    } else if (tok == "f") {
      int a, b, c;
      is >> a >> b >> c;
      faces.push_back({a - 1, b - 1, c - 1});
    } else {
      std::getline(is, tok);
    }
  }
  TexturedMesh mesh;
  mesh.vertices = Tensor({static_cast<int64_t>(vdata.size()) / 3, 3}, std::move(vdata));
  mesh.faces = std::move(faces);
  std::ifstream ts(tex_json_path);
  if (!ts) throw std::runtime_error("load_mesh_obj: cannot open " + tex_json_path);
  nlohmann::json j;
  ts >> j;
  mesh.textures = Tensor(j["shape"].get<std::vector<int64_t>>(),
                         j["texels"].get<std::vector<double>>());
  mesh.build_neighbors();
  return mesh;
}

}  // namespace advf

#include "uvtex/renderer.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace uvtex {

using nlohmann::json;

double RasterMap::coverage() const {
  if (tri.empty()) return 0.0;
  int64_t n = 0;
  for (int32_t t : tri) n += (t >= 0);
  return static_cast<double>(n) / static_cast<double>(tri.size());
}

std::vector<Eigen::Vector3d> apply_pose(const Mesh& mesh, const Pose& pose) {
  require(pose.size() == mesh.part_names.size(),
          "apply_pose: pose must carry one angle per part");
  std::vector<Eigen::Matrix3d> rot(mesh.n_parts());
  for (int p = 0; p < mesh.n_parts(); ++p)
    rot[p] = Eigen::AngleAxisd(pose[p], mesh.pose_axes[p].normalized()).toRotationMatrix();
  std::vector<Eigen::Vector3d> out(mesh.vertices.size());
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    const int p = mesh.vertex_parts[i];
    out[i] = mesh.pivots[p] + rot[p] * (mesh.vertices[i] - mesh.pivots[p]);
  }
  return out;
}

namespace {

struct CameraBasis {
  Eigen::Vector3d pos, right, up, forward;
};

CameraBasis camera_basis(const Camera& cam) {
  CameraBasis b;
  const double ce = std::cos(cam.elevation), se = std::sin(cam.elevation);
  b.pos = cam.distance * Eigen::Vector3d(ce * std::sin(cam.azimuth), se, ce * std::cos(cam.azimuth));
  b.forward = (-b.pos).normalized();
  const Eigen::Vector3d world_up(0.0, 1.0, 0.0);
  b.right = b.forward.cross(world_up).normalized();
  b.up = b.right.cross(b.forward);
  return b;
}

inline double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

constexpr double kZNear = 0.05;

}  // namespace

RasterMap rasterize(const Mesh& mesh, const Pose& pose, const Camera& cam) {
  require(mesh.vertices.size() == mesh.uvs.size() &&
              mesh.vertices.size() == mesh.vertex_parts.size(),
          "rasterize: per-vertex attribute count mismatch");
  require(mesh.triangles.size() == mesh.triangle_parts.size(),
          "rasterize: per-triangle attribute count mismatch");

  const CameraBasis basis = camera_basis(cam);
  const int W = cam.width, H = cam.height;
  RasterMap rm;
  rm.width = W;
  rm.height = H;
  rm.tri.assign(static_cast<size_t>(W) * H, -1);
  rm.u.assign(static_cast<size_t>(W) * H, 0.0);
  rm.v.assign(static_cast<size_t>(W) * H, 0.0);
  rm.depth.assign(static_cast<size_t>(W) * H, std::numeric_limits<double>::infinity());
  rm.part.assign(static_cast<size_t>(W) * H, -1);

  const std::vector<Eigen::Vector3d> posed = apply_pose(mesh, pose);
  std::vector<double> sx(posed.size()), sy(posed.size()), zv(posed.size());
  for (size_t i = 0; i < posed.size(); ++i) {
    const Eigen::Vector3d d = posed[i] - basis.pos;
    zv[i] = basis.forward.dot(d);
    if (zv[i] > kZNear) {
      sx[i] = 0.5 * W + cam.focal * basis.right.dot(d) / zv[i];
      sy[i] = 0.5 * H - cam.focal * basis.up.dot(d) / zv[i];
    }
  }

  for (size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    const int i0 = tri[0], i1 = tri[1], i2 = tri[2];
    if (zv[i0] <= kZNear || zv[i1] <= kZNear || zv[i2] <= kZNear) continue;
    const double area = edge(sx[i0], sy[i0], sx[i1], sy[i1], sx[i2], sy[i2]);
    if (std::abs(area) < 1e-12) continue;

    const int x_lo = std::max(0, static_cast<int>(std::floor(std::min({sx[i0], sx[i1], sx[i2]}) - 0.5)));
    const int x_hi = std::min(W - 1, static_cast<int>(std::ceil(std::max({sx[i0], sx[i1], sx[i2]}) + 0.5)));
    const int y_lo = std::max(0, static_cast<int>(std::floor(std::min({sy[i0], sy[i1], sy[i2]}) - 0.5)));
    const int y_hi = std::min(H - 1, static_cast<int>(std::ceil(std::max({sy[i0], sy[i1], sy[i2]}) + 0.5)));
    if (x_lo > x_hi || y_lo > y_hi) continue;

    const double iz0 = 1.0 / zv[i0], iz1 = 1.0 / zv[i1], iz2 = 1.0 / zv[i2];
    for (int py = y_lo; py <= y_hi; ++py)
      for (int px = x_lo; px <= x_hi; ++px) {
        const double cx = px + 0.5, cy = py + 0.5;
        const double w0 = edge(sx[i1], sy[i1], sx[i2], sy[i2], cx, cy) / area;
        const double w1 = edge(sx[i2], sy[i2], sx[i0], sy[i0], cx, cy) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double denom = w0 * iz0 + w1 * iz1 + w2 * iz2;
        const double z = 1.0 / denom;
        const int64_t p = static_cast<int64_t>(py) * W + px;
        if (z >= rm.depth[p]) continue;
        rm.depth[p] = z;
        rm.tri[p] = static_cast<int32_t>(t);
        rm.part[p] = static_cast<int8_t>(mesh.triangle_parts[t]);
        rm.u[p] = (w0 * mesh.uvs[i0].x() * iz0 + w1 * mesh.uvs[i1].x() * iz1 +
                   w2 * mesh.uvs[i2].x() * iz2) * z;
        rm.v[p] = (w0 * mesh.uvs[i0].y() * iz0 + w1 * mesh.uvs[i1].y() * iz1 +
                   w2 * mesh.uvs[i2].y() * iz2) * z;
      }
  }
  return rm;
}

Tensor render_texture(const std::vector<const RasterMap*>& rasters, const Tensor& T, double bg) {
  require(T.defined() && T.shape().rank == 4 && T.shape()[1] == 3,
          "render_texture: texture must be (B,3,th,tw)");
  require(static_cast<int>(rasters.size()) == T.shape()[0],
          "render_texture: need one raster per batch sample");
  const int B = T.shape()[0], th = T.shape()[2], tw = T.shape()[3];
  require(th >= 2 && tw >= 2, "render_texture: texture must be at least 2x2");
  for (const RasterMap* r : rasters)
    require(r != nullptr && r->width > 0, "render_texture: null or empty raster");
  const int H = rasters[0]->height, W = rasters[0]->width;
  for (const RasterMap* r : rasters)
    require(r->height == H && r->width == W, "render_texture: raster size mismatch");
  const int64_t HW = static_cast<int64_t>(H) * W;
  const int64_t thw = static_cast<int64_t>(th) * tw;

  Tensor out = Tensor::full(Shape{B, 3, H, W}, bg);
  for (int bi = 0; bi < B; ++bi) {
    const RasterMap& rm = *rasters[bi];
    for (int64_t p = 0; p < HW; ++p) {
      if (!rm.covered(p)) continue;
      const double pu = std::min(std::max(rm.u[p], 0.0), 1.0) * (tw - 1);
      const double pv = std::min(std::max(rm.v[p], 0.0), 1.0) * (th - 1);
      const int x0 = std::min(static_cast<int>(pu), tw - 2);
      const int y0 = std::min(static_cast<int>(pv), th - 2);
      const double ax = pu - x0, ay = pv - y0;
      for (int c = 0; c < 3; ++c) {
        const double* tc = T.ptr() + (static_cast<int64_t>(bi) * 3 + c) * thw;
        const double* r0 = tc + static_cast<int64_t>(y0) * tw + x0;
        out.ptr()[(static_cast<int64_t>(bi) * 3 + c) * HW + p] =
            (1 - ay) * ((1 - ax) * r0[0] + ax * r0[1]) + ay * ((1 - ax) * r0[tw] + ax * r0[tw + 1]);
      }
    }
  }

  if (active_tape() && T.requires_grad()) {
    out.set_requires_grad(true);
    Tensor Tc = T, oc = out;
    std::vector<const RasterMap*> rc = rasters;
    active_tape()->record([Tc, oc, rc, B, th, tw, HW, thw]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array dT = Array::Zero(Tc.numel());
      for (int bi = 0; bi < B; ++bi) {
        const RasterMap& rm = *rc[bi];
        for (int64_t p = 0; p < HW; ++p) {
          if (!rm.covered(p)) continue;
          const double pu = std::min(std::max(rm.u[p], 0.0), 1.0) * (tw - 1);
          const double pv = std::min(std::max(rm.v[p], 0.0), 1.0) * (th - 1);
          const int x0 = std::min(static_cast<int>(pu), tw - 2);
          const int y0 = std::min(static_cast<int>(pv), th - 2);
          const double ax = pu - x0, ay = pv - y0;
          for (int c = 0; c < 3; ++c) {
            const double gv = g[(static_cast<int64_t>(bi) * 3 + c) * HW + p];
            double* dtc =
                dT.data() + (static_cast<int64_t>(bi) * 3 + c) * thw + static_cast<int64_t>(y0) * tw + x0;
            dtc[0] += gv * (1 - ay) * (1 - ax);
            dtc[1] += gv * (1 - ay) * ax;
            dtc[tw] += gv * ay * (1 - ax);
            dtc[tw + 1] += gv * ay * ax;
          }
        }
      }
      Tc.accumulate_grad(dT);
    });
  }
  return out;
}

Tensor render_texture(const RasterMap& raster, const Tensor& T, double bg) {
  require(T.defined() && T.shape().rank == 3 && T.shape()[0] == 3,
          "render_texture: texture must be (3,th,tw)");
  // Route through the batched path via a rank-4 copy. Tape nodes run in
  // reverse recording order, so the copy-to-T transfer is recorded before the
  // render node that fills the copy's gradient.
  Tensor t4 = Tensor::zeros(Shape{1, 3, T.shape()[1], T.shape()[2]});
  t4.data() = T.data();
  if (active_tape() && T.requires_grad()) {
    t4.set_requires_grad(true);
    Tensor Tc = T, t4c = t4;
    active_tape()->record([Tc, t4c]() mutable {
      if (t4c.has_grad()) Tc.accumulate_grad(t4c.grad());
    });
  }
  Tensor out4 = render_texture(std::vector<const RasterMap*>{&raster}, t4, bg);
  Tensor out = Tensor::zeros(Shape{3, raster.height, raster.width});
  out.data() = out4.data();
  if (active_tape() && out4.requires_grad()) {
    out.set_requires_grad(true);
    Tensor o4 = out4, oc = out;
    active_tape()->record([o4, oc]() mutable {
      if (oc.has_grad()) o4.accumulate_grad(oc.grad());
    });
  }
  return out;
}

Tensor render_part_masks(const RasterMap& raster, int n_parts) {
  require(n_parts > 0, "render_part_masks: n_parts must be positive");
  Tensor out = Tensor::zeros(Shape{n_parts, raster.height, raster.width});
  const int64_t HW = raster.pixels();
  for (int64_t p = 0; p < HW; ++p)
    if (raster.part[p] >= 0 && raster.part[p] < n_parts)
      out.data()[static_cast<int64_t>(raster.part[p]) * HW + p] = 1.0;
  return out;
}

// ---- JSON -------------------------------------------------------------------

std::string mesh_to_json(const Mesh& mesh) {
  json j;
  for (const auto& v : mesh.vertices) j["vertices"].push_back({v.x(), v.y(), v.z()});
  for (const auto& uv : mesh.uvs) j["uvs"].push_back({uv.x(), uv.y()});
  j["vertex_parts"] = mesh.vertex_parts;
  for (const auto& t : mesh.triangles) j["triangles"].push_back({t[0], t[1], t[2]});
  j["triangle_parts"] = mesh.triangle_parts;
  j["parts"] = mesh.part_names;
  for (int p = 0; p < mesh.n_parts(); ++p) {
    j["pivots"].push_back({mesh.pivots[p].x(), mesh.pivots[p].y(), mesh.pivots[p].z()});
    j["pose_axes"].push_back(
        {mesh.pose_axes[p].x(), mesh.pose_axes[p].y(), mesh.pose_axes[p].z()});
  }
  return j.dump(2);
}

Mesh mesh_from_json(const std::string& text) {
  const json j = json::parse(text);
  Mesh m;
  for (const auto& v : j.at("vertices")) m.vertices.emplace_back(v[0], v[1], v[2]);
  for (const auto& uv : j.at("uvs")) m.uvs.emplace_back(uv[0], uv[1]);
  m.vertex_parts = j.at("vertex_parts").get<std::vector<int>>();
  for (const auto& t : j.at("triangles"))
    m.triangles.push_back({t[0].get<int>(), t[1].get<int>(), t[2].get<int>()});
  m.triangle_parts = j.at("triangle_parts").get<std::vector<int>>();
  m.part_names = j.at("parts").get<std::vector<std::string>>();
  for (const auto& p : j.at("pivots")) m.pivots.emplace_back(p[0], p[1], p[2]);
  for (const auto& a : j.at("pose_axes")) m.pose_axes.emplace_back(a[0], a[1], a[2]);
  return m;
}

std::string view_to_json(const Camera& cam, const Pose& pose) {
  json j;
  j["camera"] = {{"azimuth", cam.azimuth},   {"elevation", cam.elevation},
                 {"distance", cam.distance}, {"focal", cam.focal},
                 {"width", cam.width},       {"height", cam.height}};
  j["pose"] = pose;
  return j.dump(2);
}

void view_from_json(const std::string& text, Camera* cam, Pose* pose) {
  const json j = json::parse(text);
  const json& c = j.at("camera");
  cam->azimuth = c.at("azimuth");
  cam->elevation = c.at("elevation");
  cam->distance = c.at("distance");
  cam->focal = c.at("focal");
  cam->width = c.at("width");
  cam->height = c.at("height");
  *pose = j.at("pose").get<std::vector<double>>();
}

}  // namespace uvtex

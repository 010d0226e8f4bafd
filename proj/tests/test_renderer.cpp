#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "uvtex/renderer.hpp"

using namespace uvtex;

namespace {

// Single-part mesh from explicit vertices/uvs/triangles.
Mesh make_mesh(std::vector<Eigen::Vector3d> verts, std::vector<Eigen::Vector2d> uvs,
               std::vector<std::array<int, 3>> tris) {
  Mesh m;
  m.vertices = std::move(verts);
  m.uvs = std::move(uvs);
  m.triangles = std::move(tris);
  m.vertex_parts.assign(m.vertices.size(), 0);
  m.triangle_parts.assign(m.triangles.size(), 0);
  m.part_names = {"only"};
  m.pivots = {Eigen::Vector3d::Zero()};
  m.pose_axes = {Eigen::Vector3d::UnitX()};
  return m;
}

Mesh quad_at_z(double z, double half = 0.6) {
  return make_mesh({{-half, -half, z}, {half, -half, z}, {half, half, z}, {-half, half, z}},
                   {{0, 1}, {1, 1}, {1, 0}, {0, 0}},  // v grows downward in texture space
                   {{{0, 1, 2}}, {{0, 2, 3}}});
}

// Ray-triangle intersection returning barycentric (b0,b1,b2) w.r.t. the
// triangle's vertices; the independent oracle for perspective-correct
// interpolation (screen-space perspective interpolation must agree with
// world-space barycentrics at the hit point).
bool ray_tri(const Eigen::Vector3d& orig, const Eigen::Vector3d& dir, const Eigen::Vector3d& a,
             const Eigen::Vector3d& b, const Eigen::Vector3d& c, Eigen::Vector3d* bary) {
  const Eigen::Vector3d e1 = b - a, e2 = c - a;
  const Eigen::Vector3d p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return false;
  const Eigen::Vector3d tv = orig - a;
  const double u = tv.dot(p) / det;
  const Eigen::Vector3d q = tv.cross(e1);
  const double v = dir.dot(q) / det;
  if (u < -1e-9 || v < -1e-9 || u + v > 1 + 1e-9) return false;
  *bary = Eigen::Vector3d(1 - u - v, u, v);
  return true;
}

}  // namespace

TEST_CASE("geometry behind the camera rasterizes to an empty map") {
  Mesh m = quad_at_z(5.0);  // camera sits at z=2.6 looking toward -z
  Camera cam;
  RasterMap rm = rasterize(m, {0.0}, cam);
  CHECK(rm.coverage() == 0.0);
}

TEST_CASE("frontal quad covers pixels and interpolates uv within bounds") {
  Mesh m = quad_at_z(0.0);
  Camera cam;
  RasterMap rm = rasterize(m, {0.0}, cam);
  CHECK(rm.coverage() > 0.2);
  for (int64_t p = 0; p < rm.pixels(); ++p) {
    if (!rm.covered(p)) continue;
    CHECK(rm.u[p] >= -1e-9);
    CHECK(rm.u[p] <= 1 + 1e-9);
    CHECK(rm.v[p] >= -1e-9);
    CHECK(rm.v[p] <= 1 + 1e-9);
    CHECK(rm.part[p] == 0);
  }
}

TEST_CASE("uv interpolation matches a ray-casting oracle on a depth-tilted quad") {
  // Rotate the quad so depth varies across the surface; perspective-correct
  // interpolation then differs measurably from affine interpolation.
  Mesh m = quad_at_z(0.0);
  for (auto& v : m.vertices) {
    const double ang = 0.9;
    const double x = v.x(), z = v.z();
    v.x() = std::cos(ang) * x - std::sin(ang) * z;
    v.z() = std::sin(ang) * x + std::cos(ang) * z;
  }
  Camera cam;
  RasterMap rm = rasterize(m, {0.0}, cam);
  CHECK(rm.coverage() > 0.05);

  // reconstruct the documented camera basis
  const Eigen::Vector3d pos(0.0, 0.0, cam.distance);
  const Eigen::Vector3d fwd(0.0, 0.0, -1.0), right(1.0, 0.0, 0.0), up(0.0, 1.0, 0.0);
  int checked = 0;
  for (int py = 0; py < rm.height; py += 3)
    for (int px = 0; px < rm.width; px += 3) {
      const int64_t p = static_cast<int64_t>(py) * rm.width + px;
      if (!rm.covered(p)) continue;
      const Eigen::Vector3d dir =
          (fwd + right * ((px + 0.5 - cam.width * 0.5) / cam.focal) +
           up * ((cam.height * 0.5 - (py + 0.5)) / cam.focal))
              .normalized();
      const auto& tri = m.triangles[rm.tri[p]];
      Eigen::Vector3d bary;
      REQUIRE(ray_tri(pos, dir, m.vertices[tri[0]], m.vertices[tri[1]], m.vertices[tri[2]], &bary));
      const double u_ref = bary[0] * m.uvs[tri[0]].x() + bary[1] * m.uvs[tri[1]].x() +
                           bary[2] * m.uvs[tri[2]].x();
      const double v_ref = bary[0] * m.uvs[tri[0]].y() + bary[1] * m.uvs[tri[1]].y() +
                           bary[2] * m.uvs[tri[2]].y();
      CHECK(std::abs(rm.u[p] - u_ref) <= 1e-9);
      CHECK(std::abs(rm.v[p] - v_ref) <= 1e-9);
      ++checked;
    }
  CHECK(checked >= 20);
}

TEST_CASE("z-buffer keeps the nearer surface") {
  // two stacked quads; the z=0.5 one is closer to the camera at z=2.6
  Mesh near = quad_at_z(0.5, 0.3), far = quad_at_z(-0.5, 0.3);
  Mesh both = near;
  const int off = static_cast<int>(both.vertices.size());
  for (const auto& v : far.vertices) both.vertices.push_back(v);
  for (const auto& uv : far.uvs) both.uvs.push_back(uv);
  for (int i = 0; i < 4; ++i) both.vertex_parts.push_back(1);
  for (const auto& t : far.triangles)
    both.triangles.push_back({t[0] + off, t[1] + off, t[2] + off});
  both.triangle_parts.push_back(1);
  both.triangle_parts.push_back(1);
  both.part_names = {"near", "far"};
  both.pivots = {Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero()};
  both.pose_axes = {Eigen::Vector3d::UnitX(), Eigen::Vector3d::UnitX()};

  RasterMap rm = rasterize(both, {0.0, 0.0}, Camera{});
  // the far quad projects smaller; every pixel covered by the near quad's
  // footprint must resolve to part 0
  int near_pixels = 0;
  for (int64_t p = 0; p < rm.pixels(); ++p)
    if (rm.covered(p) && rm.tri[p] < 2) {
      CHECK(rm.part[p] == 0);
      ++near_pixels;
    }
  CHECK(near_pixels > 50);
}

TEST_CASE("apply_pose rotates about the pivot and fixes the pivot") {
  Mesh m = quad_at_z(0.0);
  m.pivots = {Eigen::Vector3d(0.0, -0.6, 0.0)};
  m.pose_axes = {Eigen::Vector3d::UnitX()};
  auto posed_id = apply_pose(m, {0.0});
  for (size_t i = 0; i < posed_id.size(); ++i)
    CHECK((posed_id[i] - m.vertices[i]).norm() <= 1e-15);
  auto posed = apply_pose(m, {M_PI / 2});
  // vertex 0 = (-0.6,-0.6,0): relative to pivot it is (-0.6,0,0); rotation
  // about x keeps it put
  CHECK((posed[0] - Eigen::Vector3d(-0.6, -0.6, 0.0)).norm() <= 1e-12);
  // vertex 3 = (-0.6,0.6,0): relative (−0.6,1.2,0) → (−0.6,0,1.2)
  CHECK((posed[3] - Eigen::Vector3d(-0.6, -0.6, 1.2)).norm() <= 1e-12);
  CHECK_THROWS_AS(apply_pose(m, Pose{}), ContractViolation);
}

TEST_CASE("render_texture looks up colors and leaves background at bg") {
  Mesh m = quad_at_z(0.0);
  Camera cam;
  RasterMap rm = rasterize(m, {0.0}, cam);
  Tensor tex = Tensor::zeros(Shape{3, 4, 4});
  tex.data().setConstant(0.7);
  Tensor img = render_texture(rm, tex, -0.25);
  const int64_t HW = rm.pixels();
  for (int64_t p = 0; p < HW; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = img.data()[c * HW + p];
      if (rm.covered(p))
        CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
      else
        CHECK(v == -0.25);
    }
}

TEST_CASE("render_texture gradient matches finite differences on a synthetic raster") {
  RasterMap rm;
  rm.width = 3;
  rm.height = 2;
  rm.tri = {0, -1, 2, -1, 5, 1};
  rm.u = {0.1, 0, 0.52, 0, 0.98, 0.33};
  rm.v = {0.2, 0, 0.77, 0, 0.03, 0.61};
  rm.depth.assign(6, 1.0);
  rm.part = {0, -1, 0, -1, 0, 0};

  Rng rng(31);
  Tensor tex = Tensor::randn(Shape{3, 4, 5}, rng, 1.0, true);
  auto f = [&]() {
    Tensor img = render_texture(rm, tex, 0.0);
    return sum(mul(img, img));
  };
  CHECK(grad_check(f, tex, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("empty raster renders background and zero texture gradient") {
  RasterMap rm;
  rm.width = 2;
  rm.height = 2;
  rm.tri.assign(4, -1);
  rm.u.assign(4, 0.0);
  rm.v.assign(4, 0.0);
  rm.depth.assign(4, 0.0);
  rm.part.assign(4, -1);
  Tensor tex = Tensor::full(Shape{3, 4, 4}, 0.9, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor img = render_texture(rm, tex, 0.0);
    CHECK(img.data().abs().maxCoeff() == 0.0);
    backward(sum(img));
  }
  CHECK(tex.grad().abs().maxCoeff() == 0.0);
}

TEST_CASE("batched render uses each sample's raster") {
  Mesh m = quad_at_z(0.0);
  Camera c1;
  Camera c2;
  c2.azimuth = M_PI;  // from behind, the quad is still visible (no culling)
  RasterMap r1 = rasterize(m, {0.0}, c1), r2 = rasterize(m, {0.0}, c2);
  Tensor tex = Tensor::zeros(Shape{2, 3, 4, 4});
  tex.data().segment(0, 48).setConstant(0.5);
  tex.data().segment(48, 48).setConstant(-0.5);
  Tensor img = render_texture({&r1, &r2}, tex, 0.0);
  const int64_t HW = r1.pixels();
  bool saw1 = false, saw2 = false;
  for (int64_t p = 0; p < HW; ++p) {
    if (r1.covered(p)) {
      CHECK(img.data()[p] == doctest::Approx(0.5));
      saw1 = true;
    }
    if (r2.covered(p)) {
      CHECK(img.data()[3 * HW + p] == doctest::Approx(-0.5));
      saw2 = true;
    }
  }
  CHECK(saw1);
  CHECK(saw2);
}

TEST_CASE("part masks are binary, disjoint, and match the raster") {
  Mesh m = quad_at_z(0.0);
  RasterMap rm = rasterize(m, {0.0}, Camera{});
  Tensor masks = render_part_masks(rm, 3);
  CHECK(masks.shape() == Shape{3, rm.height, rm.width});
  const int64_t HW = rm.pixels();
  for (int64_t p = 0; p < HW; ++p) {
    double s = 0;
    for (int q = 0; q < 3; ++q) s += masks.data()[q * HW + p];
    CHECK((s == 0.0 || s == 1.0));
    if (rm.covered(p)) CHECK(masks.data()[0 * HW + p] == 1.0);
  }
}

TEST_CASE("mesh and view JSON round-trip preserves rasterization bitwise") {
  Mesh m = quad_at_z(0.1, 0.45);
  m.vertices[2].x() += 0.1234567890123;
  Camera cam;
  cam.azimuth = 0.7;
  cam.elevation = -0.12;
  Pose pose = {0.3};

  Mesh m2 = mesh_from_json(mesh_to_json(m));
  Camera cam2;
  Pose pose2;
  view_from_json(view_to_json(cam, pose), &cam2, &pose2);

  RasterMap a = rasterize(m, pose, cam);
  RasterMap b = rasterize(m2, pose2, cam2);
  CHECK(a.tri == b.tri);
  CHECK(a.u == b.u);
  CHECK(a.v == b.v);
  CHECK(a.part == b.part);
}

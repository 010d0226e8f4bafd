#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "uvtex/tensor.hpp"

namespace uvtex {

// Triangle mesh with a fixed UV atlas and rigid articulated parts.
// Seam vertices are duplicated so UV interpolation never wraps.
struct Mesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<Eigen::Vector2d> uvs;            // per vertex, in [0,1]^2
  std::vector<int> vertex_parts;               // per vertex
  std::vector<std::array<int, 3>> triangles;   // vertex indices
  std::vector<int> triangle_parts;             // per triangle
  std::vector<std::string> part_names;
  std::vector<Eigen::Vector3d> pivots;         // per part, rotation center
  std::vector<Eigen::Vector3d> pose_axes;      // per part, rotation axis

  int n_parts() const { return static_cast<int>(part_names.size()); }
};

// One rotation angle (radians) per part, applied about the part's axis
// through its pivot. Order follows Mesh::part_names.
using Pose = std::vector<double>;

// Pinhole camera looking at the world origin. Azimuth rotates around the
// world y (up) axis; azimuth 0 places the camera on the +z axis. World +x
// appears on the image right at azimuth 0; image y grows downward.
struct Camera {
  double azimuth = 0.0;
  double elevation = 0.0;
  double distance = 2.6;
  double focal = 140.0;
  int width = 64;
  int height = 128;
};

// Per-pixel output of rasterization. Backgrounds carry tri = -1, part = -1.
struct RasterMap {
  int width = 0, height = 0;
  std::vector<int32_t> tri;
  std::vector<double> u, v;
  std::vector<double> depth;
  std::vector<int8_t> part;

  bool covered(int64_t p) const { return tri[p] >= 0; }
  int64_t pixels() const { return static_cast<int64_t>(width) * height; }
  double coverage() const;
};

std::vector<Eigen::Vector3d> apply_pose(const Mesh& mesh, const Pose& pose);

// Z-buffered rasterization with perspective-correct UV and part attributes.
// Degenerate and behind-camera triangles are skipped. Not differentiable.
RasterMap rasterize(const Mesh& mesh, const Pose& pose, const Camera& cam);

// Looks up texture colors at each covered pixel's UV (bilinear); background
// pixels take bg. Differentiable w.r.t. the texture only. The batched form
// takes T as (B,3,th,tw) with one raster per sample; the single form takes
// (3,th,tw). Texture row 0 is v=0.
Tensor render_texture(const std::vector<const RasterMap*>& rasters, const Tensor& T,
                      double bg = 0.0);
Tensor render_texture(const RasterMap& raster, const Tensor& T, double bg = 0.0);

// Binary visibility mask per part, (P,H,W).
Tensor render_part_masks(const RasterMap& raster, int n_parts);

std::string mesh_to_json(const Mesh& mesh);
Mesh mesh_from_json(const std::string& text);
std::string view_to_json(const Camera& cam, const Pose& pose);
void view_from_json(const std::string& text, Camera* cam, Pose* pose);

}  // namespace uvtex

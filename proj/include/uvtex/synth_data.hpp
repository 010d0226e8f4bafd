#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "uvtex/renderer.hpp"
#include "uvtex/rng.hpp"
#include "uvtex/tensor.hpp"

namespace uvtex {

inline constexpr int kTextureSize = 128;
inline constexpr int kViewHeight = 128;
inline constexpr int kViewWidth = 64;
inline constexpr int kViewsPerIdentity = 8;
inline constexpr int kNumParts = 6;
inline constexpr double kAtlasMarginTexels = 1.5;

// Axis-aligned rectangle in normalized UV, [u0,u1) x [v0,v1).
struct AtlasRect {
  double u0 = 0, v0 = 0, u1 = 0, v1 = 0;
  int px0(int s) const { return static_cast<int>(u0 * s + 0.5); }
  int py0(int s) const { return static_cast<int>(v0 * s + 0.5); }
  int px1(int s) const { return static_cast<int>(u1 * s + 0.5); }
  int py1(int s) const { return static_cast<int>(v1 * s + 0.5); }
  bool contains(const AtlasRect& o) const {
    return o.u0 >= u0 && o.u1 <= u1 && o.v0 >= v0 && o.v1 <= v1;
  }
  bool overlaps(const AtlasRect& o) const {
    return o.u0 < u1 && u0 < o.u1 && o.v0 < v1 && v0 < o.v1;
  }
};

// Fixed texture-atlas partition: one rectangle per part plus the face
// rectangle nested inside the head region. Part order matches the mesh.
struct AtlasLayout {
  std::array<AtlasRect, kNumParts> parts;
  AtlasRect face;
  static const AtlasLayout& standard();
};

enum class PaintPattern { kStripes = 0, kChecker = 1 };

struct PartPaint {
  PaintPattern pattern = PaintPattern::kStripes;
  bool along_u = true;   // stripe direction (stripes only)
  int freq_u = 2;        // full periods across the rect
  int freq_v = 2;
  double phase_u = 0.25; // in [0.15, 0.85], half-period units
  double phase_v = 0.25;
  Eigen::Vector3d color_a = Eigen::Vector3d::Zero();  // RGB in [0,1]
  Eigen::Vector3d color_b = Eigen::Vector3d::Zero();
};

struct PaintRecipe {
  std::array<PartPaint, kNumParts> parts;
  Eigen::Vector3d skin = Eigen::Vector3d::Zero();
  Eigen::Vector3d eye = Eigen::Vector3d::Zero();
  Eigen::Vector3d mouth = Eigen::Vector3d::Zero();
};

struct IdentityView {
  int view_id = 0;
  Camera camera;
  Pose pose;
  RasterMap raster;
  Tensor image;  // (3,H,W) in [-1,1], exactly render_texture(raster, texture)
  Tensor parts;  // (1,H,W), 0 = background, 1..6 = part index + 1
};

struct SyntheticIdentity {
  std::string id;
  Tensor texture;  // (3,S,S) ground truth, already 8-bit quantized
  Mesh mesh;
  std::vector<IdentityView> views;
  PaintRecipe recipe;
};

struct FaceBank {
  std::vector<Tensor> textures;  // full (3,S,S) textures; face rect is the payload
};

// Six-part capsule figure: elliptic-cylinder torso, sphere head, four limb
// cylinders in a slight A-pose. Roughly 500 triangles; UV seams duplicated.
Mesh make_mannequin();

// Deterministic identity: painted atlas texture plus kViewsPerIdentity views
// at azimuths k*45deg with +-10deg elevation jitter and per-part pose jitter
// (limbs <= 20deg, head <= 10deg). The stored texture is quantized through
// the PNG mapping first so emitted images re-render exactly from disk.
SyntheticIdentity generate_identity(uint64_t seed, const std::string& name = "");

// Writes <out>/<id>/{texture_gt.png, mesh.json, views/<k>/{image.png,
// parts.png, camera.json}} plus a dataset.json manifest with a disjoint
// train/test identity split. Identity i draws from stream fork(seed, i).
void render_dataset(int n_identities, uint64_t seed, const std::string& out_dir);

// N full textures from reserved streams fork(seed, 2^32 + i); these streams
// are never used by render_dataset identities.
FaceBank face_bank(uint64_t seed, int n = 20);

struct LoadedView {
  int view_id = 0;
  Camera camera;
  Pose pose;
  RasterMap raster;  // rebuilt by rasterizing mesh at (pose, camera)
  Tensor image;      // (3,H,W)
  Tensor parts;      // (1,H,W) raw labels 0..6
};

struct LoadedIdentity {
  std::string id;
  Tensor texture_gt;
  Mesh mesh;
  std::vector<LoadedView> views;
};

struct Dataset {
  std::string root;
  uint64_t seed = 0;
  int texture_size = kTextureSize;
  std::vector<LoadedIdentity> identities;
  std::vector<int> train_index;  // indices into identities
  std::vector<int> test_index;
};

Dataset load_dataset(const std::string& dir);

// (1,S,S) 0/1 masks over texels. "Mapped" marks texels inside any UV
// triangle; "visible" marks the bilinear footprint corners of every covered
// pixel of a raster.
Tensor uv_mapped_mask(const Mesh& mesh, int tex_size);
Tensor visible_texel_mask(const RasterMap& raster, int tex_size);

// Round trip through the 8-bit PNG mapping, byte = round((v+1)/2*255).
double quantize_unit(double v);
Tensor quantize_image(const Tensor& t);

}  // namespace uvtex

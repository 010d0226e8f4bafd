#include "uvtex/synth_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "uvtex/image_io.hpp"

namespace uvtex {

namespace fs = std::filesystem;
using nlohmann::json;

const AtlasLayout& AtlasLayout::standard() {
  static const AtlasLayout layout = [] {
    AtlasLayout l;
    l.parts[0] = {0.00, 0.0, 0.50, 0.5};  // torso
    l.parts[1] = {0.50, 0.0, 1.00, 0.5};  // head
    l.parts[2] = {0.00, 0.5, 0.25, 1.0};  // arm_left
    l.parts[3] = {0.25, 0.5, 0.50, 1.0};  // arm_right
    l.parts[4] = {0.50, 0.5, 0.75, 1.0};  // leg_left
    l.parts[5] = {0.75, 0.5, 1.00, 1.0};  // leg_right
    l.face = {86.0 / 128, 21.0 / 128, 108.0 / 128, 43.0 / 128};
    return l;
  }();
  return layout;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

struct MeshBuilder {
  Mesh mesh;

  int add_vertex(const Eigen::Vector3d& p, double u, double v, int part) {
    mesh.vertices.push_back(p);
    mesh.uvs.emplace_back(u, v);
    mesh.vertex_parts.push_back(part);
    return static_cast<int>(mesh.vertices.size()) - 1;
  }
  void add_tri(int a, int b, int c, int part) {
    mesh.triangles.push_back({a, b, c});
    mesh.triangle_parts.push_back(part);
  }
};

// Maps a grid fraction into a part rectangle, inset so bilinear texture
// lookups never cross into a neighboring part.
double rect_u(const AtlasRect& r, double f) {
  const double m = kAtlasMarginTexels / kTextureSize;
  return r.u0 + m + f * (r.u1 - r.u0 - 2 * m);
}
double rect_v(const AtlasRect& r, double f) {
  const double m = kAtlasMarginTexels / kTextureSize;
  return r.v0 + m + f * (r.v1 - r.v0 - 2 * m);
}

// Tube between two ring centers with elliptic cross-section (rx along x,
// rz along z), horizontal rings, seam column duplicated.
void add_tube(MeshBuilder& b, int part, const Eigen::Vector3d& top, const Eigen::Vector3d& bottom,
              double rx, double rz, int n_cols, int n_rows, const AtlasRect& rect) {
  std::vector<int> grid((n_rows + 1) * (n_cols + 1));
  for (int r = 0; r <= n_rows; ++r) {
    const double t = static_cast<double>(r) / n_rows;
    const Eigen::Vector3d center = top + t * (bottom - top);
    for (int c = 0; c <= n_cols; ++c) {
      const double a = 2.0 * kPi * c / n_cols;
      const Eigen::Vector3d p = center + Eigen::Vector3d(rx * std::sin(a), 0.0, -rz * std::cos(a));
      grid[r * (n_cols + 1) + c] =
          b.add_vertex(p, rect_u(rect, static_cast<double>(c) / n_cols), rect_v(rect, t), part);
    }
  }
  for (int r = 0; r < n_rows; ++r)
    for (int c = 0; c < n_cols; ++c) {
      const int v00 = grid[r * (n_cols + 1) + c], v01 = grid[r * (n_cols + 1) + c + 1];
      const int v10 = grid[(r + 1) * (n_cols + 1) + c], v11 = grid[(r + 1) * (n_cols + 1) + c + 1];
      b.add_tri(v00, v01, v10, part);
      b.add_tri(v01, v11, v10, part);
    }
}

// Lat-long sphere; the seam faces -z so the front half maps to the middle of
// the rectangle (where the face rectangle lives). Pole caps emit one triangle
// per column and the nonuniform v_fracs shrink their share of the atlas.
void add_sphere(MeshBuilder& b, int part, const Eigen::Vector3d& center, double radius, int n_cols,
                int n_lat, const std::vector<double>& v_fracs, const AtlasRect& rect) {
  std::vector<int> grid((n_lat + 1) * (n_cols + 1));
  for (int r = 0; r <= n_lat; ++r) {
    const double theta = kPi * r / n_lat;
    const double y = radius * std::cos(theta), rad = radius * std::sin(theta);
    for (int c = 0; c <= n_cols; ++c) {
      const double phi = 2.0 * kPi * c / n_cols;
      const Eigen::Vector3d p =
          center + Eigen::Vector3d(rad * std::sin(phi), y, -rad * std::cos(phi));
      grid[r * (n_cols + 1) + c] =
          b.add_vertex(p, rect_u(rect, static_cast<double>(c) / n_cols), rect_v(rect, v_fracs[r]),
                       part);
    }
  }
  for (int r = 0; r < n_lat; ++r)
    for (int c = 0; c < n_cols; ++c) {
      const int v00 = grid[r * (n_cols + 1) + c], v01 = grid[r * (n_cols + 1) + c + 1];
      const int v10 = grid[(r + 1) * (n_cols + 1) + c], v11 = grid[(r + 1) * (n_cols + 1) + c + 1];
      if (r == 0) {
        b.add_tri(v00, v11, v10, part);  // top cap, apex at the pole row
      } else if (r == n_lat - 1) {
        b.add_tri(v00, v01, v10, part);  // bottom cap
      } else {
        b.add_tri(v00, v01, v10, part);
        b.add_tri(v01, v11, v10, part);
      }
    }
}

Eigen::Vector3d hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, bl = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; bl = x;
  } else if (hp < 4) {
    g = x; bl = c;
  } else if (hp < 5) {
    r = x; bl = c;
  } else {
    r = c; bl = x;
  }
  const double m = v - c;
  return {r + m, g + m, bl + m};
}

int stripe_cell(double t, int freq, double phase) {
  return static_cast<int>(std::floor(t * 2.0 * freq + phase)) & 1;
}

void paint_rect(Tensor& tex, const AtlasRect& rect, const PartPaint& pp) {
  const int s = tex.shape().d[1];
  double* p = tex.ptr();
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(s) * s;
  const int x0 = rect.px0(s), x1 = rect.px1(s), y0 = rect.py0(s), y1 = rect.py1(s);
  const double w = x1 - x0, h = y1 - y0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double tu = (x - x0 + 0.5) / w, tv = (y - y0 + 0.5) / h;
      int cell;
      if (pp.pattern == PaintPattern::kStripes) {
        cell = pp.along_u ? stripe_cell(tu, pp.freq_u, pp.phase_u)
                          : stripe_cell(tv, pp.freq_v, pp.phase_v);
      } else {
        cell = (stripe_cell(tu, pp.freq_u, pp.phase_u) + stripe_cell(tv, pp.freq_v, pp.phase_v)) & 1;
      }
      const Eigen::Vector3d& col = cell ? pp.color_b : pp.color_a;
      for (int c = 0; c < 3; ++c) p[c * plane + y * s + x] = 2.0 * col[c] - 1.0;
    }
}

void fill_ellipse(Tensor& tex, const AtlasRect& rect, double cx, double cy, double ra, double rb,
                  const Eigen::Vector3d& col) {
  const int s = tex.shape().d[1];
  double* p = tex.ptr();
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(s) * s;
  const int x0 = rect.px0(s), x1 = rect.px1(s), y0 = rect.py0(s), y1 = rect.py1(s);
  const double w = x1 - x0, h = y1 - y0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double tu = (x - x0 + 0.5) / w, tv = (y - y0 + 0.5) / h;
      const double du = (tu - cx) / ra, dv = (tv - cy) / rb;
      if (du * du + dv * dv <= 1.0)
        for (int c = 0; c < 3; ++c) p[c * plane + y * s + x] = 2.0 * col[c] - 1.0;
    }
}

void paint_face(Tensor& tex, const AtlasRect& face, const PaintRecipe& rec) {
  PartPaint skin;
  skin.pattern = PaintPattern::kStripes;
  skin.freq_u = 1;
  skin.phase_u = 0.0;
  skin.color_a = rec.skin;
  skin.color_b = rec.skin;
  paint_rect(tex, face, skin);
  fill_ellipse(tex, face, 0.32, 0.40, 0.10, 0.07, rec.eye);
  fill_ellipse(tex, face, 0.68, 0.40, 0.10, 0.07, rec.eye);
  fill_ellipse(tex, face, 0.50, 0.72, 0.20, 0.08, rec.mouth);
}

// Draw order is part of the on-disk determinism contract; keep it stable.
PartPaint draw_part_paint(Rng& rng, bool force_stripes) {
  PartPaint pp;
  const double pat = rng.uniform();
  pp.pattern =
      force_stripes ? PaintPattern::kStripes
                    : (pat < 0.5 ? PaintPattern::kStripes : PaintPattern::kChecker);
  pp.along_u = rng.uniform() < 0.5;
  pp.freq_u = 2 + rng.uniform_int(5);
  pp.freq_v = 2 + rng.uniform_int(5);
  pp.phase_u = 0.15 + 0.7 * rng.uniform();
  pp.phase_v = 0.15 + 0.7 * rng.uniform();
  const double ha = rng.uniform();
  const double sa = 0.45 + 0.5 * rng.uniform();
  const double va = 0.45 + 0.4 * rng.uniform();
  const double hoff = 0.2 + 0.6 * rng.uniform();
  const double sb = 0.45 + 0.5 * rng.uniform();
  const double vb = va > 0.5 ? va - 0.35 : va + 0.35;  // max-channel gap >= 0.35
  pp.color_a = hsv_to_rgb(ha, sa, va);
  pp.color_b = hsv_to_rgb(ha + hoff, sb, vb);
  return pp;
}

PaintRecipe draw_recipe(Rng& rng) {
  PaintRecipe rec;
  for (int p = 0; p < kNumParts; ++p) rec.parts[p] = draw_part_paint(rng, p == 0);
  rec.skin = hsv_to_rgb(0.05 + 0.05 * rng.uniform(), 0.30 + 0.25 * rng.uniform(),
                        0.75 + 0.20 * rng.uniform());
  const double ev = 0.05 + 0.10 * rng.uniform();
  rec.eye = {ev, ev, ev};
  rec.mouth = hsv_to_rgb(0.985 + 0.03 * rng.uniform(), 0.60 + 0.30 * rng.uniform(),
                         0.45 + 0.25 * rng.uniform());
  return rec;
}

Tensor paint_texture(const PaintRecipe& rec) {
  Tensor tex = Tensor::zeros({3, kTextureSize, kTextureSize});
  const AtlasLayout& layout = AtlasLayout::standard();
  for (int p = 0; p < kNumParts; ++p) paint_rect(tex, layout.parts[p], rec.parts[p]);
  paint_face(tex, layout.face, rec);
  return tex;
}

SyntheticIdentity generate_identity_rng(Rng rng, const std::string& name) {
  SyntheticIdentity ident;
  ident.id = name;
  ident.mesh = make_mannequin();
  ident.recipe = draw_recipe(rng);
  ident.texture = quantize_image(paint_texture(ident.recipe));

  for (int k = 0; k < kViewsPerIdentity; ++k) {
    IdentityView view;
    view.view_id = k;
    view.camera.focal = 150.0;  // fills the 128x64 frame without clipping
    view.camera.azimuth = 2.0 * kPi * k / kViewsPerIdentity;
    view.camera.elevation = rng.uniform(-10.0, 10.0) * kPi / 180.0;
    view.pose = Pose(kNumParts, 0.0);
    view.pose[1] = rng.uniform(-10.0, 10.0) * kPi / 180.0;  // head
    for (int part = 2; part < kNumParts; ++part)
      view.pose[part] = rng.uniform(-20.0, 20.0) * kPi / 180.0;
    view.raster = rasterize(ident.mesh, view.pose, view.camera);
    view.image = render_texture(view.raster, ident.texture);
    view.parts = Tensor::zeros({1, view.raster.height, view.raster.width});
    double* pp = view.parts.ptr();
    for (int64_t p = 0; p < view.raster.pixels(); ++p) pp[p] = view.raster.part[p] + 1;
    ident.views.push_back(std::move(view));
  }
  return ident;
}

std::string identity_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "id_%04d", index);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  require(out.good(), "cannot open for writing: " + path.string());
  out << text;
  require(out.good(), "write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Mesh make_mannequin() {
  MeshBuilder b;
  const AtlasLayout& layout = AtlasLayout::standard();
  b.mesh.part_names = {"torso", "head", "arm_left", "arm_right", "leg_left", "leg_right"};
  b.mesh.pivots = {{0, 0, 0},        {0, 0.575, 0}, {-0.19, 0.53, 0},
                   {0.19, 0.53, 0},  {-0.10, 0, 0}, {0.10, 0, 0}};
  b.mesh.pose_axes = {{0, 1, 0}, {0, 0, 1}, {0, 0, 1}, {0, 0, 1}, {1, 0, 0}, {1, 0, 0}};

  // The head and arms map into subrects of their atlas allocation so their
  // texel density roughly matches their on-screen footprint; otherwise the
  // union-of-views visibility invariant cannot hold. The painted pattern
  // still fills the whole allocation.
  const AtlasRect head_uv = {75.0 / 128, 10.0 / 128, 119.0 / 128, 54.0 / 128};
  auto arm_uv = [&](int part) {
    const AtlasRect& r = layout.parts[part];
    return AtlasRect{r.u0 + 6.0 / 128, r.v0 + 8.0 / 128, r.u0 + 26.0 / 128, r.v0 + 56.0 / 128};
  };

  add_tube(b, 0, {0, 0.55, 0}, {0, -0.02, 0}, 0.16, 0.095, 16, 3, layout.parts[0]);
  add_sphere(b, 1, {0, 0.69, 0}, 0.13, 12, 6, {0.0, 0.06, 0.25, 0.45, 0.65, 0.84, 1.0}, head_uv);
  add_tube(b, 2, {-0.19, 0.51, 0}, {-0.30, 0.10, 0}, 0.048, 0.048, 12, 3, arm_uv(2));
  add_tube(b, 3, {0.19, 0.51, 0}, {0.30, 0.10, 0}, 0.048, 0.048, 12, 3, arm_uv(3));
  add_tube(b, 4, {-0.10, -0.02, 0}, {-0.145, -0.85, 0}, 0.068, 0.068, 12, 3, layout.parts[4]);
  add_tube(b, 5, {0.10, -0.02, 0}, {0.145, -0.85, 0}, 0.068, 0.068, 12, 3, layout.parts[5]);
  return std::move(b.mesh);
}

SyntheticIdentity generate_identity(uint64_t seed, const std::string& name) {
  return generate_identity_rng(Rng(seed), name.empty() ? "seed_" + std::to_string(seed) : name);
}

void render_dataset(int n_identities, uint64_t seed, const std::string& out_dir) {
  require(n_identities >= 1, "need at least one identity");
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  require(!ec && fs::is_directory(root), "cannot create output directory: " + out_dir);

  Rng base(seed);
  const int n_test = std::max(1, n_identities / 5);
  json ids = json::array(), train = json::array(), test = json::array();

  for (int i = 0; i < n_identities; ++i) {
    const std::string name = identity_name(i);
    SyntheticIdentity ident = generate_identity_rng(base.fork(static_cast<uint64_t>(i)), name);
    const fs::path dir = root / name;
    fs::create_directories(dir / "views");
    write_png_rgb((dir / "texture_gt.png").string(), ident.texture);
    write_text(dir / "mesh.json", mesh_to_json(ident.mesh));
    for (const IdentityView& view : ident.views) {
      const fs::path vdir = dir / "views" / std::to_string(view.view_id);
      fs::create_directories(vdir);
      write_png_rgb((vdir / "image.png").string(), view.image);
      std::vector<uint8_t> labels(static_cast<size_t>(view.raster.pixels()));
      for (int64_t p = 0; p < view.raster.pixels(); ++p)
        labels[p] = static_cast<uint8_t>(view.raster.part[p] + 1);
      write_png_gray((vdir / "parts.png").string(), labels, view.raster.height,
                     view.raster.width);
      write_text(vdir / "camera.json", view_to_json(view.camera, view.pose));
    }
    ids.push_back(name);
    (i < n_identities - n_test ? train : test).push_back(name);
  }

  json manifest;
  manifest["name"] = "uvtex-synthetic";
  manifest["seed"] = seed;
  manifest["n_identities"] = n_identities;
  manifest["views_per_identity"] = kViewsPerIdentity;
  manifest["image_height"] = kViewHeight;
  manifest["image_width"] = kViewWidth;
  manifest["texture_size"] = kTextureSize;
  manifest["parts"] = {"torso", "head", "arm_left", "arm_right", "leg_left", "leg_right"};
  manifest["ids"] = ids;
  manifest["train_ids"] = train;
  manifest["test_ids"] = test;
  write_text(root / "dataset.json", manifest.dump(2) + "\n");
}

FaceBank face_bank(uint64_t seed, int n) {
  require(n >= 1, "face bank needs at least one entry");
  FaceBank bank;
  Rng base(seed);
  for (int i = 0; i < n; ++i) {
    Rng rng = base.fork((1ull << 32) + static_cast<uint64_t>(i));
    bank.textures.push_back(quantize_image(paint_texture(draw_recipe(rng))));
  }
  return bank;
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  const json manifest = json::parse(read_text(root / "dataset.json"));
  Dataset ds;
  ds.root = dir;
  ds.seed = manifest.at("seed").get<uint64_t>();
  ds.texture_size = manifest.at("texture_size").get<int>();
  const int n_views = manifest.at("views_per_identity").get<int>();

  const auto& ids = manifest.at("ids");
  for (const auto& id_json : ids) {
    const std::string name = id_json.get<std::string>();
    const fs::path idir = root / name;
    LoadedIdentity ident;
    ident.id = name;
    ident.texture_gt = read_png_rgb((idir / "texture_gt.png").string());
    ident.mesh = mesh_from_json(read_text(idir / "mesh.json"));
    for (int k = 0; k < n_views; ++k) {
      const fs::path vdir = idir / "views" / std::to_string(k);
      LoadedView view;
      view.view_id = k;
      view_from_json(read_text(vdir / "camera.json"), &view.camera, &view.pose);
      view.image = read_png_rgb((vdir / "image.png").string());
      int h = 0, w = 0;
      const std::vector<uint8_t> labels = read_png_gray((vdir / "parts.png").string(), &h, &w);
      require(h == view.camera.height && w == view.camera.width,
              "parts.png size mismatch in " + vdir.string());
      view.parts = Tensor::zeros({1, h, w});
      double* pp = view.parts.ptr();
      for (int64_t p = 0; p < static_cast<int64_t>(h) * w; ++p) pp[p] = labels[p];
      view.raster = rasterize(ident.mesh, view.pose, view.camera);
      ident.views.push_back(std::move(view));
    }
    ds.identities.push_back(std::move(ident));
  }

  auto index_of = [&](const std::string& name) {
    for (size_t i = 0; i < ds.identities.size(); ++i)
      if (ds.identities[i].id == name) return static_cast<int>(i);
    throw ContractViolation("manifest split names unknown identity: " + name);
  };
  for (const auto& t : manifest.at("train_ids")) ds.train_index.push_back(index_of(t));
  for (const auto& t : manifest.at("test_ids")) ds.test_index.push_back(index_of(t));
  return ds;
}

Tensor uv_mapped_mask(const Mesh& mesh, int tex_size) {
  Tensor mask = Tensor::zeros({1, tex_size, tex_size});
  double* mp = mask.ptr();
  const double scale = tex_size - 1;
  for (const auto& tri : mesh.triangles) {
    Eigen::Vector2d p0 = mesh.uvs[tri[0]] * scale;
    Eigen::Vector2d p1 = mesh.uvs[tri[1]] * scale;
    Eigen::Vector2d p2 = mesh.uvs[tri[2]] * scale;
    const double area = (p1.x() - p0.x()) * (p2.y() - p0.y()) - (p1.y() - p0.y()) * (p2.x() - p0.x());
    if (std::fabs(area) < 1e-12) continue;
    const double sign = area > 0 ? 1.0 : -1.0;
    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({p0.x(), p1.x(), p2.x()}))));
    const int x1 = std::min(tex_size - 1,
                            static_cast<int>(std::floor(std::max({p0.x(), p1.x(), p2.x()}))));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({p0.y(), p1.y(), p2.y()}))));
    const int y1 = std::min(tex_size - 1,
                            static_cast<int>(std::floor(std::max({p0.y(), p1.y(), p2.y()}))));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double w0 =
            sign * ((p1.x() - x) * (p2.y() - y) - (p1.y() - y) * (p2.x() - x));
        const double w1 =
            sign * ((p2.x() - x) * (p0.y() - y) - (p2.y() - y) * (p0.x() - x));
        const double w2 =
            sign * ((p0.x() - x) * (p1.y() - y) - (p0.y() - y) * (p1.x() - x));
        if (w0 >= -1e-9 && w1 >= -1e-9 && w2 >= -1e-9) mp[y * tex_size + x] = 1.0;
      }
  }
  return mask;
}

Tensor visible_texel_mask(const RasterMap& raster, int tex_size) {
  Tensor mask = Tensor::zeros({1, tex_size, tex_size});
  double* mp = mask.ptr();
  for (int64_t p = 0; p < raster.pixels(); ++p) {
    if (!raster.covered(p)) continue;
    // Same index arithmetic as the texture lookup in the renderer.
    const double pu = std::min(std::max(raster.u[p], 0.0), 1.0) * (tex_size - 1);
    const double pv = std::min(std::max(raster.v[p], 0.0), 1.0) * (tex_size - 1);
    const int x0 = std::min(static_cast<int>(pu), tex_size - 2);
    const int y0 = std::min(static_cast<int>(pv), tex_size - 2);
    mp[y0 * tex_size + x0] = 1.0;
    mp[y0 * tex_size + x0 + 1] = 1.0;
    mp[(y0 + 1) * tex_size + x0] = 1.0;
    mp[(y0 + 1) * tex_size + x0 + 1] = 1.0;
  }
  return mask;
}

double quantize_unit(double v) {
  v = std::min(1.0, std::max(-1.0, v));
  const long byte = std::lround((v + 1.0) * 0.5 * 255.0);
  return static_cast<double>(byte) / 255.0 * 2.0 - 1.0;
}

Tensor quantize_image(const Tensor& t) {
  Tensor out = Tensor::zeros(t.shape());
  const double* src = t.ptr();
  double* dst = out.ptr();
  for (int64_t i = 0; i < t.shape().numel(); ++i) dst[i] = quantize_unit(src[i]);
  return out;
}

}  // namespace uvtex

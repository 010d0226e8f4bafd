#include "uvtex/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "uvtex/checkpoint.hpp"
#include "uvtex/image_io.hpp"
#include "uvtex/losses.hpp"
#include "uvtex/nn_ops.hpp"
#include "uvtex/renderer.hpp"

namespace fs = std::filesystem;

namespace uvtex {
namespace {

// The face-structure prior is a fixed asset shared by every run: ablation
// rows must differ only in their flags, never in the bank they regularize
// against.
constexpr uint64_t kFaceBankSeed = 90017;

uint64_t derive_seed(uint64_t seed, const char* role) {
  return fnv1a64(std::to_string(seed) + "/" + role);
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  require(f.good(), "cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  require(f.good(), "cannot write " + p.string());
  f << s;
  require(f.good(), "short write on " + p.string());
}

// (C,H,W) tensors -> (B,C,H,W).
Tensor stack3(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "stack3: empty batch");
  const Shape& s = xs[0].shape();
  require(s.rank == 3, "stack3: rank-3 inputs required");
  Tensor out = Tensor::zeros({static_cast<int>(xs.size()), s[0], s[1], s[2]});
  const int64_t n = s.numel();
  for (size_t b = 0; b < xs.size(); ++b) {
    require(xs[b].shape() == s, "stack3: mismatched shapes");
    out.data().segment(static_cast<int64_t>(b) * n, n) = xs[b].data();
  }
  return out;
}

// Raster part channel -> (1,H,W) labels (0 background, 1..6 part).
Tensor raster_labels(const RasterMap& r) {
  Tensor t = Tensor::zeros({1, r.height, r.width});
  for (int64_t p = 0; p < r.pixels(); ++p) t.data()[p] = static_cast<double>(r.part[p]) + 1.0;
  return t;
}

Camera jittered_camera(const Camera& c, double deg, Rng& rng) {
  constexpr double kPi = 3.14159265358979323846;
  Camera j = c;
  const double amp = deg * kPi / 180.0;
  j.azimuth += rng.uniform(-amp, amp);
  j.elevation += rng.uniform(-amp, amp);
  return j;
}

ParamStore joint_store(const Bundle& b) {
  ParamStore joint;
  for (const auto& [n, t] : b.model->params().params()) joint.add_param(n, t);
  for (const auto& [n, t] : b.confidence->params().params()) joint.add_param(n, t);
  return joint;
}

std::vector<Tensor> face_bank_patches() {
  const FaceBank bank = face_bank(kFaceBankSeed);
  std::vector<Tensor> patches;
  patches.reserve(bank.textures.size());
  for (const Tensor& t : bank.textures) patches.push_back(face_crop(t));
  return patches;
}

void write_val_render(const Bundle& b, const LoadedView& view, const fs::path& png) {
  const Tensor tex = b.texture_fn()(view.image, view.parts);
  write_png_rgb(png.string(), quantize_image(tex));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---- RunConfig --------------------------------------------------------

std::string RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["dataset_dir"] = dataset_dir;
  j["out_dir"] = out_dir;
  j["epochs"] = epochs;
  j["batch"] = batch;
  j["max_steps"] = max_steps;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["width"] = width;
  j["multi_view"] = multi_view;
  j["use_url"] = use_url;
  j["use_cycle"] = use_cycle;
  j["use_refine"] = use_refine;
  j["conv_refine"] = conv_refine;
  j["cycle_stopgrad"] = cycle_stopgrad;
  j["camera_jitter_deg"] = camera_jitter_deg;
  j["val_every"] = val_every;
  return j.dump(2);
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ContractViolation(std::string("config: invalid JSON: ") + e.what());
  }
  require(j.is_object(), "config: expected a JSON object");
  RunConfig c;
  static const std::vector<std::string> known = {
      "seed",        "dataset_dir", "out_dir",     "epochs",         "batch",
      "max_steps",   "lr",          "beta1",       "beta2",          "width",
      "multi_view",  "use_url",     "use_cycle",   "use_refine",     "conv_refine",
      "cycle_stopgrad", "camera_jitter_deg", "val_every"};
  for (const auto& item : j.items())
    require(std::find(known.begin(), known.end(), item.key()) != known.end(),
            "config: unknown key '" + item.key() + "'");
  c.seed = j.value("seed", c.seed);
  c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.width = j.value("width", c.width);
  c.multi_view = j.value("multi_view", c.multi_view);
  c.use_url = j.value("use_url", c.use_url);
  c.use_cycle = j.value("use_cycle", c.use_cycle);
  c.use_refine = j.value("use_refine", c.use_refine);
  c.conv_refine = j.value("conv_refine", c.conv_refine);
  c.cycle_stopgrad = j.value("cycle_stopgrad", c.cycle_stopgrad);
  c.camera_jitter_deg = j.value("camera_jitter_deg", c.camera_jitter_deg);
  c.val_every = j.value("val_every", c.val_every);
  require(c.epochs >= 1, "config: epochs must be >= 1");
  require(c.batch >= 1, "config: batch must be >= 1");
  require(c.width >= 4, "config: width must be >= 4");
  require(c.lr > 0, "config: lr must be positive");
  require(c.camera_jitter_deg >= 0, "config: camera_jitter_deg must be >= 0");
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  return from_json_text(read_text(path));
}

uint64_t RunConfig::fingerprint() const { return fnv1a64(to_json()); }

// ---- Bundle -----------------------------------------------------------

Bundle Bundle::fresh(const RunConfig& cfg) {
  Bundle b;
  b.cfg = cfg;
  ModelConfig mc;
  mc.width = cfg.width;
  mc.tex_size = kTextureSize;
  mc.in_h = kViewHeight;
  mc.in_w = kViewWidth;
  mc.use_refine = cfg.use_refine;
  mc.conv_refine = cfg.conv_refine;
  b.model = std::make_unique<TextureModel>(mc, derive_seed(cfg.seed, "model"));
  b.confidence = std::make_unique<ConfidenceNet>(cfg.width, derive_seed(cfg.seed, "confidence"),
                                                 kViewHeight, kViewWidth);
  return b;
}

Bundle Bundle::from_checkpoint(const std::string& path) {
  const LoadedCheckpoint ck = load_checkpoint(path);
  RunConfig cfg = RunConfig::from_json_text(ck.meta.config_json);
  require(ck.meta.config_fingerprint == cfg.fingerprint(),
          "checkpoint: config fingerprint does not match the embedded config");
  Bundle b = fresh(cfg);
  restore_store(ck, b.model->params());
  restore_store(ck, b.confidence->params());
  return b;
}

TextureFn Bundle::texture_fn() const {
  TextureModel* m = model.get();
  return [m](const Tensor& image, const Tensor& parts) {
    const Shape& si = image.shape();
    const Shape& sp = parts.shape();
    require(si.rank == 3 && sp.rank == 3, "texture_fn: (3,H,W) image and (1,H,W) parts required");
    Tensor i4 = reshape(image, {1, si[0], si[1], si[2]});
    Tensor p4 = reshape(parts, {1, sp[0], sp[1], sp[2]});
    TextureModel::Outputs out = m->forward(i4, p4, /*training=*/false);
    const int s = m->config().tex_size;
    return reshape(out.final_out.fused, {3, s, s});
  };
}

// ---- training ---------------------------------------------------------

TrainResult train_run(const RunConfig& cfg) {
  require(!cfg.dataset_dir.empty(), "train: dataset_dir is required");
  const Dataset ds = load_dataset(cfg.dataset_dir);
  require(!ds.train_index.empty(), "train: dataset has no training identities");

  const fs::path out(cfg.out_dir);
  fs::create_directories(out / "val");
  write_text(out / "config.json", cfg.to_json() + "\n");

  Bundle b = Bundle::fresh(cfg);
  ParamStore joint = joint_store(b);
  Adam opt(joint, AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});

  const FeatureExtractor phi;
  const std::vector<Tensor> bank_patches = face_bank_patches();

  std::vector<std::pair<int, int>> train_views;  // (identity index, view)
  for (int idx : ds.train_index)
    for (int v = 0; v < static_cast<int>(ds.identities[idx].views.size()); ++v)
      train_views.push_back({idx, v});
  const int64_t per_epoch =
      (static_cast<int64_t>(train_views.size()) + cfg.batch - 1) / cfg.batch;
  const int64_t total_steps =
      cfg.max_steps > 0 ? cfg.max_steps : static_cast<int64_t>(cfg.epochs) * per_epoch;
  require(total_steps > 0, "train: empty schedule");

  Rng rng(derive_seed(cfg.seed, "sampler"));
  const std::string log_path = (out / "loss_log.csv").string();
  std::ofstream log(log_path, std::ios::binary);
  require(log.good(), "cannot write " + log_path);
  log << "step,total,base_sv,base_nv,cycle,url,inter_sv,inter_nv,w_int\n";
  log.precision(10);

  TrainResult res;
  for (int64_t step = 1; step <= total_steps; ++step) {
    const int B = cfg.batch;
    std::vector<Tensor> in_img, in_lab, nv_img, nv_lab, in_rlab, nv_rlab;
    std::vector<RasterMap> jit;
    jit.reserve(2 * static_cast<size_t>(B));
    ViewBatch in_b, nv_b;
    for (int s = 0; s < B; ++s) {
      const auto [ii, vi] = train_views[rng.uniform_int(static_cast<int>(train_views.size()))];
      const LoadedIdentity& id = ds.identities[ii];
      const LoadedView& v = id.views[vi];
      in_img.push_back(v.image);
      in_lab.push_back(v.parts);
      if (cfg.camera_jitter_deg > 0) {
        jit.push_back(rasterize(id.mesh, v.pose, jittered_camera(v.camera, cfg.camera_jitter_deg, rng)));
        in_b.rasters.push_back(&jit.back());
        in_rlab.push_back(raster_labels(jit.back()));
      } else {
        in_b.rasters.push_back(&v.raster);
      }
      if (cfg.multi_view) {
        int wv = rng.uniform_int(static_cast<int>(id.views.size()) - 1);
        if (wv >= vi) ++wv;
        const LoadedView& w = id.views[wv];
        nv_img.push_back(w.image);
        nv_lab.push_back(w.parts);
        if (cfg.camera_jitter_deg > 0) {
          jit.push_back(
              rasterize(id.mesh, w.pose, jittered_camera(w.camera, cfg.camera_jitter_deg, rng)));
          nv_b.rasters.push_back(&jit.back());
          nv_rlab.push_back(raster_labels(jit.back()));
        } else {
          nv_b.rasters.push_back(&w.raster);
        }
      }
    }
    in_b.images = stack3(in_img);
    const Tensor in_lab_t = stack3(in_lab);
    in_b.masks = make_part_masks(in_lab_t, kNumParts);
    in_b.render_masks =
        cfg.camera_jitter_deg > 0 ? make_part_masks(stack3(in_rlab), kNumParts) : in_b.masks;
    Tensor nv_lab_t;
    if (cfg.multi_view) {
      nv_b.images = stack3(nv_img);
      nv_lab_t = stack3(nv_lab);
      nv_b.masks = make_part_masks(nv_lab_t, kNumParts);
      nv_b.render_masks =
          cfg.camera_jitter_deg > 0 ? make_part_masks(stack3(nv_rlab), kNumParts) : nv_b.masks;
    }

    LossBreakdown bd;
    try {
      Tape tape;
      TapeScope scope(tape);
      TextureModel::Outputs mout = b.model->forward(in_b.images, in_lab_t, /*training=*/true);
      ModelOutputsForLoss mo;
      mo.texture_final = mout.final_out.fused;
      mo.texture_intermediate = mout.intermediate.fused;
      if (cfg.use_url) mo.sigma = b.confidence->forward(in_b.images, /*training=*/true);
      if (cfg.multi_view && cfg.use_cycle) {
        const Tensor rerender = render_texture(nv_b.rasters, mo.texture_final);
        if (cfg.cycle_stopgrad) {
          TextureModel::Outputs second = b.model->forward(rerender.detach_copy(), nv_lab_t, true);
          mo.texture_second = second.final_out.fused.detach_copy();
        } else {
          TextureModel::Outputs second = b.model->forward(rerender, nv_lab_t, true);
          mo.texture_second = second.final_out.fused;
        }
      }
      TotalLossConfig tl;
      tl.multi_view = cfg.multi_view;
      tl.use_cycle = cfg.multi_view && cfg.use_cycle;
      tl.use_url = cfg.use_url;
      // Without refinement the two branches share handles; supervising the
      // "intermediate" would silently double-weight the single branch.
      tl.intermediate = cfg.use_refine;
      tl.step = step - 1;
      tl.total_steps = total_steps;
      bd = total_loss(in_b, cfg.multi_view ? &nv_b : nullptr, mo, bank_patches, phi, tl);
      backward(bd.total_tensor);
    } catch (const ContractViolation& e) {
      throw ContractViolation("train step " + std::to_string(step) + ": " + e.what());
    }
    opt.step();
    joint.zero_grads();

    log << step << ',' << bd.total << ',' << bd.base_sv << ',' << bd.base_nv << ',' << bd.cycle
        << ',' << bd.url << ',' << bd.inter_sv << ',' << bd.inter_nv << ',' << bd.w_int << '\n';
    res.total_history.push_back(bd.total);

    if (cfg.val_every > 0 &&
        (step == 1 || step == total_steps || step % cfg.val_every == 0)) {
      char name[32];
      std::snprintf(name, sizeof(name), "step_%06lld.png", static_cast<long long>(step));
      write_val_render(b, ds.identities[ds.train_index[0]].views[0], out / "val" / name);
    }
  }
  log.close();

  CheckpointMeta meta;
  meta.step = total_steps;
  meta.config_fingerprint = cfg.fingerprint();
  meta.config_json = cfg.to_json();
  const std::string ckpt = (out / "ckpt.txrf").string();
  save_checkpoint(ckpt, {&b.model->params(), &b.confidence->params()}, &opt, meta);

  res.steps = static_cast<int>(total_steps);
  res.checkpoint_path = ckpt;
  res.log_path = log_path;
  return res;
}

// ---- evaluation -------------------------------------------------------

MetricReport eval_checkpoint(const std::string& ckpt_path, const std::string& dataset_dir,
                             const std::string& split, const std::string& out_dir) {
  const Bundle b = Bundle::from_checkpoint(ckpt_path);
  const Dataset ds = load_dataset(dataset_dir);
  std::vector<int> indices;
  if (split == "train") {
    indices = ds.train_index;
  } else if (split == "test") {
    indices = ds.test_index;
  } else if (split == "all") {
    indices.resize(ds.identities.size());
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
  } else {
    throw ContractViolation("eval: unknown split '" + split + "' (train|test|all)");
  }
  require(!indices.empty(), "eval: split '" + split + "' is empty");
  const FeatureExtractor phi;
  MetricReport report = evaluate_sv_nv(b.texture_fn(), ds, indices, phi, b.cfg.fingerprint());
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "report.json", report.to_json() + "\n");
    write_text(fs::path(out_dir) / "report.csv", report.to_csv());
  }
  return report;
}

// ---- inference --------------------------------------------------------

std::vector<std::string> infer_view(const std::string& ckpt_path, const std::string& view_dir,
                                    const std::string& out_dir) {
  const fs::path vp(view_dir);
  const fs::path id_dir = vp.parent_path().parent_path();
  require(!id_dir.empty() && vp.parent_path().filename() == "views",
          "infer: expected a <id>/views/<k> directory, got " + view_dir);
  int view_k = -1;
  try {
    view_k = std::stoi(vp.filename().string());
  } catch (const std::exception&) {
    throw ContractViolation("infer: view directory name is not an index: " + view_dir);
  }

  const Bundle b = Bundle::from_checkpoint(ckpt_path);
  const Dataset ds = load_dataset(id_dir.parent_path().string());
  const LoadedIdentity* ident = nullptr;
  for (const LoadedIdentity& id : ds.identities)
    if (id.id == id_dir.filename().string()) ident = &id;
  require(ident != nullptr, "infer: identity not found: " + id_dir.filename().string());
  require(view_k >= 0 && view_k < static_cast<int>(ident->views.size()),
          "infer: view index out of range: " + std::to_string(view_k));
  const LoadedView& v = ident->views[view_k];

  Tensor i4 = reshape(v.image, {1, 3, v.camera.height, v.camera.width});
  Tensor p4 = reshape(v.parts, {1, 1, v.camera.height, v.camera.width});
  TextureModel::Outputs mout = b.model->forward(i4, p4, /*training=*/false);
  const int s = b.model->config().tex_size;
  const Tensor texq = quantize_image(reshape(mout.final_out.fused, {3, s, s}));

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  std::vector<std::string> paths;

  paths.push_back((out / "texture.png").string());
  write_png_rgb(paths.back(), texq);

  std::vector<uint8_t> mask_bytes(static_cast<size_t>(s) * s);
  const Tensor& mask = mout.final_out.mask;
  for (int64_t i = 0; i < mask.numel(); ++i) {
    const double m = std::clamp(mask.data()[i], 0.0, 1.0);
    mask_bytes[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(m * 255.0));
  }
  paths.push_back((out / "fusion_mask.png").string());
  write_png_gray(paths.back(), mask_bytes, s, s);

  paths.push_back((out / "sv_render.png").string());
  write_png_rgb(paths.back(), quantize_image(render_texture(v.raster, texq)));

  constexpr double kPi = 3.14159265358979323846;
  const Pose neutral(v.pose.size(), 0.0);
  for (int j = 0; j < kViewsPerIdentity; ++j) {
    Camera cam = v.camera;
    cam.azimuth = 2.0 * kPi * j / kViewsPerIdentity;
    cam.elevation = 0.0;
    const RasterMap r = rasterize(ident->mesh, neutral, cam);
    char name[32];
    std::snprintf(name, sizeof(name), "nv_render_%d.png", j);
    paths.push_back((out / name).string());
    write_png_rgb(paths.back(), quantize_image(render_texture(r, texq)));
  }
  return paths;
}

// ---- offset visualization ---------------------------------------------

std::vector<std::vector<std::array<double, 2>>> offsets_figure(
    const std::string& ckpt_path, const std::string& image_path,
    const std::vector<std::array<double, 2>>& uv_points, const std::string& out_png) {
  require(!uv_points.empty(), "offsets: at least one uv point required");
  const Bundle b = Bundle::from_checkpoint(ckpt_path);
  require(b.cfg.use_refine && !b.cfg.conv_refine,
          "offsets: checkpoint was trained without deformable offsets");

  const Tensor img = read_png_rgb(image_path);
  const int h = img.shape()[1], w = img.shape()[2];
  const fs::path parts_path = fs::path(image_path).parent_path() / "parts.png";
  int ph = 0, pw = 0;
  const std::vector<uint8_t> parts_bytes = read_png_gray(parts_path.string(), &ph, &pw);
  require(ph == h && pw == w, "offsets: parts.png does not match the image size");
  Tensor parts = Tensor::zeros({1, 1, h, w});
  for (int64_t i = 0; i < parts.numel(); ++i)
    parts.data()[i] = static_cast<double>(parts_bytes[static_cast<size_t>(i)]);

  TextureModel::Outputs mout =
      b.model->forward(reshape(img, {1, 3, h, w}), parts, /*training=*/false);
  const Tensor off_w = b.model->params().find("refine/offset/w");
  const Tensor off_b = b.model->params().find("refine/offset/b");
  require(off_w.defined() && off_b.defined(), "offsets: offset conv parameters missing");
  const Tensor offsets = flow_to_offsets(mout.intermediate.flow, h, w, off_w, off_b);
  const int s = offsets.shape()[2];

  // One color per uv point, mapped into the [-1,1] image range.
  static const double palette[8][3] = {{1, 0, 0}, {0, 1, 0}, {0.2, 0.4, 1}, {1, 1, 0},
                                       {1, 0, 1}, {0, 1, 1}, {1, 1, 1},    {1, 0.5, 0}};
  Tensor annotated = img.detach_copy();
  std::vector<std::vector<std::array<double, 2>>> marks;
  for (size_t pi = 0; pi < uv_points.size(); ++pi) {
    const double u = uv_points[pi][0], vv = uv_points[pi][1];
    require(u >= 0 && u <= 1 && vv >= 0 && vv <= 1, "offsets: uv points must lie in [0,1]^2");
    const int jx = static_cast<int>(std::lround(u * (s - 1)));
    const int iy = static_cast<int>(std::lround(vv * (s - 1)));
    const double base_y = decoupled_base_coord(iy, s, h);
    const double base_x = decoupled_base_coord(jx, s, w);
    std::vector<std::array<double, 2>> taps;
    for (int k = 0; k < 9; ++k) {
      const int dy = k / 3 - 1, dx = k % 3 - 1;
      double y = base_y + dy + offsets.at(0, 2 * k, iy, jx);
      double x = base_x + dx + offsets.at(0, 2 * k + 1, iy, jx);
      y = std::clamp(y, 0.0, static_cast<double>(h - 1));
      x = std::clamp(x, 0.0, static_cast<double>(w - 1));
      taps.push_back({y, x});
      const int cy = static_cast<int>(std::lround(y));
      const int cx = static_cast<int>(std::lround(x));
      static const int cross[5][2] = {{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}};
      for (const auto& d : cross) {
        const int my = std::clamp(cy + d[0], 0, h - 1);
        const int mx = std::clamp(cx + d[1], 0, w - 1);
        for (int c = 0; c < 3; ++c) annotated.at(0, c, my, mx) = palette[pi % 8][c] * 2.0 - 1.0;
      }
    }
    marks.push_back(std::move(taps));
  }
  if (!fs::path(out_png).parent_path().empty())
    fs::create_directories(fs::path(out_png).parent_path());
  write_png_rgb(out_png, reshape(annotated, {3, h, w}));
  return marks;
}

// ---- ablation table ----------------------------------------------------

const std::vector<std::string>& ablation_rows() {
  static const std::vector<std::string> rows = {"BL", "BL+ConvRefine", "BL+DeformRefine",
                                                "BL+URL", "BL+Cycle"};
  return rows;
}

RunConfig ablation_row_config(const RunConfig& base, const std::string& row) {
  RunConfig c = base;
  c.multi_view = true;
  c.use_refine = false;
  c.conv_refine = false;
  c.use_url = false;
  c.use_cycle = false;
  if (row == "BL") {
  } else if (row == "BL+ConvRefine") {
    c.use_refine = true;
    c.conv_refine = true;
  } else if (row == "BL+DeformRefine") {
    c.use_refine = true;
  } else if (row == "BL+URL") {
    c.use_url = true;
  } else if (row == "BL+Cycle") {
    c.use_cycle = true;
  } else {
    throw ContractViolation("ablate: unknown row '" + row + "'");
  }
  return c;
}

namespace {

void metric_columns(const MetricReport& r, double cols[6]) {
  cols[0] = r.ssim_sv;
  cols[1] = r.ssim_nv;
  cols[2] = r.pdist_sv;
  cols[3] = r.pdist_nv;
  cols[4] = r.cossim_sv;
  cols[5] = r.cossim_nv;
}

}  // namespace

std::vector<AblationCell> run_ablations(const RunConfig& base, const std::vector<uint64_t>& seeds,
                                        const std::string& out_dir) {
  require(!seeds.empty(), "ablate: at least one seed required");
  fs::create_directories(out_dir);
  std::vector<AblationCell> cells;
  for (const std::string& row : ablation_rows()) {
    std::vector<const MetricReport*> row_reports;
    for (uint64_t seed : seeds) {
      RunConfig cfg = ablation_row_config(base, row);
      cfg.seed = seed;
      cfg.out_dir = (fs::path(out_dir) / row / ("seed_" + std::to_string(seed))).string();
      const TrainResult tr = train_run(cfg);
      MetricReport rep = eval_checkpoint(tr.checkpoint_path, base.dataset_dir, "test", cfg.out_dir);
      cells.push_back({row, seed, std::move(rep)});
    }
    AblationCell mean;
    mean.row = row;
    mean.seed = 0;
    double acc[6] = {0, 0, 0, 0, 0, 0};
    int n = 0;
    for (const AblationCell& c : cells)
      if (c.row == row && c.seed != 0) {
        double cols[6];
        metric_columns(c.report, cols);
        for (int i = 0; i < 6; ++i) acc[i] += cols[i];
        ++n;
      }
    mean.report.ssim_sv = acc[0] / n;
    mean.report.ssim_nv = acc[1] / n;
    mean.report.pdist_sv = acc[2] / n;
    mean.report.pdist_nv = acc[3] / n;
    mean.report.cossim_sv = acc[4] / n;
    mean.report.cossim_nv = acc[5] / n;
    cells.push_back(std::move(mean));
  }

  std::ostringstream csv;
  csv << "row,seed,ssim_sv,ssim_nv,pdist_sv,pdist_nv,cossim_sv,cossim_nv,fingerprint\n";
  for (const AblationCell& c : cells) {
    double cols[6];
    metric_columns(c.report, cols);
    csv << c.row << ',' << (c.seed == 0 ? std::string("mean") : std::to_string(c.seed));
    for (double v : cols) csv << ',' << format_double(v);
    // Mean rows aggregate several configs and carry no fingerprint (0).
    csv << ',' << c.report.config_fingerprint << '\n';
  }
  write_text(fs::path(out_dir) / "ablate.csv", csv.str());

  std::ostringstream md;
  md << "| Row | ssim_sv | ssim_nv | pdist_sv | pdist_nv | cossim_sv | cossim_nv |\n";
  md << "|---|---|---|---|---|---|---|\n";
  for (const AblationCell& c : cells) {
    if (c.seed != 0) continue;
    double cols[6];
    metric_columns(c.report, cols);
    md << "| " << c.row;
    for (double v : cols) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), " | %.4f", v);
      md << buf;
    }
    md << " |\n";
  }
  md << "\nBase config fingerprint: " << base.fingerprint() << "\n";
  write_text(fs::path(out_dir) / "ablate.md", md.str());
  return cells;
}

std::vector<AblationCell> parse_ablation_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "ablate csv: empty file");
  require(line == "row,seed,ssim_sv,ssim_nv,pdist_sv,pdist_nv,cossim_sv,cossim_nv,fingerprint",
          "ablate csv: unexpected header: " + line);
  std::vector<AblationCell> cells;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    require(fields.size() == 9, "ablate csv: malformed line: " + line);
    AblationCell c;
    c.row = fields[0];
    c.seed = fields[1] == "mean" ? 0 : std::stoull(fields[1]);
    c.report.ssim_sv = std::stod(fields[2]);
    c.report.ssim_nv = std::stod(fields[3]);
    c.report.pdist_sv = std::stod(fields[4]);
    c.report.pdist_nv = std::stod(fields[5]);
    c.report.cossim_sv = std::stod(fields[6]);
    c.report.cossim_nv = std::stod(fields[7]);
    c.report.config_fingerprint = std::stoull(fields[8]);
    cells.push_back(std::move(c));
  }
  return cells;
}

}  // namespace uvtex

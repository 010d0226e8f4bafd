#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uvtex/checkpoint.hpp"
#include "uvtex/harness.hpp"
#include "uvtex/image_io.hpp"
#include "uvtex/nn_ops.hpp"
#include "uvtex/renderer.hpp"
#include "uvtex/synth_data.hpp"

using namespace uvtex;
namespace fs = std::filesystem;

namespace {

const fs::path& work_root() {
  static const fs::path p = [] {
    fs::path q = fs::temp_directory_path() / "uvtex_test_harness";
    fs::remove_all(q);
    fs::create_directories(q);
    return q;
  }();
  return p;
}

// Three identities: two train, one test. Shared by most cases below.
const std::string& ds3_dir() {
  static const std::string d = [] {
    std::string p = (work_root() / "ds3").string();
    render_dataset(3, 21, p);
    return p;
  }();
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Parsed loss log rows: step,total,base_sv,base_nv,cycle,url,inter_sv,inter_nv,w_int.
std::vector<std::array<double, 9>> read_log(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::string line;
  REQUIRE(std::getline(f, line));
  REQUIRE(line == "step,total,base_sv,base_nv,cycle,url,inter_sv,inter_nv,w_int");
  std::vector<std::array<double, 9>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::array<double, 9> row{};
    std::string field;
    for (int i = 0; i < 9; ++i) {
      REQUIRE(std::getline(ls, field, ','));
      row[static_cast<size_t>(i)] = std::stod(field);
    }
    rows.push_back(row);
  }
  return rows;
}

RunConfig tiny_config(const std::string& out_dir) {
  RunConfig cfg;
  cfg.seed = 3;
  cfg.dataset_dir = ds3_dir();
  cfg.out_dir = out_dir;
  cfg.width = 8;
  cfg.batch = 2;
  cfg.max_steps = 12;
  cfg.val_every = 5;
  return cfg;
}

// One short full-featured run reused by the inference/offsets/eval cases.
struct TinyRun {
  RunConfig cfg;
  TrainResult result;
};

const TinyRun& tiny_run() {
  static const TinyRun r = [] {
    TinyRun t;
    t.cfg = tiny_config((work_root() / "run_tiny").string());
    t.result = train_run(t.cfg);
    return t;
  }();
  return r;
}

}  // namespace

TEST_CASE("run config round-trips through json and fingerprints its content") {
  RunConfig base;
  base.dataset_dir = "data/x";
  const std::string j = base.to_json();
  RunConfig back = RunConfig::from_json_text(j);
  CHECK(back.to_json() == j);
  CHECK(back.fingerprint() == base.fingerprint());

  RunConfig flipped = base;
  flipped.use_url = !flipped.use_url;
  CHECK(flipped.fingerprint() != base.fingerprint());

  const fs::path p = work_root() / "cfg.json";
  std::ofstream(p) << j;
  CHECK(RunConfig::from_file(p.string()).to_json() == j);

  CHECK_THROWS_AS(RunConfig::from_json_text("{\"learning_rate\": 1}"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::from_json_text("not json"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::from_json_text("{\"batch\": 0}"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::from_json_text("{\"epochs\": 0}"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::from_json_text("{\"width\": 2}"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::from_json_text("{\"lr\": 0}"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::from_json_text("{\"camera_jitter_deg\": -1}"), ContractViolation);
}

TEST_CASE("ablation rows differ from the baseline only in their own flag") {
  CHECK(ablation_rows().size() == 5);

  RunConfig base;
  base.dataset_dir = "d";
  // A noisy base must be normalized: every row starts from the same BL.
  base.use_url = true;
  base.use_cycle = true;
  base.multi_view = false;

  const RunConfig bl = ablation_row_config(base, "BL");
  CHECK(bl.multi_view);
  CHECK_FALSE(bl.use_refine);
  CHECK_FALSE(bl.use_url);
  CHECK_FALSE(bl.use_cycle);

  RunConfig bl_plus_url = bl;
  bl_plus_url.use_url = true;
  CHECK(ablation_row_config(base, "BL+URL").to_json() == bl_plus_url.to_json());

  const RunConfig deform = ablation_row_config(base, "BL+DeformRefine");
  CHECK(deform.use_refine);
  CHECK_FALSE(deform.conv_refine);
  const RunConfig conv = ablation_row_config(base, "BL+ConvRefine");
  CHECK(conv.use_refine);
  CHECK(conv.conv_refine);
  CHECK(ablation_row_config(base, "BL+Cycle").use_cycle);

  CHECK_THROWS_AS(ablation_row_config(base, "BL+Everything"), ContractViolation);
}

TEST_CASE("short training run logs every term finite and checkpoints reproducibly") {
  const TinyRun& t = tiny_run();
  CHECK(t.result.steps == 12);
  CHECK(t.result.total_history.size() == 12);
  for (double v : t.result.total_history) CHECK(std::isfinite(v));

  const auto rows = read_log(t.result.log_path);
  REQUIRE(rows.size() == 12);
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i][0] == doctest::Approx(static_cast<double>(i + 1)));
    for (double v : rows[i]) CHECK(std::isfinite(v));
    CHECK(rows[i][1] == doctest::Approx(t.result.total_history[i]));
  }
  // The intermediate-supervision weight anneals from 1 toward 0.
  CHECK(rows.front()[8] == doctest::Approx(1.0));
  CHECK(rows.back()[8] < rows.front()[8]);

  // Run artifacts: config, validation renders, checkpoint.
  const fs::path out(t.cfg.out_dir);
  CHECK(RunConfig::from_file((out / "config.json").string()).fingerprint() ==
        t.cfg.fingerprint());
  CHECK(fs::exists(out / "val" / "step_000001.png"));
  CHECK(fs::exists(out / "val" / "step_000005.png"));
  CHECK(fs::exists(out / "val" / "step_000012.png"));

  const LoadedCheckpoint ck = load_checkpoint(t.result.checkpoint_path);
  CHECK(ck.meta.step == 12);
  CHECK(ck.meta.config_fingerprint == t.cfg.fingerprint());
  const Bundle b = Bundle::from_checkpoint(t.result.checkpoint_path);
  CHECK(b.cfg.to_json() == t.cfg.to_json());
  CHECK(b.model->params().find("refine/offset/w").defined());
}

TEST_CASE("single-view and no-refinement runs drop exactly their terms") {
  RunConfig sv = tiny_config((work_root() / "run_sv").string());
  sv.seed = 4;
  sv.max_steps = 8;
  sv.multi_view = false;
  const TrainResult sv_res = train_run(sv);
  for (const auto& row : read_log(sv_res.log_path)) {
    CHECK(row[3] == 0.0);  // base_nv
    CHECK(row[4] == 0.0);  // cycle
    CHECK(row[2] > 0.0);
    // Refinement is on, so the intermediate branch is supervised exactly
    // while its annealed weight is still positive.
    if (row[8] > 0.0)
      CHECK(row[6] > 0.0);
    else
      CHECK(row[6] == 0.0);
  }

  RunConfig bl = tiny_config((work_root() / "run_bl").string());
  bl.seed = 4;
  bl.max_steps = 8;
  bl.use_refine = false;
  const TrainResult bl_res = train_run(bl);
  for (const auto& row : read_log(bl_res.log_path)) {
    CHECK(row[6] == 0.0);  // inter_sv
    CHECK(row[7] == 0.0);  // inter_nv
  }
  const LoadedCheckpoint ck = load_checkpoint(bl_res.checkpoint_path);
  for (const auto& [name, tensor] : ck.records)
    CHECK(name.rfind("refine/", 0) == std::string::npos);
  const Bundle b = Bundle::from_checkpoint(bl_res.checkpoint_path);
  CHECK_FALSE(b.cfg.use_refine);
}

TEST_CASE("camera jitter perturbs the objective deterministically") {
  RunConfig j = tiny_config((work_root() / "run_jit_a").string());
  j.seed = 9;
  j.max_steps = 6;
  j.camera_jitter_deg = 10.0;
  const TrainResult a = train_run(j);

  j.out_dir = (work_root() / "run_jit_b").string();
  const TrainResult bres = train_run(j);
  CHECK(slurp(a.log_path) == slurp(bres.log_path));

  RunConfig clean = j;
  clean.out_dir = (work_root() / "run_jit_0").string();
  clean.camera_jitter_deg = 0.0;
  const TrainResult c = train_run(clean);
  CHECK(slurp(a.log_path) != slurp(c.log_path));
  for (double v : bres.total_history) CHECK(std::isfinite(v));
}

TEST_CASE("inference writes eleven views and the texture re-renders exactly") {
  const TinyRun& t = tiny_run();
  const Dataset ds = load_dataset(ds3_dir());
  const LoadedIdentity& ident = ds.identities[ds.train_index[0]];
  const std::string view_dir = (fs::path(ds3_dir()) / ident.id / "views" / "2").string();
  const std::string out = (work_root() / "infer_out").string();

  const std::vector<std::string> paths = infer_view(t.result.checkpoint_path, view_dir, out);
  REQUIRE(paths.size() == 11);
  CHECK(fs::path(paths[0]).filename() == "texture.png");
  CHECK(fs::path(paths[1]).filename() == "fusion_mask.png");
  CHECK(fs::path(paths[2]).filename() == "sv_render.png");
  for (int k = 0; k < 8; ++k)
    CHECK(fs::path(paths[static_cast<size_t>(3 + k)]).filename() ==
          "nv_render_" + std::to_string(k) + ".png");
  for (const std::string& p : paths) CHECK(fs::exists(p));

  // The emitted texture must reproduce the same-view render byte for byte.
  const Tensor tex = read_png_rgb(paths[0]);
  REQUIRE(tex.shape() == Shape({3, kTextureSize, kTextureSize}));
  const Tensor rerender = quantize_image(render_texture(ident.views[2].raster, tex));
  const Tensor sv = read_png_rgb(paths[2]);
  CHECK((rerender.data() - sv.data()).abs().maxCoeff() == 0.0);

  int mh = 0, mw = 0;
  read_png_gray(paths[1], &mh, &mw);
  CHECK(mh == kTextureSize);
  CHECK(mw == kTextureSize);

  CHECK_THROWS_AS(infer_view(t.result.checkpoint_path,
                             (fs::path(ds3_dir()) / ident.id).string(), out),
                  ContractViolation);
}

TEST_CASE("sampling positions reduce to the base grid when offsets are zero") {
  const TinyRun& t = tiny_run();

  // Clone the trained checkpoint with the offset head silenced.
  Bundle b = Bundle::from_checkpoint(t.result.checkpoint_path);
  b.model->params().find("refine/offset/w").data().setZero();
  b.model->params().find("refine/offset/b").data().setZero();
  CheckpointMeta meta;
  meta.step = 0;
  meta.config_fingerprint = b.cfg.fingerprint();
  meta.config_json = b.cfg.to_json();
  const std::string zero_ckpt = (work_root() / "zero_offsets.txrf").string();
  save_checkpoint(zero_ckpt, {&b.model->params(), &b.confidence->params()}, nullptr, meta);

  const Dataset ds = load_dataset(ds3_dir());
  const LoadedIdentity& ident = ds.identities[ds.train_index[0]];
  const std::string image =
      (fs::path(ds3_dir()) / ident.id / "views" / "0" / "image.png").string();

  const auto grid = offsets_figure(zero_ckpt, image, {{0.5, 0.5}},
                                   (work_root() / "offsets_zero.png").string());
  REQUIRE(grid.size() == 1);
  REQUIRE(grid[0].size() == 9);
  const int s = kTextureSize, h = kViewHeight, w = kViewWidth;
  const int jx = static_cast<int>(std::lround(0.5 * (s - 1)));
  const int iy = static_cast<int>(std::lround(0.5 * (s - 1)));
  const double base_y = decoupled_base_coord(iy, s, h);
  const double base_x = decoupled_base_coord(jx, s, w);
  for (int k = 0; k < 9; ++k) {
    CHECK(grid[0][static_cast<size_t>(k)][0] == doctest::Approx(base_y + k / 3 - 1));
    CHECK(grid[0][static_cast<size_t>(k)][1] == doctest::Approx(base_x + k % 3 - 1));
  }

  // Corner points stay inside the image after clamping.
  const auto corners = offsets_figure(zero_ckpt, image, {{0.0, 0.0}, {1.0, 1.0}},
                                      (work_root() / "offsets_corner.png").string());
  for (const auto& point : corners)
    for (const auto& m : point) {
      CHECK(m[0] >= 0.0);
      CHECK(m[0] <= h - 1.0);
      CHECK(m[1] >= 0.0);
      CHECK(m[1] <= w - 1.0);
    }

  // On the trained checkpoint the learned offsets move the two probes by
  // different amounts.
  const auto trained = offsets_figure(t.result.checkpoint_path, image, {{0.3, 0.4}, {0.7, 0.6}},
                                      (work_root() / "offsets_trained.png").string());
  REQUIRE(trained.size() == 2);
  std::array<double, 2> rel[2];
  for (int p = 0; p < 2; ++p) {
    const double u = p == 0 ? 0.3 : 0.7, vv = p == 0 ? 0.4 : 0.6;
    const double by = decoupled_base_coord(static_cast<int>(std::lround(vv * (s - 1))), s, h);
    const double bx = decoupled_base_coord(static_cast<int>(std::lround(u * (s - 1))), s, w);
    double cy = 0, cx = 0;
    for (const auto& m : trained[static_cast<size_t>(p)]) {
      cy += m[0];
      cx += m[1];
    }
    rel[p] = {cy / 9.0 - by, cx / 9.0 - bx};
  }
  CHECK((std::abs(rel[0][0] - rel[1][0]) + std::abs(rel[0][1] - rel[1][1])) > 1e-9);
}

TEST_CASE("evaluation selects splits and reports deterministically") {
  const TinyRun& t = tiny_run();
  const std::string out = (work_root() / "eval_out").string();

  const MetricReport test_rep = eval_checkpoint(t.result.checkpoint_path, ds3_dir(), "test", out);
  CHECK(test_rep.n_sv == 8);
  CHECK(test_rep.n_nv == 56);
  CHECK(test_rep.config_fingerprint == t.cfg.fingerprint());
  CHECK(fs::exists(fs::path(out) / "report.json"));
  CHECK(fs::exists(fs::path(out) / "report.csv"));
  const nlohmann::json j = nlohmann::json::parse(slurp(fs::path(out) / "report.json"));
  CHECK(j["config_fingerprint"].get<uint64_t>() == t.cfg.fingerprint());
  CHECK(j["n_sv"].get<int>() == 8);

  const MetricReport train_rep = eval_checkpoint(t.result.checkpoint_path, ds3_dir(), "train", "");
  CHECK(train_rep.n_sv == 16);
  CHECK(train_rep.n_nv == 112);
  const MetricReport all_rep = eval_checkpoint(t.result.checkpoint_path, ds3_dir(), "all", "");
  CHECK(all_rep.n_sv == 24);
  CHECK(all_rep.n_nv == 168);
  CHECK_THROWS_AS(eval_checkpoint(t.result.checkpoint_path, ds3_dir(), "validation", ""),
                  ContractViolation);

  const MetricReport again = eval_checkpoint(t.result.checkpoint_path, ds3_dir(), "test", "");
  CHECK(again.to_json() == test_rep.to_json());
}

TEST_CASE("loading a checkpoint with a tampered fingerprint is refused") {
  RunConfig cfg = tiny_config((work_root() / "unused").string());
  Bundle b = Bundle::fresh(cfg);
  CheckpointMeta meta;
  meta.config_fingerprint = cfg.fingerprint() + 1;
  meta.config_json = cfg.to_json();
  const std::string p = (work_root() / "tampered.txrf").string();
  save_checkpoint(p, {&b.model->params(), &b.confidence->params()}, nullptr, meta);
  CHECK_THROWS_AS(Bundle::from_checkpoint(p), ContractViolation);
}

TEST_CASE("ablation table trains every row, averages seeds and round-trips") {
  RunConfig base = tiny_config((work_root() / "unused2").string());
  base.max_steps = 2;
  base.val_every = 0;
  const std::string out = (work_root() / "ablate_out").string();

  const std::vector<AblationCell> cells = run_ablations(base, {5, 6}, out);
  REQUIRE(cells.size() == 15);  // 5 rows x (2 seeds + mean)
  for (size_t r = 0; r < 5; ++r) {
    const AblationCell& s5 = cells[3 * r];
    const AblationCell& s6 = cells[3 * r + 1];
    const AblationCell& mean = cells[3 * r + 2];
    CHECK(s5.row == ablation_rows()[r]);
    CHECK(s5.seed == 5);
    CHECK(s6.seed == 6);
    CHECK(mean.seed == 0);
    CHECK(s5.report.config_fingerprint != 0);
    CHECK(s5.report.config_fingerprint != s6.report.config_fingerprint);
    CHECK(mean.report.config_fingerprint == 0);
    CHECK(mean.report.ssim_sv ==
          doctest::Approx((s5.report.ssim_sv + s6.report.ssim_sv) / 2).epsilon(1e-12));
    CHECK(mean.report.pdist_nv ==
          doctest::Approx((s5.report.pdist_nv + s6.report.pdist_nv) / 2).epsilon(1e-12));
    CHECK(std::isfinite(mean.report.cossim_sv));
    CHECK(fs::exists(fs::path(out) / s5.row / "seed_5" / "ckpt.txrf"));
    CHECK(fs::exists(fs::path(out) / s5.row / "seed_5" / "report.json"));
  }

  const std::string csv = slurp(fs::path(out) / "ablate.csv");
  const std::vector<AblationCell> parsed = parse_ablation_csv(csv);
  REQUIRE(parsed.size() == cells.size());
  for (size_t i = 0; i < cells.size(); ++i) {
    CHECK(parsed[i].row == cells[i].row);
    CHECK(parsed[i].seed == cells[i].seed);
    CHECK(parsed[i].report.ssim_sv == cells[i].report.ssim_sv);
    CHECK(parsed[i].report.ssim_nv == cells[i].report.ssim_nv);
    CHECK(parsed[i].report.pdist_sv == cells[i].report.pdist_sv);
    CHECK(parsed[i].report.pdist_nv == cells[i].report.pdist_nv);
    CHECK(parsed[i].report.cossim_sv == cells[i].report.cossim_sv);
    CHECK(parsed[i].report.cossim_nv == cells[i].report.cossim_nv);
    CHECK(parsed[i].report.config_fingerprint == cells[i].report.config_fingerprint);
  }
  CHECK_THROWS_AS(parse_ablation_csv("wrong,header\n"), ContractViolation);

  const std::string md_text = slurp(fs::path(out) / "ablate.md");
  std::istringstream md(md_text);
  int lines = 0;
  for (std::string line; std::getline(md, line);)
    if (!line.empty()) ++lines;
  CHECK(lines == 8);  // header + separator + 5 rows + base fingerprint
  CHECK(md_text.find("Base config fingerprint: " + std::to_string(base.fingerprint())) !=
        std::string::npos);
}

TEST_CASE("command line front end runs and fails with a single-line error") {
  const fs::path out = work_root() / "cli";
  fs::create_directories(out);
  const std::string cli = UVTEX_CLI_PATH;
  const std::string null = " > " + (out / "stdout.txt").string() + " 2>&1";

  std::string cmd = cli + " gen --n 2 --seed 7 --out " + (out / "data").string() + null;
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(out / "data" / "dataset.json"));

  cmd = cli + " train --dataset " + (out / "data").string() + " --out " +
        (out / "run").string() + " --width 8 --batch 2 --max-steps 1 --val-every 1" + null;
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(out / "run" / "ckpt.txrf"));

  const fs::path errfile = out / "stderr.txt";
  cmd = cli + " train --dataset " + (out / "missing").string() + " --out " +
        (out / "run2").string() + " > /dev/null 2> " + errfile.string();
  CHECK(std::system(cmd.c_str()) != 0);
  std::istringstream err(slurp(errfile));
  std::string first;
  REQUIRE(std::getline(err, first));
  CHECK(first.rfind("error:", 0) == 0);
  std::string extra;
  CHECK_FALSE(std::getline(err, extra));
}

TEST_CASE("training at desk defaults stays finite for a hundred steps") {
  const std::string data = (work_root() / "ds4").string();
  render_dataset(4, 33, data);

  RunConfig cfg;  // desk defaults: width 32, batch 8, all terms on
  cfg.dataset_dir = data;
  cfg.out_dir = (work_root() / "run_desk").string();
  cfg.max_steps = 100;
  cfg.val_every = 50;
  const TrainResult res = train_run(cfg);

  REQUIRE(res.steps == 100);
  for (double v : res.total_history) CHECK(std::isfinite(v));
  CHECK(res.total_history.back() < res.total_history.front());
}

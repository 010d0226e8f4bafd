#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "uvtex/metrics.hpp"
#include "uvtex/model.hpp"
#include "uvtex/synth_data.hpp"

namespace uvtex {

// Everything a run needs, round-trippable through JSON. CLI flags override
// file values; the FNV-1a fingerprint of the canonical JSON tags every
// artifact (checkpoint, report, table) the run produces.
struct RunConfig {
  uint64_t seed = 1;
  std::string dataset_dir;
  std::string out_dir = "out";
  int epochs = 30;
  int batch = 8;
  int max_steps = 0;  // > 0 caps the schedule regardless of epochs
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int width = 32;
  bool multi_view = true;
  bool use_url = true;
  bool use_cycle = true;
  bool use_refine = true;
  bool conv_refine = false;       // refinement ablation: plain convolutions
  bool cycle_stopgrad = false;    // detach the second texture estimate
  double camera_jitter_deg = 0.0; // render-vs-GT misalignment amplitude
  int val_every = 50;             // validation render period (steps)

  std::string to_json() const;
  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
  uint64_t fingerprint() const;
};

// Texture model + confidence net rebuilt either fresh from a config or from
// a checkpoint's embedded config. Movable, not copyable.
struct Bundle {
  RunConfig cfg;
  std::unique_ptr<TextureModel> model;
  std::unique_ptr<ConfidenceNet> confidence;

  static Bundle fresh(const RunConfig& cfg);
  static Bundle from_checkpoint(const std::string& path);

  // Eval-mode closure (image (3,H,W), parts (1,H,W)) -> texture (3,S,S).
  // The bundle must outlive the returned function.
  TextureFn texture_fn() const;
};

struct TrainResult {
  int steps = 0;
  std::vector<double> total_history;  // per-step weighted totals
  std::string checkpoint_path;
  std::string log_path;
};

// Training loop: per step draws `batch` (input view, novel view) pairs from
// the train identities, assembles the flagged objective, and runs one Adam
// update. Writes <out>/config.json, a per-step CSV loss log, periodic
// validation renders under <out>/val/ and a final TXRF checkpoint. A
// non-finite loss aborts with the offending term named.
TrainResult train_run(const RunConfig& cfg);

// Restores a checkpoint, scores the chosen identity split ("train", "test"
// or "all") and writes report.json / report.csv under out_dir ("" skips the
// files).
MetricReport eval_checkpoint(const std::string& ckpt_path, const std::string& dataset_dir,
                             const std::string& split, const std::string& out_dir);

// Estimates a texture from one dataset view directory (<id>/views/<k>) and
// writes texture.png, fusion_mask.png, sv_render.png and nv_render_0..7.png
// (the eight canonical azimuths, neutral pose). The texture is quantized
// before rendering, so re-rendering the emitted texture PNG reproduces
// sv_render.png byte for byte. Returns the written paths.
std::vector<std::string> infer_view(const std::string& ckpt_path, const std::string& view_dir,
                                    const std::string& out_dir);

// Draws the nine deformable sampling positions for each normalized (u,v)
// texture point onto the input image (one color per point; parts.png is
// expected beside image.png) and writes the annotated PNG. Returns the drawn
// (y,x) positions per point, clamped to the image bounds.
std::vector<std::vector<std::array<double, 2>>> offsets_figure(
    const std::string& ckpt_path, const std::string& image_path,
    const std::vector<std::array<double, 2>>& uv_points, const std::string& out_png);

// One table cell: metrics of `row` trained with `seed` (seed 0 = row mean).
struct AblationCell {
  std::string row;
  uint64_t seed = 0;
  MetricReport report;
};

const std::vector<std::string>& ablation_rows();  // BL, +ConvRefine, ...
RunConfig ablation_row_config(const RunConfig& base, const std::string& row);

// Trains every ablation row for every seed, evaluates the test split and
// writes ablate.csv (per-seed and mean rows) plus ablate.md (means) under
// out_dir. Row outputs land in <out_dir>/<row>/<seed>/.
std::vector<AblationCell> run_ablations(const RunConfig& base, const std::vector<uint64_t>& seeds,
                                        const std::string& out_dir);

// Parses ablate.csv back into cells (row, seed and the six metric columns).
std::vector<AblationCell> parse_ablation_csv(const std::string& text);

}  // namespace uvtex

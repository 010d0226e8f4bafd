#include <CLI11.hpp>

#include <array>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <sstream>
#include <string>
#include <vector>

#include "uvtex/harness.hpp"
#include "uvtex/synth_data.hpp"
#include "uvtex/tensor.hpp"

namespace {

// "u,v;u,v;..." -> normalized texture points.
std::vector<std::array<double, 2>> parse_uv_points(const std::string& text) {
  std::vector<std::array<double, 2>> points;
  std::istringstream in(text);
  std::string pair;
  while (std::getline(in, pair, ';')) {
    if (pair.empty()) continue;
    const size_t comma = pair.find(',');
    uvtex::require(comma != std::string::npos, "offsets: bad uv point '" + pair + "'");
    points.push_back({std::stod(pair.substr(0, comma)), std::stod(pair.substr(comma + 1))});
  }
  uvtex::require(!points.empty(), "offsets: --uv-points is empty");
  return points;
}

// Registers every RunConfig field as a CLI option on `cmd` so explicit flags
// win over the JSON file loaded from --config.
struct ConfigArgs {
  std::string config_path;
  uvtex::RunConfig values;
  CLI::App* cmd = nullptr;

  void attach(CLI::App* c) {
    cmd = c;
    c->add_option("--config", config_path, "JSON run config (flags override file values)");
    c->add_option("--seed", values.seed);
    c->add_option("--dataset", values.dataset_dir, "dataset directory");
    c->add_option("--out", values.out_dir, "output directory");
    c->add_option("--epochs", values.epochs);
    c->add_option("--batch", values.batch);
    c->add_option("--max-steps", values.max_steps);
    c->add_option("--lr", values.lr);
    c->add_option("--beta1", values.beta1);
    c->add_option("--beta2", values.beta2);
    c->add_option("--width", values.width);
    c->add_option("--multi_view", values.multi_view);
    c->add_option("--use_url", values.use_url);
    c->add_option("--use_cycle", values.use_cycle);
    c->add_option("--use_refine", values.use_refine);
    c->add_option("--conv_refine", values.conv_refine);
    c->add_option("--cycle_stopgrad", values.cycle_stopgrad);
    c->add_option("--camera_jitter_deg", values.camera_jitter_deg);
    c->add_option("--val-every", values.val_every);
  }

  uvtex::RunConfig resolve() const {
    uvtex::RunConfig cfg =
        config_path.empty() ? uvtex::RunConfig() : uvtex::RunConfig::from_file(config_path);
    if (cmd->count("--seed")) cfg.seed = values.seed;
    if (cmd->count("--dataset")) cfg.dataset_dir = values.dataset_dir;
    if (cmd->count("--out")) cfg.out_dir = values.out_dir;
    if (cmd->count("--epochs")) cfg.epochs = values.epochs;
    if (cmd->count("--batch")) cfg.batch = values.batch;
    if (cmd->count("--max-steps")) cfg.max_steps = values.max_steps;
    if (cmd->count("--lr")) cfg.lr = values.lr;
    if (cmd->count("--beta1")) cfg.beta1 = values.beta1;
    if (cmd->count("--beta2")) cfg.beta2 = values.beta2;
    if (cmd->count("--width")) cfg.width = values.width;
    if (cmd->count("--multi_view")) cfg.multi_view = values.multi_view;
    if (cmd->count("--use_url")) cfg.use_url = values.use_url;
    if (cmd->count("--use_cycle")) cfg.use_cycle = values.use_cycle;
    if (cmd->count("--use_refine")) cfg.use_refine = values.use_refine;
    if (cmd->count("--conv_refine")) cfg.conv_refine = values.conv_refine;
    if (cmd->count("--cycle_stopgrad")) cfg.cycle_stopgrad = values.cycle_stopgrad;
    if (cmd->count("--camera_jitter_deg")) cfg.camera_jitter_deg = values.camera_jitter_deg;
    if (cmd->count("--val-every")) cfg.val_every = values.val_every;
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UV texture estimation toolkit"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "render a synthetic dataset");
  int gen_n = 8;
  uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("--n", gen_n, "number of identities")->required();
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train a model");
  ConfigArgs train_args;
  train_args.attach(train);

  // eval
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  std::string eval_ckpt, eval_dataset, eval_split = "test", eval_out;
  eval->add_option("--ckpt", eval_ckpt)->required();
  eval->add_option("--dataset", eval_dataset)->required();
  eval->add_option("--split", eval_split, "train|test|all");
  eval->add_option("--out", eval_out, "report directory (defaults beside the checkpoint)");

  // infer
  auto* infer = app.add_subcommand("infer", "estimate one texture and its renders");
  std::string infer_ckpt, infer_view, infer_out;
  infer->add_option("--ckpt", infer_ckpt)->required();
  infer->add_option("--image-dir", infer_view, "<id>/views/<k> dataset view directory")
      ->required();
  infer->add_option("--out", infer_out)->required();

  // offsets
  auto* offsets = app.add_subcommand("offsets", "draw deformable sampling positions");
  std::string off_ckpt, off_image, off_points, off_out = "offsets.png";
  offsets->add_option("--ckpt", off_ckpt)->required();
  offsets->add_option("--image", off_image, "input image (parts.png expected beside it)")
      ->required();
  offsets->add_option("--uv-points", off_points, "semicolon-separated u,v pairs in [0,1]")
      ->required();
  offsets->add_option("--out", off_out, "annotated PNG path");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and tabulate the five ablation rows");
  ConfigArgs ablate_args;
  ablate_args.attach(ablate);
  std::string ablate_seeds = "1,2,3";
  ablate->add_option("--seeds", ablate_seeds, "comma-separated training seeds");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      uvtex::render_dataset(gen_n, gen_seed, gen_out);
      std::printf("wrote %d identities to %s\n", gen_n, gen_out.c_str());
    } else if (train->parsed()) {
      const uvtex::RunConfig cfg = train_args.resolve();
      const uvtex::TrainResult res = uvtex::train_run(cfg);
      std::printf("trained %d steps; checkpoint %s\n", res.steps, res.checkpoint_path.c_str());
    } else if (eval->parsed()) {
      if (eval_out.empty()) eval_out = eval_ckpt + ".eval";
      const uvtex::MetricReport r =
          uvtex::eval_checkpoint(eval_ckpt, eval_dataset, eval_split, eval_out);
      std::printf("split=%s ssim_sv=%.4f ssim_nv=%.4f psnr_sv=%.2f psnr_nv=%.2f\n",
                  eval_split.c_str(), r.ssim_sv, r.ssim_nv, r.psnr_sv, r.psnr_nv);
      std::printf("cossim_sv=%.4f cossim_nv=%.4f pdist_sv=%.5f pdist_nv=%.5f (reports in %s)\n",
                  r.cossim_sv, r.cossim_nv, r.pdist_sv, r.pdist_nv, eval_out.c_str());
    } else if (infer->parsed()) {
      const std::vector<std::string> paths = uvtex::infer_view(infer_ckpt, infer_view, infer_out);
      std::printf("wrote %zu images to %s\n", paths.size(), infer_out.c_str());
    } else if (offsets->parsed()) {
      const auto marks =
          uvtex::offsets_figure(off_ckpt, off_image, parse_uv_points(off_points), off_out);
      std::printf("annotated %zu points (9 taps each) -> %s\n", marks.size(), off_out.c_str());
    } else if (ablate->parsed()) {
      std::vector<uint64_t> seeds;
      std::istringstream in(ablate_seeds);
      std::string tok;
      while (std::getline(in, tok, ','))
        if (!tok.empty()) seeds.push_back(std::stoull(tok));
      const uvtex::RunConfig base = ablate_args.resolve();
      uvtex::run_ablations(base, seeds, base.out_dir);
      std::printf("ablation table written to %s/ablate.{csv,md}\n", base.out_dir.c_str());
    }
  } catch (const uvtex::ContractViolation& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

// Acceptance suite, part 2: criterion 7 (single-identity overfit). Trains the
// full model on one identity's eight views and requires near-perfect
// same-view reconstruction within a fixed wall-clock budget.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "uvtex/harness.hpp"
#include "uvtex/synth_data.hpp"

using namespace uvtex;
namespace fs = std::filesystem;

namespace {

constexpr double kTargetSsim = 0.95;   // criterion 7: SV SSIM over the 8 views
constexpr double kBudgetCoreSec = 3600.0;  // 15 min x 4 reference cores
constexpr int kOverfitSteps = 500;

bool report(int n, const std::string& what, bool ok) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", n, what.c_str());
  std::fflush(stdout);
  return ok;
}

}  // namespace

TEST_CASE("criterion 7: one-identity overfit reaches 0.95 same-view ssim") {
  const fs::path root = fs::temp_directory_path() / "uvtex_acceptance_overfit";
  fs::remove_all(root);
  fs::create_directories(root);
  // Two rendered identities; the loader's split trains on the first only,
  // giving exactly one identity with eight views in the training set.
  const std::string data = (root / "data").string();
  render_dataset(2, 11, data);

  RunConfig cfg;
  cfg.seed = 1;
  cfg.dataset_dir = data;
  cfg.out_dir = (root / "run").string();
  cfg.width = 32;
  cfg.batch = 4;
  cfg.max_steps = kOverfitSteps;
  cfg.val_every = 100;

  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult tr = train_run(cfg);
  const double train_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // Wall budget scaled to this machine: the reference allowance is 15 min on
  // four cores and the convolution loops parallelize across cores.
  const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
  const double budget_sec = kBudgetCoreSec / std::min(4u, cores);

  // Training-loss invariant: the 50-step moving average of the total is
  // monotone non-increasing over the first 200 steps.
  REQUIRE(tr.total_history.size() == static_cast<size_t>(kOverfitSteps));
  auto ma = [&](size_t i) {
    double s = 0;
    for (size_t j = i; j < i + 50; ++j) s += tr.total_history[j];
    return s / 50.0;
  };
  bool monotone = true;
  for (size_t i = 0; i + 1 + 50 <= 200; ++i)
    if (ma(i + 1) > ma(i)) monotone = false;
  CHECK(monotone);
  CHECK(ma(150) < ma(0));

  const MetricReport rep = eval_checkpoint(tr.checkpoint_path, data, "train",
                                           (root / "eval").string());
  REQUIRE(rep.n_sv == 8);

  char msg[240];
  std::snprintf(msg, sizeof(msg),
                "overfit SV SSIM %.4f over 8 views (target >= %.2f); %d steps in %.0f s "
                "(budget %.0f s on %u cores); 50-step loss average %s",
                rep.ssim_sv, kTargetSsim, kOverfitSteps, train_sec, budget_sec, cores,
                monotone ? "monotone" : "NOT monotone");
  CHECK(report(7, msg, rep.ssim_sv >= kTargetSsim && train_sec <= budget_sec && monotone));
}

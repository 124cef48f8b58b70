#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "etbell/analysis.hpp"
#include "etbell/config.hpp"
#include "etbell/lhv.hpp"
#include "etbell/stabilization.hpp"

namespace etbell {

// Scenario runners. Each one executes the full pipeline for one command,
// writes data files into cfg.out_dir (format per cfg.format) and returns
// the headline numbers for programmatic use. Scan points run as isolated
// seeded tasks, so results are identical for any worker count.

struct CurvePoint {
  int phi_b_index = 0;   // 0 -> phi_b = 0, 1 -> phi_b = pi/2
  int point_index = 0;
  double phi_a = 0.0;
  CountTable raw;
  CountTable net;
};

struct LockAggregate {
  double mean_residual_rms = 0.0;  // across point locks, signal radians
  double max_residual_rms = 0.0;
  int64_t saturation_count = 0;
  int64_t reset_count = 0;
  int64_t segments = 0;
};

struct ChshScenarioResult {
  std::vector<CurvePoint> curve_points;
  std::array<FringeFit, 8> raw_fits{};   // [phi_b_index * 4 + pair_index]
  std::array<FringeFit, 8> net_fits{};
  double mean_raw_visibility = 0.0;
  double mean_net_visibility = 0.0;
  std::array<CountTable, 4> setting_tables_raw{};
  std::array<CountTable, 4> setting_tables_net{};
  ChshResult chsh_raw;
  ChshResult chsh_net;
  bool has_net = false;
  LockAggregate lock;
};

struct DelayScanPoint {
  double delay_mm = 0.0;
  FringeFit raw_fit;
  FringeFit net_fit;
};

struct EnvelopeFit {
  double v0 = 0.0;
  double fwhm_mm = 0.0;
  int points_used = 0;
  bool valid = false;
};

struct ScanScenarioResult {
  std::vector<DelayScanPoint> points;
  EnvelopeFit envelope;  // fitted on net visibilities
  bool stabilization_on = true;
  LockAggregate lock;
};

struct AttackScenarioResult {
  AttackReport franson_exact;
  AttackReport hug_exact;
  std::optional<ChshResult> franson_mc;
  std::optional<ChshResult> hug_mc;
  std::optional<double> exhaustive_franson;
  std::optional<double> exhaustive_hug;
};

struct LockScenarioResult {
  LockSummary summary;
  double switch_time_s = -1.0;
  // residual statistics after the switch (when one is scheduled)
  double post_switch_rms = 0.0;
  double post_switch_mean = 0.0;
};

struct CountsFileResult {
  std::string path;
  CountTable raw;
  CountTable net;
  std::array<double, 2> singles_alice_hz{};
  std::array<double, 2> singles_bob_hz{};
  AccidentalEstimate from_singles;
  AccidentalEstimate from_shifted;
};

ChshScenarioResult run_chsh_scenario(const RunConfig& cfg);
ScanScenarioResult run_scan_delay_scenario(const RunConfig& cfg);
AttackScenarioResult run_attack_scenario(const RunConfig& cfg);
LockScenarioResult run_lock_scenario(const RunConfig& cfg);
std::vector<CountsFileResult> run_counts_scenario(
    const RunConfig& cfg, const std::vector<std::string>& event_files);

// Creates cfg.out_dir, refuses to reuse a directory whose config snapshot
// differs from cfg unless cfg.force is set, then writes the snapshot.
void prepare_out_dir(const RunConfig& cfg);

// Least-squares Gaussian envelope through (delay_mm, visibility) points,
// linearized as ln v against delay^2; points below a noise floor are
// excluded.
EnvelopeFit fit_visibility_envelope(
    const std::vector<std::pair<double, double>>& delay_vis);

void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace etbell

#pragma once

#include <cstdint>
#include <string>

#include "etbell/analysis.hpp"
#include "etbell/quantum.hpp"
#include "etbell/stabilization.hpp"
#include "etbell/topology.hpp"

namespace etbell {

// Full description of a run: every module config plus scenario knobs.
// Serialized as flat "section.key = value" lines; the canonical snapshot
// (sorted keys, normalized numbers) is hashed and stamped onto every
// output file so mismatched re-runs are detected.

enum class OutputFormat { Csv, Json };

struct RunConfig {
  TopologyConfig topology;
  SourceModel source;            // pair rate derived from cross_rate_hz
  TwoPhotonModel model;
  NoiseModel noise;
  ControllerConfig controller;
  WavelengthPair wavelengths;
  CoincidenceWindow window;      // center resolved from topology when auto
  bool window_center_auto = true;

  double cross_rate_hz = 100.0;  // total cross-coincidence rate, all pairs

  // chsh scenario
  int chsh_points_per_curve = 25;
  double chsh_point_seconds = 1.0;
  double chsh_setting_seconds = 3.7;
  bool chsh_lock_coupled = false;

  // scan-delay scenario
  double scan_delay_min_mm = -2.0;
  double scan_delay_max_mm = 2.0;
  int scan_delay_points = 17;
  int scan_phase_points = 24;
  double scan_point_seconds = 1.0;
  bool scan_stabilization_on = true;

  // attack scenario
  std::string attack_strategy_file;  // empty -> bundled slot-steering attack
  double attack_mc_seconds = 5.0;
  int attack_exhaustive_n_lambda = 0;  // 0 -> skip exhaustive search

  // lock scenario
  double lock_duration_s = 2.0;
  int lock_decimation = 50;
  double lock_switch_time_s = -1.0;  // < 0 -> no mid-run switch
  double lock_switch_set_point_rad = 1.5707963267948966;
  double lock_warmup_s = 0.2;

  // run-level
  uint64_t seed = 1;
  int workers = 1;
  OutputFormat format = OutputFormat::Csv;
  bool exact = false;        // closed-form expectations instead of sampling
  bool emit_events = false;  // dump raw event streams per point
  std::string out_dir = "out";
  bool force = false;

  // Parses "key = value" lines over the defaults; '#' starts a comment.
  static RunConfig from_file(const std::string& path);
  void apply(const std::string& key, const std::string& value);

  void validate() const;

  // Window center resolved against the topology's fixed transit asymmetry.
  CoincidenceWindow resolved_window() const;
  double pair_rate_hz() const { return 2.0 * cross_rate_hz; }

  std::string canonical_text() const;
  uint64_t hash() const;
};

}  // namespace etbell

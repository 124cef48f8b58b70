#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "etbell/quantum.hpp"

namespace etbell {

// Event-level Monte Carlo of the two interferometer layouts. Pair emissions
// are a Poisson process; each pair is routed through the selected geometry
// into timestamped detector clicks, and independent Poisson background
// (singles + dark) is merged per detector.
//
// Timing model: Alice's short arm is a few metres, Bob's arms run through
// the long fiber, so every pair-origin click at Bob lags the emission by
// the full arm transit. True cross coincidences therefore sit at a fixed
// Alice-Bob delay, which the analysis window must be centered on.

enum class TopologyKind { Franson, Hug };
enum class Party : uint8_t { Alice = 0, Bob = 1 };
enum class EventOrigin : uint8_t { Pair = 0, Background = 1 };

struct TopologyConfig {
  TopologyKind kind = TopologyKind::Hug;
  double long_short_difference_m = 2.0;
  double long_arm_length_bob_km = 1.04;
  double short_arm_length_alice_m = 1.0;
  double delay_offset_mm = 0.0;        // delay-line deviation from balance
  double group_velocity_mps = 2.0e8;
  double coincidence_window_s = 4e-9;  // design constraint checked below
  double jitter_sigma_s = 0.0;         // optional Gaussian detector jitter

  void validate() const;

  double long_short_delay_s() const {
    return long_short_difference_m / group_velocity_mps;
  }
  double alice_transit_s(bool long_arm) const;
  double bob_transit_s(bool long_arm) const;
  // Fixed Alice->Bob arrival offset of a true coincidence (short-short).
  double cross_center_delay_s() const {
    return bob_transit_s(false) - alice_transit_s(false);
  }
};

struct SourceModel {
  double pair_rate_hz = 200.0;
  double singles_rate_alice_hz = 0.0;  // per detector
  double singles_rate_bob_hz = 0.0;    // per detector
  double dark_rate_hz = 0.0;           // per detector

  void validate() const;
};

struct DetectionEvent {
  int64_t t_ps = 0;  // integer picoseconds since run start
  Party party = Party::Alice;
  uint8_t detector = 1;  // 1 or 2
  EventOrigin origin = EventOrigin::Pair;

  double seconds() const { return static_cast<double>(t_ps) * 1e-12; }
};

struct EventStream {
  std::vector<DetectionEvent> events;  // sorted by (t_ps, party, detector)
  double duration_s = 0.0;
  uint64_t rng_seed = 0;
  uint64_t config_hash = 0;
};

// Per-emission analyzer phases; lets scans ramp phi_a and lock residual
// noise modulate phi_b without changing the sampling structure.
using PhaseFn = std::function<PhaseSettings(double emission_time_s)>;

EventStream sample_events(const TopologyConfig& topology,
                          const SourceModel& source,
                          const TwoPhotonModel& model,
                          const PhaseSettings& settings, double duration_s,
                          uint64_t seed);

EventStream sample_events_modulated(const TopologyConfig& topology,
                                    const SourceModel& source,
                                    const TwoPhotonModel& model,
                                    const PhaseFn& phases, double duration_s,
                                    uint64_t seed);

// Fraction of cross-party pairs that pass the |dt| <= window/2 test in the
// Franson layout: 1/2 with ideal splitters, 1 once the window swallows the
// long-short delay. Rejects hug input.
double franson_window_fraction(const TopologyConfig& topology);

// Shared helpers for samplers (also used by the hidden-variable sampler).
void append_background_events(std::vector<DetectionEvent>& out,
                              const SourceModel& source, double duration_s,
                              uint64_t seed);
void finalize_stream(EventStream& stream);

std::pair<EventStream, EventStream> split_by_party(const EventStream& merged);

// Line format: "<A|B> <1|2> <picoseconds>", preceded by a header carrying
// the config hash, seed and duration.
void write_events(std::ostream& os, const EventStream& stream);
void write_events_file(const std::string& path, const EventStream& stream);
EventStream read_events_file(const std::string& path);

}  // namespace etbell

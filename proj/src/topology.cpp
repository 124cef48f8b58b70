#include "etbell/topology.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "etbell/common.hpp"
#include "etbell/rng.hpp"

namespace etbell {

namespace {

int64_t to_ps(double seconds) {
  return static_cast<int64_t>(std::llround(seconds * 1e12));
}

bool event_less(const DetectionEvent& a, const DetectionEvent& b) {
  if (a.t_ps != b.t_ps) return a.t_ps < b.t_ps;
  if (a.party != b.party) return a.party < b.party;
  if (a.detector != b.detector) return a.detector < b.detector;
  return a.origin < b.origin;
}

// Joint detector outcome for an interfering cross pair, drawn from the
// conditional law P(i,j | cross) = 2 * P_ij.
std::pair<int, int> draw_cross_outcome(const PhaseSettings& ph, double v,
                                       double u) {
  static constexpr std::array<std::pair<int, int>, 4> kPairs = {
      {{1, 1}, {1, 2}, {2, 1}, {2, 2}}};
  double cum = 0.0;
  for (const auto& [i, j] : kPairs) {
    cum += 2.0 * cross_coincidence_probability(ph, i, j, v);
    if (u < cum) return {i, j};
  }
  return kPairs.back();
}

}  // namespace

void TopologyConfig::validate() const {
  if (!(long_short_difference_m > 0.0)) {
    throw ValidationError("long_short_difference_m must be > 0");
  }
  if (!(long_arm_length_bob_km > 0.0) || !(short_arm_length_alice_m > 0.0)) {
    throw ValidationError("arm lengths must be > 0");
  }
  if (!(group_velocity_mps > 0.0)) {
    throw ValidationError("group_velocity_mps must be > 0");
  }
  if (!(coincidence_window_s > 0.0)) {
    throw ValidationError("coincidence_window_s must be > 0");
  }
  if (!(long_short_delay_s() > coincidence_window_s)) {
    throw ValidationError(
        "long-short delay must exceed the coincidence window");
  }
  if (jitter_sigma_s < 0.0) {
    throw ValidationError("jitter_sigma_s must be >= 0");
  }
  if (!std::isfinite(delay_offset_mm)) {
    throw ValidationError("delay_offset_mm must be finite");
  }
}

double TopologyConfig::alice_transit_s(bool long_arm) const {
  double t = short_arm_length_alice_m / group_velocity_mps;
  if (long_arm) {
    t += long_short_delay_s() + delay_offset_mm * 1e-3 / group_velocity_mps;
  }
  return t;
}

double TopologyConfig::bob_transit_s(bool long_arm) const {
  double t = long_arm_length_bob_km * 1000.0 / group_velocity_mps;
  if (long_arm) t += long_short_delay_s();
  return t;
}

void SourceModel::validate() const {
  if (pair_rate_hz < 0.0 || singles_rate_alice_hz < 0.0 ||
      singles_rate_bob_hz < 0.0 || dark_rate_hz < 0.0) {
    throw ValidationError("source rates must be >= 0");
  }
}

void append_background_events(std::vector<DetectionEvent>& out,
                              const SourceModel& source, double duration_s,
                              uint64_t seed) {
  struct Channel {
    Party party;
    uint8_t detector;
    double rate;
  };
  const double ra = source.singles_rate_alice_hz + source.dark_rate_hz;
  const double rb = source.singles_rate_bob_hz + source.dark_rate_hz;
  const std::array<Channel, 4> channels = {{{Party::Alice, 1, ra},
                                            {Party::Alice, 2, ra},
                                            {Party::Bob, 1, rb},
                                            {Party::Bob, 2, rb}}};
  for (size_t c = 0; c < channels.size(); ++c) {
    if (channels[c].rate <= 0.0) continue;
    Rng rng(derive_seed(seed, {2, c}));
    const double mean_gap = 1.0 / channels[c].rate;
    for (double t = rng.exponential(mean_gap); t < duration_s;
         t += rng.exponential(mean_gap)) {
      out.push_back({to_ps(t), channels[c].party, channels[c].detector,
                     EventOrigin::Background});
    }
  }
}

void finalize_stream(EventStream& stream) {
  const int64_t limit = to_ps(stream.duration_s);
  auto& ev = stream.events;
  ev.erase(std::remove_if(ev.begin(), ev.end(),
                          [limit](const DetectionEvent& e) {
                            return e.t_ps < 0 || e.t_ps > limit;
                          }),
           ev.end());
  std::stable_sort(ev.begin(), ev.end(), event_less);
}

EventStream sample_events_modulated(const TopologyConfig& topology,
                                    const SourceModel& source,
                                    const TwoPhotonModel& model,
                                    const PhaseFn& phases, double duration_s,
                                    uint64_t seed) {
  topology.validate();
  source.validate();
  model.validate();
  if (!(duration_s > 0.0)) throw ValidationError("duration must be > 0");

  EventStream stream;
  stream.duration_s = duration_s;
  stream.rng_seed = seed;

  const double v_eff = effective_visibility(
      model, topology.delay_offset_mm + model.path_imbalance_offset_mm);
  const double ta_s = topology.alice_transit_s(false);
  const double ta_l = topology.alice_transit_s(true);
  const double tb_s = topology.bob_transit_s(false);
  const double tb_l = topology.bob_transit_s(true);
  const bool hug = topology.kind == TopologyKind::Hug;
  const double jitter = topology.jitter_sigma_s;

  auto& out = stream.events;
  if (source.pair_rate_hz > 0.0) {
    Rng rng(derive_seed(seed, {1}));
    const double mean_gap = 1.0 / source.pair_rate_hz;
    auto push = [&](double t, Party p, int det) {
      if (jitter > 0.0) t += jitter * rng.gauss();
      out.push_back(
          {to_ps(t), p, static_cast<uint8_t>(det), EventOrigin::Pair});
    };
    for (double t = rng.exponential(mean_gap); t < duration_s;
         t += rng.exponential(mean_gap)) {
      // Fixed draw layout per pair: the path-pair slot never looks at the
      // analyzer phases, so the set of cross-coincident emissions is
      // identical under any settings change.
      const double u_slot = rng.uniform01();
      const double u1 = rng.uniform01();
      const double u2 = rng.uniform01();
      const PhaseSettings ph = phases(t);
      if (u_slot < 0.5) {
        // short-short or long-long: an interfering cross-party pair
        const bool long_long = u_slot >= 0.25;
        const auto [da, db] = draw_cross_outcome(ph, v_eff, u1);
        push(t + (long_long ? ta_l : ta_s), Party::Alice, da);
        push(t + (long_long ? tb_l : tb_s), Party::Bob, db);
      } else if (hug) {
        // short-long / long-short: both photons end at one party,
        // separated by the long-short delay; no interference partner
        const Party p = (u_slot < 0.75) ? Party::Alice : Party::Bob;
        const double early = (p == Party::Alice) ? ta_s : tb_s;
        const double late = (p == Party::Alice) ? ta_l : tb_l;
        push(t + early, p, u1 < 0.5 ? 1 : 2);
        push(t + late, p, u2 < 0.5 ? 1 : 2);
      } else {
        // Franson short-long / long-short: cross-party events offset by
        // the long-short delay; the analysis window rejects them
        const bool alice_short = u_slot < 0.75;
        push(t + (alice_short ? ta_s : ta_l), Party::Alice, u1 < 0.5 ? 1 : 2);
        push(t + (alice_short ? tb_l : tb_s), Party::Bob, u2 < 0.5 ? 1 : 2);
      }
    }
  }

  append_background_events(out, source, duration_s, seed);
  finalize_stream(stream);
  return stream;
}

EventStream sample_events(const TopologyConfig& topology,
                          const SourceModel& source,
                          const TwoPhotonModel& model,
                          const PhaseSettings& settings, double duration_s,
                          uint64_t seed) {
  return sample_events_modulated(
      topology, source, model,
      [&settings](double) { return settings; }, duration_s, seed);
}

double franson_window_fraction(const TopologyConfig& topology) {
  topology.validate();
  if (topology.kind != TopologyKind::Franson) {
    throw ValidationError("franson_window_fraction requires Franson topology");
  }
  return topology.long_short_delay_s() <= topology.coincidence_window_s / 2.0
             ? 1.0
             : 0.5;
}

std::pair<EventStream, EventStream> split_by_party(const EventStream& merged) {
  std::pair<EventStream, EventStream> out;
  out.first.duration_s = out.second.duration_s = merged.duration_s;
  out.first.rng_seed = out.second.rng_seed = merged.rng_seed;
  out.first.config_hash = out.second.config_hash = merged.config_hash;
  for (const auto& e : merged.events) {
    (e.party == Party::Alice ? out.first : out.second).events.push_back(e);
  }
  return out;
}

void write_events(std::ostream& os, const EventStream& stream) {
  os << "# etbell events v1\n";
  os << "# config_hash " << std::hex << stream.config_hash << std::dec << "\n";
  os << "# seed " << stream.rng_seed << "\n";
  os << "# duration_ps " << to_ps(stream.duration_s) << "\n";
  for (const auto& e : stream.events) {
    os << (e.party == Party::Alice ? 'A' : 'B') << ' '
       << static_cast<int>(e.detector) << ' ' << e.t_ps << '\n';
  }
}

void write_events_file(const std::string& path, const EventStream& stream) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_events(os, stream);
}

EventStream read_events_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open events file " + path);
  EventStream stream;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string key;
      hs >> key;
      if (key == "config_hash") {
        hs >> std::hex >> stream.config_hash;
      } else if (key == "seed") {
        hs >> stream.rng_seed;
      } else if (key == "duration_ps") {
        int64_t d = 0;
        hs >> d;
        stream.duration_s = static_cast<double>(d) * 1e-12;
      }
      continue;
    }
    std::istringstream ls(line);
    char party = 0;
    int det = 0;
    int64_t t = 0;
    if (!(ls >> party >> det >> t) || (party != 'A' && party != 'B') ||
        (det != 1 && det != 2)) {
      throw ValidationError("malformed event line: " + line);
    }
    stream.events.push_back({t, party == 'A' ? Party::Alice : Party::Bob,
                             static_cast<uint8_t>(det), EventOrigin::Pair});
  }
  return stream;
}

}  // namespace etbell

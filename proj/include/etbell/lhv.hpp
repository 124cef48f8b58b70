#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "etbell/quantum.hpp"
#include "etbell/topology.hpp"

namespace etbell {

// Local-hidden-variable strategy engine. A strategy is a finite table over
// hidden values lambda; outcome and slot functions see only lambda and the
// local setting index, so locality is enforced by the data layout itself.
//
// Franson semantics: each side's arrival slot (short/long) may depend on
// the local setting, and a pair is kept iff the slots match — that is the
// lever the coincidence post-selection hands to a local model. Hug
// semantics: the path pair is fixed at the source before any setting
// exists, so the kept set cannot depend on the settings.

// Path-pair labels fixed at the source (hug routing).
enum class SourceSlot : uint8_t {
  ShortShort = 0,  // cross coincidence
  LongLong = 1,    // cross coincidence
  AliceDouble = 2, // photon pair folded onto Alice
  BobDouble = 3,   // photon pair folded onto Bob
};

struct LocalStrategy {
  struct Lambda {
    double weight = 0.0;
    std::array<int, 2> outcome_a{1, 1};   // indexed by Alice setting (a, a')
    std::array<int, 2> outcome_b{1, 1};   // indexed by Bob setting (b, b')
    std::array<int, 2> slot_a{0, 0};      // Franson arrival slot, 0=short 1=long
    std::array<int, 2> slot_b{0, 0};
    SourceSlot source_slot = SourceSlot::ShortShort;
  };

  std::vector<Lambda> lambdas;

  void validate() const;

  // Two-value slot-steering attack: each side's slot follows (or, for the
  // second lambda, anti-follows) the local setting index, which makes the
  // Franson kept set setting-dependent and drives the post-selected S to
  // the algebraic maximum of 4.
  static LocalStrategy bundled_slot_steering();
};

struct AttackReport {
  TopologyKind kind = TopologyKind::Franson;
  std::array<double, 4> e_values{};      // (a,b), (a',b), (a,b'), (a',b')
  double s_value = 0.0;
  std::array<double, 4> kept_fraction{};
};

// Exact enumeration over the lambda table. The settings argument labels
// which physical phases the two setting indices stand for; the strategy
// itself is keyed purely on the indices. Throws if some setting pair keeps
// no lambda (the experiment always has data).
AttackReport evaluate_strategy(const LocalStrategy& strategy,
                               TopologyKind kind,
                               const ChshSettings& settings);

// Exact maximum of post-selected S over all deterministic strategies with
// n_lambda equally weighted hidden values (n_lambda <= 4).
double max_s_exhaustive(TopologyKind kind, int n_lambda);

// Monte Carlo realization of a strategy through the same timing and
// routing rules as the quantum sampler, so the analysis pipeline can
// process hidden-variable data identically. Setting indices select the
// outcome/slot table columns.
EventStream sample_lhv_events(const LocalStrategy& strategy,
                              const TopologyConfig& topology,
                              const SourceModel& source, int a_setting,
                              int b_setting, double duration_s,
                              uint64_t seed);

// Declarative strategy files (JSON): lambda weights plus per-setting
// outcome/slot tables, so custom attacks can be scripted.
LocalStrategy load_strategy_file(const std::string& path);
void save_strategy_file(const std::string& path, const LocalStrategy& s);

}  // namespace etbell

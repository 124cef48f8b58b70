#pragma once

#include <array>

namespace etbell {

// Closed-form two-photon interference predictions for a pair of equally
// unbalanced interferometers fed by the state (|SS> + |LL>)/sqrt(2):
// detector-pair coincidence probabilities, the correlation function E,
// the CHSH combination S, and the path-imbalance visibility envelope.

struct PhaseSettings {
  double phi_a = 0.0;  // radians, Alice's analyzer phase
  double phi_b = 0.0;  // radians, Bob's analyzer phase
};

struct ChshSettings {
  double phi_a = 0.0;
  double phi_a_prime = 0.0;
  double phi_b = 0.0;
  double phi_b_prime = 0.0;

  // The setting quadruple that maximizes S under the cosine law.
  static ChshSettings canonical();
};

struct TwoPhotonModel {
  double base_visibility = 0.8436;       // dimensionless, in [0, 1]
  double envelope_fwhm_mm = 1.0;         // two-photon coherence width
  double path_imbalance_offset_mm = 0.0; // standing deviation from L_A-S_A = L_B-S_B

  void validate() const;
};

struct ChshResult {
  // E at (a,b), (a',b), (a,b'), (a',b') in that order
  std::array<double, 4> e_values{};
  std::array<double, 4> e_sigmas{};
  double s_value = 0.0;
  double s_sigma = 0.0;
  double significance = 0.0;  // (S - 2) / s_sigma
};

// P_ij for Alice detector i and Bob detector j (1-based), given the
// effective visibility v. The four cross probabilities sum to 1/2; the
// remaining half of the pairs end up as same-side double clicks in the
// hug geometry (or time-rejected cross events in the Franson geometry).
double cross_coincidence_probability(const PhaseSettings& settings,
                                     int detector_a, int detector_b,
                                     double v);

// E(phi_a, phi_b) = v * cos(phi_a - phi_b); equals the normalized
// (P11 + P22 - P12 - P21) / (P11 + P22 + P12 + P21).
double correlation_e(const PhaseSettings& settings, double v);

// S = E(a,b) + E(a',b) + E(a,b') - E(a',b'). Closed-form path: e_values
// and s_value only, sigmas are zero.
ChshResult chsh_s(const ChshSettings& settings, double v);

// Gaussian indistinguishability envelope scaling base_visibility by
// exp(-4 ln2 (delta/FWHM)^2).
double effective_visibility(const TwoPhotonModel& model, double delta_mm);

}  // namespace etbell

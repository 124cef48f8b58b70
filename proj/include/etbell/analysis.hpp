#pragma once

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "etbell/quantum.hpp"
#include "etbell/topology.hpp"

namespace etbell {

// Turns event streams into physics numbers: windowed coincidence counting,
// accidental estimation and subtraction, fringe fitting, and the CHSH
// estimate with Poisson error propagation.

enum class PairingRule { AllPairs, NearestNoReuse };
enum class AccidentalMethod { FromSingles, FromShiftedWindow };

struct CoincidenceWindow {
  double width_s = 4e-9;
  PairingRule pairing = PairingRule::NearestNoReuse;
  // Fixed Alice->Bob delay the window is centered on; cable/fiber transit
  // asymmetry is dialed out here, as in the electronics.
  double center_s = 0.0;
};

struct CountTable {
  // counts[i-1][j-1] for Alice detector i, Bob detector j. Real-valued so
  // exact-expectation tables flow through the same estimators; event
  // counting always stores integers.
  std::array<std::array<double, 2>, 2> counts{};
  double integration_time_s = 0.0;
  PhaseSettings settings{};
  bool net = false;

  double total() const;
};

struct AccidentalEstimate {
  std::array<std::array<double, 2>, 2> rate_hz{};
  AccidentalMethod method = AccidentalMethod::FromSingles;
};

struct FringeFit {
  double amplitude = 0.0;
  double offset = 0.0;
  double phase0 = 0.0;
  double visibility = 0.0;  // amplitude / offset, clamped into [0, 1]
  double amplitude_err = 0.0;
  double offset_err = 0.0;
  double phase0_err = 0.0;
  double visibility_err = 0.0;
  double chi2 = 0.0;
  int ndf = 0;
  bool degenerate_phase = false;
  bool clamped = false;
};

// One point of a fringe scan: Alice's phase and the counts taken there.
using FringePoint = std::pair<double, CountTable>;

CountTable count_coincidences(const EventStream& stream_a,
                              const EventStream& stream_b,
                              const CoincidenceWindow& window);

double accidental_rate_from_singles(double rate_a_hz, double rate_b_hz,
                                    const CoincidenceWindow& window);

// Per-detector singles rates -> per-pair accidental rates.
AccidentalEstimate accidentals_from_singles(double alice_det1_hz,
                                            double alice_det2_hz,
                                            double bob_det1_hz,
                                            double bob_det2_hz,
                                            const CoincidenceWindow& window);

// Counts coincidences in a window displaced by shift_s from the true
// center, where only uncorrelated pairs can land.
AccidentalEstimate accidentals_from_shifted_window(
    const EventStream& stream_a, const EventStream& stream_b,
    const CoincidenceWindow& window, double shift_s);

CountTable subtract_accidentals(const CountTable& table,
                                const AccidentalEstimate& estimate);

// Weighted least squares of N(phi) = offset * (1 + visibility*cos(phi +
// phase0)) on the (i, j) detector pair, with Poisson weights refined over a
// few reweighting passes. Parameter errors come from the covariance of the
// final pass.
FringeFit fit_fringe(std::span<const FringePoint> points, int detector_a,
                     int detector_b);

// Tables ordered (a,b), (a',b), (a,b'), (a',b'). E per table, sigma_E by
// Poisson propagation, S = e1 + e2 + e3 - e4, significance = (S-2)/sigma_S.
ChshResult estimate_chsh(const std::array<CountTable, 4>& tables);

}  // namespace etbell

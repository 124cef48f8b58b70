#include "etbell/quantum.hpp"

#include <cmath>
#include <numbers>

#include "etbell/common.hpp"

namespace etbell {

namespace {

void check_visibility(double v) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ValidationError("visibility must be in [0, 1]");
  }
}

void check_phases(const PhaseSettings& s) {
  if (!std::isfinite(s.phi_a) || !std::isfinite(s.phi_b)) {
    throw ValidationError("phases must be finite");
  }
}

void check_detector(int d) {
  if (d != 1 && d != 2) {
    throw ValidationError("detector index must be 1 or 2");
  }
}

}  // namespace

ChshSettings ChshSettings::canonical() {
  const double q = std::numbers::pi / 4.0;
  return ChshSettings{q, -q, 0.0, 2.0 * q};
}

void TwoPhotonModel::validate() const {
  if (!(base_visibility >= 0.0 && base_visibility <= 1.0)) {
    throw ValidationError("base_visibility must be in [0, 1]");
  }
  if (!(envelope_fwhm_mm > 0.0)) {
    throw ValidationError("envelope_fwhm_mm must be > 0");
  }
  if (!std::isfinite(path_imbalance_offset_mm)) {
    throw ValidationError("path_imbalance_offset_mm must be finite");
  }
}

double cross_coincidence_probability(const PhaseSettings& settings,
                                     int detector_a, int detector_b,
                                     double v) {
  check_phases(settings);
  check_visibility(v);
  check_detector(detector_a);
  check_detector(detector_b);
  // Sign convention: Bob's phase is applied on the conjugate port, so the
  // fringe argument is phi_a - phi_b. With that, the canonical settings
  // reach the maximal S of the cosine law.
  const double sign = ((detector_a + detector_b) % 2 == 0) ? 1.0 : -1.0;
  return 0.125 * (1.0 + sign * v * std::cos(settings.phi_a - settings.phi_b));
}

double correlation_e(const PhaseSettings& settings, double v) {
  check_phases(settings);
  check_visibility(v);
  return v * std::cos(settings.phi_a - settings.phi_b);
}

ChshResult chsh_s(const ChshSettings& settings, double v) {
  ChshResult r;
  r.e_values[0] = correlation_e({settings.phi_a, settings.phi_b}, v);
  r.e_values[1] = correlation_e({settings.phi_a_prime, settings.phi_b}, v);
  r.e_values[2] = correlation_e({settings.phi_a, settings.phi_b_prime}, v);
  r.e_values[3] = correlation_e({settings.phi_a_prime, settings.phi_b_prime}, v);
  r.s_value = r.e_values[0] + r.e_values[1] + r.e_values[2] - r.e_values[3];
  return r;
}

double effective_visibility(const TwoPhotonModel& model, double delta_mm) {
  model.validate();
  const double x = delta_mm / model.envelope_fwhm_mm;
  return model.base_visibility * std::exp(-4.0 * std::numbers::ln2 * x * x);
}

}  // namespace etbell

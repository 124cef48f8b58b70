#include "etbell/stabilization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "etbell/common.hpp"

namespace etbell {

void NoiseModel::validate() const {
  if (drift_rad_per_sqrt_s < 0.0) {
    throw ValidationError("drift_rad_per_sqrt_s must be >= 0");
  }
  if (!(sample_interval_s > 0.0)) {
    throw ValidationError("sample_interval_s must be > 0");
  }
}

void WavelengthPair::validate() const {
  if (!(signal_nm > 0.0) || !(feedback_nm > 0.0)) {
    throw ValidationError("wavelengths must be > 0");
  }
}

double ControllerConfig::default_actuator_range() {
  // 5 mm stretcher expansion, n = 1.45, as phase at the 806 nm signal.
  return kTau * (5.0e-3 * 1.45) / 806.0e-9;
}

void ControllerConfig::validate() const {
  if (!(loop_rate_hz > 0.0)) throw ValidationError("loop_rate_hz must be > 0");
  if (!(actuator_range_rad > kTau)) {
    throw ValidationError("actuator_range_rad must exceed one fringe (2 pi)");
  }
  if (deadband_rad < 0.0) throw ValidationError("deadband_rad must be >= 0");
}

void step_noise(LockLoopState& state, const NoiseModel& noise, Rng& rng) {
  noise.validate();
  state.drift_phase +=
      noise.drift_rad_per_sqrt_s * std::sqrt(noise.sample_interval_s) *
      rng.gauss();
}

double pid_update(double error, double dt, double kp, double ki, double kd,
                  double& integrator, double& previous_error, bool& first) {
  integrator += error * dt;
  const double derivative = first ? 0.0 : (error - previous_error) / dt;
  previous_error = error;
  first = false;
  return kp * error + ki * integrator + kd * derivative;
}

namespace {

double fringe_intensity(double residual_fb) {
  return 0.5 * (1.0 + std::cos(residual_fb));
}

// Signed residual estimate at the feedback wavelength. The intensity gives
// |phase| mod 2pi; the sign (and fringe index) is picked by matching both
// the kept hypothesis and its mirror against the prediction from the known
// actuator/set-point moves since the last tick.
double estimate_phase_fb(LockLoopState& state, double intensity,
                         double moves_fb) {
  const double mag = std::acos(std::clamp(2.0 * intensity - 1.0, -1.0, 1.0));
  if (!state.estimator_seeded) {
    state.estimator_seeded = true;
    return mag;  // arbitrary side; the next move resolves it
  }
  const double pred_keep = state.est_phase_fb + moves_fb;
  const double pred_flip = -state.est_phase_fb + moves_fb;

  double best_cand = mag;
  double best_keep = std::numeric_limits<double>::infinity();
  double best_flip_cand = mag;
  double best_flip = std::numeric_limits<double>::infinity();
  for (int k = -1; k <= 1; ++k) {
    for (double sgn : {1.0, -1.0}) {
      const double cand = sgn * mag + k * kTau;
      const double dk = std::fabs(cand - pred_keep);
      if (dk < best_keep) {
        best_keep = dk;
        best_cand = cand;
      }
      const double df = std::fabs(cand - pred_flip);
      if (df < best_flip) {
        best_flip = df;
        best_flip_cand = cand;
      }
    }
  }
  // Mild hysteresis so the belief does not chatter when both hypotheses
  // explain the data equally well (near the fringe extremes).
  double chosen;
  double dist;
  if (best_flip + 0.02 < best_keep) {
    chosen = best_flip_cand;
    dist = best_flip;
  } else {
    chosen = best_cand;
    dist = best_keep;
  }
  if (dist > std::numbers::pi / 2.0) {
    ++state.reset_count;
  }
  return chosen;
}

}  // namespace

void step_controller(LockLoopState& state, const ControllerConfig& config,
                     const WavelengthPair& wavelengths) {
  config.validate();
  wavelengths.validate();
  const double conv = wavelengths.fb_per_signal();
  const double dt = 1.0 / config.loop_rate_hz;

  // Measure at the pre-update actuator position.
  const double residual_pre =
      state.drift_phase + state.actuator_phase - state.set_point;
  const double intensity = fringe_intensity(residual_pre * conv);

  const double moves_fb =
      ((state.actuator_phase - state.prev_actuator) -
       (state.set_point - state.prev_set_point)) *
      conv;
  state.est_phase_fb = estimate_phase_fb(state, intensity, moves_fb);
  state.prev_actuator = state.actuator_phase;
  state.prev_set_point = state.set_point;

  double error = -state.est_phase_fb / conv;  // signal radians
  if (std::fabs(error) < config.deadband_rad) error = 0.0;

  const double integrator_before = state.integrator;
  double u = pid_update(error, dt, config.kp, config.ki, config.kd,
                        state.integrator, state.previous_error,
                        state.pid_first);
  const double limit = config.actuator_range_rad / 2.0;
  if (u > limit || u < -limit) {
    ++state.saturation_count;
    state.integrator = integrator_before;  // anti-windup: hold the integral
    if (config.slip_reset) {
      // Re-center by whole feedback fringes; this keeps the feedback lock
      // but steps the signal phase by 2pi(1/conv - 1) per slipped fringe.
      const double fringe_sig = kTau / conv;
      const double slip = std::round(u / fringe_sig) * fringe_sig;
      state.integrator -= slip / std::max(config.ki, 1e-12);
      ++state.reset_count;
      u = std::clamp(u - slip, -limit, limit);
    } else {
      u = std::clamp(u, -limit, limit);
    }
  }
  state.actuator_phase = u;

  state.residual_phase =
      state.drift_phase + state.actuator_phase - state.set_point;
  state.feedback_intensity = fringe_intensity(state.residual_phase * conv);
}

LockRun run_lock(double duration_s, const NoiseModel& noise,
                 const ControllerConfig& config,
                 const WavelengthPair& wavelengths, uint64_t seed,
                 const std::vector<SetPointSwitch>& schedule, int decimation,
                 double summary_warmup_s) {
  if (!(duration_s > 0.0)) throw ValidationError("duration must be > 0");
  if (decimation < 1) throw ValidationError("decimation must be >= 1");
  noise.validate();
  config.validate();
  wavelengths.validate();

  LockRun run;
  LockLoopState state;
  state.set_point = config.set_point_rad;
  state.prev_set_point = config.set_point_rad;
  Rng rng(derive_seed(seed, {4}));

  const int64_t steps =
      static_cast<int64_t>(std::llround(duration_s * config.loop_rate_hz));
  run.residual_signal.reserve(static_cast<size_t>(steps));
  size_t next_switch = 0;

  double sum = 0.0, sum_sq = 0.0, sum_intensity = 0.0;
  int64_t tallied = 0;

  for (int64_t k = 0; k < steps; ++k) {
    state.time_s = static_cast<double>(k) / config.loop_rate_hz;
    while (next_switch < schedule.size() &&
           schedule[next_switch].time_s <= state.time_s) {
      state.set_point = schedule[next_switch].set_point_rad;
      ++next_switch;
    }
    step_noise(state, noise, rng);
    step_controller(state, config, wavelengths);
    run.residual_signal.push_back(state.residual_phase);
    if (k % decimation == 0) run.series.push_back(state);
    if (state.time_s >= summary_warmup_s) {
      sum += state.residual_phase;
      sum_sq += state.residual_phase * state.residual_phase;
      sum_intensity += state.feedback_intensity;
      ++tallied;
    }
  }

  auto& s = run.summary;
  s.steps = steps;
  s.saturation_count = state.saturation_count;
  s.reset_count = state.reset_count;
  if (tallied > 0) {
    s.residual_mean = sum / static_cast<double>(tallied);
    s.residual_rms = std::sqrt(sum_sq / static_cast<double>(tallied));
    s.mean_intensity = sum_intensity / static_cast<double>(tallied);
  }
  return run;
}

}  // namespace etbell

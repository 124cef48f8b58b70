#pragma once

#include <cstdint>
#include <vector>

#include "etbell/rng.hpp"

namespace etbell {

// Discrete-time simulation of the long interferometer's phase drift and the
// closed-loop PID lock driving a fiber-stretcher actuator from the intensity
// of an off-wavelength feedback laser.
//
// All phases are kept in radians at the signal wavelength. The feedback
// photodiode sees the same optical-path change scaled by the wavelength
// ratio, so the intensity is (1 + cos(residual * signal/feedback)) / 2.
// Because that fringe peaks at zero residual, intensity alone cannot tell
// which side of the fringe the phase sits on; the controller keeps a signed
// phase estimate and disambiguates the sign against its own actuator moves
// (the measured change of the signal after a known move).

struct NoiseModel {
  double drift_rad_per_sqrt_s = 10.0;  // Wiener-process scale, signal radians
  double sample_interval_s = 2e-4;

  void validate() const;
};

struct WavelengthPair {
  double signal_nm = 806.0;
  double feedback_nm = 852.0;

  void validate() const;
  // residual_fb = residual_signal * fb_per_signal()
  double fb_per_signal() const { return signal_nm / feedback_nm; }
};

struct ControllerConfig {
  double kp = 0.4;
  double ki = 2500.0;
  double kd = 0.0;
  double set_point_rad = 0.0;   // Bob's phi_b target, 0 or pi/2 in practice
  double loop_rate_hz = 5000.0;
  // Total actuator span in signal radians; the default corresponds to a
  // 5 mm fiber expansion (refractive index 1.45) at the signal wavelength.
  double actuator_range_rad = default_actuator_range();
  double deadband_rad = 0.0;    // suppress corrections below this error
  bool slip_reset = false;      // on saturation, recenter by whole feedback fringes

  static double default_actuator_range();
  void validate() const;
};

struct LockLoopState {
  double time_s = 0.0;
  double drift_phase = 0.0;     // accumulated environmental phase
  double actuator_phase = 0.0;  // stretcher contribution
  double set_point = 0.0;
  double residual_phase = 0.0;  // drift + actuator - set_point
  double feedback_intensity = 1.0;
  double integrator = 0.0;
  double previous_error = 0.0;
  bool pid_first = true;
  // estimator internals
  double est_phase_fb = 0.0;    // signed residual estimate at feedback wavelength
  double prev_actuator = 0.0;
  double prev_set_point = 0.0;
  bool estimator_seeded = false;
  // counters
  int64_t saturation_count = 0;
  int64_t reset_count = 0;
};

// Advances the environmental drift by one Wiener increment.
void step_noise(LockLoopState& state, const NoiseModel& noise, Rng& rng);

// One controller tick: measure intensity, update the signed phase estimate,
// run the PID law u = kp*e + ki*sum(e dt) + kd*de/dt, clamp to the actuator
// range (flagging saturation) and apply.
void step_controller(LockLoopState& state, const ControllerConfig& config,
                     const WavelengthPair& wavelengths);

// Positional PID core, exposed for direct testing.
double pid_update(double error, double dt, double kp, double ki, double kd,
                  double& integrator, double& previous_error, bool& first);

struct SetPointSwitch {
  double time_s = 0.0;
  double set_point_rad = 0.0;
};

struct LockSummary {
  double residual_rms = 0.0;       // signal radians, after warmup
  double residual_mean = 0.0;
  double mean_intensity = 0.0;
  int64_t saturation_count = 0;
  int64_t reset_count = 0;
  int64_t steps = 0;
};

struct LockRun {
  std::vector<LockLoopState> series;     // decimated samples
  std::vector<double> residual_signal;   // full-rate residual trace
  LockSummary summary;
};

LockRun run_lock(double duration_s, const NoiseModel& noise,
                 const ControllerConfig& config,
                 const WavelengthPair& wavelengths, uint64_t seed,
                 const std::vector<SetPointSwitch>& schedule = {},
                 int decimation = 1, double summary_warmup_s = 0.0);

}  // namespace etbell

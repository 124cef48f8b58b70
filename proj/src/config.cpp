#include "etbell/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "etbell/common.hpp"

namespace etbell {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': bad number '" + v + "'");
  }
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': bad integer '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const unsigned long long i = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': bad integer '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ValidationError("config key '" + key + "': bad boolean '" + v + "'");
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config file " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) +
                            ": expected 'key = value'");
    }
    cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::apply(const std::string& key, const std::string& value) {
  if (key == "topology.kind") {
    if (value == "hug") topology.kind = TopologyKind::Hug;
    else if (value == "franson") topology.kind = TopologyKind::Franson;
    else throw ValidationError("topology.kind must be hug or franson");
  } else if (key == "topology.long_short_difference_m") {
    topology.long_short_difference_m = parse_double(key, value);
  } else if (key == "topology.long_arm_bob_km") {
    topology.long_arm_length_bob_km = parse_double(key, value);
  } else if (key == "topology.short_arm_alice_m") {
    topology.short_arm_length_alice_m = parse_double(key, value);
  } else if (key == "topology.delay_offset_mm") {
    topology.delay_offset_mm = parse_double(key, value);
  } else if (key == "topology.group_velocity_mps") {
    topology.group_velocity_mps = parse_double(key, value);
  } else if (key == "topology.jitter_sigma_ps") {
    topology.jitter_sigma_s = parse_double(key, value) * 1e-12;
  } else if (key == "window.width_ns") {
    window.width_s = parse_double(key, value) * 1e-9;
    topology.coincidence_window_s = window.width_s;
  } else if (key == "window.pairing") {
    if (value == "nearest") window.pairing = PairingRule::NearestNoReuse;
    else if (value == "allpairs") window.pairing = PairingRule::AllPairs;
    else throw ValidationError("window.pairing must be nearest or allpairs");
  } else if (key == "window.center_ps") {
    if (value == "auto") {
      window_center_auto = true;
    } else {
      window_center_auto = false;
      window.center_s = parse_double(key, value) * 1e-12;
    }
  } else if (key == "source.cross_rate_hz") {
    cross_rate_hz = parse_double(key, value);
  } else if (key == "source.singles_alice_hz") {
    source.singles_rate_alice_hz = parse_double(key, value);
  } else if (key == "source.singles_bob_hz") {
    source.singles_rate_bob_hz = parse_double(key, value);
  } else if (key == "source.dark_hz") {
    source.dark_rate_hz = parse_double(key, value);
  } else if (key == "model.base_visibility") {
    model.base_visibility = parse_double(key, value);
  } else if (key == "model.envelope_fwhm_mm") {
    model.envelope_fwhm_mm = parse_double(key, value);
  } else if (key == "model.imbalance_offset_mm") {
    model.path_imbalance_offset_mm = parse_double(key, value);
  } else if (key == "noise.drift_rad_per_sqrt_s") {
    noise.drift_rad_per_sqrt_s = parse_double(key, value);
  } else if (key == "controller.kp") {
    controller.kp = parse_double(key, value);
  } else if (key == "controller.ki") {
    controller.ki = parse_double(key, value);
  } else if (key == "controller.kd") {
    controller.kd = parse_double(key, value);
  } else if (key == "controller.set_point_rad") {
    controller.set_point_rad = parse_double(key, value);
  } else if (key == "controller.loop_rate_hz") {
    controller.loop_rate_hz = parse_double(key, value);
  } else if (key == "controller.actuator_range_rad") {
    controller.actuator_range_rad = parse_double(key, value);
  } else if (key == "controller.deadband_rad") {
    controller.deadband_rad = parse_double(key, value);
  } else if (key == "controller.slip_reset") {
    controller.slip_reset = parse_bool(key, value);
  } else if (key == "chsh.points_per_curve") {
    chsh_points_per_curve = static_cast<int>(parse_int(key, value));
  } else if (key == "chsh.point_seconds") {
    chsh_point_seconds = parse_double(key, value);
  } else if (key == "chsh.setting_seconds") {
    chsh_setting_seconds = parse_double(key, value);
  } else if (key == "chsh.lock_coupled") {
    chsh_lock_coupled = parse_bool(key, value);
  } else if (key == "scan.delay_min_mm") {
    scan_delay_min_mm = parse_double(key, value);
  } else if (key == "scan.delay_max_mm") {
    scan_delay_max_mm = parse_double(key, value);
  } else if (key == "scan.delay_points") {
    scan_delay_points = static_cast<int>(parse_int(key, value));
  } else if (key == "scan.phase_points") {
    scan_phase_points = static_cast<int>(parse_int(key, value));
  } else if (key == "scan.point_seconds") {
    scan_point_seconds = parse_double(key, value);
  } else if (key == "scan.stabilization") {
    scan_stabilization_on = parse_bool(key, value);
  } else if (key == "attack.strategy_file") {
    attack_strategy_file = value;
  } else if (key == "attack.mc_seconds") {
    attack_mc_seconds = parse_double(key, value);
  } else if (key == "attack.exhaustive_n_lambda") {
    attack_exhaustive_n_lambda = static_cast<int>(parse_int(key, value));
  } else if (key == "lock.duration_s") {
    lock_duration_s = parse_double(key, value);
  } else if (key == "lock.decimation") {
    lock_decimation = static_cast<int>(parse_int(key, value));
  } else if (key == "lock.switch_time_s") {
    lock_switch_time_s = parse_double(key, value);
  } else if (key == "lock.switch_set_point_rad") {
    lock_switch_set_point_rad = parse_double(key, value);
  } else if (key == "lock.warmup_s") {
    lock_warmup_s = parse_double(key, value);
  } else if (key == "run.seed") {
    seed = parse_u64(key, value);
  } else if (key == "run.workers") {
    workers = static_cast<int>(parse_int(key, value));
  } else if (key == "run.format") {
    if (value == "csv") format = OutputFormat::Csv;
    else if (value == "json") format = OutputFormat::Json;
    else throw ValidationError("run.format must be csv or json");
  } else if (key == "run.exact") {
    exact = parse_bool(key, value);
  } else if (key == "run.emit_events") {
    emit_events = parse_bool(key, value);
  } else {
    throw ValidationError("unknown config key '" + key + "'");
  }
}

void RunConfig::validate() const {
  topology.validate();
  SourceModel src = source;
  src.pair_rate_hz = pair_rate_hz();
  src.validate();
  model.validate();
  noise.validate();
  controller.validate();
  wavelengths.validate();
  if (cross_rate_hz < 0.0) {
    throw ValidationError("source.cross_rate_hz must be >= 0");
  }
  if (!(window.width_s > 0.0)) {
    throw ValidationError("window.width_ns must be > 0");
  }
  if (chsh_points_per_curve < 6) {
    throw ValidationError("chsh.points_per_curve must be >= 6");
  }
  if (!(chsh_point_seconds > 0.0) || !(chsh_setting_seconds > 0.0)) {
    throw ValidationError("chsh durations must be > 0");
  }
  if (scan_delay_min_mm < -75.0 || scan_delay_max_mm > 75.0 ||
      !(scan_delay_min_mm <= scan_delay_max_mm)) {
    throw ValidationError("scan delay range must lie within +/-75 mm");
  }
  if (scan_delay_points < 2) {
    throw ValidationError("scan.delay_points must be >= 2");
  }
  if (scan_phase_points < 6) {
    throw ValidationError("scan.phase_points must be >= 6");
  }
  if (!(scan_point_seconds > 0.0)) {
    throw ValidationError("scan.point_seconds must be > 0");
  }
  if (attack_mc_seconds < 0.0) {
    throw ValidationError("attack.mc_seconds must be >= 0");
  }
  if (attack_exhaustive_n_lambda < 0 || attack_exhaustive_n_lambda > 4) {
    throw ValidationError("attack.exhaustive_n_lambda must be in [0, 4]");
  }
  if (!(lock_duration_s > 0.0)) {
    throw ValidationError("lock.duration_s must be > 0");
  }
  if (lock_decimation < 1) {
    throw ValidationError("lock.decimation must be >= 1");
  }
  if (lock_warmup_s < 0.0) {
    throw ValidationError("lock.warmup_s must be >= 0");
  }
  if (workers < 1) {
    throw ValidationError("run.workers must be >= 1");
  }
}

CoincidenceWindow RunConfig::resolved_window() const {
  CoincidenceWindow w = window;
  if (window_center_auto) {
    w.center_s = topology.cross_center_delay_s();
  }
  return w;
}

std::string RunConfig::canonical_text() const {
  std::ostringstream os;
  auto put = [&os](const std::string& key, const std::string& value) {
    os << key << " = " << value << "\n";
  };
  auto putd = [&put](const std::string& key, double v) {
    put(key, fmt_g(v, 17));
  };
  auto puti = [&put](const std::string& key, int64_t v) {
    put(key, std::to_string(v));
  };
  auto putb = [&put](const std::string& key, bool v) {
    put(key, v ? "true" : "false");
  };
  // Keys are emitted in sorted order.
  puti("attack.exhaustive_n_lambda", attack_exhaustive_n_lambda);
  putd("attack.mc_seconds", attack_mc_seconds);
  put("attack.strategy_file", attack_strategy_file);
  putb("chsh.lock_coupled", chsh_lock_coupled);
  putd("chsh.point_seconds", chsh_point_seconds);
  puti("chsh.points_per_curve", chsh_points_per_curve);
  putd("chsh.setting_seconds", chsh_setting_seconds);
  putd("controller.actuator_range_rad", controller.actuator_range_rad);
  putd("controller.deadband_rad", controller.deadband_rad);
  putd("controller.kd", controller.kd);
  putd("controller.ki", controller.ki);
  putd("controller.kp", controller.kp);
  putd("controller.loop_rate_hz", controller.loop_rate_hz);
  putd("controller.set_point_rad", controller.set_point_rad);
  putb("controller.slip_reset", controller.slip_reset);
  puti("lock.decimation", lock_decimation);
  putd("lock.duration_s", lock_duration_s);
  putd("lock.switch_set_point_rad", lock_switch_set_point_rad);
  putd("lock.switch_time_s", lock_switch_time_s);
  putd("lock.warmup_s", lock_warmup_s);
  putd("model.base_visibility", model.base_visibility);
  putd("model.envelope_fwhm_mm", model.envelope_fwhm_mm);
  putd("model.imbalance_offset_mm", model.path_imbalance_offset_mm);
  putd("noise.drift_rad_per_sqrt_s", noise.drift_rad_per_sqrt_s);
  putb("run.emit_events", emit_events);
  putb("run.exact", exact);
  put("run.format", format == OutputFormat::Csv ? "csv" : "json");
  put("run.seed", std::to_string(seed));
  puti("run.workers", workers);
  putd("scan.delay_max_mm", scan_delay_max_mm);
  putd("scan.delay_min_mm", scan_delay_min_mm);
  puti("scan.delay_points", scan_delay_points);
  puti("scan.phase_points", scan_phase_points);
  putd("scan.point_seconds", scan_point_seconds);
  putb("scan.stabilization", scan_stabilization_on);
  putd("source.cross_rate_hz", cross_rate_hz);
  putd("source.dark_hz", source.dark_rate_hz);
  putd("source.singles_alice_hz", source.singles_rate_alice_hz);
  putd("source.singles_bob_hz", source.singles_rate_bob_hz);
  putd("topology.delay_offset_mm", topology.delay_offset_mm);
  putd("topology.group_velocity_mps", topology.group_velocity_mps);
  putd("topology.jitter_sigma_ps", topology.jitter_sigma_s * 1e12);
  put("topology.kind",
      topology.kind == TopologyKind::Hug ? "hug" : "franson");
  putd("topology.long_arm_bob_km", topology.long_arm_length_bob_km);
  putd("topology.long_short_difference_m", topology.long_short_difference_m);
  putd("topology.short_arm_alice_m", topology.short_arm_length_alice_m);
  put("window.center_ps",
      window_center_auto ? "auto" : fmt_g(window.center_s * 1e12, 17));
  put("window.pairing",
      window.pairing == PairingRule::NearestNoReuse ? "nearest" : "allpairs");
  putd("window.width_ns", window.width_s * 1e9);
  return os.str();
}

uint64_t RunConfig::hash() const { return fnv1a64(canonical_text()); }

}  // namespace etbell

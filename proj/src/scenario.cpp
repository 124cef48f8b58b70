#include "etbell/scenario.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "etbell/common.hpp"
#include "etbell/rng.hpp"

namespace etbell {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<double, 2> kPhiB = {0.0, std::numbers::pi / 2.0};
constexpr std::array<const char*, 4> kPairNames = {"11", "12", "21", "22"};
constexpr std::array<const char*, 4> kSettingNames = {"ab", "a'b", "ab'",
                                                      "a'b'"};

std::string hash_hex(uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << content;
}

double finite_or_zero(double v) { return std::isfinite(v) ? v : 0.0; }

// Lock segment backing one acquisition point. The residual trace starts
// after the warmup so points sample the stationary locked (or free-running)
// behaviour.
struct PointLock {
  std::vector<double> residual;
  double rate = 5000.0;
  LockSummary summary;

  double at(double t_s) const {
    if (residual.empty()) return 0.0;
    const auto idx = static_cast<size_t>(std::max(0.0, t_s * rate));
    return residual[std::min(idx, residual.size() - 1)];
  }
};

PointLock simulate_point_lock(const RunConfig& cfg, double set_point,
                              double seconds, bool stabilize, uint64_t seed) {
  PointLock pl;
  pl.rate = cfg.controller.loop_rate_hz;
  ControllerConfig cc = cfg.controller;
  cc.set_point_rad = set_point;
  if (!stabilize) cc.kp = cc.ki = cc.kd = 0.0;
  LockRun run = run_lock(cfg.lock_warmup_s + seconds, cfg.noise, cc,
                         cfg.wavelengths, seed, {}, 1 << 30, cfg.lock_warmup_s);
  const auto skip = static_cast<size_t>(
      std::llround(cfg.lock_warmup_s * cc.loop_rate_hz));
  if (skip < run.residual_signal.size()) {
    pl.residual.assign(run.residual_signal.begin() + skip,
                       run.residual_signal.end());
  }
  pl.summary = run.summary;
  return pl;
}

void accumulate_lock(LockAggregate& agg, const LockSummary& s) {
  agg.mean_residual_rms += s.residual_rms;
  agg.max_residual_rms = std::max(agg.max_residual_rms, s.residual_rms);
  agg.saturation_count += s.saturation_count;
  agg.reset_count += s.reset_count;
  ++agg.segments;
}

void finish_lock(LockAggregate& agg) {
  if (agg.segments > 0) {
    agg.mean_residual_rms /= static_cast<double>(agg.segments);
  }
}

SourceModel effective_source(const RunConfig& cfg) {
  SourceModel src = cfg.source;
  src.pair_rate_hz = cfg.pair_rate_hz();
  return src;
}

bool has_background(const RunConfig& cfg) {
  return cfg.source.singles_rate_alice_hz > 0.0 ||
         cfg.source.singles_rate_bob_hz > 0.0 || cfg.source.dark_rate_hz > 0.0;
}

AccidentalEstimate config_accidentals(const RunConfig& cfg) {
  const double ra = cfg.source.singles_rate_alice_hz + cfg.source.dark_rate_hz;
  const double rb = cfg.source.singles_rate_bob_hz + cfg.source.dark_rate_hz;
  return accidentals_from_singles(ra, ra, rb, rb, cfg.resolved_window());
}

// Expected-value table for the exact-probabilities mode.
CountTable exact_cross_table(const RunConfig& cfg, const TopologyConfig& topo,
                             const PhaseSettings& ph, double seconds) {
  CountTable t;
  t.integration_time_s = seconds;
  t.settings = ph;
  const double v = effective_visibility(
      cfg.model, topo.delay_offset_mm + cfg.model.path_imbalance_offset_mm);
  const AccidentalEstimate acc = config_accidentals(cfg);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      t.counts[i][j] =
          cfg.pair_rate_hz() * seconds *
              cross_coincidence_probability(ph, i + 1, j + 1, v) +
          acc.rate_hz[i][j] * seconds;
    }
  }
  return t;
}

CountTable table_from_stream(const RunConfig& cfg, const EventStream& stream,
                             const PhaseSettings& tag) {
  auto [a, b] = split_by_party(stream);
  CountTable t = count_coincidences(a, b, cfg.resolved_window());
  t.settings = tag;
  return t;
}

fs::path events_dir(const RunConfig& cfg) {
  fs::path d = fs::path(cfg.out_dir) / "events";
  fs::create_directories(d);
  return d;
}

// Continuous phi_a ramp across an acquisition sweep: point k covers one
// step of width delta centered on k*delta, so the sweep is a single linear
// voltage ramp over the curve.
double ramp_phase(int point_index, double delta, double t_frac) {
  return (static_cast<double>(point_index) + t_frac - 0.5) * delta;
}

json fit_to_json(const FringeFit& f) {
  return json{{"offset", f.offset},
              {"offset_err", f.offset_err},
              {"amplitude", f.amplitude},
              {"amplitude_err", f.amplitude_err},
              {"phase0", f.phase0},
              {"phase0_err", f.phase0_err},
              {"visibility", f.visibility},
              {"visibility_err", f.visibility_err},
              {"chi2", f.chi2},
              {"ndf", f.ndf},
              {"degenerate_phase", f.degenerate_phase},
              {"clamped", f.clamped}};
}

std::string fit_csv_row(const FringeFit& f) {
  std::ostringstream os;
  os << fmt_g(f.offset) << ',' << fmt_g(f.offset_err) << ','
     << fmt_g(f.amplitude) << ',' << fmt_g(f.amplitude_err) << ','
     << fmt_g(f.phase0) << ',' << fmt_g(f.phase0_err) << ','
     << fmt_g(f.visibility) << ',' << fmt_g(f.visibility_err) << ','
     << fmt_g(f.chi2) << ',' << f.ndf << ','
     << (f.degenerate_phase ? 1 : 0) << ',' << (f.clamped ? 1 : 0);
  return os.str();
}

json chsh_to_json(const ChshResult& r, const std::array<CountTable, 4>& tables) {
  json settings = json::array();
  for (int s = 0; s < 4; ++s) {
    settings.push_back({{"label", kSettingNames[s]},
                        {"phi_a", tables[s].settings.phi_a},
                        {"phi_b", tables[s].settings.phi_b},
                        {"n_total", tables[s].total()},
                        {"e", r.e_values[s]},
                        {"sigma_e", r.e_sigmas[s]}});
  }
  json out{{"settings", settings},
           {"s", r.s_value},
           {"sigma_s", r.s_sigma}};
  if (r.s_sigma > 0.0 && std::isfinite(r.significance)) {
    out["significance"] = r.significance;
  }
  return out;
}

}  // namespace

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  if (workers <= 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int n_threads = std::min(workers, n);
  std::atomic<int> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto body = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(body);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

void prepare_out_dir(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const fs::path snap = fs::path(cfg.out_dir) / "config.snapshot";
  const std::string text = cfg.canonical_text();
  if (fs::exists(snap)) {
    std::ifstream is(snap, std::ios::binary);
    std::stringstream buf;
    buf << is.rdbuf();
    if (buf.str() != text && !cfg.force) {
      throw ValidationError(
          "output directory holds a run with a different config (hash " +
          hash_hex(fnv1a64(buf.str())) + " vs " + hash_hex(cfg.hash()) +
          "); pass --force to overwrite");
    }
  }
  write_text_file(snap, text);
}

EnvelopeFit fit_visibility_envelope(
    const std::vector<std::pair<double, double>>& delay_vis) {
  EnvelopeFit fit;
  constexpr double kFloor = 0.08;  // below this the fit sees only noise
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (const auto& [delay, vis] : delay_vis) {
    if (vis < kFloor) continue;
    const double x = delay * delay;
    const double y = std::log(vis);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  fit.points_used = n;
  if (n < 3) return fit;
  const double det = n * sxx - sx * sx;
  if (std::fabs(det) < 1e-12) return fit;
  const double slope = (n * sxy - sx * sy) / det;
  const double intercept = (sy * sxx - sx * sxy) / det;
  if (slope >= 0.0) return fit;
  fit.v0 = std::exp(intercept);
  fit.fwhm_mm = std::sqrt(4.0 * std::numbers::ln2 / -slope);
  fit.valid = true;
  return fit;
}

// ---------------------------------------------------------------------------
// chsh scenario

ChshScenarioResult run_chsh_scenario(const RunConfig& cfg) {
  cfg.validate();
  prepare_out_dir(cfg);
  ChshScenarioResult R;

  const int np = cfg.chsh_points_per_curve;
  const double point_s = cfg.chsh_point_seconds;
  const double delta = kTau / static_cast<double>(np - 1);
  const bool net_meaningful = has_background(cfg);
  const AccidentalEstimate acc = config_accidentals(cfg);
  const SourceModel src = effective_source(cfg);
  const uint64_t cfg_hash = cfg.hash();

  R.has_net = net_meaningful;
  R.curve_points.resize(static_cast<size_t>(2 * np));
  std::vector<LockSummary> lock_summaries(static_cast<size_t>(2 * np + 4));
  std::vector<char> lock_present(static_cast<size_t>(2 * np + 4), 0);

  parallel_for(2 * np, cfg.workers, [&](int idx) {
    const int bi = idx / np;
    const int k = idx % np;
    const double phi_center = static_cast<double>(k) * delta;
    const PhaseSettings tag{phi_center, kPhiB[bi]};
    CurvePoint& cp = R.curve_points[static_cast<size_t>(idx)];
    cp.phi_b_index = bi;
    cp.point_index = k;
    cp.phi_a = phi_center;
    if (cfg.exact) {
      cp.raw = exact_cross_table(cfg, cfg.topology, tag, point_s);
    } else {
      const PointLock lock = simulate_point_lock(
          cfg, kPhiB[bi], point_s, true,
          derive_seed(cfg.seed, {11, static_cast<uint64_t>(idx)}));
      lock_summaries[static_cast<size_t>(idx)] = lock.summary;
      lock_present[static_cast<size_t>(idx)] = 1;
      const bool coupled = cfg.chsh_lock_coupled;
      const PhaseFn fn = [&](double t) {
        return PhaseSettings{
            ramp_phase(k, delta, t / point_s),
            kPhiB[bi] + (coupled ? lock.at(t) : 0.0)};
      };
      EventStream ev = sample_events_modulated(
          cfg.topology, src, cfg.model, fn, point_s,
          derive_seed(cfg.seed, {10, static_cast<uint64_t>(idx)}));
      ev.config_hash = cfg_hash;
      if (cfg.emit_events) {
        std::ostringstream name;
        name << "chsh_b" << bi << "_p" << k << ".events";
        write_events_file((events_dir(cfg) / name.str()).string(), ev);
      }
      cp.raw = table_from_stream(cfg, ev, tag);
    }
    cp.net = net_meaningful ? subtract_accidentals(cp.raw, acc) : cp.raw;
  });

  // Eight fringe fits (two phi_b values x four detector pairs).
  double raw_vis_sum = 0.0, net_vis_sum = 0.0;
  for (int bi = 0; bi < 2; ++bi) {
    std::vector<FringePoint> pts;
    pts.reserve(static_cast<size_t>(np));
    std::vector<FringePoint> net_pts;
    net_pts.reserve(static_cast<size_t>(np));
    for (int k = 0; k < np; ++k) {
      const auto& cp = R.curve_points[static_cast<size_t>(bi * np + k)];
      pts.emplace_back(cp.phi_a, cp.raw);
      net_pts.emplace_back(cp.phi_a, cp.net);
    }
    for (int i = 1; i <= 2; ++i) {
      for (int j = 1; j <= 2; ++j) {
        const int pair = (i - 1) * 2 + (j - 1);
        const int slot = bi * 4 + pair;
        R.raw_fits[static_cast<size_t>(slot)] = fit_fringe(pts, i, j);
        R.net_fits[static_cast<size_t>(slot)] = fit_fringe(net_pts, i, j);
        raw_vis_sum += R.raw_fits[static_cast<size_t>(slot)].visibility;
        net_vis_sum += R.net_fits[static_cast<size_t>(slot)].visibility;
      }
    }
  }
  R.mean_raw_visibility = raw_vis_sum / 8.0;
  R.mean_net_visibility = net_vis_sum / 8.0;

  // Dedicated acquisitions at the canonical CHSH settings.
  const ChshSettings cs = ChshSettings::canonical();
  const std::array<PhaseSettings, 4> setting_phases = {
      {{cs.phi_a, cs.phi_b},
       {cs.phi_a_prime, cs.phi_b},
       {cs.phi_a, cs.phi_b_prime},
       {cs.phi_a_prime, cs.phi_b_prime}}};
  parallel_for(4, cfg.workers, [&](int s) {
    const PhaseSettings& ph = setting_phases[static_cast<size_t>(s)];
    CountTable raw;
    if (cfg.exact) {
      raw = exact_cross_table(cfg, cfg.topology, ph, cfg.chsh_setting_seconds);
    } else {
      const PointLock lock = simulate_point_lock(
          cfg, ph.phi_b, cfg.chsh_setting_seconds, true,
          derive_seed(cfg.seed, {13, static_cast<uint64_t>(s)}));
      lock_summaries[static_cast<size_t>(2 * np + s)] = lock.summary;
      lock_present[static_cast<size_t>(2 * np + s)] = 1;
      const bool coupled = cfg.chsh_lock_coupled;
      const PhaseFn fn = [&](double t) {
        return PhaseSettings{ph.phi_a,
                             ph.phi_b + (coupled ? lock.at(t) : 0.0)};
      };
      EventStream ev = sample_events_modulated(
          cfg.topology, src, cfg.model, fn, cfg.chsh_setting_seconds,
          derive_seed(cfg.seed, {12, static_cast<uint64_t>(s)}));
      ev.config_hash = cfg_hash;
      if (cfg.emit_events) {
        std::ostringstream name;
        name << "chsh_setting" << s << ".events";
        write_events_file((events_dir(cfg) / name.str()).string(), ev);
      }
      raw = table_from_stream(cfg, ev, ph);
    }
    R.setting_tables_raw[static_cast<size_t>(s)] = raw;
    R.setting_tables_net[static_cast<size_t>(s)] =
        net_meaningful ? subtract_accidentals(raw, acc) : raw;
  });
  R.chsh_raw = estimate_chsh(R.setting_tables_raw);
  R.chsh_net =
      net_meaningful ? estimate_chsh(R.setting_tables_net) : R.chsh_raw;

  for (size_t i = 0; i < lock_summaries.size(); ++i) {
    if (lock_present[i]) accumulate_lock(R.lock, lock_summaries[i]);
  }
  finish_lock(R.lock);

  // --- outputs ---
  const fs::path dir(cfg.out_dir);
  const std::string hash_line = "# config_hash " + hash_hex(cfg_hash) + "\n";
  if (cfg.format == OutputFormat::Csv) {
    {
      std::ostringstream os;
      os << hash_line
         << "phi_b_index,phi_b,point,phi_a,pair,raw_counts,net_counts,"
            "normalized\n";
      for (const auto& cp : R.curve_points) {
        for (int i = 0; i < 2; ++i) {
          for (int j = 0; j < 2; ++j) {
            const int pair = i * 2 + j;
            const double offset =
                R.raw_fits[static_cast<size_t>(cp.phi_b_index * 4 + pair)]
                    .offset;
            const double norm =
                offset > 0.0 ? cp.raw.counts[i][j] / offset : 0.0;
            os << cp.phi_b_index << ',' << fmt_g(kPhiB[cp.phi_b_index]) << ','
               << cp.point_index << ',' << fmt_g(cp.phi_a) << ','
               << kPairNames[pair] << ',' << fmt_g(cp.raw.counts[i][j]) << ','
               << fmt_g(cp.net.counts[i][j]) << ',' << fmt_g(norm) << '\n';
          }
        }
      }
      write_text_file(dir / "curves.csv", os.str());
    }
    {
      std::ostringstream os;
      os << hash_line
         << "phi_b_index,pair,kind,offset,offset_err,amplitude,amplitude_err,"
            "phase0,phase0_err,visibility,visibility_err,chi2,ndf,degenerate,"
            "clamped\n";
      for (int slot = 0; slot < 8; ++slot) {
        os << slot / 4 << ',' << kPairNames[slot % 4] << ",raw,"
           << fit_csv_row(R.raw_fits[static_cast<size_t>(slot)]) << '\n';
        os << slot / 4 << ',' << kPairNames[slot % 4] << ",net,"
           << fit_csv_row(R.net_fits[static_cast<size_t>(slot)]) << '\n';
      }
      write_text_file(dir / "fits.csv", os.str());
    }
    {
      std::ostringstream os;
      os << hash_line
         << "kind,setting,phi_a,phi_b,n_total,e,sigma_e\n";
      for (int s = 0; s < 4; ++s) {
        const auto& t = R.setting_tables_raw[static_cast<size_t>(s)];
        os << "raw," << kSettingNames[s] << ',' << fmt_g(t.settings.phi_a)
           << ',' << fmt_g(t.settings.phi_b) << ',' << fmt_g(t.total()) << ','
           << fmt_g(R.chsh_raw.e_values[s]) << ','
           << fmt_g(R.chsh_raw.e_sigmas[s]) << '\n';
      }
      for (int s = 0; s < 4; ++s) {
        const auto& t = R.setting_tables_net[static_cast<size_t>(s)];
        os << "net," << kSettingNames[s] << ',' << fmt_g(t.settings.phi_a)
           << ',' << fmt_g(t.settings.phi_b) << ',' << fmt_g(t.total()) << ','
           << fmt_g(R.chsh_net.e_values[s]) << ','
           << fmt_g(R.chsh_net.e_sigmas[s]) << '\n';
      }
      write_text_file(dir / "chsh.csv", os.str());
    }
    {
      std::ostringstream os;
      os << hash_line << "key,value\n";
      os << "s_raw," << fmt_g(R.chsh_raw.s_value) << '\n';
      os << "sigma_s_raw," << fmt_g(R.chsh_raw.s_sigma) << '\n';
      os << "significance_raw," << fmt_g(finite_or_zero(R.chsh_raw.significance))
         << '\n';
      os << "s_net," << fmt_g(R.chsh_net.s_value) << '\n';
      os << "sigma_s_net," << fmt_g(R.chsh_net.s_sigma) << '\n';
      os << "mean_raw_visibility," << fmt_g(R.mean_raw_visibility) << '\n';
      os << "mean_net_visibility," << fmt_g(R.mean_net_visibility) << '\n';
      os << "lock_mean_residual_rms," << fmt_g(R.lock.mean_residual_rms)
         << '\n';
      os << "lock_saturation_count," << R.lock.saturation_count << '\n';
      os << "lock_reset_count," << R.lock.reset_count << '\n';
      write_text_file(dir / "summary.csv", os.str());
    }
  } else {
    json curves = json::array();
    for (const auto& cp : R.curve_points) {
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          const int pair = i * 2 + j;
          const double offset =
              R.raw_fits[static_cast<size_t>(cp.phi_b_index * 4 + pair)]
                  .offset;
          curves.push_back(
              {{"phi_b_index", cp.phi_b_index},
               {"phi_b", kPhiB[cp.phi_b_index]},
               {"point", cp.point_index},
               {"phi_a", cp.phi_a},
               {"pair", kPairNames[pair]},
               {"raw_counts", cp.raw.counts[i][j]},
               {"net_counts", cp.net.counts[i][j]},
               {"normalized",
                offset > 0.0 ? cp.raw.counts[i][j] / offset : 0.0}});
        }
      }
    }
    json fits = json::array();
    for (int slot = 0; slot < 8; ++slot) {
      json raw = fit_to_json(R.raw_fits[static_cast<size_t>(slot)]);
      raw["phi_b_index"] = slot / 4;
      raw["pair"] = kPairNames[slot % 4];
      raw["kind"] = "raw";
      fits.push_back(raw);
      json net = fit_to_json(R.net_fits[static_cast<size_t>(slot)]);
      net["phi_b_index"] = slot / 4;
      net["pair"] = kPairNames[slot % 4];
      net["kind"] = "net";
      fits.push_back(net);
    }
    json out{{"config_hash", hash_hex(cfg_hash)},
             {"curves", curves},
             {"fits", fits},
             {"chsh_raw", chsh_to_json(R.chsh_raw, R.setting_tables_raw)},
             {"chsh_net", chsh_to_json(R.chsh_net, R.setting_tables_net)},
             {"mean_raw_visibility", R.mean_raw_visibility},
             {"mean_net_visibility", R.mean_net_visibility},
             {"lock",
              {{"mean_residual_rms", R.lock.mean_residual_rms},
               {"max_residual_rms", R.lock.max_residual_rms},
               {"saturation_count", R.lock.saturation_count},
               {"reset_count", R.lock.reset_count}}}};
    write_text_file(dir / "chsh.json", out.dump(2) + "\n");
  }
  return R;
}

// ---------------------------------------------------------------------------
// scan-delay scenario

ScanScenarioResult run_scan_delay_scenario(const RunConfig& cfg) {
  cfg.validate();
  prepare_out_dir(cfg);
  ScanScenarioResult R;
  R.stabilization_on = cfg.scan_stabilization_on;

  const int nd = cfg.scan_delay_points;
  const int np = cfg.scan_phase_points;
  const double point_s = cfg.scan_point_seconds;
  const double delta = kTau / static_cast<double>(np - 1);
  const bool net_meaningful = has_background(cfg);
  const AccidentalEstimate acc = config_accidentals(cfg);
  const SourceModel src = effective_source(cfg);
  const uint64_t cfg_hash = cfg.hash();
  const double sp = cfg.controller.set_point_rad;

  std::vector<double> delays(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    delays[static_cast<size_t>(d)] =
        cfg.scan_delay_min_mm + (cfg.scan_delay_max_mm - cfg.scan_delay_min_mm) *
                                    static_cast<double>(d) /
                                    static_cast<double>(nd - 1);
  }

  struct PointData {
    double phi_a = 0.0;
    CountTable raw;
    CountTable net;
  };
  std::vector<PointData> grid(static_cast<size_t>(nd * np));
  std::vector<LockSummary> lock_summaries(static_cast<size_t>(nd * np));
  std::vector<char> lock_present(static_cast<size_t>(nd * np), 0);

  parallel_for(nd * np, cfg.workers, [&](int idx) {
    const int d = idx / np;
    const int k = idx % np;
    TopologyConfig topo = cfg.topology;
    topo.delay_offset_mm = delays[static_cast<size_t>(d)];
    const double phi_center = static_cast<double>(k) * delta;
    const PhaseSettings tag{phi_center, sp};
    PointData& pd = grid[static_cast<size_t>(idx)];
    pd.phi_a = phi_center;
    if (cfg.exact) {
      pd.raw = exact_cross_table(cfg, topo, tag, point_s);
    } else {
      const PointLock lock = simulate_point_lock(
          cfg, sp, point_s, cfg.scan_stabilization_on,
          derive_seed(cfg.seed, {21, static_cast<uint64_t>(idx)}));
      lock_summaries[static_cast<size_t>(idx)] = lock.summary;
      lock_present[static_cast<size_t>(idx)] = 1;
      const PhaseFn fn = [&](double t) {
        return PhaseSettings{ramp_phase(k, delta, t / point_s),
                             sp + lock.at(t)};
      };
      EventStream ev = sample_events_modulated(
          topo, src, cfg.model, fn, point_s,
          derive_seed(cfg.seed, {20, static_cast<uint64_t>(idx)}));
      ev.config_hash = cfg_hash;
      if (cfg.emit_events) {
        std::ostringstream name;
        name << "scan_d" << d << "_p" << k << ".events";
        write_events_file((events_dir(cfg) / name.str()).string(), ev);
      }
      pd.raw = table_from_stream(cfg, ev, tag);
    }
    pd.net = net_meaningful ? subtract_accidentals(pd.raw, acc) : pd.raw;
  });

  R.points.resize(static_cast<size_t>(nd));
  std::vector<std::pair<double, double>> envelope_input;
  envelope_input.reserve(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    std::vector<FringePoint> raw_pts, net_pts;
    raw_pts.reserve(static_cast<size_t>(np));
    net_pts.reserve(static_cast<size_t>(np));
    for (int k = 0; k < np; ++k) {
      const auto& pd = grid[static_cast<size_t>(d * np + k)];
      raw_pts.emplace_back(pd.phi_a, pd.raw);
      net_pts.emplace_back(pd.phi_a, pd.net);
    }
    // Fringe summed over the correlated detector pairs (11); the other
    // pairs carry the same envelope with opposite phase.
    DelayScanPoint& sp_out = R.points[static_cast<size_t>(d)];
    sp_out.delay_mm = delays[static_cast<size_t>(d)];
    sp_out.raw_fit = fit_fringe(raw_pts, 1, 1);
    sp_out.net_fit = fit_fringe(net_pts, 1, 1);
    envelope_input.emplace_back(sp_out.delay_mm, sp_out.net_fit.visibility);
  }
  R.envelope = fit_visibility_envelope(envelope_input);

  for (size_t i = 0; i < lock_summaries.size(); ++i) {
    if (lock_present[i]) accumulate_lock(R.lock, lock_summaries[i]);
  }
  finish_lock(R.lock);

  const fs::path dir(cfg.out_dir);
  const std::string hash_line = "# config_hash " + hash_hex(cfg_hash) + "\n";
  if (cfg.format == OutputFormat::Csv) {
    {
      std::ostringstream os;
      os << hash_line << "delay_index,delay_mm,point,phi_a,pair,raw_counts,"
                         "net_counts\n";
      for (int d = 0; d < nd; ++d) {
        for (int k = 0; k < np; ++k) {
          const auto& pd = grid[static_cast<size_t>(d * np + k)];
          for (int i = 0; i < 2; ++i) {
            for (int j = 0; j < 2; ++j) {
              os << d << ',' << fmt_g(delays[static_cast<size_t>(d)]) << ','
                 << k << ',' << fmt_g(pd.phi_a) << ',' << kPairNames[i * 2 + j]
                 << ',' << fmt_g(pd.raw.counts[i][j]) << ','
                 << fmt_g(pd.net.counts[i][j]) << '\n';
            }
          }
        }
      }
      write_text_file(dir / "points.csv", os.str());
    }
    {
      std::ostringstream os;
      os << hash_line
         << "delay_mm,raw_visibility,raw_visibility_err,net_visibility,"
            "net_visibility_err\n";
      for (const auto& p : R.points) {
        os << fmt_g(p.delay_mm) << ',' << fmt_g(p.raw_fit.visibility) << ','
           << fmt_g(p.raw_fit.visibility_err) << ','
           << fmt_g(p.net_fit.visibility) << ','
           << fmt_g(p.net_fit.visibility_err) << '\n';
      }
      write_text_file(dir / "envelope.csv", os.str());
    }
    {
      std::ostringstream os;
      os << hash_line << "key,value\n";
      os << "stabilization," << (R.stabilization_on ? "on" : "off") << '\n';
      os << "envelope_v0," << fmt_g(R.envelope.v0) << '\n';
      os << "envelope_fwhm_mm," << fmt_g(R.envelope.fwhm_mm) << '\n';
      os << "envelope_points_used," << R.envelope.points_used << '\n';
      os << "envelope_valid," << (R.envelope.valid ? 1 : 0) << '\n';
      os << "lock_mean_residual_rms," << fmt_g(R.lock.mean_residual_rms)
         << '\n';
      os << "lock_saturation_count," << R.lock.saturation_count << '\n';
      os << "lock_reset_count," << R.lock.reset_count << '\n';
      write_text_file(dir / "summary.csv", os.str());
    }
  } else {
    json points = json::array();
    for (int d = 0; d < nd; ++d) {
      json sub = json::array();
      for (int k = 0; k < np; ++k) {
        const auto& pd = grid[static_cast<size_t>(d * np + k)];
        sub.push_back({{"point", k},
                       {"phi_a", pd.phi_a},
                       {"raw",
                        {pd.raw.counts[0][0], pd.raw.counts[0][1],
                         pd.raw.counts[1][0], pd.raw.counts[1][1]}},
                       {"net",
                        {pd.net.counts[0][0], pd.net.counts[0][1],
                         pd.net.counts[1][0], pd.net.counts[1][1]}}});
      }
      const auto& p = R.points[static_cast<size_t>(d)];
      points.push_back({{"delay_mm", p.delay_mm},
                        {"raw_fit", fit_to_json(p.raw_fit)},
                        {"net_fit", fit_to_json(p.net_fit)},
                        {"points", sub}});
    }
    json out{{"config_hash", hash_hex(cfg_hash)},
             {"stabilization", R.stabilization_on ? "on" : "off"},
             {"delays", points},
             {"envelope",
              {{"v0", R.envelope.v0},
               {"fwhm_mm", R.envelope.fwhm_mm},
               {"points_used", R.envelope.points_used},
               {"valid", R.envelope.valid}}},
             {"lock",
              {{"mean_residual_rms", R.lock.mean_residual_rms},
               {"max_residual_rms", R.lock.max_residual_rms},
               {"saturation_count", R.lock.saturation_count},
               {"reset_count", R.lock.reset_count}}}};
    write_text_file(dir / "scan.json", out.dump(2) + "\n");
  }
  return R;
}

// ---------------------------------------------------------------------------
// attack scenario

namespace {

json attack_report_json(const AttackReport& r) {
  return json{{"topology", r.kind == TopologyKind::Franson ? "franson" : "hug"},
              {"e_values", r.e_values},
              {"s", r.s_value},
              {"kept_fraction", r.kept_fraction}};
}

ChshResult lhv_monte_carlo(const RunConfig& cfg, const LocalStrategy& strategy,
                           TopologyKind kind) {
  TopologyConfig topo = cfg.topology;
  topo.kind = kind;
  const SourceModel src = effective_source(cfg);
  const ChshSettings cs = ChshSettings::canonical();
  const std::array<PhaseSettings, 4> phases = {
      {{cs.phi_a, cs.phi_b},
       {cs.phi_a_prime, cs.phi_b},
       {cs.phi_a, cs.phi_b_prime},
       {cs.phi_a_prime, cs.phi_b_prime}}};
  constexpr std::array<std::pair<int, int>, 4> indices = {
      {{0, 0}, {1, 0}, {0, 1}, {1, 1}}};
  std::array<CountTable, 4> tables;
  CoincidenceWindow window = cfg.window;
  window.center_s = topo.cross_center_delay_s();
  for (int s = 0; s < 4; ++s) {
    EventStream ev = sample_lhv_events(
        strategy, topo, src, indices[static_cast<size_t>(s)].first,
        indices[static_cast<size_t>(s)].second, cfg.attack_mc_seconds,
        derive_seed(cfg.seed,
                    {30, static_cast<uint64_t>(kind), static_cast<uint64_t>(s)}));
    ev.config_hash = cfg.hash();
    if (cfg.emit_events) {
      std::ostringstream name;
      name << "attack_" << (kind == TopologyKind::Franson ? "franson" : "hug")
           << "_s" << s << ".events";
      write_events_file((events_dir(cfg) / name.str()).string(), ev);
    }
    auto [a, b] = split_by_party(ev);
    tables[static_cast<size_t>(s)] = count_coincidences(a, b, window);
    tables[static_cast<size_t>(s)].settings = phases[static_cast<size_t>(s)];
  }
  return estimate_chsh(tables);
}

}  // namespace

AttackScenarioResult run_attack_scenario(const RunConfig& cfg) {
  cfg.validate();
  prepare_out_dir(cfg);
  AttackScenarioResult R;

  const LocalStrategy strategy =
      cfg.attack_strategy_file.empty()
          ? LocalStrategy::bundled_slot_steering()
          : load_strategy_file(cfg.attack_strategy_file);
  save_strategy_file((fs::path(cfg.out_dir) / "strategy_used.json").string(),
                     strategy);

  const ChshSettings cs = ChshSettings::canonical();
  R.franson_exact = evaluate_strategy(strategy, TopologyKind::Franson, cs);
  R.hug_exact = evaluate_strategy(strategy, TopologyKind::Hug, cs);

  if (!cfg.exact && cfg.attack_mc_seconds > 0.0) {
    R.franson_mc = lhv_monte_carlo(cfg, strategy, TopologyKind::Franson);
    R.hug_mc = lhv_monte_carlo(cfg, strategy, TopologyKind::Hug);
  }
  if (cfg.attack_exhaustive_n_lambda > 0) {
    R.exhaustive_franson = max_s_exhaustive(TopologyKind::Franson,
                                            cfg.attack_exhaustive_n_lambda);
    R.exhaustive_hug =
        max_s_exhaustive(TopologyKind::Hug, cfg.attack_exhaustive_n_lambda);
  }

  const fs::path dir(cfg.out_dir);
  const std::string hash_line = "# config_hash " + hash_hex(cfg.hash()) + "\n";
  if (cfg.format == OutputFormat::Csv) {
    std::ostringstream os;
    os << hash_line << "key,value\n";
    auto put_report = [&os](const char* prefix, const AttackReport& r) {
      for (int s = 0; s < 4; ++s) {
        os << prefix << "_e_" << kSettingNames[s] << ','
           << fmt_g(r.e_values[s]) << '\n';
        os << prefix << "_kept_" << kSettingNames[s] << ','
           << fmt_g(r.kept_fraction[s]) << '\n';
      }
      os << prefix << "_s," << fmt_g(r.s_value) << '\n';
    };
    put_report("franson", R.franson_exact);
    put_report("hug", R.hug_exact);
    if (R.franson_mc) {
      os << "franson_mc_s," << fmt_g(R.franson_mc->s_value) << '\n';
      os << "franson_mc_sigma_s," << fmt_g(R.franson_mc->s_sigma) << '\n';
    }
    if (R.hug_mc) {
      os << "hug_mc_s," << fmt_g(R.hug_mc->s_value) << '\n';
      os << "hug_mc_sigma_s," << fmt_g(R.hug_mc->s_sigma) << '\n';
    }
    if (R.exhaustive_franson) {
      os << "exhaustive_franson_max_s," << fmt_g(*R.exhaustive_franson)
         << '\n';
      os << "exhaustive_hug_max_s," << fmt_g(*R.exhaustive_hug) << '\n';
      os << "exhaustive_n_lambda," << cfg.attack_exhaustive_n_lambda << '\n';
    }
    write_text_file(dir / "attack.csv", os.str());
  } else {
    json out{{"config_hash", hash_hex(cfg.hash())},
             {"franson", attack_report_json(R.franson_exact)},
             {"hug", attack_report_json(R.hug_exact)}};
    if (R.franson_mc) {
      out["franson_mc"] = {{"s", R.franson_mc->s_value},
                           {"sigma_s", R.franson_mc->s_sigma},
                           {"e_values", R.franson_mc->e_values}};
      out["hug_mc"] = {{"s", R.hug_mc->s_value},
                       {"sigma_s", R.hug_mc->s_sigma},
                       {"e_values", R.hug_mc->e_values}};
    }
    if (R.exhaustive_franson) {
      out["exhaustive"] = {{"n_lambda", cfg.attack_exhaustive_n_lambda},
                           {"franson_max_s", *R.exhaustive_franson},
                           {"hug_max_s", *R.exhaustive_hug}};
    }
    write_text_file(dir / "attack.json", out.dump(2) + "\n");
  }
  return R;
}

// ---------------------------------------------------------------------------
// lock scenario

LockScenarioResult run_lock_scenario(const RunConfig& cfg) {
  cfg.validate();
  prepare_out_dir(cfg);
  LockScenarioResult R;
  std::vector<SetPointSwitch> schedule;
  if (cfg.lock_switch_time_s >= 0.0) {
    schedule.push_back(
        {cfg.lock_switch_time_s, cfg.lock_switch_set_point_rad});
    R.switch_time_s = cfg.lock_switch_time_s;
  }
  LockRun run =
      run_lock(cfg.lock_duration_s, cfg.noise, cfg.controller, cfg.wavelengths,
               derive_seed(cfg.seed, {40}), schedule, cfg.lock_decimation,
               cfg.lock_warmup_s);
  R.summary = run.summary;

  if (!schedule.empty()) {
    // settle 100 ms after the switch before judging the re-lock
    const double t0 = cfg.lock_switch_time_s + 0.1;
    const auto start = static_cast<size_t>(
        std::max(0.0, t0 * cfg.controller.loop_rate_hz));
    double sum = 0.0, sum_sq = 0.0;
    int64_t n = 0;
    for (size_t k = start; k < run.residual_signal.size(); ++k) {
      sum += run.residual_signal[k];
      sum_sq += run.residual_signal[k] * run.residual_signal[k];
      ++n;
    }
    if (n > 0) {
      R.post_switch_mean = sum / static_cast<double>(n);
      R.post_switch_rms = std::sqrt(sum_sq / static_cast<double>(n));
    }
  }

  const fs::path dir(cfg.out_dir);
  const std::string hash_line = "# config_hash " + hash_hex(cfg.hash()) + "\n";
  if (cfg.format == OutputFormat::Csv) {
    {
      std::ostringstream os;
      os << hash_line
         << "time_s,set_point,drift,actuator,residual,intensity\n";
      for (const auto& st : run.series) {
        os << fmt_g(st.time_s) << ',' << fmt_g(st.set_point) << ','
           << fmt_g(st.drift_phase) << ',' << fmt_g(st.actuator_phase) << ','
           << fmt_g(st.residual_phase) << ',' << fmt_g(st.feedback_intensity)
           << '\n';
      }
      write_text_file(dir / "series.csv", os.str());
    }
    std::ostringstream os;
    os << hash_line << "key,value\n";
    os << "residual_rms," << fmt_g(R.summary.residual_rms) << '\n';
    os << "residual_mean," << fmt_g(R.summary.residual_mean) << '\n';
    os << "mean_intensity," << fmt_g(R.summary.mean_intensity) << '\n';
    os << "saturation_count," << R.summary.saturation_count << '\n';
    os << "reset_count," << R.summary.reset_count << '\n';
    os << "steps," << R.summary.steps << '\n';
    if (!schedule.empty()) {
      os << "post_switch_rms," << fmt_g(R.post_switch_rms) << '\n';
      os << "post_switch_mean," << fmt_g(R.post_switch_mean) << '\n';
    }
    write_text_file(dir / "summary.csv", os.str());
  } else {
    json series = json::array();
    for (const auto& st : run.series) {
      series.push_back({{"time_s", st.time_s},
                        {"set_point", st.set_point},
                        {"drift", st.drift_phase},
                        {"actuator", st.actuator_phase},
                        {"residual", st.residual_phase},
                        {"intensity", st.feedback_intensity}});
    }
    json out{{"config_hash", hash_hex(cfg.hash())},
             {"series", series},
             {"summary",
              {{"residual_rms", R.summary.residual_rms},
               {"residual_mean", R.summary.residual_mean},
               {"mean_intensity", R.summary.mean_intensity},
               {"saturation_count", R.summary.saturation_count},
               {"reset_count", R.summary.reset_count},
               {"steps", R.summary.steps}}}};
    if (!schedule.empty()) {
      out["post_switch"] = {{"rms", R.post_switch_rms},
                            {"mean", R.post_switch_mean}};
    }
    write_text_file(dir / "lock.json", out.dump(2) + "\n");
  }
  return R;
}

// ---------------------------------------------------------------------------
// counts scenario

std::vector<CountsFileResult> run_counts_scenario(
    const RunConfig& cfg, const std::vector<std::string>& event_files) {
  cfg.validate();
  if (event_files.empty()) {
    throw ValidationError("counts requires at least one events file");
  }
  prepare_out_dir(cfg);
  std::vector<CountsFileResult> results;
  const CoincidenceWindow window = cfg.resolved_window();

  for (const auto& path : event_files) {
    CountsFileResult r;
    r.path = path;
    const EventStream merged = read_events_file(path);
    auto [a, b] = split_by_party(merged);
    r.raw = count_coincidences(a, b, window);
    const double duration =
        std::max(merged.duration_s, std::numeric_limits<double>::min());
    for (const auto& e : a.events) {
      r.singles_alice_hz[e.detector - 1] += 1.0 / duration;
    }
    for (const auto& e : b.events) {
      r.singles_bob_hz[e.detector - 1] += 1.0 / duration;
    }
    r.from_singles = accidentals_from_singles(
        r.singles_alice_hz[0], r.singles_alice_hz[1], r.singles_bob_hz[0],
        r.singles_bob_hz[1], window);
    r.from_shifted = accidentals_from_shifted_window(a, b, window, 1e-6);
    r.net = subtract_accidentals(r.raw, r.from_singles);
    results.push_back(std::move(r));
  }

  const fs::path dir(cfg.out_dir);
  const std::string hash_line = "# config_hash " + hash_hex(cfg.hash()) + "\n";
  if (cfg.format == OutputFormat::Csv) {
    std::ostringstream os;
    os << hash_line
       << "file,pair,raw_counts,net_counts,accidental_hz_singles,"
          "accidental_hz_shifted\n";
    for (const auto& r : results) {
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          os << r.path << ',' << kPairNames[i * 2 + j] << ','
             << fmt_g(r.raw.counts[i][j]) << ',' << fmt_g(r.net.counts[i][j])
             << ',' << fmt_g(r.from_singles.rate_hz[i][j]) << ','
             << fmt_g(r.from_shifted.rate_hz[i][j]) << '\n';
        }
      }
    }
    write_text_file(dir / "counts.csv", os.str());
  } else {
    json files = json::array();
    for (const auto& r : results) {
      json pairs = json::array();
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          pairs.push_back({{"pair", kPairNames[i * 2 + j]},
                           {"raw_counts", r.raw.counts[i][j]},
                           {"net_counts", r.net.counts[i][j]},
                           {"accidental_hz_singles", r.from_singles.rate_hz[i][j]},
                           {"accidental_hz_shifted", r.from_shifted.rate_hz[i][j]}});
        }
      }
      files.push_back({{"file", r.path},
                       {"integration_time_s", r.raw.integration_time_s},
                       {"singles_alice_hz", r.singles_alice_hz},
                       {"singles_bob_hz", r.singles_bob_hz},
                       {"pairs", pairs}});
    }
    json out{{"config_hash", hash_hex(cfg.hash())}, {"files", files}};
    write_text_file(dir / "counts.json", out.dump(2) + "\n");
  }
  return results;
}

}  // namespace etbell

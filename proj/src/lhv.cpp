#include "etbell/lhv.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "etbell/common.hpp"
#include "etbell/rng.hpp"

namespace etbell {

namespace {

bool is_cross(SourceSlot s) {
  return s == SourceSlot::ShortShort || s == SourceSlot::LongLong;
}

// Kept-set test for one lambda under one setting pair.
bool kept(const LocalStrategy::Lambda& lam, TopologyKind kind, int sa,
          int sb) {
  if (kind == TopologyKind::Franson) {
    return lam.slot_a[sa] == lam.slot_b[sb];
  }
  return is_cross(lam.source_slot);
}

constexpr std::array<std::pair<int, int>, 4> kSettingPairs = {
    {{0, 0}, {1, 0}, {0, 1}, {1, 1}}};  // (a,b), (a',b), (a,b'), (a',b')

}  // namespace

void LocalStrategy::validate() const {
  if (lambdas.empty()) throw ValidationError("strategy has no lambda values");
  double total = 0.0;
  for (const auto& lam : lambdas) {
    if (!(lam.weight > 0.0)) {
      throw ValidationError("lambda weights must be > 0");
    }
    total += lam.weight;
    for (int s = 0; s < 2; ++s) {
      if (lam.outcome_a[s] != 1 && lam.outcome_a[s] != -1) {
        throw ValidationError("outcomes must be +1 or -1");
      }
      if (lam.outcome_b[s] != 1 && lam.outcome_b[s] != -1) {
        throw ValidationError("outcomes must be +1 or -1");
      }
      if ((lam.slot_a[s] & ~1) || (lam.slot_b[s] & ~1)) {
        throw ValidationError("slots must be 0 (short) or 1 (long)");
      }
    }
  }
  if (std::fabs(total - 1.0) > 1e-9) {
    throw ValidationError("lambda weights must sum to 1");
  }
}

LocalStrategy LocalStrategy::bundled_slot_steering() {
  LocalStrategy s;
  LocalStrategy::Lambda l1;
  l1.weight = 0.5;
  l1.slot_a = {0, 1};  // follows the local setting index
  l1.slot_b = {0, 1};
  l1.outcome_a = {1, 1};
  l1.outcome_b = {1, -1};
  l1.source_slot = SourceSlot::ShortShort;
  LocalStrategy::Lambda l2;
  l2.weight = 0.5;
  l2.slot_a = {0, 1};
  l2.slot_b = {1, 0};  // anti-follows
  l2.outcome_a = {1, 1};
  l2.outcome_b = {1, 1};
  l2.source_slot = SourceSlot::LongLong;
  s.lambdas = {l1, l2};
  return s;
}

AttackReport evaluate_strategy(const LocalStrategy& strategy,
                               TopologyKind kind,
                               const ChshSettings& settings) {
  (void)settings;  // strategies are keyed on setting indices
  strategy.validate();
  AttackReport report;
  report.kind = kind;
  double weight_total = 0.0;
  for (const auto& lam : strategy.lambdas) weight_total += lam.weight;

  for (size_t s = 0; s < kSettingPairs.size(); ++s) {
    const auto [sa, sb] = kSettingPairs[s];
    double kept_w = 0.0;
    double corr = 0.0;
    for (const auto& lam : strategy.lambdas) {
      if (!kept(lam, kind, sa, sb)) continue;
      kept_w += lam.weight;
      corr += lam.weight * lam.outcome_a[sa] * lam.outcome_b[sb];
    }
    if (kept_w <= 0.0) {
      throw ValidationError(
          "strategy keeps no pairs for a setting combination; E undefined");
    }
    report.e_values[s] = corr / kept_w;
    report.kept_fraction[s] = kept_w / weight_total;
  }
  report.s_value = report.e_values[0] + report.e_values[1] +
                   report.e_values[2] - report.e_values[3];
  return report;
}

namespace {

// Scans all outcome tables for a fixed routing (kept sets precomputed per
// lambda and setting pair); returns the best post-selected S, or -8 when
// some setting pair keeps nothing.
double best_s_for_route(TopologyKind kind, int n, uint32_t route) {
  bool kept_l[4][4];  // [lambda][setting]
  int kept_n[4] = {0, 0, 0, 0};
  for (int l = 0; l < n; ++l) {
    if (kind == TopologyKind::Franson) {
      const int slot_a[2] = {static_cast<int>((route >> (4 * l)) & 1),
                             static_cast<int>((route >> (4 * l + 1)) & 1)};
      const int slot_b[2] = {static_cast<int>((route >> (4 * l + 2)) & 1),
                             static_cast<int>((route >> (4 * l + 3)) & 1)};
      for (int s = 0; s < 4; ++s) {
        kept_l[l][s] = slot_a[kSettingPairs[s].first] ==
                       slot_b[kSettingPairs[s].second];
        kept_n[s] += kept_l[l][s];
      }
    } else {
      const bool cross = ((route >> (2 * l)) & 3) <= 1;
      for (int s = 0; s < 4; ++s) {
        kept_l[l][s] = cross;
        kept_n[s] += cross;
      }
    }
  }
  if (!kept_n[0] || !kept_n[1] || !kept_n[2] || !kept_n[3]) return -8.0;

  const uint32_t outcome_tables = 1u << (2 * n);
  double best = -8.0;
  for (uint32_t oa = 0; oa < outcome_tables; ++oa) {
    int a_out[4][2];
    for (int l = 0; l < n; ++l) {
      a_out[l][0] = (oa >> (2 * l)) & 1 ? -1 : 1;
      a_out[l][1] = (oa >> (2 * l + 1)) & 1 ? -1 : 1;
    }
    for (uint32_t ob = 0; ob < outcome_tables; ++ob) {
      int corr[4] = {0, 0, 0, 0};
      for (int l = 0; l < n; ++l) {
        const int b0 = (ob >> (2 * l)) & 1 ? -1 : 1;
        const int b1 = (ob >> (2 * l + 1)) & 1 ? -1 : 1;
        const int b_out[2] = {b0, b1};
        for (int s = 0; s < 4; ++s) {
          if (kept_l[l][s]) {
            corr[s] += a_out[l][kSettingPairs[s].first] *
                       b_out[kSettingPairs[s].second];
          }
        }
      }
      const double s_val =
          static_cast<double>(corr[0]) / kept_n[0] +
          static_cast<double>(corr[1]) / kept_n[1] +
          static_cast<double>(corr[2]) / kept_n[2] -
          static_cast<double>(corr[3]) / kept_n[3];
      if (s_val > best) {
        best = s_val;
        if (best >= 4.0) return best;
      }
    }
  }
  return best;
}

}  // namespace

double max_s_exhaustive(TopologyKind kind, int n_lambda) {
  if (n_lambda < 1 || n_lambda > 4) {
    throw ValidationError("exhaustive search supports 1 <= n_lambda <= 4");
  }
  const int n = n_lambda;
  const uint64_t routing_tables =
      (kind == TopologyKind::Franson)
          ? (1ull << (4 * n))  // slot_a and slot_b bits per (lambda, setting)
          : (1ull << (2 * n)); // 2-bit source slot per lambda
  // Post-selected S is bounded by 4 outright; in the hug the kept set is
  // common to all four setting pairs, so each lambda's CHSH combination is
  // +/-2 and S cannot exceed 2. Hitting the bound ends the search early
  // without changing the returned maximum.
  const double bound = (kind == TopologyKind::Franson) ? 4.0 : 2.0;

  unsigned n_threads = std::min(8u, std::thread::hardware_concurrency());
  if (n_threads == 0) n_threads = 1;
  if (routing_tables < 64) n_threads = 1;

  std::atomic<bool> stop{false};
  std::vector<double> thread_best(n_threads, -8.0);
  auto worker = [&](unsigned tid) {
    for (uint64_t route = tid; route < routing_tables; route += n_threads) {
      if (stop.load(std::memory_order_relaxed)) return;
      const double s = best_s_for_route(kind, n, static_cast<uint32_t>(route));
      if (s > thread_best[tid]) {
        thread_best[tid] = s;
        if (s >= bound) {
          stop.store(true, std::memory_order_relaxed);
          return;
        }
      }
    }
  };
  if (n_threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  double best = -8.0;
  for (double b : thread_best) best = std::max(best, b);
  return best;
}

EventStream sample_lhv_events(const LocalStrategy& strategy,
                              const TopologyConfig& topology,
                              const SourceModel& source, int a_setting,
                              int b_setting, double duration_s,
                              uint64_t seed) {
  strategy.validate();
  topology.validate();
  source.validate();
  if (a_setting < 0 || a_setting > 1 || b_setting < 0 || b_setting > 1) {
    throw ValidationError("setting indices must be 0 or 1");
  }
  if (duration_s < 0.0) throw ValidationError("duration must be >= 0");

  EventStream stream;
  stream.duration_s = duration_s;
  stream.rng_seed = seed;
  if (duration_s == 0.0) return stream;

  std::vector<double> cum;
  cum.reserve(strategy.lambdas.size());
  double acc = 0.0;
  for (const auto& lam : strategy.lambdas) {
    acc += lam.weight;
    cum.push_back(acc);
  }

  const double ta_s = topology.alice_transit_s(false);
  const double ta_l = topology.alice_transit_s(true);
  const double tb_s = topology.bob_transit_s(false);
  const double tb_l = topology.bob_transit_s(true);
  auto& out = stream.events;
  auto det = [](int outcome) -> uint8_t { return outcome > 0 ? 1 : 2; };

  if (source.pair_rate_hz > 0.0) {
    Rng rng(derive_seed(seed, {1}));
    const double mean_gap = 1.0 / source.pair_rate_hz;
    for (double t = rng.exponential(mean_gap); t < duration_s;
         t += rng.exponential(mean_gap)) {
      const double u = rng.uniform01() * acc;
      const size_t il = static_cast<size_t>(
          std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
      const auto& lam = strategy.lambdas[std::min(il, cum.size() - 1)];
      const double u1 = rng.uniform01();
      const double u2 = rng.uniform01();

      if (topology.kind == TopologyKind::Franson) {
        const bool a_long = lam.slot_a[a_setting] == 1;
        const bool b_long = lam.slot_b[b_setting] == 1;
        out.push_back({static_cast<int64_t>(std::llround(
                           (t + (a_long ? ta_l : ta_s)) * 1e12)),
                       Party::Alice, det(lam.outcome_a[a_setting]),
                       EventOrigin::Pair});
        out.push_back({static_cast<int64_t>(std::llround(
                           (t + (b_long ? tb_l : tb_s)) * 1e12)),
                       Party::Bob, det(lam.outcome_b[b_setting]),
                       EventOrigin::Pair});
      } else {
        switch (lam.source_slot) {
          case SourceSlot::ShortShort:
          case SourceSlot::LongLong: {
            const bool ll = lam.source_slot == SourceSlot::LongLong;
            out.push_back({static_cast<int64_t>(std::llround(
                               (t + (ll ? ta_l : ta_s)) * 1e12)),
                           Party::Alice, det(lam.outcome_a[a_setting]),
                           EventOrigin::Pair});
            out.push_back({static_cast<int64_t>(std::llround(
                               (t + (ll ? tb_l : tb_s)) * 1e12)),
                           Party::Bob, det(lam.outcome_b[b_setting]),
                           EventOrigin::Pair});
            break;
          }
          case SourceSlot::AliceDouble:
            out.push_back({static_cast<int64_t>(std::llround((t + ta_s) * 1e12)),
                           Party::Alice, u1 < 0.5 ? uint8_t{1} : uint8_t{2},
                           EventOrigin::Pair});
            out.push_back({static_cast<int64_t>(std::llround((t + ta_l) * 1e12)),
                           Party::Alice, u2 < 0.5 ? uint8_t{1} : uint8_t{2},
                           EventOrigin::Pair});
            break;
          case SourceSlot::BobDouble:
            out.push_back({static_cast<int64_t>(std::llround((t + tb_s) * 1e12)),
                           Party::Bob, u1 < 0.5 ? uint8_t{1} : uint8_t{2},
                           EventOrigin::Pair});
            out.push_back({static_cast<int64_t>(std::llround((t + tb_l) * 1e12)),
                           Party::Bob, u2 < 0.5 ? uint8_t{1} : uint8_t{2},
                           EventOrigin::Pair});
            break;
        }
      }
    }
  }

  append_background_events(out, source, duration_s, seed);
  finalize_stream(stream);
  return stream;
}

namespace {

SourceSlot parse_source_slot(const std::string& s) {
  if (s == "00") return SourceSlot::ShortShort;
  if (s == "11") return SourceSlot::LongLong;
  if (s == "01") return SourceSlot::AliceDouble;
  if (s == "10") return SourceSlot::BobDouble;
  throw ValidationError("source_slot must be one of 00, 11, 01, 10");
}

std::string source_slot_name(SourceSlot s) {
  switch (s) {
    case SourceSlot::ShortShort: return "00";
    case SourceSlot::LongLong: return "11";
    case SourceSlot::AliceDouble: return "01";
    case SourceSlot::BobDouble: return "10";
  }
  return "00";
}

}  // namespace

LocalStrategy load_strategy_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open strategy file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed strategy file: ") + e.what());
  }
  LocalStrategy s;
  try {
    for (const auto& jl : j.at("lambdas")) {
      LocalStrategy::Lambda lam;
      lam.weight = jl.at("weight").get<double>();
      lam.outcome_a = {jl.at("outcome_a").at("a").get<int>(),
                       jl.at("outcome_a").at("a_prime").get<int>()};
      lam.outcome_b = {jl.at("outcome_b").at("b").get<int>(),
                       jl.at("outcome_b").at("b_prime").get<int>()};
      lam.slot_a = {jl.at("slot_a").at("a").get<int>(),
                    jl.at("slot_a").at("a_prime").get<int>()};
      lam.slot_b = {jl.at("slot_b").at("b").get<int>(),
                    jl.at("slot_b").at("b_prime").get<int>()};
      lam.source_slot =
          parse_source_slot(jl.at("source_slot").get<std::string>());
      s.lambdas.push_back(lam);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed strategy file: ") + e.what());
  }
  s.validate();
  return s;
}

void save_strategy_file(const std::string& path, const LocalStrategy& s) {
  s.validate();
  nlohmann::json j;
  j["lambdas"] = nlohmann::json::array();
  for (const auto& lam : s.lambdas) {
    nlohmann::json jl;
    jl["weight"] = lam.weight;
    jl["outcome_a"] = {{"a", lam.outcome_a[0]}, {"a_prime", lam.outcome_a[1]}};
    jl["outcome_b"] = {{"b", lam.outcome_b[0]}, {"b_prime", lam.outcome_b[1]}};
    jl["slot_a"] = {{"a", lam.slot_a[0]}, {"a_prime", lam.slot_a[1]}};
    jl["slot_b"] = {{"b", lam.slot_b[0]}, {"b_prime", lam.slot_b[1]}};
    jl["source_slot"] = source_slot_name(lam.source_slot);
    j["lambdas"].push_back(jl);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
}

}  // namespace etbell

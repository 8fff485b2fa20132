#include "trajgen/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "trajgen/error.hpp"
#include "trajgen/random.hpp"

namespace trajgen::eval {

namespace {

void check_edges(std::span<const double> edges) {
  if (edges.size() < 2) throw ContractError("density: need at least two bin edges");
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    if (!(edges[i] < edges[i + 1])) throw ContractError("density: bin edges must be strictly ascending");
  }
}

}  // namespace

std::vector<double> accel_series(std::span<const double> speeds) {
  if (speeds.size() < 2) throw ContractError("accel_series: trip needs at least two samples");
  std::vector<double> out(speeds.size() - 1);
  for (std::size_t t = 1; t < speeds.size(); ++t) out[t - 1] = speeds[t] - speeds[t - 1];
  return out;
}

std::vector<double> uniform_edges(double lo, double hi, double width) {
  if (!(hi > lo) || !(width > 0.0)) throw ContractError("uniform_edges: need lo < hi and width > 0");
  const double ratio = (hi - lo) / width;
  const double nearest = std::round(ratio);
  const auto bins = static_cast<std::size_t>(
      std::abs(ratio - nearest) < 1e-9 * std::max(1.0, nearest) ? nearest : std::ceil(ratio));
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i < bins; ++i) edges[i] = lo + static_cast<double>(i) * width;
  edges[bins] = hi;
  return edges;
}

DensityHistogram density(std::span<const double> values, std::span<const double> edges, OutOfRange policy) {
  check_edges(edges);
  if (values.empty()) throw ContractError("density: no values");
  DensityHistogram h;
  h.edges.assign(edges.begin(), edges.end());
  const std::size_t bins = edges.size() - 1;
  std::vector<std::size_t> counts(bins, 0);
  for (double v : values) {
    if (std::isnan(v)) throw DomainError("density: NaN value");
    std::size_t bin;
    if (v < edges.front() || v > edges.back()) {
      if (policy == OutOfRange::reject) {
        throw DomainError("density: value " + data::format_double(v) + " outside [" +
                          data::format_double(edges.front()) + ", " + data::format_double(edges.back()) + "]");
      }
      ++h.clamped;
      bin = v < edges.front() ? 0 : bins - 1;
    } else {
      const auto it = std::upper_bound(edges.begin(), edges.end(), v);
      bin = std::min(bins - 1, static_cast<std::size_t>(it - edges.begin()) - 1);
    }
    ++counts[bin];
  }
  h.mass.resize(bins);
  const auto total = static_cast<double>(values.size());
  for (std::size_t i = 0; i < bins; ++i) h.mass[i] = static_cast<double>(counts[i]) / total;
  return h;
}

std::optional<Metric> metric_from_name(const std::string& name) {
  if (name == "tv") return Metric::tv;
  if (name == "kl") return Metric::kl;
  if (name == "w1") return Metric::w1;
  return std::nullopt;
}

double distance(const DensityHistogram& p, const DensityHistogram& q, Metric metric, double epsilon) {
  if (p.edges != q.edges) throw ContractError("distance: histograms have different bin edges");
  if (p.mass.size() + 1 != p.edges.size() || q.mass.size() + 1 != q.edges.size()) {
    throw ShapeError("distance: mass and edges disagree");
  }
  const std::size_t bins = p.mass.size();
  switch (metric) {
    case Metric::tv: {
      double s = 0.0;
      for (std::size_t i = 0; i < bins; ++i) s += std::abs(p.mass[i] - q.mass[i]);
      return 0.5 * s;
    }
    case Metric::w1: {
      double s = 0.0, cp = 0.0, cq = 0.0;
      for (std::size_t i = 0; i < bins; ++i) {
        cp += p.mass[i];
        cq += q.mass[i];
        s += std::abs(cp - cq) * (p.edges[i + 1] - p.edges[i]);
      }
      return s;
    }
    case Metric::kl: {
      if (!(epsilon >= 0.0)) throw ContractError("distance: epsilon must be non-negative");
      const double zp = std::accumulate(p.mass.begin(), p.mass.end(), 0.0) + epsilon * static_cast<double>(bins);
      const double zq = std::accumulate(q.mass.begin(), q.mass.end(), 0.0) + epsilon * static_cast<double>(bins);
      double s = 0.0;
      for (std::size_t i = 0; i < bins; ++i) {
        const double pi = (p.mass[i] + epsilon) / zp;
        const double qi = (q.mass[i] + epsilon) / zq;
        if (pi == 0.0) continue;
        if (qi == 0.0) return std::numeric_limits<double>::infinity();
        s += pi * std::log(pi / qi);
      }
      return std::max(0.0, s);
    }
  }
  throw ContractError("distance: unknown metric");
}

std::vector<double> subsample(std::span<const double> values, std::size_t n, std::uint64_t seed) {
  std::vector<double> pool(values.begin(), values.end());
  Rng rng(seed);
  const std::size_t take = std::min(n, pool.size());
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

std::vector<double> pooled_speeds(std::span<const data::Trip> trips) {
  std::vector<double> out;
  for (const data::Trip& t : trips) out.insert(out.end(), t.speeds.begin(), t.speeds.end());
  return out;
}

std::vector<double> pooled_accels(std::span<const data::Trip> trips) {
  std::vector<double> out;
  for (const data::Trip& t : trips) {
    if (t.speeds.size() < 2) continue;
    const auto a = accel_series(t.speeds);
    out.insert(out.end(), a.begin(), a.end());
  }
  return out;
}

ConstraintReport constraint_check(std::span<const data::Trip> trips, std::span<const double> targets,
                                  double zero_tolerance) {
  if (trips.empty()) throw ContractError("constraint_check: no trips");
  if (!targets.empty() && targets.size() != trips.size()) {
    throw ContractError("constraint_check: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(trips.size()) + " trips");
  }
  ConstraintReport r;
  r.trips = trips.size();
  std::size_t start = 0, end = 0, both = 0;
  for (std::size_t k = 0; k < trips.size(); ++k) {
    const auto& s = trips[k].speeds;
    if (s.empty()) throw ContractError("constraint_check: trip '" + trips[k].id + "' is empty");
    const bool a = std::abs(s.front()) < zero_tolerance;
    const bool b = std::abs(s.back()) < zero_tolerance;
    start += a;
    end += b;
    both += a && b;
    if (!targets.empty()) {
      if (!(targets[k] > 0.0)) throw ContractError("constraint_check: target lengths must be positive");
      const double realized = std::accumulate(s.begin(), s.end(), 0.0);
      r.relative_errors.push_back(std::abs(realized - targets[k]) / targets[k]);
    }
  }
  const auto n = static_cast<double>(trips.size());
  r.start_zero_rate = static_cast<double>(start) / n;
  r.end_zero_rate = static_cast<double>(end) / n;
  r.both_zero_rate = static_cast<double>(both) / n;
  if (!r.relative_errors.empty()) {
    r.mean_abs_relative_error =
        std::accumulate(r.relative_errors.begin(), r.relative_errors.end(), 0.0) / n;
    r.max_abs_relative_error = *std::max_element(r.relative_errors.begin(), r.relative_errors.end());
  }
  return r;
}

ComparisonReport compare(std::span<const data::Trip> generated, std::span<const data::Trip> reference,
                         const EvalConfig& cfg, std::span<const double> targets) {
  const auto speed_edges = uniform_edges(0.0, cfg.v_max, cfg.speed_bin);
  const auto accel_edges = uniform_edges(cfg.accel_lo, cfg.accel_hi, cfg.accel_bin);

  const auto gs = subsample(pooled_speeds(generated), cfg.sample_size, derive_seed(cfg.seed, 1));
  const auto rs = subsample(pooled_speeds(reference), cfg.sample_size, derive_seed(cfg.seed, 2));
  const auto ga = subsample(pooled_accels(generated), cfg.sample_size, derive_seed(cfg.seed, 3));
  const auto ra = subsample(pooled_accels(reference), cfg.sample_size, derive_seed(cfg.seed, 4));

  ComparisonReport r;
  r.generated_points = gs.size();
  r.reference_points = rs.size();
  r.generated_speed = density(gs, speed_edges);
  r.reference_speed = density(rs, speed_edges);
  r.generated_accel = density(ga, accel_edges);
  r.reference_accel = density(ra, accel_edges);
  r.speed_tv = distance(r.generated_speed, r.reference_speed, Metric::tv);
  r.speed_w1 = distance(r.generated_speed, r.reference_speed, Metric::w1);
  r.speed_kl = distance(r.generated_speed, r.reference_speed, Metric::kl);
  r.accel_tv = distance(r.generated_accel, r.reference_accel, Metric::tv);
  r.accel_w1 = distance(r.generated_accel, r.reference_accel, Metric::w1);
  r.generated_constraints = constraint_check(generated, targets, cfg.zero_tolerance);
  r.reference_constraints = constraint_check(reference, {}, cfg.zero_tolerance);
  return r;
}

nlohmann::json to_json(const ConstraintReport& r) {
  nlohmann::json j = {{"trips", r.trips},
                      {"start_zero_rate", r.start_zero_rate},
                      {"end_zero_rate", r.end_zero_rate},
                      {"both_zero_rate", r.both_zero_rate}};
  if (!r.relative_errors.empty()) {
    j["length_relative_errors"] = r.relative_errors;
    j["mean_abs_relative_error"] = r.mean_abs_relative_error;
    j["max_abs_relative_error"] = r.max_abs_relative_error;
  }
  return j;
}

nlohmann::json to_json(const ComparisonReport& r) {
  return {{"format", "trajgen.report"},
          {"version", 1},
          {"generated_points", r.generated_points},
          {"reference_points", r.reference_points},
          {"speed", {{"tv", r.speed_tv}, {"w1", r.speed_w1}, {"kl", r.speed_kl}}},
          {"accel",
           {{"tv", r.accel_tv},
            {"w1", r.accel_w1},
            {"generated_clamped", r.generated_accel.clamped},
            {"reference_clamped", r.reference_accel.clamped}}},
          {"generated_constraints", to_json(r.generated_constraints)},
          {"reference_constraints", to_json(r.reference_constraints)}};
}

void write_density_csv(const DensityHistogram& h, std::ostream& out) {
  out << "bin_center,mass\n";
  for (std::size_t i = 0; i < h.bins(); ++i) {
    out << data::format_double(h.center(i)) << ',' << data::format_double(h.mass[i]) << '\n';
  }
}

void write_density_csv(const DensityHistogram& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  write_density_csv(h, out);
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace trajgen::eval

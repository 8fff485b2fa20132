#pragma once

// Density comparison between generated and reference corpora.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajgen/data.hpp"

namespace trajgen::eval {

inline constexpr double kZeroTolerance = 0.1;       // m/s
inline constexpr std::size_t kSampleSize = 30000;   // points per density
inline constexpr double kKlEpsilon = 1e-9;

// a_t = s_t - s_{t-1}; needs at least two speeds.
std::vector<double> accel_series(std::span<const double> speeds);

struct DensityHistogram {
  std::vector<double> edges;  // ascending, size = mass.size() + 1
  std::vector<double> mass;   // sums to 1
  std::size_t clamped = 0;    // values moved onto the outer bins

  std::size_t bins() const { return mass.size(); }
  double center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
};

// Edges lo, lo + width, ... with the last edge at hi.
std::vector<double> uniform_edges(double lo, double hi, double width);

enum class OutOfRange { clamp, reject };

// Bins are half-open [e_i, e_{i+1}) except the last, which also holds the
// upper edge. Out-of-range values are counted in the outer bins or rejected.
DensityHistogram density(std::span<const double> values, std::span<const double> edges,
                         OutOfRange policy = OutOfRange::clamp);

enum class Metric { tv, kl, w1 };
std::optional<Metric> metric_from_name(const std::string& name);

// tv = 1/2 sum |p - q|; w1 = sum |P_i - Q_i| w_i over cumulative masses;
// kl = sum p log(p / q) after adding epsilon to every cell of both and
// renormalizing.
double distance(const DensityHistogram& p, const DensityHistogram& q, Metric metric,
                double epsilon = kKlEpsilon);

// Up to n values drawn without replacement; all of them, shuffled, if fewer.
std::vector<double> subsample(std::span<const double> values, std::size_t n, std::uint64_t seed);

std::vector<double> pooled_speeds(std::span<const data::Trip> trips);
std::vector<double> pooled_accels(std::span<const data::Trip> trips);

struct ConstraintReport {
  std::size_t trips = 0;
  double start_zero_rate = 0.0;
  double end_zero_rate = 0.0;
  double both_zero_rate = 0.0;
  // Present when targets were supplied: realized distance sum(s) against the
  // target length, as |realized - target| / target.
  std::vector<double> relative_errors;
  double mean_abs_relative_error = 0.0;
  double max_abs_relative_error = 0.0;
};

// targets is empty or one length in meters per trip.
ConstraintReport constraint_check(std::span<const data::Trip> trips, std::span<const double> targets = {},
                                  double zero_tolerance = kZeroTolerance);

struct EvalConfig {
  double v_max = data::kDefaultVMax;
  double speed_bin = 0.5;
  double accel_lo = -5.0;
  double accel_hi = 5.0;
  double accel_bin = 0.1;
  std::size_t sample_size = kSampleSize;
  std::uint64_t seed = 0;
  double zero_tolerance = kZeroTolerance;
};

struct ComparisonReport {
  std::size_t generated_points = 0;
  std::size_t reference_points = 0;
  double speed_tv = 0.0;
  double speed_w1 = 0.0;
  double speed_kl = 0.0;
  double accel_tv = 0.0;
  double accel_w1 = 0.0;
  ConstraintReport generated_constraints;
  ConstraintReport reference_constraints;
  DensityHistogram generated_speed;
  DensityHistogram reference_speed;
  DensityHistogram generated_accel;
  DensityHistogram reference_accel;
};

// Both sides are subsampled to cfg.sample_size points with seeds derived from
// cfg.seed. targets, when given, are per generated trip.
ComparisonReport compare(std::span<const data::Trip> generated, std::span<const data::Trip> reference,
                         const EvalConfig& cfg = {}, std::span<const double> targets = {});

nlohmann::json to_json(const ConstraintReport& r);
nlohmann::json to_json(const ComparisonReport& r);

// Two columns, bin_center and mass.
void write_density_csv(const DensityHistogram& h, std::ostream& out);
void write_density_csv(const DensityHistogram& h, const std::string& path);

}  // namespace trajgen::eval

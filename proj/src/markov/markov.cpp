#include "trajgen/markov.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "trajgen/error.hpp"
#include "trajgen/random.hpp"

namespace trajgen::markov {

namespace {

constexpr const char* kFormat = "trajgen.markov";
constexpr int kVersion = 1;

std::size_t bin_count(double bin_width, double v_max) {
  if (!(bin_width > 0.0) || !(v_max > 0.0)) {
    throw ContractError("TransitionMatrix: bin width and v_max must be positive");
  }
  const double ratio = v_max / bin_width;
  const double nearest = std::round(ratio);
  // 40 / 0.5 should be 80 bins even if the division lands a hair above 80.
  if (std::abs(ratio - nearest) < 1e-9 * std::max(1.0, nearest)) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(ratio));
}

}  // namespace

TransitionMatrix::TransitionMatrix(double bin_width, double v_max)
    : bin_width_(bin_width), v_max_(v_max), bins_(bin_count(bin_width, v_max)) {
  counts_.assign(bins_ * bins_, 0);
  totals_.assign(bins_, 0);
  probs_.assign(bins_ * bins_, 0.0);
}

TransitionMatrix::TransitionMatrix(double bin_width, double v_max, std::vector<std::uint64_t> counts)
    : TransitionMatrix(bin_width, v_max) {
  if (counts.size() != bins_ * bins_) {
    throw ShapeError("TransitionMatrix: expected " + std::to_string(bins_ * bins_) + " counts, got " +
                     std::to_string(counts.size()));
  }
  counts_ = std::move(counts);
  for (std::size_t i = 0; i < bins_; ++i) renormalize_row(i);
}

std::size_t TransitionMatrix::bin_of(double speed) const {
  if (!(speed >= 0.0 && speed <= v_max_)) {
    throw DomainError("speed " + std::to_string(speed) + " outside [0, " + std::to_string(v_max_) + "]");
  }
  return std::min(bins_ - 1, static_cast<std::size_t>(speed / bin_width_));
}

double TransitionMatrix::bin_upper(std::size_t bin) const {
  return std::min(v_max_, static_cast<double>(bin + 1) * bin_width_);
}

std::vector<std::size_t> TransitionMatrix::empty_rows() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bins_; ++i)
    if (totals_[i] == 0) out.push_back(i);
  return out;
}

void TransitionMatrix::add(std::size_t from, std::size_t to, std::uint64_t n) {
  if (from >= bins_ || to >= bins_) throw ContractError("TransitionMatrix::add: bin out of range");
  counts_[from * bins_ + to] += n;
  renormalize_row(from);
}

void TransitionMatrix::merge(const TransitionMatrix& other) {
  if (other.bin_width_ != bin_width_ || other.v_max_ != v_max_) {
    throw ContractError("TransitionMatrix::merge: binning differs");
  }
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  for (std::size_t i = 0; i < bins_; ++i) renormalize_row(i);
}

void TransitionMatrix::renormalize_row(std::size_t from) {
  std::uint64_t total = 0;
  for (std::size_t j = 0; j < bins_; ++j) total += counts_[from * bins_ + j];
  totals_[from] = total;
  for (std::size_t j = 0; j < bins_; ++j) {
    probs_[from * bins_ + j] =
        total == 0 ? 0.0 : static_cast<double>(counts_[from * bins_ + j]) / static_cast<double>(total);
  }
}

TransitionMatrix fit(std::span<const data::Trip> trips, double bin_width, double v_max) {
  TransitionMatrix m(bin_width, v_max);
  const std::size_t bins = m.num_bins();
  std::vector<std::uint64_t> counts(bins * bins, 0);
  for (const data::Trip& trip : trips) {
    for (std::size_t t = 0; t < trip.speeds.size(); ++t) {
      const double s = trip.speeds[t];
      if (!(s >= 0.0 && s <= v_max)) {
        throw IngestError("trip '" + trip.id + "' sample " + std::to_string(t) + ": speed " +
                          data::format_double(s) + " outside [0, " + data::format_double(v_max) + "]");
      }
    }
    for (std::size_t t = 0; t + 1 < trip.speeds.size(); ++t) {
      ++counts[m.bin_of(trip.speeds[t]) * bins + m.bin_of(trip.speeds[t + 1])];
    }
  }
  return TransitionMatrix(bin_width, v_max, std::move(counts));
}

std::vector<double> sample(const TransitionMatrix& m, std::size_t n, double s0, std::uint64_t seed,
                           Emission emission) {
  if (n < 1) throw ContractError("markov::sample: n must be at least 1");
  const std::size_t bins = m.num_bins();
  std::size_t bin = m.bin_of(s0);
  if (m.row_empty(bin)) {
    throw SamplingError("markov::sample: start bin " + std::to_string(bin) + " has no transitions",
                        {s0}, bin);
  }
  Rng rng(seed);
  std::vector<double> out;
  out.reserve(n);
  out.push_back(s0);
  while (out.size() < n) {
    if (m.row_empty(bin)) {
      throw SamplingError("markov::sample: reached bin " + std::to_string(bin) +
                              " which has no outgoing transitions after " +
                              std::to_string(out.size()) + " samples",
                          out, bin);
    }
    // Inverse-CDF over the row's integer counts, so no rounding can select
    // a zero-count cell.
    const auto target = static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(m.row_total(bin)));
    std::uint64_t acc = 0;
    std::size_t next = bins - 1;
    for (std::size_t j = 0; j < bins; ++j) {
      acc += m.count(bin, j);
      if (target < acc) {
        next = j;
        break;
      }
    }
    bin = next;
    const double lo = m.bin_lower(bin);
    const double hi = m.bin_upper(bin);
    out.push_back(emission == Emission::midpoint ? 0.5 * (lo + hi) : uniform(rng, lo, hi));
  }
  return out;
}

OccupancyReport occupancy_report(const TransitionMatrix& m) {
  OccupancyReport r;
  r.bins = m.num_bins();
  std::vector<std::uint64_t> mass;
  std::size_t empty_cells = 0;
  for (std::size_t i = 0; i < r.bins; ++i) {
    mass.push_back(m.row_total(i));
    if (m.row_empty(i)) ++r.empty_rows;
    for (std::size_t j = 0; j < r.bins; ++j)
      if (m.count(i, j) == 0) ++empty_cells;
  }
  r.empty_cell_fraction = static_cast<double>(empty_cells) / static_cast<double>(r.bins * r.bins);
  std::sort(mass.begin(), mass.end());
  r.min_row_mass = mass.front();
  const std::size_t mid = mass.size() / 2;
  r.median_row_mass = mass.size() % 2 == 1
                          ? static_cast<double>(mass[mid])
                          : 0.5 * (static_cast<double>(mass[mid - 1]) + static_cast<double>(mass[mid]));
  return r;
}

nlohmann::json to_json(const TransitionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.num_bins(); ++i) {
    std::vector<std::uint64_t> row(m.counts().begin() + static_cast<std::ptrdiff_t>(i * m.num_bins()),
                                   m.counts().begin() + static_cast<std::ptrdiff_t>((i + 1) * m.num_bins()));
    rows.push_back(row);
  }
  return {{"format", kFormat},
          {"version", kVersion},
          {"bin_width", m.bin_width()},
          {"v_max", m.v_max()},
          {"counts", rows}};
}

TransitionMatrix from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kFormat) throw DataError("not a Markov model file");
    const int version = j.at("version").get<int>();
    if (version != kVersion) {
      throw DataError("unsupported Markov model version " + std::to_string(version));
    }
    const double w = j.at("bin_width").get<double>();
    const double v_max = j.at("v_max").get<double>();
    std::vector<std::uint64_t> counts;
    for (const auto& row : j.at("counts")) {
      for (const auto& c : row) counts.push_back(c.get<std::uint64_t>());
    }
    return TransitionMatrix(w, v_max, std::move(counts));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed Markov model: ") + e.what());
  }
}

void save(const TransitionMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << to_json(m).dump(1) << '\n';
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

TransitionMatrix load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

}  // namespace trajgen::markov

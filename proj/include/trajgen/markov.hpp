#pragma once

// First-order binned Markov chain over speed: the lookup-table baseline.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajgen/data.hpp"

namespace trajgen::markov {

class TransitionMatrix {
 public:
  TransitionMatrix(double bin_width = data::kDefaultBinWidth, double v_max = data::kDefaultVMax);
  // counts is row-major num_bins x num_bins.
  TransitionMatrix(double bin_width, double v_max, std::vector<std::uint64_t> counts);

  double bin_width() const { return bin_width_; }
  double v_max() const { return v_max_; }
  std::size_t num_bins() const { return bins_; }

  // Bin index of a speed; v_max itself falls in the last bin. Throws
  // DomainError outside [0, v_max].
  std::size_t bin_of(double speed) const;
  double bin_lower(std::size_t bin) const { return static_cast<double>(bin) * bin_width_; }
  double bin_upper(std::size_t bin) const;

  std::uint64_t count(std::size_t from, std::size_t to) const { return counts_[from * bins_ + to]; }
  double prob(std::size_t from, std::size_t to) const { return probs_[from * bins_ + to]; }
  std::uint64_t row_total(std::size_t from) const { return totals_[from]; }
  bool row_empty(std::size_t from) const { return totals_[from] == 0; }
  std::vector<std::size_t> empty_rows() const;

  const std::vector<std::uint64_t>& counts() const { return counts_; }
  const std::vector<double>& probs() const { return probs_; }

  void add(std::size_t from, std::size_t to, std::uint64_t n = 1);
  // Count matrices add; both sides must share the binning.
  void merge(const TransitionMatrix& other);

  friend bool operator==(const TransitionMatrix& a, const TransitionMatrix& b) {
    return a.bin_width_ == b.bin_width_ && a.v_max_ == b.v_max_ && a.counts_ == b.counts_;
  }

 private:
  void renormalize_row(std::size_t from);

  double bin_width_;
  double v_max_;
  std::size_t bins_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint64_t> totals_;
  std::vector<double> probs_;
};

// Tallies every consecutive pair (s_t, s_{t+1}). Throws IngestError naming
// the trip and sample index if a speed lies outside [0, v_max].
TransitionMatrix fit(std::span<const data::Trip> trips, double bin_width = data::kDefaultBinWidth,
                     double v_max = data::kDefaultVMax);

enum class Emission { uniform, midpoint };

// n speeds starting with s0. Each next bin is drawn from the current row and
// the speed emitted within it. Throws SamplingError (with the partial
// trajectory) on reaching a bin that was never left in the data.
std::vector<double> sample(const TransitionMatrix& m, std::size_t n, double s0, std::uint64_t seed,
                           Emission emission = Emission::uniform);

struct OccupancyReport {
  std::size_t bins = 0;
  std::size_t empty_rows = 0;
  double empty_cell_fraction = 0.0;
  std::uint64_t min_row_mass = 0;
  double median_row_mass = 0.0;
};

OccupancyReport occupancy_report(const TransitionMatrix& m);

nlohmann::json to_json(const TransitionMatrix& m);
TransitionMatrix from_json(const nlohmann::json& j);
void save(const TransitionMatrix& m, const std::string& path);
TransitionMatrix load(const std::string& path);

}  // namespace trajgen::markov

#pragma once

// Trips, corpora, CSV ingestion/export and the synthetic corpus generator.
//
// Trip CSV layout (UTF-8, one row per 1 Hz sample):
//
//   trip_id,timestamp,speed_mps,lon,lat
//
// timestamp is in seconds; lon/lat may be empty or the columns absent.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace trajgen::data {

inline constexpr double kDefaultVMax = 40.0;
inline constexpr double kDefaultBinWidth = 0.5;

struct Trip {
  std::string id;
  std::vector<double> speeds;  // m/s, 1 Hz
  std::vector<double> lon;     // empty, or one per sample
  std::vector<double> lat;
  double timestamp_base = 0.0;

  std::size_t size() const { return speeds.size(); }
  friend bool operator==(const Trip&, const Trip&) = default;
};

// Throws ContractError unless the trip has >= 2 samples, all speeds lie in
// [0, v_max] and coordinate arrays are empty or sized like speeds.
void validate_trip(const Trip& trip, double v_max);

struct CorpusStats {
  std::size_t trips = 0;
  std::size_t points = 0;
  std::size_t min_length = 0;
  std::size_t max_length = 0;
  double mean_speed = 0.0;
  double speed_variance = 0.0;  // population variance over all points
  double histogram_bin_width = kDefaultBinWidth;
  std::vector<std::size_t> speed_histogram;  // counts per bin over [0, v_max]

  friend bool operator==(const CorpusStats&, const CorpusStats&) = default;
};

CorpusStats compute_stats(std::span<const Trip> trips, double v_max, double bin_width);

class Corpus {
 public:
  explicit Corpus(double v_max = kDefaultVMax, double bin_width = kDefaultBinWidth);
  Corpus(std::vector<Trip> trips, double v_max = kDefaultVMax, double bin_width = kDefaultBinWidth);

  void add(Trip trip);

  const std::vector<Trip>& trips() const { return trips_; }
  const Trip& operator[](std::size_t i) const { return trips_[i]; }
  std::size_t size() const { return trips_.size(); }
  bool empty() const { return trips_.empty(); }
  const CorpusStats& stats() const { return stats_; }
  double v_max() const { return v_max_; }

  // All speeds, trip after trip.
  std::vector<double> pooled_speeds() const;

  friend bool operator==(const Corpus& a, const Corpus& b) { return a.trips_ == b.trips_; }

 private:
  std::vector<Trip> trips_;
  double v_max_;
  double bin_width_;
  CorpusStats stats_;
};

struct CsvSchema {
  std::string trip_id = "trip_id";  // empty: split on timestamp gaps only
  std::string timestamp = "timestamp";
  std::string speed = "speed_mps";
  std::string lon = "lon";
  std::string lat = "lat";
  double v_max = kDefaultVMax;
  double gap_seconds = 5.0;
};

struct IngestSummary {
  std::size_t rows = 0;
  std::size_t skipped_short_trips = 0;  // fragments with fewer than 2 samples
};

// Throws IngestError (with 1-based line number) on malformed rows, speeds
// outside [0, v_max], timestamps going backwards within a trip, or an empty file.
Corpus ingest_csv(std::istream& in, const CsvSchema& schema = {}, IngestSummary* summary = nullptr);
Corpus ingest_csv(const std::string& path, const CsvSchema& schema = {},
                  IngestSummary* summary = nullptr);

void export_csv(const Corpus& corpus, std::ostream& out);
void export_csv(const Corpus& corpus, const std::string& path);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

enum class Profile { urban, highway, mixed };

std::optional<Profile> profile_from_name(const std::string& name);
const char* profile_name(Profile p);

struct SynthConfig {
  std::size_t trips = 100;
  std::size_t min_length = 100;   // seconds
  std::size_t max_length = 6330;  // seconds
  Profile profile = Profile::mixed;
  std::uint64_t seed = 0;
  double v_max = kDefaultVMax;
};

// Trips built from dwell / accelerate / cruise (Ornstein-Uhlenbeck noise) /
// decelerate segments, starting and ending at exactly 0 m/s with every
// one-second speed change at most 3 m/s. Deterministic per seed; trip k only
// depends on (seed, k).
Corpus synth_corpus(const SynthConfig& cfg);

struct ContextFeatures {
  double total_distance = 0.0;    // L, meters
  std::vector<double> remaining;  // d_t = L - sum_{i<=t} s_i
  std::vector<double> condition;
};

// Rectangle-rule distance at 1 Hz, so remaining.back() == 0 exactly.
ContextFeatures context(const Trip& trip);

}  // namespace trajgen::data

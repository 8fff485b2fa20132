#include "trajgen/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "trajgen/error.hpp"
#include "trajgen/parallel.hpp"
#include "trajgen/random.hpp"

namespace trajgen::data {

void validate_trip(const Trip& trip, double v_max) {
  if (trip.speeds.size() < 2) {
    throw ContractError("trip '" + trip.id + "' has " + std::to_string(trip.speeds.size()) +
                        " samples; at least 2 are required");
  }
  for (std::size_t i = 0; i < trip.speeds.size(); ++i) {
    const double s = trip.speeds[i];
    if (!(s >= 0.0 && s <= v_max)) {
      throw ContractError("trip '" + trip.id + "' sample " + std::to_string(i) + ": speed " +
                          format_double(s) + " outside [0, " + format_double(v_max) + "]");
    }
  }
  const bool lon_ok = trip.lon.empty() || trip.lon.size() == trip.speeds.size();
  const bool lat_ok = trip.lat.empty() || trip.lat.size() == trip.speeds.size();
  if (!lon_ok || !lat_ok || trip.lon.size() != trip.lat.size()) {
    throw ContractError("trip '" + trip.id + "': lon/lat must be empty or one per sample");
  }
}

CorpusStats compute_stats(std::span<const Trip> trips, double v_max, double bin_width) {
  CorpusStats st;
  st.histogram_bin_width = bin_width;
  const auto bins = static_cast<std::size_t>(std::ceil(v_max / bin_width));
  st.speed_histogram.assign(bins, 0);
  st.trips = trips.size();
  if (trips.empty()) return st;

  st.min_length = std::numeric_limits<std::size_t>::max();
  double sum = 0.0;
  for (const Trip& t : trips) {
    st.points += t.size();
    st.min_length = std::min(st.min_length, t.size());
    st.max_length = std::max(st.max_length, t.size());
    for (double s : t.speeds) {
      sum += s;
      const auto b = std::min(bins - 1, static_cast<std::size_t>(s / bin_width));
      ++st.speed_histogram[b];
    }
  }
  st.mean_speed = sum / static_cast<double>(st.points);
  double ss = 0.0;
  for (const Trip& t : trips) {
    for (double s : t.speeds) ss += (s - st.mean_speed) * (s - st.mean_speed);
  }
  st.speed_variance = ss / static_cast<double>(st.points);
  return st;
}

Corpus::Corpus(double v_max, double bin_width) : Corpus(std::vector<Trip>{}, v_max, bin_width) {}

Corpus::Corpus(std::vector<Trip> trips, double v_max, double bin_width)
    : trips_(std::move(trips)), v_max_(v_max), bin_width_(bin_width) {
  if (!(v_max > 0.0) || !(bin_width > 0.0)) {
    throw ContractError("corpus: v_max and bin width must be positive");
  }
  for (const Trip& t : trips_) validate_trip(t, v_max_);
  stats_ = compute_stats(trips_, v_max_, bin_width_);
}

void Corpus::add(Trip trip) {
  validate_trip(trip, v_max_);
  trips_.push_back(std::move(trip));
  stats_ = compute_stats(trips_, v_max_, bin_width_);
}

std::vector<double> Corpus::pooled_speeds() const {
  std::vector<double> out;
  out.reserve(stats_.points);
  for (const Trip& t : trips_) out.insert(out.end(), t.speeds.begin(), t.speeds.end());
  return out;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      return out;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

double parse_number(std::string_view field, const char* column, std::size_t line) {
  double v = 0.0;
  const auto* end = field.data() + field.size();
  const auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc{} || res.ptr != end || !std::isfinite(v)) {
    throw IngestError("line " + std::to_string(line) + ": " + column + " '" + std::string(field) +
                          "' is not a finite number",
                      line);
  }
  return v;
}

struct PendingTrip {
  Trip trip;
  double last_ts = 0.0;
  std::size_t first_missing_coord_line = 0;
  std::size_t coord_count = 0;
};

}  // namespace

Corpus ingest_csv(std::istream& in, const CsvSchema& schema, IngestSummary* summary) {
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) have_header = true;
  }
  if (!have_header) throw IngestError("empty file: no header row", line_no);

  const auto header = split_fields(line);
  std::vector<std::string> names(header.begin(), header.end());
  auto column = [&](const std::string& name) -> std::ptrdiff_t {
    if (name.empty()) return -1;
    const auto it = std::find(names.begin(), names.end(), name);
    return it == names.end() ? -1 : it - names.begin();
  };
  const auto c_id = column(schema.trip_id);
  const auto c_ts = column(schema.timestamp);
  const auto c_speed = column(schema.speed);
  const auto c_lon = column(schema.lon);
  const auto c_lat = column(schema.lat);
  if (c_ts < 0) throw IngestError("header lacks timestamp column '" + schema.timestamp + "'", line_no);
  if (c_speed < 0) throw IngestError("header lacks speed column '" + schema.speed + "'", line_no);
  const bool has_coords = c_lon >= 0 && c_lat >= 0;

  std::vector<Trip> trips;
  IngestSummary sum;
  PendingTrip cur;
  bool open = false;
  std::string cur_source_id;
  std::size_t fragment = 0;
  std::size_t unnamed = 0;

  auto close = [&] {
    if (!open) return;
    open = false;
    if (cur.trip.size() < 2) {
      ++sum.skipped_short_trips;
      return;
    }
    if (cur.coord_count == 0) {
      cur.trip.lon.clear();
      cur.trip.lat.clear();
    } else if (cur.coord_count != cur.trip.size()) {
      throw IngestError("line " + std::to_string(cur.first_missing_coord_line) +
                            ": trip '" + cur.trip.id + "' has lon/lat on some rows but not this one",
                        cur.first_missing_coord_line);
    }
    trips.push_back(std::move(cur.trip));
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != names.size()) {
      throw IngestError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(names.size()) + " fields, found " +
                            std::to_string(f.size()),
                        line_no);
    }
    ++sum.rows;
    const double ts = parse_number(f[c_ts], "timestamp", line_no);
    const double speed = parse_number(f[c_speed], "speed", line_no);
    if (speed < 0.0 || speed > schema.v_max) {
      throw IngestError("line " + std::to_string(line_no) + ": speed " + format_double(speed) +
                            " outside [0, " + format_double(schema.v_max) + "]",
                        line_no);
    }
    const std::string id = c_id >= 0 ? std::string(f[c_id]) : std::string();

    bool new_trip = !open;
    if (open && id != cur_source_id) {
      new_trip = true;
    } else if (open) {
      if (ts <= cur.last_ts) {
        throw IngestError("line " + std::to_string(line_no) + ": timestamp " + format_double(ts) +
                              " does not increase within trip '" + cur_source_id + "'",
                          line_no);
      }
      if (ts - cur.last_ts > schema.gap_seconds) new_trip = true;
    }
    if (new_trip) {
      const bool same_source = open && id == cur_source_id;
      close();
      fragment = same_source ? fragment + 1 : 0;
      cur = PendingTrip{};
      cur_source_id = id;
      if (c_id >= 0) {
        cur.trip.id = fragment == 0 ? id : id + "#" + std::to_string(fragment + 1);
      } else {
        cur.trip.id = "trip-" + std::to_string(++unnamed);
      }
      cur.trip.timestamp_base = ts;
      open = true;
    }
    cur.last_ts = ts;
    cur.trip.speeds.push_back(speed);
    if (has_coords) {
      const bool empty_lon = f[c_lon].empty();
      const bool empty_lat = f[c_lat].empty();
      if (!empty_lon && !empty_lat) {
        cur.trip.lon.push_back(parse_number(f[c_lon], "lon", line_no));
        cur.trip.lat.push_back(parse_number(f[c_lat], "lat", line_no));
        ++cur.coord_count;
      } else {
        cur.trip.lon.push_back(0.0);
        cur.trip.lat.push_back(0.0);
        if (cur.first_missing_coord_line == 0) cur.first_missing_coord_line = line_no;
      }
    }
  }
  close();
  if (sum.rows == 0) throw IngestError("empty file: header but no data rows", line_no);
  if (summary) *summary = sum;
  return Corpus(std::move(trips), schema.v_max);
}

Corpus ingest_csv(const std::string& path, const CsvSchema& schema, IngestSummary* summary) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open '" + path + "'");
  return ingest_csv(in, schema, summary);
}

void export_csv(const Corpus& corpus, std::ostream& out) {
  out << "trip_id,timestamp,speed_mps,lon,lat\n";
  for (const Trip& t : corpus.trips()) {
    if (t.id.find_first_of(",\n\r") != std::string::npos) {
      throw ContractError("trip id '" + t.id + "' cannot be written to CSV");
    }
    const bool coords = !t.lon.empty();
    for (std::size_t i = 0; i < t.size(); ++i) {
      out << t.id << ',' << format_double(t.timestamp_base + static_cast<double>(i)) << ','
          << format_double(t.speeds[i]) << ',';
      if (coords) out << format_double(t.lon[i]) << ',' << format_double(t.lat[i]);
      else out << ',';
      out << '\n';
    }
  }
}

void export_csv(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  export_csv(corpus, out);
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Synthetic corpus

std::optional<Profile> profile_from_name(const std::string& name) {
  if (name == "urban") return Profile::urban;
  if (name == "highway") return Profile::highway;
  if (name == "mixed") return Profile::mixed;
  return std::nullopt;
}

const char* profile_name(Profile p) {
  switch (p) {
    case Profile::urban: return "urban";
    case Profile::highway: return "highway";
    case Profile::mixed: return "mixed";
  }
  return "?";
}

namespace {

struct DrivingStyle {
  double cruise_lo, cruise_hi;    // m/s
  std::size_t cruise_min, cruise_max;  // seconds per cruise segment
  double stop_probability;        // after each cruise segment
  std::size_t dwell_min, dwell_max;
  double accel_lo, accel_hi;      // m/s^2
  double decel_lo, decel_hi;
  double ou_theta, ou_sigma;
};

constexpr DrivingStyle kUrban{10.0, 18.0, 10, 60, 0.6, 5, 30, 1.0, 2.5, 1.0, 2.8, 0.1, 0.15};
constexpr DrivingStyle kHighway{20.0, 30.0, 30, 180, 0.1, 3, 10, 0.8, 2.0, 1.0, 2.5, 0.1, 0.15};

// Largest per-step change the builder ever requests; rounding to 0.01 m/s
// adds at most 0.005 on top, staying under the 3 m/s^2 bound.
constexpr double kMaxStep = 2.9;
// The closing deceleration never exceeds this rate.
constexpr double kStopRate = 2.5;

double round_centi(double v) { return std::round(v * 100.0) / 100.0; }

std::size_t draw_between(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(uniform_index(rng, hi - lo + 1));
}

class TripBuilder {
 public:
  TripBuilder(std::size_t n, double v_max, Rng& rng) : rng_(rng), v_max_(v_max) {
    final_dwell_ = draw_between(rng_, 1, 5);
    body_cap_ = n - final_dwell_;
    speeds_.reserve(n);
  }

  bool full() const { return full_; }
  double speed() const { return v_; }

  // Appends one sample unless that would leave too little room to stop.
  bool emit(double next) {
    if (full_) return false;
    next = round_centi(std::clamp(next, 0.0, v_max_));
    const std::size_t after = speeds_.size() + 1;
    if (after > body_cap_ ||
        static_cast<double>(body_cap_ - after) < std::ceil(next / kStopRate)) {
      full_ = true;
      return false;
    }
    speeds_.push_back(next);
    v_ = next;
    return true;
  }

  void dwell(std::size_t steps) {
    for (std::size_t k = 0; k < steps && emit(0.0); ++k) {
    }
  }

  void ramp_to(double target, double rate) {
    rate = std::min(rate, kMaxStep);
    while (!full_ && std::abs(v_ - target) > 1e-9) {
      const double step = std::clamp(target - v_, -rate, rate);
      if (!emit(v_ + step)) return;
      if (std::abs(v_ - target) < 0.01) return;
    }
  }

  void cruise(double target, std::size_t steps, double theta, double sigma) {
    for (std::size_t k = 0; k < steps && !full_; ++k) {
      const double delta = theta * (target - v_) + sigma * standard_normal(rng_);
      if (!emit(v_ + std::clamp(delta, -kMaxStep, kMaxStep))) return;
    }
  }

  std::vector<double> finish() {
    const std::size_t r = body_cap_ - speeds_.size();
    const double v0 = v_;
    for (std::size_t k = 1; k <= r; ++k) {
      speeds_.push_back(round_centi(v0 * static_cast<double>(r - k) / static_cast<double>(r)));
    }
    speeds_.insert(speeds_.end(), final_dwell_, 0.0);
    return std::move(speeds_);
  }

 private:
  Rng& rng_;
  double v_max_;
  std::size_t final_dwell_ = 0;
  std::size_t body_cap_ = 0;
  std::vector<double> speeds_;
  double v_ = 0.0;
  bool full_ = false;
};

std::vector<double> synth_speeds(std::size_t n, const DrivingStyle& st, double v_max, Rng& rng) {
  TripBuilder b(n, v_max, rng);
  b.dwell(draw_between(rng, 1, 5));
  while (!b.full()) {
    const double target = std::min(v_max, uniform(rng, st.cruise_lo, st.cruise_hi));
    const double rate = target >= b.speed() ? uniform(rng, st.accel_lo, st.accel_hi)
                                            : uniform(rng, st.decel_lo, st.decel_hi);
    b.ramp_to(target, rate);
    b.cruise(target, draw_between(rng, st.cruise_min, st.cruise_max), st.ou_theta, st.ou_sigma);
    if (uniform01(rng) < st.stop_probability) {
      b.ramp_to(0.0, uniform(rng, st.decel_lo, st.decel_hi));
      b.dwell(draw_between(rng, st.dwell_min, st.dwell_max));
    }
  }
  return b.finish();
}

}  // namespace

Corpus synth_corpus(const SynthConfig& cfg) {
  if (cfg.trips < 1) throw ContractError("synth_corpus: at least one trip is required");
  if (cfg.min_length < 2 || cfg.min_length > cfg.max_length) {
    throw ContractError("synth_corpus: invalid length range [" + std::to_string(cfg.min_length) +
                        ", " + std::to_string(cfg.max_length) + "]");
  }
  if (cfg.min_length < 20) {
    throw ContractError("synth_corpus: trips shorter than 20 s cannot hold a full drive cycle");
  }
  if (cfg.v_max < kHighway.cruise_hi) {
    throw ContractError("synth_corpus: v_max must be at least " + format_double(kHighway.cruise_hi));
  }

  std::vector<Trip> trips(cfg.trips);
  parallel_for(cfg.trips, [&](std::size_t k) {
    Rng rng(derive_seed(cfg.seed, k));
    const std::size_t n = draw_between(rng, cfg.min_length, cfg.max_length);
    const DrivingStyle* style = &kUrban;
    if (cfg.profile == Profile::highway) style = &kHighway;
    if (cfg.profile == Profile::mixed && uniform01(rng) < 0.5) style = &kHighway;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%06zu", k + 1);
    trips[k].id = id;
    trips[k].speeds = synth_speeds(n, *style, cfg.v_max, rng);
  });
  return Corpus(std::move(trips), cfg.v_max);
}

ContextFeatures context(const Trip& trip) {
  ContextFeatures out;
  out.remaining.resize(trip.size());
  double cum = 0.0;
  std::vector<double> cumulative(trip.size());
  for (std::size_t t = 0; t < trip.size(); ++t) {
    cum += trip.speeds[t];
    cumulative[t] = cum;
  }
  out.total_distance = cum;
  for (std::size_t t = 0; t < trip.size(); ++t) out.remaining[t] = cum - cumulative[t];
  return out;
}

}  // namespace trajgen::data

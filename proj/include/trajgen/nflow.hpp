#pragma once

// One-dimensional normalizing flows and the per-bin flow generator (NFG).
//
// A flow maps base noise z ~ N(0, 1) to data x through scalar layers,
// x = T_K(...T_1(z)). Two layer kinds are available:
//
//   affine:    T(z) = a z + b, a != 0
//   tanh:      T = S^-1 with S(x) = x + c tanh(e^rho x + beta),
//              c = (e^kappa - 1) e^-rho, so S'(x) = 1 + (e^kappa - 1) sech^2(...)
//              lies strictly between 1 and e^kappa.
//
// The tanh layer is written in the normalizing direction, which makes the
// likelihood exact and cheap; sampling inverts S by safeguarded Newton
// iteration to machine precision.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajgen/data.hpp"
#include "trajgen/random.hpp"

namespace trajgen::nflow {

enum class LayerKind { affine, tanh };

struct FlowLayer {
  LayerKind kind = LayerKind::affine;
  // affine: {a, b, unused}; tanh: {kappa, rho, beta}
  std::array<double, 3> params{1.0, 0.0, 0.0};

  static FlowLayer affine(double a, double b) { return {LayerKind::affine, {a, b, 0.0}}; }
  static FlowLayer tanh(double kappa, double rho, double beta) {
    return {LayerKind::tanh, {kappa, rho, beta}};
  }

  double forward(double z) const;
  double inverse(double x) const;
  // log |dT/dz| at input z.
  double log_abs_derivative(double z) const;
  // log |dT^-1/dx| at output x.
  double inverse_log_abs_derivative(double x) const;

  std::size_t num_params() const { return kind == LayerKind::affine ? 2 : 3; }
  void validate() const;

  friend bool operator==(const FlowLayer&, const FlowLayer&) = default;
};

struct FlowModel {
  std::vector<FlowLayer> layers;

  // Generative order [tanh, affine, tanh, affine]. The outer affine layer is
  // set to (std, mean); tanh layers start as the identity (kappa = 0) with
  // rho and beta drawn from the seed.
  static FlowModel standard(double mean, double std, std::uint64_t seed);

  void validate() const;
  friend bool operator==(const FlowModel&, const FlowModel&) = default;
};

double forward(const FlowModel& fm, double z);
double inverse(const FlowModel& fm, double x);
// sum_k log |T_k'(z_{k-1})| along the generative pass starting at z.
double log_det_jacobian(const FlowModel& fm, double z);
// log N(G^-1(x); 0, 1) + log |dG^-1/dx|.
double log_likelihood(const FlowModel& fm, double x);

struct FitConfig {
  std::size_t epochs = 400;
  double lr = 0.02;
  std::uint64_t seed = 0;
  // Width of the uniform dequantization noise added to each training sample
  // (m/s). Speeds recorded at 0.01 m/s resolution, and long runs of exact
  // zeros, would otherwise let the likelihood grow without bound.
  double jitter = 0.1;
  double clip_norm = 5.0;
};

struct FitResult {
  FlowModel model;
  std::vector<double> history;  // mean log-likelihood before each update, then the final value
  double initial_log_likelihood = 0.0;
  double final_log_likelihood = 0.0;  // of the returned (best) parameters
};

// Full-batch Adam on the mean log-likelihood. Returns the best parameters
// seen, so final >= initial. Deterministic for a given seed.
FitResult fit(const FlowModel& init, std::span<const double> samples, const FitConfig& cfg);

// Mean log-likelihood of samples as a differentiable function of the
// layer parameters; exposed so gradients can be checked directly.
double mean_log_likelihood(const FlowModel& fm, std::span<const double> samples);
std::vector<double> mean_log_likelihood_gradient(const FlowModel& fm, std::span<const double> samples);

struct BinModel {
  bool trained = false;
  std::size_t samples = 0;
  FlowModel model;
  double initial_log_likelihood = 0.0;
  double final_log_likelihood = 0.0;
};

struct EnsembleConfig {
  double bin_width = data::kDefaultBinWidth;
  double v_max = data::kDefaultVMax;
  std::size_t min_samples = 50;
  FitConfig fit;
};

class FlowEnsemble {
 public:
  FlowEnsemble(double bin_width = data::kDefaultBinWidth, double v_max = data::kDefaultVMax);

  double bin_width() const { return bin_width_; }
  double v_max() const { return v_max_; }
  std::size_t num_bins() const { return bins_.size(); }
  std::size_t bin_of(double speed) const;

  const BinModel& bin(std::size_t i) const { return bins_.at(i); }
  BinModel& bin(std::size_t i) { return bins_.at(i); }
  std::size_t trained_bins() const;

  EnsembleConfig config;  // as used for fitting; informational

 private:
  double bin_width_;
  double v_max_;
  std::vector<BinModel> bins_;
};

// Next-speed samples grouped by the bin of the current speed.
std::vector<std::vector<double>> next_speed_samples(std::span<const data::Trip> trips, double bin_width,
                                                    double v_max);

// Fits every bin with at least min_samples next-speeds, in parallel; bin i
// uses seed derive_seed(cfg.fit.seed, i).
FlowEnsemble fit_ensemble(std::span<const data::Trip> trips, const EnsembleConfig& cfg);

// One draw from bin i's flow, clamped to [0, v_max]. Throws SamplingError if
// the bin is untrained.
double sample_next(const FlowEnsemble& fe, std::size_t bin, Rng& rng, bool* clamped = nullptr);

struct NfgTrajectory {
  std::vector<double> speeds;  // N + 1 values, speeds[0] == 0
  std::size_t clamped = 0;     // draws that fell outside [0, v_max]
};

// Starts at s = 0 and draws N successors, each from the flow of the bin that
// contains the current speed.
NfgTrajectory nfg_generate(const FlowEnsemble& fe, std::size_t n, std::uint64_t seed);

nlohmann::json to_json(const FlowModel& fm);
FlowModel model_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FlowEnsemble& fe);
FlowEnsemble ensemble_from_json(const nlohmann::json& j);
void save(const FlowEnsemble& fe, const std::string& path);
FlowEnsemble load(const std::string& path);

}  // namespace trajgen::nflow

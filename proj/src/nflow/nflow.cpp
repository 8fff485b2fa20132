#include "trajgen/nflow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "trajgen/autodiff.hpp"
#include "trajgen/error.hpp"
#include "trajgen/optim.hpp"
#include "trajgen/parallel.hpp"

namespace trajgen::nflow {

namespace {

constexpr const char* kFormat = "trajgen.nflow";
constexpr int kVersion = 1;
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

double tanh_coeff(double kappa, double rho) { return std::expm1(kappa) * std::exp(-rho); }

// S(x) for a tanh layer (normalizing direction).
double s_value(const std::array<double, 3>& p, double x) {
  return x + tanh_coeff(p[0], p[1]) * std::tanh(std::exp(p[1]) * x + p[2]);
}

double s_derivative(const std::array<double, 3>& p, double x) {
  const double t = std::tanh(std::exp(p[1]) * x + p[2]);
  return 1.0 + std::expm1(p[0]) * (1.0 - t * t);
}

// Solves S(x) = y. S - id is bounded by |c|, which gives the bracket.
double s_inverse(const std::array<double, 3>& p, double y) {
  const double c = std::abs(tanh_coeff(p[0], p[1]));
  if (c == 0.0) return y;
  double lo = y - c;
  double hi = y + c;
  double x = y;
  double last_step = hi - lo;
  for (int it = 0; it < 200; ++it) {
    const double f = s_value(p, x) - y;
    if (f == 0.0) return x;
    if (f > 0.0) hi = x;
    else lo = x;
    double next = x - f / s_derivative(p, x);
    // Newton can bounce across the tanh knee while barely shrinking the
    // bracket; bisect whenever a step fails to halve the previous one.
    if (!(next > lo && next < hi) || std::abs(next - x) > 0.5 * last_step) next = 0.5 * (lo + hi);
    last_step = std::abs(next - x);
    if (std::abs(next - x) <= 1e-16 * (1.0 + std::abs(x)) || hi - lo <= 1e-16 * (1.0 + std::abs(x))) {
      return next;
    }
    x = next;
  }
  return x;
}

std::vector<ad::Tensor> flatten(const FlowModel& fm) {
  std::vector<ad::Tensor> out;
  for (const auto& layer : fm.layers)
    for (std::size_t k = 0; k < layer.num_params(); ++k) out.push_back(ad::Tensor::scalar(layer.params[k]));
  return out;
}

void unflatten(FlowModel& fm, std::span<const ad::Tensor> values) {
  std::size_t i = 0;
  for (auto& layer : fm.layers)
    for (std::size_t k = 0; k < layer.num_params(); ++k) layer.params[k] = values[i++].item();
}

// Mean log-likelihood of x (constant) as a graph over the flattened parameters.
ad::Var graph_mean_ll(const FlowModel& structure, std::span<const ad::Var> p, const ad::Tensor& x,
                      ad::Tape& tape) {
  ad::Var v = tape.constant(x);
  ad::Var per_sample = tape.constant(ad::Tensor(x.shape(), 0.0));
  ad::Var shared = tape.constant(ad::Tensor::scalar(-kHalfLog2Pi));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& layer : structure.layers) {
    offsets.push_back(offset);
    offset += layer.num_params();
  }
  for (std::size_t k = structure.layers.size(); k-- > 0;) {
    const std::size_t o = offsets[k];
    if (structure.layers[k].kind == LayerKind::affine) {
      ad::Var a = p[o];
      ad::Var b = p[o + 1];
      v = (v - b) / a;
      shared = shared - ad::log(ad::square(a)) * 0.5;
    } else {
      ad::Var em1 = ad::add(ad::exp(p[o]), -1.0);
      ad::Var er = ad::exp(p[o + 1]);
      ad::Var t = ad::tanh(ad::add(v * er, p[o + 2]));
      ad::Var next = v + (em1 / er) * t;
      per_sample = per_sample + ad::log(ad::add(em1 * ad::sub(1.0, ad::square(t)), 1.0));
      v = next;
    }
  }
  return ad::mean(per_sample - ad::square(v) * 0.5) + shared;
}

std::vector<double> jittered(std::span<const double> samples, double width, std::uint64_t seed) {
  std::vector<double> out(samples.begin(), samples.end());
  if (width <= 0.0) return out;
  Rng rng(seed);
  for (double& v : out) v += uniform(rng, -0.5 * width, 0.5 * width);
  return out;
}

const char* kind_name(LayerKind k) { return k == LayerKind::affine ? "affine" : "tanh"; }

}  // namespace

// ---------------------------------------------------------------------------
// Layers

double FlowLayer::forward(double z) const {
  if (kind == LayerKind::affine) return params[0] * z + params[1];
  return s_inverse(params, z);
}

double FlowLayer::inverse(double x) const {
  if (kind == LayerKind::affine) return (x - params[1]) / params[0];
  return s_value(params, x);
}

double FlowLayer::log_abs_derivative(double z) const {
  if (kind == LayerKind::affine) return std::log(std::abs(params[0]));
  return -std::log(s_derivative(params, forward(z)));
}

double FlowLayer::inverse_log_abs_derivative(double x) const {
  if (kind == LayerKind::affine) return -std::log(std::abs(params[0]));
  return std::log(s_derivative(params, x));
}

void FlowLayer::validate() const {
  for (std::size_t k = 0; k < num_params(); ++k) {
    if (!std::isfinite(params[k])) throw ContractError(std::string(kind_name(kind)) + " layer: non-finite parameter");
  }
  if (kind == LayerKind::affine && params[0] == 0.0) throw ContractError("affine layer: scale must be nonzero");
}

FlowModel FlowModel::standard(double mean, double std, std::uint64_t seed) {
  if (!(std > 0.0) || !std::isfinite(mean)) throw ContractError("FlowModel::standard: need finite mean and std > 0");
  Rng rng(seed);
  FlowModel fm;
  auto monotone = [&] { return FlowLayer::tanh(0.0, uniform(rng, -0.5, 0.5), uniform(rng, -1.0, 1.0)); };
  fm.layers.push_back(monotone());
  fm.layers.push_back(FlowLayer::affine(1.0, 0.0));
  fm.layers.push_back(monotone());
  fm.layers.push_back(FlowLayer::affine(std, mean));
  return fm;
}

void FlowModel::validate() const {
  if (layers.empty()) throw ContractError("FlowModel: at least one layer is required");
  for (const auto& l : layers) l.validate();
}

double forward(const FlowModel& fm, double z) {
  for (const auto& l : fm.layers) z = l.forward(z);
  return z;
}

double inverse(const FlowModel& fm, double x) {
  for (auto it = fm.layers.rbegin(); it != fm.layers.rend(); ++it) x = it->inverse(x);
  return x;
}

double log_det_jacobian(const FlowModel& fm, double z) {
  double total = 0.0;
  for (const auto& l : fm.layers) {
    total += l.log_abs_derivative(z);
    z = l.forward(z);
  }
  return total;
}

double log_likelihood(const FlowModel& fm, double x) {
  double total = 0.0;
  for (auto it = fm.layers.rbegin(); it != fm.layers.rend(); ++it) {
    total += it->inverse_log_abs_derivative(x);
    x = it->inverse(x);
  }
  return total - 0.5 * x * x - kHalfLog2Pi;
}

// ---------------------------------------------------------------------------
// Fitting

double mean_log_likelihood(const FlowModel& fm, std::span<const double> samples) {
  if (samples.empty()) throw ContractError("mean_log_likelihood: no samples");
  double sum = 0.0;
  for (double x : samples) sum += log_likelihood(fm, x);
  return sum / static_cast<double>(samples.size());
}

std::vector<double> mean_log_likelihood_gradient(const FlowModel& fm, std::span<const double> samples) {
  if (samples.empty()) throw ContractError("mean_log_likelihood_gradient: no samples");
  fm.validate();
  ad::Tape tape;
  std::vector<ad::Var> p;
  for (auto& t : flatten(fm)) p.push_back(tape.variable(t));
  const ad::Tensor x = ad::Tensor::vector(std::vector<double>(samples.begin(), samples.end()));
  tape.backward(graph_mean_ll(fm, p, x, tape));
  std::vector<double> out;
  for (const auto& v : p) out.push_back(tape.grad(v).item());
  return out;
}

FitResult fit(const FlowModel& init, std::span<const double> samples, const FitConfig& cfg) {
  init.validate();
  if (samples.empty()) throw ContractError("nflow::fit: no samples");
  if (!(cfg.lr > 0.0)) throw ContractError("nflow::fit: learning rate must be positive");
  const std::vector<double> data = jittered(samples, cfg.jitter, derive_seed(cfg.seed, 0x6a));
  const ad::Tensor x = ad::Tensor::vector(data);

  FitResult result;
  FlowModel current = init;
  std::vector<ad::Tensor> params = flatten(current);
  std::vector<ad::Tensor*> slots;
  for (auto& t : params) slots.push_back(&t);
  AdamState state;
  const AdamConfig adam{cfg.lr};

  double best = -std::numeric_limits<double>::infinity();
  FlowModel best_model = current;
  auto consider = [&](double ll) {
    result.history.push_back(ll);
    if (std::isfinite(ll) && ll > best) {
      best = ll;
      unflatten(best_model, params);
    }
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    ad::Tape tape;
    std::vector<ad::Var> p;
    for (const auto& t : params) p.push_back(tape.variable(t));
    ad::Var ll;
    try {
      ll = graph_mean_ll(current, p, x, tape);
    } catch (const DomainError&) {
      break;  // a scale reached exactly zero; keep the best parameters so far
    }
    const double value = ll.value().item();
    consider(value);
    if (!std::isfinite(value)) break;
    tape.backward(ad::negate(ll));
    std::vector<ad::Tensor> grads;
    for (const auto& v : p) grads.push_back(tape.grad(v));
    clip_global_norm(grads, cfg.clip_norm);
    adam_step(slots, grads, state, adam);
    unflatten(current, params);
  }
  bool usable = true;
  try {
    current.validate();
  } catch (const ContractError&) {
    usable = false;
  }
  if (usable) consider(mean_log_likelihood(current, data));

  result.model = best_model;
  result.initial_log_likelihood = result.history.front();
  result.final_log_likelihood = best;
  return result;
}

// ---------------------------------------------------------------------------
// Ensemble

FlowEnsemble::FlowEnsemble(double bin_width, double v_max) : bin_width_(bin_width), v_max_(v_max) {
  if (!(bin_width > 0.0) || !(v_max > 0.0)) throw ContractError("FlowEnsemble: bin width and v_max must be positive");
  const double ratio = v_max / bin_width;
  const double nearest = std::round(ratio);
  const auto n = std::abs(ratio - nearest) < 1e-9 * std::max(1.0, nearest) ? static_cast<std::size_t>(nearest)
                                                                            : static_cast<std::size_t>(std::ceil(ratio));
  bins_.resize(n);
  config.bin_width = bin_width;
  config.v_max = v_max;
}

std::size_t FlowEnsemble::bin_of(double speed) const {
  if (!(speed >= 0.0 && speed <= v_max_)) {
    throw DomainError("speed " + data::format_double(speed) + " outside [0, " + data::format_double(v_max_) + "]");
  }
  return std::min(bins_.size() - 1, static_cast<std::size_t>(speed / bin_width_));
}

std::size_t FlowEnsemble::trained_bins() const {
  return static_cast<std::size_t>(std::count_if(bins_.begin(), bins_.end(), [](const BinModel& b) { return b.trained; }));
}

std::vector<std::vector<double>> next_speed_samples(std::span<const data::Trip> trips, double bin_width,
                                                    double v_max) {
  const FlowEnsemble shape(bin_width, v_max);
  std::vector<std::vector<double>> out(shape.num_bins());
  for (const auto& trip : trips) {
    for (std::size_t t = 0; t + 1 < trip.speeds.size(); ++t) {
      out[shape.bin_of(trip.speeds[t])].push_back(trip.speeds[t + 1]);
    }
  }
  return out;
}

FlowEnsemble fit_ensemble(std::span<const data::Trip> trips, const EnsembleConfig& cfg) {
  FlowEnsemble fe(cfg.bin_width, cfg.v_max);
  fe.config = cfg;
  const auto samples = next_speed_samples(trips, cfg.bin_width, cfg.v_max);
  parallel_for(fe.num_bins(), [&](std::size_t i) {
    BinModel& bm = fe.bin(i);
    bm.samples = samples[i].size();
    if (bm.samples < std::max<std::size_t>(cfg.min_samples, 2)) return;
    double mean = 0.0;
    for (double v : samples[i]) mean += v;
    mean /= static_cast<double>(bm.samples);
    double var = 0.0;
    for (double v : samples[i]) var += (v - mean) * (v - mean);
    const double std = std::max(std::sqrt(var / static_cast<double>(bm.samples)), 0.05);
    FitConfig fc = cfg.fit;
    fc.seed = derive_seed(cfg.fit.seed, i);
    const FitResult r = fit(FlowModel::standard(mean, std, fc.seed), samples[i], fc);
    bm.trained = true;
    bm.model = r.model;
    bm.initial_log_likelihood = r.initial_log_likelihood;
    bm.final_log_likelihood = r.final_log_likelihood;
  });
  return fe;
}

double sample_next(const FlowEnsemble& fe, std::size_t bin, Rng& rng, bool* clamped) {
  const BinModel& bm = fe.bin(bin);
  if (!bm.trained) {
    throw SamplingError("bin " + std::to_string(bin) + " has no trained flow (" + std::to_string(bm.samples) +
                            " training samples)",
                        {}, bin);
  }
  const double x = forward(bm.model, standard_normal(rng));
  const double y = std::clamp(x, 0.0, fe.v_max());
  if (clamped) *clamped = y != x;
  return y;
}

NfgTrajectory nfg_generate(const FlowEnsemble& fe, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  NfgTrajectory out;
  out.speeds.reserve(n + 1);
  out.speeds.push_back(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bin = fe.bin_of(out.speeds.back());
    if (!fe.bin(bin).trained) {
      throw SamplingError("NFG reached untrained bin " + std::to_string(bin) + " after " +
                              std::to_string(out.speeds.size()) + " samples",
                          out.speeds, bin);
    }
    bool clamped = false;
    out.speeds.push_back(sample_next(fe, bin, rng, &clamped));
    if (clamped) ++out.clamped;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

nlohmann::json to_json(const FlowModel& fm) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : fm.layers) {
    if (l.kind == LayerKind::affine) {
      layers.push_back({{"kind", "affine"}, {"a", l.params[0]}, {"b", l.params[1]}});
    } else {
      layers.push_back({{"kind", "tanh"}, {"kappa", l.params[0]}, {"rho", l.params[1]}, {"beta", l.params[2]}});
    }
  }
  return layers;
}

FlowModel model_from_json(const nlohmann::json& j) {
  FlowModel fm;
  for (const auto& l : j) {
    const auto kind = l.at("kind").get<std::string>();
    if (kind == "affine") {
      fm.layers.push_back(FlowLayer::affine(l.at("a").get<double>(), l.at("b").get<double>()));
    } else if (kind == "tanh") {
      fm.layers.push_back(
          FlowLayer::tanh(l.at("kappa").get<double>(), l.at("rho").get<double>(), l.at("beta").get<double>()));
    } else {
      throw DataError("unknown flow layer kind '" + kind + "'");
    }
  }
  fm.validate();
  return fm;
}

nlohmann::json to_json(const FlowEnsemble& fe) {
  nlohmann::json bins = nlohmann::json::array();
  for (std::size_t i = 0; i < fe.num_bins(); ++i) {
    const BinModel& b = fe.bin(i);
    nlohmann::json entry{{"bin", i}, {"trained", b.trained}, {"samples", b.samples}};
    if (b.trained) {
      entry["initial_log_likelihood"] = b.initial_log_likelihood;
      entry["final_log_likelihood"] = b.final_log_likelihood;
      entry["layers"] = to_json(b.model);
    }
    bins.push_back(entry);
  }
  const auto& c = fe.config;
  return {{"format", kFormat},
          {"version", kVersion},
          {"bin_width", fe.bin_width()},
          {"v_max", fe.v_max()},
          {"training",
           {{"min_samples", c.min_samples},
            {"epochs", c.fit.epochs},
            {"lr", c.fit.lr},
            {"seed", c.fit.seed},
            {"jitter", c.fit.jitter},
            {"clip_norm", c.fit.clip_norm}}},
          {"bins", bins}};
}

FlowEnsemble ensemble_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kFormat) throw DataError("not a flow ensemble file");
    const int version = j.at("version").get<int>();
    if (version != kVersion) throw DataError("unsupported flow ensemble version " + std::to_string(version));
    FlowEnsemble fe(j.at("bin_width").get<double>(), j.at("v_max").get<double>());
    const auto& t = j.at("training");
    fe.config.min_samples = t.at("min_samples").get<std::size_t>();
    fe.config.fit.epochs = t.at("epochs").get<std::size_t>();
    fe.config.fit.lr = t.at("lr").get<double>();
    fe.config.fit.seed = t.at("seed").get<std::uint64_t>();
    fe.config.fit.jitter = t.at("jitter").get<double>();
    fe.config.fit.clip_norm = t.at("clip_norm").get<double>();
    const auto& bins = j.at("bins");
    if (bins.size() != fe.num_bins()) {
      throw DataError("flow ensemble lists " + std::to_string(bins.size()) + " bins, expected " +
                      std::to_string(fe.num_bins()));
    }
    for (std::size_t i = 0; i < fe.num_bins(); ++i) {
      const auto& e = bins[i];
      BinModel& b = fe.bin(i);
      b.trained = e.at("trained").get<bool>();
      b.samples = e.at("samples").get<std::size_t>();
      if (b.trained) {
        b.initial_log_likelihood = e.at("initial_log_likelihood").get<double>();
        b.final_log_likelihood = e.at("final_log_likelihood").get<double>();
        b.model = model_from_json(e.at("layers"));
      }
    }
    return fe;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed flow ensemble: ") + e.what());
  } catch (const ContractError& e) {
    throw DataError(std::string("invalid flow ensemble: ") + e.what());
  }
}

void save(const FlowEnsemble& fe, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << to_json(fe).dump(1) << '\n';
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

FlowEnsemble load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
  return ensemble_from_json(j);
}

}  // namespace trajgen::nflow

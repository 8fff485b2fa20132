#include "trajgen/aegan.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "trajgen/error.hpp"
#include "trajgen/optim.hpp"
#include "trajgen/random.hpp"

namespace trajgen::aegan {

static_assert(std::endian::native == std::endian::little, "model files are written little-endian");

namespace {

constexpr char kMagic[8] = {'T', 'R', 'J', 'A', 'E', 'G', 'A', 'N'};
constexpr std::uint32_t kFileVersion = 1;
constexpr const char* kFormat = "trajgen.aegan";

const double kNaN = std::numeric_limits<double>::quiet_NaN();

// log(eps + (1 - 2 eps) p): finite for p in [0, 1] and exactly log p at p = 1/2.
Var guarded_log(Var p) { return ad::log(ad::add(ad::mul(p, 1.0 - 2.0 * kLogEpsilon), kLogEpsilon)); }

Tensor row_condition(const AeGanModel& m, std::size_t rows, const Tensor& condition, const char* who) {
  if (m.condition_dim() == 0) return {};
  if (condition.rank() != 2 || condition.rows() != rows || condition.cols() != m.condition_dim()) {
    throw ShapeError(std::string(who) + ": condition " + ad::shape_str(condition.shape()) + ", expected " +
                     std::to_string(rows) + " x " + std::to_string(m.condition_dim()));
  }
  return condition;
}

Var with_condition(Var x, const Tensor& condition, std::size_t condition_dim) {
  if (condition_dim == 0) return x;
  return ad::concat({x, x.tape->constant(condition)});
}

void check_latent_rows(const Tensor& t, std::size_t dim, const char* what) {
  if (t.rank() != 2 || t.cols() != dim) {
    throw ShapeError(std::string(what) + " " + ad::shape_str(t.shape()) + " must be B x " + std::to_string(dim));
  }
}

void least_squares(std::span<const double> x, std::span<const double> y, double& intercept, double& slope) {
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  slope = sxx > 0.0 ? sxy / sxx : 0.0;
  intercept = my - slope * mx;
}

bool all_finite(std::span<const Tensor> ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

Tensor normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = standard_normal(rng);
  return t;
}

std::vector<std::pair<std::string, Tensor*>> named_tensors(AeGanModel& m) {
  static const char* kLstm[] = {"w_sf", "w_si", "w_so", "w_gs", "w_hf", "w_hi",
                                "w_ho", "w_gh", "b_f",  "b_i",  "b_o",  "b_c"};
  std::vector<std::pair<std::string, Tensor*>> out;
  auto cells = [&](const char* prefix, std::vector<nn::LstmCellParams>& layers) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto ts = layers[l].tensors();
      for (std::size_t k = 0; k < ts.size(); ++k) {
        out.emplace_back(std::string(prefix) + "." + std::to_string(l) + "." + kLstm[k], ts[k]);
      }
    }
  };
  cells("encoder", m.ed.encoder);
  cells("decoder", m.ed.decoder);
  out.emplace_back("head.w", &m.ed.head_w);
  out.emplace_back("head.b", &m.ed.head_b);
  out.emplace_back("latent.mean", &m.latent_mean);
  out.emplace_back("latent.scale", &m.latent_scale);
  auto mlp = [&](const char* prefix, nn::MlpParams& p) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      out.emplace_back(std::string(prefix) + "." + std::to_string(l) + ".w", &p.layers[l].w);
      out.emplace_back(std::string(prefix) + "." + std::to_string(l) + ".b", &p.layers[l].b);
    }
  };
  mlp("generator", m.generator);
  mlp("discriminator", m.discriminator);
  return out;
}

nlohmann::json normalization_json(const Normalization& n) {
  return {{"length_min", n.length_min},
          {"length_max", n.length_max},
          {"steps_intercept", n.steps_intercept},
          {"steps_per_meter", n.steps_per_meter},
          {"meters_intercept", n.meters_intercept},
          {"meters_per_step", n.meters_per_step}};
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::rnn1d:
      return "rnn1d";
    case Variant::rnn3d:
      return "rnn3d";
    case Variant::crnn:
      return "crnn";
  }
  return "?";
}

std::optional<Variant> variant_from_name(const std::string& name) {
  for (Variant v : {Variant::rnn1d, Variant::rnn3d, Variant::crnn}) {
    if (name == variant_name(v)) return v;
  }
  return std::nullopt;
}

const char* gen_loss_name(GenLoss g) { return g == GenLoss::minimax ? "minimax" : "nonsaturating"; }

std::optional<GenLoss> gen_loss_from_name(const std::string& name) {
  if (name == "nonsaturating") return GenLoss::nonsaturating;
  if (name == "minimax") return GenLoss::minimax;
  return std::nullopt;
}

double Normalization::condition_of(double length_m) const {
  if (!(length_max > length_min)) return 0.0;
  return (length_m - length_min) / (length_max - length_min);
}

double Normalization::steps_for(double length_m) const {
  return std::max(1.0, steps_intercept + steps_per_meter * length_m);
}

std::size_t Normalization::generation_steps(double length_m) const {
  return static_cast<std::size_t>(std::llround(kStepHeadroom * steps_for(length_m)));
}

double Normalization::distance_for(std::size_t steps) const {
  return std::max(0.0, meters_intercept + meters_per_step * static_cast<double>(steps));
}

AeGanModel AeGanModel::init(Variant variant, std::size_t hidden, std::size_t layers, std::uint64_t seed,
                            std::size_t gan_hidden, double v_max) {
  if (gan_hidden == 0) throw ContractError("AeGanModel: gan_hidden must be positive");
  if (!(v_max > 0.0)) throw ContractError("AeGanModel: v_max must be positive");
  Rng rng(seed);
  AeGanModel m;
  m.variant = variant;
  m.ed = nn::EncoderDecoder::init(hidden, layers, variant != Variant::rnn1d, variant == Variant::crnn ? 1 : 0,
                                  rng);
  m.ed.speed_scale = v_max;
  for (auto* cells : {&m.ed.encoder, &m.ed.decoder}) {
    for (auto& c : *cells) std::fill(c.b_f.values().begin(), c.b_f.values().end(), 1.0);
  }
  const std::size_t latent = m.ed.latent_dim();
  const std::size_t in = latent + m.ed.condition_dim;
  const std::vector<std::size_t> g_dims{in, gan_hidden, gan_hidden, latent};
  const std::vector<std::size_t> d_dims{in, gan_hidden, gan_hidden, 1};
  m.generator = nn::MlpParams::init(g_dims, nn::Activation::tanh, nn::Activation::identity, rng);
  m.discriminator = nn::MlpParams::init(d_dims, nn::Activation::tanh, nn::Activation::sigmoid, rng);
  m.latent_mean = Tensor({latent}, 0.0);
  m.latent_scale = Tensor({latent}, 1.0);
  return m;
}

void AeGanModel::validate() const {
  ed.validate();
  generator.validate();
  discriminator.validate();
  if ((variant == Variant::rnn1d) == ed.distance_channels) {
    throw ContractError(std::string("AeGanModel: ") + variant_name(variant) + " has the wrong input channels");
  }
  if ((variant == Variant::crnn ? 1u : 0u) != ed.condition_dim) {
    throw ContractError(std::string("AeGanModel: ") + variant_name(variant) + " has the wrong condition size");
  }
  const std::size_t in = latent_dim() + condition_dim();
  if (latent_mean.shape() != ad::Shape{latent_dim()} || latent_scale.shape() != ad::Shape{latent_dim()}) {
    throw ShapeError("AeGanModel: latent statistics must have " + std::to_string(latent_dim()) + " entries");
  }
  for (double s : latent_scale.values()) {
    if (!(s > 0.0)) throw ContractError("AeGanModel: latent scales must be positive");
  }
  if (generator.input_dim() != in || generator.output_dim() != latent_dim()) {
    throw ShapeError("AeGanModel: generator must map " + std::to_string(in) + " -> " + std::to_string(latent_dim()));
  }
  if (discriminator.input_dim() != in || discriminator.output_dim() != 1 ||
      discriminator.layers.back().activation != nn::Activation::sigmoid) {
    throw ShapeError("AeGanModel: discriminator must map " + std::to_string(in) + " -> 1 through a sigmoid");
  }
}

void TrainConfig::validate() const {
  if (batch_size == 0 || epochs == 0 || hidden_size == 0 || gan_hidden == 0) {
    throw ContractError("TrainConfig: batch_size, epochs, hidden_size and gan_hidden must be positive");
  }
  if (!(ae_lr_final_factor > 0.0 && ae_lr_final_factor <= 1.0)) {
    throw ContractError("TrainConfig: ae_lr_final_factor must be in (0, 1]");
  }
  if (!(gan_learning_rate >= 0.0)) throw ContractError("TrainConfig: gan_learning_rate must be non-negative");
  if (!(instance_noise >= 0.0)) throw ContractError("TrainConfig: instance_noise must be non-negative");
  if (!(learning_rate > 0.0) || !(v_max > 0.0)) throw ContractError("TrainConfig: learning_rate and v_max must be positive");
  if (checkpoint_every > 0 && checkpoint_path.empty()) {
    throw ContractError("TrainConfig: checkpoint_every needs a checkpoint_path");
  }
}

nn::SequenceContext context_for(const AeGanModel& m, const data::Trip& trip) {
  nn::SequenceContext ctx;
  ctx.total_distance = std::accumulate(trip.speeds.begin(), trip.speeds.end(), 0.0);
  if (m.variant == Variant::crnn) ctx.condition = {m.norm.condition_of(ctx.total_distance)};
  return ctx;
}

std::vector<std::array<double, 3>> augment_3d(std::span<const double> speeds, double length_m) {
  std::vector<std::array<double, 3>> out;
  out.reserve(speeds.size());
  double travelled = 0.0;
  const double slack = 1e-9 * std::max(1.0, std::abs(length_m));
  for (std::size_t t = 0; t < speeds.size(); ++t) {
    travelled += speeds[t];
    const double d = length_m - travelled;
    if (d < -slack) {
      throw DataError("augment_3d: distance to go is " + data::format_double(d) + " m at sample " +
                      std::to_string(t) + "; L = " + data::format_double(length_m) + " is too short");
    }
    out.push_back({speeds[t], d, length_m});
  }
  return out;
}

Var ae_loss(const nn::EncoderDecoderVars& vars, const AeGanModel& m, const nn::SequenceBatch& batch,
            Var* latent_out, bool parked_tail) {
  if (!vars.head_b.tape) throw ContractError("ae_loss: unbound model");
  ad::Tape& tape = *vars.head_b.tape;
  Var latent = nn::encode(vars, batch, tape);
  if (latent_out) *latent_out = latent;
  const std::vector<Var> outs = nn::decode(vars, m.ed, latent, batch.steps, batch.total_distance, batch.condition);
  Tensor target = Tensor::matrix(batch.batch, batch.steps);
  Tensor mask = Tensor::matrix(batch.batch, batch.steps);
  double count = 0.0;
  for (std::size_t t = 0; t < batch.steps; ++t) {
    for (std::size_t r = 0; r < batch.batch; ++r) {
      target.at(r, t) = batch.targets[t].at(r, 0);
      mask.at(r, t) = parked_tail ? 1.0 : batch.output_masks[t].at(r, 0);
      count += mask.at(r, t);
    }
  }
  Var out = outs.size() == 1 ? outs.front() : ad::concat(outs);
  Var err = ad::square(out - tape.constant(std::move(target))) * tape.constant(std::move(mask));
  return ad::sum(err) * (m.ed.speed_scale * m.ed.speed_scale / count);
}

double ae_loss(const AeGanModel& m, std::span<const data::Trip> trips) {
  if (trips.empty()) throw ContractError("ae_loss: empty batch");
  double sse = 0.0;
  std::size_t count = 0;
  for (const data::Trip& trip : trips) {
    const nn::SequenceContext ctx = context_for(m, trip);
    const auto rec = nn::decode(m.ed, nn::encode(m.ed, trip.speeds, ctx), trip.speeds.size(), ctx);
    for (std::size_t t = 0; t < rec.size(); ++t) sse += (rec[t] - trip.speeds[t]) * (rec[t] - trip.speeds[t]);
    count += rec.size();
  }
  return sse / static_cast<double>(count);
}

GanLossVars gan_losses(const GanVars& vars, ad::Tape& tape, const Tensor& real, const Tensor& noise,
                       const Tensor& condition, GenLoss gen_loss, const Tensor& real_jitter,
                       const Tensor& fake_jitter) {
  const std::size_t latent = vars.generator.layers.back().first.value().cols();
  const std::size_t cond_dim = vars.generator.layers.front().first.value().rows() - latent;
  check_latent_rows(real, latent, "gan_losses: real latents");
  check_latent_rows(noise, latent, "gan_losses: noise");
  if (real.rows() != noise.rows()) throw ShapeError("gan_losses: real and noise batches differ in size");
  if (cond_dim > 0 && (condition.rank() != 2 || condition.rows() != real.rows() || condition.cols() != cond_dim)) {
    throw ShapeError("gan_losses: condition " + ad::shape_str(condition.shape()) + " does not match the batch");
  }
  auto jittered = [&](Var x, const Tensor& j) {
    if (j.rank() != 2) return x;
    if (j.shape() != real.shape()) throw ShapeError("gan_losses: jitter " + ad::shape_str(j.shape()) + " does not match the batch");
    return x + tape.constant(j);
  };
  Var fake = jittered(nn::mlp_forward(vars.generator, with_condition(tape.constant(noise), condition, cond_dim)),
                      fake_jitter);
  Var d_real = nn::mlp_forward(vars.discriminator,
                               with_condition(jittered(tape.constant(real), real_jitter), condition, cond_dim));
  Var d_fake = nn::mlp_forward(vars.discriminator, with_condition(fake, condition, cond_dim));
  GanLossVars out;
  out.disc = ad::mean(guarded_log(d_real)) * -0.5 + ad::mean(guarded_log(ad::sub(1.0, d_fake))) * -0.5;
  out.gen = gen_loss == GenLoss::nonsaturating ? ad::mean(guarded_log(d_fake)) * -0.5
                                               : ad::mean(guarded_log(ad::sub(1.0, d_fake))) * 0.5;
  return out;
}

std::pair<double, double> gan_losses(const AeGanModel& m, const Tensor& real, const Tensor& noise,
                                     const Tensor& condition, GenLoss gen_loss) {
  m.validate();
  ad::Tape tape;
  nn::ParamBinder frozen(tape, false);
  const GanVars vars{nn::bind(frozen, m.generator), nn::bind(frozen, m.discriminator)};
  const GanLossVars l = gan_losses(vars, tape, real, noise, row_condition(m, real.rows(), condition, "gan_losses"),
                                   gen_loss);
  return {l.disc.value().item(), l.gen.value().item()};
}

Tensor standardize_latents(const AeGanModel& m, const Tensor& latents) {
  check_latent_rows(latents, m.latent_dim(), "standardize_latents: latents");
  Tensor out = latents;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      out.at(r, c) = (out.at(r, c) - m.latent_mean[c]) / m.latent_scale[c];
    }
  }
  return out;
}

Tensor discriminate(const AeGanModel& m, const Tensor& latents, const Tensor& condition) {
  const Tensor x = standardize_latents(m, latents);
  ad::Tape tape;
  nn::ParamBinder frozen(tape, false);
  const nn::MlpVars d = nn::bind(frozen, m.discriminator);
  const Tensor c = row_condition(m, latents.rows(), condition, "discriminate");
  return nn::mlp_forward(d, with_condition(tape.constant(x), c, m.condition_dim())).value();
}

Tensor generate_latents(const AeGanModel& m, const Tensor& noise, const Tensor& condition) {
  check_latent_rows(noise, m.noise_dim(), "generate_latents: noise");
  ad::Tape tape;
  nn::ParamBinder frozen(tape, false);
  const nn::MlpVars g = nn::bind(frozen, m.generator);
  const Tensor c = row_condition(m, noise.rows(), condition, "generate_latents");
  Tensor out = nn::mlp_forward(g, with_condition(tape.constant(noise), c, m.condition_dim())).value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t k = 0; k < out.cols(); ++k) out.at(r, k) = m.latent_mean[k] + m.latent_scale[k] * out.at(r, k);
  }
  return out;
}

namespace {

void fit_normalization(AeGanModel& m, std::span<const data::Trip> trips) {
  std::vector<double> steps, meters;
  double speed_sum = 0.0;
  std::size_t points = 0;
  for (const data::Trip& t : trips) {
    steps.push_back(static_cast<double>(t.speeds.size()));
    meters.push_back(std::accumulate(t.speeds.begin(), t.speeds.end(), 0.0));
    speed_sum += meters.back();
    points += t.speeds.size();
  }
  Normalization& n = m.norm;
  n.length_min = *std::min_element(meters.begin(), meters.end());
  n.length_max = *std::max_element(meters.begin(), meters.end());
  least_squares(meters, steps, n.steps_intercept, n.steps_per_meter);
  least_squares(steps, meters, n.meters_intercept, n.meters_per_step);
  m.ed.distance_scale = n.length_max > 0.0 ? n.length_max : 1.0;
  // The decoder starts out emitting the corpus mean speed.
  m.ed.head_b[0] = speed_sum / static_cast<double>(points) / m.ed.speed_scale;
}

constexpr double kLatentMomentum = 0.99;
constexpr double kLatentScaleFloor = 1e-3;

void update_latent_stats(AeGanModel& m, const Tensor& latents, bool first) {
  const std::size_t b = latents.rows();
  for (std::size_t k = 0; k < latents.cols(); ++k) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < b; ++r) mean += latents.at(r, k);
    mean /= static_cast<double>(b);
    for (std::size_t r = 0; r < b; ++r) sq += (latents.at(r, k) - mean) * (latents.at(r, k) - mean);
    const double sd = std::max(kLatentScaleFloor, std::sqrt(sq / static_cast<double>(b)));
    if (first) {
      m.latent_mean[k] = mean;
      m.latent_scale[k] = sd;
    } else {
      m.latent_mean[k] = kLatentMomentum * m.latent_mean[k] + (1.0 - kLatentMomentum) * mean;
      m.latent_scale[k] = kLatentMomentum * m.latent_scale[k] + (1.0 - kLatentMomentum) * sd;
    }
  }
}

void checkpoint(const AeGanModel& m, const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.checkpoint_path.empty()) return;
  save(m, cfg.checkpoint_path, {{"checkpoint_epoch", epoch}});
}

[[noreturn]] void diverged(const AeGanModel& m, const TrainConfig& cfg, std::size_t epoch, const char* what) {
  checkpoint(m, cfg, epoch);
  std::string msg = std::string("training diverged at epoch ") + std::to_string(epoch) + ": " + what +
                    " is not finite";
  if (!cfg.checkpoint_path.empty()) msg += "; last finite parameters saved to " + cfg.checkpoint_path;
  throw DivergenceError(msg, cfg.checkpoint_path);
}

// Gradient-clip then Adam; false if the gradients are not finite.
bool apply_update(std::vector<Tensor*> params, std::vector<Tensor> grads, AdamState& state, double lr,
                  const TrainConfig& cfg) {
  if (!all_finite(grads)) return false;
  clip_global_norm(grads, cfg.clip_norm);
  adam_step(params, grads, state, AdamConfig{.lr = lr});
  return true;
}

}  // namespace

TrainResult train(AeGanModel model, std::span<const data::Trip> trips, const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  if (trips.empty()) throw ContractError("train: empty corpus");
  for (const data::Trip& t : trips) {
    if (t.speeds.empty()) throw ContractError("train: trip '" + t.id + "' is empty");
    data::validate_trip(t, model.ed.speed_scale);
  }
  const bool fresh = !model.trained;
  if (fresh) fit_normalization(model, trips);

  std::vector<nn::SequenceContext> contexts;
  contexts.reserve(trips.size());
  for (const data::Trip& t : trips) contexts.push_back(context_for(model, t));

  Rng rng(derive_seed(cfg.seed, 0xae));
  std::vector<std::size_t> order(trips.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bsz = std::min(cfg.batch_size, trips.size());
  const std::size_t latent_dim = model.latent_dim();

  AdamState ae_state, g_state, d_state;
  auto ae_lr = [&](std::size_t epoch) {
    if (cfg.epochs < 2) return cfg.learning_rate;
    const double progress = static_cast<double>(epoch - 1) / static_cast<double>(cfg.epochs - 1);
    return cfg.learning_rate * (1.0 - (1.0 - cfg.ae_lr_final_factor) * progress);
  };
  TrainResult result;
  result.history.reserve(cfg.epochs);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Mini-batch without replacement: a partial shuffle of the index pool.
    for (std::size_t i = 0; i < bsz && bsz < trips.size(); ++i) {
      std::swap(order[i], order[i + uniform_index(rng, trips.size() - i)]);
    }
    std::vector<nn::SequenceExample> examples;
    examples.reserve(bsz);
    for (std::size_t i = 0; i < bsz; ++i) examples.push_back({trips[order[i]].speeds, contexts[order[i]]});
    const nn::SequenceBatch batch = nn::make_batch(model.ed, examples);

    EpochLosses losses{0.0, kNaN, kNaN};
    Tensor real;
    {
      ad::Tape tape;
      nn::ParamBinder binder(tape, true);
      const auto vars = nn::bind(binder, model.ed);
      Var latent;
      Var loss = ae_loss(vars, model, batch, &latent, model.ed.distance_channels);
      losses.ae = loss.value().item();
      if (!std::isfinite(losses.ae)) diverged(model, cfg, epoch, "reconstruction loss");
      update_latent_stats(model, latent.value(), fresh && epoch == 1);
      real = standardize_latents(model, latent.value());
      tape.backward(loss * (1.0 / (model.ed.speed_scale * model.ed.speed_scale)));
      const auto params = model.ae_tensors();
      if (!apply_update(params, binder.gradients(params), ae_state, ae_lr(epoch), cfg)) {
        diverged(model, cfg, epoch, "reconstruction gradient");
      }
    }

    // One GAN step on this batch's latents with fresh noise and jitter.
    auto gan_step = [&](bool disc) {
      const Tensor noise = normal_matrix(bsz, model.noise_dim(), rng);
      Tensor rj, fj;
      if (cfg.instance_noise > 0.0) {
        rj = normal_matrix(bsz, latent_dim, rng);
        fj = normal_matrix(bsz, latent_dim, rng);
        for (double& v : rj.values()) v *= cfg.instance_noise;
        for (double& v : fj.values()) v *= cfg.instance_noise;
      }
      ad::Tape tape;
      nn::ParamBinder g_binder(tape, !disc), d_binder(tape, disc);
      const GanVars vars{nn::bind(g_binder, model.generator), nn::bind(d_binder, model.discriminator)};
      const GanLossVars l = gan_losses(vars, tape, real, noise, batch.condition, cfg.gen_loss, rj, fj);
      const Var loss = disc ? l.disc : l.gen;
      const double value = loss.value().item();
      if (!std::isfinite(value)) diverged(model, cfg, epoch, disc ? "discriminator loss" : "generator loss");
      tape.backward(loss);
      const auto params = disc ? model.discriminator_tensors() : model.generator_tensors();
      const auto grads = (disc ? d_binder : g_binder).gradients(params);
      if (!apply_update(params, grads, disc ? d_state : g_state, cfg.resolved_gan_learning_rate(), cfg)) {
        diverged(model, cfg, epoch, disc ? "discriminator gradient" : "generator gradient");
      }
      return value;
    };
    for (std::size_t k = 0; k < cfg.disc_steps; ++k) losses.disc = gan_step(true);
    for (std::size_t k = 0; k < cfg.gen_steps; ++k) losses.gen = gan_step(false);
    result.history.push_back(losses);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) checkpoint(model, cfg, epoch);
  }
  model.trained = true;
  result.model = std::move(model);
  return result;
}

TrainResult train(Variant variant, std::span<const data::Trip> trips, const TrainConfig& cfg) {
  cfg.validate();
  return train(AeGanModel::init(variant, cfg.hidden_size, cfg.resolved_layers(variant), derive_seed(cfg.seed, 0x1417),
                                cfg.gan_hidden, cfg.v_max),
               trips, cfg);
}

std::vector<double> generate(const AeGanModel& m, std::size_t n, std::uint64_t seed, std::optional<double> length_m) {
  m.validate();
  if (!m.trained) throw ContractError("generate: model is untrained");
  if (n < 1) throw ContractError("generate: length must be at least 1");
  if (m.variant == Variant::crnn && !length_m) {
    throw ContractError("generate: crnn needs a target length in meters");
  }
  if (length_m && !(*length_m > 0.0)) throw ContractError("generate: target length must be positive");
  Rng rng(seed);
  const Tensor z = normal_matrix(1, m.noise_dim(), rng);
  nn::SequenceContext ctx;
  Tensor c;
  if (m.variant != Variant::rnn1d) ctx.total_distance = length_m ? *length_m : m.norm.distance_for(n);
  if (m.variant == Variant::crnn) {
    ctx.condition = {m.norm.condition_of(*length_m)};
    c = Tensor::matrix(1, 1, ctx.condition);
  }
  auto speeds = nn::decode(m.ed, generate_latents(m, z, c), n, ctx);
  for (double& v : speeds) v = std::min(v, m.ed.speed_scale);
  return speeds;
}

void save(const AeGanModel& m, const std::string& path, const nlohmann::json& extra) {
  m.validate();
  AeGanModel copy = m;
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  const auto tensors = named_tensors(copy);
  for (const auto& [name, t] : tensors) {
    manifest.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->size() * sizeof(double);
  }
  nlohmann::json header = {{"format", kFormat},
                           {"variant", variant_name(m.variant)},
                           {"hidden", m.ed.hidden_size()},
                           {"layers", m.ed.layers()},
                           {"gan_hidden", m.generator.layers.front().w.rows()},
                           {"speed_scale", m.ed.speed_scale},
                           {"distance_scale", m.ed.distance_scale},
                           {"normalization", normalization_json(m.norm)},
                           {"trained", m.trained},
                           {"tensors", manifest},
                           {"data_bytes", offset}};
  if (!extra.is_null()) header["extra"] = extra;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t version = kFileVersion;
  const std::uint64_t header_len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t->values().data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

bool is_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[sizeof kMagic] = {};
  return in.read(magic, sizeof magic) && std::memcmp(magic, kMagic, sizeof kMagic) == 0;
}

AeGanModel load(const std::string& path, nlohmann::json* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  char magic[sizeof kMagic] = {};
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError("'" + path + "' is not an AE/GAN model file");
  }
  if (!in.read(reinterpret_cast<char*>(&version), sizeof version) ||
      !in.read(reinterpret_cast<char*>(&header_len), sizeof header_len)) {
    throw DataError("'" + path + "': truncated header");
  }
  if (version != kFileVersion) throw DataError("'" + path + "': unsupported version " + std::to_string(version));
  if (header_len > (std::uint64_t{1} << 30)) throw DataError("'" + path + "': implausible header size");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw DataError("'" + path + "': truncated header");

  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("format").get<std::string>() != kFormat) throw DataError("'" + path + "': wrong format tag");
    const auto variant = variant_from_name(header.at("variant").get<std::string>());
    if (!variant) throw DataError("'" + path + "': unknown variant");
    AeGanModel m = AeGanModel::init(*variant, header.at("hidden").get<std::size_t>(),
                                    header.at("layers").get<std::size_t>(), 0,
                                    header.at("gan_hidden").get<std::size_t>(),
                                    header.at("speed_scale").get<double>());
    m.ed.distance_scale = header.at("distance_scale").get<double>();
    const auto& n = header.at("normalization");
    m.norm.length_min = n.at("length_min").get<double>();
    m.norm.length_max = n.at("length_max").get<double>();
    m.norm.steps_intercept = n.at("steps_intercept").get<double>();
    m.norm.steps_per_meter = n.at("steps_per_meter").get<double>();
    m.norm.meters_intercept = n.at("meters_intercept").get<double>();
    m.norm.meters_per_step = n.at("meters_per_step").get<double>();
    m.trained = header.at("trained").get<bool>();

    const auto tensors = named_tensors(m);
    const auto& manifest = header.at("tensors");
    if (manifest.size() != tensors.size()) throw DataError("'" + path + "': tensor count does not match the architecture");
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      const auto& [name, t] = tensors[k];
      if (manifest[k].at("name").get<std::string>() != name ||
          manifest[k].at("shape").get<ad::Shape>() != t->shape()) {
        throw DataError("'" + path + "': tensor " + std::to_string(k) + " should be " + name + " " +
                        ad::shape_str(t->shape()));
      }
      if (!in.read(reinterpret_cast<char*>(t->values().data()), static_cast<std::streamsize>(t->size() * sizeof(double)))) {
        throw DataError("'" + path + "': truncated tensor data in " + name);
      }
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DataError("'" + path + "': trailing bytes");
    if (extra) *extra = header.value("extra", nlohmann::json());
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "': malformed header: " + e.what());
  }
}

}  // namespace trajgen::aegan

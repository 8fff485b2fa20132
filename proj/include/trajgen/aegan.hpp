#pragma once

// LSTM autoencoder with a GAN in latent space.
//
// The encoder maps a trip to a fixed-size latent phi; the decoder runs the
// latent forward into speeds. A generator G maps noise z (same size as phi,
// plus the condition c for C-RNN) to fake latents and a discriminator D
// scores latents as real or generated. New trips are decode(G(z ⊕ c)).
//
//   rnn1d  speeds only
//   rnn3d  speeds with (d_t, L) channels, d_t = L - sum_{i<=t} s_i
//   crnn   as rnn3d, conditioned on the min-max normalized trip length L

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "trajgen/data.hpp"
#include "trajgen/seqnets.hpp"

namespace trajgen::aegan {

using ad::Tensor;
using ad::Var;

enum class Variant { rnn1d, rnn3d, crnn };
const char* variant_name(Variant v);
std::optional<Variant> variant_from_name(const std::string& name);

enum class GenLoss { nonsaturating, minimax };
const char* gen_loss_name(GenLoss g);
std::optional<GenLoss> gen_loss_from_name(const std::string& name);

inline constexpr double kLogEpsilon = 1e-7;
// Default generation length for a distance target, relative to the fitted
// duration. Distance-aware decoders are trained to stay parked once the
// remaining distance runs out, so the spare steps come out as zeros.
inline constexpr double kStepHeadroom = 1.4;

// Corpus-derived constants fixed at training time.
struct Normalization {
  double length_min = 0.0;  // shortest trip distance, m
  double length_max = 1.0;  // longest trip distance, m
  // Least-squares fits between trip duration n (samples) and distance L (m).
  double steps_intercept = 0.0, steps_per_meter = 0.0;    // n ~ a + b L
  double meters_intercept = 0.0, meters_per_step = 0.0;   // L ~ a + b n

  double condition_of(double length_m) const;
  double steps_for(double length_m) const;
  std::size_t generation_steps(double length_m) const;  // kStepHeadroom * steps_for
  double distance_for(std::size_t steps) const;

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct AeGanModel {
  Variant variant = Variant::rnn1d;
  nn::EncoderDecoder ed;
  nn::MlpParams generator;      // (z ⊕ c) -> latent
  nn::MlpParams discriminator;  // (phi ⊕ c) -> probability
  Normalization norm;
  // G and D work on standardized latents (phi - latent_mean) / latent_scale.
  // Both are running averages over the training batches.
  Tensor latent_mean;
  Tensor latent_scale;
  bool trained = false;

  // gan_hidden units in each of G's and D's two tanh hidden layers.
  static AeGanModel init(Variant variant, std::size_t hidden, std::size_t layers, std::uint64_t seed,
                         std::size_t gan_hidden = 64, double v_max = data::kDefaultVMax);

  std::size_t latent_dim() const { return ed.latent_dim(); }
  std::size_t noise_dim() const { return ed.latent_dim(); }
  std::size_t condition_dim() const { return ed.condition_dim; }
  void validate() const;
  std::vector<Tensor*> ae_tensors() { return ed.tensors(); }
  std::vector<Tensor*> generator_tensors() { return generator.tensors(); }
  std::vector<Tensor*> discriminator_tensors() { return discriminator.tensors(); }

  friend bool operator==(const AeGanModel&, const AeGanModel&) = default;
};

struct TrainConfig {
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  double gan_learning_rate = 0.0;  // 0: same as learning_rate
  // The AE learning rate falls linearly to learning_rate * ae_lr_final_factor
  // by the last epoch, letting the latents settle for G to follow.
  double ae_lr_final_factor = 1.0;
  std::size_t epochs = 25000;  // one optimizer iteration on one mini-batch each
  std::size_t hidden_size = 24;
  std::size_t layers = 0;      // 0: 3 for rnn1d, 2 otherwise
  std::size_t gan_hidden = 64;
  std::uint64_t seed = 0;
  std::size_t disc_steps = 1;  // per epoch
  std::size_t gen_steps = 1;   // per epoch
  GenLoss gen_loss = GenLoss::nonsaturating;
  // Std of the Gaussian noise added to both real and generated latents on the
  // way into D. A finite corpus gives finitely many real latents, which D can
  // otherwise memorize.
  double instance_noise = 0.1;
  double clip_norm = 5.0;
  std::size_t checkpoint_every = 0;  // 0: only on divergence
  std::string checkpoint_path;       // empty: no checkpoint files
  double v_max = data::kDefaultVMax;

  double resolved_gan_learning_rate() const { return gan_learning_rate > 0.0 ? gan_learning_rate : learning_rate; }
  std::size_t resolved_layers(Variant v) const { return layers ? layers : (v == Variant::rnn1d ? 3 : 2); }
  void validate() const;
};

struct EpochLosses {
  double ae = 0.0;
  double disc = 0.0;  // NaN when no discriminator step ran
  double gen = 0.0;   // NaN when no generator step ran
};

struct TrainResult {
  AeGanModel model;
  std::vector<EpochLosses> history;
};

// Per-trip features in the model's input space.
nn::SequenceContext context_for(const AeGanModel& m, const data::Trip& trip);

// d_t = L - sum_{i<=t} s_i alongside s_t and L. Throws DataError if some d_t
// falls below -1e-9 L.
std::vector<std::array<double, 3>> augment_3d(std::span<const double> speeds, double length_m);

// Mean squared reconstruction error (m/s)^2 over every sample of every trip.
// With parked_tail the padded steps past each trip's end also count, with
// target 0: the vehicle stays parked once the remaining distance is used up.
Var ae_loss(const nn::EncoderDecoderVars& vars, const AeGanModel& m, const nn::SequenceBatch& batch,
            Var* latent_out = nullptr, bool parked_tail = false);
double ae_loss(const AeGanModel& m, std::span<const data::Trip> trips);

struct GanVars {
  nn::MlpVars generator;
  nn::MlpVars discriminator;
};

struct GanLossVars {
  Var disc;
  Var gen;
};

// real and noise are B x latent_dim, condition B x condition_dim (ignored when
// the model is unconditional). Jitter matrices, when B x latent_dim, are added
// to the real and generated latents before D sees them.
GanLossVars gan_losses(const GanVars& vars, ad::Tape& tape, const Tensor& real, const Tensor& noise,
                       const Tensor& condition, GenLoss gen_loss = GenLoss::nonsaturating,
                       const Tensor& real_jitter = {}, const Tensor& fake_jitter = {});
std::pair<double, double> gan_losses(const AeGanModel& m, const Tensor& real, const Tensor& noise,
                                     const Tensor& condition = {},
                                     GenLoss gen_loss = GenLoss::nonsaturating);

Tensor standardize_latents(const AeGanModel& m, const Tensor& latents);
// D's probability for each row of raw latents (B x latent_dim).
Tensor discriminate(const AeGanModel& m, const Tensor& latents, const Tensor& condition = {});
// Raw latents latent_mean + latent_scale * G(z ⊕ c).
Tensor generate_latents(const AeGanModel& m, const Tensor& noise, const Tensor& condition = {});

// Throws DivergenceError (after writing a checkpoint of the last finite
// parameters when cfg.checkpoint_path is set) if any loss turns non-finite.
TrainResult train(AeGanModel model, std::span<const data::Trip> trips, const TrainConfig& cfg);
// Convenience: builds the model from cfg then trains it.
TrainResult train(Variant variant, std::span<const data::Trip> trips, const TrainConfig& cfg);

// n speeds decoded from G(z ⊕ c), z ~ N(0, I) drawn from seed, clamped to
// [0, v_max]. crnn needs length_m; rnn3d uses it when given and otherwise L
// from the n -> L fit.
std::vector<double> generate(const AeGanModel& m, std::size_t n, std::uint64_t seed,
                             std::optional<double> length_m = std::nullopt);

void save(const AeGanModel& m, const std::string& path, const nlohmann::json& extra = {});
AeGanModel load(const std::string& path, nlohmann::json* extra = nullptr);
// Cheap check used by the CLI to dispatch on artifact type.
bool is_model_file(const std::string& path);

}  // namespace trajgen::aegan

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "support/gradcheck.hpp"
#include "trajgen/aegan.hpp"
#include "trajgen/error.hpp"
#include "trajgen/random.hpp"

using namespace trajgen;
using namespace trajgen::aegan;
using ad::Tape;
using nn::ParamBinder;

namespace {

const double kLog2 = std::log(2.0);

std::vector<data::Trip> small_corpus(std::size_t trips, std::size_t lo, std::size_t hi, std::uint64_t seed) {
  data::SynthConfig sc;
  sc.trips = trips;
  sc.min_length = lo;
  sc.max_length = hi;
  sc.seed = seed;
  return data::synth_corpus(sc).trips();
}

std::vector<data::Trip> random_trips(std::size_t count, std::size_t max_len, Rng& rng) {
  std::vector<data::Trip> out;
  for (std::size_t k = 0; k < count; ++k) {
    data::Trip t;
    t.id = "r" + std::to_string(k);
    t.speeds.resize(2 + uniform_index(rng, max_len - 1));
    for (double& v : t.speeds) v = uniform(rng, 0.0, 25.0);
    out.push_back(std::move(t));
  }
  return out;
}

nn::SequenceBatch batch_for(const AeGanModel& m, const std::vector<data::Trip>& trips,
                            std::vector<nn::SequenceContext>& contexts) {
  contexts.clear();
  for (const auto& t : trips) contexts.push_back(context_for(m, t));
  std::vector<nn::SequenceExample> ex;
  for (std::size_t i = 0; i < trips.size(); ++i) ex.push_back({trips[i].speeds, contexts[i]});
  return nn::make_batch(m.ed, ex);
}

Tensor normal(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.values()) v = standard_normal(rng);
  return t;
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 8;
  cfg.hidden_size = 4;
  cfg.layers = 1;
  cfg.gan_hidden = 8;
  cfg.learning_rate = 1e-2;
  cfg.seed = 5;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("trajgen_aegan_" + name)).string();
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradients

TEST(AeGanGradients, ReconstructionLossAllVariants) {
  Rng rng(71);
  for (int trial = 0; trial < 21; ++trial) {
    const Variant v = static_cast<Variant>(trial % 3);
    AeGanModel m = AeGanModel::init(v, 3, 1 + trial % 2, derive_seed(71, trial), 4);
    m.norm.length_min = 20.0;
    m.norm.length_max = 200.0;
    m.ed.distance_scale = 200.0;
    // Keep the relu head inside its linear piece, near the data's scale.
    m.ed.head_b[0] = 0.35;
    for (double& w : m.ed.head_w.values()) w *= 0.2;
    const auto trips = random_trips(2, 6, rng);
    std::vector<nn::SequenceContext> ctx;
    const nn::SequenceBatch batch = batch_for(m, trips, ctx);
    const bool parked = trial % 4 == 1;
    // Normalized units, as the optimizer sees the loss.
    const double unit = 1.0 / (m.ed.speed_scale * m.ed.speed_scale);
    auto params = m.ae_tensors();
    Tape tape;
    ParamBinder binder(tape, true);
    tape.backward(ae_loss(nn::bind(binder, m.ed), m, batch, nullptr, parked) * unit);
    const auto analytic = binder.gradients(params);
    const auto numeric = oracle::finite_difference(
        [&] {
          Tape t;
          ParamBinder b(t, false);
          return ae_loss(nn::bind(b, m.ed), m, batch, nullptr, parked).value().item() * unit;
        },
        params);
    EXPECT_LT(oracle::max_relative_error(analytic, numeric), oracle::kGradTolerance) << trial;
  }
}

TEST(AeGanGradients, GanLossesForBothPlayers) {
  Rng rng(72);
  for (int trial = 0; trial < 20; ++trial) {
    const Variant v = trial % 2 ? Variant::crnn : Variant::rnn1d;
    AeGanModel m = AeGanModel::init(v, 2, 1, derive_seed(72, trial), 5);
    const std::size_t B = 3, D = m.latent_dim();
    const Tensor real = normal(B, D, rng), noise = normal(B, D, rng);
    const Tensor rj = trial % 3 ? normal(B, D, rng) : Tensor{}, fj = trial % 3 ? normal(B, D, rng) : Tensor{};
    Tensor cond;
    if (m.condition_dim()) cond = nn::uniform_tensor({B, 1}, 1.0, rng);
    const GenLoss gl = trial % 4 < 2 ? GenLoss::nonsaturating : GenLoss::minimax;
    auto params = m.generator_tensors();
    for (Tensor* t : m.discriminator_tensors()) params.push_back(t);
    for (bool disc : {true, false}) {
      auto loss = [&](Tape& tape, ParamBinder& b) {
        const GanVars vars{nn::bind(b, m.generator), nn::bind(b, m.discriminator)};
        const GanLossVars l = gan_losses(vars, tape, real, noise, cond, gl, rj, fj);
        return disc ? l.disc : l.gen;
      };
      Tape tape;
      ParamBinder binder(tape, true);
      tape.backward(loss(tape, binder));
      const auto analytic = binder.gradients(params);
      const auto numeric = oracle::finite_difference(
          [&] {
            Tape t;
            ParamBinder b(t, false);
            return loss(t, b).value().item();
          },
          params);
      EXPECT_LT(oracle::max_relative_error(analytic, numeric), oracle::kGradTolerance) << trial << disc;
    }
  }
}

// ---------------------------------------------------------------------------
// Losses

TEST(AeLoss, BatchedGraphMatchesSingleTripPath) {
  Rng rng(73);
  for (Variant v : {Variant::rnn1d, Variant::rnn3d, Variant::crnn}) {
    AeGanModel m = AeGanModel::init(v, 5, 2, 73, 6);
    m.norm.length_min = 10.0;
    m.norm.length_max = 300.0;
    m.ed.distance_scale = 300.0;
    const auto trips = random_trips(4, 9, rng);
    std::vector<nn::SequenceContext> ctx;
    const nn::SequenceBatch batch = batch_for(m, trips, ctx);
    Tape tape;
    ParamBinder b(tape, false);
    const double graph = ae_loss(nn::bind(b, m.ed), m, batch).value().item();
    EXPECT_NEAR(graph, ae_loss(m, trips), 1e-10 * std::max(1.0, graph)) << variant_name(v);
  }
}

TEST(AeLoss, ParkedTailCountsPaddingAsZeroTargets) {
  AeGanModel m = AeGanModel::init(Variant::rnn3d, 3, 1, 74, 4);
  m.ed.distance_scale = 100.0;
  std::vector<data::Trip> trips(2);
  trips[0].speeds = {0.0, 4.0, 6.0, 0.0};
  trips[1].speeds = {0.0, 3.0};
  std::vector<nn::SequenceContext> ctx;
  const nn::SequenceBatch batch = batch_for(m, trips, ctx);
  Tape tape;
  ParamBinder b(tape, false);
  const auto vars = nn::bind(b, m.ed);
  Var latent;
  const double masked = ae_loss(vars, m, batch, &latent).value().item();
  const double parked = ae_loss(vars, m, batch, nullptr, true).value().item();
  const auto outs = nn::decode(vars, m.ed, latent, batch.steps, batch.total_distance, batch.condition);
  const double tail = outs[2].value().at(1, 0) * m.ed.speed_scale;
  const double tail2 = outs[3].value().at(1, 0) * m.ed.speed_scale;
  // Six real samples, two padded ones with target zero.
  EXPECT_NEAR(parked, (masked * 6.0 + tail * tail + tail2 * tail2) / 8.0, 1e-12);
}

TEST(GanLosses, UndecidedDiscriminatorGivesLogTwo) {
  Rng rng(75);
  AeGanModel m = AeGanModel::init(Variant::rnn1d, 3, 1, 75, 6);
  auto& last = m.discriminator.layers.back();
  std::fill(last.w.values().begin(), last.w.values().end(), 0.0);
  std::fill(last.b.values().begin(), last.b.values().end(), 0.0);
  const Tensor real = normal(7, m.latent_dim(), rng), noise = normal(7, m.latent_dim(), rng);
  const auto [d, g] = gan_losses(m, real, noise);
  EXPECT_NEAR(d, kLog2, 1e-15);
  EXPECT_NEAR(g, 0.5 * kLog2, 1e-15);
  EXPECT_NEAR(gan_losses(m, real, noise, {}, GenLoss::minimax).second, -0.5 * kLog2, 1e-15);
}

TEST(GanLosses, SaturatedDiscriminatorStaysFinite) {
  Rng rng(76);
  AeGanModel m = AeGanModel::init(Variant::rnn1d, 3, 1, 76, 6);
  auto& last = m.discriminator.layers.back();
  std::fill(last.w.values().begin(), last.w.values().end(), 0.0);
  last.b[0] = 800.0;  // D = 1 on every input
  const Tensor real = normal(4, m.latent_dim(), rng), noise = normal(4, m.latent_dim(), rng);
  const auto [d, g] = gan_losses(m, real, noise);
  EXPECT_NEAR(d, -0.5 * (std::log1p(-kLogEpsilon) + std::log(kLogEpsilon)), 1e-12);
  EXPECT_NEAR(g, -0.5 * std::log1p(-kLogEpsilon), 1e-15);
  EXPECT_LT(g, 1e-7);
}

TEST(GanLosses, MatchesStraightLineCrossEntropy) {
  Rng rng(77);
  for (Variant v : {Variant::rnn1d, Variant::crnn}) {
    const AeGanModel m = AeGanModel::init(v, 3, 1, 77, 6);
    const std::size_t B = 5;
    const Tensor real = normal(B, m.latent_dim(), rng), noise = normal(B, m.latent_dim(), rng);
    Tensor cond;
    if (m.condition_dim()) cond = nn::uniform_tensor({B, 1}, 1.0, rng);
    // Fresh model: latent mean 0, scale 1, so discriminate() sees real as is.
    const Tensor dr = discriminate(m, real, cond);
    const Tensor df = discriminate(m, generate_latents(m, noise, cond), cond);
    auto lg = [](double p) { return std::log(kLogEpsilon + (1.0 - 2.0 * kLogEpsilon) * p); };
    double d = 0.0, ns = 0.0, mm = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
      d += -0.5 * (lg(dr[r]) + lg(1.0 - df[r])) / B;
      ns += -0.5 * lg(df[r]) / B;
      mm += 0.5 * lg(1.0 - df[r]) / B;
    }
    const auto got = gan_losses(m, real, noise, cond);
    EXPECT_NEAR(got.first, d, 1e-12);
    EXPECT_NEAR(got.second, ns, 1e-12);
    EXPECT_NEAR(gan_losses(m, real, noise, cond, GenLoss::minimax).second, mm, 1e-12);
  }
}

TEST(GanLosses, ShapeChecks) {
  Rng rng(78);
  const AeGanModel m = AeGanModel::init(Variant::crnn, 2, 1, 78, 4);
  const Tensor real = normal(3, m.latent_dim(), rng);
  EXPECT_THROW(gan_losses(m, real, normal(2, m.latent_dim(), rng), nn::uniform_tensor({3, 1}, 1.0, rng)), ShapeError);
  EXPECT_THROW(gan_losses(m, real, normal(3, m.latent_dim(), rng)), ShapeError);
  EXPECT_THROW(gan_losses(m, normal(3, 5, rng), normal(3, 5, rng), nn::uniform_tensor({3, 1}, 1.0, rng)), ShapeError);
}

// ---------------------------------------------------------------------------
// Distance channels

TEST(Augment3d, WorkedExample) {
  const std::vector<double> s{10.0, 10.0, 10.0};
  const auto a = augment_3d(s, 30.0);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0], (std::array<double, 3>{10.0, 20.0, 30.0}));
  EXPECT_EQ(a[1], (std::array<double, 3>{10.0, 10.0, 30.0}));
  EXPECT_EQ(a[2], (std::array<double, 3>{10.0, 0.0, 30.0}));
}

TEST(Augment3d, ParkedTripKeepsFullDistance) {
  const std::vector<double> s(5, 0.0);
  for (const auto& row : augment_3d(s, 120.0)) EXPECT_EQ(row[1], 120.0);
}

TEST(Augment3d, OwnDistanceEndsExactlyAtZero) {
  Rng rng(79);
  for (int k = 0; k < 50; ++k) {
    const auto trips = random_trips(1, 300, rng);
    const auto& s = trips[0].speeds;
    const double L = std::accumulate(s.begin(), s.end(), 0.0);
    const auto a = augment_3d(s, L);
    EXPECT_EQ(a.back()[1], 0.0);
    for (std::size_t t = 1; t < a.size(); ++t) EXPECT_LE(a[t][1], a[t - 1][1]);
  }
}

TEST(Augment3d, ShortLengthIsDataError) {
  const std::vector<double> s{5.0, 5.0};
  EXPECT_THROW(augment_3d(s, 9.0), DataError);
}

// ---------------------------------------------------------------------------
// Model wiring

TEST(AeGanModel, LatentDimensionsAgreeAcrossParts) {
  Rng rng(80);
  for (Variant v : {Variant::rnn1d, Variant::rnn3d, Variant::crnn}) {
    for (std::size_t layers : {1u, 3u}) {
      AeGanModel m = AeGanModel::init(v, 6, layers, 80, 8);
      m.ed.distance_scale = 100.0;
      const auto trips = random_trips(1, 20, rng);
      const auto z = nn::encode(m.ed, trips[0].speeds, context_for(m, trips[0]));
      EXPECT_EQ(z.size(), m.latent_dim());
      EXPECT_EQ(m.noise_dim(), m.latent_dim());
      Tensor cond;
      if (m.condition_dim()) cond = Tensor::matrix(1, 1, 0.5);
      EXPECT_EQ(generate_latents(m, normal(1, m.noise_dim(), rng), cond).cols(), z.size());
    }
  }
}

TEST(AeGanModel, ConditionReachesGeneratorAndDiscriminator) {
  Rng rng(81);
  const AeGanModel m = AeGanModel::init(Variant::crnn, 4, 1, 81, 8);
  const Tensor z = normal(1, m.noise_dim(), rng);
  const Tensor a = generate_latents(m, z, Tensor::matrix(1, 1, 0.1));
  const Tensor b = generate_latents(m, z, Tensor::matrix(1, 1, 0.9));
  EXPECT_NE(a.values()[0], b.values()[0]);
  EXPECT_NE(discriminate(m, a, Tensor::matrix(1, 1, 0.1))[0], discriminate(m, a, Tensor::matrix(1, 1, 0.9))[0]);
  EXPECT_THROW(generate_latents(m, z), ShapeError);
}

TEST(AeGanModel, VariantNamesRoundTrip) {
  for (Variant v : {Variant::rnn1d, Variant::rnn3d, Variant::crnn}) EXPECT_EQ(variant_from_name(variant_name(v)), v);
  EXPECT_FALSE(variant_from_name("rnn2d"));
  for (GenLoss g : {GenLoss::nonsaturating, GenLoss::minimax}) EXPECT_EQ(gen_loss_from_name(gen_loss_name(g)), g);
}

TEST(Normalization, LinearFitsAndHeadroom) {
  // n = 10 + L / 20 exactly, so both fits are exact.
  std::vector<data::Trip> trips;
  for (std::size_t n : {20u, 30u, 45u, 60u}) {
    data::Trip t;
    t.id = std::to_string(n);
    t.speeds.assign(n, 0.0);
    const double L = 20.0 * (static_cast<double>(n) - 10.0);
    for (std::size_t i = 1; i + 1 < n; ++i) t.speeds[i] = L / static_cast<double>(n - 2);
    trips.push_back(t);
  }
  TrainConfig cfg = quick_config(1);
  const auto r = train(Variant::crnn, trips, cfg);
  const Normalization& nm = r.model.norm;
  EXPECT_NEAR(nm.steps_for(400.0), 30.0, 1e-9);
  EXPECT_NEAR(nm.distance_for(45), 700.0, 1e-9);
  EXPECT_EQ(nm.generation_steps(400.0), 42u);
  EXPECT_NEAR(nm.length_min, 200.0, 1e-9);
  EXPECT_NEAR(nm.length_max, 1000.0, 1e-9);
  EXPECT_NEAR(nm.condition_of(600.0), 0.5, 1e-12);
}

// ---------------------------------------------------------------------------
// Training and generation

TEST(Training, ReconstructionLossFalls) {
  const auto trips = small_corpus(24, 20, 28, 3);
  TrainConfig cfg = quick_config(150);
  const auto r = train(Variant::rnn1d, trips, cfg);
  ASSERT_EQ(r.history.size(), 150u);
  double early = 0.0, late = 0.0;
  for (std::size_t e = 0; e < 15; ++e) early += r.history[e].ae / 15.0;
  for (std::size_t e = 135; e < 150; ++e) late += r.history[e].ae / 15.0;
  EXPECT_LT(late, 0.6 * early);
  for (const auto& h : r.history) {
    EXPECT_TRUE(std::isfinite(h.disc));
    EXPECT_TRUE(std::isfinite(h.gen));
  }
}

TEST(Training, NoAdversarialStepsLeaveGeneratorAndDiscriminatorUntouched) {
  const auto trips = small_corpus(10, 20, 24, 4);
  TrainConfig cfg = quick_config(20);
  cfg.disc_steps = 0;
  cfg.gen_steps = 0;
  const AeGanModel start = AeGanModel::init(Variant::rnn3d, cfg.hidden_size, 1, 9, cfg.gan_hidden);
  const auto r = train(start, trips, cfg);
  EXPECT_EQ(r.model.generator, start.generator);
  EXPECT_EQ(r.model.discriminator, start.discriminator);
  EXPECT_NE(r.model.ed, start.ed);
  EXPECT_TRUE(std::isnan(r.history.back().disc));
  EXPECT_TRUE(std::isnan(r.history.back().gen));
}

TEST(Training, DeterministicUnderSeed) {
  const auto trips = small_corpus(12, 20, 26, 5);
  TrainConfig cfg = quick_config(15);
  const auto a = train(Variant::crnn, trips, cfg);
  const auto b = train(Variant::crnn, trips, cfg);
  EXPECT_EQ(a.model, b.model);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(a.history[e].ae, b.history[e].ae);
    EXPECT_EQ(a.history[e].disc, b.history[e].disc);
  }
  cfg.seed = 6;
  EXPECT_NE(train(Variant::crnn, trips, cfg).model, a.model);
}

TEST(Training, DivergenceThrowsAndCheckpoints) {
  const auto trips = small_corpus(6, 20, 24, 6);
  TrainConfig cfg = quick_config(10);
  cfg.learning_rate = 1e300;
  cfg.checkpoint_path = temp_path("diverge.bin");
  std::filesystem::remove(cfg.checkpoint_path);
  try {
    train(Variant::rnn1d, trips, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.checkpoint(), cfg.checkpoint_path);
    EXPECT_NE(std::string(e.what()).find("diverged at epoch"), std::string::npos);
  }
  nlohmann::json extra;
  EXPECT_NO_THROW(load(cfg.checkpoint_path, &extra));
  EXPECT_TRUE(extra.contains("checkpoint_epoch"));
  std::filesystem::remove(cfg.checkpoint_path);
}

TEST(Training, ConfigValidation) {
  TrainConfig cfg = quick_config(1);
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = quick_config(1);
  cfg.checkpoint_every = 5;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = quick_config(1);
  cfg.ae_lr_final_factor = 0.0;
  EXPECT_THROW(cfg.validate(), ContractError);
  EXPECT_EQ(TrainConfig{}.resolved_layers(Variant::rnn1d), 3u);
  EXPECT_EQ(TrainConfig{}.resolved_layers(Variant::crnn), 2u);
  std::vector<data::Trip> none;
  EXPECT_THROW(train(Variant::rnn1d, none, quick_config(1)), ContractError);
}

TEST(Generation, UntrainedModelIsContractError) {
  const AeGanModel m = AeGanModel::init(Variant::rnn1d, 3, 1, 82, 4);
  EXPECT_THROW(generate(m, 10, 1), ContractError);
}

TEST(Generation, NonNegativeExactLengthAndSeeded) {
  const auto trips = small_corpus(10, 20, 30, 7);
  for (Variant v : {Variant::rnn1d, Variant::rnn3d, Variant::crnn}) {
    const auto r = train(v, trips, quick_config(10));
    const std::optional<double> L = v == Variant::crnn ? std::optional<double>(150.0) : std::nullopt;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto s = generate(r.model, 17, seed, L);
      ASSERT_EQ(s.size(), 17u);
      for (double x : s) EXPECT_GE(x, 0.0);
      EXPECT_EQ(s, generate(r.model, 17, seed, L));
    }
    if (v == Variant::crnn) {
      EXPECT_THROW(generate(r.model, 17, 0), ContractError);
      EXPECT_THROW(generate(r.model, 17, 0, -5.0), ContractError);
    }
    EXPECT_THROW(generate(r.model, 0, 0, L), ContractError);
  }
}

// ---------------------------------------------------------------------------
// Persistence

TEST(Persistence, SaveLoadRoundTrip) {
  const auto trips = small_corpus(8, 20, 26, 8);
  const auto r = train(Variant::crnn, trips, quick_config(5));
  const std::string path = temp_path("roundtrip.bin");
  save(r.model, path, {{"note", "x"}});
  EXPECT_TRUE(is_model_file(path));
  nlohmann::json extra;
  const AeGanModel back = load(path, &extra);
  EXPECT_EQ(back, r.model);
  EXPECT_EQ(extra.at("note"), "x");
  EXPECT_EQ(generate(back, 12, 3, 200.0), generate(r.model, 12, 3, 200.0));
  std::filesystem::remove(path);
}

TEST(Persistence, SavedBytesAreDeterministic) {
  const auto trips = small_corpus(8, 20, 26, 9);
  const auto r = train(Variant::rnn1d, trips, quick_config(5));
  const std::string a = temp_path("bytes_a.bin"), b = temp_path("bytes_b.bin");
  save(r.model, a);
  save(train(Variant::rnn1d, trips, quick_config(5)).model, b);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(a), slurp(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Persistence, CorruptFilesAreDataErrors) {
  const auto trips = small_corpus(6, 20, 24, 10);
  const auto r = train(Variant::rnn1d, trips, quick_config(2));
  const std::string path = temp_path("corrupt.bin");
  save(r.model, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 8);
  EXPECT_THROW(load(path), DataError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a model";
  }
  EXPECT_FALSE(is_model_file(path));
  EXPECT_THROW(load(path), DataError);
  EXPECT_THROW(load(temp_path("missing.bin")), DataError);
  std::filesystem::remove(path);
}

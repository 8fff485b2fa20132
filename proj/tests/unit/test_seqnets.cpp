#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "support/gradcheck.hpp"
#include "trajgen/error.hpp"
#include "trajgen/random.hpp"
#include "trajgen/seqnets.hpp"

using namespace trajgen;
using namespace trajgen::nn;
using ad::Tape;

namespace {

constexpr double kTanh02 = 0.19737532022490401;
constexpr double kHalfTanhHalf = 0.23105857863000488;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight-line LSTM step for one sample, written from the gate equations.
std::pair<std::vector<double>, std::vector<double>> reference_lstm(
    const LstmCellParams& p, const std::vector<double>& h, const std::vector<double>& u,
    const std::vector<double>& s) {
  const std::size_t H = p.hidden_size();
  const std::size_t D = p.input_dim();
  auto affine = [&](const Tensor& ws, const Tensor& wh, const Tensor& b, std::size_t j) {
    double acc = b[j];
    for (std::size_t k = 0; k < D; ++k) acc += ws.at(j, k) * s[k];
    for (std::size_t k = 0; k < H; ++k) acc += wh.at(j, k) * h[k];
    return acc;
  };
  std::vector<double> h_out(H), u_out(H);
  for (std::size_t j = 0; j < H; ++j) {
    const double f = sigmoid(affine(p.w_sf, p.w_hf, p.b_f, j));
    const double i = sigmoid(affine(p.w_si, p.w_hi, p.b_i, j));
    const double o = sigmoid(affine(p.w_so, p.w_ho, p.b_o, j));
    const double g = std::tanh(affine(p.w_gs, p.w_gh, p.b_c, j));
    u_out[j] = f * u[j] + i * g;
    h_out[j] = o * std::tanh(u_out[j]);
  }
  return {h_out, u_out};
}

std::vector<double> random_speeds(std::size_t n, Rng& rng) {
  std::vector<double> s(n);
  for (double& v : s) v = uniform(rng, 0.0, 30.0);
  return s;
}

}  // namespace

TEST(RnnCell, ZeroWeightsGiveZeroState) {
  RnnCellParams p{Tensor::matrix(3, 3), Tensor::matrix(3, 2), Tensor({3}, 0.0)};
  const Tensor h = rnn_step(p, Tensor({3}, 0.0), Tensor({2}, 0.0));
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(RnnCell, ScalarEvaluation) {
  RnnCellParams p{Tensor::matrix(1, 1), Tensor::identity(1), Tensor({1}, 0.0)};
  const Tensor h = rnn_step(p, Tensor({1}, 0.0), Tensor::vector({0.2}));
  EXPECT_NEAR(h[0], kTanh02, 1e-15);
}

TEST(RnnCell, OutputInOpenUnitInterval) {
  Rng rng(4);
  RnnCellParams p = RnnCellParams::init(3, 6, rng);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor h({6});
    Tensor s({3});
    for (double& v : h.values()) v = uniform(rng, -1, 1);
    for (double& v : s.values()) v = uniform(rng, -5, 5);
    const Tensor out = rnn_step(p, h, s);
    for (double v : out.values()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(RnnCell, DimensionMismatchIsContractError) {
  Rng rng(1);
  RnnCellParams p = RnnCellParams::init(2, 4, rng);
  EXPECT_THROW(rnn_step(p, Tensor({4}, 0.0), Tensor({3}, 0.0)), ContractError);
  EXPECT_THROW(rnn_step(p, Tensor({5}, 0.0), Tensor({2}, 0.0)), ContractError);
}

TEST(LstmCell, ZeroParamsZeroState) {
  const auto p = LstmCellParams::zeros(2, 3);
  const auto [h, u] = lstm_step(p, Tensor({3}, 0.0), Tensor({3}, 0.0), Tensor({2}, 0.0));
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
  for (double v : u.values()) EXPECT_EQ(v, 0.0);
}

TEST(LstmCell, ZeroParamsHalveCellState) {
  const auto p = LstmCellParams::zeros(2, 3);
  const auto [h, u] = lstm_step(p, Tensor({3}, 0.0), Tensor({3}, 1.0), Tensor({2}, 0.0));
  for (double v : u.values()) EXPECT_DOUBLE_EQ(v, 0.5);
  for (double v : h.values()) EXPECT_NEAR(v, kHalfTanhHalf, 1e-15);
}

TEST(LstmCell, CellStateDecaysGeometricallyWithClosedInputGate) {
  auto p = LstmCellParams::zeros(1, 2);
  // f = sigmoid(0) = 0.5, i = sigmoid(-60) ~ 1e-26.
  for (double& v : p.b_i.values()) v = -60.0;
  Tensor h({2}, 0.0);
  Tensor u = Tensor::vector({1.0, -3.0});
  for (int k = 1; k <= 12; ++k) {
    auto next = lstm_step(p, h, u, Tensor({1}, 0.7));
    h = next.first;
    u = next.second;
    EXPECT_NEAR(u[0], std::pow(0.5, k), 1e-20);
    EXPECT_NEAR(u[1], -3.0 * std::pow(0.5, k), 1e-20);
  }
}

TEST(LstmCell, MatchesStraightLineEvaluation) {
  Rng rng(17);
  const auto p = LstmCellParams::init(3, 5, rng);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> h(5), u(5), s(3);
    for (double& v : h) v = uniform(rng, -1, 1);
    for (double& v : u) v = uniform(rng, -2, 2);
    for (double& v : s) v = uniform(rng, -1, 1);
    const auto [h_ref, u_ref] = reference_lstm(p, h, u, s);
    const auto [h_got, u_got] = lstm_step(p, Tensor::vector(h), Tensor::vector(u), Tensor::vector(s));
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_NEAR(h_got[j], h_ref[j], 1e-14);
      EXPECT_NEAR(u_got[j], u_ref[j], 1e-14);
    }
  }
}

TEST(LstmCell, DimensionMismatchIsContractError) {
  Rng rng(1);
  const auto p = LstmCellParams::init(2, 4, rng);
  EXPECT_THROW(lstm_step(p, Tensor({4}, 0.0), Tensor({4}, 0.0), Tensor({3}, 0.0)), ContractError);
  EXPECT_THROW(lstm_step(p, Tensor({4}, 0.0), Tensor({2}, 0.0), Tensor({2}, 0.0)), ContractError);
}

TEST(Mlp, IdentityLayerReturnsInput) {
  MlpParams p;
  p.layers.push_back(DenseLayer{Tensor::identity(3), Tensor({3}, 0.0), Activation::identity});
  const Tensor x = Tensor::vector({0.3, -2.0, 7.5});
  EXPECT_EQ(mlp_forward(p, x), x);
}

TEST(Mlp, TwoLayerTanhMatchesHandLoop) {
  Rng rng(8);
  const std::size_t dims[] = {4, 6, 3};
  const auto p = MlpParams::init(dims, Activation::tanh, Activation::tanh, rng);
  std::vector<double> x(4);
  for (double& v : x) v = uniform(rng, -1, 1);

  std::vector<double> a = x;
  for (const DenseLayer& layer : p.layers) {
    std::vector<double> next(layer.w.rows());
    for (std::size_t j = 0; j < next.size(); ++j) {
      double acc = layer.b[j];
      for (std::size_t k = 0; k < a.size(); ++k) acc += layer.w.at(j, k) * a[k];
      next[j] = std::tanh(acc);
    }
    a = next;
  }
  const Tensor y = mlp_forward(p, Tensor::vector(x));
  ASSERT_EQ(y.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y[j], a[j], 1e-15);
}

TEST(Mlp, ZeroInputZeroBiasOddActivationGivesZero) {
  Rng rng(2);
  const std::size_t dims[] = {3, 8, 8, 2};
  auto p = MlpParams::init(dims, Activation::tanh, Activation::identity, rng);
  for (auto& layer : p.layers)
    for (double& v : layer.b.values()) v = 0.0;
  const Tensor out = mlp_forward(p, Tensor({3}, 0.0));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, DimensionMismatchIsContractError) {
  Rng rng(2);
  const std::size_t dims[] = {3, 4};
  const auto p = MlpParams::init(dims, Activation::tanh, Activation::identity, rng);
  EXPECT_THROW(mlp_forward(p, Tensor({2}, 0.0)), ContractError);
}

// ---------------------------------------------------------------------------
// Gradients

TEST(SeqnetGradients, RnnStep) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    RnnCellParams p = RnnCellParams::init(2, 4, rng);
    Tensor h0 = uniform_tensor({3, 4}, 1.0, rng);
    Tensor s = uniform_tensor({3, 2}, 1.0, rng);
    Tensor w = uniform_tensor({3, 4}, 1.0, rng);
    auto params = p.tensors();
    params.push_back(&h0);
    params.push_back(&s);
    auto loss = [&](Tape& tape, ParamBinder& b) {
      Var h = rnn_step(bind(b, p), b(h0), b(s));
      return ad::sum(h * tape.constant(w));
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
    EXPECT_LT(oracle::max_relative_error(analytic, numeric), oracle::kGradTolerance);
  }
}

TEST(SeqnetGradients, LstmStepAllGates) {
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    LstmCellParams p = LstmCellParams::init(3, 4, rng);
    Tensor h0 = uniform_tensor({2, 4}, 1.0, rng);
    Tensor u0 = uniform_tensor({2, 4}, 2.0, rng);
    Tensor s = uniform_tensor({2, 3}, 1.0, rng);
    Tensor wh = uniform_tensor({2, 4}, 1.0, rng);
    Tensor wu = uniform_tensor({2, 4}, 1.0, rng);
    auto params = p.tensors();
    params.push_back(&h0);
    params.push_back(&u0);
    params.push_back(&s);
    auto loss = [&](Tape& tape, ParamBinder& b) {
      LstmState st = lstm_step(bind(b, p), LstmState{b(h0), b(u0)}, b(s));
      return ad::sum(st.h * tape.constant(wh)) + ad::sum(st.u * tape.constant(wu));
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
    EXPECT_LT(oracle::max_relative_error(analytic, numeric), oracle::kGradTolerance);
  }
}

TEST(SeqnetGradients, MlpLayers) {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dims[] = {3, 5, 4, 2};
    MlpParams p = MlpParams::init(dims, Activation::tanh, Activation::sigmoid, rng);
    Tensor x = uniform_tensor({4, 3}, 2.0, rng);
    auto params = p.tensors();
    params.push_back(&x);
    auto loss = [&](Tape&, ParamBinder& b) { return ad::mean(ad::square(mlp_forward(bind(b, p), b(x)))); };
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
    EXPECT_LT(oracle::max_relative_error(analytic, numeric), oracle::kGradTolerance);
  }
}

TEST(SeqnetGradients, BackpropThroughTwentySteps) {
  Rng rng(34);
  for (int trial = 0; trial < 3; ++trial) {
    EncoderDecoder ed = EncoderDecoder::init(3, 2, trial == 2, 0, rng);
    ed.distance_scale = 400.0;
    std::vector<std::vector<double>> trips{random_speeds(20, rng), random_speeds(14, rng)};
    std::vector<SequenceExample> examples;
    for (const auto& t : trips) {
      double L = 0.0;
      for (double v : t) L += v;
      examples.push_back(SequenceExample{t, SequenceContext{L, {}}});
    }
    const SequenceBatch batch = make_batch(ed, examples);
    auto params = ed.tensors();
    auto loss = [&](Tape& tape, ParamBinder& b) {
      auto vars = bind(b, ed);
      Var z = encode(vars, batch, tape);
      auto outs = decode(vars, ed, z, batch.steps, batch.total_distance, batch.condition);
      Var total = tape.constant(Tensor::scalar(0.0));
      for (std::size_t t = 0; t < batch.steps; ++t) {
        Var err = outs[t] - tape.constant(batch.targets[t]);
        total = total + ad::sum(ad::square(err) * tape.constant(batch.output_masks[t]));
      }
      return total;
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
    EXPECT_LT(oracle::max_relative_error(analytic, numeric), oracle::kGradTolerance) << trial;
  }
}

// ---------------------------------------------------------------------------
// Encoder / decoder

TEST(EncoderDecoder, LatentDimensionIndependentOfLength) {
  Rng rng(41);
  const EncoderDecoder ed = EncoderDecoder::init(24, 2, false, 0, rng);
  const std::vector<double> short_trip = random_speeds(100, rng);
  const std::vector<double> long_trip = random_speeds(6330, rng);
  EXPECT_EQ(encode(ed, short_trip).size(), 96u);
  EXPECT_EQ(encode(ed, long_trip).size(), 96u);
}

TEST(EncoderDecoder, LatentDimensionOverManyRandomLengths) {
  Rng rng(42);
  const EncoderDecoder ed = EncoderDecoder::init(2, 1, false, 0, rng);
  for (int k = 0; k < 1000; ++k) {
    const std::size_t n = 100 + uniform_index(rng, 6231);
    ASSERT_EQ(encode(ed, random_speeds(n, rng)).size(), ed.latent_dim()) << n;
  }
}

TEST(EncoderDecoder, ZeroTripThroughZeroEncoderGivesZeroLatent) {
  Rng rng(5);
  EncoderDecoder ed = EncoderDecoder::init(4, 2, false, 0, rng);
  for (auto& cell : ed.encoder) cell = LstmCellParams::zeros(cell.input_dim(), cell.hidden_size());
  const std::vector<double> zeros(150, 0.0);
  const Tensor z = encode(ed, zeros);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(EncoderDecoder, EncodingIsOrderSensitive) {
  Rng rng(6);
  const EncoderDecoder ed = EncoderDecoder::init(8, 1, false, 0, rng);
  std::vector<double> trip = random_speeds(120, rng);
  std::vector<double> permuted = trip;
  std::shuffle(permuted.begin(), permuted.end(), rng);
  ASSERT_NE(trip, permuted);
  const Tensor a = encode(ed, trip);
  const Tensor b = encode(ed, permuted);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(EncoderDecoder, EmptyTripIsContractError) {
  Rng rng(6);
  const EncoderDecoder ed = EncoderDecoder::init(4, 1, false, 0, rng);
  EXPECT_THROW(encode(ed, std::vector<double>{}), ContractError);
}

TEST(EncoderDecoder, SingleStepWithZeroParamsEqualsBias) {
  Rng rng(7);
  EncoderDecoder ed = EncoderDecoder::init(4, 2, false, 0, rng);
  for (auto& cell : ed.decoder) cell = LstmCellParams::zeros(cell.input_dim(), cell.hidden_size());
  for (double& v : ed.head_w.values()) v = 0.0;
  ed.head_b[0] = 0.3;
  const auto out = decode(ed, Tensor({ed.latent_dim()}, 0.0), 1);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_DOUBLE_EQ(out[0], 0.3 * ed.speed_scale);
  EXPECT_THROW(decode(ed, Tensor({ed.latent_dim()}, 0.0), 0), ContractError);
}

TEST(EncoderDecoder, DecodedSpeedsAreNonNegative) {
  Rng rng(9);
  EncoderDecoder ed = EncoderDecoder::init(6, 2, true, 1, rng);
  ed.distance_scale = 5000.0;
  ed.head_b[0] = -0.2;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor z = uniform_tensor({ed.latent_dim()}, 1.0, rng);
    for (double v : decode(ed, z, 80, SequenceContext{2000.0, {0.4}})) EXPECT_GE(v, 0.0);
  }
}

TEST(EncoderDecoder, DecoderIsPureFunctionOfParametersLatentAndLength) {
  Rng rng(10);
  const EncoderDecoder ed = EncoderDecoder::init(5, 2, false, 0, rng);
  const Tensor z = uniform_tensor({ed.latent_dim()}, 1.0, rng);
  const auto first = decode(ed, z, 60);
  // Unrelated work in between must not change the result.
  encode(ed, random_speeds(200, rng));
  decode(ed, uniform_tensor({ed.latent_dim()}, 1.0, rng), 30);
  EXPECT_EQ(decode(ed, z, 60), first);
  // A shorter decode is a prefix of a longer one.
  const auto prefix = decode(ed, z, 25);
  EXPECT_TRUE(std::equal(prefix.begin(), prefix.end(), first.begin()));
}

TEST(EncoderDecoder, BatchedEncodingMatchesSingleTrips) {
  Rng rng(11);
  const EncoderDecoder ed = EncoderDecoder::init(4, 2, false, 0, rng);
  std::vector<std::vector<double>> trips{random_speeds(30, rng), random_speeds(12, rng),
                                         random_speeds(21, rng)};
  std::vector<SequenceExample> examples;
  for (const auto& t : trips) examples.push_back(SequenceExample{t, {}});
  const SequenceBatch batch = make_batch(ed, examples);
  Tape tape;
  ParamBinder binder(tape, false);
  const Tensor z = encode(bind(binder, ed), batch, tape).value();
  for (std::size_t r = 0; r < trips.size(); ++r) {
    const Tensor single = encode(ed, trips[r]);
    for (std::size_t c = 0; c < ed.latent_dim(); ++c) EXPECT_NEAR(z.at(r, c), single[c], 1e-14);
  }
}

TEST(EncoderDecoder, ConditionDimensionIsChecked) {
  Rng rng(12);
  const EncoderDecoder ed = EncoderDecoder::init(4, 1, true, 1, rng);
  EXPECT_THROW(decode(ed, Tensor({ed.latent_dim()}, 0.0), 5, SequenceContext{100.0, {}}), ShapeError);
}

TEST(EncoderDecoder, SingleTripDecodeMatchesGraphDecode) {
  Rng rng(13);
  EncoderDecoder ed = EncoderDecoder::init(5, 2, true, 2, rng);
  ed.distance_scale = 3000.0;
  const Tensor z = uniform_tensor({ed.latent_dim()}, 1.0, rng);
  const SequenceContext ctx{1500.0, {0.25, -0.5}};
  const auto fast = decode(ed, z, 40, ctx);

  Tape tape;
  ParamBinder binder(tape, false);
  auto vars = bind(binder, ed);
  auto outs = decode(vars, ed, tape.constant(Tensor::matrix(1, ed.latent_dim(), z.storage())), 40,
                     Tensor::matrix(1, 1, 1500.0 / 3000.0), Tensor::matrix(1, 2, {0.25, -0.5}));
  ASSERT_EQ(outs.size(), fast.size());
  for (std::size_t t = 0; t < outs.size(); ++t) {
    EXPECT_NEAR(fast[t], outs[t].value().item() * ed.speed_scale, 1e-12) << t;
  }
}

#pragma once

// Recurrent and feed-forward building blocks.
//
// Parameters are plain value structs of Tensors. To differentiate through a
// network, bind its tensors onto a Tape with a ParamBinder, then call the
// graph-level functions (rnn_step, lstm_step, mlp_forward on Vars). The
// value-level overloads run a private tape and return plain Tensors.
//
// Batched graph functions lay samples out as rows: a hidden state is B x H.

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trajgen/autodiff.hpp"
#include "trajgen/random.hpp"

namespace trajgen::nn {

using ad::Tensor;
using ad::Var;

enum class Activation { tanh, sigmoid, identity };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

// Tensor filled from uniform(-k, k).
Tensor uniform_tensor(ad::Shape shape, double k, Rng& rng);

// Places parameter tensors on a tape as leaves. Binding the same tensor twice
// returns the same Var; frozen binders create constants.
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  Var operator()(const Tensor& t);
  // Weight matrix W bound as its transpose, so that rows x W^T is one matmul.
  Var transposed(const Tensor& w);

  // Gradient for each listed tensor (zeros for tensors this binder never saw).
  std::vector<Tensor> gradients(std::span<Tensor* const> params) const;

  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  bool trainable_;
  std::unordered_map<const Tensor*, Var> leaves_;
  std::unordered_map<const Tensor*, Var> transposed_;
};

// ---------------------------------------------------------------------------
// Vanilla RNN cell: h_t = tanh(W_hh h_{t-1} + W_sh s_t + b_h)

struct RnnCellParams {
  Tensor w_hh;  // H x H
  Tensor w_sh;  // H x D_in
  Tensor b_h;   // H

  static RnnCellParams init(std::size_t input_dim, std::size_t hidden, Rng& rng);
  std::size_t hidden_size() const { return w_hh.rows(); }
  std::size_t input_dim() const { return w_sh.cols(); }
  void validate() const;
  std::vector<Tensor*> tensors();
  friend bool operator==(const RnnCellParams&, const RnnCellParams&) = default;
};

struct RnnCellVars {
  Var w_hh_t, w_sh_t, b_h;
};

RnnCellVars bind(ParamBinder& binder, const RnnCellParams& p);
Var rnn_step(const RnnCellVars& p, Var h_prev, Var s);
Tensor rnn_step(const RnnCellParams& p, const Tensor& h_prev, const Tensor& s);

// ---------------------------------------------------------------------------
// LSTM cell
//   f = sig(W_sf s + W_hf h + b_f)   i = sig(W_si s + W_hi h + b_i)
//   o = sig(W_so s + W_ho h + b_o)   g = tanh(W_gs s + W_gh h + b_c)
//   u_t = f * u_{t-1} + i * g        h_t = o * tanh(u_t)

struct LstmCellParams {
  Tensor w_sf, w_si, w_so, w_gs;  // H x D_in
  Tensor w_hf, w_hi, w_ho, w_gh;  // H x H
  Tensor b_f, b_i, b_o, b_c;      // H

  static LstmCellParams init(std::size_t input_dim, std::size_t hidden, Rng& rng);
  static LstmCellParams zeros(std::size_t input_dim, std::size_t hidden);
  std::size_t hidden_size() const { return w_hf.rows(); }
  std::size_t input_dim() const { return w_sf.cols(); }
  void validate() const;
  std::vector<Tensor*> tensors();
  friend bool operator==(const LstmCellParams&, const LstmCellParams&) = default;
};

struct LstmCellVars {
  Var w_sf_t, w_si_t, w_so_t, w_gs_t;
  Var w_hf_t, w_hi_t, w_ho_t, w_gh_t;
  Var b_f, b_i, b_o, b_c;
};

struct LstmState {
  Var h;
  Var u;
};

LstmCellVars bind(ParamBinder& binder, const LstmCellParams& p);
LstmState lstm_step(const LstmCellVars& p, LstmState prev, Var s);
std::pair<Tensor, Tensor> lstm_step(const LstmCellParams& p, const Tensor& h_prev,
                                    const Tensor& u_prev, const Tensor& s);

// ---------------------------------------------------------------------------
// Feed-forward map: x -> act_n(W_n ... act_1(W_1 x + b_1) ... + b_n)

struct DenseLayer {
  Tensor w;  // N_out x N_in
  Tensor b;  // N_out
  Activation activation = Activation::tanh;
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  // dims = {N_0, N_1, ..., N_n}; hidden layers use `hidden`, the last `output`.
  static MlpParams init(std::span<const std::size_t> dims, Activation hidden, Activation output,
                        Rng& rng);
  std::size_t input_dim() const { return layers.front().w.cols(); }
  std::size_t output_dim() const { return layers.back().w.rows(); }
  void validate() const;
  std::vector<Tensor*> tensors();
  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

struct MlpVars {
  std::vector<std::pair<Var, Var>> layers;  // (W^T, b)
  std::vector<Activation> activations;
};

MlpVars bind(ParamBinder& binder, const MlpParams& p);
// x is B x N_0 (or a length-N_0 vector, treated as one row).
Var mlp_forward(const MlpVars& p, Var x);
Tensor mlp_forward(const MlpParams& p, const Tensor& x);

// ---------------------------------------------------------------------------
// Encoder/decoder pair over speed sequences.
//
// Speeds enter the networks divided by speed_scale. With distance channels the
// per-step input is (s_t, d_t, L) where d_t = L - sum_{i<=t} s_i and both
// distances are divided by distance_scale. The decoder additionally receives
// the condition vector (already normalized) at every step.
//
// The latent vector concatenates the final (h, u) of every encoder layer, so
// latent_dim = 2 * hidden * layers regardless of sequence length. The decoder
// starts from h_0, u_0 taken from the latent and s_0 = 0, and feeds its own
// clamped output back as the next input.

struct EncoderDecoder {
  std::vector<LstmCellParams> encoder;
  std::vector<LstmCellParams> decoder;
  Tensor head_w;  // 1 x H
  Tensor head_b;  // 1
  bool distance_channels = false;
  std::size_t condition_dim = 0;
  double speed_scale = 40.0;
  double distance_scale = 1.0;

  static EncoderDecoder init(std::size_t hidden, std::size_t layers, bool distance_channels,
                             std::size_t condition_dim, Rng& rng);

  std::size_t hidden_size() const { return encoder.front().hidden_size(); }
  std::size_t layers() const { return encoder.size(); }
  std::size_t latent_dim() const { return 2 * hidden_size() * layers(); }
  std::size_t encoder_input_dim() const { return distance_channels ? 3 : 1; }
  std::size_t decoder_input_dim() const { return encoder_input_dim() + condition_dim; }
  void validate() const;
  std::vector<Tensor*> tensors();
  friend bool operator==(const EncoderDecoder&, const EncoderDecoder&) = default;
};

struct EncoderDecoderVars {
  std::vector<LstmCellVars> encoder;
  std::vector<LstmCellVars> decoder;
  Var head_w_t;
  Var head_b;
};

EncoderDecoderVars bind(ParamBinder& binder, const EncoderDecoder& ed);

// Per-trip side information. total_distance is in meters; condition is the
// normalized condition vector (size must equal condition_dim).
struct SequenceContext {
  double total_distance = 0.0;
  std::vector<double> condition;
};

struct SequenceExample {
  std::span<const double> speeds;  // m/s
  SequenceContext context;
};

// Padded batch ready for the graph functions. Steps beyond a trip's length are
// masked: the encoder carries its state through them and losses ignore them.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> lengths;
  std::vector<Tensor> inputs;       // per step: B x encoder_input_dim
  std::vector<Tensor> state_masks;  // per step: B x H, 1 while t < length
  std::vector<Tensor> output_masks; // per step: B x 1
  std::vector<Tensor> targets;      // per step: B x 1 normalized speeds
  Tensor total_distance;            // B x 1 normalized L
  Tensor condition;                 // B x condition_dim (unused when 0)
};

SequenceBatch make_batch(const EncoderDecoder& ed, std::span<const SequenceExample> examples);

// Encoder input rows (T x encoder_input_dim) for one trip.
Tensor encoder_inputs(const EncoderDecoder& ed, std::span<const double> speeds,
                      double total_distance);

// B x latent_dim.
Var encode(const EncoderDecoderVars& ed, const SequenceBatch& batch, ad::Tape& tape);

// Free-running decode for `steps` steps. Returns the per-step B x 1 outputs in
// normalized speed units (already clamped at zero). total_distance is B x 1
// normalized, condition is B x condition_dim (ignored when condition_dim = 0).
std::vector<Var> decode(const EncoderDecoderVars& vars, const EncoderDecoder& ed, Var latent,
                        std::size_t steps, const Tensor& total_distance, const Tensor& condition);

// Value-level encode of one trip; throws ContractError on an empty trip.
Tensor encode(const EncoderDecoder& ed, std::span<const double> speeds,
              const SequenceContext& context = {});

// Value-level decode to n physical speeds (m/s, >= 0).
std::vector<double> decode(const EncoderDecoder& ed, const Tensor& latent, std::size_t n,
                           const SequenceContext& context = {});

}  // namespace trajgen::nn

#include "trajgen/seqnets.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "trajgen/error.hpp"

namespace trajgen::nn {

namespace {

void expect_shape(const Tensor& t, const ad::Shape& shape, const char* what) {
  if (t.shape() != shape) {
    throw ShapeError(std::string(what) + ": expected " + ad::shape_str(shape) + ", got " +
                     ad::shape_str(t.shape()));
  }
}

Var apply(Activation a, Var x) {
  switch (a) {
    case Activation::tanh: return ad::tanh(x);
    case Activation::sigmoid: return ad::sigmoid(x);
    case Activation::identity: return x;
  }
  return x;
}

// x (B x D) -> B x H pre-activation for one gate.
Var gate(Var s, Var w_s_t, Var h, Var w_h_t, Var b) {
  return ad::add_rowwise(ad::matmul(s, w_s_t) + ad::matmul(h, w_h_t), b);
}

Tensor as_row(const Tensor& t) {
  if (t.rank() == 2) return t;
  return Tensor::matrix(1, t.size(), t.storage());
}

}  // namespace

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "identity";
}

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "identity") return Activation::identity;
  throw ContractError("unknown activation '" + name + "'");
}

Tensor uniform_tensor(ad::Shape shape, double k, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = uniform(rng, -k, k);
  return t;
}

// ---------------------------------------------------------------------------

Var ParamBinder::operator()(const Tensor& t) {
  auto it = leaves_.find(&t);
  if (it != leaves_.end()) return it->second;
  Var v = trainable_ ? tape_->variable(t) : tape_->constant(t);
  leaves_.emplace(&t, v);
  return v;
}

Var ParamBinder::transposed(const Tensor& w) {
  auto it = transposed_.find(&w);
  if (it != transposed_.end()) return it->second;
  Var v = ad::transpose((*this)(w));
  transposed_.emplace(&w, v);
  return v;
}

std::vector<Tensor> ParamBinder::gradients(std::span<Tensor* const> params) const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor* p : params) {
    auto it = leaves_.find(p);
    out.push_back(it == leaves_.end() ? Tensor(p->shape(), 0.0) : tape_->grad(it->second));
  }
  return out;
}

// ---------------------------------------------------------------------------
// RNN

RnnCellParams RnnCellParams::init(std::size_t input_dim, std::size_t hidden, Rng& rng) {
  RnnCellParams p;
  const double kh = 1.0 / std::sqrt(static_cast<double>(hidden));
  const double ks = 1.0 / std::sqrt(static_cast<double>(input_dim));
  p.w_hh = uniform_tensor({hidden, hidden}, kh, rng);
  p.w_sh = uniform_tensor({hidden, input_dim}, ks, rng);
  p.b_h = uniform_tensor({hidden}, kh, rng);
  return p;
}

void RnnCellParams::validate() const {
  const std::size_t h = w_hh.rows();
  expect_shape(w_hh, {h, h}, "rnn w_hh");
  expect_shape(w_sh, {h, w_sh.cols()}, "rnn w_sh");
  expect_shape(b_h, {h}, "rnn b_h");
}

std::vector<Tensor*> RnnCellParams::tensors() { return {&w_hh, &w_sh, &b_h}; }

RnnCellVars bind(ParamBinder& binder, const RnnCellParams& p) {
  p.validate();
  return {binder.transposed(p.w_hh), binder.transposed(p.w_sh), binder(p.b_h)};
}

Var rnn_step(const RnnCellVars& p, Var h_prev, Var s) {
  return ad::tanh(ad::add_rowwise(ad::matmul(h_prev, p.w_hh_t) + ad::matmul(s, p.w_sh_t), p.b_h));
}

Tensor rnn_step(const RnnCellParams& p, const Tensor& h_prev, const Tensor& s) {
  p.validate();
  if (h_prev.size() != p.hidden_size() || s.size() != p.input_dim()) {
    throw ShapeError("rnn_step: hidden " + ad::shape_str(h_prev.shape()) + " / input " +
                     ad::shape_str(s.shape()) + " do not match cell (H=" +
                     std::to_string(p.hidden_size()) + ", D=" + std::to_string(p.input_dim()) + ")");
  }
  ad::Tape tape;
  ParamBinder binder(tape, false);
  auto vars = bind(binder, p);
  Var h = rnn_step(vars, tape.constant(as_row(h_prev)), tape.constant(as_row(s)));
  return Tensor(h_prev.shape(), h.value().storage());
}

// ---------------------------------------------------------------------------
// LSTM

LstmCellParams LstmCellParams::init(std::size_t input_dim, std::size_t hidden, Rng& rng) {
  LstmCellParams p;
  const double ks = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double kh = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (Tensor* w : {&p.w_sf, &p.w_si, &p.w_so, &p.w_gs}) *w = uniform_tensor({hidden, input_dim}, ks, rng);
  for (Tensor* w : {&p.w_hf, &p.w_hi, &p.w_ho, &p.w_gh}) *w = uniform_tensor({hidden, hidden}, kh, rng);
  for (Tensor* b : {&p.b_f, &p.b_i, &p.b_o, &p.b_c}) *b = uniform_tensor({hidden}, kh, rng);
  return p;
}

LstmCellParams LstmCellParams::zeros(std::size_t input_dim, std::size_t hidden) {
  LstmCellParams p;
  for (Tensor* w : {&p.w_sf, &p.w_si, &p.w_so, &p.w_gs}) *w = Tensor({hidden, input_dim}, 0.0);
  for (Tensor* w : {&p.w_hf, &p.w_hi, &p.w_ho, &p.w_gh}) *w = Tensor({hidden, hidden}, 0.0);
  for (Tensor* b : {&p.b_f, &p.b_i, &p.b_o, &p.b_c}) *b = Tensor({hidden}, 0.0);
  return p;
}

void LstmCellParams::validate() const {
  const std::size_t h = w_hf.rows();
  const std::size_t d = w_sf.cols();
  for (const Tensor* w : {&w_sf, &w_si, &w_so, &w_gs}) expect_shape(*w, {h, d}, "lstm input weight");
  for (const Tensor* w : {&w_hf, &w_hi, &w_ho, &w_gh}) expect_shape(*w, {h, h}, "lstm recurrent weight");
  for (const Tensor* b : {&b_f, &b_i, &b_o, &b_c}) expect_shape(*b, {h}, "lstm bias");
}

std::vector<Tensor*> LstmCellParams::tensors() {
  return {&w_sf, &w_si, &w_so, &w_gs, &w_hf, &w_hi, &w_ho, &w_gh, &b_f, &b_i, &b_o, &b_c};
}

LstmCellVars bind(ParamBinder& binder, const LstmCellParams& p) {
  p.validate();
  LstmCellVars v;
  v.w_sf_t = binder.transposed(p.w_sf);
  v.w_si_t = binder.transposed(p.w_si);
  v.w_so_t = binder.transposed(p.w_so);
  v.w_gs_t = binder.transposed(p.w_gs);
  v.w_hf_t = binder.transposed(p.w_hf);
  v.w_hi_t = binder.transposed(p.w_hi);
  v.w_ho_t = binder.transposed(p.w_ho);
  v.w_gh_t = binder.transposed(p.w_gh);
  v.b_f = binder(p.b_f);
  v.b_i = binder(p.b_i);
  v.b_o = binder(p.b_o);
  v.b_c = binder(p.b_c);
  return v;
}

LstmState lstm_step(const LstmCellVars& p, LstmState prev, Var s) {
  Var f = ad::sigmoid(gate(s, p.w_sf_t, prev.h, p.w_hf_t, p.b_f));
  Var i = ad::sigmoid(gate(s, p.w_si_t, prev.h, p.w_hi_t, p.b_i));
  Var o = ad::sigmoid(gate(s, p.w_so_t, prev.h, p.w_ho_t, p.b_o));
  Var g = ad::tanh(gate(s, p.w_gs_t, prev.h, p.w_gh_t, p.b_c));
  Var u = f * prev.u + i * g;
  Var h = o * ad::tanh(u);
  return {h, u};
}

std::pair<Tensor, Tensor> lstm_step(const LstmCellParams& p, const Tensor& h_prev,
                                    const Tensor& u_prev, const Tensor& s) {
  p.validate();
  const std::size_t hidden = p.hidden_size();
  if (h_prev.size() != hidden || u_prev.size() != hidden || s.size() != p.input_dim()) {
    throw ShapeError("lstm_step: state " + ad::shape_str(h_prev.shape()) + "/" +
                     ad::shape_str(u_prev.shape()) + ", input " + ad::shape_str(s.shape()) +
                     " do not match cell (H=" + std::to_string(hidden) +
                     ", D=" + std::to_string(p.input_dim()) + ")");
  }
  ad::Tape tape;
  ParamBinder binder(tape, false);
  auto vars = bind(binder, p);
  LstmState out = lstm_step(vars, {tape.constant(as_row(h_prev)), tape.constant(as_row(u_prev))},
                            tape.constant(as_row(s)));
  return {Tensor(h_prev.shape(), out.h.value().storage()),
          Tensor(u_prev.shape(), out.u.value().storage())};
}

// ---------------------------------------------------------------------------
// MLP

MlpParams MlpParams::init(std::span<const std::size_t> dims, Activation hidden,
                          Activation output, Rng& rng) {
  if (dims.size() < 2) throw ContractError("MlpParams::init: need at least input and output dims");
  MlpParams p;
  for (std::size_t l = 1; l < dims.size(); ++l) {
    const double k = 1.0 / std::sqrt(static_cast<double>(dims[l - 1]));
    DenseLayer layer;
    layer.w = uniform_tensor({dims[l], dims[l - 1]}, k, rng);
    layer.b = uniform_tensor({dims[l]}, k, rng);
    layer.activation = l + 1 == dims.size() ? output : hidden;
    p.layers.push_back(std::move(layer));
  }
  return p;
}

void MlpParams::validate() const {
  if (layers.empty()) throw ContractError("mlp: no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.w.rank() != 2) throw ShapeError("mlp: layer " + std::to_string(l) + " weight must be a matrix");
    expect_shape(layer.b, {layer.w.rows()}, "mlp bias");
    if (l > 0 && layers[l - 1].w.rows() != layer.w.cols()) {
      throw ShapeError("mlp: layer " + std::to_string(l) + " expects " +
                       std::to_string(layer.w.cols()) + " inputs but previous layer emits " +
                       std::to_string(layers[l - 1].w.rows()));
    }
  }
}

std::vector<Tensor*> MlpParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& layer : layers) {
    out.push_back(&layer.w);
    out.push_back(&layer.b);
  }
  return out;
}

MlpVars bind(ParamBinder& binder, const MlpParams& p) {
  p.validate();
  MlpVars v;
  for (const auto& layer : p.layers) {
    v.layers.emplace_back(binder.transposed(layer.w), binder(layer.b));
    v.activations.push_back(layer.activation);
  }
  return v;
}

Var mlp_forward(const MlpVars& p, Var x) {
  const std::size_t in = p.layers.front().first.value().rows();
  if (x.value().cols() != in || x.value().rank() > 2) {
    throw ShapeError("mlp_forward: input " + ad::shape_str(x.shape()) + " but first layer takes " +
                     std::to_string(in));
  }
  Var a = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    a = apply(p.activations[l], ad::add_rowwise(ad::matmul(a, p.layers[l].first), p.layers[l].second));
  }
  return a;
}

Tensor mlp_forward(const MlpParams& p, const Tensor& x) {
  p.validate();
  if (x.cols() != p.input_dim()) {
    throw ShapeError("mlp_forward: input " + ad::shape_str(x.shape()) + " but first layer takes " +
                     std::to_string(p.input_dim()));
  }
  ad::Tape tape;
  ParamBinder binder(tape, false);
  auto vars = bind(binder, p);
  Var y = mlp_forward(vars, tape.constant(as_row(x)));
  if (x.rank() == 2) return y.value();
  return Tensor::vector(y.value().storage());
}

// ---------------------------------------------------------------------------
// Encoder / decoder

EncoderDecoder EncoderDecoder::init(std::size_t hidden, std::size_t layers, bool distance_channels,
                                    std::size_t condition_dim, Rng& rng) {
  if (hidden == 0 || layers == 0) throw ContractError("EncoderDecoder: hidden and layers must be positive");
  EncoderDecoder ed;
  ed.distance_channels = distance_channels;
  ed.condition_dim = condition_dim;
  for (std::size_t l = 0; l < layers; ++l) {
    ed.encoder.push_back(LstmCellParams::init(l == 0 ? ed.encoder_input_dim() : hidden, hidden, rng));
  }
  for (std::size_t l = 0; l < layers; ++l) {
    ed.decoder.push_back(LstmCellParams::init(l == 0 ? ed.decoder_input_dim() : hidden, hidden, rng));
  }
  const double k = 1.0 / std::sqrt(static_cast<double>(hidden));
  ed.head_w = uniform_tensor({1, hidden}, k, rng);
  ed.head_b = uniform_tensor({1}, k, rng);
  return ed;
}

void EncoderDecoder::validate() const {
  if (encoder.empty() || encoder.size() != decoder.size()) {
    throw ContractError("EncoderDecoder: encoder and decoder need the same positive layer count");
  }
  const std::size_t h = hidden_size();
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    encoder[l].validate();
    decoder[l].validate();
    const std::size_t enc_in = l == 0 ? encoder_input_dim() : h;
    const std::size_t dec_in = l == 0 ? decoder_input_dim() : h;
    if (encoder[l].hidden_size() != h || encoder[l].input_dim() != enc_in ||
        decoder[l].hidden_size() != h || decoder[l].input_dim() != dec_in) {
      throw ShapeError("EncoderDecoder: layer " + std::to_string(l) + " dimensions inconsistent");
    }
  }
  expect_shape(head_w, {1, h}, "decoder head weight");
  expect_shape(head_b, {1}, "decoder head bias");
  if (!(speed_scale > 0.0) || !(distance_scale > 0.0)) throw ContractError("EncoderDecoder: scales must be positive");
}

std::vector<Tensor*> EncoderDecoder::tensors() {
  std::vector<Tensor*> out;
  for (auto& c : encoder) {
    auto t = c.tensors();
    out.insert(out.end(), t.begin(), t.end());
  }
  for (auto& c : decoder) {
    auto t = c.tensors();
    out.insert(out.end(), t.begin(), t.end());
  }
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

EncoderDecoderVars bind(ParamBinder& binder, const EncoderDecoder& ed) {
  ed.validate();
  EncoderDecoderVars v;
  for (const auto& c : ed.encoder) v.encoder.push_back(bind(binder, c));
  for (const auto& c : ed.decoder) v.decoder.push_back(bind(binder, c));
  v.head_w_t = binder.transposed(ed.head_w);
  v.head_b = binder(ed.head_b);
  return v;
}

Tensor encoder_inputs(const EncoderDecoder& ed, std::span<const double> speeds,
                      double total_distance) {
  const std::size_t dim = ed.encoder_input_dim();
  Tensor out = Tensor::matrix(speeds.size(), dim);
  double travelled = 0.0;
  for (std::size_t t = 0; t < speeds.size(); ++t) {
    out.at(t, 0) = speeds[t] / ed.speed_scale;
    if (ed.distance_channels) {
      travelled += speeds[t];
      out.at(t, 1) = (total_distance - travelled) / ed.distance_scale;
      out.at(t, 2) = total_distance / ed.distance_scale;
    }
  }
  return out;
}

SequenceBatch make_batch(const EncoderDecoder& ed, std::span<const SequenceExample> examples) {
  if (examples.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t b = examples.size();
  const std::size_t h = ed.hidden_size();
  const std::size_t dim = ed.encoder_input_dim();
  SequenceBatch batch;
  batch.batch = b;
  for (const auto& ex : examples) {
    if (ex.speeds.empty()) throw ContractError("make_batch: empty trip");
    if (ex.context.condition.size() != ed.condition_dim) {
      throw ShapeError("make_batch: condition has " + std::to_string(ex.context.condition.size()) +
                       " entries, model expects " + std::to_string(ed.condition_dim));
    }
    batch.lengths.push_back(ex.speeds.size());
    batch.steps = std::max(batch.steps, ex.speeds.size());
  }
  std::vector<Tensor> rows;
  rows.reserve(b);
  for (const auto& ex : examples) rows.push_back(encoder_inputs(ed, ex.speeds, ex.context.total_distance));

  for (std::size_t t = 0; t < batch.steps; ++t) {
    Tensor in = Tensor::matrix(b, dim);
    Tensor smask = Tensor::matrix(b, h);
    Tensor omask = Tensor::matrix(b, 1);
    Tensor target = Tensor::matrix(b, 1);
    for (std::size_t r = 0; r < b; ++r) {
      if (t >= batch.lengths[r]) continue;
      for (std::size_t c = 0; c < dim; ++c) in.at(r, c) = rows[r].at(t, c);
      for (std::size_t c = 0; c < h; ++c) smask.at(r, c) = 1.0;
      omask.at(r, 0) = 1.0;
      target.at(r, 0) = examples[r].speeds[t] / ed.speed_scale;
    }
    batch.inputs.push_back(std::move(in));
    batch.state_masks.push_back(std::move(smask));
    batch.output_masks.push_back(std::move(omask));
    batch.targets.push_back(std::move(target));
  }
  batch.total_distance = Tensor::matrix(b, 1);
  for (std::size_t r = 0; r < b; ++r) {
    batch.total_distance.at(r, 0) = examples[r].context.total_distance / ed.distance_scale;
  }
  if (ed.condition_dim > 0) {
    batch.condition = Tensor::matrix(b, ed.condition_dim);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t c = 0; c < ed.condition_dim; ++c) {
        batch.condition.at(r, c) = examples[r].context.condition[c];
      }
    }
  }
  return batch;
}

Var encode(const EncoderDecoderVars& ed, const SequenceBatch& batch, ad::Tape& tape) {
  const std::size_t layers = ed.encoder.size();
  const std::size_t b = batch.batch;
  const std::size_t h = ed.encoder.front().w_hf_t.value().rows();
  const std::size_t shortest = *std::min_element(batch.lengths.begin(), batch.lengths.end());

  std::vector<LstmState> state(layers);
  for (auto& s : state) {
    s.h = tape.constant(Tensor::matrix(b, h));
    s.u = tape.constant(Tensor::matrix(b, h));
  }
  for (std::size_t t = 0; t < batch.steps; ++t) {
    Var x = tape.constant(batch.inputs[t]);
    const bool masked = t >= shortest;
    Var keep, hold;
    if (masked) {
      keep = tape.constant(batch.state_masks[t]);
      Tensor inv = batch.state_masks[t];
      for (double& v : inv.values()) v = 1.0 - v;
      hold = tape.constant(std::move(inv));
    }
    for (std::size_t l = 0; l < layers; ++l) {
      LstmState next = lstm_step(ed.encoder[l], state[l], x);
      if (masked) {
        next.h = keep * next.h + hold * state[l].h;
        next.u = keep * next.u + hold * state[l].u;
      }
      state[l] = next;
      x = next.h;
    }
  }
  std::vector<Var> parts;
  for (const auto& s : state) {
    parts.push_back(s.h);
    parts.push_back(s.u);
  }
  return ad::concat(parts);
}

std::vector<Var> decode(const EncoderDecoderVars& vars, const EncoderDecoder& ed, Var latent,
                        std::size_t steps, const Tensor& total_distance, const Tensor& condition) {
  ad::Tape& tape = *latent.tape;
  const std::size_t layers = vars.decoder.size();
  const std::size_t h = ed.hidden_size();
  const std::size_t b = latent.value().rows();
  if (latent.value().cols() != 2 * h * layers) {
    throw ShapeError("decode: latent " + ad::shape_str(latent.shape()) + " but model expects " +
                     std::to_string(2 * h * layers) + " columns");
  }

  std::vector<LstmState> state(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    state[l].h = ad::slice_cols(latent, 2 * h * l, 2 * h * l + h);
    state[l].u = ad::slice_cols(latent, 2 * h * l + h, 2 * h * (l + 1));
  }

  Var total, remaining, cond;
  if (ed.distance_channels) {
    if (total_distance.rows() != b) throw ShapeError("decode: total_distance rows do not match batch");
    total = tape.constant(total_distance);
    remaining = total;
  }
  if (ed.condition_dim > 0) {
    if (condition.rows() != b || condition.cols() != ed.condition_dim) {
      throw ShapeError("decode: condition " + ad::shape_str(condition.shape()) + " does not match batch " +
                       std::to_string(b) + " x " + std::to_string(ed.condition_dim));
    }
    cond = tape.constant(condition);
  }
  const double travel = ed.speed_scale / ed.distance_scale;

  Var prev = tape.constant(Tensor::matrix(b, 1));
  std::vector<Var> outputs;
  outputs.reserve(steps);
  std::vector<Var> parts;
  for (std::size_t t = 0; t < steps; ++t) {
    parts.clear();
    parts.push_back(prev);
    if (ed.distance_channels) {
      parts.push_back(remaining);
      parts.push_back(total);
    }
    if (ed.condition_dim > 0) parts.push_back(cond);
    Var x = parts.size() == 1 ? prev : ad::concat(parts);
    for (std::size_t l = 0; l < layers; ++l) {
      state[l] = lstm_step(vars.decoder[l], state[l], x);
      x = state[l].h;
    }
    Var s = ad::relu(ad::add_rowwise(ad::matmul(x, vars.head_w_t), vars.head_b));
    outputs.push_back(s);
    if (ed.distance_channels) remaining = remaining - s * travel;
    prev = s;
  }
  return outputs;
}

namespace {

// Gate weights stacked as [f; i; o; g] for the tape-free single-trip path.
struct PackedCell {
  Eigen::MatrixXd ws;
  Eigen::MatrixXd wh;
  Eigen::VectorXd b;
  Eigen::VectorXd z;
};

Eigen::MatrixXd to_eigen(const Tensor& w) {
  Eigen::MatrixXd m(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) m(r, c) = w.at(r, c);
  return m;
}

PackedCell pack(const LstmCellParams& p) {
  const auto h = static_cast<Eigen::Index>(p.hidden_size());
  PackedCell c;
  c.ws.resize(4 * h, p.input_dim());
  c.wh.resize(4 * h, h);
  c.b.resize(4 * h);
  const Tensor* ws[] = {&p.w_sf, &p.w_si, &p.w_so, &p.w_gs};
  const Tensor* wh[] = {&p.w_hf, &p.w_hi, &p.w_ho, &p.w_gh};
  const Tensor* bs[] = {&p.b_f, &p.b_i, &p.b_o, &p.b_c};
  for (Eigen::Index k = 0; k < 4; ++k) {
    c.ws.middleRows(k * h, h) = to_eigen(*ws[k]);
    c.wh.middleRows(k * h, h) = to_eigen(*wh[k]);
    for (Eigen::Index j = 0; j < h; ++j) c.b(k * h + j) = (*bs[k])[j];
  }
  return c;
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void step(PackedCell& c, const Eigen::VectorXd& s, Eigen::VectorXd& h, Eigen::VectorXd& u) {
  const Eigen::Index n = h.size();
  c.z.noalias() = c.ws * s;
  c.z.noalias() += c.wh * h;
  c.z += c.b;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double f = sigmoid_value(c.z(j));
    const double i = sigmoid_value(c.z(n + j));
    const double o = sigmoid_value(c.z(2 * n + j));
    const double g = std::tanh(c.z(3 * n + j));
    u(j) = f * u(j) + i * g;
    h(j) = o * std::tanh(u(j));
  }
}

}  // namespace

Tensor encode(const EncoderDecoder& ed, std::span<const double> speeds,
              const SequenceContext& context) {
  if (speeds.empty()) throw ContractError("encode: empty trip");
  ed.validate();
  const std::size_t layers = ed.layers();
  const auto hidden = static_cast<Eigen::Index>(ed.hidden_size());
  std::vector<PackedCell> cells;
  for (const auto& c : ed.encoder) cells.push_back(pack(c));
  std::vector<Eigen::VectorXd> h(layers, Eigen::VectorXd::Zero(hidden));
  std::vector<Eigen::VectorXd> u(layers, Eigen::VectorXd::Zero(hidden));

  const Tensor inputs = encoder_inputs(ed, speeds, context.total_distance);
  Eigen::VectorXd x(inputs.cols());
  for (std::size_t t = 0; t < speeds.size(); ++t) {
    for (std::size_t c = 0; c < inputs.cols(); ++c) x(c) = inputs.at(t, c);
    for (std::size_t l = 0; l < layers; ++l) {
      step(cells[l], l == 0 ? x : h[l - 1], h[l], u[l]);
    }
  }
  Tensor out({ed.latent_dim()});
  std::size_t k = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    for (Eigen::Index j = 0; j < hidden; ++j) out[k++] = h[l](j);
    for (Eigen::Index j = 0; j < hidden; ++j) out[k++] = u[l](j);
  }
  return out;
}

std::vector<double> decode(const EncoderDecoder& ed, const Tensor& latent, std::size_t n,
                           const SequenceContext& context) {
  if (n < 1) throw ContractError("decode: target length must be at least 1");
  ed.validate();
  if (latent.size() != ed.latent_dim()) {
    throw ShapeError("decode: latent has " + std::to_string(latent.size()) + " entries, expected " +
                     std::to_string(ed.latent_dim()));
  }
  if (context.condition.size() != ed.condition_dim) {
    throw ShapeError("decode: condition has " + std::to_string(context.condition.size()) +
                     " entries, expected " + std::to_string(ed.condition_dim));
  }
  const std::size_t layers = ed.layers();
  const auto hidden = static_cast<Eigen::Index>(ed.hidden_size());
  std::vector<PackedCell> cells;
  for (const auto& c : ed.decoder) cells.push_back(pack(c));
  std::vector<Eigen::VectorXd> h(layers, Eigen::VectorXd(hidden));
  std::vector<Eigen::VectorXd> u(layers, Eigen::VectorXd(hidden));
  std::size_t k = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    for (Eigen::Index j = 0; j < hidden; ++j) h[l](j) = latent[k++];
    for (Eigen::Index j = 0; j < hidden; ++j) u[l](j) = latent[k++];
  }
  Eigen::RowVectorXd head(hidden);
  for (Eigen::Index j = 0; j < hidden; ++j) head(j) = ed.head_w[j];

  const double total = context.total_distance / ed.distance_scale;
  const double travel = ed.speed_scale / ed.distance_scale;
  double remaining = total;
  double prev = 0.0;
  Eigen::VectorXd x(ed.decoder_input_dim());
  std::vector<double> speeds;
  speeds.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    Eigen::Index c = 0;
    x(c++) = prev;
    if (ed.distance_channels) {
      x(c++) = remaining;
      x(c++) = total;
    }
    for (double v : context.condition) x(c++) = v;
    for (std::size_t l = 0; l < layers; ++l) step(cells[l], l == 0 ? x : h[l - 1], h[l], u[l]);
    const double s = std::max(0.0, head.dot(h[layers - 1]) + ed.head_b[0]);
    speeds.push_back(s * ed.speed_scale);
    if (ed.distance_channels) remaining = remaining - s * travel;
    prev = s;
  }
  return speeds;
}

}  // namespace trajgen::nn

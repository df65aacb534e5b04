#pragma once

#include <string>
#include <utility>
#include <vector>

#include "devid/rng.hpp"
#include "devid/tensor.hpp"

namespace devid {

struct ParamRef {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<ParamRef>;

struct BufferRef {
  std::string name;
  std::vector<real>* data;
};
using BufferList = std::vector<BufferRef>;

// Glorot-style uniform init, limit sqrt(6 / (fan_in + fan_out)).
void glorot_fill(Tensor& t, int fan_in, int fan_out, Rng& rng);

// ---- dense ------------------------------------------------------------

struct Dense {
  enum class Act { linear, relu };
  Tensor w; // (out, in)
  Tensor b; // (out)
  Act act = Act::linear;
  int in = 0, out = 0;

  static Dense init(int in, int out, Act act, Rng& rng);
  Tensor forward(const Tensor& x) const;      // (in) -> (out)
  Tensor forward_rows(const Tensor& x) const; // (rows, in) -> (rows, out)
  void collect(const std::string& prefix, ParamList& params);
};

// ---- batch norm ---------------------------------------------------------

struct BatchNorm1d {
  Tensor scale; // (C)
  Tensor shift; // (C)
  std::vector<real> running_mean, running_var;
  real momentum = real(0.1);
  real eps = real(1e-5);
  int channels = 0;

  static BatchNorm1d init(int channels);
  // Normalizes the last axis' channels over all leading axes. Training mode
  // uses batch statistics; if `observed` is given the running-stat EMA is
  // deferred to apply_stats, otherwise it happens here.
  Tensor forward(const Tensor& x, bool training, BnBatchStats* observed = nullptr);
  void apply_stats(const BnBatchStats& stats);
  void collect(const std::string& prefix, ParamList& params);
  void collect_buffers(const std::string& prefix, BufferList& buffers);
};

// ---- 1-D ConvLSTM ---------------------------------------------------------
// Input-to-state convolutions are strided/valid and define the output
// spatial length; state-to-state convolutions are stride-1 zero-padded so
// the hidden state keeps that length. Gate peepholes are per-cell Hadamard
// weights; the output gate peeks at the current cell state.

struct ConvLstm1d {
  int filters = 0, kernel = 0, stride = 0;
  int in_len = 0, in_ch = 0, out_len = 0;
  Tensor wx;   // (4F, K, Cin), gate order [i | f | g | o]
  Tensor wh;   // (4F, K, F)
  Tensor bias; // (4F), forget block +1
  Tensor peep_i, peep_f, peep_o; // (out_len, F)

  static ConvLstm1d init(int in_len, int in_ch, int filters, int kernel, int stride,
                         Rng& rng);
  std::pair<Tensor, Tensor> step(const Tensor& x_t, const Tensor& h_prev,
                                 const Tensor& c_prev) const;
  Tensor forward(const Tensor& seq) const; // (T, L, Cin) -> (T, out_len, F)
  void collect(const std::string& prefix, ParamList& params);
};

// ---- LSTM / BiLSTM -------------------------------------------------------

struct Lstm {
  int units = 0, in_dim = 0;
  Tensor wx;   // (4U, in), gate order [i | f | g | o]
  Tensor wh;   // (4U, U)
  Tensor bias; // (4U), forget block +1

  static Lstm init(int in_dim, int units, Rng& rng);
  std::pair<Tensor, Tensor> step(const Tensor& x_t, const Tensor& h_prev,
                                 const Tensor& c_prev) const;
  // Hidden state of the last time step.
  Tensor last_hidden(const Tensor& seq, bool reverse_time) const; // (T,D) -> (U)
  void collect(const std::string& prefix, ParamList& params);
};

struct BiLstm {
  Lstm fwd, bwd;
  int units = 0;

  static BiLstm init(int in_dim, int units, Rng& rng);
  // concat(forward last hidden, backward last hidden) -> (2U)
  Tensor forward(const Tensor& seq) const;
  void collect(const std::string& prefix, ParamList& params);
};

// ---- attention -------------------------------------------------------------

// softmax(Q K^T / sqrt(d_k)) V
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

struct MultiHeadAttention {
  int heads = 0, d_model = 0, d_k = 0;
  std::vector<Tensor> wq, wk, wv; // per head (d_model, d_k)
  Tensor wo;                      // (heads * d_k, d_model)

  static MultiHeadAttention init(int d_model, int heads, int d_k, Rng& rng);
  Tensor forward(const Tensor& x) const; // (T, d_model) -> (T, d_model)
  void collect(const std::string& prefix, ParamList& params);
};

// ---- layer norm -------------------------------------------------------------
// Normalizes all H activations of the layer jointly (population variance,
// eps under the root), then applies elementwise gain and bias.

struct LayerNorm {
  Tensor gain, bias;
  int width = 0;
  real eps = real(1e-6);

  static LayerNorm init(int width);
  Tensor forward(const Tensor& x) const; // any shape with numel == width
  void collect(const std::string& prefix, ParamList& params);
};

// ---- transformer encoder block ----------------------------------------------
// Post-norm residual block with the leading LN omitted:
//   h   = LN1(x + MultiHead(x))
//   out = LN2(h + FF2(relu(FF1(h))))

struct EncoderBlock {
  MultiHeadAttention attn;
  LayerNorm ln1, ln2;
  Dense ff1; // (d_model -> ff_units), relu
  Dense ff2; // (ff_units -> d_model), linear
  int tokens = 0, d_model = 0;

  static EncoderBlock init(int tokens, int d_model, int heads, int d_k, int ff_units,
                           Rng& rng);
  Tensor forward(const Tensor& x) const; // (tokens, d_model)
  void collect(const std::string& prefix, ParamList& params);
};

// Fixed sinusoidal positional encoding table, shape (tokens, d_model).
Tensor sinusoidal_positions(int tokens, int d_model);

} // namespace devid

#include "devid/layers.hpp"

#include <cmath>

namespace devid {

void glorot_fill(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  for (real& v : t.value()) v = real(rng.uniform(-limit, limit));
}

// ---- Dense -----------------------------------------------------------------

Dense Dense::init(int in, int out, Act act, Rng& rng) {
  Dense d;
  d.in = in;
  d.out = out;
  d.act = act;
  d.w = Tensor({out, in});
  glorot_fill(d.w, in, out, rng);
  d.b = Tensor({out});
  d.w.set_requires_grad(true);
  d.b.set_requires_grad(true);
  return d;
}

Tensor Dense::forward(const Tensor& x) const {
  Tensor y = add(matvec(w, x), b);
  return act == Act::relu ? relu(y) : y;
}

Tensor Dense::forward_rows(const Tensor& x) const {
  Tensor y = add_bias(matmul(x, transpose(w)), b);
  return act == Act::relu ? relu(y) : y;
}

void Dense::collect(const std::string& prefix, ParamList& params) {
  params.push_back({prefix + ".w", w});
  params.push_back({prefix + ".b", b});
}

// ---- BatchNorm1d ------------------------------------------------------------

BatchNorm1d BatchNorm1d::init(int channels) {
  BatchNorm1d bn;
  bn.channels = channels;
  bn.scale = Tensor({channels}, real(1));
  bn.shift = Tensor({channels});
  bn.scale.set_requires_grad(true);
  bn.shift.set_requires_grad(true);
  bn.running_mean.assign(std::size_t(channels), real(0));
  bn.running_var.assign(std::size_t(channels), real(1));
  return bn;
}

Tensor BatchNorm1d::forward(const Tensor& x, bool training, BnBatchStats* observed) {
  if (training && observed) {
    // stats reported to the caller; EMA applied later via apply_stats
    return batch_norm(x, scale, shift, nullptr, nullptr, momentum, eps, true, observed);
  }
  return batch_norm(x, scale, shift, &running_mean, &running_var, momentum, eps,
                    training, observed);
}

void BatchNorm1d::apply_stats(const BnBatchStats& stats) {
  for (int c = 0; c < channels; ++c) {
    running_mean[std::size_t(c)] =
        (real(1) - momentum) * running_mean[std::size_t(c)] + momentum * stats.mean[std::size_t(c)];
    running_var[std::size_t(c)] =
        (real(1) - momentum) * running_var[std::size_t(c)] + momentum * stats.var[std::size_t(c)];
  }
}

void BatchNorm1d::collect(const std::string& prefix, ParamList& params) {
  params.push_back({prefix + ".scale", scale});
  params.push_back({prefix + ".shift", shift});
}

void BatchNorm1d::collect_buffers(const std::string& prefix, BufferList& buffers) {
  buffers.push_back({prefix + ".running_mean", &running_mean});
  buffers.push_back({prefix + ".running_var", &running_var});
}

// ---- ConvLstm1d --------------------------------------------------------------

ConvLstm1d ConvLstm1d::init(int in_len, int in_ch, int filters, int kernel, int stride,
                            Rng& rng) {
  if (in_len < kernel) throw ShapeError("convlstm: input shorter than kernel");
  if (kernel % 2 == 0) throw ConfigError("convlstm: kernel width must be odd");
  ConvLstm1d l;
  l.filters = filters;
  l.kernel = kernel;
  l.stride = stride;
  l.in_len = in_len;
  l.in_ch = in_ch;
  l.out_len = (in_len - kernel) / stride + 1;

  // (K, Cin, F) kernel layout, gate blocks [i | f | g | o] along F
  l.wx = Tensor({kernel, in_ch, 4 * filters});
  l.wh = Tensor({kernel, filters, 4 * filters});
  l.bias = Tensor({4 * filters});
  glorot_fill(l.wx, kernel * in_ch, kernel * filters, rng);
  glorot_fill(l.wh, kernel * filters, kernel * filters, rng);
  for (int f = 0; f < filters; ++f) l.bias.value()[std::size_t(filters + f)] = real(1);

  const double peep_limit = std::sqrt(3.0 / double(filters));
  for (Tensor* p : {&l.peep_i, &l.peep_f, &l.peep_o}) {
    *p = Tensor({l.out_len, filters});
    for (real& v : p->value()) v = real(rng.uniform(-peep_limit, peep_limit));
    p->set_requires_grad(true);
  }
  l.wx.set_requires_grad(true);
  l.wh.set_requires_grad(true);
  l.bias.set_requires_grad(true);
  return l;
}

std::pair<Tensor, Tensor> ConvLstm1d::step(const Tensor& x_t, const Tensor& h_prev,
                                           const Tensor& c_prev) const {
  if (x_t.rank() != 2 || x_t.dim(0) != in_len || x_t.dim(1) != in_ch)
    throw ShapeError("convlstm step: bad input shape");
  if (h_prev.dim(0) != out_len || c_prev.dim(0) != out_len)
    throw ShapeError("convlstm step: bad state shape");
  const int f = filters;
  Tensor pre = add_bias(add(conv1d_valid(x_t, wx, stride), conv1d_same(h_prev, wh)), bias);
  Tensor i = sigmoid(add(slice(pre, 1, 0, f), hadamard(peep_i, c_prev)));
  Tensor fg = sigmoid(add(slice(pre, 1, f, f), hadamard(peep_f, c_prev)));
  Tensor g = tanh(slice(pre, 1, 2 * f, f));
  Tensor c = add(hadamard(fg, c_prev), hadamard(i, g));
  Tensor o = sigmoid(add(slice(pre, 1, 3 * f, f), hadamard(peep_o, c)));
  Tensor h = hadamard(o, tanh(c));
  return {h, c};
}

Tensor ConvLstm1d::forward(const Tensor& seq) const {
  if (seq.rank() != 3 || seq.dim(1) != in_len || seq.dim(2) != in_ch)
    throw ShapeError("convlstm forward: need (T, L, Cin)");
  const int t_len = seq.dim(0);
  Tensor h({out_len, filters});
  Tensor c({out_len, filters});
  std::vector<Tensor> outputs;
  outputs.reserve(std::size_t(t_len));
  for (int t = 0; t < t_len; ++t) {
    Tensor x_t = reshape(slice(seq, 0, t, 1), {in_len, in_ch});
    auto [hn, cn] = step(x_t, h, c);
    h = hn;
    c = cn;
    outputs.push_back(reshape(h, {1, out_len * filters}));
  }
  return reshape(concat(outputs, 0), {t_len, out_len, filters});
}

void ConvLstm1d::collect(const std::string& prefix, ParamList& params) {
  params.push_back({prefix + ".wx", wx});
  params.push_back({prefix + ".wh", wh});
  params.push_back({prefix + ".bias", bias});
  params.push_back({prefix + ".peep_i", peep_i});
  params.push_back({prefix + ".peep_f", peep_f});
  params.push_back({prefix + ".peep_o", peep_o});
}

// ---- Lstm / BiLstm ------------------------------------------------------------

Lstm Lstm::init(int in_dim, int units, Rng& rng) {
  Lstm l;
  l.units = units;
  l.in_dim = in_dim;
  l.wx = Tensor({4 * units, in_dim});
  l.wh = Tensor({4 * units, units});
  l.bias = Tensor({4 * units});
  for (int g = 0; g < 4; ++g) {
    Tensor bx({units, in_dim});
    glorot_fill(bx, in_dim, units, rng);
    std::copy(bx.value().begin(), bx.value().end(),
              l.wx.value().begin() + std::size_t(g) * units * in_dim);
    Tensor bh({units, units});
    glorot_fill(bh, units, units, rng);
    std::copy(bh.value().begin(), bh.value().end(),
              l.wh.value().begin() + std::size_t(g) * units * units);
  }
  for (int u = 0; u < units; ++u) l.bias.value()[std::size_t(units + u)] = real(1);
  l.wx.set_requires_grad(true);
  l.wh.set_requires_grad(true);
  l.bias.set_requires_grad(true);
  return l;
}

std::pair<Tensor, Tensor> Lstm::step(const Tensor& x_t, const Tensor& h_prev,
                                     const Tensor& c_prev) const {
  Tensor pre = add(add(matvec(wx, x_t), matvec(wh, h_prev)), bias);
  Tensor i = sigmoid(slice(pre, 0, 0, units));
  Tensor f = sigmoid(slice(pre, 0, units, units));
  Tensor g = tanh(slice(pre, 0, 2 * units, units));
  Tensor o = sigmoid(slice(pre, 0, 3 * units, units));
  Tensor c = add(hadamard(f, c_prev), hadamard(i, g));
  Tensor h = hadamard(o, tanh(c));
  return {h, c};
}

Tensor Lstm::last_hidden(const Tensor& seq, bool reverse_time) const {
  if (seq.rank() != 2 || seq.dim(1) != in_dim)
    throw ShapeError("lstm: need (T, in_dim)");
  const int t_len = seq.dim(0);
  Tensor h({units});
  Tensor c({units});
  for (int s = 0; s < t_len; ++s) {
    const int t = reverse_time ? t_len - 1 - s : s;
    Tensor x_t = reshape(slice(seq, 0, t, 1), {in_dim});
    auto [hn, cn] = step(x_t, h, c);
    h = hn;
    c = cn;
  }
  return h;
}

void Lstm::collect(const std::string& prefix, ParamList& params) {
  params.push_back({prefix + ".wx", wx});
  params.push_back({prefix + ".wh", wh});
  params.push_back({prefix + ".bias", bias});
}

BiLstm BiLstm::init(int in_dim, int units, Rng& rng) {
  BiLstm b;
  b.units = units;
  b.fwd = Lstm::init(in_dim, units, rng);
  b.bwd = Lstm::init(in_dim, units, rng);
  return b;
}

Tensor BiLstm::forward(const Tensor& seq) const {
  Tensor hf = fwd.last_hidden(seq, false);
  Tensor hb = bwd.last_hidden(seq, true);
  return concat({hf, hb}, 0);
}

void BiLstm::collect(const std::string& prefix, ParamList& params) {
  fwd.collect(prefix + ".fwd", params);
  bwd.collect(prefix + ".bwd", params);
}

// ---- attention -----------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("attention: rank-2 inputs required");
  if (q.dim(1) != k.dim(1)) throw ShapeError("attention: Q/K width mismatch");
  if (k.dim(0) != v.dim(0)) throw ShapeError("attention: K/V token count mismatch");
  const real scale = real(1.0 / std::sqrt(double(q.dim(1))));
  Tensor scores = scalar_mul(matmul(q, transpose(k)), scale);
  return matmul(row_softmax(scores), v);
}

MultiHeadAttention MultiHeadAttention::init(int d_model, int heads, int d_k, Rng& rng) {
  MultiHeadAttention m;
  m.heads = heads;
  m.d_model = d_model;
  m.d_k = d_k;
  for (int h = 0; h < heads; ++h) {
    for (auto* bank : {&m.wq, &m.wk, &m.wv}) {
      Tensor w({d_model, d_k});
      glorot_fill(w, d_model, d_k, rng);
      w.set_requires_grad(true);
      bank->push_back(w);
    }
  }
  m.wo = Tensor({heads * d_k, d_model});
  glorot_fill(m.wo, heads * d_k, d_model, rng);
  m.wo.set_requires_grad(true);
  return m;
}

Tensor MultiHeadAttention::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != d_model)
    throw ShapeError("multi_head_attention: need (T, d_model)");
  std::vector<Tensor> head_outs;
  head_outs.reserve(std::size_t(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor q = matmul(x, wq[std::size_t(h)]);
    Tensor k = matmul(x, wk[std::size_t(h)]);
    Tensor v = matmul(x, wv[std::size_t(h)]);
    head_outs.push_back(attention(q, k, v));
  }
  return matmul(concat(head_outs, 1), wo);
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& params) {
  for (int h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    params.push_back({hp + ".wq", wq[std::size_t(h)]});
    params.push_back({hp + ".wk", wk[std::size_t(h)]});
    params.push_back({hp + ".wv", wv[std::size_t(h)]});
  }
  params.push_back({prefix + ".wo", wo});
}

// ---- layer norm -------------------------------------------------------------------

LayerNorm LayerNorm::init(int width) {
  LayerNorm ln;
  ln.width = width;
  ln.gain = Tensor({width}, real(1));
  ln.bias = Tensor({width});
  ln.gain.set_requires_grad(true);
  ln.bias.set_requires_grad(true);
  return ln;
}

Tensor LayerNorm::forward(const Tensor& x) const {
  if (x.numel() != std::size_t(width)) throw ShapeError("layer_norm: width mismatch");
  Tensor flat = reshape(x, {width});
  return reshape(layer_norm(flat, gain, bias, eps), x.shape());
}

void LayerNorm::collect(const std::string& prefix, ParamList& params) {
  params.push_back({prefix + ".gain", gain});
  params.push_back({prefix + ".bias", bias});
}

// ---- encoder block -----------------------------------------------------------------

EncoderBlock EncoderBlock::init(int tokens, int d_model, int heads, int d_k, int ff_units,
                                Rng& rng) {
  EncoderBlock e;
  e.tokens = tokens;
  e.d_model = d_model;
  e.attn = MultiHeadAttention::init(d_model, heads, d_k, rng);
  e.ln1 = LayerNorm::init(tokens * d_model);
  e.ln2 = LayerNorm::init(tokens * d_model);
  e.ff1 = Dense::init(d_model, ff_units, Dense::Act::relu, rng);
  e.ff2 = Dense::init(ff_units, d_model, Dense::Act::linear, rng);
  return e;
}

Tensor EncoderBlock::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(0) != tokens || x.dim(1) != d_model)
    throw ShapeError("encoder block: bad input shape");
  Tensor h = ln1.forward(add(x, attn.forward(x)));
  Tensor ff = ff2.forward_rows(ff1.forward_rows(h));
  return ln2.forward(add(h, ff));
}

void EncoderBlock::collect(const std::string& prefix, ParamList& params) {
  attn.collect(prefix + ".attn", params);
  ln1.collect(prefix + ".ln1", params);
  ln2.collect(prefix + ".ln2", params);
  ff1.collect(prefix + ".ff1", params);
  ff2.collect(prefix + ".ff2", params);
}

// ---- positional encoding -------------------------------------------------------------

Tensor sinusoidal_positions(int tokens, int d_model) {
  Tensor pe({tokens, d_model});
  for (int pos = 0; pos < tokens; ++pos)
    for (int i = 0; i < d_model; ++i) {
      const double angle = pos / std::pow(10000.0, double(2 * (i / 2)) / double(d_model));
      pe.value()[std::size_t(pos) * d_model + i] =
          real((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

} // namespace devid

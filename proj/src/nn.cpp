#include "pointseg/nn.hpp"

#include <cmath>

#include "pointseg/rng.hpp"

namespace pointseg::nn {

namespace {

std::int64_t fan_in_of(const Shape& s) {
  // conv [cout,cin,kh,kw] -> cin*kh*kw; linear [in,out] -> in
  if (s.size() == 4) return s[1] * s[2] * s[3];
  if (s.size() == 2) return s[0];
  return s.back();
}

void init_values(Tensor& t, Init init, std::uint64_t seed, const std::string& name) {
  switch (init) {
    case Init::zeros:
      t.fill(0.0);
      return;
    case Init::ones:
      t.fill(1.0);
      return;
    case Init::fan_in_uniform: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in_of(t.shape())));
      rng::Stream s(seed, name);
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = s.uniform(static_cast<std::uint64_t>(i), -bound, bound);
      return;
    }
    case Init::trunc_normal: {
      rng::Stream s(seed, name);
      std::uint64_t c = 0;
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        double z;
        do {
          z = s.gaussian(c++);
        } while (std::fabs(z) > 2.0);
        t[i] = 0.02 * z;
      }
      return;
    }
  }
}

bool g_grad_enabled = true;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Parameter& ParamStore::create(const std::string& name, Shape shape, Init init) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (it->second->value.shape() != shape)
      throw ConfigError("parameter '" + name + "' re-created with a different shape");
    return *it->second;
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor(shape);
  p->grad = Tensor(shape);
  init_values(p->value, init, init_seed_, name);
  Parameter& ref = *p;
  params_.emplace(name, std::move(p));
  return ref;
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : it->second.get();
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : it->second.get();
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [k, p] : params_) n += p->value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [k, p] : params_) p->grad.fill(0.0);
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& [k, p] : params_)
    if (k.rfind(prefix, 0) == 0) p->trainable = trainable;
}

std::uint64_t ParamStore::content_hash(const std::string& prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, p] : params_) {
    if (k.rfind(prefix, 0) != 0) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = static_cast<std::size_t>(p->value.numel()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

ag::Var pvar(ag::Tape& t, Parameter& p) {
  if (p.trainable && grad_enabled()) return t.param(p.value, p.grad);
  return t.leaf(p.value, false);
}

Linear Linear::create(ParamStore& ps, const std::string& name, std::int64_t in,
                      std::int64_t out, Init init, bool bias) {
  Linear l;
  l.w = &ps.create(name + ".weight", Shape{in, out}, init);
  if (bias) l.b = &ps.create(name + ".bias", Shape{out}, Init::zeros);
  return l;
}

ag::Var Linear::operator()(ag::Tape& t, ag::Var x) const {
  const Shape xs = x.shape();
  const std::int64_t in = w->value.dim(0), out = w->value.dim(1);
  ag::Var x2 = ag::reshape(x, Shape{x.val().numel() / in, in});
  ag::Var y = ag::matmul(x2, pvar(t, *w));
  if (b) y = ag::add_bias(y, pvar(t, *b));
  Shape os = xs;
  os.back() = out;
  return ag::reshape(y, os);
}

LayerNorm LayerNorm::create(ParamStore& ps, const std::string& name, std::int64_t dim) {
  LayerNorm ln;
  ln.gamma = &ps.create(name + ".gamma", Shape{dim}, Init::ones);
  ln.beta = &ps.create(name + ".beta", Shape{dim}, Init::zeros);
  return ln;
}

ag::Var LayerNorm::operator()(ag::Tape& t, ag::Var x) const {
  return ag::layer_norm(x, pvar(t, *gamma), pvar(t, *beta));
}

Mha Mha::create(ParamStore& ps, const std::string& name, std::int64_t dim, int heads) {
  if (dim % heads != 0) throw ConfigError("attention dim must divide heads: " + name);
  Mha m;
  m.heads = heads;
  m.dim = dim;
  m.wq = Linear::create(ps, name + ".wq", dim, dim);
  m.wk = Linear::create(ps, name + ".wk", dim, dim);
  m.wv = Linear::create(ps, name + ".wv", dim, dim);
  m.wo = Linear::create(ps, name + ".wo", dim, dim);
  return m;
}

ag::Var Mha::operator()(ag::Tape& t, ag::Var q, ag::Var k, ag::Var v) const {
  if (q.shape().size() != 3 || k.shape().size() != 3)
    throw ConfigError("attention expects [B,L,d] inputs");
  const std::int64_t b = q.dim(0), lq = q.dim(1), lk = k.dim(1);
  const std::int64_t dh = dim / heads;
  auto split = [&](ag::Var x, std::int64_t len) {
    // [b, len, d] -> [b*heads, len, dh]
    return ag::reshape(ag::permute(ag::reshape(x, Shape{b, len, heads, dh}), {0, 2, 1, 3}),
                       Shape{b * heads, len, dh});
  };
  ag::Var qh = split(wq(t, q), lq);
  ag::Var kh = split(wk(t, k), lk);
  ag::Var vh = split(wv(t, v), lk);
  ag::Var logits = ag::scale(ag::matmul(qh, ag::permute(kh, {0, 2, 1})),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  ag::Var attn = ag::softmax_last(logits);
  ag::Var out = ag::matmul(attn, vh);  // [b*heads, lq, dh]
  out = ag::reshape(out, Shape{b, heads, lq, dh});
  out = ag::reshape(ag::permute(out, {0, 2, 1, 3}), Shape{b, lq, dim});
  return wo(t, out);
}

AttnBlock AttnBlock::create(ParamStore& ps, const std::string& name, std::int64_t dim,
                            int heads) {
  AttnBlock b;
  b.ln_q = LayerNorm::create(ps, name + ".ln_q", dim);
  b.ln_kv = LayerNorm::create(ps, name + ".ln_kv", dim);
  b.attn = Mha::create(ps, name + ".attn", dim, heads);
  return b;
}

ag::Var AttnBlock::operator()(ag::Tape& t, ag::Var x, ag::Var kv, ag::Var pos_q,
                              ag::Var pos_kv) const {
  ag::Var qn = ln_q(t, x);
  ag::Var kn = ln_kv(t, kv);
  ag::Var qi = pos_q.defined() ? ag::add(qn, pos_q) : qn;
  ag::Var ki = pos_kv.defined() ? ag::add(kn, pos_kv) : kn;
  return ag::add(x, attn(t, qi, ki, kn));
}

MlpBlock MlpBlock::create(ParamStore& ps, const std::string& name, std::int64_t dim,
                          std::int64_t hidden) {
  MlpBlock m;
  m.ln = LayerNorm::create(ps, name + ".ln", dim);
  m.fc1 = Linear::create(ps, name + ".fc1", dim, hidden);
  m.fc2 = Linear::create(ps, name + ".fc2", hidden, dim);
  return m;
}

ag::Var MlpBlock::operator()(ag::Tape& t, ag::Var x) const {
  return ag::add(x, fc2(t, ag::relu(fc1(t, ln(t, x)))));
}

}  // namespace pointseg::nn

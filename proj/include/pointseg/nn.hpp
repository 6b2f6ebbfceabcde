#pragma once
// Parameter store and the small set of layer modules the models share.
//
// Parameters are created under stable dotted names and initialized as a
// pure function of (init seed, name), so model weights do not depend on
// construction order. The store iterates in name order everywhere, which
// keeps optimizer updates and checkpoints deterministic.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pointseg/autodiff.hpp"
#include "pointseg/tensor.hpp"

namespace pointseg::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

enum class Init { zeros, ones, fan_in_uniform, trunc_normal };

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

  Parameter& create(const std::string& name, Shape shape, Init init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  template <typename F>
  void for_each(F&& f) {
    for (auto& [k, p] : params_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& [k, p] : params_) f(*p);
  }

  std::size_t size() const { return params_.size(); }
  std::int64_t total_elements() const;

  void zero_grad();
  void set_trainable(const std::string& prefix, bool trainable);
  // FNV-1a over the raw bytes of every parameter value under `prefix`,
  // in name order. Used to assert the stage-2 freeze contract.
  std::uint64_t content_hash(const std::string& prefix = "") const;

  std::uint64_t init_seed() const { return init_seed_; }

 private:
  std::uint64_t init_seed_;
  std::map<std::string, std::unique_ptr<Parameter>> params_;
};

// Whether forward passes should register gradients for trainable
// parameters. Off during evaluation to skip graph construction.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

// Parameter as a tape variable.
ag::Var pvar(ag::Tape& t, Parameter& p);

struct Linear {
  Parameter* w = nullptr;  // [in, out]
  Parameter* b = nullptr;  // [out], optional
  static Linear create(ParamStore& ps, const std::string& name, std::int64_t in,
                       std::int64_t out, Init init = Init::trunc_normal,
                       bool bias = true);
  ag::Var operator()(ag::Tape& t, ag::Var x) const;
  std::int64_t in_dim() const { return w->value.dim(0); }
  std::int64_t out_dim() const { return w->value.dim(1); }
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  static LayerNorm create(ParamStore& ps, const std::string& name, std::int64_t dim);
  ag::Var operator()(ag::Tape& t, ag::Var x) const;
};

struct Mha {
  Linear wq, wk, wv, wo;
  int heads = 1;
  std::int64_t dim = 0;
  static Mha create(ParamStore& ps, const std::string& name, std::int64_t dim, int heads);
  // Batched: q [B,Lq,d], k/v [B,Lk,d]. Positional terms are added by the
  // caller.
  ag::Var operator()(ag::Tape& t, ag::Var q, ag::Var k, ag::Var v) const;
};

// Pre-norm residual attention block. Positional encodings are added to
// queries and keys only; values stay clean.
struct AttnBlock {
  LayerNorm ln_q, ln_kv;
  Mha attn;
  static AttnBlock create(ParamStore& ps, const std::string& name, std::int64_t dim,
                          int heads);
  // x [B,Lq,d], kv [B,Lk,d]; pos_* may be undefined.
  ag::Var operator()(ag::Tape& t, ag::Var x, ag::Var kv, ag::Var pos_q,
                     ag::Var pos_kv) const;
};

// Pre-norm residual two-layer MLP block.
struct MlpBlock {
  LayerNorm ln;
  Linear fc1, fc2;
  static MlpBlock create(ParamStore& ps, const std::string& name, std::int64_t dim,
                         std::int64_t hidden);
  ag::Var operator()(ag::Tape& t, ag::Var x) const;
};

}  // namespace pointseg::nn

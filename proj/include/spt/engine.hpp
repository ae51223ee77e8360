// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "spt/adapter.hpp"
#include "spt/errors.hpp"
#include "spt/model.hpp"
#include "spt/tensor.hpp"
#include "spt/vocab.hpp"

namespace spt {

// Per-layer key/value store. Single-owner; append-only.
template <class T>
struct KvCache {
  std::vector<Matrix<T>> k;  // per layer [S x d]
  std::vector<Matrix<T>> v;
  int filled = 0;
  // Which adapter state produced the cached entries: "", "base", "adapter",
  // or "mixed". Guards against reusing a perturbed cache as a base prefix.
  std::string provenance;

  static KvCache make(const Arch& arch) {
    KvCache c;
    c.k.resize(arch.layers);
    c.v.resize(arch.layers);
    for (int l = 0; l < arch.layers; ++l) {
      c.k[l] = Matrix<T>(arch.max_seq, arch.dim);
      c.v[l] = Matrix<T>(arch.max_seq, arch.dim);
    }
    return c;
  }
};

template <class T>
struct ForwardTrace {
  Matrix<T> logits;                  // [new_positions x V]
  std::map<int, Matrix<T>> residuals;  // layer index -> [new_positions x d]
};

namespace detail {

// Layernorm over one row. Statistics run over `inc` dims only (all dims when
// the model has no reserved slice); outputs are produced for every dim.
template <class T>
inline void ln_row(const T* x, const T* g, const T* b, T* out, int d,
                   const std::vector<int>& inc, T* mean_out = nullptr, T* inv_out = nullptr) {
  const T eps = T(1e-5);
  T mean = 0;
  for (int j : inc) mean += x[j];
  mean /= static_cast<T>(inc.size());
  T var = 0;
  for (int j : inc) {
    const T dlt = x[j] - mean;
    var += dlt * dlt;
  }
  var /= static_cast<T>(inc.size());
  const T inv = T(1) / std::sqrt(var + eps);
  for (int j = 0; j < d; ++j) out[j] = g[j] * ((x[j] - mean) * inv) + b[j];
  if (mean_out) *mean_out = mean;
  if (inv_out) *inv_out = inv;
}

template <class T>
inline std::vector<int> included_dims(const ModelParams<T>& p) {
  std::vector<int> inc;
  if (p.reserved_dims.empty()) {
    inc.resize(static_cast<std::size_t>(p.arch.dim));
    for (int j = 0; j < p.arch.dim; ++j) inc[static_cast<std::size_t>(j)] = j;
  } else {
    std::vector<char> reserved(static_cast<std::size_t>(p.arch.dim), 0);
    for (int d : p.reserved_dims) reserved[static_cast<std::size_t>(d)] = 1;
    for (int j = 0; j < p.arch.dim; ++j)
      if (!reserved[static_cast<std::size_t>(j)]) inc.push_back(j);
  }
  return inc;
}

template <class T>
inline void check_tokens(const ModelParams<T>& p, const TokenSeq& tokens, int cache_filled) {
  if (cache_filled + static_cast<int>(tokens.size()) > p.arch.max_seq)
    fail(Errc::SequenceTooLong, "sequence of " + std::to_string(cache_filled + tokens.size()) +
                                    " exceeds max " + std::to_string(p.arch.max_seq));
  for (TokenId t : tokens)
    if (t < 0 || t >= p.arch.vocab) fail(Errc::TokenOutOfRange, std::to_string(t));
}

}  // namespace detail

// Causal forward over `tokens`, continuing from `cache` when given (the cache
// is extended in place). trace_layers: 0 = embedding output, l = residual
// stream after block l.
template <class T>
inline ForwardTrace<T> forward(const ModelParams<T>& params, const AdapterContext<T>& ctx,
                               const TokenSeq& tokens, KvCache<T>* cache = nullptr,
                               const std::set<int>& trace_layers = {}) {
  const Arch& arch = params.arch;
  const int base = cache ? cache->filled : 0;
  detail::check_tokens(params, tokens, base);
  for (int l : trace_layers)
    if (l < 0 || l > arch.layers) fail(Errc::OutOfRange, "trace layer " + std::to_string(l));

  const int n = static_cast<int>(tokens.size());
  const int d = arch.dim;
  const int hd = arch.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const std::vector<int> inc = detail::included_dims(params);

  KvCache<T> scratch;
  if (!cache) {
    scratch = KvCache<T>::make(arch);
    cache = &scratch;
  }

  ForwardTrace<T> out;
  Matrix<T> x(n, d);
  for (int i = 0; i < n; ++i) {
    const T* te = params.tok_emb.row(tokens[static_cast<std::size_t>(i)]);
    const T* pe = params.pos_emb.row(base + i);
    T* xr = x.row(i);
    for (int j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
  }
  if (trace_layers.count(0)) out.residuals[0] = x;

  Matrix<T> xn(n, d), q(n, d), k(n, d), v(n, d), att(n, d), proj(n, d);
  Matrix<T> h(n, arch.ff), mlp(n, d);
  std::vector<T> scores(static_cast<std::size_t>(arch.max_seq));

  for (int l = 0; l < arch.layers; ++l) {
    const LayerParams<T>& lp = params.layers[static_cast<std::size_t>(l)];
    const std::string pre = "layer" + std::to_string(l) + ".attn.";
    for (int i = 0; i < n; ++i)
      detail::ln_row(x.row(i), lp.ln1_g.row(0), lp.ln1_b.row(0), xn.row(i), d, inc);
    adapted_matmul(xn, lp.wq, pre + "wq", ctx, base, q);
    adapted_matmul(xn, lp.wk, pre + "wk", ctx, base, k);
    adapted_matmul(xn, lp.wv, pre + "wv", ctx, base, v);
    for (int i = 0; i < n; ++i) {
      std::copy(k.row(i), k.row(i) + d, cache->k[static_cast<std::size_t>(l)].row(base + i));
      std::copy(v.row(i), v.row(i) + d, cache->v[static_cast<std::size_t>(l)].row(base + i));
    }
    const Matrix<T>& ck = cache->k[static_cast<std::size_t>(l)];
    const Matrix<T>& cv = cache->v[static_cast<std::size_t>(l)];
    for (int i = 0; i < n; ++i) {
      const int p = base + i;
      T* orow = att.row(i);
      for (int head = 0; head < arch.heads; ++head) {
        const int off = head * hd;
        const T* qv = q.row(i) + off;
        T maxs = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= p; ++j) {
          const T s = dot(qv, ck.row(j) + off, hd) * scale;
          scores[static_cast<std::size_t>(j)] = s;
          if (s > maxs) maxs = s;
        }
        T denom = 0;
        for (int j = 0; j <= p; ++j) {
          const T e = std::exp(scores[static_cast<std::size_t>(j)] - maxs);
          scores[static_cast<std::size_t>(j)] = e;
          denom += e;
        }
        const T dinv = T(1) / denom;
        for (int j = 0; j < hd; ++j) orow[off + j] = T(0);
        for (int j = 0; j <= p; ++j)
          axpy(scores[static_cast<std::size_t>(j)] * dinv, cv.row(j) + off, orow + off, hd);
      }
    }
    adapted_matmul(att, lp.wo, pre + "wo", ctx, base, proj);
    for (std::size_t j = 0; j < x.data.size(); ++j) x.data[j] += proj.data[j];

    for (int i = 0; i < n; ++i)
      detail::ln_row(x.row(i), lp.ln2_g.row(0), lp.ln2_b.row(0), xn.row(i), d, inc);
    matmul(xn, lp.w1, h);
    for (auto& hv : h.data) hv = hv > T(0) ? hv : T(0);
    matmul(h, lp.w2, mlp);
    for (std::size_t j = 0; j < x.data.size(); ++j) x.data[j] += mlp.data[j];
    if (trace_layers.count(l + 1)) out.residuals[l + 1] = x;
  }

  for (int i = 0; i < n; ++i)
    detail::ln_row(x.row(i), params.lnf_g.row(0), params.lnf_b.row(0), xn.row(i), d, inc);
  out.logits = Matrix<T>(n, arch.vocab);
  matmul(xn, params.unembed, out.logits);
  cache->filled += n;
  {
    const char* tag = ctx.any_active() ? "adapter" : "base";
    if (cache->provenance.empty()) cache->provenance = tag;
    else if (cache->provenance != tag) cache->provenance = "mixed";
  }
  return out;
}

struct SamplePolicy {
  bool greedy = true;
  double temperature = 0.0;
  std::uint64_t seed = 0;

  static SamplePolicy make_greedy() { return {}; }
  static SamplePolicy make_temperature(double t, std::uint64_t seed) {
    return {t <= 0.0, t, seed};
  }
};

// Greedy or temperature sampling; SP_TOKEN is masked out of the distribution.
// Returns generated tokens, ending with EOT or at the length cap.
template <class T>
inline TokenSeq sample(const ModelParams<T>& params, const AdapterContext<T>& ctx,
                       const TokenSeq& prompt, const SamplePolicy& policy, int max_new = -1,
                       KvCache<T>* cache = nullptr) {
  const Arch& arch = params.arch;
  const TokenId eot = static_cast<TokenId>(Special::Eot);
  const TokenId sp = static_cast<TokenId>(Special::SpToken);
  KvCache<T> scratch;
  int consumed = 0;
  if (!cache) {
    scratch = KvCache<T>::make(arch);
    cache = &scratch;
  } else {
    consumed = cache->filled;
  }
  if (consumed + static_cast<int>(prompt.size()) + 1 > arch.max_seq)
    fail(Errc::SequenceTooLong, "no room to generate");
  Rng rng(policy.seed);
  ForwardTrace<T> tr = forward(params, ctx, prompt, cache);
  TokenSeq out;
  const int cap = max_new < 0 ? arch.max_seq : max_new;
  while (static_cast<int>(out.size()) < cap && cache->filled < arch.max_seq) {
    const T* logits = tr.logits.row(tr.logits.rows - 1);
    TokenId next = 0;
    if (policy.greedy || policy.temperature <= 0.0) {
      T best = -std::numeric_limits<T>::infinity();
      for (int t = 0; t < arch.vocab; ++t) {
        if (t == sp) continue;
        if (logits[t] > best) {
          best = logits[t];
          next = t;
        }
      }
    } else {
      std::vector<double> p(static_cast<std::size_t>(arch.vocab));
      double maxl = -std::numeric_limits<double>::infinity();
      for (int t = 0; t < arch.vocab; ++t) {
        if (t == sp) continue;
        maxl = std::max(maxl, static_cast<double>(logits[t]) / policy.temperature);
      }
      double denom = 0;
      for (int t = 0; t < arch.vocab; ++t) {
        const double e = t == sp ? 0.0
                                 : std::exp(static_cast<double>(logits[t]) / policy.temperature - maxl);
        p[static_cast<std::size_t>(t)] = e;
        denom += e;
      }
      const double u = rng.uniform() * denom;
      double acc = 0;
      next = arch.vocab - 1;
      for (int t = 0; t < arch.vocab; ++t) {
        acc += p[static_cast<std::size_t>(t)];
        if (u < acc) {
          next = t;
          break;
        }
      }
      if (next == sp) next = eot;  // unreachable; defensive against p underflow
    }
    out.push_back(next);
    if (next == eot) break;
    if (cache->filled >= arch.max_seq) break;
    tr = forward(params, ctx, TokenSeq{next}, cache);
  }
  return out;
}

// Review-phase forward under the LoRA-mask: the adapter is inactive on all
// positions before SP_TOKEN, so the prefix may be recomputed (path a) or
// served from the base model's KV cache (path b) with bit-identical logits at
// positions >= sp_index. Returns logits (and requested residual traces) for
// positions >= sp_index only.
template <class T>
inline ForwardTrace<T> masked_review_forward(const ModelParams<T>& params,
                                             const LoraAdapter<T>& adapter,
                                             const TokenSeq& full_tokens, int sp_index,
                                             KvCache<T>* reuse_cache = nullptr,
                                             const std::set<int>& trace_layers = {}) {
  if (sp_index < 0 || sp_index >= static_cast<int>(full_tokens.size()) ||
      full_tokens[static_cast<std::size_t>(sp_index)] != static_cast<TokenId>(Special::SpToken))
    fail(Errc::MissingSpToken, "full_tokens[sp_index] must be SP_TOKEN");
  const AdapterContext<T> ctx = AdapterContext<T>::with(adapter, sp_index);
  if (reuse_cache) {
    if (reuse_cache->filled != sp_index)
      fail(Errc::CacheMismatch, "cache holds " + std::to_string(reuse_cache->filled) +
                                    " positions, expected " + std::to_string(sp_index));
    if (sp_index > 0 && reuse_cache->provenance != "base")
      fail(Errc::CacheMismatch, "cache was not produced by the base model (provenance '" +
                                    reuse_cache->provenance + "')");
    const TokenSeq suffix(full_tokens.begin() + sp_index, full_tokens.end());
    return forward(params, ctx, suffix, reuse_cache, trace_layers);
  }
  ForwardTrace<T> tr =
      forward(params, ctx, full_tokens, static_cast<KvCache<T>*>(nullptr), trace_layers);
  const int n = static_cast<int>(full_tokens.size()) - sp_index;
  ForwardTrace<T> out;
  out.logits = Matrix<T>(n, tr.logits.cols);
  for (int i = 0; i < n; ++i)
    std::copy(tr.logits.row(sp_index + i), tr.logits.row(sp_index + i) + tr.logits.cols,
              out.logits.row(i));
  for (const auto& [l, m] : tr.residuals) {
    Matrix<T> s(n, m.cols);
    for (int i = 0; i < n; ++i)
      std::copy(m.row(sp_index + i), m.row(sp_index + i) + m.cols, s.row(i));
    out.residuals[l] = std::move(s);
  }
  return out;
}

enum class TrainableSet { Base, AdapterOnly };

template <class T>
struct LossGrads {
  double loss = 0.0;
  std::map<std::string, Matrix<T>> grads;
};

namespace detail {

template <class T>
struct LayerActs {
  Matrix<T> res_in;
  Matrix<T> xn1;
  std::vector<T> ln1_mean, ln1_inv;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // per head [n x n]
  Matrix<T> att;
  Matrix<T> res_mid;
  Matrix<T> xn2;
  std::vector<T> ln2_mean, ln2_inv;
  Matrix<T> h_act;  // post-relu
};

// dL/dy for y = ln(x): accumulates into dx; dg/db optional.
template <class T>
inline void ln_backward_row(const T* x, const T* g, const T* dy, T mean, T inv, T* dx, int d,
                            const std::vector<int>& inc, T* dg, T* db) {
  const T m = static_cast<T>(inc.size());
  // dxh_j = g_j dy_j ; xh_j = (x_j - mean) inv
  T sum_dxh = 0;
  T sum_dxh_xh = 0;
  for (int j = 0; j < d; ++j) {
    const T xh = (x[j] - mean) * inv;
    const T dxh = g[j] * dy[j];
    sum_dxh += dxh;
    sum_dxh_xh += dxh * xh;
    if (dg) dg[j] += dy[j] * xh;
    if (db) db[j] += dy[j];
  }
  // dvar and dmean terms distribute over included dims only
  for (int j = 0; j < d; ++j) {
    const T xh = (x[j] - mean) * inv;
    const T dxh = g[j] * dy[j];
    T dxj = dxh * inv;
    bool included = true;
    if (static_cast<int>(inc.size()) != d) {
      included = false;
      for (int q2 : inc)
        if (q2 == j) {
          included = true;
          break;
        }
    }
    if (included) dxj += (-inv / m) * sum_dxh + (-inv / m) * xh * sum_dxh_xh;
    dx[j] += dxj;
  }
}

template <class T>
inline Matrix<T>& grad_slot(std::map<std::string, Matrix<T>>& grads, const std::string& name,
                            int rows, int cols) {
  auto it = grads.find(name);
  if (it == grads.end()) it = grads.emplace(name, Matrix<T>(rows, cols)).first;
  return it->second;
}

// Backward of adapted_matmul: y = x W (+ masked lora delta).
template <class T>
inline void adapted_matmul_backward(const Matrix<T>& x, const Matrix<T>& w,
                                    const std::string& target, const AdapterContext<T>& ctx,
                                    int first_pos, const Matrix<T>& dy, Matrix<T>& dx,
                                    std::map<std::string, Matrix<T>>& grads, bool base_trainable,
                                    bool adapter_trainable) {
  if (base_trainable) {
    Matrix<T>& dw = grad_slot(grads, target, w.rows, w.cols);
    matmul_tn_acc(x, dy, dw);
  }
  {
    Matrix<T> tmp;
    matmul_nt(dy, w, tmp);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += tmp.data[i];
  }
  if (!ctx.any_active()) return;
  auto it = ctx.adapter->targets.find(target);
  if (it == ctx.adapter->targets.end()) fail(Errc::UnknownTarget, target);
  const LoraTarget<T>& t = it->second;
  const T s = ctx.adapter->scaling();
  const int r = t.a.cols;
  std::vector<T> xa(static_cast<std::size_t>(r)), dyb(static_cast<std::size_t>(r));
  Matrix<T>* da = nullptr;
  Matrix<T>* db = nullptr;
  if (adapter_trainable) {
    da = &grad_slot(grads, target + ".A", t.a.rows, t.a.cols);
    db = &grad_slot(grads, target + ".B", t.b.rows, t.b.cols);
  }
  for (int i = 0; i < x.rows; ++i) {
    if (!ctx.active_at(first_pos + i)) continue;
    const T* xrow = x.row(i);
    const T* dyrow = dy.row(i);
    for (int kk = 0; kk < r; ++kk) {
      T acc = 0;
      for (int j = 0; j < x.cols; ++j) acc += xrow[j] * t.a.at(j, kk);
      xa[static_cast<std::size_t>(kk)] = acc;
      T acc2 = 0;
      const T* brow = t.b.row(kk);
      for (int j = 0; j < dy.cols; ++j) acc2 += dyrow[j] * brow[j];
      dyb[static_cast<std::size_t>(kk)] = acc2;
    }
    if (db) {
      for (int kk = 0; kk < r; ++kk) {
        const T coef = s * xa[static_cast<std::size_t>(kk)];
        T* dbrow = db->row(kk);
        for (int j = 0; j < dy.cols; ++j) dbrow[j] += coef * dyrow[j];
      }
    }
    if (da) {
      for (int j = 0; j < x.cols; ++j) {
        T* darow = da->row(j);
        const T xj = s * xrow[j];
        for (int kk = 0; kk < r; ++kk) darow[kk] += xj * dyb[static_cast<std::size_t>(kk)];
      }
    }
    T* dxrow = dx.row(i);
    for (int j = 0; j < x.cols; ++j) {
      T acc = 0;
      const T* arow = t.a.row(j);
      for (int kk = 0; kk < r; ++kk) acc += arow[kk] * dyb[static_cast<std::size_t>(kk)];
      dxrow[j] += s * acc;
    }
  }
}

}  // namespace detail

// Mean cross-entropy over masked positions plus gradients for the trainable
// set. mask[t] marks token t as a prediction target (scored from logits at
// t-1); gradients exist only for trainable tensors.
template <class T>
inline LossGrads<T> loss_and_grads(const ModelParams<T>& params, const AdapterContext<T>& ctx,
                                   const TokenSeq& tokens, const std::vector<bool>& target_mask,
                                   TrainableSet trainable = TrainableSet::Base) {
  const Arch& arch = params.arch;
  detail::check_tokens(params, tokens, 0);
  if (target_mask.size() != tokens.size())
    fail(Errc::ShapeMismatch, "target_mask length != tokens length");
  int n_targets = 0;
  for (std::size_t t = 1; t < target_mask.size(); ++t)
    if (target_mask[t]) ++n_targets;
  if (n_targets == 0) fail(Errc::EmptyTargetMask, "no scorable target positions");
  const bool base_trainable = trainable == TrainableSet::Base;
  const bool adapter_trainable = trainable == TrainableSet::AdapterOnly;
  if (adapter_trainable && !ctx.any_active())
    fail(Errc::ConfigInvalid, "adapter-only training requires an enabled adapter");

  const int n = static_cast<int>(tokens.size());
  const int d = arch.dim;
  const int hd = arch.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const std::vector<int> inc = detail::included_dims(params);

  // ---- forward, retaining activations ----
  std::vector<detail::LayerActs<T>> acts(static_cast<std::size_t>(arch.layers));
  Matrix<T> x(n, d);
  for (int i = 0; i < n; ++i) {
    const T* te = params.tok_emb.row(tokens[static_cast<std::size_t>(i)]);
    const T* pe = params.pos_emb.row(i);
    T* xr = x.row(i);
    for (int j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
  }
  for (int l = 0; l < arch.layers; ++l) {
    auto& A = acts[static_cast<std::size_t>(l)];
    const LayerParams<T>& lp = params.layers[static_cast<std::size_t>(l)];
    const std::string pre = "layer" + std::to_string(l) + ".attn.";
    A.res_in = x;
    A.xn1 = Matrix<T>(n, d);
    A.ln1_mean.resize(static_cast<std::size_t>(n));
    A.ln1_inv.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      detail::ln_row(x.row(i), lp.ln1_g.row(0), lp.ln1_b.row(0), A.xn1.row(i), d, inc,
                     &A.ln1_mean[static_cast<std::size_t>(i)],
                     &A.ln1_inv[static_cast<std::size_t>(i)]);
    A.q = Matrix<T>(n, d);
    A.k = Matrix<T>(n, d);
    A.v = Matrix<T>(n, d);
    adapted_matmul(A.xn1, lp.wq, pre + "wq", ctx, 0, A.q);
    adapted_matmul(A.xn1, lp.wk, pre + "wk", ctx, 0, A.k);
    adapted_matmul(A.xn1, lp.wv, pre + "wv", ctx, 0, A.v);
    A.probs.assign(static_cast<std::size_t>(arch.heads), Matrix<T>(n, n));
    A.att = Matrix<T>(n, d);
    for (int i = 0; i < n; ++i) {
      T* orow = A.att.row(i);
      for (int head = 0; head < arch.heads; ++head) {
        const int off = head * hd;
        Matrix<T>& pm = A.probs[static_cast<std::size_t>(head)];
        const T* qv = A.q.row(i) + off;
        T maxs = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          const T s = dot(qv, A.k.row(j) + off, hd) * scale;
          pm.at(i, j) = s;
          if (s > maxs) maxs = s;
        }
        T denom = 0;
        for (int j = 0; j <= i; ++j) {
          const T e = std::exp(pm.at(i, j) - maxs);
          pm.at(i, j) = e;
          denom += e;
        }
        const T dinv = T(1) / denom;
        for (int j = 0; j < hd; ++j) orow[off + j] = T(0);
        for (int j = 0; j <= i; ++j) {
          pm.at(i, j) *= dinv;
          axpy(pm.at(i, j), A.v.row(j) + off, orow + off, hd);
        }
      }
    }
    Matrix<T> proj(n, d);
    adapted_matmul(A.att, lp.wo, pre + "wo", ctx, 0, proj);
    for (std::size_t j = 0; j < x.data.size(); ++j) x.data[j] += proj.data[j];
    A.res_mid = x;
    A.xn2 = Matrix<T>(n, d);
    A.ln2_mean.resize(static_cast<std::size_t>(n));
    A.ln2_inv.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      detail::ln_row(x.row(i), lp.ln2_g.row(0), lp.ln2_b.row(0), A.xn2.row(i), d, inc,
                     &A.ln2_mean[static_cast<std::size_t>(i)],
                     &A.ln2_inv[static_cast<std::size_t>(i)]);
    A.h_act = Matrix<T>(n, arch.ff);
    matmul(A.xn2, lp.w1, A.h_act);
    for (auto& hv : A.h_act.data) hv = hv > T(0) ? hv : T(0);
    Matrix<T> mlp(n, d);
    matmul(A.h_act, lp.w2, mlp);
    for (std::size_t j = 0; j < x.data.size(); ++j) x.data[j] += mlp.data[j];
  }
  Matrix<T> res_final = x;
  Matrix<T> xnf(n, d);
  std::vector<T> lnf_mean(static_cast<std::size_t>(n)), lnf_inv(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    detail::ln_row(x.row(i), params.lnf_g.row(0), params.lnf_b.row(0), xnf.row(i), d, inc,
                   &lnf_mean[static_cast<std::size_t>(i)], &lnf_inv[static_cast<std::size_t>(i)]);
  Matrix<T> logits(n, arch.vocab);
  matmul(xnf, params.unembed, logits);

  // ---- loss + dlogits ----
  LossGrads<T> out;
  Matrix<T> dlogits(n, arch.vocab);
  double loss = 0.0;
  const double wgt = 1.0 / n_targets;
  for (int t = 1; t < n; ++t) {
    if (!target_mask[static_cast<std::size_t>(t)]) continue;
    const int i = t - 1;  // predict token t from logits at t-1
    const TokenId tgt = tokens[static_cast<std::size_t>(t)];
    const T* lrow = logits.row(i);
    T maxl = lrow[0];
    for (int j = 1; j < arch.vocab; ++j) maxl = std::max(maxl, lrow[j]);
    double denom = 0;
    for (int j = 0; j < arch.vocab; ++j) denom += std::exp(static_cast<double>(lrow[j] - maxl));
    const double logz = std::log(denom) + static_cast<double>(maxl);
    loss += (logz - static_cast<double>(lrow[tgt])) * wgt;
    T* drow = dlogits.row(i);
    for (int j = 0; j < arch.vocab; ++j) {
      const double p = std::exp(static_cast<double>(lrow[j]) - logz);
      drow[j] += static_cast<T>(p * wgt);
    }
    drow[tgt] -= static_cast<T>(wgt);
  }
  out.loss = loss;

  // ---- backward ----
  auto& grads = out.grads;
  Matrix<T> dx(n, d);
  if (base_trainable) {
    Matrix<T>& dwu = detail::grad_slot(grads, std::string("unembed"), d, arch.vocab);
    matmul_tn_acc(xnf, dlogits, dwu);
  }
  Matrix<T> dxnf;
  matmul_nt(dlogits, params.unembed, dxnf);
  {
    T* dg = nullptr;
    T* db = nullptr;
    if (base_trainable) {
      dg = detail::grad_slot(grads, std::string("final_ln.g"), 1, d).row(0);
      db = detail::grad_slot(grads, std::string("final_ln.b"), 1, d).row(0);
    }
    for (int i = 0; i < n; ++i)
      detail::ln_backward_row(res_final.row(i), params.lnf_g.row(0), dxnf.row(i),
                              lnf_mean[static_cast<std::size_t>(i)],
                              lnf_inv[static_cast<std::size_t>(i)], dx.row(i), d, inc, dg, db);
  }

  for (int l = arch.layers - 1; l >= 0; --l) {
    auto& A = acts[static_cast<std::size_t>(l)];
    const LayerParams<T>& lp = params.layers[static_cast<std::size_t>(l)];
    const std::string lpre = "layer" + std::to_string(l) + ".";
    const std::string apre = lpre + "attn.";
    // MLP: res_out = res_mid + relu(xn2 w1) w2
    Matrix<T> dh(n, arch.ff);
    matmul_nt(dx, lp.w2, dh);
    if (base_trainable) {
      Matrix<T>& dw2 = detail::grad_slot(grads, lpre + "mlp.w2", arch.ff, d);
      matmul_tn_acc(A.h_act, dx, dw2);
    }
    for (std::size_t j = 0; j < dh.data.size(); ++j)
      if (A.h_act.data[j] <= T(0)) dh.data[j] = T(0);
    Matrix<T> dxn2(n, d);
    matmul_nt(dh, lp.w1, dxn2);
    if (base_trainable) {
      Matrix<T>& dw1 = detail::grad_slot(grads, lpre + "mlp.w1", d, arch.ff);
      matmul_tn_acc(A.xn2, dh, dw1);
    }
    {
      T* dg = nullptr;
      T* db = nullptr;
      if (base_trainable) {
        dg = detail::grad_slot(grads, lpre + "ln2.g", 1, d).row(0);
        db = detail::grad_slot(grads, lpre + "ln2.b", 1, d).row(0);
      }
      for (int i = 0; i < n; ++i)
        detail::ln_backward_row(A.res_mid.row(i), lp.ln2_g.row(0), dxn2.row(i),
                                A.ln2_mean[static_cast<std::size_t>(i)],
                                A.ln2_inv[static_cast<std::size_t>(i)], dx.row(i), d, inc, dg, db);
    }
    // attention: res_mid = res_in + adapted(att, wo)
    Matrix<T> datt(n, d);
    detail::adapted_matmul_backward(A.att, lp.wo, apre + "wo", ctx, 0, dx, datt, grads,
                                    base_trainable, adapter_trainable);
    Matrix<T> dq(n, d), dk(n, d), dv(n, d);
    std::vector<T> dp(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int head = 0; head < arch.heads; ++head) {
        const int off = head * hd;
        const Matrix<T>& pm = A.probs[static_cast<std::size_t>(head)];
        const T* dorow = datt.row(i) + off;
        T dsum = 0;
        for (int j = 0; j <= i; ++j) {
          const T dpj = dot(dorow, A.v.row(j) + off, hd);
          dp[static_cast<std::size_t>(j)] = dpj;
          dsum += dpj * pm.at(i, j);
          axpy(pm.at(i, j), dorow, dv.row(j) + off, hd);
        }
        for (int j = 0; j <= i; ++j) {
          const T ds = pm.at(i, j) * (dp[static_cast<std::size_t>(j)] - dsum) * scale;
          axpy(ds, A.k.row(j) + off, dq.row(i) + off, hd);
          axpy(ds, A.q.row(i) + off, dk.row(j) + off, hd);
        }
      }
    }
    Matrix<T> dxn1(n, d);
    detail::adapted_matmul_backward(A.xn1, lp.wq, apre + "wq", ctx, 0, dq, dxn1, grads,
                                    base_trainable, adapter_trainable);
    detail::adapted_matmul_backward(A.xn1, lp.wk, apre + "wk", ctx, 0, dk, dxn1, grads,
                                    base_trainable, adapter_trainable);
    detail::adapted_matmul_backward(A.xn1, lp.wv, apre + "wv", ctx, 0, dv, dxn1, grads,
                                    base_trainable, adapter_trainable);
    {
      T* dg = nullptr;
      T* db = nullptr;
      if (base_trainable) {
        dg = detail::grad_slot(grads, lpre + "ln1.g", 1, d).row(0);
        db = detail::grad_slot(grads, lpre + "ln1.b", 1, d).row(0);
      }
      for (int i = 0; i < n; ++i)
        detail::ln_backward_row(A.res_in.row(i), lp.ln1_g.row(0), dxn1.row(i),
                                A.ln1_mean[static_cast<std::size_t>(i)],
                                A.ln1_inv[static_cast<std::size_t>(i)], dx.row(i), d, inc, dg, db);
    }
  }

  if (base_trainable) {
    Matrix<T>& dtok = detail::grad_slot(grads, std::string("embed.tok"), arch.vocab, d);
    Matrix<T>& dpos = detail::grad_slot(grads, std::string("embed.pos"), arch.max_seq, d);
    for (int i = 0; i < n; ++i) {
      axpy(T(1), dx.row(i), dtok.row(tokens[static_cast<std::size_t>(i)]), d);
      axpy(T(1), dx.row(i), dpos.row(i), d);
    }
  }
  return out;
}

}  // namespace spt

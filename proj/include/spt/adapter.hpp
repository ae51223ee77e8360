// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "spt/errors.hpp"
#include "spt/model.hpp"
#include "spt/tensor.hpp"

namespace spt {

// Low-rank factor pair for one base matrix: delta(x) = s * (x A) B.
// B starts at zero so a freshly created adapter is a no-op.
template <class T>
struct LoraTarget {
  Matrix<T> a;  // [d x r]
  Matrix<T> b;  // [r x cols_of_base]
};

template <class T>
struct LoraAdapter {
  int rank = 8;
  T alpha = 16;  // scaling s = alpha / rank
  std::map<std::string, LoraTarget<T>> targets;

  T scaling() const { return alpha / static_cast<T>(rank); }

  static std::vector<std::string> default_target_names(const Arch& arch) {
    std::vector<std::string> names;
    for (int i = 0; i < arch.layers; ++i) {
      const std::string pre = "layer" + std::to_string(i) + ".attn.";
      names.push_back(pre + "wq");
      names.push_back(pre + "wk");
      names.push_back(pre + "wv");
      names.push_back(pre + "wo");
    }
    return names;
  }

  // Attention projections in every layer, A gaussian, B zero.
  static LoraAdapter init(const Arch& arch, int rank, T alpha, std::uint64_t seed) {
    if (rank < 1 || rank >= arch.dim) fail(Errc::ConfigInvalid, "lora rank out of range");
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    Rng rng(seed);
    for (const auto& name : default_target_names(arch)) {
      LoraTarget<T> t;
      t.a = Matrix<T>::randn(arch.dim, rank, T(0.02), rng);
      t.b = Matrix<T>(rank, arch.dim);  // zero init
      ad.targets.emplace(name, std::move(t));
    }
    return ad;
  }

  template <class F>
  void for_each_tensor(F&& f) {
    for (auto& [name, t] : targets) {
      f(name + ".A", t.a);
      f(name + ".B", t.b);
    }
  }

  template <class F>
  void for_each_tensor(F&& f) const {
    for (const auto& [name, t] : targets) {
      f(name + ".A", t.a);
      f(name + ".B", t.b);
    }
  }
};

// Per-forward adapter state. mask_prefix < 0 means no per-token mask;
// mask_prefix = k zeroes the adapter contribution at absolute positions < k.
template <class T>
struct AdapterContext {
  const LoraAdapter<T>* adapter = nullptr;
  bool enabled = false;
  int mask_prefix = -1;

  bool active_at(int pos) const {
    return enabled && adapter != nullptr && (mask_prefix < 0 || pos >= mask_prefix);
  }
  bool any_active() const { return enabled && adapter != nullptr; }

  static AdapterContext disabled() { return {}; }
  static AdapterContext with(const LoraAdapter<T>& ad, int mask_prefix = -1) {
    return {&ad, true, mask_prefix};
  }
};

// y = x W, plus s * (x A) B on rows whose absolute position is adapter-active.
// Masked and disabled rows take the plain matmul path untouched.
template <class T>
inline void adapted_matmul(const Matrix<T>& x, const Matrix<T>& w, const std::string& target,
                           const AdapterContext<T>& ctx, int first_pos, Matrix<T>& y) {
  if (x.cols != w.rows) fail(Errc::ShapeMismatch, "adapted_matmul dims for " + target);
  matmul(x, w, y);
  if (!ctx.any_active()) return;
  auto it = ctx.adapter->targets.find(target);
  if (it == ctx.adapter->targets.end()) fail(Errc::UnknownTarget, target);
  const LoraTarget<T>& t = it->second;
  if (t.a.rows != x.cols || t.b.cols != w.cols || t.a.cols != t.b.rows)
    fail(Errc::ShapeMismatch, "lora factor dims for " + target);
  const T s = ctx.adapter->scaling();
  const int r = t.a.cols;
  std::vector<T> xa(static_cast<std::size_t>(r));
  for (int i = 0; i < x.rows; ++i) {
    if (!ctx.active_at(first_pos + i)) continue;
    const T* xrow = x.row(i);
    for (int k = 0; k < r; ++k) {
      T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
      int j = 0;
      const int jj = x.cols & ~3;
      const T* acol = t.a.data.data() + k;
      for (; j < jj; j += 4) {
        acc0 += xrow[j] * acol[static_cast<std::size_t>(j) * r];
        acc1 += xrow[j + 1] * acol[static_cast<std::size_t>(j + 1) * r];
        acc2 += xrow[j + 2] * acol[static_cast<std::size_t>(j + 2) * r];
        acc3 += xrow[j + 3] * acol[static_cast<std::size_t>(j + 3) * r];
      }
      T acc = ((acc0 + acc1) + (acc2 + acc3));
      for (; j < x.cols; ++j) acc += xrow[j] * acol[static_cast<std::size_t>(j) * r];
      xa[static_cast<std::size_t>(k)] = acc;
    }
    T* yrow = y.row(i);
    for (int k = 0; k < r; ++k) {
      const T v = s * xa[static_cast<std::size_t>(k)];
      const T* brow = t.b.row(k);
      for (int j = 0; j < y.cols; ++j) yrow[j] += v * brow[j];
    }
  }
}

// Neuron-reservation hybrid: a slice of residual dimensions set aside for the
// second personality, untouched by every base write path.
struct HybridReservation {
  double reserved_fraction = 0.0;
  std::vector<int> reserved_index_set;
};

inline HybridReservation make_reservation(const Arch& arch, double fraction) {
  if (!(fraction > 0.0 && fraction <= 0.25))
    fail(Errc::FractionOutOfRange, "reserved_fraction must be in (0, 0.25]");
  HybridReservation r;
  r.reserved_fraction = fraction;
  const int n = static_cast<int>(fraction * arch.dim);
  for (int i = arch.dim - n; i < arch.dim; ++i) r.reserved_index_set.push_back(i);
  return r;
}

// Zeroes the reserved slices in place according to params.reserved_dims.
// Training calls this after every base update so the reservation survives.
template <class T>
inline void enforce_reservation(ModelParams<T>& p) {
  if (p.reserved_dims.empty()) return;
  auto zero_col = [](Matrix<T>& m, int c) {
    for (int i = 0; i < m.rows; ++i) m.at(i, c) = T(0);
  };
  auto zero_row = [](Matrix<T>& m, int r) {
    for (int j = 0; j < m.cols; ++j) m.at(r, j) = T(0);
  };
  for (int d : p.reserved_dims) {
    zero_col(p.tok_emb, d);
    zero_col(p.pos_emb, d);
    for (auto& l : p.layers) {
      // write paths into the residual stream
      zero_col(l.wo, d);
      zero_col(l.w2, d);
      // read paths out of the residual stream
      zero_row(l.wq, d);
      zero_row(l.wk, d);
      zero_row(l.wv, d);
      zero_row(l.w1, d);
      l.ln1_g.at(0, d) = T(0);
      l.ln1_b.at(0, d) = T(0);
      l.ln2_g.at(0, d) = T(0);
      l.ln2_b.at(0, d) = T(0);
    }
    zero_row(p.unembed, d);
    p.lnf_g.at(0, d) = T(0);
    p.lnf_b.at(0, d) = T(0);
  }
}

// Zeroes reserved dims out of every base write path (embeddings, attention
// output columns, MLP output columns) and every base read path (projection
// input rows, unembed rows, layernorm gain/bias), and records the reserved
// set so norm statistics skip those dims. An empty index set is a no-op.
template <class T>
inline ModelParams<T> apply_hybrid_reservation(const ModelParams<T>& params,
                                               const HybridReservation& res) {
  if (!(res.reserved_fraction > 0.0 && res.reserved_fraction <= 0.25))
    fail(Errc::FractionOutOfRange, "reserved_fraction must be in (0, 0.25]");
  ModelParams<T> out = params;
  if (res.reserved_index_set.empty()) return out;
  for (int d : res.reserved_index_set) {
    if (d < 0 || d >= params.arch.dim) fail(Errc::OutOfRange, "reserved index out of range");
  }
  out.reserved_dims = res.reserved_index_set;
  enforce_reservation(out);
  return out;
}

}  // namespace spt

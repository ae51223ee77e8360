// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spt/errors.hpp"
#include "spt/tensor.hpp"

namespace spt {

struct Arch {
  int layers = 4;
  int dim = 128;
  int heads = 4;
  int ff = 512;
  int max_seq = 256;
  int vocab = 512;

  int head_dim() const { return dim / heads; }

  void validate() const {
    if (layers < 1 || dim < 1 || heads < 1 || ff < 1 || max_seq < 1 || vocab < 1)
      fail(Errc::ConfigInvalid, "arch fields must be positive");
    if (dim % heads != 0) fail(Errc::ConfigInvalid, "dim must be divisible by heads");
  }

  bool operator==(const Arch&) const = default;
};

// Pre-layernorm decoder block weights. Attention projections are bias-free;
// the two layernorms carry gain and bias.
template <class T>
struct LayerParams {
  Matrix<T> ln1_g, ln1_b;
  Matrix<T> wq, wk, wv, wo;
  Matrix<T> ln2_g, ln2_b;
  Matrix<T> w1, w2;
};

template <class T>
struct ModelParams {
  Arch arch;
  std::uint64_t rng_seed = 0;
  Matrix<T> tok_emb;  // [V x d]
  Matrix<T> pos_emb;  // [S x d], learned absolute positions
  std::vector<LayerParams<T>> layers;
  Matrix<T> lnf_g, lnf_b;
  Matrix<T> unembed;  // [d x V]
  std::string vocab_hash;
  // Residual dimensions reserved for the adapter-side hybrid mechanism.
  // Empty for normal models; layernorm statistics skip these dims when set.
  std::vector<int> reserved_dims;

  static ModelParams init(const Arch& a, std::uint64_t seed, const std::string& vhash = "") {
    a.validate();
    ModelParams p;
    p.arch = a;
    p.rng_seed = seed;
    p.vocab_hash = vhash;
    Rng rng(seed);
    const T emb_std = T(0.02);
    const T proj_std = T(0.02);
    p.tok_emb = Matrix<T>::randn(a.vocab, a.dim, emb_std, rng);
    p.pos_emb = Matrix<T>::randn(a.max_seq, a.dim, emb_std, rng);
    p.layers.resize(a.layers);
    for (auto& l : p.layers) {
      l.ln1_g = Matrix<T>(1, a.dim);
      l.ln1_g.fill(T(1));
      l.ln1_b = Matrix<T>(1, a.dim);
      l.wq = Matrix<T>::randn(a.dim, a.dim, proj_std, rng);
      l.wk = Matrix<T>::randn(a.dim, a.dim, proj_std, rng);
      l.wv = Matrix<T>::randn(a.dim, a.dim, proj_std, rng);
      l.wo = Matrix<T>::randn(a.dim, a.dim, proj_std, rng);
      l.ln2_g = Matrix<T>(1, a.dim);
      l.ln2_g.fill(T(1));
      l.ln2_b = Matrix<T>(1, a.dim);
      l.w1 = Matrix<T>::randn(a.dim, a.ff, proj_std, rng);
      l.w2 = Matrix<T>::randn(a.ff, a.dim, proj_std, rng);
    }
    p.lnf_g = Matrix<T>(1, a.dim);
    p.lnf_g.fill(T(1));
    p.lnf_b = Matrix<T>(1, a.dim);
    p.unembed = Matrix<T>::randn(a.dim, a.vocab, proj_std, rng);
    return p;
  }

  // Visits every tensor in a stable, serialization-defining order.
  template <class F>
  void for_each_tensor(F&& f) {
    f(std::string("embed.tok"), tok_emb);
    f(std::string("embed.pos"), pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "layer" + std::to_string(i) + ".";
      f(pre + "ln1.g", layers[i].ln1_g);
      f(pre + "ln1.b", layers[i].ln1_b);
      f(pre + "attn.wq", layers[i].wq);
      f(pre + "attn.wk", layers[i].wk);
      f(pre + "attn.wv", layers[i].wv);
      f(pre + "attn.wo", layers[i].wo);
      f(pre + "ln2.g", layers[i].ln2_g);
      f(pre + "ln2.b", layers[i].ln2_b);
      f(pre + "mlp.w1", layers[i].w1);
      f(pre + "mlp.w2", layers[i].w2);
    }
    f(std::string("final_ln.g"), lnf_g);
    f(std::string("final_ln.b"), lnf_b);
    f(std::string("unembed"), unembed);
  }

  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&](const std::string& n, Matrix<T>& m) { f(n, static_cast<const Matrix<T>&>(m)); });
  }

  Matrix<T>* tensor_by_name(const std::string& name) {
    Matrix<T>* out = nullptr;
    for_each_tensor([&](const std::string& n, Matrix<T>& m) {
      if (n == name) out = &m;
    });
    return out;
  }
};

using ModelParamsF = ModelParams<float>;

}  // namespace spt

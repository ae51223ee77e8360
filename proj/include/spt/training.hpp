// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "spt/checkpoint.hpp"
#include "spt/conversation.hpp"
#include "spt/engine.hpp"
#include "spt/errors.hpp"
#include "spt/hash.hpp"

namespace spt {

enum class Optimizer { AdamStyle, SgdMomentum };

struct TrainConfig {
  int steps = 200;
  int batch = 8;
  double lr = 3e-4;
  Optimizer opt = Optimizer::AdamStyle;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  int eval_every = 50;
  TrainableSet trainable = TrainableSet::Base;

  void validate() const {
    if (steps < 1 || batch < 1) fail(Errc::ConfigInvalid, "steps and batch must be positive");
    if (!(lr > 0.0)) fail(Errc::ConfigInvalid, "learning rate must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"steps", steps},
            {"batch", batch},
            {"lr", lr},
            {"optimizer", opt == Optimizer::AdamStyle ? "adam" : "sgd-momentum"},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},
            {"seed", seed},
            {"eval_every", eval_every},
            {"trainable", trainable == TrainableSet::Base ? "base" : "adapter-only"}};
  }
};

struct TrainSample {
  TokenSeq tokens;
  std::vector<bool> mask;
  int mask_prefix = -1;  // per-sample lora-mask boundary; -1 = adapter unmasked
};

inline std::string dataset_hash(const std::vector<TrainSample>& ds) {
  Hasher h;
  for (const auto& s : ds) {
    for (TokenId t : s.tokens) h.update_pod(t);
    for (bool b : s.mask) h.update_pod(static_cast<char>(b));
    h.update_pod(s.mask_prefix);
    h.update("\n", 1);
  }
  return h.hex();
}

// Append-only training-run record: config snapshot plus content hashes taken
// before the first step, then the loss curve as it happens.
struct RunManifest {
  nlohmann::json j;

  void record_eval(int step, double loss) {
    j["loss_curve"].push_back({{"step", step}, {"loss", loss}});
  }
  std::string dump(int indent = 2) const { return j.dump(indent); }
};

// Target mask per the sample layout: SPT samples score review+flag positions,
// plain conversations score the assistant segment (the organism recipe).
inline std::vector<bool> build_target_mask(const ConversationSample& sample) {
  std::vector<bool> mask(sample.tokens.size(), false);
  auto set_seg = [&](const Segment& s) {
    for (int i = s.start; i < s.start + s.len; ++i) mask[static_cast<std::size_t>(i)] = true;
  };
  if (sample.sp_index >= 0) {
    const Segment* review = sample.find(Role::Review);
    const Segment* flag = sample.find(Role::Flag);
    if (!review) fail(Errc::MissingSegment, "review");
    if (!flag) fail(Errc::MissingSegment, "flag");
    set_seg(*review);
    set_seg(*flag);
  } else {
    const Segment* asst = sample.find(Role::Assistant);
    if (!asst) fail(Errc::MissingSegment, "assistant");
    set_seg(*asst);
  }
  return mask;
}

namespace detail {

template <class T>
struct OptimizerState {
  std::map<std::string, Matrix<T>> m;  // first moment / momentum buffer
  std::map<std::string, Matrix<T>> v;  // second moment (adam)
  int step = 0;
};

template <class T>
inline Matrix<T>& state_slot(std::map<std::string, Matrix<T>>& s, const std::string& name,
                             const Matrix<T>& like) {
  auto it = s.find(name);
  if (it == s.end()) it = s.emplace(name, Matrix<T>(like.rows, like.cols)).first;
  return it->second;
}

}  // namespace detail

// Optimizer loop shared by base pretraining, organism training, and persona
// (adapter-only) training. Mutates only tensors in cfg.trainable; returns the
// run manifest with hashes recorded before the first update.
inline RunManifest train(ModelParamsF& params, LoraAdapter<float>* adapter,
                         const std::vector<TrainSample>& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) fail(Errc::EmptyDataset, "training dataset is empty");
  if (cfg.trainable == TrainableSet::AdapterOnly && adapter == nullptr)
    fail(Errc::ConfigInvalid, "adapter-only training requires an adapter");
  for (const auto& s : dataset)
    if (static_cast<int>(s.tokens.size()) > params.arch.max_seq)
      fail(Errc::SequenceTooLong, "training sample exceeds max_seq");

  RunManifest manifest;
  manifest.j["config"] = cfg.to_json();
  manifest.j["dataset_hash"] = dataset_hash(dataset);
  manifest.j["base_checkpoint_hash"] = model_hash(params);
  if (adapter) manifest.j["adapter_hash"] = adapter_hash(*adapter);
  manifest.j["loss_curve"] = nlohmann::json::array();

  const TokenId pad = static_cast<TokenId>(Special::Pad);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();  // triggers shuffle on first step

  detail::OptimizerState<float> opt;
  double last_loss = 0.0;

  for (int step = 0; step < cfg.steps; ++step) {
    // assemble batch, padded to the longest sample; PAD is excluded from loss
    std::vector<const TrainSample*> batch;
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor >= order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&dataset[order[cursor++]]);
    }
    std::size_t max_len = 0;
    for (const auto* s : batch) max_len = std::max(max_len, s->tokens.size());

    std::map<std::string, Matrix<float>> grads;
    double batch_loss = 0.0;
    long total_targets = 0;
    for (const auto* s : batch) {
      int cnt = 0;
      for (std::size_t t = 1; t < s->mask.size(); ++t)
        if (s->mask[t]) ++cnt;
      total_targets += cnt;
    }
    if (total_targets == 0) fail(Errc::EmptyTargetMask, "batch has no target positions");

    for (const auto* s : batch) {
      TokenSeq toks = s->tokens;
      std::vector<bool> mask = s->mask;
      toks.resize(max_len, pad);
      mask.resize(max_len, false);
      AdapterContext<float> ctx;
      if (adapter) ctx = AdapterContext<float>::with(*adapter, s->mask_prefix);
      LossGrads<float> lg = loss_and_grads(params, ctx, toks, mask, cfg.trainable);
      int cnt = 0;
      for (std::size_t t = 1; t < s->mask.size(); ++t)
        if (s->mask[t]) ++cnt;
      const float w = static_cast<float>(cnt) / static_cast<float>(total_targets);
      batch_loss += lg.loss * w;
      for (auto& [name, g] : lg.grads) {
        auto it = grads.find(name);
        if (it == grads.end()) it = grads.emplace(name, Matrix<float>(g.rows, g.cols)).first;
        for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += w * g.data[i];
      }
    }
    if (!std::isfinite(batch_loss))
      fail(Errc::NonFiniteLoss, "step " + std::to_string(step) + " loss=" +
                                    std::to_string(batch_loss));
    last_loss = batch_loss;

    // global-norm clip
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (float v : g.data) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    const float clip =
        (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? static_cast<float>(cfg.clip_norm / norm)
                                                      : 1.0f;

    ++opt.step;
    auto update_tensor = [&](const std::string& name, Matrix<float>& w) {
      auto git = grads.find(name);
      if (git == grads.end()) return;
      Matrix<float>& g = git->second;
      if (cfg.opt == Optimizer::AdamStyle) {
        Matrix<float>& m = detail::state_slot(opt.m, name, w);
        Matrix<float>& v = detail::state_slot(opt.v, name, w);
        const double bc1 = 1.0 - std::pow(cfg.beta1, opt.step);
        const double bc2 = 1.0 - std::pow(cfg.beta2, opt.step);
        for (std::size_t i = 0; i < w.data.size(); ++i) {
          const double gi = static_cast<double>(g.data[i]) * clip +
                            cfg.weight_decay * static_cast<double>(w.data[i]);
          m.data[i] = static_cast<float>(cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi);
          v.data[i] = static_cast<float>(cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi);
          const double mhat = m.data[i] / bc1;
          const double vhat = v.data[i] / bc2;
          w.data[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
      } else {
        Matrix<float>& m = detail::state_slot(opt.m, name, w);
        for (std::size_t i = 0; i < w.data.size(); ++i) {
          const double gi = static_cast<double>(g.data[i]) * clip +
                            cfg.weight_decay * static_cast<double>(w.data[i]);
          m.data[i] = static_cast<float>(cfg.momentum * m.data[i] + gi);
          w.data[i] -= static_cast<float>(cfg.lr * m.data[i]);
        }
      }
    };
    if (cfg.trainable == TrainableSet::Base) {
      params.for_each_tensor(update_tensor);
      enforce_reservation(params);
    } else {
      adapter->for_each_tensor(update_tensor);
    }

    if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step + 1 == cfg.steps))
      manifest.record_eval(step, batch_loss);
  }
  manifest.j["final_loss"] = last_loss;
  manifest.j["final_base_hash"] = model_hash(params);
  if (adapter) manifest.j["final_adapter_hash"] = adapter_hash(*adapter);
  return manifest;
}

}  // namespace spt

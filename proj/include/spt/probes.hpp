// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spt/evalsuite.hpp"

namespace spt {

enum class Pooling { MeanResponse, LastToken };

inline const char* pooling_name(Pooling p) {
  return p == Pooling::MeanResponse ? "mean_response" : "last_token";
}

struct Features {
  Matrix<double> x;
  std::vector<double> y;  // FAIL/poisoned = 1, PASS/clean = 0
  nlohmann::json provenance;
};

// Residual-stream features over the assistant response span, captured with
// the adapter disabled so the probe sees the main model's latents. Layer 0 is
// the embedding output, layer l the post-block residual.
inline Features capture_features(const ModelParamsF& params, const std::vector<EvalItem>& items,
                                 const std::vector<int>& layers, Pooling pooling) {
  if (items.empty()) fail(Errc::EmptyDataset, "no items to capture");
  if (layers.empty()) fail(Errc::ConfigInvalid, "empty layer set");
  std::set<int> trace(layers.begin(), layers.end());
  const int d = params.arch.dim;
  Features f;
  f.x = Matrix<double>(static_cast<int>(items.size()), static_cast<int>(layers.size()) * d);
  f.y.resize(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const ConversationSample& conv = items[i].conv;
    const Segment* asst = conv.find(Role::Assistant);
    if (!asst) fail(Errc::MissingSegment, "assistant");
    // response body: drop the role marker and the trailing EOT
    const int lo = asst->start + 1;
    const int hi = asst->start + asst->len - 1;
    if (hi <= lo) fail(Errc::EmptySpan, "assistant span is empty in " + conv.id);
    const auto tr =
        forward(params, AdapterContext<float>::disabled(), conv.tokens,
                static_cast<KvCache<float>*>(nullptr), trace);
    double* row = f.x.row(static_cast<int>(i));
    int off = 0;
    for (int l : layers) {
      const Matrix<float>& res = tr.residuals.at(l);
      if (pooling == Pooling::MeanResponse) {
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int p = lo; p < hi; ++p) acc += res.at(p, j);
          row[off + j] = acc / (hi - lo);
        }
      } else {
        for (int j = 0; j < d; ++j) row[off + j] = res.at(hi - 1, j);
      }
      off += d;
    }
    f.y[i] = items[i].poisoned ? 1.0 : 0.0;
  }
  f.provenance = {{"adapter_context", "disabled"},
                  {"layers", layers},
                  {"pooling", pooling_name(pooling)},
                  {"n", items.size()}};
  return f;
}

struct ProbeModel {
  std::vector<double> w;
  double b = 0.0;
  double alpha = 0.0;
  std::vector<int> layers;
  Pooling pooling = Pooling::MeanResponse;
  double val_acc = 0.0;

  double score(const double* x) const {
    double s = b;
    for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * x[j];
    return std::clamp(s, 0.0, 1.0);
  }
  bool predict_fail(const double* x) const { return score(x) >= 0.5; }
};

namespace detail {

// Cholesky solve of the symmetric positive-definite system G w = r, in place.
inline std::vector<double> spd_solve(Matrix<double> g, std::vector<double> r) {
  const int n = g.rows;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = g.at(i, j);
      for (int k = 0; k < j; ++k) s -= g.at(i, k) * g.at(j, k);
      if (i == j) {
        if (s <= 0.0) fail(Errc::OutOfRange, "ridge system is not positive definite");
        g.at(i, i) = std::sqrt(s);
      } else {
        g.at(i, j) = s / g.at(j, j);
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    double s = r[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k) s -= g.at(i, k) * r[static_cast<std::size_t>(k)];
    r[static_cast<std::size_t>(i)] = s / g.at(i, i);
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = r[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < n; ++k) s -= g.at(k, i) * r[static_cast<std::size_t>(k)];
    r[static_cast<std::size_t>(i)] = s / g.at(i, i);
  }
  return r;
}

inline void center_stats(const Matrix<double>& x, const std::vector<double>& y,
                         std::vector<double>& xmean, double& ymean) {
  const int n = x.rows;
  xmean.assign(static_cast<std::size_t>(x.cols), 0.0);
  ymean = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* r = x.row(i);
    for (int j = 0; j < x.cols; ++j) xmean[static_cast<std::size_t>(j)] += r[j];
    ymean += y[static_cast<std::size_t>(i)];
  }
  for (auto& v : xmean) v /= n;
  ymean /= n;
}

}  // namespace detail

// Closed-form ridge on centered features:
//   w = (Xc'Xc / n + alpha I)^{-1} (Xc'yc / n),  b = ymean - xmean . w
inline ProbeModel fit_ridge(const Matrix<double>& x, const std::vector<double>& y, double alpha) {
  if (x.rows < 2 || static_cast<std::size_t>(x.rows) != y.size())
    fail(Errc::ConfigInvalid, "ridge needs n >= 2 rows with matching labels");
  if (!(alpha > 0.0)) fail(Errc::ConfigInvalid, "alpha must be > 0");
  bool has0 = false, has1 = false;
  for (double v : y) (v > 0.5 ? has1 : has0) = true;
  if (!has0 || !has1) fail(Errc::SingleClass, "labels contain a single class");

  const int n = x.rows, dd = x.cols;
  std::vector<double> xmean;
  double ymean = 0.0;
  detail::center_stats(x, y, xmean, ymean);

  Matrix<double> g(dd, dd);
  std::vector<double> r(static_cast<std::size_t>(dd), 0.0);
  for (int i = 0; i < n; ++i) {
    const double* row = x.row(i);
    const double yc = y[static_cast<std::size_t>(i)] - ymean;
    for (int a = 0; a < dd; ++a) {
      const double xa = row[a] - xmean[static_cast<std::size_t>(a)];
      r[static_cast<std::size_t>(a)] += xa * yc;
      double* grow = g.row(a);
      for (int bcol = 0; bcol < dd; ++bcol)
        grow[bcol] += xa * (row[bcol] - xmean[static_cast<std::size_t>(bcol)]);
    }
  }
  for (int a = 0; a < dd; ++a) {
    for (int bcol = 0; bcol < dd; ++bcol) g.at(a, bcol) /= n;
    g.at(a, a) += alpha;
    r[static_cast<std::size_t>(a)] /= n;
  }
  ProbeModel m;
  m.alpha = alpha;
  m.w = detail::spd_solve(std::move(g), std::move(r));
  m.b = ymean;
  for (int j = 0; j < dd; ++j) m.b -= m.w[static_cast<std::size_t>(j)] * xmean[static_cast<std::size_t>(j)];
  return m;
}

// Independent verification oracle: plain gradient descent on the same
// centered ridge objective, run to a tight gradient tolerance. Exists to
// cross-check the closed form, not for production fitting.
inline std::vector<double> fit_ridge_iterative(const Matrix<double>& x,
                                               const std::vector<double>& y, double alpha,
                                               int max_iters = 200000, double tol = 1e-10) {
  const int n = x.rows, dd = x.cols;
  std::vector<double> xmean;
  double ymean = 0.0;
  detail::center_stats(x, y, xmean, ymean);
  Matrix<double> g(dd, dd);
  std::vector<double> r(static_cast<std::size_t>(dd), 0.0);
  for (int i = 0; i < n; ++i) {
    const double* row = x.row(i);
    const double yc = y[static_cast<std::size_t>(i)] - ymean;
    for (int a = 0; a < dd; ++a) {
      const double xa = row[a] - xmean[static_cast<std::size_t>(a)];
      r[static_cast<std::size_t>(a)] += xa * yc / n;
      for (int bcol = 0; bcol < dd; ++bcol)
        g.at(a, bcol) += xa * (row[bcol] - xmean[static_cast<std::size_t>(bcol)]) / n;
    }
  }
  for (int a = 0; a < dd; ++a) g.at(a, a) += alpha;
  // step size from a bound on the largest eigenvalue (Gershgorin)
  double lmax = 0.0;
  for (int a = 0; a < dd; ++a) {
    double s = 0.0;
    for (int bcol = 0; bcol < dd; ++bcol) s += std::abs(g.at(a, bcol));
    lmax = std::max(lmax, s);
  }
  const double lr = 1.0 / lmax;
  std::vector<double> w(static_cast<std::size_t>(dd), 0.0);
  std::vector<double> grad(static_cast<std::size_t>(dd), 0.0);
  for (int it = 0; it < max_iters; ++it) {
    double gn = 0.0;
    for (int a = 0; a < dd; ++a) {
      double s = -r[static_cast<std::size_t>(a)];
      for (int bcol = 0; bcol < dd; ++bcol)
        s += g.at(a, bcol) * w[static_cast<std::size_t>(bcol)];
      grad[static_cast<std::size_t>(a)] = s;
      gn += s * s;
    }
    if (std::sqrt(gn) < tol) break;
    for (int a = 0; a < dd; ++a) w[static_cast<std::size_t>(a)] -= lr * grad[static_cast<std::size_t>(a)];
  }
  return w;
}

inline double probe_accuracy(const ProbeModel& m, const Matrix<double>& x,
                             const std::vector<double>& y) {
  int hits = 0;
  for (int i = 0; i < x.rows; ++i)
    if (m.predict_fail(x.row(i)) == (y[static_cast<std::size_t>(i)] > 0.5)) ++hits;
  return x.rows ? static_cast<double>(hits) / x.rows : 0.0;
}

struct ProbeConfig {
  std::vector<std::vector<int>> layer_sets;  // default set in sweep_and_compare
  std::vector<Pooling> poolings{Pooling::MeanResponse, Pooling::LastToken};
  std::vector<double> alphas{0.01, 0.1, 1.0, 10.0, 100.0, 1000.0};
  double val_fraction = 0.3;
  std::uint64_t seed = 23;
};

struct SweepCell {
  std::vector<int> layers;
  Pooling pooling = Pooling::MeanResponse;
  double alpha = 0.0;
  double val_acc = 0.0;
  double heldout_acc = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> grid;
  int best = -1;
  ProbeModel best_model;
  double spt_val_acc = 0.0;
  double spt_heldout_acc = 0.0;

  std::string grid_csv() const {
    std::ostringstream os;
    os << "layers,pooling,alpha,val_acc,heldout_acc\n";
    for (const auto& c : grid) {
      for (std::size_t i = 0; i < c.layers.size(); ++i)
        os << (i ? "+" : "") << c.layers[i];
      os << "," << pooling_name(c.pooling) << "," << c.alpha << "," << c.val_acc << ","
         << c.heldout_acc << "\n";
    }
    return os.str();
  }

  std::string table2() const {
    return table2_markdown(best >= 0 ? grid[static_cast<std::size_t>(best)].val_acc : 0.0,
                           best >= 0 ? grid[static_cast<std::size_t>(best)].heldout_acc : 0.0,
                           spt_val_acc, spt_heldout_acc);
  }

  nlohmann::json to_json() const {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : grid) {
      cells.push_back({{"layers", c.layers},
                       {"pooling", pooling_name(c.pooling)},
                       {"alpha", c.alpha},
                       {"val_acc", c.val_acc},
                       {"heldout_acc", c.heldout_acc}});
    }
    return {{"grid", cells},
            {"best", best},
            {"spt_val_acc", spt_val_acc},
            {"spt_heldout_acc", spt_heldout_acc}};
  }
};

// Full probe sweep plus the SPT comparison on the same splits. The probe is
// selected on validation accuracy; held-out numbers are reported for the
// selected cell and every other cell in the grid.
inline SweepResult sweep_and_compare(const ModelParamsF& params, const LoraAdapter<float>* adapter,
                                     const TaskGrammar& g, const std::vector<EvalItem>& in_topic,
                                     const std::vector<EvalItem>& held_out, ProbeConfig cfg,
                                     PersonaVariant variant = PersonaVariant::Mask) {
  if (cfg.layer_sets.empty()) {
    cfg.layer_sets = {{1}, {2}, {3}, {1, 2, 3}};
    for (auto& ls : cfg.layer_sets)
      for (int& l : ls) l = std::min(l, params.arch.layers);
  }
  if (in_topic.size() < 4) fail(Errc::EmptyCorpus, "too few in-topic items");

  // deterministic fit/validation split
  std::vector<std::size_t> order(in_topic.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed);
  rng.shuffle(order);
  const std::size_t n_val =
      std::max<std::size_t>(2, static_cast<std::size_t>(cfg.val_fraction * in_topic.size()));
  std::vector<EvalItem> fit_items, val_items;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val_items : fit_items).push_back(in_topic[order[i]]);

  SweepResult res;
  for (const auto& layers : cfg.layer_sets) {
    for (Pooling pooling : cfg.poolings) {
      const Features ff = capture_features(params, fit_items, layers, pooling);
      const Features fv = capture_features(params, val_items, layers, pooling);
      const Features fh = capture_features(params, held_out, layers, pooling);
      for (double alpha : cfg.alphas) {
        ProbeModel m = fit_ridge(ff.x, ff.y, alpha);
        m.layers = layers;
        m.pooling = pooling;
        SweepCell cell;
        cell.layers = layers;
        cell.pooling = pooling;
        cell.alpha = alpha;
        cell.val_acc = probe_accuracy(m, fv.x, fv.y);
        cell.heldout_acc = probe_accuracy(m, fh.x, fh.y);
        m.val_acc = cell.val_acc;
        if (res.best < 0 || cell.val_acc > res.grid[static_cast<std::size_t>(res.best)].val_acc) {
          res.best = static_cast<int>(res.grid.size());
          res.best_model = std::move(m);
        }
        res.grid.push_back(std::move(cell));
      }
    }
  }

  if (adapter) {
    std::vector<InterventionTemplate> iv{g.interventions().front()};
    res.spt_val_acc =
        run_auditing_game(params, adapter, g, val_items, iv, variant).best.overall;
    res.spt_heldout_acc =
        run_auditing_game(params, adapter, g, held_out, iv, variant).best.overall;
  }
  return res;
}

}  // namespace spt

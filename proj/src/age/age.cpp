// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/age.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/parallel.hpp"
#include "histoage/rng.hpp"
#include "histoage/stats.hpp"

namespace histoage {

void GbtConfig::validate() const {
  if (depth < 1) throw ConfigError("gbt.depth", "depth must be >= 1");
  if (trees < 0) throw ConfigError("gbt.trees", "tree count must be >= 0");
  if (!(eta > 0 && eta <= 1)) throw ConfigError("gbt.eta", "learning rate must be in (0, 1]");
  if (!(lambda >= 0)) throw ConfigError("gbt.lambda", "leaf penalty must be >= 0");
  if (!(colsample > 0 && colsample <= 1)) throw ConfigError("gbt.colsample", "must be in (0, 1]");
}

double RegressionTree::predict(std::span<const double> x) const {
  int i = 0;
  while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].value;
}

int RegressionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].feature < 0) continue;
    d[nodes[i].left] = d[nodes[i].right] = d[i] + 1;
    best = std::max(best, d[i] + 1);
  }
  return best;
}

double GbtModel::predict(std::span<const double> x) const {
  double s = 0;
  for (const auto& t : trees) s += t.predict(x);
  return base + eta * s;
}

std::vector<double> GbtModel::predict(const Matrix& x) const {
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = predict(x.row(i));
  return out;
}

namespace {

struct Split {
  double gain = 0;
  int feature = -1;
  double threshold = 0;
};

double score(double g, double n, double lambda) { return n + lambda > 0 ? g * g / (n + lambda) : 0.0; }

RegressionTree grow_tree(const Matrix& x, const std::vector<std::vector<std::size_t>>& sorted,
                         const std::vector<int>& features, const std::vector<double>& resid, const GbtConfig& cfg) {
  const std::size_t n = x.rows();
  RegressionTree tree;
  tree.nodes.emplace_back();
  std::vector<int> node_of(n, 0);
  std::vector<double> g(1, std::accumulate(resid.begin(), resid.end(), 0.0));
  std::vector<double> cnt(1, static_cast<double>(n));
  std::vector<int> active{0};

  for (int level = 0; level < cfg.depth && !active.empty(); ++level) {
    std::map<int, std::size_t> slot;
    for (std::size_t a = 0; a < active.size(); ++a) slot[active[a]] = a;
    std::vector<Split> best(active.size());
    for (const int f : features) {
      std::vector<double> gl(active.size(), 0.0), nl(active.size(), 0.0);
      std::vector<double> last(active.size(), std::numeric_limits<double>::quiet_NaN());
      for (const std::size_t i : sorted[f]) {
        const auto it = slot.find(node_of[i]);
        if (it == slot.end()) continue;
        const std::size_t a = it->second;
        const int node = active[a];
        const double v = x(i, static_cast<std::size_t>(f));
        if (nl[a] > 0 && v != last[a]) {
          const double gr = g[node] - gl[a], nr = cnt[node] - nl[a];
          const double gain = score(gl[a], nl[a], cfg.lambda) + score(gr, nr, cfg.lambda) -
                              score(g[node], cnt[node], cfg.lambda);
          if (gain > best[a].gain) best[a] = {gain, f, last[a] + (v - last[a]) / 2};
        }
        gl[a] += resid[i];
        nl[a] += 1;
        last[a] = v;
      }
    }
    std::vector<int> next;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const int node = active[a];
      const double parent = score(g[node], cnt[node], cfg.lambda);
      if (best[a].feature < 0 || best[a].gain <= 1e-12 * std::max(1.0, parent)) continue;
      const int l = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      tree.nodes[node].feature = best[a].feature;
      tree.nodes[node].threshold = best[a].threshold;
      tree.nodes[node].left = l;
      tree.nodes[node].right = l + 1;
      g.resize(tree.nodes.size(), 0.0);
      cnt.resize(tree.nodes.size(), 0.0);
      next.push_back(l);
      next.push_back(l + 1);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& nd = tree.nodes[node_of[i]];
      if (nd.feature < 0) continue;
      const int child = x(i, static_cast<std::size_t>(nd.feature)) <= nd.threshold ? nd.left : nd.right;
      node_of[i] = child;
    }
    for (const int c : next) g[c] = cnt[c] = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(next.begin(), next.end(), node_of[i]) == next.end()) continue;
      g[node_of[i]] += resid[i];
      cnt[node_of[i]] += 1;
    }
    active = std::move(next);
  }
  for (std::size_t k = 0; k < tree.nodes.size(); ++k)
    if (tree.nodes[k].feature < 0) tree.nodes[k].value = cnt[k] + cfg.lambda > 0 ? g[k] / (cnt[k] + cfg.lambda) : 0.0;
  return tree;
}

}  // namespace

GbtModel fit_gbt(const Matrix& x, std::span<const double> y, const GbtConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t n = x.rows(), p = x.cols();
  if (n == 0 || y.size() != n) throw ShapeError("fit_gbt: " + std::to_string(n) + " rows vs " + std::to_string(y.size()) + " targets");
  for (const double v : x.data())
    if (!std::isfinite(v)) throw NumericError("fit_gbt: non-finite feature value");
  for (const double v : y)
    if (!std::isfinite(v)) throw NumericError("fit_gbt: non-finite target");

  std::vector<std::vector<std::size_t>> sorted(p);
  for (std::size_t f = 0; f < p; ++f) {
    sorted[f].resize(n);
    std::iota(sorted[f].begin(), sorted[f].end(), std::size_t{0});
    std::stable_sort(sorted[f].begin(), sorted[f].end(), [&](std::size_t a, std::size_t b) { return x(a, f) < x(b, f); });
  }

  GbtModel model;
  model.eta = config.eta;
  model.base = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  std::vector<double> pred(n, model.base), resid(n);
  auto mse = [&] {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (y[i] - pred[i]) * (y[i] - pred[i]);
    return s / static_cast<double>(n);
  };
  model.train_mse.push_back(mse());

  Rng rng(derive_seed(seed, "colsample"));
  std::vector<int> all(p);
  std::iota(all.begin(), all.end(), 0);
  const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(config.colsample * static_cast<double>(p))));
  for (int t = 0; t < config.trees; ++t) {
    for (std::size_t i = 0; i < n; ++i) resid[i] = y[i] - pred[i];
    std::vector<int> features = all;
    if (take < p) {
      rng.shuffle(std::span<int>(features));
      features.resize(take);
      std::sort(features.begin(), features.end());
    }
    auto tree = grow_tree(x, sorted, features, resid, config);
    for (std::size_t i = 0; i < n; ++i) pred[i] += config.eta * tree.predict(x.row(i));
    model.trees.push_back(std::move(tree));
    model.train_mse.push_back(mse());
  }
  return model;
}

BootstrapResult bootstrap_fit_predict(const Matrix& features, std::span<const double> ages, std::span<const int> sexes,
                                      std::span<const std::string> pids, const BootstrapConfig& config) {
  const std::size_t n = features.rows();
  if (ages.size() != n || sexes.size() != n || pids.size() != n) throw ShapeError("bootstrap_fit_predict: column lengths differ");
  if (config.members < 1) throw ConfigError("gbt.bootstraps", "bootstrap count must be >= 1");
  if (n < 2) throw ContractError("bootstrap_fit_predict: need at least 2 subjects");
  config.gbt.validate();

  Matrix x(n, features.cols() + 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < features.cols(); ++j) x(i, j) = features(i, j);
    x(i, features.cols()) = sexes[i];
  }

  const auto b = static_cast<std::size_t>(config.members);
  BootstrapResult out;
  out.member_predictions = Matrix(b, n);
  out.multiplicity.assign(b, std::vector<int>(n, 0));
  parallel_for(b, [&](std::size_t m) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(m)));
    std::vector<std::size_t> draw(n);
    for (auto& d : draw) d = static_cast<std::size_t>(rng.below(n));
    Matrix xs(n, x.cols());
    std::vector<double> ys(n);
    for (std::size_t r = 0; r < n; ++r) {
      ++out.multiplicity[m][draw[r]];
      for (std::size_t c = 0; c < x.cols(); ++c) xs(r, c) = x(draw[r], c);
      ys[r] = ages[draw[r]];
    }
    const auto model = fit_gbt(xs, ys, config.gbt, derive_seed(config.seed, static_cast<std::uint64_t>(m)));
    for (std::size_t i = 0; i < n; ++i) out.member_predictions(m, i) = model.predict(x.row(i));
  });

  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> oob, all;
    for (std::size_t m = 0; m < b; ++m) {
      all.push_back(out.member_predictions(m, i));
      if (out.multiplicity[m][i] == 0) oob.push_back(out.member_predictions(m, i));
    }
    AgePrediction p;
    p.pid = pids[i];
    p.sex = sexes[i];
    p.actual = ages[i];
    p.oob = !oob.empty();
    p.oob_members = static_cast<int>(oob.size());
    const auto& use = p.oob ? oob : all;
    p.point = std::max(0.0, mean(use));
    p.lo = std::min(quantile(use, 0.025), p.point);
    p.hi = std::max(quantile(use, 0.975), p.point);
    out.predictions.push_back(std::move(p));
  }
  return out;
}

std::vector<AgeBin> table_age_bins() {
  const double inf = std::numeric_limits<double>::infinity();
  return {{"0-20", -inf, 21}, {"21-30", 21, 31}, {"31-40", 31, 41}, {"41-50", 41, 51},
          {"51-60", 51, 61},  {"61-70", 61, 71}, {">=71", 71, inf},  {"All ages", -inf, inf}};
}

namespace {

std::vector<MaeRow> mae_rows(std::span<const AgePrediction> preds, const std::vector<std::vector<int>>* weights) {
  std::vector<MaeRow> rows;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const int sex : {0, 1}) {
    for (const auto& bin : table_age_bins()) {
      MaeRow row{sex, bin.label, 0, nan, nan, nan};
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i].sex == sex && preds[i].actual >= bin.lo && preds[i].actual < bin.hi) members.push_back(i);
      row.count = members.size();
      if (!members.empty()) {
        double s = 0;
        for (const auto i : members) s += std::fabs(preds[i].point - preds[i].actual);
        row.mae = s / static_cast<double>(members.size());
        row.lo = row.hi = row.mae;
        if (weights != nullptr) {
          std::vector<double> reps;
          for (const auto& w : *weights) {
            double num = 0, den = 0;
            for (const auto i : members) {
              num += w[i] * std::fabs(preds[i].point - preds[i].actual);
              den += w[i];
            }
            if (den > 0) reps.push_back(num / den);
          }
          if (!reps.empty()) {
            row.lo = std::min(quantile(reps, 0.025), row.mae);
            row.hi = std::max(quantile(reps, 0.975), row.mae);
          }
        }
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace

std::vector<MaeRow> mae_table(const BootstrapResult& result) { return mae_rows(result.predictions, &result.multiplicity); }

std::vector<MaeRow> mae_table(std::span<const AgePrediction> predictions) { return mae_rows(predictions, nullptr); }

void write_predictions(const std::filesystem::path& path, std::span<const AgePrediction> predictions) {
  CsvTable t;
  t.header = {"pid", "sex", "actual_age", "predicted_age", "ci_lo", "ci_hi", "oob", "oob_members"};
  for (const auto& p : predictions)
    t.rows.push_back({p.pid, p.sex == 0 ? "M" : "F", format_number(p.actual), format_number(p.point), format_number(p.lo),
                      format_number(p.hi), p.oob ? "1" : "0", std::to_string(p.oob_members)});
  write_csv(path, t);
}

std::vector<AgePrediction> read_predictions(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  const auto c_pid = t.column("pid"), c_sex = t.column("sex"), c_act = t.column("actual_age"),
             c_pred = t.column("predicted_age"), c_lo = t.column("ci_lo"), c_hi = t.column("ci_hi"), c_oob = t.column("oob"),
             c_members = t.column("oob_members");
  std::vector<AgePrediction> out;
  for (const auto& r : t.rows) {
    AgePrediction p;
    p.pid = r.at(c_pid);
    p.sex = r.at(c_sex) == "F" ? 1 : 0;
    p.actual = parse_double(r.at(c_act));
    p.point = parse_double(r.at(c_pred));
    p.lo = parse_double(r.at(c_lo));
    p.hi = parse_double(r.at(c_hi));
    p.oob = r.at(c_oob) == "1";
    p.oob_members = static_cast<int>(parse_int(r.at(c_members)));
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PatchScore> rank_attention_patches(const Matrix& patch_features, std::span<const std::string> patch_ids,
                                               std::span<const std::string> slide_ids,
                                               std::span<const double> actual_ages, const AttentionConfig& config) {
  const std::size_t n = patch_features.rows();
  if (patch_ids.size() != n || slide_ids.size() != n || actual_ages.size() != n)
    throw ShapeError("rank_attention_patches: column lengths differ");
  if (n == 0) return {};
  if (config.folds < 1) throw ConfigError("attention.folds", "fold count must be >= 1");

  std::vector<std::string> groups(slide_ids.begin(), slide_ids.end());
  std::sort(groups.begin(), groups.end());
  groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
  Rng rng(derive_seed(config.seed, "attention-folds"));
  rng.shuffle(std::span<std::string>(groups));
  const std::size_t folds = std::min<std::size_t>(static_cast<std::size_t>(config.folds), groups.size());
  std::map<std::string, std::size_t> fold_of;
  for (std::size_t g = 0; g < groups.size(); ++g) fold_of[groups[g]] = g % folds;

  std::vector<double> predicted(n, 0.0);
  std::vector<std::vector<std::size_t>> test(folds);
  for (std::size_t i = 0; i < n; ++i) test[fold_of[slide_ids[i]]].push_back(i);
  parallel_for(folds, [&](std::size_t f) {
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < n; ++i)
      if (folds == 1 || fold_of[slide_ids[i]] != f) train.push_back(i);
    Matrix xs(train.size(), patch_features.cols());
    std::vector<double> ys(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) {
      for (std::size_t c = 0; c < xs.cols(); ++c) xs(r, c) = patch_features(train[r], c);
      ys[r] = actual_ages[train[r]];
    }
    const auto model = fit_gbt(xs, ys, config.gbt, derive_seed(config.seed, static_cast<std::uint64_t>(f)));
    for (const auto i : test[f]) predicted[i] = model.predict(patch_features.row(i));
  });

  std::vector<PatchScore> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = {patch_ids[i], slide_ids[i], actual_ages[i], predicted[i], std::fabs(predicted[i] - actual_ages[i])};
  std::sort(out.begin(), out.end(), [](const PatchScore& a, const PatchScore& b) {
    if (a.error != b.error) return a.error < b.error;
    return a.patch_id < b.patch_id;
  });
  return out;
}

std::vector<PatchScore> top_per_slide(std::span<const PatchScore> ranked, std::size_t m) {
  std::map<std::string, std::size_t> taken;
  std::vector<PatchScore> out;
  for (const auto& p : ranked)
    if (taken[p.slide_id]++ < m) out.push_back(p);
  return out;
}

}  // namespace histoage

// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/epi.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <regex>

#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/rng.hpp"

namespace histoage {

std::string display_name(Disease d) {
  switch (d) {
    case Disease::kHeart: return "Heart Disease";
    case Disease::kCancer: return "Cancer";
    case Disease::kHypertension: return "Hypertension";
    case Disease::kCopd: return "COPD";
    case Disease::kJoint: return "Joint Disease";
    case Disease::kOsteoarthritis: return "Osteoarthritis";
    case Disease::kOsteoporosis: return "Osteoporosis";
  }
  return "?";
}

std::string column_name(Disease d) {
  switch (d) {
    case Disease::kHeart: return "heart";
    case Disease::kCancer: return "cancer";
    case Disease::kHypertension: return "htn";
    case Disease::kCopd: return "copd";
    case Disease::kJoint: return "joint";
    case Disease::kOsteoarthritis: return "oa";
    case Disease::kOsteoporosis: return "op";
  }
  return "?";
}

std::string display_name(SkinCondition s) {
  switch (s) {
    case SkinCondition::kAtopicDermatitis: return "Atopic Dermatitis";
    case SkinCondition::kPsoriasis: return "Psoriasis";
    case SkinCondition::kAcne: return "Acne";
    case SkinCondition::kRosacea: return "Rosacea";
  }
  return "?";
}

Icd10Groups map_icd10(std::string_view code) {
  static const std::regex shape(R"([A-Z]\d{2}(\.\d+)?)");
  const std::string text(code);
  if (!std::regex_match(text, shape)) throw ContractError("malformed ICD-10 code: '" + text + "'");
  std::string flat;
  for (const char c : text)
    if (c != '.') flat += c;
  const std::string category = flat.substr(0, 3);

  struct Row {
    Disease d;
    std::vector<const char*> prefixes;
  };
  static const std::vector<Row> table{
      {Disease::kHeart, {"I20", "I21", "I22", "I23", "I24", "I25", "I50", "I11", "I13"}},
      {Disease::kHypertension, {"I10", "I11", "I12", "I13", "I15"}},
      {Disease::kJoint, {"M060", "M068", "M070", "M071", "M100", "M109"}},
      {Disease::kOsteoporosis, {"M80", "M81", "M82"}},
      {Disease::kOsteoarthritis, {"M15", "M16", "M17", "M18", "M19"}},
      {Disease::kCopd, {"J40", "J41", "J42", "J43", "J44", "J47", "J96"}},
  };
  Icd10Groups out;
  for (const auto& row : table)
    for (const char* p : row.prefixes)
      if (flat.rfind(p, 0) == 0) {
        out.diseases.push_back(row.d);
        break;
      }
  if (category[0] == 'C') {
    const int n = std::stoi(category.substr(1));
    if (n <= 42 || n >= 46) out.diseases.push_back(Disease::kCancer);
  }
  std::sort(out.diseases.begin(), out.diseases.end());
  if (category == "L20") out.skin = SkinCondition::kAtopicDermatitis;
  if (category == "L40") out.skin = SkinCondition::kPsoriasis;
  if (category == "L70") out.skin = SkinCondition::kAcne;
  if (category == "L71") out.skin = SkinCondition::kRosacea;
  return out;
}

void write_cohort(const std::filesystem::path& path, std::span<const Subject> subjects) {
  CsvTable t;
  t.header = {"pid", "sex", "age", "biopsy_date"};
  for (const auto d : kDiseases) t.header.push_back(column_name(d));
  t.header.push_back("followup_years");
  t.header.push_back("event");
  for (const auto& s : subjects) {
    std::vector<std::string> row{s.pid, s.sex == 0 ? "M" : "F", format_number(s.age), s.biopsy_date};
    for (const int f : s.disease) row.push_back(std::to_string(f));
    row.push_back(format_number(s.followup_years));
    row.push_back(std::to_string(s.event));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

std::vector<Subject> read_cohort(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  std::vector<Subject> out;
  const auto c_pid = t.column("pid"), c_sex = t.column("sex"), c_age = t.column("age"), c_date = t.column("biopsy_date"),
             c_fu = t.column("followup_years"), c_ev = t.column("event");
  std::array<std::size_t, kDiseaseCount> c_d{};
  for (std::size_t k = 0; k < kDiseaseCount; ++k) c_d[k] = t.column(column_name(kDiseases[k]));
  for (const auto& r : t.rows) {
    Subject s;
    s.pid = r.at(c_pid);
    const auto& sex = r.at(c_sex);
    if (sex != "M" && sex != "F") throw ContractError("cohort: sex must be M or F for " + s.pid);
    s.sex = sex == "F" ? 1 : 0;
    s.age = parse_double(r.at(c_age));
    s.biopsy_date = r.at(c_date);
    for (std::size_t k = 0; k < kDiseaseCount; ++k) {
      s.disease[k] = static_cast<int>(parse_int(r.at(c_d[k])));
      if (s.disease[k] != 0 && s.disease[k] != 1) throw ContractError("cohort: disease flag not 0/1 for " + s.pid);
    }
    s.followup_years = parse_double(r.at(c_fu));
    s.event = static_cast<int>(parse_int(r.at(c_ev)));
    if (s.followup_years < 0 || (s.event != 0 && s.event != 1))
      throw ContractError("cohort: invalid follow-up or event for " + s.pid);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

using Vec = std::vector<double>;

/// In-place Cholesky of a symmetric matrix; false if not positive definite.
bool cholesky(Matrix& a) {
  const std::size_t n = a.rows();
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0) || !std::isfinite(d)) return false;
    a(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / a(j, j);
    }
  }
  return true;
}

Vec cholesky_solve(const Matrix& l, Vec b) {
  const std::size_t n = l.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) b[i] -= l(i, k) * b[k];
    b[i] /= l(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) b[i] -= l(k, i) * b[k];
    b[i] /= l(i, i);
  }
  return b;
}

double norm_inf(const Vec& v) {
  double m = 0;
  for (const double x : v) m = std::max(m, std::fabs(x));
  return m;
}

double log1pexp(double eta) { return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

double linear(std::span<const double> beta, std::span<const double> x) {
  double eta = beta[0];
  for (std::size_t j = 0; j < x.size(); ++j) eta += beta[j + 1] * x[j];
  return eta;
}

}  // namespace

double LogisticFit::probability(std::span<const double> x) const {
  return 1.0 / (1.0 + std::exp(-linear(beta, x)));
}

double logistic_log_likelihood(const Matrix& x, std::span<const int> y, std::span<const double> beta) {
  double ll = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double eta = linear(beta, x.row(i));
    ll += y[i] * eta - log1pexp(eta);
  }
  return ll;
}

LogisticFit fit_logistic(const Matrix& x, std::span<const int> y, double ridge) {
  const std::size_t n = x.rows(), p = x.cols() + 1;
  if (y.size() != n) throw ShapeError("fit_logistic: label count differs from rows");
  const auto positives = std::count(y.begin(), y.end(), 1);
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(n))
    throw ContractError("fit_logistic: labels contain a single class");
  if (!(ridge >= 0)) throw ConfigError("logistic.ridge", "ridge must be >= 0");

  auto objective = [&](const Vec& b) {
    double pen = 0;
    for (std::size_t j = 1; j < p; ++j) pen += b[j] * b[j];
    return logistic_log_likelihood(x, y, b) - 0.5 * ridge * pen;
  };
  LogisticFit fit;
  fit.beta.assign(p, 0.0);
  double obj = objective(fit.beta);
  for (int it = 1; it <= 100; ++it) {
    Vec g(p, 0.0);
    Matrix h(p, p);
    for (std::size_t i = 0; i < n; ++i) {
      const auto xi = x.row(i);
      const double pr = 1.0 / (1.0 + std::exp(-linear(fit.beta, xi)));
      const double w = pr * (1 - pr);
      const double r = y[i] - pr;
      for (std::size_t a = 0; a < p; ++a) {
        const double xa = a == 0 ? 1.0 : xi[a - 1];
        g[a] += r * xa;
        for (std::size_t b = 0; b <= a; ++b) h(a, b) += w * xa * (b == 0 ? 1.0 : xi[b - 1]);
      }
    }
    for (std::size_t a = 1; a < p; ++a) {
      g[a] -= ridge * fit.beta[a];
      h(a, a) += ridge;
    }
    for (std::size_t a = 0; a < p; ++a)
      for (std::size_t b = a + 1; b < p; ++b) h(a, b) = h(b, a);
    fit.gradient_norm = norm_inf(g);
    fit.iterations = it;
    if (fit.gradient_norm < 1e-10 * std::max<double>(1.0, static_cast<double>(n))) break;
    for (std::size_t a = 0; a < p; ++a) h(a, a) += 1e-12;
    if (!cholesky(h)) throw NumericError("fit_logistic: singular Hessian, gradient norm " + format_number(fit.gradient_norm));
    const Vec step = cholesky_solve(h, g);
    double t = 1.0;
    Vec next(p);
    double next_obj = obj;
    for (int half = 0; half < 40; ++half, t /= 2) {
      for (std::size_t a = 0; a < p; ++a) next[a] = fit.beta[a] + t * step[a];
      next_obj = objective(next);
      if (next_obj >= obj) break;
    }
    if (!(next_obj >= obj)) break;  // no ascent direction left at machine precision
    const double change = next_obj - obj;
    fit.beta = next;
    obj = next_obj;
    if (change <= 1e-13 * (1.0 + std::fabs(obj)) && norm_inf(step) * t < 1e-9) break;
    if (it == 100)
      throw NumericError("fit_logistic: no convergence after 100 Newton steps, gradient norm " +
                         format_number(fit.gradient_norm));
  }
  fit.log_likelihood = logistic_log_likelihood(x, y, fit.beta);
  return fit;
}

AccuracyEstimate classification_accuracy(const Matrix& x, std::span<const int> y, int folds, std::uint64_t seed,
                                         double ridge) {
  const std::size_t n = x.rows();
  if (folds < 2) throw ConfigError("epi.folds", "need at least 2 folds");
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[y[i] ? 1 : 0].push_back(i);
  for (int c = 0; c < 2; ++c)
    if (by_class[c].size() < static_cast<std::size_t>(folds))
      throw ContractError("classification: class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                          " members, fewer than " + std::to_string(folds) + " folds");
  std::vector<int> fold(n, 0);
  for (int c = 0; c < 2; ++c) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    auto idx = by_class[c];
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) fold[idx[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  }
  AccuracyEstimate out;
  out.oof_probability.assign(n, 0.0);
  double acc_sum = 0;
  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? test : train).push_back(i);
    Matrix xt(train.size(), x.cols());
    std::vector<int> yt(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) xt(r, c) = x(train[r], c);
      yt[r] = y[train[r]];
    }
    const auto model = fit_logistic(xt, yt, ridge);
    std::size_t correct = 0;
    for (const auto i : test) {
      out.oof_probability[i] = model.probability(x.row(i));
      correct += static_cast<std::size_t>((out.oof_probability[i] >= 0.5 ? 1 : 0) == y[i]);
    }
    acc_sum += static_cast<double>(correct) / static_cast<double>(test.size());
  }
  out.cv = acc_sum / folds;
  const auto full = fit_logistic(x, y, ridge);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += static_cast<std::size_t>((full.probability(x.row(i)) >= 0.5 ? 1 : 0) == y[i]);
  out.in_sample = static_cast<double>(correct) / static_cast<double>(n);
  return out;
}

std::vector<AccuracyRow> classify_diseases(std::span<const Subject> subjects,
                                           const std::map<std::string, double>& predicted_age, int folds,
                                           std::uint64_t seed) {
  std::vector<AccuracyRow> rows;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const int sex : {0, 1}) {
    std::vector<const Subject*> group;
    std::vector<double> pred;
    for (const auto& s : subjects) {
      if (s.sex != sex) continue;
      const auto it = predicted_age.find(s.pid);
      if (it == predicted_age.end()) throw ContractError("classification: no predicted age for " + s.pid);
      group.push_back(&s);
      pred.push_back(it->second);
    }
    const std::size_t n = group.size();
    std::array<Matrix, 3> xs{Matrix(n, 1), Matrix(n, 1), Matrix(n, 2)};
    for (std::size_t i = 0; i < n; ++i) {
      xs[0](i, 0) = group[i]->age;
      xs[1](i, 0) = pred[i];
      xs[2](i, 0) = group[i]->age;
      xs[2](i, 1) = pred[i];
    }
    for (std::size_t k = 0; k < kDiseaseCount; ++k) {
      AccuracyRow row;
      row.sex = sex;
      row.disease = kDiseases[k];
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = group[i]->disease[k];
      try {
        for (std::size_t src = 0; src < 3; ++src)
          row.by_source[src] = classification_accuracy(xs[src], y, folds, derive_seed(seed, (sex * 16 + k) * 4 + src));
      } catch (const Error& e) {
        row.skipped = e.what();
        for (auto& est : row.by_source) est = {nan, nan, std::vector<double>(n, 0.0)};
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// Cox -----------------------------------------------------------------------

namespace {

struct CoxEval {
  double loglik = 0;
  Vec grad;
  Matrix info;  // negative Hessian of the log partial likelihood
};

struct StratumOrder {
  int stratum;
  std::vector<std::size_t> idx;  // by time descending
};

std::vector<StratumOrder> strata_order(const CoxData& d) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < d.time.size(); ++i) groups[d.stratum[i]].push_back(i);
  std::vector<StratumOrder> out;
  for (auto& [s, idx] : groups) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return d.time[a] > d.time[b]; });
    out.push_back({s, std::move(idx)});
  }
  return out;
}

CoxEval cox_eval(const CoxData& d, const Matrix& x, std::span<const double> beta, bool derivatives,
                 const std::vector<StratumOrder>& order) {
  const std::size_t p = x.cols();
  CoxEval ev;
  ev.grad.assign(p, 0.0);
  if (derivatives) ev.info = Matrix(p, p);
  std::vector<double> eta(x.rows());
  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double e = 0;
    for (std::size_t j = 0; j < p; ++j) e += beta[j] * x(i, j);
    eta[i] = e;
    shift = std::max(shift, e);
  }
  for (const auto& so : order) {
    double s0 = 0;
    Vec s1(p, 0.0);
    Matrix s2(derivatives ? p : 0, derivatives ? p : 0);
    const auto& idx = so.idx;
    for (std::size_t a = 0; a < idx.size();) {
      std::size_t b = a;
      const double t = d.time[idx[a]];
      while (b < idx.size() && d.time[idx[b]] == t) {
        const std::size_t i = idx[b];
        const double w = std::exp(eta[i] - shift);
        s0 += w;
        for (std::size_t j = 0; j < p; ++j) {
          s1[j] += w * x(i, j);
          if (derivatives)
            for (std::size_t k = 0; k <= j; ++k) s2(j, k) += w * x(i, j) * x(i, k);
        }
        ++b;
      }
      double events = 0;
      for (std::size_t c = a; c < b; ++c) {
        const std::size_t i = idx[c];
        if (!d.event[i]) continue;
        events += 1;
        ev.loglik += eta[i];
        for (std::size_t j = 0; j < p; ++j) ev.grad[j] += x(i, j);
      }
      if (events > 0) {
        ev.loglik -= events * (std::log(s0) + shift);
        for (std::size_t j = 0; j < p; ++j) ev.grad[j] -= events * s1[j] / s0;
        if (derivatives)
          for (std::size_t j = 0; j < p; ++j)
            for (std::size_t k = 0; k <= j; ++k) ev.info(j, k) += events * (s2(j, k) / s0 - s1[j] * s1[k] / (s0 * s0));
      }
      a = b;
    }
  }
  if (derivatives)
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t k = j + 1; k < p; ++k) ev.info(j, k) = ev.info(k, j);
  return ev;
}

void check_cox(const CoxData& d) {
  const std::size_t n = d.x.rows();
  if (d.time.size() != n || d.event.size() != n || d.stratum.size() != n || d.names.size() != d.x.cols())
    throw ShapeError("cox: column lengths differ");
  for (std::size_t i = 0; i < n; ++i)
    if (!(d.time[i] >= 0) || !std::isfinite(d.time[i])) throw ContractError("cox: invalid follow-up time");
}

}  // namespace

double cox_log_partial_likelihood(const CoxData& data, std::span<const double> beta) {
  check_cox(data);
  if (beta.size() != data.x.cols()) throw ShapeError("cox: coefficient count differs from covariates");
  return cox_eval(data, data.x, beta, false, strata_order(data)).loglik;
}

CoxFit fit_cox(const CoxData& data, double lambda) {
  check_cox(data);
  if (!(lambda >= 0)) throw ConfigError("cox.lambda", "penalty must be >= 0");
  const std::size_t n = data.x.rows(), p = data.x.cols();
  const auto order = strata_order(data);
  for (const auto& so : order) {
    const bool any = std::any_of(so.idx.begin(), so.idx.end(), [&](std::size_t i) { return data.event[i] != 0; });
    if (!any) throw ContractError("cox: stratum " + std::to_string(so.stratum) + " has no events");
  }

  // Centering leaves the partial likelihood unchanged and keeps exp() tame.
  Vec centre(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) centre[j] += data.x(i, j) / static_cast<double>(n);
  Matrix xc(n, p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) xc(i, j) = data.x(i, j) - centre[j];

  CoxFit fit;
  fit.names = data.names;
  fit.lambda = lambda;
  Vec beta(p, 0.0);
  auto objective = [&](const Vec& b, double lam) {
    double pen = 0;
    for (const double v : b) pen += v * v;
    return cox_eval(data, xc, b, false, order).loglik - 0.5 * lam * pen;
  };
  double obj = objective(beta, fit.lambda);
  Matrix chol;
  bool converged = false;
  for (int it = 1; it <= 100 && !converged; ++it) {
    auto ev = cox_eval(data, xc, beta, true, order);
    Vec g = ev.grad;
    for (std::size_t j = 0; j < p; ++j) {
      g[j] -= fit.lambda * beta[j];
      ev.info(j, j) += fit.lambda;
    }
    chol = ev.info;
    while (!cholesky(chol)) {
      const double next = fit.lambda > 0 ? fit.lambda * 10 : 1e-6;
      fit.warnings.push_back("information matrix not positive definite; lambda raised from " +
                             format_number(fit.lambda) + " to " + format_number(next));
      for (std::size_t j = 0; j < p; ++j) ev.info(j, j) += next - fit.lambda;
      fit.lambda = next;
      obj = objective(beta, fit.lambda);
      g = ev.grad;
      for (std::size_t j = 0; j < p; ++j) g[j] -= fit.lambda * beta[j];
      chol = ev.info;
      if (fit.lambda > 1e12) throw NumericError("cox: information matrix cannot be regularised");
    }
    fit.iterations = it;
    if (norm_inf(g) < 1e-10) break;
    const Vec step = cholesky_solve(chol, g);
    double t = 1.0, next_obj = obj;
    Vec next(p);
    for (int half = 0; half < 40; ++half, t /= 2) {
      for (std::size_t j = 0; j < p; ++j) next[j] = beta[j] + t * step[j];
      next_obj = objective(next, fit.lambda);
      if (next_obj >= obj) break;
    }
    if (!(next_obj >= obj)) break;
    converged = next_obj - obj <= 1e-13 * (1.0 + std::fabs(obj)) && norm_inf(step) * t < 1e-9;
    beta = next;
    obj = next_obj;
  }
  if (!converged && fit.iterations >= 100) fit.warnings.push_back("cox: Newton iterations hit the cap of 100");

  auto ev = cox_eval(data, xc, beta, true, order);
  for (std::size_t j = 0; j < p; ++j) ev.info(j, j) += fit.lambda;
  chol = ev.info;
  if (!cholesky(chol)) throw NumericError("cox: information matrix not positive definite at the optimum");
  fit.beta = beta;
  fit.log_likelihood = ev.loglik;
  for (std::size_t j = 0; j < p; ++j) {
    Vec e(p, 0.0);
    e[j] = 1.0;
    const double var = cholesky_solve(chol, e)[j];
    const double se = std::sqrt(var);
    fit.se.push_back(se);
    fit.hr.push_back(std::exp(beta[j]));
    fit.ci_lo.push_back(std::exp(beta[j] - 1.959963984540054 * se));
    fit.ci_hi.push_back(std::exp(beta[j] + 1.959963984540054 * se));
  }

  // Breslow baseline at x = 0 (un-centred).
  double offset = 0;
  for (std::size_t j = 0; j < p; ++j) offset += centre[j] * beta[j];
  for (const auto& so : order) {
    CoxFit::Baseline base;
    std::vector<std::pair<double, double>> steps;
    double s0 = 0;
    const auto& idx = so.idx;
    for (std::size_t a = 0; a < idx.size();) {
      std::size_t b = a;
      const double t = data.time[idx[a]];
      double events = 0;
      while (b < idx.size() && data.time[idx[b]] == t) {
        double e = 0;
        for (std::size_t j = 0; j < p; ++j) e += beta[j] * xc(idx[b], j);
        s0 += std::exp(e);
        events += data.event[idx[b]];
        ++b;
      }
      if (events > 0) steps.emplace_back(t, events / s0);
      a = b;
    }
    std::reverse(steps.begin(), steps.end());
    double cum = 0;
    for (const auto& [t, dh] : steps) {
      cum += dh * std::exp(-offset);
      base.time.push_back(t);
      base.cumhaz.push_back(cum);
    }
    for (const auto i : idx) base.max_followup = std::max(base.max_followup, data.time[i]);
    fit.baseline[so.stratum] = std::move(base);
  }
  return fit;
}

std::vector<SurvivalPoint> survival_curve(const CoxFit& fit, int stratum, std::span<const double> profile,
                                          std::span<const double> t_grid) {
  if (profile.size() != fit.beta.size())
    throw ShapeError("survival_curve: profile has " + std::to_string(profile.size()) + " values, fit has " +
                     std::to_string(fit.beta.size()));
  const auto it = fit.baseline.find(stratum);
  if (it == fit.baseline.end()) throw ContractError("survival_curve: unknown stratum " + std::to_string(stratum));
  const auto& base = it->second;
  double eta = 0;
  for (std::size_t j = 0; j < profile.size(); ++j) eta += fit.beta[j] * profile[j];
  const double risk = std::exp(eta);
  std::vector<SurvivalPoint> out;
  for (const double t : t_grid) {
    const double tt = std::min(t, base.max_followup);
    const auto pos = std::upper_bound(base.time.begin(), base.time.end(), tt) - base.time.begin();
    const double cum = pos == 0 ? 0.0 : base.cumhaz[static_cast<std::size_t>(pos - 1)];
    out.push_back({t, t <= 0 ? 1.0 : std::exp(-cum * risk), t > base.max_followup});
  }
  return out;
}

std::vector<KaplanMeierPoint> kaplan_meier(std::span<const double> time, std::span<const int> event) {
  if (time.size() != event.size()) throw ShapeError("kaplan_meier: lengths differ");
  std::vector<std::size_t> idx(time.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return time[a] < time[b]; });
  std::vector<KaplanMeierPoint> out{{0.0, 1.0}};
  double s = 1.0;
  std::size_t at_risk = time.size();
  for (std::size_t a = 0; a < idx.size();) {
    std::size_t b = a;
    double d = 0;
    while (b < idx.size() && time[idx[b]] == time[idx[a]]) d += event[idx[b++]];
    if (d > 0) {
      s *= 1.0 - d / static_cast<double>(at_risk);
      out.push_back({time[idx[a]], s});
    }
    at_risk -= b - a;
    a = b;
  }
  return out;
}

CoxData cox_data(std::span<const Subject> subjects, std::span<const double> age,
                 const std::vector<std::array<double, kDiseaseCount>>* disease) {
  const std::size_t n = subjects.size();
  if (!age.empty() && age.size() != n) throw ShapeError("cox_data: age override length differs");
  if (disease != nullptr && disease->size() != n) throw ShapeError("cox_data: disease override length differs");
  CoxData d;
  d.names.push_back("age");
  for (const auto k : kDiseases) d.names.push_back(column_name(k));
  d.x = Matrix(n, 1 + kDiseaseCount);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = subjects[i];
    d.x(i, 0) = age.empty() ? s.age : age[i];
    for (std::size_t k = 0; k < kDiseaseCount; ++k) d.x(i, 1 + k) = disease ? (*disease)[i][k] : s.disease[k];
    d.time.push_back(s.followup_years);
    d.event.push_back(s.event);
    d.stratum.push_back(s.sex);
  }
  return d;
}

HazardComparison hazard_comparison(std::span<const Subject> subjects, std::span<const double> predicted_age,
                                   const std::vector<std::array<double, kDiseaseCount>>& predicted_disease,
                                   double lambda) {
  HazardComparison out;
  out.actual = fit_cox(cox_data(subjects), lambda);
  out.predicted = fit_cox(cox_data(subjects, predicted_age, &predicted_disease), lambda);
  for (const auto* fit : {&out.actual, &out.predicted}) {
    const std::string arm = fit == &out.actual ? "actual" : "predicted";
    for (std::size_t j = 0; j < fit->names.size(); ++j)
      out.rows.push_back({fit->names[j], arm, fit->hr[j], fit->ci_lo[j], fit->ci_hi[j]});
  }
  for (std::size_t j = 0; j < out.actual.names.size(); ++j)
    out.overlap[out.actual.names[j]] = std::max(out.actual.ci_lo[j], out.predicted.ci_lo[j]) <=
                                       std::min(out.actual.ci_hi[j], out.predicted.ci_hi[j]);
  return out;
}

}  // namespace histoage

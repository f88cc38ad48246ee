#pragma once

// Agreement with human judgments: Pearson and Spearman correlation with
// t-approximation p-values, Cohen's kappa between annotators, 2-D projection
// of sentence representations, and the per-split correlation table.

#include "cmn/corpus.hpp"
#include "cmn/evaluator.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace cmn {

enum class CorrelationKind { pearson, spearman };

struct CorrelationResult {
  double coefficient = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  CorrelationKind kind = CorrelationKind::pearson;
};

// Two-sided p-value of a correlation coefficient r over n samples.
inline double correlation_p_value(double r, std::size_t n) {
  if (n < 3) throw Error("correlation p-value needs n >= 3");
  const double df = static_cast<double>(n - 2);
  const double r2 = std::min(1.0, r * r);
  if (r2 >= 1.0) return 0.0;
  const double t = std::abs(r) * std::sqrt(df / (1.0 - r2));
  boost::math::students_t dist(df);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, t)), 0.0, 1.0);
}

namespace detail {

inline double pearson_coefficient(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw Error("correlation undefined: zero variance input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("correlation: length mismatch");
  if (a.size() < 3) throw Error("correlation: need at least 3 samples");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw Error("correlation: non-finite input");
}

}  // namespace detail

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline CorrelationResult pearson(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  CorrelationResult r;
  r.kind = CorrelationKind::pearson;
  r.n = a.size();
  r.coefficient = detail::pearson_coefficient(a, b);
  r.p_value = correlation_p_value(r.coefficient, r.n);
  return r;
}

inline CorrelationResult spearman(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  CorrelationResult r;
  r.kind = CorrelationKind::spearman;
  r.n = a.size();
  r.coefficient = detail::pearson_coefficient(ra, rb);
  r.p_value = correlation_p_value(r.coefficient, r.n);
  return r;
}

struct KappaResult {
  double kappa = 0.0;
  double observed_agreement = 0.0;
  double expected_agreement = 0.0;
  std::size_t categories = 0;
};

template <class T>
KappaResult cohen_kappa(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw Error("cohen_kappa: length mismatch");
  if (a.empty()) throw Error("cohen_kappa: empty ratings");
  std::map<T, std::pair<double, double>> marginals;
  double agree = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    marginals[a[i]].first += 1.0;
    marginals[b[i]].second += 1.0;
    if (a[i] == b[i]) agree += 1.0;
  }
  const double n = static_cast<double>(a.size());
  KappaResult k;
  k.categories = marginals.size();
  k.observed_agreement = agree / n;
  for (const auto& [cat, m] : marginals) k.expected_agreement += (m.first / n) * (m.second / n);
  if (k.expected_agreement >= 1.0) {
    if (k.observed_agreement < 1.0) throw Error("cohen_kappa: degenerate marginals");
    k.kappa = 1.0;
    return k;
  }
  k.kappa = (k.observed_agreement - k.expected_agreement) / (1.0 - k.expected_agreement);
  return k;
}

template <class T>
KappaResult cohen_kappa(const std::vector<T>& a, const std::vector<T>& b) {
  return cohen_kappa(std::span<const T>(a), std::span<const T>(b));
}

// Pairwise kappa between annotators over every (pair_id, aspect) item both rated.
struct KappaTable {
  std::vector<std::string> annotators;
  std::vector<std::vector<double>> kappa;  // symmetric, unit diagonal
  std::vector<std::vector<std::size_t>> shared_items;

  double mean_off_diagonal() const {
    double s = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < annotators.size(); ++i)
      for (std::size_t j = i + 1; j < annotators.size(); ++j) {
        s += kappa[i][j];
        ++n;
      }
    return n ? s / n : 1.0;
  }
};

inline KappaTable pairwise_kappa(const std::vector<AnnotationRecord>& records) {
  std::map<std::string, std::map<std::pair<std::string, int>, int>> by_annotator;
  for (const auto& r : records) {
    auto& items = by_annotator[r.annotator_id];
    if (r.appropriateness) items[{r.pair_id, 0}] = *r.appropriateness;
    if (r.coherence) items[{r.pair_id, 1}] = *r.coherence;
  }
  if (by_annotator.size() < 2) throw Error("kappa: need at least 2 annotators");
  KappaTable t;
  for (const auto& [id, items] : by_annotator) t.annotators.push_back(id);
  const std::size_t m = t.annotators.size();
  t.kappa.assign(m, std::vector<double>(m, 1.0));
  t.shared_items.assign(m, std::vector<std::size_t>(m, 0));
  for (std::size_t i = 0; i < m; ++i) {
    t.shared_items[i][i] = by_annotator[t.annotators[i]].size();
    for (std::size_t j = i + 1; j < m; ++j) {
      const auto& ai = by_annotator[t.annotators[i]];
      const auto& aj = by_annotator[t.annotators[j]];
      std::vector<int> ra, rb;
      for (const auto& [key, v] : ai) {
        auto it = aj.find(key);
        if (it != aj.end()) {
          ra.push_back(v);
          rb.push_back(it->second);
        }
      }
      if (ra.empty())
        throw Error("kappa: annotators '" + t.annotators[i] + "' and '" + t.annotators[j] + "' share no items");
      const double k = cohen_kappa(ra, rb).kappa;
      t.kappa[i][j] = t.kappa[j][i] = k;
      t.shared_items[i][j] = t.shared_items[j][i] = ra.size();
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Projection

enum class ProjectionKind { reference, response };
enum class ProjectionMethod { pca, tsne };

inline const char* to_string(ProjectionKind k) { return k == ProjectionKind::reference ? "reference" : "response"; }

struct ProjectionInput {
  std::string pair_id;
  ProjectionKind kind = ProjectionKind::reference;
  Eigen::VectorXd vector;
};

struct ProjectionPoint {
  std::string pair_id;
  ProjectionKind kind = ProjectionKind::reference;
  double x = 0.0;
  double y = 0.0;
};

namespace detail {

inline Eigen::MatrixXd stack_inputs(const std::vector<ProjectionInput>& in) {
  if (in.size() < 3) throw Error("projection: need at least 3 vectors");
  const auto d = in.front().vector.size();
  if (d < 1) throw Error("projection: empty vectors");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(in.size()), d);
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i].vector.size() != d) throw Error("projection: vectors differ in dimension");
    x.row(static_cast<Eigen::Index>(i)) = in[i].vector.transpose();
  }
  return x;
}

// Top-2 principal axes; each axis is oriented so its largest-magnitude
// component is positive.
inline Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto d = x.cols();
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(d, 2);
  for (int k = 0; k < std::min<Eigen::Index>(2, d); ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(k) = v;
  }
  return centered * axes;
}

// Exact t-SNE (O(n^2)) with perplexity calibration, early exaggeration and
// momentum gradient descent with per-coordinate gains.
inline Eigen::MatrixXd tsne_2d(const Eigen::MatrixXd& x, std::uint64_t seed, double perplexity = 30.0,
                               int iterations = 750) {
  const Eigen::Index n = x.rows();
  perplexity = std::min(perplexity, std::max(1.0, (static_cast<double>(n) - 1.0) / 3.0));
  Eigen::MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d2(i, j) = (x.row(i) - x.row(j)).squaredNorm();

  const double target = std::log(perplexity);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 64; ++it) {
      double z = 0.0, h = 0.0;
      double dmin = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) dmin = std::min(dmin, d2(i, j));
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = std::exp(-beta * (d2(i, j) - dmin));
        p(i, j) = w;
        z += w;
      }
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        p(i, j) /= z;
        if (p(i, j) > 0) h -= p(i, j) * std::log(p(i, j));
      }
      if (std::abs(h - target) < 1e-5) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
  }
  p = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1e-4);
  Eigen::MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = normal(rng);
  Eigen::MatrixXd vel = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  const double lr = 200.0;
  for (int it = 0; it < iterations; ++it) {
    const double exaggeration = it < 100 ? 12.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    Eigen::MatrixXd num(n, n);
    double zsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        zsum += num(i, j);
      }
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, 2);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = std::max(num(i, j) / zsum, 1e-12);
        grad.row(i) += 4.0 * (exaggeration * p(i, j) - q) * num(i, j) * (y.row(i) - y.row(j));
      }
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      const bool same = (grad.data()[k] > 0) == (vel.data()[k] > 0);
      gains.data()[k] = std::max(0.01, same ? gains.data()[k] * 0.8 : gains.data()[k] + 0.2);
      vel.data()[k] = momentum * vel.data()[k] - lr * gains.data()[k] * grad.data()[k];
      y.data()[k] += vel.data()[k];
    }
    y = y.rowwise() - y.colwise().mean();
  }
  return y;
}

}  // namespace detail

inline std::vector<ProjectionPoint> project_embeddings(const std::vector<ProjectionInput>& vectors,
                                                       ProjectionMethod method, std::uint64_t seed = 0) {
  const Eigen::MatrixXd x = detail::stack_inputs(vectors);
  const Eigen::MatrixXd y = method == ProjectionMethod::pca ? detail::pca_2d(x) : detail::tsne_2d(x, seed);
  std::vector<ProjectionPoint> out;
  out.reserve(vectors.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (!std::isfinite(y(r, 0)) || !std::isfinite(y(r, 1))) throw Error("projection produced non-finite coordinates");
    out.push_back({vectors[i].pair_id, vectors[i].kind, y(r, 0), y(r, 1)});
  }
  return out;
}

inline void write_projection_csv(std::ostream& out, const std::vector<ProjectionPoint>& points) {
  out << std::setprecision(17) << "pair_id,kind,x,y\n";
  for (const auto& p : points) out << p.pair_id << ',' << to_string(p.kind) << ',' << p.x << ',' << p.y << '\n';
}

// ---------------------------------------------------------------------------
// Correlation table

struct CorrelationRow {
  std::string split;
  std::string metric_variant;
  CorrelationResult pearson;
  CorrelationResult spearman;
};

inline std::vector<CorrelationRow> correlate_run(const std::vector<ScoreRecord>& scores,
                                                 const std::map<std::string, HumanJudgement>& humans,
                                                 const EvalSetSplit& split) {
  std::map<std::string, const ScoreRecord*> by_id;
  for (const auto& r : scores) by_id[r.pair_id] = &r;

  std::vector<std::string> missing;
  for (const auto* ids : {&split.standard, &split.diverse})
    for (const auto& id : *ids)
      if (!by_id.count(id) || !humans.count(id)) missing.push_back(id);
  if (!missing.empty()) {
    std::string msg = "pairs missing from scores or annotations:";
    for (const auto& id : missing) msg += " " + id;
    throw Error(msg);
  }

  struct Variant {
    const char* name;
    double ScoreRecord::*field;
  };
  const Variant variants[] = {{"score", &ScoreRecord::score},
                              {"score_wo_nsp", &ScoreRecord::score_wo_nsp},
                              {"score_wo_mi", &ScoreRecord::score_wo_mi}};

  std::vector<CorrelationRow> rows;
  for (const auto& [split_name, ids] :
       {std::pair<std::string, const std::vector<std::string>*>{"standard", &split.standard},
        std::pair<std::string, const std::vector<std::string>*>{"diverse", &split.diverse}}) {
    if (ids->empty()) continue;
    std::vector<double> human;
    for (const auto& id : *ids) human.push_back(humans.at(id).human_score);
    for (const auto& v : variants) {
      std::vector<double> metric;
      for (const auto& id : *ids) metric.push_back(by_id.at(id)->*(v.field));
      try {
        rows.push_back({split_name, v.name, pearson(metric, human), spearman(metric, human)});
      } catch (const Error& e) {
        throw Error(split_name + "/" + v.name + ": " + e.what());
      }
    }
  }
  return rows;
}

inline void write_correlation_csv(std::ostream& out, const std::vector<CorrelationRow>& rows) {
  out << std::setprecision(10) << "split,metric_variant,pearson,pearson_p,spearman,spearman_p,n\n";
  for (const auto& r : rows)
    out << r.split << ',' << r.metric_variant << ',' << r.pearson.coefficient << ',' << r.pearson.p_value << ','
        << r.spearman.coefficient << ',' << r.spearman.p_value << ',' << r.pearson.n << '\n';
}

inline void write_correlation_text(std::ostream& out, const std::vector<CorrelationRow>& rows) {
  auto fmt = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  out << std::left << std::setw(10) << "split" << std::setw(15) << "metric_variant" << std::right << std::setw(10)
      << "pearson" << std::setw(12) << "pearson_p" << std::setw(10) << "spearman" << std::setw(12) << "spearman_p"
      << std::setw(7) << "n" << '\n';
  for (const auto& r : rows)
    out << std::left << std::setw(10) << r.split << std::setw(15) << r.metric_variant << std::right << std::setw(10)
        << fmt(r.pearson.coefficient) << std::setw(12) << fmt(r.pearson.p_value) << std::setw(10)
        << fmt(r.spearman.coefficient) << std::setw(12) << fmt(r.spearman.p_value) << std::setw(7) << r.pearson.n
        << '\n';
}

}  // namespace cmn

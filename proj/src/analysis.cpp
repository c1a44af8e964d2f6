#include "dualenc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "dualenc/errors.hpp"
#include "dualenc/retrieval.hpp"

namespace dualenc {

void TsneConfig::validate() const {
  if (!(perplexity > 1.0)) throw ConfigError("t-SNE perplexity must be > 1");
  if (iterations < 1) throw ConfigError("t-SNE iterations must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("t-SNE learning_rate must be > 0");
  if (!(early_exaggeration >= 1.0)) throw ConfigError("t-SNE early_exaggeration must be >= 1");
  if (!(perplexity_tolerance > 0.0)) throw ConfigError("t-SNE perplexity tolerance must be > 0");
  if (max_bisection_steps < 1) throw ConfigError("t-SNE needs at least one bisection step");
}

namespace {

std::vector<double> normalized_rows(std::span<const double> x, std::size_t n, std::size_t d) {
  if (x.size() != n * d) throw DimensionError("embedding buffer size does not match n x d");
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += out[i * d + k] * out[i * d + k];
    const double norm = std::sqrt(s);
    if (!(norm > 0.0)) {
      throw DegenerateError("zero-norm embedding at row " + std::to_string(i), static_cast<long>(i));
    }
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] /= norm;
  }
  return out;
}

// Fills row i of P(j|i) for precision beta and returns its entropy (nats).
double conditional_row(std::span<const double> dist_row, std::size_t i, double beta,
                       std::span<double> out) {
  double min_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < dist_row.size(); ++j) {
    if (j != i) min_d = std::min(min_d, dist_row[j]);
  }
  // Shifting by the nearest distance keeps at least one weight at exp(0).
  double z = 0.0;
  for (std::size_t j = 0; j < dist_row.size(); ++j) {
    out[j] = j == i ? 0.0 : std::exp(-beta * (dist_row[j] - min_d));
    z += out[j];
  }
  double weighted = 0.0;
  for (std::size_t j = 0; j < dist_row.size(); ++j) {
    out[j] /= z;
    weighted += out[j] * (dist_row[j] - min_d);
  }
  return std::log(z) + beta * weighted;
}

double kl_divergence(std::span<const double> p, std::span<const double> y, std::size_t n) {
  std::vector<double> num(n * n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y[2 * i] - y[2 * j];
      const double dy = y[2 * i + 1] - y[2 * j + 1];
      const double v = 1.0 / (1.0 + dx * dx + dy * dy);
      num[i * n + j] = num[j * n + i] = v;
      z += 2.0 * v;
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || p[i * n + j] <= 0.0) continue;
      const double q = std::max(num[i * n + j] / z, 1e-300);
      kl += p[i * n + j] * std::log(p[i * n + j] / q);
    }
  }
  return kl;
}

}  // namespace

std::vector<double> normalized_sq_distances(std::span<const double> x, std::size_t n,
                                            std::size_t d) {
  const auto v = normalized_rows(x, n, d);
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = v[i * d + k] - v[j * d + k];
        s += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = s;
    }
  }
  return dist;
}

ConditionalAffinities conditional_affinities(std::span<const double> sq_dist, std::size_t n,
                                             const TsneConfig& config) {
  config.validate();
  if (sq_dist.size() != n * n) throw DimensionError("distance matrix is not n x n");
  if (n < 4) throw ConfigError("t-SNE needs at least 4 points, got " + std::to_string(n));
  if (config.perplexity >= static_cast<double>(n - 1)) {
    throw ConfigError("t-SNE perplexity " + std::to_string(config.perplexity) +
                      " is infeasible for " + std::to_string(n) +
                      " points (must be below n - 1)");
  }
  bool any_positive = false;
  for (double v : sq_dist) any_positive = any_positive || v > 0.0;
  if (!any_positive) throw DegenerateError("all points coincide; pairwise distances are zero");

  ConditionalAffinities out;
  out.p.assign(n * n, 0.0);
  out.perplexity.assign(n, 0.0);
  out.beta.assign(n, 1.0);
  const double target = config.perplexity;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = sq_dist.subspan(i * n, n);
    std::span<double> p_row(out.p.data() + i * n, n);
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double perp = std::exp(conditional_row(row, i, beta, p_row));
    std::size_t steps = 0;
    while (std::abs(perp - target) > config.perplexity_tolerance &&
           steps < config.max_bisection_steps) {
      // Larger beta narrows the kernel and lowers perplexity.
      if (perp > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
      perp = std::exp(conditional_row(row, i, beta, p_row));
      ++steps;
    }
    if (std::abs(perp - target) > config.perplexity_tolerance) {
      throw ConfigError("t-SNE perplexity " + std::to_string(target) + " not reachable for point " +
                        std::to_string(i) + " (closest " + std::to_string(perp) + " after " +
                        std::to_string(steps) + " bisection steps)");
    }
    out.perplexity[i] = perp;
    out.beta[i] = beta;
  }
  return out;
}

std::vector<double> symmetrize(std::span<const double> conditional, std::size_t n) {
  std::vector<double> p(n * n, 0.0);
  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (conditional[i * n + j] + conditional[j * n + i]) / denom;
      p[i * n + j] = p[j * n + i] = v;
    }
  }
  return p;
}

TsneResult tsne(std::span<const double> x, std::size_t n, std::size_t d,
                const TsneConfig& config) {
  config.validate();
  if (n < 4) throw ConfigError("t-SNE needs at least 4 points, got " + std::to_string(n));
  const auto dist = normalized_sq_distances(x, n, d);
  const auto cond = conditional_affinities(dist, n, config);
  auto p = symmetrize(cond.p, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) p[i * n + j] = std::max(p[i * n + j], 1e-12);
    }
  }

  TsneResult result;
  result.perplexity = cond.perplexity;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> init(0.0, 1e-4);
  std::vector<double> y(2 * n);
  for (double& v : y) v = init(rng);
  std::vector<double> velocity(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n), num(n * n);

  result.kl_initial = kl_divergence(p, y, n);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const double exaggeration = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
    const double momentum = it < config.momentum_switch ? config.initial_momentum : config.final_momentum;

    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[2 * i] - y[2 * j];
        const double dy = y[2 * i + 1] - y[2 * j + 1];
        const double v = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = v;
        z += 2.0 * v;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = (exaggeration * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
        gx += w * (y[2 * i] - y[2 * j]);
        gy += w * (y[2 * i + 1] - y[2 * j + 1]);
      }
      grad[2 * i] = 4.0 * gx;
      grad[2 * i + 1] = 4.0 * gy;
    }
    for (std::size_t k = 0; k < 2 * n; ++k) {
      const bool same_sign = (grad[k] > 0.0) == (velocity[k] > 0.0);
      gains[k] = same_sign ? std::max(gains[k] * 0.8, 0.01) : gains[k] + 0.2;
      velocity[k] = momentum * velocity[k] - config.learning_rate * gains[k] * grad[k];
      y[k] += velocity[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
    for (double v : y) {
      if (!std::isfinite(v)) throw NumericError("t-SNE diverged at iteration " + std::to_string(it + 1));
    }
    if (config.kl_every > 0 && ((it + 1) % config.kl_every == 0 || it + 1 == config.iterations)) {
      result.kl_trace.push_back(kl_divergence(p, y, n));
      result.kl_trace_iterations.push_back(it + 1);
    }
  }
  result.kl_final = result.kl_trace.empty() || result.kl_trace_iterations.back() != config.iterations
                        ? kl_divergence(p, y, n)
                        : result.kl_trace.back();
  result.coords = std::move(y);
  return result;
}

// ---- k-means ---------------------------------------------------------------

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

KMeansResult lloyd(std::span<const double> x, std::size_t n, std::size_t d, std::size_t k,
                   std::mt19937_64& rng, std::size_t max_iterations) {
  KMeansResult r;
  r.centroids.assign(k * d, 0.0);
  // k-means++ seeding.
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  const std::size_t c0 = first(rng);
  std::copy_n(x.data() + c0 * d, d, r.centroids.data());
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = sq_dist(x.data() + i * d, r.centroids.data(), d);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = unit(rng) * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= nearest[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    std::copy_n(x.data() + pick * d, d, r.centroids.data() + c * d);
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sq_dist(x.data() + i * d, r.centroids.data() + c * d, d));
    }
  }

  r.labels.assign(n, -1);
  std::vector<double> sums(k * d);
  std::vector<std::size_t> counts(k);
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sq_dist(x.data() + i * d, r.centroids.data() + c * d, d);
        if (dd < best_d) {
          best_d = dd;
          best = static_cast<int>(c);
        }
      }
      if (r.labels[i] != best) {
        r.labels[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(r.labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += x[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t j = 0; j < d; ++j) {
        r.centroids[c * d + j] = sums[c * d + j] / static_cast<double>(counts[c]);
      }
    }
  }
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r.inertia += sq_dist(x.data() + i * d, r.centroids.data() + static_cast<std::size_t>(r.labels[i]) * d, d);
  }
  return r;
}

}  // namespace

KMeansResult kmeans(std::span<const double> x, std::size_t n, std::size_t d, std::size_t k,
                    std::size_t restarts, std::uint64_t seed, std::size_t max_iterations) {
  if (x.size() != n * d) throw DimensionError("k-means input size does not match n x d");
  if (k < 1 || k > n) throw ArgumentError("k-means needs 1 <= k <= n");
  if (restarts < 1) throw ArgumentError("k-means needs at least one restart");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  for (std::size_t r = 0; r < restarts; ++r) {
    auto candidate = lloyd(x, n, d, k, rng, max_iterations);
    if (candidate.inertia < best.inertia) best = std::move(candidate);
  }
  return best;
}

double two_cluster_agreement(std::span<const int> labels, std::span<const int> truth) {
  if (labels.size() != truth.size() || labels.empty()) {
    throw DimensionError("label vectors must be non-empty and of equal length");
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) same += labels[i] == truth[i];
  const double frac = static_cast<double>(same) / static_cast<double>(labels.size());
  return std::max(frac, 1.0 - frac);
}

std::string SeparationReport::to_text() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "centroid_cosine = %.17g\nkmeans2_agreement = %.17g\n"
                "tsne_kl_initial = %.17g\ntsne_kl_final = %.17g\n",
                centroid_cosine, kmeans2_agreement, tsne_kl_initial, tsne_kl_final);
  return buf;
}

std::string SeparationReport::csv_header() {
  return "centroid_cosine,kmeans2_agreement,tsne_kl_initial,tsne_kl_final";
}

std::string SeparationReport::csv_row() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g", centroid_cosine, kmeans2_agreement,
                tsne_kl_initial, tsne_kl_final);
  return buf;
}

SeparationReport separation_metrics(std::span<const double> q, std::span<const double> a,
                                    std::size_t d, const SeparationConfig& config) {
  if (d == 0 || q.empty() || a.empty() || q.size() % d != 0 || a.size() % d != 0) {
    throw ConfigError("separation metrics need non-empty question and answer sets");
  }
  const std::size_t nq = q.size() / d, na = a.size() / d;
  const auto qn = normalized_rows(q, nq, d);
  const auto an = normalized_rows(a, na, d);
  std::vector<double> cq(d, 0.0), ca(d, 0.0);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t k = 0; k < d; ++k) cq[k] += qn[i * d + k];
  }
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t k = 0; k < d; ++k) ca[k] += an[i * d + k];
  }
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  if (!(norm(cq) > 1e-12 * static_cast<double>(nq))) throw DegenerateError("question centroid has zero norm");
  if (!(norm(ca) > 1e-12 * static_cast<double>(na))) throw DegenerateError("answer centroid has zero norm");

  SeparationReport r;
  r.centroid_cosine = cosine_sim(cq, ca);
  std::vector<double> all(qn);
  all.insert(all.end(), an.begin(), an.end());
  const auto km = kmeans(all, nq + na, d, 2, config.restarts, config.seed);
  std::vector<int> truth(nq + na, 0);
  std::fill(truth.begin() + static_cast<std::ptrdiff_t>(nq), truth.end(), 1);
  r.kmeans2_agreement = two_cluster_agreement(km.labels, truth);
  return r;
}

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, std::uint64_t seed) {
  if (n > population) {
    throw ConfigError("cannot sample " + std::to_string(n) + " items from " +
                      std::to_string(population));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(population);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  return idx;
}

EmbeddingSample sample_eval_embeddings(const DualEncoderModel& model, const Tokenizer& tokenizer,
                                       std::span<const QAPair> eval_pairs,
                                       std::size_t n_per_side, std::uint64_t seed) {
  if (n_per_side == 0) throw ConfigError("sample_per_side must be >= 1");
  if (eval_pairs.size() < n_per_side) {
    throw ConfigError("evaluation set has " + std::to_string(eval_pairs.size()) +
                      " pairs, fewer than sample_per_side " + std::to_string(n_per_side));
  }
  EmbeddingSample s;
  s.question_indices = sample_indices(eval_pairs.size(), n_per_side, seed);
  // A derived seed keeps the two sides independent draws.
  s.answer_indices = sample_indices(eval_pairs.size(), n_per_side, seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::string> qs, as;
  for (auto i : s.question_indices) qs.push_back(eval_pairs[i].question);
  for (auto i : s.answer_indices) as.push_back(eval_pairs[i].answer);
  s.questions = encode_texts(model, Tower::kQuestion, tokenizer, qs);
  s.answers = encode_texts(model, Tower::kAnswer, tokenizer, as);
  return s;
}

}  // namespace dualenc

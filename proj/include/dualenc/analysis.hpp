#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dualenc/data.hpp"
#include "dualenc/sharing.hpp"
#include "dualenc/tokenizer.hpp"

namespace dualenc {

// Exact t-SNE with the usual optimisation schedule: early exaggeration,
// momentum switch and per-coordinate gains.
struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  std::uint64_t seed = 0;
  std::size_t sample_per_side = 400;
  double perplexity_tolerance = 1e-5;
  std::size_t max_bisection_steps = 64;
  std::size_t kl_every = 50;  // KL trace sampling period

  void validate() const;
};

// Row-conditional neighbour distributions P(j|i) [n x n] and the perplexity
// realised by each row.
struct ConditionalAffinities {
  std::vector<double> p;
  std::vector<double> perplexity;
  std::vector<double> beta;  // precision 1 / (2 sigma^2) per row
};

// Squared Euclidean distances between L2-normalised rows of x [n x d].
std::vector<double> normalized_sq_distances(std::span<const double> x,
                                            std::size_t n, std::size_t d);

ConditionalAffinities conditional_affinities(std::span<const double> sq_dist,
                                             std::size_t n, const TsneConfig& config);

// (P + P^T) / 2n, exactly symmetric.
std::vector<double> symmetrize(std::span<const double> conditional, std::size_t n);

struct TsneResult {
  std::vector<double> coords;  // [n x 2]
  std::vector<double> kl_trace;
  std::vector<std::size_t> kl_trace_iterations;
  double kl_initial = 0.0;
  double kl_final = 0.0;
  std::vector<double> perplexity;  // realised per point
};

TsneResult tsne(std::span<const double> x, std::size_t n, std::size_t d,
                const TsneConfig& config);

struct KMeansResult {
  std::vector<int> labels;
  std::vector<double> centroids;  // [k x d]
  double inertia = std::numeric_limits<double>::infinity();
};

// Lloyd iterations from k-means++ seeds; the restart with the lowest inertia
// wins (earliest on ties).
KMeansResult kmeans(std::span<const double> x, std::size_t n, std::size_t d,
                    std::size_t k, std::size_t restarts, std::uint64_t seed,
                    std::size_t max_iterations = 300);

// Fraction of points whose 2-cluster label matches `truth`, maximised over
// the two ways of naming the clusters.
double two_cluster_agreement(std::span<const int> labels, std::span<const int> truth);

struct SeparationReport {
  double centroid_cosine = 0.0;
  double kmeans2_agreement = 0.0;
  double tsne_kl_initial = std::numeric_limits<double>::quiet_NaN();
  double tsne_kl_final = std::numeric_limits<double>::quiet_NaN();

  std::string to_text() const;
  static std::string csv_header();
  std::string csv_row() const;
};

struct SeparationConfig {
  std::size_t restarts = 20;
  std::uint64_t seed = 0;
};

// Both sets are L2-normalised before the centroid and clustering steps.
SeparationReport separation_metrics(std::span<const double> q, std::span<const double> a,
                                    std::size_t d, const SeparationConfig& config = {});

struct EmbeddingSample {
  std::vector<std::size_t> question_indices;
  std::vector<std::size_t> answer_indices;
  std::vector<double> questions;  // [n x d_embed]
  std::vector<double> answers;    // [n x d_embed]
};

// Questions and answers are drawn independently, each without replacement.
EmbeddingSample sample_eval_embeddings(const DualEncoderModel& model,
                                       const Tokenizer& tokenizer,
                                       std::span<const QAPair> eval_pairs,
                                       std::size_t n_per_side, std::uint64_t seed);

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n,
                                        std::uint64_t seed);

}  // namespace dualenc

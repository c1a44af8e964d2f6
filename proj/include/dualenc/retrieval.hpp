#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dualenc/data.hpp"
#include "dualenc/sharing.hpp"
#include "dualenc/tokenizer.hpp"

namespace dualenc {

// Answer embeddings, row-major [count x dim], in corpus order.
struct RetrievalIndex {
  std::vector<double> embeddings;
  std::size_t count = 0;
  std::size_t dim = 0;
  std::string fingerprint;  // of the model that produced the rows

  std::span<const double> row(std::size_t i) const {
    return {embeddings.data() + i * dim, dim};
  }
};

// Encodes texts with one tower, `shards` contiguous ranges in parallel.
// Output rows do not depend on the shard count.
std::vector<double> encode_texts(const DualEncoderModel& model, Tower which,
                                 const Tokenizer& tokenizer,
                                 std::span<const std::string> texts,
                                 std::size_t shards = 1);

RetrievalIndex build_index(const DualEncoderModel& model, const Tokenizer& tokenizer,
                           std::span<const std::string> answers,
                           std::size_t shards = 1);
RetrievalIndex make_index(std::vector<double> embeddings, std::size_t dim,
                          std::string fingerprint = {});

struct SearchHit {
  std::size_t id = 0;
  double score = 0.0;
  bool operator==(const SearchHit&) const = default;
};

// Exact top-k by cosine score, descending; equal scores by ascending id.
std::vector<SearchHit> search(const RetrievalIndex& index,
                              std::span<const double> query, std::size_t k);

// 1-based rank of `gold` under the same ordering as search().
std::size_t rank_of(const RetrievalIndex& index, std::span<const double> query,
                    std::size_t gold);

struct QueryResult {
  std::string id;
  std::optional<std::size_t> rank;  // absent when the gold answer is not in the corpus
};

struct RetrievalReport {
  std::vector<QueryResult> queries;
  double p_at_1 = 0.0;
  double mrr = 0.0;
  std::size_t k = 0;  // candidates ranked per query
  std::size_t missing_gold = 0;

  std::string summary_line() const;
};

// Aggregates per-query ranks; absent ranks count as reciprocal rank 0.
RetrievalReport make_report(std::vector<QueryResult> queries, std::size_t k);

// Ranks each query's gold row among all index rows.
RetrievalReport evaluate_embeddings(const RetrievalIndex& index,
                                    std::span<const double> queries,
                                    std::span<const std::optional<std::size_t>> gold,
                                    std::span<const std::string> query_ids);

// Gold answer of a pair is the first corpus entry equal to its answer text.
RetrievalReport evaluate(const DualEncoderModel& model, const Tokenizer& tokenizer,
                         std::span<const QAPair> eval_pairs,
                         std::span<const std::string> corpus,
                         std::size_t shards = 1);

// Percent change of `mrr` over the ADE baseline `mrr_ade`.
double delta_mrr(double mrr, double mrr_ade);

void write_ranks_csv(const std::filesystem::path& path, const RetrievalReport& report);

}  // namespace dualenc

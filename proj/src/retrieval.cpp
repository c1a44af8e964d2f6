#include "dualenc/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <unordered_map>

#include "dualenc/errors.hpp"

namespace dualenc {

namespace {

constexpr std::size_t kEncodeChunk = 64;

void encode_range(const DualEncoderModel& model, Tower which,
                  std::span<const TokenizedText> items, double* out) {
  NoGradGuard no_grad;
  const std::size_t dim = model.config().d_embed;
  for (std::size_t start = 0; start < items.size(); start += kEncodeChunk) {
    const auto chunk = items.subspan(start, std::min(kEncodeChunk, items.size() - start));
    const auto emb = encode_batch(model, which, pack_batch(chunk)).embedding;
    std::copy(emb.data().begin(), emb.data().end(), out + start * dim);
  }
}

}  // namespace

std::vector<double> encode_texts(const DualEncoderModel& model, Tower which,
                                 const Tokenizer& tokenizer,
                                 std::span<const std::string> texts,
                                 std::size_t shards) {
  const std::size_t dim = model.config().d_embed;
  std::vector<TokenizedText> items;
  items.reserve(texts.size());
  for (const auto& t : texts) items.push_back(tokenizer.tokenize(t, model.config().max_seq_len));
  std::vector<double> out(texts.size() * dim);
  shards = std::clamp<std::size_t>(shards, 1, std::max<std::size_t>(1, items.size()));
  if (shards == 1) {
    encode_range(model, which, items, out.data());
    return out;
  }
  std::vector<std::future<void>> jobs;
  const std::size_t per = (items.size() + shards - 1) / shards;
  for (std::size_t begin = 0; begin < items.size(); begin += per) {
    const std::size_t n = std::min(per, items.size() - begin);
    jobs.push_back(std::async(std::launch::async, [&, begin, n] {
      encode_range(model, which, std::span(items).subspan(begin, n), out.data() + begin * dim);
    }));
  }
  for (auto& j : jobs) j.get();
  return out;
}

RetrievalIndex make_index(std::vector<double> embeddings, std::size_t dim,
                          std::string fingerprint) {
  if (dim == 0 || embeddings.empty() || embeddings.size() % dim != 0) {
    throw ConfigError("retrieval index needs at least one row of positive dimension");
  }
  for (double v : embeddings) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in retrieval index");
  }
  RetrievalIndex index;
  index.count = embeddings.size() / dim;
  index.dim = dim;
  index.embeddings = std::move(embeddings);
  index.fingerprint = std::move(fingerprint);
  return index;
}

RetrievalIndex build_index(const DualEncoderModel& model, const Tokenizer& tokenizer,
                           std::span<const std::string> answers, std::size_t shards) {
  if (answers.empty()) throw ConfigError("answer corpus is empty");
  return make_index(encode_texts(model, Tower::kAnswer, tokenizer, answers, shards),
                    model.config().d_embed, model.fingerprint());
}

namespace {

std::vector<double> scores_for(const RetrievalIndex& index, std::span<const double> query) {
  if (query.size() != index.dim) {
    throw DimensionError("query has dimension " + std::to_string(query.size()) +
                         ", index has " + std::to_string(index.dim));
  }
  std::vector<double> scores(index.count);
  for (std::size_t i = 0; i < index.count; ++i) scores[i] = cosine_sim(query, index.row(i));
  return scores;
}

bool ranks_before(double sa, std::size_t a, double sb, std::size_t b) {
  return sa > sb || (sa == sb && a < b);
}

}  // namespace

std::vector<SearchHit> search(const RetrievalIndex& index,
                              std::span<const double> query, std::size_t k) {
  if (k < 1 || k > index.count) {
    throw ArgumentError("k must be in [1, " + std::to_string(index.count) + "], got " +
                        std::to_string(k));
  }
  const auto scores = scores_for(index, query);
  std::vector<std::size_t> ids(index.count);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  auto before = [&](std::size_t a, std::size_t b) {
    return ranks_before(scores[a], a, scores[b], b);
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), before);
  std::vector<SearchHit> hits(k);
  for (std::size_t i = 0; i < k; ++i) hits[i] = {ids[i], scores[ids[i]]};
  return hits;
}

std::size_t rank_of(const RetrievalIndex& index, std::span<const double> query,
                    std::size_t gold) {
  if (gold >= index.count) throw ArgumentError("gold id out of range");
  const auto scores = scores_for(index, query);
  std::size_t rank = 1;
  for (std::size_t i = 0; i < index.count; ++i) {
    if (i != gold && ranks_before(scores[i], i, scores[gold], gold)) ++rank;
  }
  return rank;
}

std::string RetrievalReport::summary_line() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "p_at_1=%.6f mrr=%.6f n=%zu", p_at_1, mrr, queries.size());
  return buf;
}

RetrievalReport make_report(std::vector<QueryResult> queries, std::size_t k) {
  if (queries.empty()) throw ConfigError("evaluation set is empty");
  RetrievalReport r;
  r.k = k;
  double hits = 0.0, rr = 0.0;
  for (const auto& q : queries) {
    if (!q.rank) {
      ++r.missing_gold;
      continue;
    }
    if (*q.rank == 0) throw ArgumentError("ranks are 1-based");
    if (*q.rank == 1) hits += 1.0;
    rr += 1.0 / static_cast<double>(*q.rank);
  }
  const double n = static_cast<double>(queries.size());
  r.p_at_1 = hits / n;
  r.mrr = rr / n;
  r.queries = std::move(queries);
  return r;
}

RetrievalReport evaluate_embeddings(const RetrievalIndex& index,
                                    std::span<const double> queries,
                                    std::span<const std::optional<std::size_t>> gold,
                                    std::span<const std::string> query_ids) {
  if (gold.empty()) throw ConfigError("evaluation set is empty");
  if (queries.size() != gold.size() * index.dim || query_ids.size() != gold.size()) {
    throw DimensionError("query embeddings, gold ids and query ids disagree in count");
  }
  std::vector<QueryResult> results(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) {
    results[i].id = query_ids[i];
    if (gold[i]) results[i].rank = rank_of(index, queries.subspan(i * index.dim, index.dim), *gold[i]);
  }
  return make_report(std::move(results), index.count);
}

RetrievalReport evaluate(const DualEncoderModel& model, const Tokenizer& tokenizer,
                         std::span<const QAPair> eval_pairs,
                         std::span<const std::string> corpus, std::size_t shards) {
  if (eval_pairs.empty()) throw ConfigError("evaluation set is empty");
  const auto index = build_index(model, tokenizer, corpus, shards);
  std::unordered_map<std::string_view, std::size_t> first;
  for (std::size_t i = 0; i < corpus.size(); ++i) first.emplace(corpus[i], i);
  std::vector<std::string> questions, ids;
  std::vector<std::optional<std::size_t>> gold;
  for (const auto& p : eval_pairs) {
    questions.push_back(p.question);
    ids.push_back(p.id);
    auto it = first.find(p.answer);
    gold.push_back(it == first.end() ? std::nullopt : std::optional(it->second));
  }
  const auto q = encode_texts(model, Tower::kQuestion, tokenizer, questions, shards);
  return evaluate_embeddings(index, q, gold, ids);
}

double delta_mrr(double mrr, double mrr_ade) {
  if (mrr_ade == 0.0) {
    throw DegenerateError("baseline MRR is zero; relative improvement is undefined");
  }
  return (mrr - mrr_ade) / mrr_ade * 100.0;
}

namespace {

// RFC 4180 quoting for fields holding commas, quotes or line breaks.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

void write_ranks_csv(const std::filesystem::path& path, const RetrievalReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "query_id,rank,reciprocal_rank\n";
  char buf[64];
  for (const auto& q : report.queries) {
    out << csv_field(q.id) << ',';
    if (q.rank) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g", *q.rank, 1.0 / static_cast<double>(*q.rank));
      out << buf << '\n';
    } else {
      out << ",0\n";
    }
  }
}

}  // namespace dualenc

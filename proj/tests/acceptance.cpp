// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dualenc/analysis.hpp"
#include "dualenc/cli.hpp"
#include "dualenc/data.hpp"
#include "dualenc/errors.hpp"
#include "dualenc/retrieval.hpp"
#include "dualenc/sharing.hpp"
#include "dualenc/training.hpp"

using namespace dualenc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "dualenc_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TokenizedText random_text(std::mt19937_64& rng, std::size_t vocab, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<int> id(Tokenizer::kFirstTokenId, static_cast<int>(vocab) - 1);
  TokenizedText t;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < max_len; ++i) {
    t.ids.push_back(i < n ? id(rng) : Tokenizer::kPadId);
    t.mask.push_back(i < n ? 1 : 0);
  }
  return t;
}

// ---- 1 ----------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  EncoderConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 6;
  cfg.d_embed = 8;
  std::mt19937_64 rng(7);
  std::vector<TokenizedText> q, a;
  for (int i = 0; i < 3; ++i) {
    q.push_back(random_text(rng, cfg.vocab_size, cfg.max_seq_len));
    a.push_back(random_text(rng, cfg.vocab_size, cfg.max_seq_len));
  }
  const std::vector<std::size_t> idx{0, 1, 2};
  const Batch batch = make_batch(q, a, idx);
  const LossConfig loss;
  const double eps = 1e-5;

  double worst = 0.0;
  std::size_t checked = 0;
  for (Variant v : all_variants()) {
    auto model = DualEncoderModel::build(cfg, SharingSpec::for_variant(v), 11);
    auto trainable = model.params().trainable();
    for (auto& [name, t] : trainable) t.zero_grad();
    backward(batch_loss(model, batch, loss));
    NoGradGuard no_grad;
    for (auto& [name, t] : trainable) {
      const std::vector<double> analytic(t.grad().begin(), t.grad().end());
      auto data = t.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + eps;
        const double up = batch_loss(model, batch, loss).item();
        data[i] = saved - eps;
        const double down = batch_loss(model, batch, loss).item();
        data[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double rel = std::abs(analytic[i] - numeric) /
                           std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
        worst = std::max(worst, rel);
        ++checked;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 30.0,
          fmt("max rel err %.2e over %.0f elements, 5 variants, %.1f s", worst, static_cast<double>(checked),
              secs)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome loss_identities() {
  bool ok = true;
  std::string detail;
  const double single = in_batch_softmax_loss(Tensor::from_data({1, 1}, {0.3}), 0.05).item();
  ok &= std::abs(single) <= 1e-12;
  double worst_uniform = 0.0;
  for (std::size_t b : {2u, 4u, 8u}) {
    const Tensor sims = Tensor::filled({b, b}, 0.4);
    const double l = in_batch_softmax_loss(sims, 0.05).item();
    worst_uniform = std::max(worst_uniform, std::abs(l - std::log(static_cast<double>(b))));
  }
  ok &= worst_uniform <= 1e-9;
  const double ident = in_batch_softmax_loss(Tensor::from_data({2, 2}, {1, 0, 0, 1}), 1.0).item();
  const double ident_err = std::abs(ident - std::log1p(std::exp(-1.0)));
  ok &= ident_err <= 1e-6;
  return {ok, fmt("B=1 %.1e, uniform max err %.1e, identity err %.1e", std::abs(single), worst_uniform, ident_err)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome sharing_invariants() {
  const cli::RunConfig rc;
  const auto task = gen_synthetic(rc.synthetic_config());
  const auto tok = build_vocab(task.train, TokenizerMode::kWhitespace);
  const auto enc = rc.encoder_config(tok.vocab_size());
  auto tc = rc.train_config(0);
  tc.steps = 200;

  bool ok = true;
  std::string detail;
  for (Variant v : {Variant::kSde, Variant::kAdeSpl, Variant::kAdeFte, Variant::kAde}) {
    auto model = DualEncoderModel::build(enc, SharingSpec::for_variant(v), 0);
    const auto initial = model.clone();
    train(model, task.train, tok, tc, rc.loss_config());
    const auto report = inspect_sharing(model);
    bool v_ok = report.ok();
    std::size_t tower_params = 0, aliased = 0, body_differs = 0;
    bool projection_aliased = true;
    for (const auto& s : report.params) {
      ++tower_params;
      aliased += s.aliased;
      if (s.component == "projection") projection_aliased &= s.aliased;
      if (s.component == "body" && !s.aliased && !s.towers_equal) ++body_differs;
    }
    switch (v) {
      case Variant::kSde:
        v_ok &= aliased == tower_params;
        break;
      case Variant::kAdeSpl:
        v_ok &= projection_aliased && body_differs >= 1;
        break;
      case Variant::kAdeFte: {
        const auto name = model.storage_name(Tower::kQuestion, "token_embedding");
        const Tensor now = model.params().get(name), init = initial.params().get(name);
        v_ok &= std::equal(now.data().begin(), now.data().end(), init.data().begin(), init.data().end());
        break;
      }
      default:
        v_ok &= aliased == 0 && report.differing_count >= 1;
        break;
    }
    ok &= v_ok;
    detail += std::string(to_string(v)) + (v_ok ? " ok" : " FAILED") + " (" + std::to_string(report.violations.size()) +
              " violations); ";
  }
  return {ok, detail + "200 steps"};
}

// ---- 4 ----------------------------------------------------------------------

Outcome pretraining_equivalence() {
  const cli::RunConfig rc;
  const auto enc = rc.encoder_config(40);
  const auto sde = DualEncoderModel::build(enc, SharingSpec::for_variant(Variant::kSde), 5);
  const auto ade = DualEncoderModel::build(enc, SharingSpec::for_variant(Variant::kAde), 5);
  std::mt19937_64 rng(9);
  std::size_t equal = 0;
  for (int i = 0; i < 32; ++i) {
    const auto t = random_text(rng, enc.vocab_size, enc.max_seq_len);
    auto same = [](const Tensor& x, const Tensor& y) {
      return std::equal(x.data().begin(), x.data().end(), y.data().begin(), y.data().end());
    };
    equal += same(encode_question(sde, t.ids, t.mask).embedding, encode_question(ade, t.ids, t.mask).embedding) &&
             same(encode_answer(sde, t.ids, t.mask).embedding, encode_answer(ade, t.ids, t.mask).embedding);
  }
  return {equal == 32, fmt("%.0f/32 inputs bitwise identical on both towers", static_cast<double>(equal))};
}

// ---- 5 ----------------------------------------------------------------------

Outcome retrieval_oracle() {
  const std::size_t n = 200, d = 16, nq = 60;
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g;
  std::vector<double> rows(n * d);
  for (double& x : rows) x = g(rng);
  // Exact ties: every fifth row repeats an earlier one at twice the scale.
  for (std::size_t i = 5; i < n; i += 5) {
    for (std::size_t j = 0; j < d; ++j) rows[i * d + j] = 2.0 * rows[(i - 5) * d + j];
  }
  std::vector<double> queries(nq * d);
  for (double& x : queries) x = g(rng);
  std::vector<std::optional<std::size_t>> gold(nq);
  std::vector<std::string> ids(nq);
  for (std::size_t i = 0; i < nq; ++i) {
    gold[i] = (i * 37) % n;
    ids[i] = "q" + std::to_string(i);
  }
  const auto index = make_index(rows, d);

  bool ok = true;
  double rr_sum = 0.0, p1 = 0.0;
  std::vector<std::size_t> oracle_ranks;
  for (std::size_t qi = 0; qi < nq; ++qi) {
    const std::vector<double> q(queries.begin() + qi * d, queries.begin() + (qi + 1) * d);
    double qn = 0.0;
    for (double x : q) qn += x * x;
    std::vector<SearchHit> all(n);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0, rn = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += rows[i * d + j] * q[j];
        rn += rows[i * d + j] * rows[i * d + j];
      }
      all[i] = {i, dot / (std::sqrt(rn) * std::sqrt(qn))};
    }
    std::sort(all.begin(), all.end(), [](const SearchHit& a, const SearchHit& b) {
      return a.score != b.score ? a.score > b.score : a.id < b.id;
    });
    ok &= search(index, q, n) == all;
    ok &= search(index, q, 10) == std::vector<SearchHit>(all.begin(), all.begin() + 10);
    const auto pos = std::find_if(all.begin(), all.end(), [&](const SearchHit& h) { return h.id == *gold[qi]; });
    const std::size_t rank = static_cast<std::size_t>(pos - all.begin()) + 1;
    oracle_ranks.push_back(rank);
    rr_sum += 1.0 / static_cast<double>(rank);
    p1 += rank == 1;
  }
  const auto report = evaluate_embeddings(index, queries, gold, ids);
  for (std::size_t i = 0; i < nq; ++i) ok &= report.queries[i].rank == oracle_ranks[i];
  ok &= report.mrr == rr_sum / nq && report.p_at_1 == p1 / nq;
  return {ok, fmt("%.0f queries x %.0f rows, ranks/P@1/MRR/tie order ", static_cast<double>(nq),
                  static_cast<double>(n)) +
                  (ok ? "match" : "MISMATCH")};
}

// ---- 6 ----------------------------------------------------------------------

Outcome metric_hand_cases() {
  const auto r = make_report({{"a", 1}, {"b", 2}, {"c", 4}}, 4);
  // ADE-SPL vs ADE MRR on MS MARCO, Table 2.
  const double delta = delta_mrr(28.20, 26.31);
  const bool ok = std::abs(r.p_at_1 - 1.0 / 3.0) <= 1e-9 && std::abs(r.mrr - 7.0 / 12.0) <= 1e-9 &&
                  std::abs(delta - 7.18) <= 0.01;
  return {ok, fmt("P@1 %.4f MRR %.4f dMRR %+.2f", r.p_at_1, r.mrr, delta)};
}

// ---- 7 ----------------------------------------------------------------------

Outcome tsne_calibration() {
  bool ok = true;
  // Two blobs, centres 10 sigma apart.
  {
    const std::size_t per = 20, n = 2 * per, d = 8;
    std::mt19937_64 rng(21);
    std::normal_distribution<double> g;
    std::vector<double> x(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i * d + j] = g(rng);
      x[i * d] += i < per ? 5.0 : -5.0;
    }
    TsneConfig c;
    c.perplexity = 10.0;
    // lr 200 overshoots at n = 40; max(n / (4 * exaggeration), 50) suits small n.
    c.learning_rate = 50.0;
    const auto r = tsne(x, n, d, c);
    const auto km = kmeans(r.coords, n, 2, 2, 20, 0);
    std::vector<int> truth(n);
    for (std::size_t i = 0; i < n; ++i) truth[i] = i < per ? 0 : 1;
    ok &= two_cluster_agreement(km.labels, truth) == 1.0;
  }
  // 800 points at the default perplexity and iteration count.
  const std::size_t n = 800, d = 16;
  std::mt19937_64 rng(22);
  std::normal_distribution<double> g;
  std::vector<double> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = g(rng) + (i < n / 2 && j == 0 ? 3.0 : 0.0);
  }
  const TsneConfig c;
  const auto aff = conditional_affinities(normalized_sq_distances(x, n, d), n, c);
  double worst_perp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double h = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = aff.p[i * n + j];
      if (j != i && p > 0.0) h -= p * std::log(p);
    }
    worst_perp = std::max(worst_perp, std::abs(std::exp(h) - c.perplexity));
  }
  ok &= worst_perp <= 1e-3;
  const auto t0 = Clock::now();
  const auto r = tsne(x, n, d, c);
  const double secs = seconds_since(t0);
  ok &= r.kl_final < r.kl_initial && secs < 60.0;
  return {ok, fmt("perplexity err %.1e, KL %.3f -> %.3f, 800 pts in %.1f s", worst_perp, r.kl_initial, r.kl_final,
                  secs) +
                  ", blobs agreement " + (ok ? "1.0" : "checked")};
}

// ---- 8 and 9 ----------------------------------------------------------------

struct CompareRun {
  bool ran = false;
  std::string error;
  double seconds = 0.0;
  std::map<std::string, std::vector<double>> mrr;
  std::map<std::string, std::pair<double, double>> separation;  // centroid cosine, kmeans2 agreement
};

const CompareRun& compare_run() {
  static CompareRun run;
  if (run.ran) return run;
  run.ran = true;
  cli::RunConfig rc;
  rc.set("variants", "SDE,ADE,ADE-SPL");
  rc.set("seeds", "5");
  const auto dir = scratch("compare");
  rc.set("output_dir", dir.string());
  const auto t0 = Clock::now();
  try {
    std::ostringstream out;
    cli::cmd_compare(rc, out);
  } catch (const std::exception& e) {
    run.error = e.what();
    return run;
  }
  run.seconds = seconds_since(t0);
  const auto runs = read_csv(dir / "runs.csv");
  for (std::size_t i = 1; i < runs.size(); ++i) run.mrr[runs[i][0]].push_back(std::stod(runs[i][3]));
  const auto sep = read_csv(dir / "separation.csv");
  for (std::size_t i = 1; i < sep.size(); ++i) {
    run.separation[sep[i][0]] = {std::stod(sep[i][2]), std::stod(sep[i][3])};
  }
  return run;
}

Outcome qualitative_ordering() {
  const auto& run = compare_run();
  if (!run.error.empty()) return {false, "compare failed: " + run.error};
  const double sde = median(run.mrr.at("SDE"));
  const double ade = median(run.mrr.at("ADE"));
  const double spl = median(run.mrr.at("ADE-SPL"));
  const bool ok = sde > ade && spl > ade && std::abs(spl - sde) < sde - ade && run.seconds < 15 * 60;
  return {ok, fmt("median MRR SDE %.4f ADE %.4f ADE-SPL %.4f, %.0f s", sde, ade, spl, run.seconds)};
}

Outcome separation_ordering() {
  const auto& run = compare_run();
  if (!run.error.empty()) return {false, "compare failed: " + run.error};
  const auto [ade_cos, ade_km] = run.separation.at("ADE");
  const auto [spl_cos, spl_km] = run.separation.at("ADE-SPL");
  const bool ok = ade_km > spl_km && spl_cos > ade_cos;
  return {ok, fmt("kmeans2 ADE %.3f > SPL %.3f; centroid cos SPL %.3f > ADE %.3f", ade_km, spl_km, spl_cos, ade_cos)};
}

// ---- 10 ---------------------------------------------------------------------

Outcome cli_determinism() {
  const std::string base_flags =
      " --size small --batch_size 16 --synthetic_n_train 200 --synthetic_n_eval 60"
      " --sample_per_side 30 --tsne_iterations 100 --tsne_perplexity 8 --kmeans_restarts 3";
  const std::string fast = base_flags + " --steps 20";
  auto invoke = [](const std::string& line) {
    std::vector<std::string> words{"dualenc"};
    std::stringstream ss(line);
    std::string w;
    while (ss >> w) words.push_back(w);
    std::vector<char*> argv;
    for (auto& s : words) argv.push_back(s.data());
    // Command summaries are not part of this report.
    std::ostringstream sink;
    auto* saved = std::cout.rdbuf(sink.rdbuf());
    const int code = cli::run(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(saved);
    return code;
  };
  std::vector<std::string> compared;
  bool ok = true;
  for (const char* tag : {"a", "b"}) {
    const auto base = scratch(std::string("det_") + tag);
    const auto train = base / "train";
    ok &= invoke("train --variant ADE-SPL" + fast + " --output_dir " + train.string()) == 0;
    const auto ckpt = (train / "model.ckpt").string();
    ok &= invoke("eval --variant ADE-SPL --checkpoint " + ckpt + fast + " --output_dir " + (base / "eval").string()) == 0;
    ok &= invoke("analyze --variant ADE-SPL --checkpoint " + ckpt + fast + " --output_dir " +
                 (base / "analyze").string()) == 0;
    ok &= invoke("compare --variants SDE,ADE --seeds 2 --jobs 2" + fast + " --output_dir " +
                 (base / "compare").string()) == 0;
    ok &= invoke("sweep --sizes small,base --variants SDE,ADE --seeds 1" + base_flags + " --steps 5 --output_dir " +
                 (base / "sweep").string()) == 0;
  }
  if (!ok) return {false, "a CLI command failed"};
  const auto a = fs::temp_directory_path() / "dualenc_acceptance" / "det_a";
  const auto b = fs::temp_directory_path() / "dualenc_acceptance" / "det_b";
  std::size_t files = 0, same = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (entry.path().extension() != ".csv") continue;
    ++files;
    const auto other = b / fs::relative(entry.path(), a);
    same += fs::exists(other) && slurp(entry.path()) == slurp(other);
  }
  return {files >= 10 && same == files,
          fmt("%.0f/%.0f CSV files bitwise identical across reruns", static_cast<double>(same),
              static_cast<double>(files))};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient oracle", gradient_oracle},
      {2, "loss identities", loss_identities},
      {3, "sharing invariants", sharing_invariants},
      {4, "pre-training equivalence", pretraining_equivalence},
      {5, "retrieval oracle", retrieval_oracle},
      {6, "metric hand cases", metric_hand_cases},
      {7, "t-SNE calibration", tsne_calibration},
      {8, "qualitative ordering SDE/ADE/ADE-SPL", qualitative_ordering},
      {9, "embedding separation ADE vs ADE-SPL", separation_ordering},
      {10, "CLI determinism", cli_determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>

#include "dualenc/analysis.hpp"
#include "dualenc/cli.hpp"
#include "dualenc/errors.hpp"
#include "dualenc/retrieval.hpp"
#include "dualenc/svg.hpp"

#ifndef DUALENC_VERSION
#define DUALENC_VERSION "dev"
#endif

namespace dualenc::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

fs::path out_path(const RunConfig& c, const std::string& name) { return fs::path(c.output_dir) / name; }

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string seed_columns(const RunConfig& c) {
  std::string h;
  for (std::size_t i = 0; i < c.seeds; ++i) h += ",seed_" + std::to_string(c.seed + i);
  return h;
}

// Runs f(0..n-1) on up to `jobs` threads; rethrows the lowest-index failure.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(jobs, n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

SeparationReport separation_for(const DualEncoderModel& model, const Tokenizer& tokenizer,
                                const std::vector<QAPair>& eval, const RunConfig& c,
                                EmbeddingSample* sample_out = nullptr) {
  auto sample = sample_eval_embeddings(model, tokenizer, eval, c.sample_per_side, c.seed);
  SeparationConfig sc;
  sc.restarts = c.kmeans_restarts;
  sc.seed = c.seed;
  auto report = separation_metrics(sample.questions, sample.answers, model.config().d_embed, sc);
  if (sample_out) *sample_out = std::move(sample);
  return report;
}

const std::vector<QAPair>& require_eval(const Datasets& d) {
  if (d.eval.empty()) throw ConfigError("no evaluation data: set eval_path");
  return d.eval;
}

const std::vector<QAPair>& require_train(const Datasets& d) {
  if (d.train.empty()) throw ConfigError("no training data: set train_path");
  return d.train;
}

Checkpoint load_checked(const RunConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("checkpoint path is required (--checkpoint)");
  Checkpoint ck = load_checkpoint(c.checkpoint);
  const auto& m = ck.model.config();
  auto mismatch = [&](const std::string& key, const std::string& have) {
    throw ConfigError("checkpoint/config mismatch on '" + key + "': config has '" + c.get(key) +
                      "', checkpoint has '" + have + "'");
  };
  if (c.explicit_keys.contains("variant")) {
    const auto v = variant_of(ck.model.spec());
    const std::string have = v ? std::string(to_string(*v)) : "custom";
    if (!v || *v != parse_variant(c.variant)) mismatch("variant", have);
  }
  if (c.explicit_keys.contains("max_seq_len") && c.max_seq_len != m.max_seq_len) {
    mismatch("max_seq_len", std::to_string(m.max_seq_len));
  }
  if (c.explicit_keys.contains("size") &&
      !(EncoderConfig::preset(c.size, m.vocab_size, m.max_seq_len) == m)) {
    mismatch("size", "d_model=" + std::to_string(m.d_model) + " n_layers=" + std::to_string(m.n_layers));
  }
  if (c.explicit_keys.contains("tokenizer") &&
      parse_tokenizer_mode(c.tokenizer) != ck.tokenizer.mode()) {
    mismatch("tokenizer", std::string(to_string(ck.tokenizer.mode())));
  }
  return ck;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

std::string version_tag() { return std::string("dualenc ") + DUALENC_VERSION; }

void prepare_output_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) throw DataError("cannot create output directory " + c.output_dir + ": " + ec.message());
  write_text_file(out_path(c, "config.txt"), c.to_text());
  write_text_file(out_path(c, "version.txt"), version_tag() + "\n");
}

Datasets load_datasets(const RunConfig& c) {
  Datasets d;
  if (c.train_path.empty() && c.eval_path.empty()) {
    auto task = gen_synthetic(c.synthetic_config());
    d.train = std::move(task.train);
    d.eval = std::move(task.eval);
    return d;
  }
  if (!c.train_path.empty()) d.train = load_jsonl(c.train_path);
  if (!c.eval_path.empty()) d.eval = load_jsonl(c.eval_path);
  return d;
}

std::vector<std::string> load_corpus(const RunConfig& c, const std::vector<QAPair>& eval) {
  if (c.corpus_path.empty()) return unique_answers(eval);
  std::ifstream in(c.corpus_path);
  if (!in) throw DataError("cannot read corpus " + c.corpus_path);
  std::vector<std::string> corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) corpus.push_back(line);
  }
  if (corpus.empty()) throw ConfigError("answer corpus " + c.corpus_path + " is empty");
  return corpus;
}

CellResult run_cell(const RunConfig& c, const Datasets& data, const Tokenizer& tokenizer,
                    const std::vector<std::string>& corpus, const std::string& size,
                    Variant variant, std::uint64_t seed,
                    std::function<void(DualEncoderModel&&)> model_out) {
  auto model = DualEncoderModel::build(c.encoder_config(tokenizer.vocab_size(), size),
                                       SharingSpec::for_variant(variant), seed);
  const auto result = train(model, require_train(data), tokenizer, c.train_config(seed), c.loss_config());
  assert_sharing(model);
  const auto report = evaluate(model, tokenizer, require_eval(data), corpus, c.shards);
  CellResult cell;
  cell.size = size;
  cell.variant = variant;
  cell.seed = seed;
  cell.p_at_1 = report.p_at_1;
  cell.mrr = report.mrr;
  cell.final_loss = result.log.back().loss;
  if (model_out) model_out(std::move(model));
  return cell;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  const Datasets data = load_datasets(c);
  const auto& train_pairs = require_train(data);
  const Tokenizer tokenizer = build_vocab(train_pairs, parse_tokenizer_mode(c.tokenizer));
  auto model = DualEncoderModel::build(c.encoder_config(tokenizer.vocab_size()),
                                       SharingSpec::for_variant(parse_variant(c.variant)), c.seed);
  prepare_output_dir(c);
  const auto result = train(model, train_pairs, tokenizer, c.train_config(c.seed), c.loss_config());
  write_metrics_csv(out_path(c, "metrics.csv"), result.log);
  save_checkpoint(out_path(c, "model.ckpt"), model, tokenizer);
  if (tokenizer.mode() == TokenizerMode::kWhitespace) write_vocab_file(out_path(c, "vocab.txt"), tokenizer);
  const auto report = inspect_sharing(model);
  write_text_file(out_path(c, "sharing_report.json"), report.to_json() + "\n");
  out << "trained " << c.variant << " for " << c.steps << " steps; final loss "
      << fmt(result.log.back().loss) << "\n"
      << "checkpoint: " << out_path(c, "model.ckpt").string() << "\n"
      << "sharing: " << (report.ok() ? "ok" : "VIOLATED") << " (" << report.aliased_count
      << " aliased, " << report.differing_count << " diverged)\n";
  if (!report.ok()) throw InvariantViolation("sharing invariant violated: " + report.violations.front());
  return 0;
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
  const Checkpoint ck = load_checked(c);
  const Datasets data = load_datasets(c);
  const auto& eval_pairs = require_eval(data);
  const auto corpus = load_corpus(c, eval_pairs);
  const auto report = evaluate(ck.model, ck.tokenizer, eval_pairs, corpus, c.shards);
  prepare_output_dir(c);
  write_ranks_csv(out_path(c, "ranks.csv"), report);
  std::string text = report.summary_line() + "\n";
  text += "k = " + std::to_string(report.k) + "\nmissing_gold = " + std::to_string(report.missing_gold) +
          "\nfingerprint = " + ck.model.fingerprint() + "\n";
  write_text_file(out_path(c, "report.txt"), text);
  if (report.missing_gold > 0) {
    std::cerr << "warning: " << report.missing_gold
              << " queries have no gold answer in the corpus (counted as reciprocal rank 0)\n";
  }
  out << report.summary_line() << "\n";
  return 0;
}

int cmd_compare(const RunConfig& c, std::ostream& out) {
  const auto variants = c.variant_list();
  if (std::find(variants.begin(), variants.end(), Variant::kAde) == variants.end()) {
    throw ConfigError("compare needs ADE in the variant list: it is the baseline of delta MRR");
  }
  const Datasets data = load_datasets(c);
  const Tokenizer tokenizer = build_vocab(require_train(data), parse_tokenizer_mode(c.tokenizer));
  const auto corpus = load_corpus(c, require_eval(data));
  prepare_output_dir(c);
  fs::create_directories(out_path(c, "reports"));
  if (c.save_checkpoints) fs::create_directories(out_path(c, "models"));

  const std::size_t nv = variants.size();
  std::vector<CellResult> cells(nv * c.seeds);
  std::vector<SeparationReport> separation(nv);
  parallel_for(cells.size(), c.jobs, [&](std::size_t i) {
    const Variant v = variants[i % nv];
    const std::uint64_t seed = c.seed + i / nv;
    cells[i] = run_cell(c, data, tokenizer, corpus, c.size, v, seed, [&](DualEncoderModel&& m) {
      const std::string tag = std::string(to_string(v)) + "_seed" + std::to_string(seed);
      if (c.save_checkpoints) save_checkpoint(out_path(c, "models/" + tag + ".ckpt"), m, tokenizer);
      if (seed == c.seed) separation[i % nv] = separation_for(m, tokenizer, data.eval, c);
    });
  });

  const std::size_t ade = static_cast<std::size_t>(
      std::find(variants.begin(), variants.end(), Variant::kAde) - variants.begin());
  auto runs = open_csv(out_path(c, "runs.csv"));
  runs << "variant,seed,p_at_1,mrr,delta_mrr,final_loss\n";
  std::vector<std::vector<double>> mrr(nv), p1(nv), delta(nv);
  for (std::size_t s = 0; s < c.seeds; ++s) {
    const double base = cells[s * nv + ade].mrr;
    for (std::size_t v = 0; v < nv; ++v) {
      const auto& cell = cells[s * nv + v];
      const double d = delta_mrr(cell.mrr, base);
      mrr[v].push_back(cell.mrr);
      p1[v].push_back(cell.p_at_1);
      delta[v].push_back(d);
      runs << to_string(cell.variant) << ',' << cell.seed << ',' << fmt(cell.p_at_1) << ','
           << fmt(cell.mrr) << ',' << fmt(d) << ',' << fmt(cell.final_loss) << '\n';
    }
  }

  auto table = [&](const std::string& name, const std::vector<std::vector<double>>& values) {
    auto f = open_csv(out_path(c, name));
    f << "variant" << seed_columns(c) << ",median\n";
    for (std::size_t v = 0; v < nv; ++v) {
      f << to_string(variants[v]);
      for (double x : values[v]) f << ',' << fmt(x);
      f << ',' << fmt(median(values[v])) << '\n';
    }
  };
  table("delta_mrr.csv", delta);
  table("mrr.csv", mrr);

  auto sep = open_csv(out_path(c, "separation.csv"));
  sep << "variant,seed," << SeparationReport::csv_header() << '\n';
  auto summary = open_csv(out_path(c, "summary.csv"));
  summary << "variant,median_p_at_1,median_mrr,median_delta_mrr\n";
  std::vector<std::string> names;
  std::vector<double> medians;
  out << "variant   median_p_at_1  median_mrr  median_delta_mrr  centroid_cos  kmeans2_agree\n";
  for (std::size_t v = 0; v < nv; ++v) {
    const std::string name(to_string(variants[v]));
    sep << name << ',' << c.seed << ',' << separation[v].csv_row() << '\n';
    summary << name << ',' << fmt(median(p1[v])) << ',' << fmt(median(mrr[v])) << ','
            << fmt(median(delta[v])) << '\n';
    names.push_back(name);
    medians.push_back(median(delta[v]));
    char line[160];
    std::snprintf(line, sizeof line, "%-9s %13.4f %11.4f %17.2f %13.4f %14.4f\n", name.c_str(),
                  median(p1[v]), median(mrr[v]), median(delta[v]), separation[v].centroid_cosine,
                  separation[v].kmeans2_agreement);
    out << line;
  }
  write_text_file(out_path(c, "delta_mrr.svg"),
                  render_bars("Median relative MRR change vs ADE (%)", names, medians, "delta MRR (%)"));
  return 0;
}

int cmd_analyze(const RunConfig& c, std::ostream& out) {
  const Checkpoint ck = load_checked(c);
  const Datasets data = load_datasets(c);
  const auto& eval_pairs = require_eval(data);
  if (eval_pairs.size() < c.sample_per_side) {
    throw ConfigError("evaluation set has " + std::to_string(eval_pairs.size()) +
                      " pairs, fewer than sample_per_side " + std::to_string(c.sample_per_side));
  }
  EmbeddingSample sample;
  SeparationReport report = separation_for(ck.model, ck.tokenizer, eval_pairs, c, &sample);
  const std::size_t n = c.sample_per_side, d = ck.model.config().d_embed;
  std::vector<double> joint(sample.questions);
  joint.insert(joint.end(), sample.answers.begin(), sample.answers.end());
  const auto t = tsne(joint, 2 * n, d, c.tsne_config());
  report.tsne_kl_initial = t.kl_initial;
  report.tsne_kl_final = t.kl_final;

  prepare_output_dir(c);
  auto coords = open_csv(out_path(c, "tsne_coords.csv"));
  coords << "side,pair_index,x,y\n";
  ScatterSeries qs{"questions", palette(0), {}}, as{"answers", palette(1), {}};
  for (std::size_t i = 0; i < 2 * n; ++i) {
    const bool is_q = i < n;
    const std::size_t idx = is_q ? sample.question_indices[i] : sample.answer_indices[i - n];
    coords << (is_q ? "question" : "answer") << ',' << idx << ',' << fmt(t.coords[2 * i]) << ','
           << fmt(t.coords[2 * i + 1]) << '\n';
    auto& s = is_q ? qs : as;
    s.xy.push_back(t.coords[2 * i]);
    s.xy.push_back(t.coords[2 * i + 1]);
  }
  const auto v = variant_of(ck.model.spec());
  const std::string title =
      "t-SNE of " + std::string(v ? to_string(*v) : "custom") + " embeddings (" + std::to_string(n) + " + " +
      std::to_string(n) + ")";
  write_text_file(out_path(c, "tsne.svg"), render_scatter(title, {qs, as}));
  write_text_file(out_path(c, "separation.txt"), report.to_text());
  auto csv = open_csv(out_path(c, "separation.csv"));
  csv << SeparationReport::csv_header() << '\n' << report.csv_row() << '\n';
  out << report.to_text();
  return 0;
}

int cmd_sweep(const RunConfig& c, std::ostream& out) {
  const auto sizes = c.size_list();
  const auto variants = c.variant_list();
  const Datasets data = load_datasets(c);
  const Tokenizer tokenizer = build_vocab(require_train(data), parse_tokenizer_mode(c.tokenizer));
  const auto corpus = load_corpus(c, require_eval(data));
  prepare_output_dir(c);

  const std::size_t nv = variants.size(), ns = sizes.size();
  std::vector<CellResult> cells(ns * nv * c.seeds);
  parallel_for(cells.size(), c.jobs, [&](std::size_t i) {
    const std::size_t s = i % ns, v = (i / ns) % nv, k = i / (ns * nv);
    cells[i] = run_cell(c, data, tokenizer, corpus, sizes[s], variants[v], c.seed + k);
  });

  auto runs = open_csv(out_path(c, "sweep.csv"));
  runs << "size,variant,seed,p_at_1,mrr,final_loss\n";
  std::vector<std::vector<std::vector<double>>> mrr(nv, std::vector<std::vector<double>>(ns));
  for (const auto& cell : cells) {
    runs << cell.size << ',' << to_string(cell.variant) << ',' << cell.seed << ',' << fmt(cell.p_at_1) << ','
         << fmt(cell.mrr) << ',' << fmt(cell.final_loss) << '\n';
  }
  for (std::size_t i = 0; i < cells.size(); ++i) mrr[(i / ns) % nv][i % ns].push_back(cells[i].mrr);

  auto table = open_csv(out_path(c, "sweep_table.csv"));
  table << "variant";
  for (const auto& s : sizes) table << ',' << s;
  table << '\n';
  std::vector<LineSeries> lines;
  out << "median MRR by size\n";
  for (std::size_t v = 0; v < nv; ++v) {
    const std::string name(to_string(variants[v]));
    LineSeries line{name, palette(v), {}};
    table << name;
    out << name;
    for (std::size_t s = 0; s < ns; ++s) {
      const double m = median(mrr[v][s]);
      line.y.push_back(m);
      table << ',' << fmt(m);
      char buf[32];
      std::snprintf(buf, sizeof buf, "  %s=%.4f", sizes[s].c_str(), m);
      out << buf;
    }
    table << '\n';
    out << '\n';
    lines.push_back(std::move(line));
  }
  write_text_file(out_path(c, "sweep.svg"), render_lines("Median MRR by model size", sizes, lines, "MRR"));
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Dual-encoder parameter sharing experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_tag());

  struct Sub {
    CLI::App* app = nullptr;
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "Train one variant and write a checkpoint and metrics"},
      {"eval", "Evaluate a checkpoint: P@1 and MRR"},
      {"compare", "Train and evaluate several variants over seeds; delta MRR vs ADE"},
      {"analyze", "t-SNE scatter and separation metrics for a checkpoint"},
      {"sweep", "Train and evaluate variants across size presets"},
  };
  std::map<std::string, Sub> subs;
  for (const auto& [name, help] : commands) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.app->add_option("--config", s.config_path, "key = value file; flags override it");
    for (const auto& key : RunConfig::keys()) {
      s.options[key] = s.app->add_option("--" + key, s.values[key], RunConfig::help(key));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    try {
      RunConfig config;
      if (!s.config_path.empty()) config.load_file(s.config_path);
      for (const auto& key : RunConfig::keys()) {
        if (s.options[key]->count() > 0) config.set(key, s.values[key]);
      }
      config.validate();
      if (name == "train") return cmd_train(config, std::cout);
      if (name == "eval") return cmd_eval(config, std::cout);
      if (name == "compare") return cmd_compare(config, std::cout);
      if (name == "analyze") return cmd_analyze(config, std::cout);
      return cmd_sweep(config, std::cout);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return exit_code_for(e);
    }
  }
  return 2;
}

}  // namespace dualenc::cli

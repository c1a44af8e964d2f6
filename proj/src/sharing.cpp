#include "dualenc/sharing.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dualenc/errors.hpp"

namespace dualenc {

namespace {

constexpr const char* kSharedPrefix = "shared/";
constexpr const char* kQuestionPrefix = "q/";
constexpr const char* kAnswerPrefix = "a/";
constexpr char kMagic[8] = {'D', 'U', 'A', 'L', 'E', 'N', 'C', '\0'};

std::string upper(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_));
    return buf;
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// ---- binary io (host byte order, little-endian on supported targets) ----

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void str(std::string_view s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void doubles(std::span<const double> v) {
    u64(v.size());
    raw(v.data(), v.size_bytes());
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw DataError(source_ + ": truncated checkpoint");
  }
  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, sizeof v); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, sizeof v); return v; }
  std::uint64_t bounded(std::uint64_t limit, const char* what) {
    const auto v = u64();
    if (v > limit) throw DataError(source_ + ": implausible " + what + " " + std::to_string(v));
    return v;
  }
  std::string str() {
    std::string s(bounded(1 << 20, "string length"), '\0');
    if (!s.empty()) raw(s.data(), s.size());
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> v(bounded(std::uint64_t{1} << 32, "tensor size"));
    if (!v.empty()) raw(v.data(), v.size() * sizeof(double));
    return v;
  }

 private:
  std::istream& in_;
  std::string source_;
};

}  // namespace

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::kSde: return "SDE";
    case Variant::kAde: return "ADE";
    case Variant::kAdeSte: return "ADE-STE";
    case Variant::kAdeFte: return "ADE-FTE";
    case Variant::kAdeSpl: return "ADE-SPL";
  }
  return "?";
}

std::vector<Variant> all_variants() {
  return {Variant::kSde, Variant::kAde, Variant::kAdeSte, Variant::kAdeFte,
          Variant::kAdeSpl};
}

Variant parse_variant(std::string_view name) {
  const std::string key = upper(name);
  for (Variant v : all_variants()) {
    if (key == to_string(v)) return v;
  }
  throw ConfigError("invalid variant '" + std::string(name) +
                    "'; valid variants: SDE, ADE, ADE-STE, ADE-FTE, ADE-SPL");
}

SharingSpec SharingSpec::for_variant(Variant variant) {
  SharingSpec s;
  switch (variant) {
    case Variant::kSde:
      s.share_token_embedder = s.share_encoder_body = s.share_projection = true;
      break;
    case Variant::kAde:
      break;
    case Variant::kAdeSte:
      s.share_token_embedder = true;
      break;
    case Variant::kAdeFte:
      s.freeze_token_embedder = true;
      break;
    case Variant::kAdeSpl:
      s.share_projection = true;
      break;
  }
  return s;
}

void SharingSpec::validate() const {
  if (share_encoder_body && !share_token_embedder) {
    throw ConfigError(
        "invalid sharing spec: share_encoder_body=true requires "
        "share_token_embedder=true (body sharing without a shared embedder is "
        "not a supported variant)");
  }
}

bool SharingSpec::shares(Component component) const {
  switch (component) {
    // A frozen embedder is stored once and referenced by both towers.
    case Component::kTokenEmbedder: return share_token_embedder || freeze_token_embedder;
    case Component::kBody: return share_encoder_body;
    case Component::kProjection: return share_projection;
  }
  return false;
}

std::optional<Variant> variant_of(const SharingSpec& spec) {
  for (Variant v : all_variants()) {
    if (SharingSpec::for_variant(v) == spec) return v;
  }
  return std::nullopt;
}

// ---- model -----------------------------------------------------------------

std::string DualEncoderModel::storage_name(Tower which,
                                           const std::string& base_name) const {
  if (spec_.shares(component_of(base_name))) return kSharedPrefix + base_name;
  return (which == Tower::kQuestion ? kQuestionPrefix : kAnswerPrefix) + base_name;
}

void DualEncoderModel::bind_towers() {
  question_ = TowerParams::bind(config_, [this](const std::string& n) {
    return params_.get(storage_name(Tower::kQuestion, n));
  });
  answer_ = TowerParams::bind(config_, [this](const std::string& n) {
    return params_.get(storage_name(Tower::kAnswer, n));
  });
}

DualEncoderModel DualEncoderModel::build(const EncoderConfig& config,
                                         const SharingSpec& spec,
                                         std::uint64_t seed) {
  config.validate();
  spec.validate();
  DualEncoderModel m;
  m.config_ = config;
  m.spec_ = spec;
  // Both towers start from one store, standing in for a common pretrained
  // checkpoint.
  const ParamStore base = init_params(config, seed);
  for (const auto& name : tower_param_names(config)) {
    const Tensor& src = base.get(name);
    const Component comp = component_of(name);
    const bool trainable = !(comp == Component::kTokenEmbedder && spec.freeze_token_embedder);
    if (spec.shares(comp)) {
      m.params_.add(kSharedPrefix + name, src.detach(), trainable);
    } else {
      m.params_.add(kQuestionPrefix + name, src.detach(), trainable);
      m.params_.add(kAnswerPrefix + name, src.detach(), trainable);
    }
    if (!trainable) {
      for (Tower t : {Tower::kQuestion, Tower::kAnswer}) {
        const auto stored = m.storage_name(t, name);
        m.frozen_snapshots_[stored].assign(src.data().begin(), src.data().end());
      }
    }
  }
  m.bind_towers();
  return m;
}

DualEncoderModel DualEncoderModel::assemble(
    const EncoderConfig& config, const SharingSpec& spec, ParamStore params,
    std::map<std::string, std::vector<double>> frozen_snapshots) {
  config.validate();
  spec.validate();
  DualEncoderModel m;
  m.config_ = config;
  m.spec_ = spec;
  m.params_ = std::move(params);
  m.frozen_snapshots_ = std::move(frozen_snapshots);
  std::set<std::string> expected;
  const ParamStore shapes = init_params(config, 0);
  for (const auto& name : tower_param_names(config)) {
    for (Tower t : {Tower::kQuestion, Tower::kAnswer}) {
      const auto stored = m.storage_name(t, name);
      expected.insert(stored);
      if (!m.params_.contains(stored)) {
        throw ConfigError("checkpoint does not match config/spec: missing " + stored);
      }
      if (m.params_.get(stored).shape() != shapes.get(name).shape()) {
        throw ConfigError("checkpoint does not match config: " + stored + " has shape " +
                          shape_string(m.params_.get(stored).shape()));
      }
    }
  }
  for (const auto& name : m.params_.names()) {
    if (!expected.contains(name)) {
      throw ConfigError("checkpoint does not match config/spec: unexpected " + name);
    }
  }
  m.bind_towers();
  return m;
}

DualEncoderModel DualEncoderModel::clone() const {
  return assemble(config_, spec_, params_.clone(), frozen_snapshots_);
}

std::string DualEncoderModel::fingerprint() const {
  Fnv1a h;
  for (std::size_t v : {config_.vocab_size, config_.d_model, config_.n_layers,
                        config_.n_heads, config_.d_ff, config_.max_seq_len,
                        config_.d_embed}) {
    h.u64(v);
  }
  for (bool f : {spec_.share_token_embedder, spec_.freeze_token_embedder,
                 spec_.share_encoder_body, spec_.share_projection}) {
    h.u64(f ? 1 : 0);
  }
  for (const auto& [name, e] : params_) {
    h.str(name);
    h.u64(e.trainable ? 1 : 0);
    for (auto d : e.tensor.shape()) h.u64(d);
    h.bytes(e.tensor.data().data(), e.tensor.data().size_bytes());
  }
  return h.hex();
}

EncoderOutput encode_question(const DualEncoderModel& model,
                              std::span<const int> ids,
                              std::span<const std::uint8_t> mask) {
  return encode(model.config(), model.tower(Tower::kQuestion), ids, mask);
}

EncoderOutput encode_answer(const DualEncoderModel& model,
                            std::span<const int> ids,
                            std::span<const std::uint8_t> mask) {
  return encode(model.config(), model.tower(Tower::kAnswer), ids, mask);
}

EncodedBatch encode_batch(const DualEncoderModel& model, Tower which,
                          const TokenBatch& batch) {
  return encode_batch(model.config(), model.tower(which), batch);
}

// ---- sharing checks ----------------------------------------------------------

SharingReport inspect_sharing(const DualEncoderModel& model) {
  SharingReport report;
  const auto variant = variant_of(model.spec());
  report.variant = variant ? std::string(to_string(*variant)) : "custom";
  const auto& params = model.params();
  const auto names = tower_param_names(model.config());
  const auto q_handles = model.tower(Tower::kQuestion).flatten();
  const auto a_handles = model.tower(Tower::kAnswer).flatten();
  std::set<std::string> accounted;

  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string& name = names[i];
    const Component comp = component_of(name);
    ComponentStatus st;
    st.param = name;
    st.component = std::string(to_string(comp));
    st.question_storage = model.storage_name(Tower::kQuestion, name);
    st.answer_storage = model.storage_name(Tower::kAnswer, name);
    accounted.insert(st.question_storage);
    accounted.insert(st.answer_storage);

    if (!params.contains(st.question_storage) || !params.contains(st.answer_storage)) {
      report.violations.push_back("dangling resolution for " + name);
      report.params.push_back(st);
      continue;
    }
    const Tensor q = params.get(st.question_storage);
    const Tensor a = params.get(st.answer_storage);
    if (!q_handles[i].shares_storage_with(q) || !a_handles[i].shares_storage_with(a)) {
      report.violations.push_back(name + ": tower handle does not resolve to its stored tensor");
    }
    st.aliased = q.shares_storage_with(a);
    st.towers_equal = bitwise_equal(q.data(), a.data());
    const bool want_shared = model.spec().shares(comp);
    if (want_shared) {
      if (!st.aliased) report.violations.push_back(name + ": expected shared storage, towers hold separate tensors");
      if (params.contains(kQuestionPrefix + name) || params.contains(kAnswerPrefix + name)) {
        report.violations.push_back(name + ": shared tensor also stored per tower");
      }
    } else {
      if (st.aliased) report.violations.push_back(name + ": expected separate storage, towers alias one tensor");
      if (params.contains(kSharedPrefix + name)) {
        report.violations.push_back(name + ": per-tower tensor also stored under shared/");
      }
      if (!st.towers_equal) ++report.differing_count;
    }
    if (st.aliased) ++report.aliased_count;

    const bool want_frozen = comp == Component::kTokenEmbedder && model.spec().freeze_token_embedder;
    for (const auto& stored : {st.question_storage, st.answer_storage}) {
      const auto& e = params.entry(stored);
      st.trainable = e.trainable;
      if (want_frozen) {
        if (e.trainable || e.tensor.requires_grad()) {
          report.violations.push_back(stored + ": frozen tensor is marked trainable");
        }
        auto snap = model.frozen_snapshots().find(stored);
        if (snap == model.frozen_snapshots().end()) {
          report.violations.push_back(stored + ": frozen tensor has no init snapshot");
        } else if (!bitwise_equal(e.tensor.data(), snap->second)) {
          report.violations.push_back(stored + ": frozen tensor differs from its init snapshot");
        }
      } else if (!e.trainable) {
        report.violations.push_back(stored + ": tensor is unexpectedly frozen");
      }
    }
    report.params.push_back(st);
  }
  for (const auto& name : params.names()) {
    if (!accounted.contains(name)) report.violations.push_back(name + ": not referenced by either tower");
  }
  return report;
}

SharingReport assert_sharing(const DualEncoderModel& model) {
  SharingReport report = inspect_sharing(model);
  if (!report.ok()) {
    throw InvariantViolation("sharing invariant violated: " + report.violations.front());
  }
  return report;
}

std::string SharingReport::to_json() const {
  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["ok"] = ok();
  j["aliased_count"] = aliased_count;
  j["differing_count"] = differing_count;
  j["violations"] = violations;
  auto& arr = j["params"] = nlohmann::ordered_json::array();
  for (const auto& p : params) {
    arr.push_back({{"param", p.param},
                   {"component", p.component},
                   {"question_storage", p.question_storage},
                   {"answer_storage", p.answer_storage},
                   {"aliased", p.aliased},
                   {"trainable", p.trainable},
                   {"towers_equal", p.towers_equal}});
  }
  return j.dump(2);
}

// ---- checkpoint ----------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path,
                     const DualEncoderModel& model, const Tokenizer& tokenizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  Writer w(out);
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  const auto& c = model.config();
  for (std::size_t v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff,
                        c.max_seq_len, c.d_embed}) {
    w.u64(v);
  }
  const auto& s = model.spec();
  for (bool f : {s.share_token_embedder, s.freeze_token_embedder,
                 s.share_encoder_body, s.share_projection}) {
    w.u8(f ? 1 : 0);
  }
  w.u8(tokenizer.mode() == TokenizerMode::kByte ? 1 : 0);
  w.u64(tokenizer.tokens().size());
  for (const auto& t : tokenizer.tokens()) w.str(t);
  w.u64(model.params().size());
  for (const auto& [name, e] : model.params()) {
    w.str(name);
    w.u8(e.trainable ? 1 : 0);
    w.u64(e.tensor.rank());
    for (auto d : e.tensor.shape()) w.u64(d);
    w.doubles(e.tensor.data());
  }
  w.u64(model.frozen_snapshots().size());
  for (const auto& [name, values] : model.frozen_snapshots()) {
    w.str(name);
    w.doubles(values);
  }
  w.str(model.fingerprint());
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw DataError(path.string() + ": not a dualenc checkpoint");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  EncoderConfig c;
  c.vocab_size = r.u64();
  c.d_model = r.u64();
  c.n_layers = r.u64();
  c.n_heads = r.u64();
  c.d_ff = r.u64();
  c.max_seq_len = r.u64();
  c.d_embed = r.u64();
  SharingSpec s;
  s.share_token_embedder = r.u8() != 0;
  s.freeze_token_embedder = r.u8() != 0;
  s.share_encoder_body = r.u8() != 0;
  s.share_projection = r.u8() != 0;
  const bool byte_mode = r.u8() != 0;
  std::vector<std::string> tokens(r.bounded(1 << 24, "vocabulary size"));
  for (auto& t : tokens) t = r.str();
  Tokenizer tokenizer = byte_mode ? Tokenizer::bytes() : Tokenizer(std::move(tokens));

  ParamStore params;
  const auto count = r.bounded(1 << 20, "parameter count");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const bool trainable = r.u8() != 0;
    Shape shape(r.bounded(8, "tensor rank"));
    for (auto& d : shape) d = r.u64();
    auto values = r.doubles();
    params.add(name, Tensor::from_data(std::move(shape), std::move(values)), trainable);
  }
  std::map<std::string, std::vector<double>> snapshots;
  const auto n_snap = r.bounded(1 << 20, "snapshot count");
  for (std::uint64_t i = 0; i < n_snap; ++i) {
    std::string name = r.str();
    snapshots[name] = r.doubles();
  }
  const std::string stored_fp = r.str();
  auto model = DualEncoderModel::assemble(c, s, std::move(params), std::move(snapshots));
  if (model.config().vocab_size != tokenizer.vocab_size()) {
    throw ConfigError(path.string() + ": tokenizer vocabulary (" +
                      std::to_string(tokenizer.vocab_size()) +
                      ") does not match model vocab_size (" +
                      std::to_string(model.config().vocab_size) + ")");
  }
  if (model.fingerprint() != stored_fp) {
    throw DataError(path.string() + ": fingerprint mismatch (corrupted checkpoint)");
  }
  return Checkpoint{std::move(model), std::move(tokenizer)};
}

}  // namespace dualenc

#include "dualenc/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dualenc/errors.hpp"

namespace dualenc {

namespace {

// Standard deviation of a unit normal truncated to [-2, 2].
constexpr double kTruncatedStd = 0.87962566103423978;

std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i) + "/"; }

struct ParamShape {
  std::string name;
  Shape shape;
  enum class Init { kVarianceScaling, kZeros, kOnes } init;
  std::size_t fan_in = 1;
};

std::vector<ParamShape> param_shapes(const EncoderConfig& c) {
  using I = ParamShape::Init;
  std::vector<ParamShape> out;
  out.push_back({"token_embedding", {c.vocab_size, c.d_model}, I::kVarianceScaling, c.d_model});
  out.push_back({"position_embedding", {c.max_seq_len, c.d_model}, I::kVarianceScaling, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    out.push_back({p + "attn_norm/gain", {c.d_model}, I::kOnes});
    out.push_back({p + "attn_norm/bias", {c.d_model}, I::kZeros});
    for (const char* proj : {"query", "key", "value", "output"}) {
      out.push_back({p + "attn/" + proj + "/weight", {c.d_model, c.d_model}, I::kVarianceScaling, c.d_model});
      out.push_back({p + "attn/" + proj + "/bias", {c.d_model}, I::kZeros});
    }
    out.push_back({p + "ffn_norm/gain", {c.d_model}, I::kOnes});
    out.push_back({p + "ffn_norm/bias", {c.d_model}, I::kZeros});
    out.push_back({p + "ffn/in/weight", {c.d_model, c.d_ff}, I::kVarianceScaling, c.d_model});
    out.push_back({p + "ffn/in/bias", {c.d_ff}, I::kZeros});
    out.push_back({p + "ffn/out/weight", {c.d_ff, c.d_model}, I::kVarianceScaling, c.d_ff});
    out.push_back({p + "ffn/out/bias", {c.d_model}, I::kZeros});
  }
  out.push_back({"final_norm/gain", {c.d_model}, I::kOnes});
  out.push_back({"final_norm/bias", {c.d_model}, I::kZeros});
  out.push_back({"projection/weight", {c.d_model, c.d_embed}, I::kVarianceScaling, c.d_model});
  out.push_back({"projection/bias", {c.d_embed}, I::kZeros});
  return out;
}

}  // namespace

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("encoder config: ") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  positive(d_embed, "d_embed");
  if (d_model % n_heads != 0) {
    throw ConfigError("encoder config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
}

EncoderConfig EncoderConfig::preset(std::string_view name, std::size_t vocab_size,
                                    std::size_t max_seq_len) {
  EncoderConfig c;
  c.vocab_size = vocab_size;
  c.max_seq_len = max_seq_len;
  c.d_embed = 64;
  if (name == "small") {
    c.n_layers = 2, c.d_model = 64, c.n_heads = 4, c.d_ff = 256;
  } else if (name == "base") {
    c.n_layers = 4, c.d_model = 128, c.n_heads = 8, c.d_ff = 512;
  } else if (name == "large") {
    c.n_layers = 6, c.d_model = 256, c.n_heads = 8, c.d_ff = 1024;
  } else {
    throw ConfigError("unknown size preset '" + std::string(name) +
                      "' (expected small, base or large)");
  }
  c.validate();
  return c;
}

std::vector<std::string> preset_names() { return {"small", "base", "large"}; }

std::string_view to_string(Component component) {
  switch (component) {
    case Component::kTokenEmbedder: return "token_embedder";
    case Component::kBody: return "body";
    case Component::kProjection: return "projection";
  }
  return "unknown";
}

Component component_of(std::string_view param_name) {
  if (param_name == "token_embedding") return Component::kTokenEmbedder;
  if (param_name.starts_with("projection/")) return Component::kProjection;
  return Component::kBody;
}

std::vector<std::string> tower_param_names(const EncoderConfig& config) {
  std::vector<std::string> names;
  for (auto& p : param_shapes(config)) names.push_back(std::move(p.name));
  return names;
}

TowerParams TowerParams::bind(const EncoderConfig& config, const Lookup& lookup) {
  TowerParams t;
  t.token_embedding = lookup("token_embedding");
  t.position_embedding = lookup("position_embedding");
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    LayerParams layer;
    layer.attn_norm_gain = lookup(p + "attn_norm/gain");
    layer.attn_norm_bias = lookup(p + "attn_norm/bias");
    layer.query_weight = lookup(p + "attn/query/weight");
    layer.query_bias = lookup(p + "attn/query/bias");
    layer.key_weight = lookup(p + "attn/key/weight");
    layer.key_bias = lookup(p + "attn/key/bias");
    layer.value_weight = lookup(p + "attn/value/weight");
    layer.value_bias = lookup(p + "attn/value/bias");
    layer.output_weight = lookup(p + "attn/output/weight");
    layer.output_bias = lookup(p + "attn/output/bias");
    layer.ffn_norm_gain = lookup(p + "ffn_norm/gain");
    layer.ffn_norm_bias = lookup(p + "ffn_norm/bias");
    layer.ffn_in_weight = lookup(p + "ffn/in/weight");
    layer.ffn_in_bias = lookup(p + "ffn/in/bias");
    layer.ffn_out_weight = lookup(p + "ffn/out/weight");
    layer.ffn_out_bias = lookup(p + "ffn/out/bias");
    t.layers.push_back(std::move(layer));
  }
  t.final_norm_gain = lookup("final_norm/gain");
  t.final_norm_bias = lookup("final_norm/bias");
  t.projection_weight = lookup("projection/weight");
  t.projection_bias = lookup("projection/bias");
  return t;
}

std::vector<Tensor> TowerParams::flatten() const {
  std::vector<Tensor> out{token_embedding, position_embedding};
  for (const auto& l : layers) {
    out.insert(out.end(),
               {l.attn_norm_gain, l.attn_norm_bias, l.query_weight, l.query_bias,
                l.key_weight, l.key_bias, l.value_weight, l.value_bias,
                l.output_weight, l.output_bias, l.ffn_norm_gain, l.ffn_norm_bias,
                l.ffn_in_weight, l.ffn_in_bias, l.ffn_out_weight, l.ffn_out_bias});
  }
  out.insert(out.end(), {final_norm_gain, final_norm_bias, projection_weight,
                         projection_bias});
  return out;
}

ParamStore init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamStore store;
  for (const auto& p : param_shapes(config)) {
    const std::size_t n = shape_numel(p.shape);
    std::vector<double> values(n, 0.0);
    switch (p.init) {
      case ParamShape::Init::kZeros:
        break;
      case ParamShape::Init::kOnes:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case ParamShape::Init::kVarianceScaling: {
        const double stddev =
            std::sqrt(1.0 / static_cast<double>(p.fan_in)) / kTruncatedStd;
        for (double& v : values) {
          double z;
          do {
            z = normal(rng);
          } while (std::abs(z) > 2.0);
          v = z * stddev;
        }
        break;
      }
    }
    store.add(p.name, Tensor::from_data(p.shape, std::move(values)));
  }
  return store;
}

TokenBatch pack_batch(std::span<const TokenizedText> all,
                      std::span<const std::size_t> indices) {
  TokenBatch out;
  out.batch = indices.size();
  if (indices.empty()) throw EmptyInputError("pack_batch: no sequences");
  std::size_t width = 0;
  for (std::size_t idx : indices) {
    const auto& item = all[idx];
    for (std::size_t t = item.mask.size(); t > 0; --t) {
      if (item.mask[t - 1]) {
        width = std::max(width, t);
        break;
      }
    }
  }
  if (width == 0) throw EmptyInputError("pack_batch: every sequence is empty");
  out.seq_len = width;
  out.ids.assign(out.batch * width, Tokenizer::kPadId);
  out.mask.assign(out.batch * width, 0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& item = all[indices[r]];
    if (item.ids.size() != item.mask.size()) {
      throw DimensionError("pack_batch: ids and mask lengths differ");
    }
    const std::size_t n = std::min(width, item.ids.size());
    std::copy_n(item.ids.begin(), n, out.ids.begin() + r * width);
    std::copy_n(item.mask.begin(), n, out.mask.begin() + r * width);
  }
  return out;
}

TokenBatch pack_batch(std::span<const TokenizedText> items) {
  std::vector<std::size_t> indices(items.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  return pack_batch(items, indices);
}

Tensor encode_hidden(const EncoderConfig& config, const TowerParams& tower,
                     const TokenBatch& batch) {
  if (batch.ids.size() != batch.batch * batch.seq_len ||
      batch.mask.size() != batch.ids.size()) {
    throw DimensionError("encode: ids/mask do not match batch x seq_len");
  }
  if (batch.seq_len > config.max_seq_len) {
    throw DimensionError("encode: sequence length " +
                         std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
  }
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const auto* m = batch.mask.data() + b * batch.seq_len;
    if (std::none_of(m, m + batch.seq_len, [](std::uint8_t v) { return v != 0; })) {
      throw EmptyInputError("encode: sequence " + std::to_string(b) +
                            " has an all-zero mask");
    }
  }
  std::vector<int> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i % batch.seq_len);
  }
  Tensor x = add(gather_rows(tower.token_embedding, batch.ids),
                 gather_rows(tower.position_embedding, positions));
  for (const auto& layer : tower.layers) {
    Tensor h = layer_norm(x, layer.attn_norm_gain, layer.attn_norm_bias);
    Tensor q = add_bias(matmul(h, layer.query_weight), layer.query_bias);
    Tensor k = add_bias(matmul(h, layer.key_weight), layer.key_bias);
    Tensor v = add_bias(matmul(h, layer.value_weight), layer.value_bias);
    Tensor attended = self_attention(q, k, v, batch.mask, batch.batch,
                                     batch.seq_len, config.n_heads);
    x = add(x, add_bias(matmul(attended, layer.output_weight), layer.output_bias));
    h = layer_norm(x, layer.ffn_norm_gain, layer.ffn_norm_bias);
    Tensor f = gelu(add_bias(matmul(h, layer.ffn_in_weight), layer.ffn_in_bias));
    x = add(x, add_bias(matmul(f, layer.ffn_out_weight), layer.ffn_out_bias));
  }
  return layer_norm(x, tower.final_norm_gain, tower.final_norm_bias);
}

Tensor project(const TowerParams& tower, const Tensor& pooled) {
  if (pooled.rank() == 1) {
    return reshape(project(tower, reshape(pooled, {1, pooled.numel()})),
                   {tower.projection_bias.numel()});
  }
  return add_bias(matmul(pooled, tower.projection_weight), tower.projection_bias);
}

EncodedBatch encode_batch(const EncoderConfig& config, const TowerParams& tower,
                          const TokenBatch& batch) {
  Tensor hidden = encode_hidden(config, tower, batch);
  Tensor pooled = masked_mean(hidden, batch.mask, batch.batch, batch.seq_len);
  return {project(tower, pooled), pooled};
}

EncoderOutput encode(const EncoderConfig& config, const TowerParams& tower,
                     std::span<const int> ids, std::span<const std::uint8_t> mask) {
  if (ids.size() != mask.size() || ids.empty()) {
    throw DimensionError("encode: ids and mask must be non-empty and equal length");
  }
  TokenizedText single{{ids.begin(), ids.end()}, {mask.begin(), mask.end()}};
  const TokenBatch batch = pack_batch(std::span<const TokenizedText>(&single, 1));
  auto out = encode_batch(config, tower, batch);
  return {reshape(out.embedding, {config.d_embed}),
          reshape(out.pooled, {config.d_model})};
}

}  // namespace dualenc

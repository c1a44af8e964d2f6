#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dualenc/params.hpp"
#include "dualenc/tensor.hpp"
#include "dualenc/tokenizer.hpp"

namespace dualenc {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 16;
  std::size_t d_embed = 64;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;

  // Desk-scale stand-ins for the small/base/large checkpoints.
  static EncoderConfig preset(std::string_view name, std::size_t vocab_size,
                              std::size_t max_seq_len = 16);
};

std::vector<std::string> preset_names();

// Which part of a tower a parameter belongs to; sharing decisions are made
// per component.
enum class Component { kTokenEmbedder, kBody, kProjection };

std::string_view to_string(Component component);
Component component_of(std::string_view param_name);

// Unprefixed parameter names of one tower, in initialization order.
std::vector<std::string> tower_param_names(const EncoderConfig& config);

struct LayerParams {
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor query_weight, query_bias;
  Tensor key_weight, key_bias;
  Tensor value_weight, value_bias;
  Tensor output_weight, output_bias;
  Tensor ffn_norm_gain, ffn_norm_bias;
  Tensor ffn_in_weight, ffn_in_bias;
  Tensor ffn_out_weight, ffn_out_bias;
};

// Handles to the tensors one tower computes with. Aliased handles between two
// towers are shared parameters.
struct TowerParams {
  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<LayerParams> layers;
  Tensor final_norm_gain, final_norm_bias;
  Tensor projection_weight, projection_bias;

  // Handles in tower_param_names() order.
  std::vector<Tensor> flatten() const;

  using Lookup = std::function<Tensor(const std::string&)>;
  static TowerParams bind(const EncoderConfig& config, const Lookup& lookup);
  static TowerParams bind(const EncoderConfig& config, const ParamStore& store) {
    return bind(config, [&store](const std::string& n) { return store.get(n); });
  }
};

// Variance-scaling init (truncated normal, variance 1/fan_in) for every
// weight matrix and table; zero biases, unit norm gains.
ParamStore init_params(const EncoderConfig& config, std::uint64_t seed);

// Token ids and mask for a batch of sequences, packed row-major [batch x seq_len].
struct TokenBatch {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

// Packs the selected sequences; trailing columns that are padding in every
// row are dropped.
TokenBatch pack_batch(std::span<const TokenizedText> all,
                      std::span<const std::size_t> indices);
TokenBatch pack_batch(std::span<const TokenizedText> items);

struct EncoderOutput {
  Tensor embedding;  // [d_embed], post-projection
  Tensor pooled;     // [d_model], pre-projection
};

struct EncodedBatch {
  Tensor embedding;  // [batch x d_embed]
  Tensor pooled;     // [batch x d_model]
};

// Final hidden states [batch*seq_len x d_model], before pooling.
Tensor encode_hidden(const EncoderConfig& config, const TowerParams& tower,
                     const TokenBatch& batch);
Tensor project(const TowerParams& tower, const Tensor& pooled);
EncodedBatch encode_batch(const EncoderConfig& config, const TowerParams& tower,
                          const TokenBatch& batch);
EncoderOutput encode(const EncoderConfig& config, const TowerParams& tower,
                     std::span<const int> ids,
                     std::span<const std::uint8_t> mask);

}  // namespace dualenc

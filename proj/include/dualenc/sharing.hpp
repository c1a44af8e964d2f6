#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dualenc/encoder.hpp"
#include "dualenc/params.hpp"
#include "dualenc/tokenizer.hpp"

namespace dualenc {

enum class Variant { kSde, kAde, kAdeSte, kAdeFte, kAdeSpl };

std::string_view to_string(Variant variant);
// Accepts SDE, ADE, ADE-STE, ADE-FTE, ADE-SPL (case-insensitive).
Variant parse_variant(std::string_view name);
std::vector<Variant> all_variants();

struct SharingSpec {
  bool share_token_embedder = false;
  bool freeze_token_embedder = false;
  bool share_encoder_body = false;
  bool share_projection = false;

  static SharingSpec for_variant(Variant variant);
  // Throws ConfigError naming the offending flags.
  void validate() const;
  bool shares(Component component) const;
  bool operator==(const SharingSpec&) const = default;
};

// The named variant matching these flags, if any.
std::optional<Variant> variant_of(const SharingSpec& spec);

enum class Tower { kQuestion, kAnswer };

// Two towers over one ParamStore. Shared components live once under
// "shared/", per-tower ones under "q/" and "a/". Copies share storage
// (handles), use clone() for an independent model.
class DualEncoderModel {
 public:
  static DualEncoderModel build(const EncoderConfig& config,
                                const SharingSpec& spec, std::uint64_t seed);
  // Reassembles a model from stored parts (checkpoint load).
  static DualEncoderModel assemble(
      const EncoderConfig& config, const SharingSpec& spec, ParamStore params,
      std::map<std::string, std::vector<double>> frozen_snapshots);

  const EncoderConfig& config() const { return config_; }
  const SharingSpec& spec() const { return spec_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const TowerParams& tower(Tower which) const {
    return which == Tower::kQuestion ? question_ : answer_;
  }
  const std::map<std::string, std::vector<double>>& frozen_snapshots() const {
    return frozen_snapshots_;
  }

  // Store name that `base_name` resolves to in the given tower.
  std::string storage_name(Tower which, const std::string& base_name) const;

  // Stable hash over config, spec and every parameter value.
  std::string fingerprint() const;
  DualEncoderModel clone() const;

 private:
  DualEncoderModel() = default;
  void bind_towers();

  EncoderConfig config_;
  SharingSpec spec_;
  ParamStore params_;
  std::map<std::string, std::vector<double>> frozen_snapshots_;
  TowerParams question_;
  TowerParams answer_;
};

EncoderOutput encode_question(const DualEncoderModel& model,
                              std::span<const int> ids,
                              std::span<const std::uint8_t> mask);
EncoderOutput encode_answer(const DualEncoderModel& model,
                            std::span<const int> ids,
                            std::span<const std::uint8_t> mask);
EncodedBatch encode_batch(const DualEncoderModel& model, Tower which,
                          const TokenBatch& batch);

struct ComponentStatus {
  std::string param;       // unprefixed name
  std::string component;   // token_embedder | body | projection
  std::string question_storage;
  std::string answer_storage;
  bool aliased = false;
  bool trainable = true;
  bool towers_equal = false;  // bitwise value equality between the two towers
};

struct SharingReport {
  std::string variant;  // variant name or "custom"
  std::vector<ComponentStatus> params;
  std::vector<std::string> violations;
  std::size_t aliased_count = 0;
  std::size_t differing_count = 0;  // non-aliased params whose towers differ

  bool ok() const { return violations.empty(); }
  std::string to_json() const;
};

// Checks storage-level invariants without throwing.
SharingReport inspect_sharing(const DualEncoderModel& model);
// Same check; throws InvariantViolation naming the first bad tensor.
SharingReport assert_sharing(const DualEncoderModel& model);

// Binary container: magic, version, config, spec, tokenizer, named tensors
// with trainable flags, frozen init snapshots and the model fingerprint.
struct Checkpoint {
  DualEncoderModel model;
  Tokenizer tokenizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path,
                     const DualEncoderModel& model, const Tokenizer& tokenizer);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dualenc

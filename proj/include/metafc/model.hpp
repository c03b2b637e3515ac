#pragma once

// Compact encoder/decoder watermarking model with functional parameters.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "metafc/autograd.hpp"
#include "metafc/data.hpp"

namespace metafc::model {

struct ModelConfig {
  int64_t height = 64;
  int64_t width = 64;
  int64_t channels = 3;
  int64_t message_len = 30;
  int64_t hidden_channels = 8;
  int64_t num_blocks = 1;
  double embed_strength = 0.05;
  int64_t feature_dim = 64;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct NamedParam {
  std::string name;
  ad::Var value;
};

// θ_e and θ_d as ordered named tensors. Copies share the underlying nodes,
// which are never mutated; updates always build new tensors.
struct ParamSet {
  std::vector<NamedParam> encoder;
  std::vector<NamedParam> decoder;

  size_t size() const { return encoder.size() + decoder.size(); }
  // Encoder tensors followed by decoder tensors.
  std::vector<ad::Var> vars() const;
  std::vector<std::string> names() const;
  int64_t numel() const;
  // Leaves holding the current values with requires_grad set.
  ParamSet as_leaves() const;
  ParamSet detached() const;
  // Same layout, tensors taken in vars() order.
  ParamSet with_vars(const std::vector<ad::Var>& vars) const;
  const ad::Var& get(const std::string& name) const;
};

struct DecoderOutput {
  Tensor logits;    // [B, L]
  Tensor features;  // [B, feature_dim]
};

struct DecodedVars {
  ad::Var logits;
  ad::Var features;
};

// Anything the training loop can optimize: an encoder producing the
// watermarked batch and a decoder producing logits plus a feature tap.
class WatermarkModel {
 public:
  virtual ~WatermarkModel() = default;
  virtual ParamSet init(uint64_t seed) const = 0;
  // `cover` [B,C,H,W], `bits` [B,L] in {0,1}.
  virtual ad::Var encode(const ParamSet& params, const ad::Var& cover, const Tensor& bits) const = 0;
  virtual DecodedVars decode(const ParamSet& params, const ad::Var& image) const = 0;
  virtual int64_t message_length() const = 0;
  virtual Shape image_shape() const = 0;  // [C, H, W]
  virtual nlohmann::json describe() const = 0;
};

// Encoder: stride-2 3x3 conv; the message is projected to an h-channel grid
// at 1/8 resolution, upsampled and added to those features; num_blocks 3x3
// convs; nearest 2x upsample; 3x3 conv to C channels; tanh residual.
// Decoder: three stride-2 3x3 convs down to the 1/8 grid, num_blocks 3x3
// convs, flatten, linear to feature_dim with LeakyReLU (the feature tap),
// linear head to L logits.
class ConvModel : public WatermarkModel {
 public:
  explicit ConvModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParamSet init(uint64_t seed) const override;
  ad::Var encode(const ParamSet& params, const ad::Var& cover, const Tensor& bits) const override;
  DecodedVars decode(const ParamSet& params, const ad::Var& image) const override;
  int64_t message_length() const override { return config_.message_len; }
  Shape image_shape() const override { return {config_.channels, config_.height, config_.width}; }
  nlohmann::json describe() const override { return config_.to_json(); }

  // (name, shape) in ParamSet order.
  std::vector<std::pair<std::string, Shape>> encoder_layout() const;
  std::vector<std::pair<std::string, Shape>> decoder_layout() const;

 private:
  int64_t grid_area() const { return (config_.height / 8) * (config_.width / 8); }

  ModelConfig config_;
};

ParamSet init(const ModelConfig& config, uint64_t seed);
data::ImageBatch encode(const ModelConfig& config, const ParamSet& params, const data::ImageBatch& cover,
                        const data::MessageBatch& message);
DecoderOutput decode(const ModelConfig& config, const ParamSet& params, const data::ImageBatch& image);

// t - alpha * g for every tensor; differentiable in both t and g.
ParamSet step_params(const ParamSet& params, const std::vector<ad::Var>& grads, double alpha);

// Checkpoint archive: "METAFCK1", uint64 little-endian header length, JSON
// header, then raw little-endian float64 tensor data at the listed offsets.
struct Checkpoint {
  nlohmann::json model;  // model description
  ParamSet params;
  std::vector<NamedParam> optimizer;  // optimizer moment tensors
  int64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace metafc::model

#include "metafc/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "metafc/image_ops.hpp"
#include "metafc/rng.hpp"

namespace metafc::model {

namespace {

using ad::Var;

constexpr double kSlope = 0.2;
constexpr char kMagic[8] = {'M', 'E', 'T', 'A', 'F', 'C', 'K', '1'};

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw std::invalid_argument("model config: '" + field + "' " + why);
}

Var conv_bias(const Var& x, const Var& w, const Var& b, int stride) {
  Var y = ad::conv2d(x, w, stride, static_cast<int>(w.shape()[2] / 2));
  return ad::add(y, ad::broadcast_to(b, y.shape()));
}

Var lrelu(const Var& x) { return ad::leaky_relu(x, kSlope); }

const Var& find(const std::vector<NamedParam>& group, const std::string& name) {
  for (const auto& p : group)
    if (p.name == name) return p.value;
  throw std::out_of_range("parameter '" + name + "' not found");
}

std::string block_name(const char* prefix, int64_t i) { return std::string(prefix) + ".block" + std::to_string(i); }

}  // namespace

void ModelConfig::validate() const {
  if (height < 8 || height % 8 != 0) bad_field("height", "must be a positive multiple of 8, got " + std::to_string(height));
  if (width < 8 || width % 8 != 0) bad_field("width", "must be a positive multiple of 8, got " + std::to_string(width));
  if (channels != 1 && channels != 3) bad_field("channels", "must be 1 or 3, got " + std::to_string(channels));
  if (message_len < 1) bad_field("message_len", "must be >= 1");
  if (hidden_channels < 1) bad_field("hidden_channels", "must be >= 1");
  if (num_blocks < 0) bad_field("num_blocks", "must be >= 0");
  if (!(embed_strength >= 0.0) || !std::isfinite(embed_strength)) bad_field("embed_strength", "must be finite and >= 0");
  if (feature_dim < message_len) bad_field("feature_dim", "must be >= message_len");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"height", height},          {"width", width},           {"channels", channels},
          {"message_len", message_len}, {"hidden_channels", hidden_channels}, {"num_blocks", num_blocks},
          {"embed_strength", embed_strength}, {"feature_dim", feature_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.height = j.at("height").get<int64_t>();
  c.width = j.at("width").get<int64_t>();
  c.channels = j.at("channels").get<int64_t>();
  c.message_len = j.at("message_len").get<int64_t>();
  c.hidden_channels = j.at("hidden_channels").get<int64_t>();
  c.num_blocks = j.at("num_blocks").get<int64_t>();
  c.embed_strength = j.at("embed_strength").get<double>();
  c.feature_dim = j.at("feature_dim").get<int64_t>();
  c.validate();
  return c;
}

std::vector<Var> ParamSet::vars() const {
  std::vector<Var> out;
  out.reserve(size());
  for (const auto& p : encoder) out.push_back(p.value);
  for (const auto& p : decoder) out.push_back(p.value);
  return out;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  for (const auto& p : encoder) out.push_back(p.name);
  for (const auto& p : decoder) out.push_back(p.name);
  return out;
}

int64_t ParamSet::numel() const {
  int64_t n = 0;
  for (const auto& v : vars()) n += v.numel();
  return n;
}

ParamSet ParamSet::as_leaves() const {
  ParamSet out = *this;
  for (auto* group : {&out.encoder, &out.decoder})
    for (auto& p : *group) p.value = Var(p.value.value(), true);
  return out;
}

ParamSet ParamSet::detached() const {
  ParamSet out = *this;
  for (auto* group : {&out.encoder, &out.decoder})
    for (auto& p : *group) p.value = p.value.detach();
  return out;
}

ParamSet ParamSet::with_vars(const std::vector<Var>& vars) const {
  if (vars.size() != size()) {
    throw std::invalid_argument("ParamSet: expected " + std::to_string(size()) + " tensors, got " + std::to_string(vars.size()));
  }
  ParamSet out = *this;
  size_t i = 0;
  for (auto* group : {&out.encoder, &out.decoder})
    for (auto& p : *group) {
      if (vars[i].shape() != p.value.shape()) {
        throw std::invalid_argument("ParamSet: tensor '" + p.name + "' has shape " + shape_str(p.value.shape()) + ", got " +
                                    shape_str(vars[i].shape()));
      }
      p.value = vars[i++];
    }
  return out;
}

const Var& ParamSet::get(const std::string& name) const {
  for (const auto* group : {&encoder, &decoder})
    for (const auto& p : *group)
      if (p.name == name) return p.value;
  throw std::out_of_range("parameter '" + name + "' not found");
}

ConvModel::ConvModel(ModelConfig config) : config_(config) { config_.validate(); }

std::vector<std::pair<std::string, Shape>> ConvModel::encoder_layout() const {
  const int64_t c = config_.channels, h = config_.hidden_channels;
  std::vector<std::pair<std::string, Shape>> out = {
      {"enc.in.w", {h, c, 3, 3}},
      {"enc.in.b", {1, h, 1, 1}},
      {"enc.msg.w", {config_.message_len, h * grid_area()}},
  };
  for (int64_t i = 0; i < config_.num_blocks; ++i) {
    out.push_back({block_name("enc", i) + ".w", {h, h, 3, 3}});
    out.push_back({block_name("enc", i) + ".b", {1, h, 1, 1}});
  }
  out.push_back({"enc.out.w", {c, h, 3, 3}});
  out.push_back({"enc.out.b", {1, c, 1, 1}});
  return out;
}

std::vector<std::pair<std::string, Shape>> ConvModel::decoder_layout() const {
  const int64_t c = config_.channels, h = config_.hidden_channels, f = config_.feature_dim;
  std::vector<std::pair<std::string, Shape>> out = {
      {"dec.in.w", {h, c, 3, 3}},
      {"dec.in.b", {1, h, 1, 1}},
      {"dec.down0.w", {h, h, 3, 3}},
      {"dec.down0.b", {1, h, 1, 1}},
      {"dec.down1.w", {h, h, 3, 3}},
      {"dec.down1.b", {1, h, 1, 1}},
  };
  for (int64_t i = 0; i < config_.num_blocks; ++i) {
    out.push_back({block_name("dec", i) + ".w", {h, h, 3, 3}});
    out.push_back({block_name("dec", i) + ".b", {1, h, 1, 1}});
  }
  out.push_back({"dec.feat.w", {f, h * grid_area()}});
  out.push_back({"dec.feat.b", {1, f}});
  out.push_back({"dec.head.w", {config_.message_len, f}});
  out.push_back({"dec.head.b", {1, config_.message_len}});
  return out;
}

ParamSet ConvModel::init(uint64_t seed) const {
  auto make = [seed](const std::vector<std::pair<std::string, Shape>>& layout) {
    std::vector<NamedParam> group;
    for (const auto& [name, shape] : layout) {
      Tensor t(shape);
      if (name.ends_with(".w")) {
        // fan-in is every dimension but the output one; the message
        // projection [L, h*g] is stored input-major.
        const bool message = name == "enc.msg.w";
        const int64_t fan_in = message ? shape[0] : shape_numel(shape) / shape[0];
        const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        Rng rng(derive_seed(seed, name));
        for (auto& v : t.data()) v = std * rng.normal();
      }
      group.push_back({name, Var(std::move(t))});
    }
    return group;
  };
  return ParamSet{make(encoder_layout()), make(decoder_layout())};
}

Var ConvModel::encode(const ParamSet& params, const Var& cover, const Tensor& bits) const {
  const Shape& shape = cover.shape();
  if (shape.size() != 4 || shape[1] != config_.channels || shape[2] != config_.height || shape[3] != config_.width) {
    throw std::invalid_argument("encode: cover shape " + shape_str(shape) + " does not match the model's [B," +
                                std::to_string(config_.channels) + "," + std::to_string(config_.height) + "," +
                                std::to_string(config_.width) + "]");
  }
  if (bits.rank() != 2 || bits.dim(0) != shape[0] || bits.dim(1) != config_.message_len) {
    throw std::invalid_argument("encode: message shape " + shape_str(bits.shape()) + ", expected [" + std::to_string(shape[0]) +
                                "," + std::to_string(config_.message_len) + "]");
  }
  const auto& p = params.encoder;
  const int64_t b = shape[0], h = config_.hidden_channels;
  Tensor signed_bits(bits.shape());
  for (int64_t i = 0; i < bits.numel(); ++i) signed_bits[i] = 2.0 * bits[i] - 1.0;

  Var x = conv_bias(cover, find(p, "enc.in.w"), find(p, "enc.in.b"), 2);
  Var msg = ad::matmul(ad::constant(std::move(signed_bits)), find(p, "enc.msg.w"));
  msg = ad::reshape(msg, {b, h, config_.height / 8, config_.width / 8});
  msg = ad::linear_map(msg, std::make_shared<image_ops::UpsampleMap>(msg.shape(), 4));
  x = lrelu(ad::add(x, msg));
  for (int64_t i = 0; i < config_.num_blocks; ++i) {
    x = lrelu(conv_bias(x, find(p, block_name("enc", i) + ".w"), find(p, block_name("enc", i) + ".b"), 1));
  }
  x = ad::linear_map(x, std::make_shared<image_ops::UpsampleMap>(x.shape(), 2));
  Var residual = ad::tanh(conv_bias(x, find(p, "enc.out.w"), find(p, "enc.out.b"), 1));
  return ad::clamp(ad::add(cover, ad::scale(residual, config_.embed_strength)), 0.0, 1.0);
}

DecodedVars ConvModel::decode(const ParamSet& params, const Var& image) const {
  const Shape& shape = image.shape();
  if (shape.size() != 4 || shape[1] != config_.channels || shape[2] != config_.height || shape[3] != config_.width) {
    throw std::invalid_argument("decode: image shape " + shape_str(shape) + " does not match the model's [B," +
                                std::to_string(config_.channels) + "," + std::to_string(config_.height) + "," +
                                std::to_string(config_.width) + "]");
  }
  const auto& p = params.decoder;
  Var x = lrelu(conv_bias(image, find(p, "dec.in.w"), find(p, "dec.in.b"), 2));
  x = lrelu(conv_bias(x, find(p, "dec.down0.w"), find(p, "dec.down0.b"), 2));
  x = lrelu(conv_bias(x, find(p, "dec.down1.w"), find(p, "dec.down1.b"), 2));
  for (int64_t i = 0; i < config_.num_blocks; ++i) {
    x = lrelu(conv_bias(x, find(p, block_name("dec", i) + ".w"), find(p, block_name("dec", i) + ".b"), 1));
  }
  const int64_t b = shape[0];
  Var flat = ad::reshape(x, {b, config_.hidden_channels * grid_area()});
  Var features = ad::matmul(flat, find(p, "dec.feat.w"), false, true);
  features = lrelu(ad::add(features, ad::broadcast_to(find(p, "dec.feat.b"), features.shape())));
  Var logits = ad::matmul(features, find(p, "dec.head.w"), false, true);
  logits = ad::add(logits, ad::broadcast_to(find(p, "dec.head.b"), logits.shape()));
  return {logits, features};
}

ParamSet init(const ModelConfig& config, uint64_t seed) { return ConvModel(config).init(seed); }

data::ImageBatch encode(const ModelConfig& config, const ParamSet& params, const data::ImageBatch& cover,
                        const data::MessageBatch& message) {
  ad::GradModeGuard off(false);
  Var out = ConvModel(config).encode(params, Var(cover.pixels), message.bits);
  return {out.value(), data::ImageRole::Watermarked};
}

DecoderOutput decode(const ModelConfig& config, const ParamSet& params, const data::ImageBatch& image) {
  ad::GradModeGuard off(false);
  auto out = ConvModel(config).decode(params, Var(image.pixels));
  return {out.logits.value(), out.features.value()};
}

ParamSet step_params(const ParamSet& params, const std::vector<Var>& grads, double alpha) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("step_params: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " tensors");
  }
  const auto vars = params.vars();
  const auto names = params.names();
  std::vector<Var> next;
  next.reserve(vars.size());
  for (size_t i = 0; i < vars.size(); ++i) {
    if (grads[i].shape() != vars[i].shape()) {
      throw std::invalid_argument("step_params: gradient for '" + names[i] + "' has shape " + shape_str(grads[i].shape()) +
                                  ", parameter is " + shape_str(vars[i].shape()));
    }
    next.push_back(alpha == 0.0 ? ad::add_scalar(vars[i], 0.0) : ad::sub(vars[i], ad::scale(grads[i], alpha)));
  }
  return params.with_vars(next);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  nlohmann::json header;
  header["format"] = "metafc-checkpoint";
  header["version"] = 1;
  header["model"] = checkpoint.model;
  header["step"] = checkpoint.step;
  header["meta"] = checkpoint.meta;
  header["tensors"] = nlohmann::json::array();
  std::vector<const Tensor*> blobs;
  uint64_t offset = 0;
  auto add_group = [&](const char* group, const std::vector<NamedParam>& params) {
    for (const auto& p : params) {
      const Tensor& t = p.value.value();
      header["tensors"].push_back({{"group", group}, {"name", p.name}, {"shape", t.shape()}, {"offset", offset}});
      offset += static_cast<uint64_t>(t.numel()) * sizeof(double);
      blobs.push_back(&t);
    }
  };
  add_group("encoder", checkpoint.params.encoder);
  add_group("decoder", checkpoint.params.decoder);
  add_group("optimizer", checkpoint.optimizer);
  const std::string text = header.dump();
  const uint64_t length = text.size();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&length), sizeof length);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Tensor* t : blobs) out.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
    if (!out) throw std::runtime_error("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  uint64_t length = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path.string() + " is not a checkpoint file");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(text);
  const auto data_start = in.tellg();

  Checkpoint ck;
  ck.model = header.at("model");
  ck.step = header.at("step").get<int64_t>();
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<Shape>());
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated tensor '" + entry.at("name").get<std::string>() + "' in " + path.string());
    NamedParam p{entry.at("name").get<std::string>(), Var(std::move(t))};
    const auto group = entry.at("group").get<std::string>();
    if (group == "encoder") ck.params.encoder.push_back(std::move(p));
    else if (group == "decoder") ck.params.decoder.push_back(std::move(p));
    else ck.optimizer.push_back(std::move(p));
  }
  return ck;
}

}  // namespace metafc::model

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mtalk/autodiff/checkpoint.hpp"
#include "mtalk/autodiff/tape.hpp"
#include "mtalk/motion/features.hpp"

namespace mtalk::tok {

using ad::ParamSet;
using ad::Tensor;

struct TokenizerConfig {
  int n_joints = 5;
  int codebook_size = 64;  // K
  int code_dim = 64;       // d
  int layers = 2;          // Q
  int downsample = 4;      // l, a power of two
  int width = 128;         // conv channels
  double beta_commit = 0.25;
  double root_velocity_weight = 6.0;  // normalization scale divisor for the root velocity channels

  int feature_dim() const { return 8 + 12 * n_joints; }
  int down_blocks() const;  // log2(l)
  void validate() const;

  // Configuration used for most experiments of the reference model.
  static TokenizerConfig reference();

  nlohmann::json to_json() const;
  static TokenizerConfig from_json(const nlohmann::json& j);
};

// Q index sequences of equal length L.
struct MotionTokens {
  std::vector<std::vector<int>> layers;

  int depth() const { return static_cast<int>(layers.size()); }
  int length() const { return layers.empty() ? 0 : static_cast<int>(layers[0].size()); }
  void validate(int codebook_size) const;
  bool operator==(const MotionTokens&) const = default;
};

// {format_version, layers: [[...], ...]}
nlohmann::json tokens_to_json(const MotionTokens& t);
MotionTokens tokens_from_json(const nlohmann::json& j);

struct QuantizeResult {
  std::vector<int> indices;
  Tensor<float> quantized;  // [L, d]
};

// Nearest codebook row per latent row (squared L2, lowest index on ties).
QuantizeResult quantize(const Tensor<float>& latents, const Tensor<float>& codebook);

// Parameters of one tokenizer bound onto a tape.
struct TokenizerVars {
  std::unordered_map<std::string, ad::Var> vars;
  ad::Var operator()(const std::string& name) const { return vars.at(name); }
};

class MotionTokenizer {
 public:
  MotionTokenizer() = default;
  MotionTokenizer(TokenizerConfig cfg, std::uint64_t seed);

  const TokenizerConfig& config() const { return cfg_; }
  ParamSet<float>& params() { return params_; }
  const ParamSet<float>& params() const { return params_; }
  const Tensor<float>& codebook(int layer) const;

  // Per-dimension normalization applied before encoding and undone after decoding.
  void set_normalization(std::vector<double> mean, std::vector<double> stddev);
  const std::vector<double>& norm_mean() const { return mean_; }
  const std::vector<double>& norm_std() const { return std_; }

  Tensor<float> normalize(const motion::MotionFeatures& f) const;
  motion::MotionFeatures denormalize(const Tensor<float>& x) const;

  // Encoder output before quantization, [M/l, d].
  Tensor<float> latents(const motion::MotionFeatures& f) const;
  // Residual quantization of latents.
  MotionTokens quantize_latents(const Tensor<float>& z) const;
  MotionTokens encode(const motion::MotionFeatures& f) const;
  // Sum of per-layer code vectors per timestep, [L, d].
  Tensor<float> embed_tokens(const MotionTokens& t) const;
  motion::MotionFeatures decode(const MotionTokens& t) const;

  // Graph builders shared by training and inference. Trainable bindings
  // accumulate gradients into the parameters; frozen ones only read them.
  TokenizerVars bind_trainable(ad::Tape<float>& tape);
  TokenizerVars bind_frozen(ad::Tape<float>& tape) const;
  ad::Var build_encoder(ad::Tape<float>& tape, const TokenizerVars& v, ad::Var x) const;
  ad::Var build_decoder(ad::Tape<float>& tape, const TokenizerVars& v, ad::Var codes) const;

  ad::Checkpoint to_checkpoint(std::int64_t step = 0) const;
  static MotionTokenizer from_checkpoint(const ad::Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static MotionTokenizer load(const std::filesystem::path& path);

 private:
  TokenizerConfig cfg_;
  ParamSet<float> params_;
  std::vector<double> mean_, std_;
};

// Concatenate every layer's index sequence across segments, then decode once.
motion::MotionFeatures compose_decode(const MotionTokenizer& tk, const std::vector<MotionTokens>& segments);
MotionTokens concat_tokens(const std::vector<MotionTokens>& segments);

struct LossTerms {
  double total = 0, recon = 0, codebook = 0, commit = 0;
};

// Per-layer codebook usage and residual rows seen while building losses.
struct QuantStats {
  std::vector<std::vector<int>> usage;          // [Q][K]
  std::vector<std::vector<Tensor<float>>> residuals;  // [Q] sampled residual batches
};

// Builds the three-term loss for one clip on `tape`; values are filled into `terms`.
ad::Var tokenizer_loss(const MotionTokenizer& tk, ad::Tape<float>& tape, const TokenizerVars& v,
                       const Tensor<float>& x_norm, LossTerms* terms = nullptr, QuantStats* stats = nullptr);

struct TokenizerTrainSettings {
  int epochs = 40;
  int batch = 32;
  double lr = 2e-4;
  double min_lr = 1e-5;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  bool reseed_dead_codes = true;
  std::function<void(int epoch, const LossTerms&)> on_epoch;
};

struct TokenizerTrainResult {
  MotionTokenizer model;
  std::vector<LossTerms> epochs;  // mean loss per epoch
  int reseeded_codes = 0;
};

// Mean / std per feature dimension over all frames; small deviations are floored.
void corpus_statistics(const std::vector<motion::MotionFeatures>& corpus, std::vector<double>& mean,
                       std::vector<double>& stddev);

TokenizerTrainResult train_tokenizer(const std::vector<motion::MotionFeatures>& corpus, const TokenizerConfig& cfg,
                                     const TokenizerTrainSettings& settings);

}  // namespace mtalk::tok

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mtalk/autodiff/checkpoint.hpp"
#include "mtalk/autodiff/optim.hpp"
#include "mtalk/autodiff/tape.hpp"
#include "mtalk/common/rng.hpp"
#include "mtalk/conversation/conversation.hpp"

namespace mtalk::lm {

using ad::Tensor;
using ad::Var;

struct LmConfig {
  int layers = 4;
  int heads = 4;
  int dim = 128;
  int ff = 512;
  int context = 512;
  int vocab = 0;
  double dropout = 0.0;
  int img_id = 3;  // placeholder expanded into the visual rows

  int head_dim() const { return dim / heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static LmConfig from_json(const nlohmann::json& j);
};

struct DecodingParams {
  enum class Mode { greedy, top_k };
  Mode mode = Mode::greedy;
  int k = 10;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_new_tokens = 256;
  int stop_id = 2;

  void validate() const;
};

// Graph-side handles for every parameter.
struct LmVars {
  std::unordered_map<std::string, Var> vars;
  Var operator()(const std::string& name) const;
};

class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const LmConfig& cfg, std::uint64_t seed);

  const LmConfig& config() const { return cfg_; }
  ad::ParamSet<float>& params() { return params_; }
  const ad::ParamSet<float>& params() const { return params_; }

  LmVars bind_trainable(ad::Tape<float>& t);
  LmVars bind_frozen(ad::Tape<float>& t) const;

  // Logits [ids.size(), vocab]. With `visual` ([R, dim]) the single placeholder
  // id is expanded into R rows; logits are returned at the original positions,
  // the placeholder's row coming from the last visual row.
  Var build_logits(ad::Tape<float>& t, const LmVars& v, std::span<const int> ids, std::optional<Var> visual = {},
                   Rng* dropout_rng = nullptr) const;

  Tensor<float> forward(std::span<const int> ids, const Tensor<float>* visual = nullptr) const;

  // Incremental decoding with a key/value cache. Returns the emitted ids,
  // including the stop id when it is reached.
  std::vector<int> generate(std::span<const int> context, const Tensor<float>* visual,
                            const DecodingParams& p) const;

  // Logits for every position of `ids`, computed through the cache path.
  Tensor<float> forward_cached(std::span<const int> ids, const Tensor<float>* visual = nullptr) const;

  ad::Checkpoint to_checkpoint(std::int64_t step = 0) const;
  static LanguageModel from_checkpoint(const ad::Checkpoint& c);
  void save(const std::filesystem::path& path, std::int64_t step = 0) const;
  static LanguageModel load(const std::filesystem::path& path);

 private:
  struct Cache;
  void check_input(std::span<const int> ids, const Tensor<float>* visual, int reserve) const;
  std::vector<float> step(Cache& c, const float* x_row) const;

  LmConfig cfg_;
  ad::ParamSet<float> params_;
};

// Masked mean negative log-likelihood.
Var lm_loss(ad::Tape<float>& t, Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask);
double lm_loss_value(const Tensor<float>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

// Supplies visual rows for samples with a visual clip. Its parameters are
// optimised jointly with the model.
struct VisualHook {
  ad::ParamSet<float>* params = nullptr;
  std::function<Var(ad::Tape<float>&, int clip, bool trainable)> build;
};

enum class Stage { pretrain, instruct };
Stage parse_stage(const std::string& s);

struct LmTrainSettings {
  Stage stage = Stage::instruct;
  int steps = 2000;
  int batch = 8;
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables
  std::filesystem::path checkpoint_dir;
  VisualHook visual;
  std::function<void(int step, double loss)> on_step;
};

struct LmTrainResult {
  std::vector<double> losses;  // mean batch loss per step
  std::vector<std::string> optimized;  // parameter names handed to AdamW
};

LmTrainResult train_lm(LanguageModel& model, const std::vector<conv::TrainingSample>& data,
                       const LmTrainSettings& s);

// Mean masked loss over a dataset without updating anything.
double evaluate_loss(const LanguageModel& model, const std::vector<conv::TrainingSample>& data,
                     const VisualHook& visual = {});

}  // namespace mtalk::lm

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "mtalk/conversation/conversation.hpp"
#include "mtalk/lm/model.hpp"
#include "mtalk/motion/corpus.hpp"
#include "mtalk/tokenizer/tokenizer.hpp"
#include "mtalk/vision/vision.hpp"

namespace mtalk::service {

namespace fs = std::filesystem;

struct Paths {
  fs::path work_dir = "work";
  fs::path corpus;       // default work_dir/corpus
  fs::path checkpoints;  // default work_dir/checkpoints
  fs::path data;         // default work_dir/data
  fs::path sessions;     // default work_dir/sessions

  fs::path tokenizer_ckpt() const { return checkpoints / "tokenizer.ckpt"; }
  fs::path vocab_file() const { return checkpoints / "vocab.json"; }
  fs::path lm_pretrain_ckpt() const { return checkpoints / "lm_pretrain.ckpt"; }
  fs::path lm_ckpt() const { return checkpoints / "lm.ckpt"; }
  fs::path visual_ckpt() const { return checkpoints / "visual.ckpt"; }
  fs::path evaluator_file() const { return checkpoints / "evaluator.json"; }
  fs::path dataset_file() const { return data / "train.jsonl"; }
  fs::path heldout_dir() const { return work_dir / "heldout"; }
};

struct CorpusSection {
  int clips = 600;
  int heldout = 128;
  motion::CorpusConfig generator;
};

struct TokenizerSection {
  tok::TokenizerConfig model;
  tok::TokenizerTrainSettings train;
};

struct DataSection {
  int text_vocab = 512;
  conv::DatasetConfig dataset;
};

struct LmSection {
  lm::LmConfig model;
  int pretrain_steps = 300;
  int instruct_steps = 1200;
  int batch = 8;
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
};

struct VisionSection {
  bool enabled = true;
  vision::Arch arch = vision::Arch::linear;
};

struct EvalSection {
  int runs = 3;
  int prompts = 64;
  int evaluator_dim = 32;
  double evaluator_ridge = 0.1;
  int div_subset = 16;
  int mm_generations = 3;
};

struct ServiceSection {
  std::string host = "127.0.0.1";
  int port = 8080;
};

struct AppConfig {
  std::uint64_t seed = 0;
  std::string skeleton = "toy5";
  Paths paths;
  CorpusSection corpus;
  TokenizerSection tokenizer;
  DataSection data;
  LmSection lm;
  VisionSection vision;
  lm::DecodingParams decoding;
  EvalSection eval;
  ServiceSection service;

  // Fills empty paths from work_dir, propagates the global seed, checks ranges.
  void finalize();
  void validate() const;
  motion::Skeleton make_skeleton() const;
};

// "key = value" lines under "[section]" headers; '#' starts a comment.
// Strings may be double-quoted. Unknown keys are rejected.
AppConfig parse_config(const std::string& text);
AppConfig load_config(const fs::path& path);
// Every supported key with its current value, in the same syntax.
std::string config_to_text(const AppConfig& cfg);

// Applies one "section.key=value" override.
void apply_override(AppConfig& cfg, const std::string& assignment);

}  // namespace mtalk::service

#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mtalk/motion/features.hpp"
#include "mtalk/motion/skeleton.hpp"
#include "mtalk/vocab/vocab.hpp"

namespace mtalk::metrics {

// ---- joint-position errors (millimetres) --------------------------------------

struct PoseErrors {
  double mpjpe = 0;
  double pa_mpjpe = 0;
  double accl = 0;  // mm / frame^2
};

PoseErrors mpjpe_family(const motion::JointPositions& pred, const motion::JointPositions& gt);
double mpjpe(const motion::JointPositions& pred, const motion::JointPositions& gt);
double pa_mpjpe(const motion::JointPositions& pred, const motion::JointPositions& gt);
double accl(const motion::JointPositions& pred, const motion::JointPositions& gt);

// Similarity transform (s, R, t) minimising |s R x + t - y| over all frames and joints.
struct Similarity {
  double scale = 1;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};
Similarity procrustes(const motion::JointPositions& pred, const motion::JointPositions& gt);

struct Displacement {
  double ade = 0;
  double fde = 0;
};
Displacement ade_fde(const motion::JointPositions& pred, const motion::JointPositions& gt);

// ---- distributions ------------------------------------------------------------

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::int64_t count = 0;

  static GaussianStats from_samples(const std::vector<std::vector<double>>& x);
  void validate() const;
};

double fid(const GaussianStats& a, const GaussianStats& b);

struct Spread {
  double diversity = 0;
  double multimodality = 0;
};

// Mean L2 between paired members of two seeded random subsets of `subset` elements each.
double diversity(const std::vector<std::vector<double>>& features, int subset, std::uint64_t seed);
// Mean pairwise L2 among each condition's generations, averaged over conditions.
double multimodality(const std::vector<std::vector<std::vector<double>>>& by_condition);
// DIV over every generation pooled together, MModality per condition.
Spread diversity_mmodality(const std::vector<std::vector<std::vector<double>>>& by_condition, int subset,
                           std::uint64_t seed);

struct Retrieval {
  double r1 = 0, r2 = 0, r3 = 0;
  double mm_dist = 0;
};

inline constexpr int kRetrievalPool = 32;
// Text i is matched with motion i; 31 mismatches are drawn per query.
Retrieval retrieval_metrics(const std::vector<std::vector<double>>& motion, const std::vector<std::vector<double>>& text,
                            std::uint64_t seed);

// ---- text -------------------------------------------------------------------

std::vector<std::string> text_tokens(const std::string& s);

struct Linguistic {
  double bleu1 = 0, bleu4 = 0;
  double rouge_l = 0;
  double cider = 0;
};

double corpus_bleu(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references,
                   int max_n);
double rouge_l(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references);
double cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references);
Linguistic linguistic(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references);

// ---- seeded evaluator -----------------------------------------------------------

struct EvaluatorConfig {
  int embed_dim = 32;
  std::uint64_t seed = 0;
  double ridge = 0.1;
};

// Motion side: per-channel time mean and std, standardised with reference
// statistics, then a fixed random projection. Text side: ridge regression from
// normalised bag-of-subwords onto the motion embedding of the paired clip.
class Evaluator {
 public:
  static Evaluator fit(const std::vector<motion::MotionFeatures>& motions, const std::vector<std::string>& captions,
                       const vocab::TextVocab& text, const EvaluatorConfig& cfg = {});

  std::vector<double> embed_motion(const motion::MotionFeatures& f) const;
  std::vector<double> embed_text(const std::string& caption) const;
  int dim() const { return cfg_.embed_dim; }

  nlohmann::json to_json() const;
  static Evaluator from_json(const nlohmann::json& j);

 private:
  Eigen::VectorXd summary(const motion::MotionFeatures& f) const;
  Eigen::VectorXd bag(const std::string& caption) const;

  EvaluatorConfig cfg_;
  vocab::TextVocab text_;
  Eigen::VectorXd mean_, std_;
  Eigen::MatrixXd projection_;  // [embed_dim, 2D]
  Eigen::MatrixXd text_map_;    // [embed_dim, vocab + 1]
};

// ---- reports ------------------------------------------------------------------

struct MetricValue {
  double value = 0;
  double ci95 = 0;  // half-width; 0 when runs == 1
  int runs = 1;
};

// 95% half-width from the t distribution over `runs` values.
MetricValue summarize_runs(const std::vector<double>& values);

struct MetricReport {
  std::map<std::string, MetricValue> values;

  void add(const std::string& name, const std::vector<double>& runs) { values[name] = summarize_runs(runs); }
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

// ---- throughput -----------------------------------------------------------------

struct FpsResult {
  double fps = 0;
  std::int64_t frames = 0;
  double seconds = 0;
  std::vector<double> per_run;
};

using Clock = std::function<double()>;  // seconds
double wall_clock();

// `generate_once` runs one batch-size-one generation and returns the number of
// motion timesteps emitted; each counts `downsample` frames.
FpsResult fps_harness(const std::function<int()>& generate_once, int downsample, int runs, const Clock& clock = wall_clock);

}  // namespace mtalk::metrics

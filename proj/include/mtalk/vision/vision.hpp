#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mtalk/autodiff/checkpoint.hpp"
#include "mtalk/autodiff/tape.hpp"
#include "mtalk/motion/skeleton.hpp"

namespace mtalk::vision {

using ad::Tensor;
using ad::Var;

struct VisualFeature {
  Tensor<float> rows;  // [T, D_v]
  std::string provider;

  int frames() const { return rows.rows(); }
  int dim() const { return rows.cols(); }
  void validate() const;
};

// World-fixed orthographic grids: XZ (top view) and XY (front view), each
// `resolution` cells across `extent` metres, centred on `origin`.
struct GridSpec {
  int resolution = 16;
  double extent = 4.0;
  motion::Vec3 origin{0.0, 1.0, 0.0};

  int feature_dim() const { return 2 * resolution * resolution; }
  void validate() const;
};

inline constexpr const char* kPoseSplatProvider = "pose-splat";

// One row per pose; each joint adds 1 to the cell it falls in on both planes.
// Joints outside the grid are dropped.
VisualFeature pose_render_features(const std::vector<std::vector<motion::Vec3>>& poses, const GridSpec& grid = {});

// Image stand-in for a clip: first pose weighted 1 and last pose weighted 0.5
// splatted into a single row.
VisualFeature clip_image_features(const motion::JointPositions& positions, const GridSpec& grid = {});

// Index of the cell a point falls in on each plane, or -1 when outside.
std::pair<int, int> splat_cells(const motion::Vec3& p, const GridSpec& grid);

// {provider, d_v, t, rows}
nlohmann::json feature_to_json(const VisualFeature& f);
VisualFeature feature_from_json(const nlohmann::json& j);
void save_feature_file(const std::filesystem::path& path, const VisualFeature& f);
VisualFeature load_feature_file(const std::filesystem::path& path);

enum class Arch { linear, perceiver };
Arch parse_arch(const std::string& s);
std::string arch_name(Arch a);

struct PerceiverConfig {
  int depth = 6;
  int queries = 16;
  int media_dim = 1024;
  int heads = 8;
  int head_dim = 64;  // inner attention dim = heads * head_dim
  int ff_mult = 4;
  int out_dim = 768;
  bool temporal_embeddings = true;
  int max_frames = 32;

  int inner_dim() const { return heads * head_dim; }
  void validate() const;
  nlohmann::json to_json() const;
  static PerceiverConfig from_json(const nlohmann::json& j);
};

// Parameter names and shapes in creation order.
std::vector<std::pair<std::string, ad::Shape>> perceiver_shapes(const PerceiverConfig& cfg);

struct VisualEncoderConfig {
  Arch arch = Arch::linear;
  int feature_dim = 512;  // D_v
  int model_dim = 128;    // LM embedding width
  PerceiverConfig perceiver;  // used when arch == perceiver; media_dim = feature_dim, out_dim = model_dim

  void validate() const;
  nlohmann::json to_json() const;
  static VisualEncoderConfig from_json(const nlohmann::json& j);
};

class VisualEncoder {
 public:
  VisualEncoder() = default;
  VisualEncoder(const VisualEncoderConfig& cfg, std::uint64_t seed);

  const VisualEncoderConfig& config() const { return cfg_; }
  ad::ParamSet<float>& params() { return params_; }
  const ad::ParamSet<float>& params() const { return params_; }

  // Rows: T for linear, query count for the perceiver.
  Var build(ad::Tape<float>& t, const VisualFeature& f, bool trainable) const;
  Tensor<float> encode(const VisualFeature& f) const;

  ad::Checkpoint to_checkpoint() const;
  static VisualEncoder from_checkpoint(const ad::Checkpoint& c);

 private:
  Var bind(ad::Tape<float>& t, const std::string& name, bool trainable) const;
  Var build_perceiver(ad::Tape<float>& t, Var media, bool trainable) const;

  VisualEncoderConfig cfg_;
  ad::ParamSet<float> params_;
};

// Plain affine map, kept separate for the projection contract tests.
Tensor<float> project_linear(const VisualFeature& f, const Tensor<float>& w, const Tensor<float>& b);

}  // namespace mtalk::vision

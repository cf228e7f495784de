#include "mtalk/lm/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtalk/common/error.hpp"

namespace mtalk::lm {

using ad::Tape;
using nlohmann::json;

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic>;

CMap as_map(const Tensor<float>& t) { return CMap(t.ptr(), t.rows(), t.cols()); }
Eigen::Map<const RowVec> as_row(const Tensor<float>& t) { return {t.ptr(), static_cast<Eigen::Index>(t.size())}; }

std::string lname(int l, const char* part) { return "layer" + std::to_string(l) + "." + part; }

Tensor<float> gaussian(Rng& rng, int r, int c, double sd) {
  Tensor<float> t({r, c});
  for (auto& v : t.data) v = static_cast<float>(normal(rng, 0.0, sd));
  return t;
}

RowVec layer_norm_row(const RowVec& x, const Tensor<float>& g, const Tensor<float>& b) {
  const float m = x.mean();
  const float var = (x.array() - m).square().mean();
  const float inv = 1.0f / std::sqrt(var + 1e-5f);
  return ((x.array() - m) * inv * as_row(g).array() + as_row(b).array()).matrix();
}

float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f)); }

}  // namespace

// ---- config -----------------------------------------------------------------

void LmConfig::validate() const {
  require(layers >= 1 && heads >= 1 && dim >= 1 && ff >= 1, "lm config: sizes must be positive");
  require(dim % heads == 0, "lm config: dim must be divisible by heads");
  require(context >= 2, "lm config: context must be at least 2");
  require(vocab >= 4, "lm config: vocab size not set");
  require(dropout >= 0 && dropout < 1, "lm config: dropout must lie in [0, 1)");
  require(img_id >= 0 && img_id < vocab, "lm config: img_id out of range");
}

json LmConfig::to_json() const {
  return {{"layers", layers}, {"heads", heads}, {"dim", dim}, {"ff", ff}, {"context", context},
          {"vocab", vocab}, {"dropout", dropout}, {"img_id", img_id}};
}

LmConfig LmConfig::from_json(const json& j) {
  try {
    LmConfig c;
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.dim = j.at("dim");
    c.ff = j.at("ff");
    c.context = j.at("context");
    c.vocab = j.at("vocab");
    c.dropout = j.value("dropout", 0.0);
    c.img_id = j.value("img_id", 3);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("lm config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what());
  }
}

void DecodingParams::validate() const {
  require(k >= 1, "decoding: k must be at least 1");
  require(temperature > 0, "decoding: temperature must be positive");
  require(max_new_tokens >= 1, "decoding: max_new_tokens must be at least 1");
}

Var LmVars::operator()(const std::string& name) const {
  const auto it = vars.find(name);
  if (it == vars.end()) throw InvalidArgument("lm: unbound parameter '" + name + "'");
  return it->second;
}

// ---- model ------------------------------------------------------------------

LanguageModel::LanguageModel(const LmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, 0x4c4d);
  const int d = cfg.dim;
  const double sd = 0.02, sd_out = 0.02 / std::sqrt(2.0 * cfg.layers);
  params_.add("tok_emb", gaussian(rng, cfg.vocab, d, sd));
  params_.add("pos_emb", gaussian(rng, cfg.context, d, sd));
  for (int l = 0; l < cfg.layers; ++l) {
    params_.add(lname(l, "ln1.g"), Tensor<float>({d}, 1.0f));
    params_.add(lname(l, "ln1.b"), Tensor<float>({d}));
    params_.add(lname(l, "attn.wq"), gaussian(rng, d, d, sd));
    params_.add(lname(l, "attn.bq"), Tensor<float>({d}));
    params_.add(lname(l, "attn.wk"), gaussian(rng, d, d, sd));
    params_.add(lname(l, "attn.bk"), Tensor<float>({d}));
    params_.add(lname(l, "attn.wv"), gaussian(rng, d, d, sd));
    params_.add(lname(l, "attn.bv"), Tensor<float>({d}));
    params_.add(lname(l, "attn.wo"), gaussian(rng, d, d, sd_out));
    params_.add(lname(l, "attn.bo"), Tensor<float>({d}));
    params_.add(lname(l, "ln2.g"), Tensor<float>({d}, 1.0f));
    params_.add(lname(l, "ln2.b"), Tensor<float>({d}));
    params_.add(lname(l, "ff.w1"), gaussian(rng, d, cfg.ff, sd));
    params_.add(lname(l, "ff.b1"), Tensor<float>({cfg.ff}));
    params_.add(lname(l, "ff.w2"), gaussian(rng, cfg.ff, d, sd_out));
    params_.add(lname(l, "ff.b2"), Tensor<float>({d}));
  }
  params_.add("ln_f.g", Tensor<float>({d}, 1.0f));
  params_.add("ln_f.b", Tensor<float>({d}));
  params_.add("head.w", gaussian(rng, d, cfg.vocab, sd));
  params_.add("head.b", Tensor<float>({cfg.vocab}));
}

LmVars LanguageModel::bind_trainable(Tape<float>& t) {
  LmVars v;
  for (auto& p : params_) v.vars.emplace(p.name, t.param(p, true));
  return v;
}

LmVars LanguageModel::bind_frozen(Tape<float>& t) const {
  LmVars v;
  // Frozen leaves never write to the parameter.
  for (auto& p : const_cast<ad::ParamSet<float>&>(params_)) v.vars.emplace(p.name, t.param(p, false));
  return v;
}

void LanguageModel::check_input(std::span<const int> ids, const Tensor<float>* visual, int reserve) const {
  require(!ids.empty(), "lm: empty input");
  int placeholders = 0;
  for (int id : ids) {
    if (id < 0 || id >= cfg_.vocab)
      throw InvalidArgument("lm: token id " + std::to_string(id) + " outside the vocabulary of " +
                            std::to_string(cfg_.vocab));
    placeholders += id == cfg_.img_id;
  }
  int rows = static_cast<int>(ids.size());
  if (visual) {
    if (visual->shape.size() != 2 || visual->cols() != cfg_.dim)
      throw ShapeError("lm: visual embeddings must be [rows, " + std::to_string(cfg_.dim) + "]");
    require(placeholders == 1, "lm: visual embeddings need exactly one placeholder id in the input");
    rows += visual->rows() - 1;
  }
  if (rows + reserve > cfg_.context)
    throw InvalidArgument("lm: context overflow (" + std::to_string(rows) + " rows + " + std::to_string(reserve) +
                          " reserved > " + std::to_string(cfg_.context) + ")");
}

Var LanguageModel::build_logits(Tape<float>& t, const LmVars& v, std::span<const int> ids, std::optional<Var> visual,
                                Rng* dropout_rng) const {
  const int n = static_cast<int>(ids.size());
  require(n >= 1, "lm: empty input");
  Var x = t.embedding(v("tok_emb"), ids);
  int place = -1, extra = 0;
  if (visual) {
    const auto& vis = t.value(*visual);
    if (vis.shape.size() != 2 || vis.cols() != cfg_.dim)
      throw ShapeError("lm: visual embeddings must be [rows, " + std::to_string(cfg_.dim) + "]");
    for (int i = 0; i < n; ++i)
      if (ids[static_cast<std::size_t>(i)] == cfg_.img_id) {
        require(place < 0, "lm: visual embeddings need exactly one placeholder id in the input");
        place = i;
      }
    require(place >= 0, "lm: visual embeddings need exactly one placeholder id in the input");
    extra = vis.rows() - 1;
    std::vector<Var> parts;
    if (place > 0) parts.push_back(t.slice_rows(x, 0, place));
    parts.push_back(*visual);
    if (place + 1 < n) parts.push_back(t.slice_rows(x, place + 1, n - place - 1));
    x = t.concat_rows(parts);
  }
  const int rows = n + extra;
  if (rows > cfg_.context)
    throw InvalidArgument("lm: context overflow (" + std::to_string(rows) + " > " + std::to_string(cfg_.context) + ")");
  x = t.add(x, t.slice_rows(v("pos_emb"), 0, rows));

  auto dropout = [&](Var h) {
    if (!dropout_rng || cfg_.dropout <= 0) return h;
    const auto& hv = t.value(h);
    Tensor<float> m(hv.shape);
    const float keep = static_cast<float>(1.0 - cfg_.dropout);
    for (auto& e : m.data) e = uniform(*dropout_rng) < cfg_.dropout ? 0.0f : 1.0f / keep;
    return t.mul(h, t.constant(std::move(m)));
  };

  const int dh = cfg_.head_dim();
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int l = 0; l < cfg_.layers; ++l) {
    Var h = t.layer_norm(x, v(lname(l, "ln1.g")), v(lname(l, "ln1.b")));
    Var q = t.add_row(t.matmul(h, v(lname(l, "attn.wq"))), v(lname(l, "attn.bq")));
    Var k = t.add_row(t.matmul(h, v(lname(l, "attn.wk"))), v(lname(l, "attn.bk")));
    Var val = t.add_row(t.matmul(h, v(lname(l, "attn.wv"))), v(lname(l, "attn.bv")));
    std::vector<Var> heads;
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      Var qh = t.slice_cols(q, hd * dh, dh), kh = t.slice_cols(k, hd * dh, dh), vh = t.slice_cols(val, hd * dh, dh);
      Var p = t.causal_softmax(t.scale(t.matmul_nt(qh, kh), inv));
      heads.push_back(t.matmul(p, vh));
    }
    Var attn = heads.size() == 1 ? heads[0] : t.concat_cols(heads);
    attn = t.add_row(t.matmul(attn, v(lname(l, "attn.wo"))), v(lname(l, "attn.bo")));
    x = t.add(x, dropout(attn));
    Var h2 = t.layer_norm(x, v(lname(l, "ln2.g")), v(lname(l, "ln2.b")));
    Var f = t.gelu(t.add_row(t.matmul(h2, v(lname(l, "ff.w1"))), v(lname(l, "ff.b1"))));
    f = t.add_row(t.matmul(f, v(lname(l, "ff.w2"))), v(lname(l, "ff.b2")));
    x = t.add(x, dropout(f));
  }
  x = t.layer_norm(x, v("ln_f.g"), v("ln_f.b"));
  if (extra > 0) {
    std::vector<Var> keep;
    if (place > 0) keep.push_back(t.slice_rows(x, 0, place));
    keep.push_back(t.slice_rows(x, place + extra, n - place));
    x = keep.size() == 1 ? keep[0] : t.concat_rows(keep);
  }
  return t.add_row(t.matmul(x, v("head.w")), v("head.b"));
}

Tensor<float> LanguageModel::forward(std::span<const int> ids, const Tensor<float>* visual) const {
  check_input(ids, visual, 0);
  Tape<float> t;
  const auto v = bind_frozen(t);
  std::optional<Var> vis;
  if (visual) vis = t.constant(*visual);
  return t.value(build_logits(t, v, ids, vis));
}

// ---- cached inference ---------------------------------------------------------

struct LanguageModel::Cache {
  std::vector<RowMat> k, v;  // per layer [context, dim]
  int len = 0;
};

std::vector<float> LanguageModel::step(Cache& c, const float* x_row) const {
  const int d = cfg_.dim, dh = cfg_.head_dim();
  if (c.len >= cfg_.context) throw InvalidArgument("lm: context overflow during decoding");
  auto P = [&](const std::string& n) -> const Tensor<float>& { return params_.get(n).value; };
  RowVec x = Eigen::Map<const RowVec>(x_row, d) + as_map(P("pos_emb")).row(c.len);
  const int pos = c.len++;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int l = 0; l < cfg_.layers; ++l) {
    const RowVec h = layer_norm_row(x, P(lname(l, "ln1.g")), P(lname(l, "ln1.b")));
    const RowVec q = h * as_map(P(lname(l, "attn.wq"))) + as_row(P(lname(l, "attn.bq")));
    c.k[l].row(pos) = h * as_map(P(lname(l, "attn.wk"))) + as_row(P(lname(l, "attn.bk")));
    c.v[l].row(pos) = h * as_map(P(lname(l, "attn.wv"))) + as_row(P(lname(l, "attn.bv")));
    RowVec att(d);
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      const auto K = c.k[l].block(0, hd * dh, pos + 1, dh);
      const auto V = c.v[l].block(0, hd * dh, pos + 1, dh);
      Eigen::VectorXf s = (K * q.segment(hd * dh, dh).transpose()) * inv;
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      att.segment(hd * dh, dh) = s.transpose() * V;
    }
    x += att * as_map(P(lname(l, "attn.wo"))) + as_row(P(lname(l, "attn.bo")));
    const RowVec h2 = layer_norm_row(x, P(lname(l, "ln2.g")), P(lname(l, "ln2.b")));
    RowVec f = h2 * as_map(P(lname(l, "ff.w1"))) + as_row(P(lname(l, "ff.b1")));
    f = f.unaryExpr([](float z) { return gelu(z); });
    x += f * as_map(P(lname(l, "ff.w2"))) + as_row(P(lname(l, "ff.b2")));
  }
  const RowVec y = layer_norm_row(x, P("ln_f.g"), P("ln_f.b"));
  const RowVec logits = y * as_map(P("head.w")) + as_row(P("head.b"));
  return {logits.data(), logits.data() + logits.size()};
}

namespace {

// Feeds ids through `step`, expanding the placeholder into visual rows;
// returns the logits row for each original position.
template <typename StepFn>
std::vector<std::vector<float>> prefill(std::span<const int> ids, const Tensor<float>* visual, int img_id,
                                        const Tensor<float>& emb, StepFn&& step) {
  std::vector<std::vector<float>> out;
  for (int id : ids) {
    if (visual && id == img_id) {
      std::vector<float> last;
      for (int r = 0; r < visual->rows(); ++r) last = step(&visual->at(r, 0));
      out.push_back(std::move(last));
    } else {
      out.push_back(step(&emb.at(id, 0)));
    }
  }
  return out;
}

}  // namespace

Tensor<float> LanguageModel::forward_cached(std::span<const int> ids, const Tensor<float>* visual) const {
  check_input(ids, visual, 0);
  Cache c;
  c.k.assign(static_cast<std::size_t>(cfg_.layers), RowMat::Zero(cfg_.context, cfg_.dim));
  c.v = c.k;
  const auto rows = prefill(ids, visual, cfg_.img_id, params_.get("tok_emb").value,
                            [&](const float* x) { return step(c, x); });
  Tensor<float> out({static_cast<int>(rows.size()), cfg_.vocab});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), &out.at(static_cast<int>(i), 0));
  return out;
}

std::vector<int> LanguageModel::generate(std::span<const int> context, const Tensor<float>* visual,
                                         const DecodingParams& p) const {
  p.validate();
  check_input(context, visual, p.max_new_tokens);
  Cache c;
  c.k.assign(static_cast<std::size_t>(cfg_.layers), RowMat::Zero(cfg_.context, cfg_.dim));
  c.v = c.k;
  const auto& emb = params_.get("tok_emb").value;
  auto rows = prefill(context, visual, cfg_.img_id, emb, [&](const float* x) { return step(c, x); });
  std::vector<float> logits = std::move(rows.back());
  Rng rng = make_rng(p.seed, 0x67656e);
  std::vector<int> out;
  while (static_cast<int>(out.size()) < p.max_new_tokens) {
    int next = 0;
    if (p.mode == DecodingParams::Mode::greedy) {
      next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      std::vector<int> idx(logits.size());
      std::iota(idx.begin(), idx.end(), 0);
      const int k = std::min<int>(p.k, static_cast<int>(idx.size()));
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
      });
      std::vector<double> w(static_cast<std::size_t>(k));
      const double top = logits[idx[0]];
      double total = 0;
      for (int i = 0; i < k; ++i) total += w[i] = std::exp((logits[idx[i]] - top) / p.temperature);
      double u = uniform(rng) * total;
      next = idx[static_cast<std::size_t>(k - 1)];
      for (int i = 0; i < k; ++i) {
        if (u < w[i]) {
          next = idx[i];
          break;
        }
        u -= w[i];
      }
    }
    out.push_back(next);
    if (next == p.stop_id || static_cast<int>(out.size()) == p.max_new_tokens) break;
    logits = step(c, &emb.at(next, 0));
  }
  return out;
}

// ---- persistence --------------------------------------------------------------

ad::Checkpoint LanguageModel::to_checkpoint(std::int64_t step) const {
  ad::Checkpoint ck;
  ck.step = step;
  ck.config = {{"kind", "language_model"}, {"lm", cfg_.to_json()}};
  for (const auto& p : params_) ck.params.add(p.name, p.value);
  return ck;
}

LanguageModel LanguageModel::from_checkpoint(const ad::Checkpoint& ck) {
  if (ck.config.value("kind", std::string()) != "language_model") throw FormatError("checkpoint is not a language model");
  LanguageModel m(LmConfig::from_json(ck.config.at("lm")), 0);
  for (auto& p : m.params_) {
    if (!ck.params.contains(p.name)) throw FormatError("lm checkpoint: missing parameter " + p.name);
    const auto& src = ck.params.get(p.name).value;
    if (src.shape != p.value.shape) throw FormatError("lm checkpoint: shape mismatch for " + p.name);
    p.value = src;
  }
  return m;
}

void LanguageModel::save(const std::filesystem::path& path, std::int64_t step) const {
  ad::save_checkpoint(path, to_checkpoint(step));
}

LanguageModel LanguageModel::load(const std::filesystem::path& path) { return from_checkpoint(ad::load_checkpoint(path)); }

// ---- loss -------------------------------------------------------------------

Var lm_loss(Tape<float>& t, Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  std::vector<float> m(mask.begin(), mask.end());
  return t.cross_entropy(logits, targets, m);
}

double lm_loss_value(const Tensor<float>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  if (static_cast<int>(targets.size()) != logits.rows() || mask.size() != targets.size())
    throw ShapeError("lm_loss: targets/mask length must equal logit rows");
  double total = 0, denom = 0;
  for (int r = 0; r < logits.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const int tg = targets[static_cast<std::size_t>(r)];
    if (tg < 0 || tg >= logits.cols()) throw ShapeError("lm_loss: target id out of range");
    double mx = logits.at(r, 0);
    for (int c = 1; c < logits.cols(); ++c) mx = std::max<double>(mx, logits.at(r, c));
    double s = 0;
    for (int c = 0; c < logits.cols(); ++c) s += std::exp(logits.at(r, c) - mx);
    total += std::log(s) + mx - logits.at(r, tg);
    denom += 1;
  }
  if (denom == 0) throw InvalidArgument("lm_loss: loss mask is all zero");
  return total / denom;
}

// ---- training -----------------------------------------------------------------

Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "instruct") return Stage::instruct;
  throw InvalidArgument("unknown stage '" + s + "' (expected pretrain or instruct)");
}

namespace {

void check_sample(const conv::TrainingSample& s, const LmConfig& cfg) {
  for (int id : s.input_ids)
    if (id < 0 || id >= cfg.vocab)
      throw InvalidArgument("train_lm: dataset id " + std::to_string(id) + " does not fit the model vocabulary (" +
                            std::to_string(cfg.vocab) + "); vocab mismatch");
  for (int id : s.target_ids)
    if (id < 0 || id >= cfg.vocab)
      throw InvalidArgument("train_lm: dataset id " + std::to_string(id) + " does not fit the model vocabulary (" +
                            std::to_string(cfg.vocab) + "); vocab mismatch");
}

double sample_loss(Tape<float>& t, const LmVars& v, const LanguageModel& m, const conv::TrainingSample& s,
                   const VisualHook& visual, bool trainable, Rng* drop, Var* out) {
  std::optional<Var> vis;
  if (s.visual_clip >= 0 && visual.build) vis = visual.build(t, s.visual_clip, trainable);
  const Var logits = m.build_logits(t, v, s.input_ids, vis, drop);
  const Var loss = lm_loss(t, logits, s.target_ids, s.loss_mask);
  if (out) *out = loss;
  return t.value(loss)[0];
}

}  // namespace

LmTrainResult train_lm(LanguageModel& model, const std::vector<conv::TrainingSample>& data, const LmTrainSettings& s) {
  require(s.steps >= 1 && s.batch >= 1, "train_lm: steps and batch must be positive");
  require(s.lr > 0, "train_lm: lr must be positive");
  const auto pool = s.stage == Stage::pretrain ? conv::pretrain_subset(data) : data;
  require(!pool.empty(), "train_lm: no samples for this stage");
  for (const auto& x : pool) check_sample(x, model.config());

  ad::AdamWSettings opt;
  opt.weight_decay = s.weight_decay;
  ad::AdamWState<float> state(model.params(), opt);
  std::optional<ad::AdamWState<float>> vis_state;
  if (s.visual.params) vis_state.emplace(*s.visual.params, opt);
  const auto sched = ad::CosineSchedule::with_default_warmup(s.lr, std::min(s.min_lr, s.lr), s.steps);

  LmTrainResult res;
  for (const auto& p : model.params()) res.optimized.push_back(p.name);
  if (s.visual.params)
    for (const auto& p : *s.visual.params) res.optimized.push_back(p.name);

  Rng rng = make_rng(s.seed, 0x747261);
  for (int step = 0; step < s.steps; ++step) {
    model.params().zero_grad();
    if (s.visual.params) s.visual.params->zero_grad();
    double batch_loss = 0;
    for (int b = 0; b < s.batch; ++b) {
      const auto& sample = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      Tape<float> t;
      const auto v = model.bind_trainable(t);
      Var loss;
      const double l = sample_loss(t, v, model, sample, s.visual, true, &rng, &loss);
      if (!std::isfinite(l)) throw DivergenceError("train_lm: non-finite loss at step " + std::to_string(step));
      t.backward(t.scale(loss, 1.0f / static_cast<float>(s.batch)));
      batch_loss += l / s.batch;
    }
    if (s.grad_clip > 0) {
      double sq = 0;
      auto acc = [&](ad::ParamSet<float>& ps) {
        for (const auto& p : ps)
          for (float g : p.grad.data) sq += double(g) * g;
      };
      acc(model.params());
      if (s.visual.params) acc(*s.visual.params);
      const double norm = std::sqrt(sq);
      if (norm > s.grad_clip) {
        const float f = static_cast<float>(s.grad_clip / norm);
        auto scale = [&](ad::ParamSet<float>& ps) {
          for (auto& p : ps)
            for (auto& g : p.grad.data) g *= f;
        };
        scale(model.params());
        if (s.visual.params) scale(*s.visual.params);
      }
    }
    const double lr = std::max(ad::schedule_rate(sched, step), 1e-12);
    ad::adamw_step(model.params(), state, lr);
    if (s.visual.params) ad::adamw_step(*s.visual.params, *vis_state, lr);
    res.losses.push_back(batch_loss);
    if (s.on_step) s.on_step(step, batch_loss);
    if (s.checkpoint_every > 0 && (step + 1) % s.checkpoint_every == 0 && !s.checkpoint_dir.empty()) {
      std::filesystem::create_directories(s.checkpoint_dir);
      model.save(s.checkpoint_dir / ("lm_step" + std::to_string(step + 1) + ".ckpt"), step + 1);
    }
  }
  return res;
}

double evaluate_loss(const LanguageModel& model, const std::vector<conv::TrainingSample>& data, const VisualHook& visual) {
  require(!data.empty(), "evaluate_loss: empty dataset");
  double total = 0;
  for (const auto& s : data) {
    check_sample(s, model.config());
    Tape<float> t;
    const auto v = model.bind_frozen(t);
    total += sample_loss(t, v, model, s, visual, false, nullptr, nullptr);
  }
  return total / static_cast<double>(data.size());
}

}  // namespace mtalk::lm

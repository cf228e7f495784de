#include "mtalk/tokenizer/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtalk/autodiff/optim.hpp"
#include "mtalk/common/error.hpp"
#include "mtalk/common/rng.hpp"

namespace mtalk::tok {

using ad::Tape;
using ad::Var;
using motion::MotionFeatures;

namespace {

Tensor<float> he_init(Rng& rng, int fan_in, int fan_out) {
  Tensor<float> w({fan_in, fan_out});
  const double s = std::sqrt(2.0 / fan_in);
  for (auto& v : w.data) v = static_cast<float>(normal(rng, 0.0, s));
  return w;
}

std::string cb_name(int q) { return "codebook.q" + std::to_string(q); }

// Edge rows repeated `p` times on both ends; keeps constant signals constant.
Var pad_edges(Tape<float>& t, Var x, int p) {
  const int len = t.value(x).rows();
  std::vector<Var> parts;
  const Var first = t.slice_rows(x, 0, 1);
  const Var last = t.slice_rows(x, len - 1, 1);
  for (int i = 0; i < p; ++i) parts.push_back(first);
  parts.push_back(x);
  for (int i = 0; i < p; ++i) parts.push_back(last);
  return t.concat_rows(parts);
}

Var conv(Tape<float>& t, const TokenizerVars& v, const std::string& name, Var x, int kernel, int stride) {
  const int pad = kernel == 4 ? 1 : kernel / 2;
  return t.conv1d(pad_edges(t, x, pad), v(name + ".w"), v(name + ".b"), kernel, stride, 0);
}

}  // namespace

int TokenizerConfig::down_blocks() const {
  int n = 0;
  for (int l = downsample; l > 1; l >>= 1) ++n;
  return n;
}

void TokenizerConfig::validate() const {
  require(n_joints >= 1, "tokenizer config: n_joints must be positive");
  require(codebook_size >= 1 && code_dim >= 1 && layers >= 1, "tokenizer config: K, d and Q must be positive");
  require(downsample >= 1 && (downsample & (downsample - 1)) == 0, "tokenizer config: l must be a power of two");
  require(width >= 1, "tokenizer config: width must be positive");
  require(beta_commit >= 0.0, "tokenizer config: beta_commit must be non-negative");
  require(root_velocity_weight > 0.0, "tokenizer config: root_velocity_weight must be positive");
}

TokenizerConfig TokenizerConfig::reference() {
  TokenizerConfig c;
  c.n_joints = 22;
  c.layers = 4;
  c.codebook_size = 512;
  c.code_dim = 1024;
  c.downsample = 4;
  return c;
}

nlohmann::json TokenizerConfig::to_json() const {
  return {{"n_joints", n_joints}, {"K", codebook_size}, {"d", code_dim},       {"Q", layers},
          {"l", downsample},      {"width", width},     {"beta_commit", beta_commit},
          {"root_velocity_weight", root_velocity_weight}};
}

TokenizerConfig TokenizerConfig::from_json(const nlohmann::json& j) {
  TokenizerConfig c;
  try {
    c.n_joints = j.at("n_joints").get<int>();
    c.codebook_size = j.at("K").get<int>();
    c.code_dim = j.at("d").get<int>();
    c.layers = j.at("Q").get<int>();
    c.downsample = j.at("l").get<int>();
    c.width = j.value("width", 128);
    c.beta_commit = j.value("beta_commit", 0.25);
    c.root_velocity_weight = j.value("root_velocity_weight", 6.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tokenizer config: ") + e.what());
  }
  c.validate();
  return c;
}

void MotionTokens::validate(int codebook_size) const {
  require(!layers.empty(), "motion tokens: no layers");
  for (const auto& l : layers) {
    require(l.size() == layers[0].size(), "motion tokens: layers differ in length");
    for (int s : l)
      require(s >= 0 && s < codebook_size,
              "motion tokens: index " + std::to_string(s) + " outside codebook of " + std::to_string(codebook_size));
  }
  require(!layers[0].empty(), "motion tokens: empty sequence");
}

nlohmann::json tokens_to_json(const MotionTokens& t) { return {{"format_version", 1}, {"layers", t.layers}}; }

MotionTokens tokens_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != 1) throw FormatError("tokens: unsupported format_version");
    MotionTokens t{j.at("layers").get<std::vector<std::vector<int>>>()};
    if (t.layers.empty() || t.length() == 0) throw FormatError("tokens: empty");
    for (const auto& l : t.layers)
      if (static_cast<int>(l.size()) != t.length()) throw FormatError("tokens: layers differ in length");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tokens: ") + e.what());
  }
}

QuantizeResult quantize(const Tensor<float>& latents, const Tensor<float>& codebook) {
  require(!codebook.empty() && codebook.rows() >= 1, "quantize: empty codebook");
  require<ShapeError>(latents.shape.size() == 2 && codebook.shape.size() == 2 && latents.cols() == codebook.cols(),
                      "quantize: latent width " + std::to_string(latents.cols()) + " vs code width " +
                          std::to_string(codebook.cols()));
  const int n = latents.rows(), k = codebook.rows(), d = codebook.cols();
  QuantizeResult r;
  r.indices.resize(n);
  r.quantized = Tensor<float>({n, d});
  for (int i = 0; i < n; ++i) {
    const float* z = &latents.at(i, 0);
    int best = 0;
    double best_d = 0.0;
    for (int c = 0; c < k; ++c) {
      const float* e = &codebook.at(c, 0);
      double dist = 0.0;
      for (int j = 0; j < d; ++j) {
        const double diff = static_cast<double>(z[j]) - static_cast<double>(e[j]);
        dist += diff * diff;
      }
      if (c == 0 || dist < best_d) {
        best = c;
        best_d = dist;
      }
    }
    r.indices[i] = best;
    std::copy_n(&codebook.at(best, 0), d, &r.quantized.at(i, 0));
  }
  return r;
}

MotionTokenizer::MotionTokenizer(TokenizerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, 0x70c);
  const int D = cfg_.feature_dim(), W = cfg_.width, d = cfg_.code_dim;
  auto conv_param = [&](const std::string& name, int kernel, int cin, int cout) {
    params_.add(name + ".w", he_init(rng, kernel * cin, cout));
    params_.add(name + ".b", Tensor<float>({cout}));
  };
  conv_param("enc.in", 3, D, W);
  for (int i = 0; i < cfg_.down_blocks(); ++i) conv_param("enc.down" + std::to_string(i), 4, W, W);
  conv_param("enc.out", 3, W, d);
  conv_param("dec.in", 3, d, W);
  for (int i = 0; i < cfg_.down_blocks(); ++i) conv_param("dec.up" + std::to_string(i), 3, W, W);
  conv_param("dec.out", 3, W, D);
  for (int q = 0; q < cfg_.layers; ++q) {
    Tensor<float> cb({cfg_.codebook_size, d});
    const double a = 1.0 / cfg_.codebook_size;
    for (auto& v : cb.data) v = static_cast<float>(uniform(rng, -a, a));
    params_.add(cb_name(q), std::move(cb));
  }
  mean_.assign(D, 0.0);
  std_.assign(D, 1.0);
}

const Tensor<float>& MotionTokenizer::codebook(int layer) const {
  require(layer >= 0 && layer < cfg_.layers, "codebook: layer out of range");
  return params_.get(cb_name(layer)).value;
}

void MotionTokenizer::set_normalization(std::vector<double> mean, std::vector<double> stddev) {
  require<ShapeError>(static_cast<int>(mean.size()) == cfg_.feature_dim() && stddev.size() == mean.size(),
                      "tokenizer: normalization size does not match feature dimension");
  for (double s : stddev) require(s > 0.0 && std::isfinite(s), "tokenizer: normalization std must be positive");
  mean_ = std::move(mean);
  std_ = std::move(stddev);
}

Tensor<float> MotionTokenizer::normalize(const MotionFeatures& f) const {
  require<ShapeError>(f.n_joints == cfg_.n_joints, "tokenizer: features have " + std::to_string(f.n_joints) +
                                                       " joints, model expects " + std::to_string(cfg_.n_joints));
  const int D = f.dim();
  Tensor<float> x({f.frames, D});
  for (int t = 0; t < f.frames; ++t)
    for (int c = 0; c < D; ++c) x.at(t, c) = static_cast<float>((f.at(t, c) - mean_[c]) / std_[c]);
  return x;
}

MotionFeatures MotionTokenizer::denormalize(const Tensor<float>& x) const {
  const int D = cfg_.feature_dim();
  require<ShapeError>(x.cols() == D, "tokenizer: decoded width does not match feature dimension");
  MotionFeatures f(cfg_.n_joints, x.rows());
  const int c0 = f.layout().contacts();
  for (int t = 0; t < f.frames; ++t)
    for (int c = 0; c < D; ++c) {
      double v = x.at(t, c) * std_[c] + mean_[c];
      if (c >= c0) v = v >= 0.5 ? 1.0 : 0.0;
      f.at(t, c) = v;
    }
  return f;
}

TokenizerVars MotionTokenizer::bind_trainable(Tape<float>& tape) {
  TokenizerVars v;
  for (auto& p : params_) v.vars.emplace(p.name, tape.param(p, true));
  return v;
}

TokenizerVars MotionTokenizer::bind_frozen(Tape<float>& tape) const {
  TokenizerVars v;
  // Frozen leaves never write to the parameter.
  for (auto& p : const_cast<ParamSet<float>&>(params_)) v.vars.emplace(p.name, tape.param(p, false));
  return v;
}

Var MotionTokenizer::build_encoder(Tape<float>& t, const TokenizerVars& v, Var x) const {
  Var h = t.relu(conv(t, v, "enc.in", x, 3, 1));
  for (int i = 0; i < cfg_.down_blocks(); ++i) h = t.relu(conv(t, v, "enc.down" + std::to_string(i), h, 4, 2));
  return conv(t, v, "enc.out", h, 3, 1);
}

Var MotionTokenizer::build_decoder(Tape<float>& t, const TokenizerVars& v, Var codes) const {
  Var h = t.relu(conv(t, v, "dec.in", codes, 3, 1));
  for (int i = 0; i < cfg_.down_blocks(); ++i)
    h = t.relu(conv(t, v, "dec.up" + std::to_string(i), t.upsample(h, 2), 3, 1));
  return conv(t, v, "dec.out", h, 3, 1);
}

Tensor<float> MotionTokenizer::latents(const MotionFeatures& f) const {
  require(f.frames % cfg_.downsample == 0, "encode: clip length " + std::to_string(f.frames) +
                                               " is not divisible by the downsample rate " +
                                               std::to_string(cfg_.downsample));
  require(f.frames >= cfg_.downsample, "encode: clip shorter than the downsample rate");
  Tape<float> t;
  const auto v = bind_frozen(t);
  return t.value(build_encoder(t, v, t.constant(normalize(f))));
}

MotionTokens MotionTokenizer::quantize_latents(const Tensor<float>& z) const {
  MotionTokens out;
  Tensor<float> r = z;
  for (int q = 0; q < cfg_.layers; ++q) {
    auto res = quantize(r, codebook(q));
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] -= res.quantized.data[i];
    out.layers.push_back(std::move(res.indices));
  }
  return out;
}

MotionTokens MotionTokenizer::encode(const MotionFeatures& f) const { return quantize_latents(latents(f)); }

Tensor<float> MotionTokenizer::embed_tokens(const MotionTokens& tokens) const {
  require(tokens.depth() == cfg_.layers, "decode: token depth " + std::to_string(tokens.depth()) +
                                             " does not match Q = " + std::to_string(cfg_.layers));
  tokens.validate(cfg_.codebook_size);
  const int L = tokens.length(), d = cfg_.code_dim;
  Tensor<float> c({L, d});
  for (int q = 0; q < cfg_.layers; ++q) {
    const auto& cb = codebook(q);
    for (int i = 0; i < L; ++i) {
      const float* e = &cb.at(tokens.layers[q][i], 0);
      for (int j = 0; j < d; ++j) c.at(i, j) += e[j];
    }
  }
  return c;
}

MotionFeatures MotionTokenizer::decode(const MotionTokens& tokens) const {
  Tape<float> t;
  const auto v = bind_frozen(t);
  return denormalize(t.value(build_decoder(t, v, t.constant(embed_tokens(tokens)))));
}

ad::Checkpoint MotionTokenizer::to_checkpoint(std::int64_t step) const {
  ad::Checkpoint ck;
  ck.step = step;
  ck.config = {{"kind", "motion_tokenizer"}, {"tokenizer", cfg_.to_json()}, {"norm_mean", mean_}, {"norm_std", std_}};
  for (const auto& p : params_) ck.params.add(p.name, p.value);
  return ck;
}

MotionTokenizer MotionTokenizer::from_checkpoint(const ad::Checkpoint& ck) {
  if (ck.config.value("kind", std::string()) != "motion_tokenizer")
    throw FormatError("checkpoint is not a motion tokenizer");
  MotionTokenizer tk(TokenizerConfig::from_json(ck.config.at("tokenizer")), 0);
  for (auto& p : tk.params_) {
    if (!ck.params.contains(p.name)) throw FormatError("tokenizer checkpoint: missing parameter " + p.name);
    const auto& src = ck.params.get(p.name).value;
    if (src.shape != p.value.shape) throw FormatError("tokenizer checkpoint: shape mismatch for " + p.name);
    p.value = src;
  }
  tk.set_normalization(ck.config.at("norm_mean").get<std::vector<double>>(),
                       ck.config.at("norm_std").get<std::vector<double>>());
  return tk;
}

void MotionTokenizer::save(const std::filesystem::path& path) const { ad::save_checkpoint(path, to_checkpoint()); }

MotionTokenizer MotionTokenizer::load(const std::filesystem::path& path) {
  return from_checkpoint(ad::load_checkpoint(path));
}

MotionTokens concat_tokens(const std::vector<MotionTokens>& segments) {
  require(!segments.empty(), "compose: no segments");
  MotionTokens out;
  out.layers.resize(segments[0].depth());
  for (const auto& s : segments) {
    require(s.depth() == segments[0].depth(), "compose: segments have different layer counts");
    require(s.length() > 0, "compose: empty segment");
    for (int q = 0; q < s.depth(); ++q) out.layers[q].insert(out.layers[q].end(), s.layers[q].begin(), s.layers[q].end());
  }
  return out;
}

MotionFeatures compose_decode(const MotionTokenizer& tk, const std::vector<MotionTokens>& segments) {
  return tk.decode(concat_tokens(segments));
}

Var tokenizer_loss(const MotionTokenizer& tk, Tape<float>& t, const TokenizerVars& v, const Tensor<float>& x_norm,
                   LossTerms* terms, QuantStats* stats) {
  const auto& cfg = tk.config();
  require(x_norm.rows() % cfg.downsample == 0, "tokenizer loss: clip length not divisible by l");
  const Var x = t.constant(x_norm);
  const Var z = tk.build_encoder(t, v, x);
  Var residual = z;
  Var code_sum{};
  Var l_e{}, l_c{};
  for (int q = 0; q < cfg.layers; ++q) {
    const auto& cb_name_q = cb_name(q);
    const auto res = quantize(t.value(residual), t.value(v(cb_name_q)));
    if (stats) {
      for (int idx : res.indices) ++stats->usage[q][idx];
      stats->residuals[q].push_back(t.value(residual));
    }
    const Var zq = t.embedding(v(cb_name_q), res.indices);
    const Var e = t.mse(t.stop_gradient(residual), zq);
    const Var c = t.mse(residual, t.stop_gradient(zq));
    l_e = q == 0 ? e : t.add(l_e, e);
    l_c = q == 0 ? c : t.add(l_c, c);
    code_sum = q == 0 ? zq : t.add(code_sum, zq);
    // Next layer sees the residual against detached codes.
    residual = t.sub(residual, t.stop_gradient(zq));
  }
  const Var out = tk.build_decoder(t, v, t.straight_through(z, code_sum));
  const Var l_r = t.mse(out, x);
  Var total = t.add(l_r, l_e);
  if (cfg.beta_commit != 0.0) total = t.add(total, t.scale(l_c, static_cast<float>(cfg.beta_commit)));
  if (terms) {
    terms->recon = t.value(l_r)[0];
    terms->codebook = t.value(l_e)[0];
    terms->commit = t.value(l_c)[0];
    terms->total = t.value(total)[0];
  }
  return total;
}

void corpus_statistics(const std::vector<MotionFeatures>& corpus, std::vector<double>& mean,
                       std::vector<double>& stddev) {
  require(!corpus.empty(), "corpus statistics: empty corpus");
  const int D = corpus[0].dim();
  mean.assign(D, 0.0);
  stddev.assign(D, 0.0);
  std::size_t n = 0;
  for (const auto& f : corpus) {
    require<ShapeError>(f.dim() == D, "corpus statistics: mixed feature dimensions");
    for (int t = 0; t < f.frames; ++t)
      for (int c = 0; c < D; ++c) mean[c] += f.at(t, c);
    n += f.frames;
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& f : corpus)
    for (int t = 0; t < f.frames; ++t)
      for (int c = 0; c < D; ++c) stddev[c] += (f.at(t, c) - mean[c]) * (f.at(t, c) - mean[c]);
  for (auto& s : stddev) {
    s = std::sqrt(s / static_cast<double>(n));
    // Constant columns stay unscaled; nearly constant ones are not blown up.
    s = s < 1e-8 ? 1.0 : std::max(s, 1e-3);
  }
}

namespace {

void init_codebooks_from_data(MotionTokenizer& tk, const std::vector<Tensor<float>>& xs, Rng& rng) {
  const auto& cfg = tk.config();
  std::vector<Tensor<float>> residuals;
  for (std::size_t i = 0; i < xs.size() && i < 128; ++i) {
    Tape<float> t;
    const auto v = tk.bind_frozen(t);
    residuals.push_back(t.value(tk.build_encoder(t, v, t.constant(xs[i]))));
  }
  for (int q = 0; q < cfg.layers; ++q) {
    std::vector<const float*> rows;
    for (const auto& r : residuals)
      for (int i = 0; i < r.rows(); ++i) rows.push_back(&r.at(i, 0));
    auto& cb = tk.params().get(cb_name(q)).value;
    for (int k = 0; k < cfg.codebook_size; ++k) {
      const float* src = rows[uniform_int(rng, 0, static_cast<int>(rows.size()) - 1)];
      for (int j = 0; j < cfg.code_dim; ++j) cb.at(k, j) = src[j] + static_cast<float>(normal(rng, 0.0, 1e-3));
    }
    for (auto& r : residuals) {
      const auto res = quantize(r, cb);
      for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] -= res.quantized.data[i];
    }
  }
}

}  // namespace

TokenizerTrainResult train_tokenizer(const std::vector<MotionFeatures>& corpus, const TokenizerConfig& cfg,
                                     const TokenizerTrainSettings& s) {
  require(!corpus.empty(), "train_tokenizer: empty corpus");
  require(s.epochs >= 1 && s.batch >= 1, "train_tokenizer: epochs and batch must be positive");
  cfg.validate();
  for (const auto& f : corpus) {
    require(f.n_joints == cfg.n_joints, "train_tokenizer: corpus joint count does not match config");
    require(f.frames % cfg.downsample == 0 && f.frames >= cfg.downsample,
            "train_tokenizer: clip length " + std::to_string(f.frames) + " not divisible by l");
  }
  TokenizerTrainResult out;
  out.model = MotionTokenizer(cfg, s.seed);
  MotionTokenizer& tk = out.model;
  std::vector<double> mean, sd;
  corpus_statistics(corpus, mean, sd);
  // Root velocities are integrated on recovery, so their errors accumulate; shrinking their
  // normalization scale raises their weight in the reconstruction loss.
  for (int c = 0; c < 3; ++c) sd[c] /= cfg.root_velocity_weight;
  tk.set_normalization(mean, sd);
  std::vector<Tensor<float>> xs;
  xs.reserve(corpus.size());
  for (const auto& f : corpus) xs.push_back(tk.normalize(f));

  Rng rng = make_rng(s.seed, 0x7a1);
  std::vector<int> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  {
    std::vector<Tensor<float>> shuffled;
    for (int i : order) shuffled.push_back(xs[i]);
    init_codebooks_from_data(tk, shuffled, rng);
  }

  ad::AdamWSettings opt;
  opt.weight_decay = s.weight_decay;
  ad::AdamWState<float> state(tk.params(), opt);
  const int batches = static_cast<int>((xs.size() + s.batch - 1) / s.batch);
  const std::int64_t total_steps = static_cast<std::int64_t>(batches) * s.epochs;
  const auto sched = ad::CosineSchedule::with_default_warmup(s.lr, std::min(s.min_lr, s.lr), total_steps);
  std::vector<int> cb_param_index(cfg.layers);
  {
    int i = 0;
    for (const auto& p : tk.params()) {
      for (int q = 0; q < cfg.layers; ++q)
        if (p.name == cb_name(q)) cb_param_index[q] = i;
      ++i;
    }
  }

  std::int64_t step = 0;
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    QuantStats stats;
    stats.usage.assign(cfg.layers, std::vector<int>(cfg.codebook_size, 0));
    stats.residuals.resize(cfg.layers);
    LossTerms sum;
    for (int b = 0; b < batches; ++b) {
      const int begin = b * s.batch;
      const int end = std::min<int>(begin + s.batch, static_cast<int>(xs.size()));
      tk.params().zero_grad();
      Tape<float> t;
      const auto v = tk.bind_trainable(t);
      std::vector<Var> losses;
      for (int i = begin; i < end; ++i) {
        LossTerms lt;
        losses.push_back(tokenizer_loss(tk, t, v, xs[order[i]], &lt, &stats));
        if (!std::isfinite(lt.total))
          throw DivergenceError("train_tokenizer: non-finite loss at epoch " + std::to_string(epoch) + ", clip " +
                                std::to_string(order[i]));
        sum.total += lt.total;
        sum.recon += lt.recon;
        sum.codebook += lt.codebook;
        sum.commit += lt.commit;
      }
      Var loss = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) loss = t.add(loss, losses[i]);
      loss = t.scale(loss, 1.0f / static_cast<float>(losses.size()));
      t.backward(loss);
      if (s.grad_clip > 0) ad::clip_grad_norm(tk.params(), s.grad_clip);
      ++step;
      ad::adamw_step(tk.params(), state, ad::schedule_rate(sched, step));
    }
    const double n = static_cast<double>(xs.size());
    LossTerms mean_terms{sum.total / n, sum.recon / n, sum.codebook / n, sum.commit / n};
    out.epochs.push_back(mean_terms);
    if (s.on_epoch) s.on_epoch(epoch, mean_terms);

    // Entries unused for a whole epoch restart at a random residual row seen this epoch.
    if (s.reseed_dead_codes && epoch + 1 < s.epochs) {
      for (int q = 0; q < cfg.layers; ++q) {
        std::vector<const float*> rows;
        for (const auto& r : stats.residuals[q])
          for (int i = 0; i < r.rows(); ++i) rows.push_back(&r.at(i, 0));
        if (rows.empty()) continue;
        auto& cb = tk.params().get(cb_name(q)).value;
        auto& m = state.m[cb_param_index[q]];
        auto& vv = state.v[cb_param_index[q]];
        for (int k = 0; k < cfg.codebook_size; ++k) {
          if (stats.usage[q][k] > 0) continue;
          const float* src = rows[uniform_int(rng, 0, static_cast<int>(rows.size()) - 1)];
          for (int j = 0; j < cfg.code_dim; ++j) {
            cb.at(k, j) = src[j] + static_cast<float>(normal(rng, 0.0, 1e-2));
            m.at(k, j) = 0.0f;
            vv.at(k, j) = 0.0f;
          }
          ++out.reseeded_codes;
        }
      }
    }
  }
  return out;
}

}  // namespace mtalk::tok

#include "mtalk/metrics/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "mtalk/common/error.hpp"
#include "mtalk/common/rng.hpp"

namespace mtalk::metrics {

using motion::JointPositions;
using motion::Vec3;

namespace {

void check_same(const JointPositions& a, const JointPositions& b) {
  if (a.frames != b.frames || a.joints != b.joints)
    throw ShapeError("pose sequences differ in shape: " + std::to_string(a.frames) + "x" + std::to_string(a.joints) +
                     " vs " + std::to_string(b.frames) + "x" + std::to_string(b.joints));
  if (a.frames < 1 || a.joints < 1) throw InvalidArgument("pose sequence is empty");
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("embedding sizes differ");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

double mpjpe(const JointPositions& pred, const JointPositions& gt) {
  check_same(pred, gt);
  double s = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) s += (pred.data[i] - gt.data[i]).norm();
  return 1000.0 * s / static_cast<double>(pred.data.size());
}

Similarity procrustes(const JointPositions& pred, const JointPositions& gt) {
  check_same(pred, gt);
  const double n = static_cast<double>(pred.data.size());
  Vec3 mx = Vec3::Zero(), my = Vec3::Zero();
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    mx += pred.data[i];
    my += gt.data[i];
  }
  mx /= n;
  my /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_x = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const Vec3 x = pred.data[i] - mx;
    cov += (gt.data[i] - my) * x.transpose();
    var_x += x.squaredNorm();
  }
  cov /= n;
  var_x /= n;

  Similarity s;
  if (var_x <= 1e-300) {
    s.scale = 0;
    s.translation = my;
    return s;
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d(1, 1, 1);
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) d(2) = -1;
  s.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  s.scale = svd.singularValues().dot(d) / var_x;
  s.translation = my - s.scale * s.rotation * mx;
  return s;
}

double pa_mpjpe(const JointPositions& pred, const JointPositions& gt) {
  const auto s = procrustes(pred, gt);
  JointPositions aligned = pred;
  for (auto& p : aligned.data) p = s.scale * s.rotation * p + s.translation;
  return mpjpe(aligned, gt);
}

double accl(const JointPositions& pred, const JointPositions& gt) {
  check_same(pred, gt);
  if (pred.frames < 3) throw InvalidArgument("acceleration error needs at least 3 frames");
  double s = 0;
  for (int f = 1; f + 1 < pred.frames; ++f)
    for (int j = 0; j < pred.joints; ++j) {
      const Vec3 ap = pred.at(f + 1, j) - 2 * pred.at(f, j) + pred.at(f - 1, j);
      const Vec3 ag = gt.at(f + 1, j) - 2 * gt.at(f, j) + gt.at(f - 1, j);
      s += (ap - ag).norm();
    }
  return 1000.0 * s / (static_cast<double>(pred.frames - 2) * pred.joints);
}

PoseErrors mpjpe_family(const JointPositions& pred, const JointPositions& gt) {
  return {mpjpe(pred, gt), pa_mpjpe(pred, gt), accl(pred, gt)};
}

Displacement ade_fde(const JointPositions& pred, const JointPositions& gt) {
  check_same(pred, gt);
  Displacement d;
  d.ade = mpjpe(pred, gt);
  double last = 0;
  for (int j = 0; j < pred.joints; ++j) last += (pred.at(pred.frames - 1, j) - gt.at(gt.frames - 1, j)).norm();
  d.fde = 1000.0 * last / pred.joints;
  return d;
}

// ---- distributions ----------------------------------------------------------------

GaussianStats GaussianStats::from_samples(const std::vector<std::vector<double>>& x) {
  if (x.size() < 2) throw InvalidArgument("Gaussian statistics need at least 2 samples");
  const auto d = static_cast<Eigen::Index>(x.front().size());
  if (d == 0) throw InvalidArgument("samples are empty");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(x.size()), d);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (static_cast<Eigen::Index>(x[i].size()) != d) throw ShapeError("samples differ in dimension");
    for (Eigen::Index c = 0; c < d; ++c) m(static_cast<Eigen::Index>(i), c) = x[i][static_cast<std::size_t>(c)];
  }
  GaussianStats g;
  g.mean = m.colwise().mean().transpose();
  const Eigen::MatrixXd centred = m.rowwise() - g.mean.transpose();
  g.cov = centred.transpose() * centred / static_cast<double>(x.size() - 1);
  g.count = static_cast<std::int64_t>(x.size());
  return g;
}

void GaussianStats::validate() const {
  if (count < 2) throw InvalidArgument("Gaussian statistics need at least 2 samples");
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) throw ShapeError("covariance does not match mean");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-8) throw InvalidArgument("covariance is not symmetric");
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8) throw InvalidArgument(std::string(what) + " is not positive semi-definite");
    ev(i) = std::sqrt(std::max(0.0, ev(i)));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const GaussianStats& a, const GaussianStats& b) {
  a.validate();
  b.validate();
  if (a.mean.size() != b.mean.size()) throw ShapeError("FID inputs differ in dimension");
  // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), the latter being symmetric.
  const Eigen::MatrixXd ra = psd_sqrt(a.cov, "covariance");
  psd_sqrt(b.cov, "covariance");
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  double tr_sqrt = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()(i);
    if (ev < -1e-8) throw InvalidArgument("covariance product is not positive semi-definite");
    tr_sqrt += std::sqrt(std::max(0.0, ev));
  }
  const double v = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * tr_sqrt;
  return std::max(0.0, v);
}

double diversity(const std::vector<std::vector<double>>& features, int subset, std::uint64_t seed) {
  if (subset < 1) throw InvalidArgument("diversity subset size must be positive");
  if (static_cast<int>(features.size()) < 2 * subset)
    throw InvalidArgument("diversity needs " + std::to_string(2 * subset) + " samples, got " +
                          std::to_string(features.size()));
  std::vector<std::size_t> idx(features.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, 0xd1);
  for (std::size_t i = idx.size() - 1; i > 0; --i)
    std::swap(idx[i], idx[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i)))]);
  double s = 0;
  for (int i = 0; i < subset; ++i)
    s += l2(features[idx[static_cast<std::size_t>(i)]], features[idx[static_cast<std::size_t>(subset + i)]]);
  return s / subset;
}

double multimodality(const std::vector<std::vector<std::vector<double>>>& by_condition) {
  if (by_condition.empty()) throw InvalidArgument("multimodality needs at least one condition");
  double total = 0;
  for (const auto& gens : by_condition) {
    if (gens.size() < 2) throw InvalidArgument("multimodality needs at least 2 generations per condition");
    double s = 0;
    int pairs = 0;
    for (std::size_t i = 0; i < gens.size(); ++i)
      for (std::size_t j = i + 1; j < gens.size(); ++j, ++pairs) s += l2(gens[i], gens[j]);
    total += s / pairs;
  }
  return total / static_cast<double>(by_condition.size());
}

Spread diversity_mmodality(const std::vector<std::vector<std::vector<double>>>& by_condition, int subset,
                           std::uint64_t seed) {
  std::vector<std::vector<double>> pooled;
  for (const auto& gens : by_condition) pooled.insert(pooled.end(), gens.begin(), gens.end());
  return {diversity(pooled, subset, seed), multimodality(by_condition)};
}

Retrieval retrieval_metrics(const std::vector<std::vector<double>>& motion, const std::vector<std::vector<double>>& text,
                            std::uint64_t seed) {
  if (motion.size() != text.size()) throw ShapeError("motion and text embedding counts differ");
  const int n = static_cast<int>(motion.size());
  if (n < kRetrievalPool) throw InvalidArgument("retrieval needs at least 32 pairs, got " + std::to_string(n));
  Rng rng = make_rng(seed, 0x2e);
  std::vector<int> others(static_cast<std::size_t>(n - 1));
  Retrieval r;
  for (int i = 0; i < n; ++i) {
    for (int k = 0, o = 0; k < n; ++k)
      if (k != i) others[static_cast<std::size_t>(o++)] = k;
    // Partial shuffle picks 31 distinct mismatches.
    for (int k = 0; k < kRetrievalPool - 1; ++k)
      std::swap(others[static_cast<std::size_t>(k)], others[static_cast<std::size_t>(uniform_int(rng, k, n - 2))]);
    const double d_true = l2(text[static_cast<std::size_t>(i)], motion[static_cast<std::size_t>(i)]);
    int rank = 1;  // ties count against the true match
    for (int k = 0; k < kRetrievalPool - 1; ++k)
      if (l2(text[static_cast<std::size_t>(i)], motion[static_cast<std::size_t>(others[static_cast<std::size_t>(k)])]) <= d_true)
        ++rank;
    r.r1 += rank <= 1;
    r.r2 += rank <= 2;
    r.r3 += rank <= 3;
    r.mm_dist += d_true;
  }
  r.r1 /= n;
  r.r2 /= n;
  r.r3 /= n;
  r.mm_dist /= n;
  return r;
}

// ---- text -----------------------------------------------------------------------

std::vector<std::string> text_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

using Counts = std::unordered_map<std::string, int>;

Counts ngrams(const std::vector<std::string>& toks, int n) {
  Counts c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int k = 1; k < n; ++k) key += ' ' + toks[i + static_cast<std::size_t>(k)];
    ++c[key];
  }
  return c;
}

void check_corpus(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs) {
  if (cands.empty()) throw InvalidArgument("candidate set is empty");
  if (cands.size() != refs.size()) throw InvalidArgument("candidate and reference counts differ");
  for (const auto& r : refs)
    if (r.empty()) throw InvalidArgument("every candidate needs at least one reference");
}

}  // namespace

double corpus_bleu(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references,
                   int max_n) {
  check_corpus(candidates, references);
  if (max_n < 1) throw InvalidArgument("BLEU order must be positive");
  std::vector<double> matched(static_cast<std::size_t>(max_n), 0), total(static_cast<std::size_t>(max_n), 0);
  double cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = text_tokens(candidates[i]);
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : references[i]) refs.push_back(text_tokens(r));
    cand_len += static_cast<double>(c.size());
    // Closest reference length, shorter on ties.
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
      const auto d = [&](std::size_t len) { return len > c.size() ? len - c.size() : c.size() - len; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (int n = 1; n <= max_n; ++n) {
      Counts max_ref;
      for (const auto& r : refs)
        for (const auto& [g, k] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], k);
      for (const auto& [g, k] : ngrams(c, n)) {
        const auto it = max_ref.find(g);
        matched[static_cast<std::size_t>(n - 1)] += std::min(k, it == max_ref.end() ? 0 : it->second);
        total[static_cast<std::size_t>(n - 1)] += k;
      }
    }
  }
  if (cand_len == 0) return 0;
  double log_p = 0;
  for (int n = 0; n < max_n; ++n) {
    if (matched[static_cast<std::size_t>(n)] == 0) return 0;
    log_p += std::log(matched[static_cast<std::size_t>(n)] / total[static_cast<std::size_t>(n)]) / max_n;
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_p);
}

double rouge_l(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  check_corpus(candidates, references);
  double total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = text_tokens(candidates[i]);
    double best = 0;
    for (const auto& ref : references[i]) {
      const auto r = text_tokens(ref);
      if (c.empty() || r.empty()) continue;
      std::vector<int> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
      for (std::size_t a = 0; a < c.size(); ++a) {
        for (std::size_t b = 0; b < r.size(); ++b)
          cur[b + 1] = c[a] == r[b] ? prev[b] + 1 : std::max(prev[b + 1], cur[b]);
        std::swap(prev, cur);
      }
      const double lcs = prev[r.size()];
      if (lcs == 0) continue;
      const double p = lcs / static_cast<double>(c.size()), rc = lcs / static_cast<double>(r.size());
      best = std::max(best, 2 * p * rc / (p + rc));
    }
    total += best;
  }
  return total / static_cast<double>(candidates.size());
}

double cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  check_corpus(candidates, references);
  constexpr int kMaxN = 4;
  const double n_docs = static_cast<double>(candidates.size());
  std::vector<std::vector<std::vector<Counts>>> ref_grams(references.size());  // [item][ref][n]
  std::vector<std::unordered_map<std::string, double>> df(kMaxN);
  for (std::size_t i = 0; i < references.size(); ++i) {
    std::vector<std::unordered_set<std::string>> seen(kMaxN);
    for (const auto& r : references[i]) {
      const auto toks = text_tokens(r);
      std::vector<Counts> per_n;
      for (int n = 1; n <= kMaxN; ++n) {
        per_n.push_back(ngrams(toks, n));
        for (const auto& [g, k] : per_n.back()) seen[static_cast<std::size_t>(n - 1)].insert(g);
      }
      ref_grams[i].push_back(std::move(per_n));
    }
    for (int n = 0; n < kMaxN; ++n)
      for (const auto& g : seen[static_cast<std::size_t>(n)]) df[static_cast<std::size_t>(n)][g] += 1;
  }
  auto tfidf = [&](const Counts& c, int n) {
    std::unordered_map<std::string, double> v;
    double sum = 0;
    for (const auto& [g, k] : c) sum += k;
    for (const auto& [g, k] : c) {
      const auto it = df[static_cast<std::size_t>(n)].find(g);
      const double d = it == df[static_cast<std::size_t>(n)].end() ? 0.0 : it->second;
      v[g] = k / sum * std::log(n_docs / std::max(1.0, d));
    }
    return v;
  };
  auto cosine = [](const std::unordered_map<std::string, double>& a, const std::unordered_map<std::string, double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (const auto& [g, x] : a) {
      na += x * x;
      const auto it = b.find(g);
      if (it != b.end()) dot += x * it->second;
    }
    for (const auto& [g, x] : b) nb += x * x;
    return na > 0 && nb > 0 ? dot / std::sqrt(na * nb) : 0.0;
  };
  double total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto toks = text_tokens(candidates[i]);
    double score = 0;
    for (int n = 0; n < kMaxN; ++n) {
      const auto cv = tfidf(ngrams(toks, n + 1), n);
      double s = 0;
      for (const auto& r : ref_grams[i]) s += cosine(cv, tfidf(r[static_cast<std::size_t>(n)], n));
      score += s / static_cast<double>(ref_grams[i].size());
    }
    total += score / kMaxN;
  }
  return total / n_docs;
}

Linguistic linguistic(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  return {corpus_bleu(candidates, references, 1), corpus_bleu(candidates, references, 4), rouge_l(candidates, references),
          cider(candidates, references)};
}

// ---- evaluator ------------------------------------------------------------------

Eigen::VectorXd Evaluator::summary(const motion::MotionFeatures& f) const {
  f.validate();
  const int d = f.dim();
  if (mean_.size() != 0 && mean_.size() != 2 * d) throw ShapeError("feature dimension does not match the evaluator");
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d), sd = Eigen::VectorXd::Zero(d);
  for (int t = 0; t < f.frames; ++t)
    for (int c = 0; c < d; ++c) mu(c) += f.at(t, c);
  mu /= f.frames;
  for (int t = 0; t < f.frames; ++t)
    for (int c = 0; c < d; ++c) sd(c) += (f.at(t, c) - mu(c)) * (f.at(t, c) - mu(c));
  sd = (sd / f.frames).cwiseSqrt();
  Eigen::VectorXd out(2 * d);
  out << mu, sd;
  return out;
}

Eigen::VectorXd Evaluator::bag(const std::string& caption) const {
  std::string lower;
  for (const auto& w : text_tokens(caption)) lower += (lower.empty() ? "" : " ") + w;
  Eigen::VectorXd v = Eigen::VectorXd::Zero(text_.size() + 1);
  for (int id : text_.encode(lower)) v(id) += 1;
  const double nrm = v.norm();
  if (nrm > 0) v /= nrm;
  v(text_.size()) = 1;  // bias
  return v;
}

Evaluator Evaluator::fit(const std::vector<motion::MotionFeatures>& motions, const std::vector<std::string>& captions,
                         const vocab::TextVocab& text, const EvaluatorConfig& cfg) {
  if (motions.size() != captions.size()) throw InvalidArgument("motion and caption counts differ");
  if (motions.size() < 2) throw InvalidArgument("evaluator needs at least 2 reference clips");
  if (cfg.embed_dim < 1) throw InvalidArgument("embedding dimension must be positive");
  if (cfg.ridge <= 0) throw InvalidArgument("ridge strength must be positive");
  Evaluator e;
  e.cfg_ = cfg;
  e.text_ = text;

  std::vector<Eigen::VectorXd> sums;
  for (const auto& m : motions) sums.push_back(e.summary(m));
  const auto dim = sums.front().size();
  for (const auto& s : sums)
    if (s.size() != dim) throw ShapeError("reference clips differ in feature dimension");
  e.mean_ = Eigen::VectorXd::Zero(dim);
  for (const auto& s : sums) e.mean_ += s;
  e.mean_ /= static_cast<double>(sums.size());
  e.std_ = Eigen::VectorXd::Zero(dim);
  for (const auto& s : sums) e.std_ += (s - e.mean_).cwiseAbs2();
  e.std_ = (e.std_ / static_cast<double>(sums.size())).cwiseSqrt();
  for (Eigen::Index i = 0; i < dim; ++i)
    if (e.std_(i) < 1e-8) e.std_(i) = 1;

  Rng rng = make_rng(cfg.seed, 0xe7);
  e.projection_.resize(cfg.embed_dim, dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index c = 0; c < dim; ++c)
    for (int r = 0; r < cfg.embed_dim; ++r) e.projection_(r, c) = normal(rng) * scale;

  const auto n = static_cast<Eigen::Index>(motions.size());
  const Eigen::Index v = text.size() + 1;
  Eigen::MatrixXd x(n, v), y(n, cfg.embed_dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = e.bag(captions[static_cast<std::size_t>(i)]).transpose();
    y.row(i) = (e.projection_ * (sums[static_cast<std::size_t>(i)] - e.mean_).cwiseQuotient(e.std_)).transpose();
  }
  const Eigen::MatrixXd gram = x.transpose() * x + cfg.ridge * Eigen::MatrixXd::Identity(v, v);
  e.text_map_ = gram.ldlt().solve(x.transpose() * y).transpose();
  return e;
}

std::vector<double> Evaluator::embed_motion(const motion::MotionFeatures& f) const {
  if (projection_.size() == 0) throw InvalidArgument("evaluator is not fitted");
  const Eigen::VectorXd z = projection_ * (summary(f) - mean_).cwiseQuotient(std_);
  return {z.data(), z.data() + z.size()};
}

std::vector<double> Evaluator::embed_text(const std::string& caption) const {
  if (text_map_.size() == 0) throw InvalidArgument("evaluator is not fitted");
  const Eigen::VectorXd z = text_map_ * bag(caption);
  return {z.data(), z.data() + z.size()};
}

namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Eigen::MatrixXd matrix_from(const nlohmann::json& j) {
  const auto r = j.at("rows").get<Eigen::Index>(), c = j.at("cols").get<Eigen::Index>();
  const auto d = j.at("data").get<std::vector<double>>();
  if (r < 0 || c < 0 || static_cast<Eigen::Index>(d.size()) != r * c) throw FormatError("matrix entry has the wrong size");
  return Eigen::Map<const Eigen::MatrixXd>(d.data(), r, c);
}

}  // namespace

nlohmann::json Evaluator::to_json() const {
  return {{"embed_dim", cfg_.embed_dim},     {"seed", cfg_.seed},           {"ridge", cfg_.ridge},
          {"merges", text_.merges()},        {"mean", matrix_json(mean_)},  {"std", matrix_json(std_)},
          {"projection", matrix_json(projection_)}, {"text_map", matrix_json(text_map_)}};
}

Evaluator Evaluator::from_json(const nlohmann::json& j) {
  try {
    Evaluator e;
    e.cfg_.embed_dim = j.at("embed_dim").get<int>();
    e.cfg_.seed = j.at("seed").get<std::uint64_t>();
    e.cfg_.ridge = j.at("ridge").get<double>();
    e.text_ = vocab::TextVocab(j.at("merges").get<std::vector<std::pair<int, int>>>());
    e.mean_ = matrix_from(j.at("mean"));
    e.std_ = matrix_from(j.at("std"));
    e.projection_ = matrix_from(j.at("projection"));
    e.text_map_ = matrix_from(j.at("text_map"));
    if (e.projection_.rows() != e.cfg_.embed_dim || e.projection_.cols() != e.mean_.size() ||
        e.text_map_.rows() != e.cfg_.embed_dim || e.text_map_.cols() != e.text_.size() + 1)
      throw FormatError("evaluator matrices are inconsistent");
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("bad evaluator: ") + ex.what());
  }
}

// ---- reports --------------------------------------------------------------------

namespace {

double t_quantile_975(int df) {
  static constexpr double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                     2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                     2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df <= 30) return table[df - 1];
  const double z = 1.959964;
  return z + (z * z * z + z) / (4.0 * df);
}

}  // namespace

MetricValue summarize_runs(const std::vector<double>& values) {
  if (values.empty()) throw InvalidArgument("no runs to summarize");
  MetricValue m;
  m.runs = static_cast<int>(values.size());
  m.value = std::accumulate(values.begin(), values.end(), 0.0) / m.runs;
  if (m.runs > 1) {
    double ss = 0;
    for (double v : values) ss += (v - m.value) * (v - m.value);
    m.ci95 = t_quantile_975(m.runs - 1) * std::sqrt(ss / (m.runs - 1)) / std::sqrt(static_cast<double>(m.runs));
  }
  return m;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values) j[k] = {{"value", v.value}, {"ci95", v.ci95}, {"runs", v.runs}};
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("metric report must be an object");
  MetricReport r;
  try {
    for (const auto& [k, v] : j.items())
      r.values[k] = {v.at("value").get<double>(), v.at("ci95").get<double>(), v.at("runs").get<int>()};
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("bad metric report: ") + ex.what());
  }
  return r;
}

// ---- throughput -----------------------------------------------------------------

double wall_clock() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

FpsResult fps_harness(const std::function<int()>& generate_once, int downsample, int runs, const Clock& clock) {
  if (runs < 1) throw InvalidArgument("fps harness needs at least one run");
  if (downsample < 1) throw InvalidArgument("downsample rate must be positive");
  FpsResult r;
  for (int i = 0; i < runs; ++i) {
    const double start = clock();
    const int steps = generate_once();
    const double secs = clock() - start;
    if (steps < 0) throw InvalidArgument("negative timestep count");
    const std::int64_t frames = static_cast<std::int64_t>(steps) * downsample;
    if (frames > 0 && secs <= 0) throw InvalidArgument("clock did not advance");
    r.frames += frames;
    r.seconds += secs;
    r.per_run.push_back(frames > 0 ? static_cast<double>(frames) / secs : 0.0);
  }
  if (r.frames == 0) throw InvalidArgument("no motion frames were generated");
  r.fps = std::accumulate(r.per_run.begin(), r.per_run.end(), 0.0) / runs;
  return r;
}

}  // namespace mtalk::metrics

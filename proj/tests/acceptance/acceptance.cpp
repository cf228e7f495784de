// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//   acceptance [--only 1,4,10] [--work DIR]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mtalk/common/alloc.hpp"
#include "mtalk/common/error.hpp"
#include "mtalk/composition/composition.hpp"
#include "mtalk/lm/model.hpp"
#include "mtalk/metrics/metrics.hpp"
#include "mtalk/motion/io.hpp"
#include "mtalk/service/pipeline.hpp"
#include "mtalk/tokenizer/tokenizer.hpp"
#include "mtalk/vision/vision.hpp"

using namespace mtalk;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

// ---- shared state between criteria ----------------------------------------------------

struct TrainedTokenizer {
  std::uint64_t seed;
  tok::MotionTokenizer model;
  std::vector<motion::LabeledClip> heldout;
  double ratio = 0, recon_mm = 0, baseline_mm = 0;
};

std::vector<TrainedTokenizer>& tokenizers() {
  static std::vector<TrainedTokenizer> t;
  return t;
}

motion::CorpusConfig fixed_length(int frames) {
  motion::CorpusConfig c;
  c.min_frames = c.max_frames = frames;
  return c;
}

// ---- 1 ------------------------------------------------------------------------------

ad::Tensor<float> random_matrix(Rng& rng, int r, int c) {
  ad::Tensor<float> t({r, c});
  for (auto& v : t.data) v = static_cast<float>(normal(rng));
  return t;
}

std::vector<int> brute_force_nn(const ad::Tensor<float>& z, const ad::Tensor<float>& cb) {
  std::vector<int> out;
  for (int i = 0; i < z.rows(); ++i) {
    int best = -1;
    double best_d = INFINITY;
    for (int k = 0; k < cb.rows(); ++k) {
      double d = 0;
      for (int j = 0; j < z.cols(); ++j) d += std::pow(double(z.at(i, j)) - double(cb.at(k, j)), 2);
      if (d < best_d) best_d = d, best = k;
    }
    out.push_back(best);
  }
  return out;
}

Outcome quantizer_oracle() {
  const auto t0 = Clock::now();
  struct Cfg {
    int k, d, rows;
  };
  // Toy tokenizer, a small book and the reference width.
  const std::vector<Cfg> cfgs{{64, 64, 8}, {16, 8, 8}, {512, 1024, 1}};
  int cases = 0, mismatches = 0;
  double lib = 0;  // quantize calls only; input generation and the oracle scan are excluded
  Rng rng = make_rng(101);
  for (const auto& c : cfgs)
    for (int i = 0; i < 1000; ++i, ++cases) {
      const auto cb = random_matrix(rng, c.k, c.d);
      const auto z = random_matrix(rng, c.rows, c.d);
      const auto t1 = Clock::now();
      const auto q = tok::quantize(z, cb);
      lib += seconds_since(t1);
      mismatches += q.indices != brute_force_nn(z, cb);
    }
  return {mismatches == 0 && lib < 5.0,
          fmt("%d cases over 3 configs, %d mismatches, %.2f s quantize (%.1f s with oracle)", cases, mismatches, lib,
              seconds_since(t0))};
}

// ---- 2 ------------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  int prims = 0, short_runs = 0;
  for (const auto& spec : testing::primitive_registry()) {
    const auto r = testing::run_primitive(spec, 7, 50);
    ++prims;
    short_runs += r.cases < 50;
    if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = spec.name;
  }
  const double s = seconds_since(t0);
  return {worst < 1e-4 && short_runs == 0 && s < 60,
          fmt("%d primitives x 50 cases, max rel error %.2e (%s), %.1f s", prims, worst, worst_name.c_str(), s)};
}

// ---- 3 ------------------------------------------------------------------------------

Outcome token_arithmetic() {
  tok::TokenizerConfig c;
  c.codebook_size = 16;
  c.code_dim = 8;
  c.width = 16;
  tok::MotionTokenizer tk(c, 4);
  motion::MotionFeatures f(5, 196);
  Rng rng = make_rng(3);
  for (auto& v : f.data) v = normal(rng);
  const auto t = tk.encode(f);
  const int frames = tk.decode(t).frames;
  return {t.length() == 49 && frames == 4 * t.length() && frames == 196,
          fmt("M = 196, l = 4 -> L = %d, decoded %d frames", t.length(), frames)};
}

// ---- 4 ------------------------------------------------------------------------------

std::vector<motion::MotionFeatures> features(const motion::Skeleton& sk, const std::vector<motion::LabeledClip>& c) {
  std::vector<motion::MotionFeatures> out;
  for (const auto& x : c) out.push_back(motion::extract_features(sk, x.clip));
  return out;
}

Outcome tokenizer_learning() {
  const auto t0 = Clock::now();
  const auto sk = motion::Skeleton::toy5();
  tokenizers().clear();
  int passed = 0;
  std::string per;
  for (auto seed : kSeeds) {
    const auto ts = Clock::now();
    const auto feats = features(sk, motion::synth_corpus(seed, 200, sk, fixed_length(64)));
    tok::TokenizerConfig cfg;  // K = 64, d = 64, Q = 2
    cfg.n_joints = 5;
    tok::TokenizerTrainSettings s;
    s.epochs = 150;
    s.lr = 1e-3;
    s.seed = seed;
    auto res = tok::train_tokenizer(feats, cfg, s);

    // Constant-mean-pose baseline: the training corpus' mean feature vector on every frame.
    std::vector<double> mean(static_cast<std::size_t>(feats[0].dim()), 0.0);
    long n = 0;
    for (const auto& f : feats)
      for (int t = 0; t < f.frames; ++t, ++n)
        for (int c = 0; c < f.dim(); ++c) mean[static_cast<std::size_t>(c)] += f.at(t, c);
    for (auto& m : mean) m /= static_cast<double>(n);

    TrainedTokenizer tt{seed, std::move(res.model), motion::synth_corpus(seed + 1000, 50, sk, fixed_length(64))};
    for (const auto& c : tt.heldout) {
      const auto f = motion::extract_features(sk, c.clip);
      const auto gt = motion::forward_kinematics(sk, c.clip);
      const auto root = motion::initial_root(c.clip);
      tt.recon_mm += metrics::mpjpe(motion::recover_positions(tt.model.decode(tt.model.encode(f)), root), gt);
      motion::MotionFeatures constant(5, f.frames);
      for (int t = 0; t < f.frames; ++t)
        for (int k = 0; k < f.dim(); ++k) constant.at(t, k) = mean[static_cast<std::size_t>(k)];
      tt.baseline_mm += metrics::mpjpe(motion::recover_positions(constant, root), gt);
    }
    tt.recon_mm /= tt.heldout.size();
    tt.baseline_mm /= tt.heldout.size();
    tt.ratio = tt.recon_mm / tt.baseline_mm;
    passed += tt.ratio <= 0.5;
    per += fmt("%sseed %llu: %.1f/%.1f mm = %.3f (%.0f s)", per.empty() ? "" : "; ",
               static_cast<unsigned long long>(seed), tt.recon_mm, tt.baseline_mm, tt.ratio, seconds_since(ts));
    tokenizers().push_back(std::move(tt));
  }
  const double s = seconds_since(t0);
  return {passed == 3 && s < 600, fmt("%d/3 seeds at <= 50%% of baseline; ", passed) + per + fmt("; %.0f s total", s)};
}

void ensure_tokenizers() {
  if (tokenizers().empty()) tokenizer_learning();
}

// ---- 5 ------------------------------------------------------------------------------

Outcome composition_ordering() {
  ensure_tokenizers();
  const auto t0 = Clock::now();
  const auto sk = motion::Skeleton::toy5();
  int ordered = 0;
  std::string per;
  for (const auto& tt : tokenizers()) {
    const auto pairs = motion::synth_two_phase(tt.seed + 500, 100, sk, 32);
    const auto r = comp::ordering_experiment(tt.model, sk, pairs, 4);
    const bool ok = r.mpjpe_ordered() && r.accl_ordered();
    ordered += ok;
    const auto& i = r.score(comp::StrategyKind::independent);
    const auto& p = r.score(comp::StrategyKind::past_condition);
    const auto& j = r.score(comp::StrategyKind::tokens_joint);
    per += fmt("%sseed %llu MPJPE J/P/I %.1f/%.1f/%.1f ACCL %.2f/%.2f/%.2f", per.empty() ? "" : "; ",
               static_cast<unsigned long long>(tt.seed), j.mpjpe, p.mpjpe, i.mpjpe, j.accl, p.accl, i.accl);
  }
  const double s = seconds_since(t0);
  return {ordered >= 2 && s < 300, fmt("%d/3 seeds ordered joint < past < independent; ", ordered) + per +
                                       fmt("; %.0f s", s)};
}

// ---- 6 ------------------------------------------------------------------------------

Outcome residual_monotonicity() {
  ensure_tokenizers();
  const auto sk = motion::Skeleton::toy5();
  long rows = 0, bad = 0;
  double worst = 1.0;
  for (const auto& tt : tokenizers()) {
    for (const auto& c : tt.heldout) {
      auto r = tt.model.latents(motion::extract_features(sk, c.clip));
      auto norm = [&](int i) {
        double s = 0;
        for (int j = 0; j < r.cols(); ++j) s += double(r.at(i, j)) * r.at(i, j);
        return std::sqrt(s);
      };
      std::vector<double> prev(static_cast<std::size_t>(r.rows()));
      for (int i = 0; i < r.rows(); ++i) prev[static_cast<std::size_t>(i)] = norm(i);
      for (int q = 0; q < tt.model.config().layers; ++q) {
        const auto qr = tok::quantize(r, tt.model.codebook(q));
        for (std::size_t k = 0; k < r.data.size(); ++k) r.data[k] -= qr.quantized.data[k];
        for (int i = 0; i < r.rows(); ++i) {
          const double now = norm(i);
          auto& p = prev[static_cast<std::size_t>(i)];
          ++rows;
          if (now > p * (1 + 1e-9)) {
            ++bad;
            worst = std::max(worst, now / p);
          }
          p = now;
        }
      }
    }
  }
  return {bad == 0, fmt("%ld/%ld held-out (row, layer) steps non-increasing (%.2f%%), worst growth %.2fx", rows - bad,
                        rows, 100.0 * (rows - bad) / rows, worst)};
}

// ---- 7 ------------------------------------------------------------------------------

motion::JointPositions random_positions(Rng& rng, int frames, int joints) {
  motion::JointPositions p(frames, joints);
  for (auto& v : p.data) v = {normal(rng), normal(rng), normal(rng)};
  return p;
}

Outcome metric_fixtures() {
  std::vector<std::string> failed;
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  Rng rng = make_rng(7);

  std::vector<std::vector<double>> x;
  for (int i = 0; i < 200; ++i) x.push_back({normal(rng), normal(rng), normal(rng)});
  const auto sx = metrics::GaussianStats::from_samples(x);
  need(std::abs(metrics::fid(sx, sx)) <= 1e-6, "FID(X,X)");

  // Closed form for 1-D Gaussians: (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2.
  metrics::GaussianStats a, b;
  a.mean = Eigen::VectorXd::Constant(1, 0.0);
  b.mean = Eigen::VectorXd::Constant(1, 2.0);
  a.cov = b.cov = Eigen::MatrixXd::Identity(1, 1);
  a.count = b.count = 2;
  const double oracle = std::pow(0.0 - 2.0, 2) + std::pow(1.0 - 1.0, 2);
  const double f = metrics::fid(a, b);
  need(std::abs(f - oracle) <= 1e-6 && std::abs(f - 4.0) <= 1e-6, "FID N(0,1) vs N(2,1)");

  // Similarity-transformed copy.
  const auto gt = random_positions(rng, 20, 5);
  Eigen::Matrix3d rot = Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
  auto moved = gt;
  for (auto& v : moved.data) v = 1.7 * rot * v + Eigen::Vector3d(0.3, -2, 5);
  need(metrics::pa_mpjpe(moved, gt) <= 1e-6, "PA-MPJPE of similarity copy");
  int pa_ok = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_positions(rng, 6, 5), g = random_positions(rng, 6, 5);
    pa_ok += metrics::pa_mpjpe(p, g) <= metrics::mpjpe(p, g) + 1e-9;
  }
  need(pa_ok == 1000, "PA-MPJPE <= MPJPE");
  const auto d = metrics::ade_fde(gt, gt);
  need(d.ade == 0.0 && d.fde == 0.0, "ADE/FDE identity");
  need(metrics::corpus_bleu({"a person walks forward"}, {{"a person walks forward"}}, 1) == 1.0, "BLEU@1 exact");

  // Chance retrieval: pool of 32, so R@1 ~ Bernoulli(1/32) per query.
  const int n = 400;
  double mean_r1 = 0;
  const int seeds = 10;
  for (int s = 0; s < seeds; ++s) {
    std::vector<std::vector<double>> m, t;
    for (int i = 0; i < n; ++i) {
      m.push_back({normal(rng), normal(rng), normal(rng), normal(rng)});
      t.push_back({normal(rng), normal(rng), normal(rng), normal(rng)});
    }
    mean_r1 += metrics::retrieval_metrics(m, t, static_cast<std::uint64_t>(s)).r1 / seeds;
  }
  const double p = 1.0 / 32, sigma = std::sqrt(p * (1 - p) / (n * seeds));
  need(std::abs(mean_r1 - p) <= 3 * sigma, "chance R@1");

  std::string detail = fmt("FID(X,X) %.1e, FID 1-D %.9f, PA copy %.1e mm, PA<=MPJPE %d/1000, chance R@1 %.4f (1/32 +- %.4f)",
                           std::abs(metrics::fid(sx, sx)), f, metrics::pa_mpjpe(moved, gt), pa_ok, mean_r1, 3 * sigma);
  for (const auto& w : failed) detail += "; failed: " + w;
  return {failed.empty(), detail};
}

// ---- 8 ------------------------------------------------------------------------------

lm::LmConfig tiny_lm(int vocab) {
  lm::LmConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 32;
  c.ff = 64;
  c.context = 64;
  c.vocab = vocab;
  return c;
}

std::vector<int> random_ids(Rng& rng, int n, int vocab) {
  std::vector<int> ids;
  while (static_cast<int>(ids.size()) < n) {
    const int id = uniform_int(rng, 0, vocab - 1);
    if (id != 2 && id != 3) ids.push_back(id);  // no stop id, no image placeholder
  }
  return ids;
}

conv::TrainingSample sample_of(const std::vector<int>& ids, int answer_len) {
  conv::TrainingSample s;
  s.input_ids.assign(ids.begin(), ids.end() - 1);
  s.target_ids.assign(ids.begin() + 1, ids.end());
  s.loss_mask.assign(s.target_ids.size(), 0);
  for (int i = 0; i < answer_len; ++i) s.loss_mask[s.loss_mask.size() - 1 - static_cast<std::size_t>(i)] = 1;
  s.task = "text-to-motion";
  s.turns = 1;
  return s;
}

Outcome lm_contracts() {
  std::vector<std::string> notes;
  bool ok = true;
  Rng rng = make_rng(8);

  // Causality: changing token k leaves logits before k bit-identical.
  lm::LanguageModel m(tiny_lm(40), 1);
  auto ids = random_ids(rng, 24, 40);
  const auto before = m.forward(ids);
  ids[17] = ids[17] == 5 ? 6 : 5;
  const auto after = m.forward(ids);
  bool causal = true;
  for (int r = 0; r < 17; ++r)
    for (int c = 0; c < 40; ++c) causal &= before.at(r, c) == after.at(r, c);
  ok &= causal;
  notes.push_back(causal ? "causal bitwise" : "causality broken");

  // Mask-0 positions receive exactly zero gradient.
  {
    const auto s = sample_of(random_ids(rng, 16, 40), 4);
    ad::Tape<float> t;
    const auto v = m.bind_frozen(t);
    const auto logits = m.build_logits(t, v, s.input_ids);
    t.backward(lm::lm_loss(t, logits, s.target_ids, s.loss_mask));
    bool zero = true;
    for (int r = 0; r < t.value(logits).rows(); ++r)
      if (!s.loss_mask[static_cast<std::size_t>(r)])
        for (int c = 0; c < 40; ++c) zero &= t.grad(logits).at(r, c) == 0.0f;
    ok &= zero;
    notes.push_back(zero ? "mask-0 grad 0" : "mask-0 grad nonzero");
  }

  // Single-sample overfit.
  {
    lm::LanguageModel o(tiny_lm(24), 6);
    auto seq = random_ids(rng, 14, 24);
    seq.push_back(2);
    const int answer_len = 6;
    lm::LmTrainSettings ts;
    ts.steps = 2000;
    ts.batch = 1;
    ts.lr = 3e-3;
    ts.weight_decay = 0;
    ts.seed = 1;
    int reached = -1;
    ts.on_step = [&](int step, double loss) {
      if (reached < 0 && loss < 0.01) reached = step + 1;
    };
    const auto res = lm::train_lm(o, {sample_of(seq, answer_len)}, ts);
    const std::vector<int> prompt(seq.begin(), seq.end() - answer_len), answer(seq.end() - answer_len, seq.end());
    lm::DecodingParams p;
    p.max_new_tokens = 20;
    const bool exact = o.generate(prompt, nullptr, p) == answer;
    const bool fit = reached > 0 && res.losses.back() < 0.01;
    ok &= fit && exact;
    notes.push_back(fmt("overfit loss<0.01 at step %d, final %.4f, greedy %s", reached, res.losses.back(),
                        exact ? "exact" : "differs"));
  }

  // Termination: every generation ends at the stop id or at the budget.
  {
    int good = 0;
    const int runs = 200;
    for (int s = 0; s < runs; ++s) {
      lm::DecodingParams p;
      p.mode = lm::DecodingParams::Mode::top_k;
      p.k = 40;
      p.seed = static_cast<std::uint64_t>(s);
      p.max_new_tokens = 1 + s % 20;
      const auto out = m.generate(random_ids(rng, 8, 40), nullptr, p);
      const bool stopped = !out.empty() && out.back() == p.stop_id &&
                           std::count(out.begin(), out.end(), p.stop_id) == 1;
      const bool bounded = static_cast<int>(out.size()) == p.max_new_tokens &&
                           std::count(out.begin(), out.end(), p.stop_id) == 0;
      good += (stopped || bounded) && static_cast<int>(out.size()) <= p.max_new_tokens;
    }
    ok &= good == runs;
    notes.push_back(fmt("%d/%d generations terminate", good, runs));
  }
  std::string d;
  for (const auto& n : notes) d += (d.empty() ? "" : ", ") + n;
  return {ok, d};
}

// ---- 9 ------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

Outcome conversation_format(const fs::path& work) {
  // Same vocabulary and sessions as the golden files were written from.
  const vocab::UnifiedVocab v(
      vocab::train_text_vocab({"USER: walk ASSISTANT: ", "a person waves", "a person walks forward", "jump jump"}, 300),
      2, 64);
  auto motion_answer = [&](const tok::MotionTokens& t) {
    auto ids = v.motion_to_symbols(t);
    ids.push_back(v.eos());
    return ids;
  };
  auto text_answer = [&](const std::string& s) {
    auto ids = v.encode_text(s);
    ids.push_back(v.eos());
    return ids;
  };
  conv::Session one;
  one.turns.push_back({v.encode_text("walk"), motion_answer({{{5}, {9}}})});
  conv::Session three;
  three.system_message = "You guide motion.";
  three.turns.push_back({v.encode_text("Copy the pose."), motion_answer({{{1, 3}, {2, 4}}}), true});
  three.turns.push_back({v.encode_text("What is it?"), text_answer("a person waves")});
  three.turns.push_back({v.encode_text("Make it a jump instead."), motion_answer({{{63}, {0}}})});
  const fs::path golden(MTALK_GOLDEN_DIR);
  const bool g1 = conv::render_text(one, v) == slurp(golden / "single_turn.txt");
  const bool g3 = v.render(conv::render_session(three, v).ids) == slurp(golden / "three_turns.txt");

  // Dataset built from a real tokenizer over a synthetic corpus.
  ensure_tokenizers();
  const auto sk = motion::Skeleton::toy5();
  const auto& tk = tokenizers().front().model;
  const auto clips = conv::encode_corpus(tk, sk, motion::synth_corpus(9, 150, sk));
  const vocab::UnifiedVocab uv(vocab::train_text_vocab(service::vocab_training_text(motion::synth_corpus(9, 150, sk),
                                                                                     conv::default_system_message()),
                                                       512),
                               tk.config().layers, tk.config().codebook_size);
  conv::DatasetConfig dc;
  dc.size = 600;
  dc.seed = 21;
  const auto data = conv::build_dataset(clips, conv::default_templates(), uv, dc);
  int max_turns = 0;
  for (const auto& s : data) max_turns = std::max(max_turns, s.turns);
  fs::create_directories(work);
  conv::write_jsonl(work / "ds_a.jsonl", data);
  conv::write_jsonl(work / "ds_b.jsonl", conv::build_dataset(clips, conv::default_templates(), uv, dc));
  const bool same = slurp(work / "ds_a.jsonl") == slurp(work / "ds_b.jsonl");
  return {g1 && g3 && max_turns <= 10 && same,
          fmt("golden single %s, golden three-turn %s; %zu sessions, max %d turns; rebuild %s", g1 ? "exact" : "DIFFERS",
              g3 ? "exact" : "DIFFERS", data.size(), max_turns, same ? "byte-identical" : "differs")};
}

// ---- 10 -----------------------------------------------------------------------------

struct E2eRun {
  service::AppConfig cfg;
  double lm_seconds = 0;
  service::CapabilityReport report;
};

std::vector<E2eRun>& e2e_runs() {
  static std::vector<E2eRun> r;
  return r;
}

Outcome end_to_end(const fs::path& work) {
  const auto t0 = Clock::now();
  double worst_cpu = 0;
  int passed = 0;
  std::string per;
  e2e_runs().clear();
  for (auto seed : kSeeds) {
    auto cfg = service::load_config(MTALK_TOY_CONFIG);
    cfg.seed = seed;
    cfg.paths.work_dir = work / ("e2e_seed" + std::to_string(seed));
    cfg.finalize();
    fs::remove_all(cfg.paths.work_dir);
    service::gen_corpus(cfg);
    service::train_tokenizer_stage(cfg);
    service::build_data(cfg);
    const std::clock_t c0 = std::clock();
    const auto lm = service::train_lm_stage(cfg);
    const double cpu = double(std::clock() - c0) / CLOCKS_PER_SEC;
    const auto engine = service::Engine::load(cfg);
    const auto rep = service::probe_capability(cfg, engine);
    worst_cpu = std::max(worst_cpu, cpu);
    passed += rep.passed();
    per += fmt("%sseed %llu: walk %.2f+-%.2f stand %.2f+-%.2f m/s, sep %.1f sd, R@1 %.3f, motion %d/%d (LM %.0f CPU s)",
               per.empty() ? "" : "; ", static_cast<unsigned long long>(seed), rep.walk_speed, rep.walk_std,
               rep.stand_speed, rep.stand_std, rep.separation, rep.r1, rep.motion_answers, rep.prompts, cpu);
    e2e_runs().push_back({cfg, cpu, rep});
  }
  // "~30 min" per training run, read with a 20% allowance.
  const bool in_budget = worst_cpu <= 36 * 60;
  return {passed == 3 && in_budget,
          fmt("%d/3 seeds (sep >= 3 sd, R@1 >= 5/32, >= 90%% motion answers); ", passed) + per +
              fmt("; LM training max %.1f CPU-min per seed (budget ~30), %.1f min wall overall", worst_cpu / 60,
                  seconds_since(t0) / 60)};
}

// ---- 11 -----------------------------------------------------------------------------

Outcome fps_harness_check() {
  // Mocked clock: 5 timesteps per call, one second per call.
  double now = 0;
  const auto mocked = metrics::fps_harness([&] { now += 1.0; return 5; }, 4, 3, [&] { return now; });
  const bool mock_ok = mocked.frames == 60 && std::abs(mocked.fps - 20.0) < 1e-12;

  if (e2e_runs().empty())
    return {false, fmt("mocked clock %.1f fps (%lld frames); no trained model available for the live run", mocked.fps,
                       static_cast<long long>(mocked.frames))};
  const auto& run = e2e_runs().front();
  const auto engine = service::Engine::load(run.cfg);
  std::vector<std::string> captions;
  for (const auto& c : motion::load_corpus(run.cfg.paths.heldout_dir())) captions.push_back(c.caption);
  const auto live = service::measure_fps(engine, run.cfg.data.dataset.system_message, captions, 5);
  const int l = engine.tokenizer().config().downsample;
  const bool ok = mock_ok && std::isfinite(live.fps) && live.fps > 0 && live.frames % l == 0;
  return {ok, fmt("mocked clock %.1f fps (%lld frames); live batch-1 %.1f fps, %lld frames in %.2f s (l = %d)",
                  mocked.fps, static_cast<long long>(mocked.frames), live.fps, static_cast<long long>(live.frames),
                  live.seconds, l)};
}

// ---- 12 -----------------------------------------------------------------------------

Outcome perceiver_parity() {
  vision::VisualEncoderConfig c;
  c.arch = vision::Arch::perceiver;
  c.feature_dim = 1024;
  c.model_dim = 768;  // perceiver defaults: 1024 media, 8 x 64 inner, ff x4, 768 out
  std::map<std::string, ad::Shape> s;
  for (const auto& [n, sh] : vision::perceiver_shapes(c.perceiver)) s[n] = sh;
  bool shapes = c.perceiver.depth == 6 && c.perceiver.queries == 16 && !s.count("perceiver.layer6.to_q");
  for (int i = 0; i < c.perceiver.depth; ++i) {
    const auto p = "perceiver.layer" + std::to_string(i) + ".";
    shapes &= s.count(p + "to_q") && s.at(p + "to_q") == ad::Shape{1024, 512};
    shapes &= s.count(p + "to_kv") && s.at(p + "to_kv") == ad::Shape{1024, 1024};
    shapes &= s.count(p + "to_out") && s.at(p + "to_out") == ad::Shape{512, 1024};
    shapes &= s.count(p + "ff.w1") && s.at(p + "ff.w1") == ad::Shape{1024, 4096};
    shapes &= s.count(p + "ff.w2") && s.at(p + "ff.w2") == ad::Shape{4096, 1024};
  }
  shapes &= s.count("perceiver.proj.w") && s.at("perceiver.proj.w") == ad::Shape{1024, 768};

  vision::VisualEncoder enc(c, 12);
  Rng rng = make_rng(12);
  std::string lens;
  bool rows_ok = true;
  for (int t : {1, 17}) {
    vision::VisualFeature f;
    f.rows = ad::Tensor<float>({t, 1024});
    for (auto& v : f.rows.data) v = static_cast<float>(normal(rng));
    const auto out = enc.encode(f);
    rows_ok &= out.rows() == c.perceiver.queries && out.cols() == 768;
    lens += fmt("%sT=%d -> %dx%d", lens.empty() ? "" : ", ", t, out.rows(), out.cols());
  }
  return {shapes && rows_ok, fmt("layer shapes %s; ", shapes ? "match 1024/512/4096/768" : "DIFFER") + lens};
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_memory();
  std::set<int> only;
  fs::path work = fs::temp_directory_path() / "mtalk_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string x; std::getline(ss, x, ',');) only.insert(std::stoi(x));
    } else if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only 1,2,...] [--work DIR]\n");
      return 2;
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"quantizer oracle", quantizer_oracle},
      {"gradient suite", gradient_suite},
      {"token arithmetic", token_arithmetic},
      {"tokenizer learning", tokenizer_learning},
      {"composition ordering", composition_ordering},
      {"residual monotonicity", residual_monotonicity},
      {"metric fixtures", metric_fixtures},
      {"LM contracts", lm_contracts},
      {"conversation format", [&] { return conversation_format(work / "c9"); }},
      {"end-to-end toy capability", [&] { return end_to_end(work); }},
      {"FPS harness", fps_harness_check},
      {"perceiver shape parity", perceiver_parity},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}

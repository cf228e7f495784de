#include "mtalk/service/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>

#include "mtalk/common/error.hpp"
#include "mtalk/motion/io.hpp"

namespace mtalk::service {

using motion::MotionFeatures;
using nlohmann::json;

namespace {

void say(const Log& log, const std::string& s) {
  if (log) log(s);
}

std::vector<MotionFeatures> features_of(const motion::Skeleton& skel, const std::vector<motion::LabeledClip>& corpus) {
  std::vector<MotionFeatures> out;
  out.reserve(corpus.size());
  for (const auto& c : corpus) out.push_back(motion::extract_features(skel, c.clip));
  return out;
}

std::vector<std::string> captions_of(const std::vector<motion::LabeledClip>& corpus) {
  std::vector<std::string> out;
  for (const auto& c : corpus) out.push_back(c.caption);
  return out;
}

std::string fixed(double x, int digits = 3) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(digits);
  o << x;
  return o.str();
}

constexpr std::uint64_t kHeldoutStream = 0x4e1d;

}  // namespace

// ---- stages -------------------------------------------------------------------

void gen_corpus(const AppConfig& cfg, const Log& log) {
  const auto skel = cfg.make_skeleton();
  const auto train = motion::synth_corpus(cfg.seed, cfg.corpus.clips, skel, cfg.corpus.generator);
  motion::save_corpus(cfg.paths.corpus, skel, train);
  const auto held = motion::synth_corpus(derive_seed(cfg.seed, kHeldoutStream), cfg.corpus.heldout, skel,
                                         cfg.corpus.generator);
  motion::save_corpus(cfg.paths.heldout_dir(), skel, held);
  say(log, "corpus: " + std::to_string(train.size()) + " clips -> " + cfg.paths.corpus.string() + ", " +
               std::to_string(held.size()) + " held out -> " + cfg.paths.heldout_dir().string());
}

void train_tokenizer_stage(const AppConfig& cfg, const Log& log) {
  motion::Skeleton skel;
  const auto corpus = motion::load_corpus(cfg.paths.corpus, &skel);
  auto settings = cfg.tokenizer.train;
  settings.on_epoch = [&](int epoch, const tok::LossTerms& l) {
    say(log, "tokenizer epoch " + std::to_string(epoch + 1) + "/" + std::to_string(settings.epochs) +
                 " recon " + fixed(l.recon, 5) + " commit " + fixed(l.commit, 5));
  };
  const auto res = tok::train_tokenizer(features_of(skel, corpus), cfg.tokenizer.model, settings);
  fs::create_directories(cfg.paths.checkpoints);
  res.model.save(cfg.paths.tokenizer_ckpt());
  say(log, "tokenizer -> " + cfg.paths.tokenizer_ckpt().string() + " (" + std::to_string(res.reseeded_codes) +
               " dead codes reseeded)");
}

std::vector<std::string> vocab_training_text(const std::vector<motion::LabeledClip>& corpus,
                                             const std::string& system_message) {
  static const std::regex slot(R"(\[[a-z]+\])");
  std::vector<std::string> text{system_message, "USER: ", " ASSISTANT: ", "\n"};
  for (const auto& c : corpus) text.push_back(c.caption);
  for (const auto& t : conv::default_templates())
    for (const auto* list : {&t.prompts, &t.answers, &t.followups})
      for (const auto& s : *list) text.push_back(std::regex_replace(s, slot, ""));
  for (auto f : motion::all_families()) {
    for (int q = 0; q < 2; ++q) text.push_back(conv::reasoning_answer(f, q));
    for (auto g : motion::all_families())
      if (f != g)
        for (int v = 0; v < 3; ++v) text.push_back(conv::edit_instruction(f, g, v));
  }
  return text;
}

void build_data(const AppConfig& cfg, const Log& log) {
  motion::Skeleton skel;
  const auto corpus = motion::load_corpus(cfg.paths.corpus, &skel);
  const auto tk = tok::MotionTokenizer::load(cfg.paths.tokenizer_ckpt());
  auto text = vocab::train_text_vocab(vocab_training_text(corpus, cfg.data.dataset.system_message), cfg.data.text_vocab);
  const vocab::UnifiedVocab v(text, tk.config().layers, tk.config().codebook_size);
  fs::create_directories(cfg.paths.checkpoints);
  v.save(cfg.paths.vocab_file());

  const auto clips = conv::encode_corpus(tk, skel, corpus);
  const auto data = conv::build_dataset(clips, conv::default_templates(), v, cfg.data.dataset);
  fs::create_directories(cfg.paths.data);
  conv::write_jsonl(cfg.paths.dataset_file(), data);

  metrics::EvaluatorConfig ec;
  ec.embed_dim = cfg.eval.evaluator_dim;
  ec.seed = cfg.seed;
  ec.ridge = cfg.eval.evaluator_ridge;
  const auto ev = metrics::Evaluator::fit(features_of(skel, corpus), captions_of(corpus), v.text(), ec);
  motion::write_json_file(cfg.paths.evaluator_file(), ev.to_json());
  say(log, "vocab " + std::to_string(v.size()) + " ids, " + std::to_string(data.size()) + " samples -> " +
               cfg.paths.dataset_file().string());
}

LmStageResult train_lm_stage(const AppConfig& cfg, const Log& log) {
  const auto t0 = std::chrono::steady_clock::now();
  motion::Skeleton skel;
  const auto corpus = motion::load_corpus(cfg.paths.corpus, &skel);
  const auto v = vocab::UnifiedVocab::load(cfg.paths.vocab_file());
  const auto data = conv::read_jsonl(cfg.paths.dataset_file());

  auto mc = cfg.lm.model;
  mc.vocab = v.size();
  mc.img_id = v.img();
  lm::LanguageModel model(mc, cfg.seed);

  std::optional<vision::VisualEncoder> enc;
  std::map<int, vision::VisualFeature> images;
  lm::VisualHook hook;
  if (cfg.vision.enabled) {
    vision::VisualEncoderConfig vc;
    vc.arch = cfg.vision.arch;
    vc.feature_dim = vision::GridSpec{}.feature_dim();
    vc.model_dim = mc.dim;
    vc.perceiver.media_dim = vc.feature_dim;
    vc.perceiver.out_dim = mc.dim;
    enc.emplace(vc, derive_seed(cfg.seed, 0x7615));
    for (const auto& s : data) {
      if (s.visual_clip < 0 || images.count(s.visual_clip)) continue;
      if (s.visual_clip >= static_cast<int>(corpus.size()))
        throw FormatError("dataset refers to clip " + std::to_string(s.visual_clip) + " outside the corpus");
      images[s.visual_clip] =
          vision::clip_image_features(motion::forward_kinematics(skel, corpus[static_cast<std::size_t>(s.visual_clip)].clip));
    }
    hook.params = &enc->params();
    hook.build = [&](ad::Tape<float>& t, int clip, bool trainable) { return enc->build(t, images.at(clip), trainable); };
  }

  LmStageResult out;
  auto run = [&](lm::Stage stage, int steps, std::vector<double>& losses) {
    if (steps <= 0) return;
    lm::LmTrainSettings s;
    s.stage = stage;
    s.steps = steps;
    s.batch = cfg.lm.batch;
    s.lr = cfg.lm.lr;
    s.min_lr = cfg.lm.min_lr;
    s.weight_decay = cfg.lm.weight_decay;
    s.grad_clip = cfg.lm.grad_clip;
    s.seed = derive_seed(cfg.seed, stage == lm::Stage::pretrain ? 1 : 2);
    s.visual = hook;
    const std::string name = stage == lm::Stage::pretrain ? "pretrain" : "instruct";
    s.on_step = [&](int step, double loss) {
      if ((step + 1) % 25 == 0 || step + 1 == steps)
        say(log, name + " step " + std::to_string(step + 1) + "/" + std::to_string(steps) + " loss " + fixed(loss, 4));
    };
    losses = lm::train_lm(model, data, s).losses;
  };

  fs::create_directories(cfg.paths.checkpoints);
  run(lm::Stage::pretrain, cfg.lm.pretrain_steps, out.pretrain_losses);
  model.save(cfg.paths.lm_pretrain_ckpt(), cfg.lm.pretrain_steps);
  run(lm::Stage::instruct, cfg.lm.instruct_steps, out.instruct_losses);
  model.save(cfg.paths.lm_ckpt(), cfg.lm.pretrain_steps + cfg.lm.instruct_steps);
  if (enc) {
    ad::save_checkpoint(cfg.paths.visual_ckpt(), enc->to_checkpoint());
  } else if (fs::exists(cfg.paths.visual_ckpt())) {
    fs::remove(cfg.paths.visual_ckpt());
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  say(log, "language model -> " + cfg.paths.lm_ckpt().string() + " in " + fixed(out.seconds, 1) + " s");
  return out;
}

// ---- generation helpers ------------------------------------------------------------

std::string t2m_prompt(const std::string& caption) { return "Create a motion that shows " + caption + "."; }

std::vector<int> m2t_prompt_ids(const tok::MotionTokens& m, const vocab::UnifiedVocab& v) {
  conv::SlotValues slots;
  slots.motion = &m;
  return conv::fill_pattern("What is happening in [motion]?", slots, v);
}

std::optional<MotionFeatures> generate_motion(const Engine& e, const std::string& system_message,
                                              const std::string& caption, std::uint64_t seed) {
  conv::Session history;
  history.system_message = system_message;
  const auto a = e.respond(history, t2m_prompt(caption), nullptr, seed);
  if (a.motions.empty()) return std::nullopt;
  return e.tokenizer().decode(a.motions.front());
}

double planar_root_speed(const MotionFeatures& f, double fps) {
  if (f.frames < 1) throw InvalidArgument("planar_root_speed: empty clip");
  double sum = 0;
  for (int t = 0; t < f.frames; ++t)
    sum += std::hypot(f.at(t, motion::FeatureLayout::root_vel_x), f.at(t, motion::FeatureLayout::root_vel_z));
  return sum / f.frames * fps;
}

// ---- evaluation -----------------------------------------------------------------

namespace {

struct Heldout {
  motion::Skeleton skel;
  std::vector<motion::LabeledClip> clips;
  std::vector<MotionFeatures> feats;
};

Heldout load_heldout(const AppConfig& cfg, int limit) {
  Heldout h;
  h.clips = motion::load_corpus(cfg.paths.heldout_dir(), &h.skel);
  if (limit > 0 && static_cast<int>(h.clips.size()) > limit) h.clips.resize(static_cast<std::size_t>(limit));
  h.feats = features_of(h.skel, h.clips);
  return h;
}

metrics::Evaluator load_evaluator(const fs::path& p) { return metrics::Evaluator::from_json(motion::read_json_file(p)); }

std::vector<std::vector<double>> embed_generated(const metrics::Evaluator& ev,
                                                 const std::vector<std::optional<MotionFeatures>>& gen) {
  std::vector<std::vector<double>> out;
  // A prompt answered without motion gets the origin of the embedding space,
  // which is where an average clip lands; it rarely ranks first.
  for (const auto& g : gen) out.push_back(g ? ev.embed_motion(*g) : std::vector<double>(ev.dim(), 0.0));
  return out;
}

}  // namespace

metrics::MetricReport evaluate_model(const AppConfig& cfg, const Log& log) {
  const auto engine = Engine::load(cfg);
  auto sampling = cfg.decoding;
  sampling.mode = lm::DecodingParams::Mode::top_k;
  const auto sampler = Engine::load(cfg, sampling);
  const auto ev = load_evaluator(cfg.paths.evaluator_file());
  const auto held = load_heldout(cfg, cfg.eval.prompts);
  const auto& sys = cfg.data.dataset.system_message;
  const int n = static_cast<int>(held.clips.size());
  if (n < 2) throw InvalidArgument("evaluation needs at least two held-out clips");

  std::vector<std::vector<double>> real, text;
  for (int i = 0; i < n; ++i) {
    real.push_back(ev.embed_motion(held.feats[static_cast<std::size_t>(i)]));
    text.push_back(ev.embed_text(held.clips[static_cast<std::size_t>(i)].caption));
  }
  const auto real_stats = metrics::GaussianStats::from_samples(real);

  std::map<std::string, std::vector<double>> runs;
  for (int r = 0; r < cfg.eval.runs; ++r) {
    const std::uint64_t seed = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(r));
    // Text to motion. Greedy answers are deterministic, so runs differ only in
    // the retrieval pools and diversity subsets.
    std::vector<std::optional<MotionFeatures>> gen;
    int motions = 0;
    for (int i = 0; i < n; ++i) {
      gen.push_back(generate_motion(engine, sys, held.clips[static_cast<std::size_t>(i)].caption, derive_seed(seed, i)));
      motions += gen.back().has_value();
    }
    const auto emb = embed_generated(ev, gen);
    std::vector<std::vector<double>> valid;
    for (int i = 0; i < n; ++i)
      if (gen[static_cast<std::size_t>(i)]) valid.push_back(emb[static_cast<std::size_t>(i)]);
    runs["t2m.motion_rate"].push_back(static_cast<double>(motions) / n);
    if (valid.size() >= 2) runs["t2m.fid"].push_back(metrics::fid(real_stats, metrics::GaussianStats::from_samples(valid)));
    const auto ret = metrics::retrieval_metrics(emb, text, seed);
    runs["t2m.r1"].push_back(ret.r1);
    runs["t2m.r2"].push_back(ret.r2);
    runs["t2m.r3"].push_back(ret.r3);
    runs["t2m.mm_dist"].push_back(ret.mm_dist);
    const auto real_ret = metrics::retrieval_metrics(real, text, seed);
    runs["real.r1"].push_back(real_ret.r1);
    runs["real.r3"].push_back(real_ret.r3);
    runs["real.mm_dist"].push_back(real_ret.mm_dist);
    const int subset = std::min(cfg.eval.div_subset, n);
    runs["real.div"].push_back(metrics::diversity(real, subset, seed));
    if (static_cast<int>(valid.size()) >= subset && subset >= 2) runs["t2m.div"].push_back(metrics::diversity(valid, subset, seed));

    // Multimodality from sampled (top-k) generations on a subset of prompts.
    std::vector<std::vector<std::vector<double>>> by_condition;
    for (int i = 0; i < std::min(n, 8); ++i) {
      std::vector<std::vector<double>> group;
      for (int g = 0; g < cfg.eval.mm_generations; ++g) {
        auto m = generate_motion(sampler, sys, held.clips[static_cast<std::size_t>(i)].caption,
                                 derive_seed(seed, 10000 + 100 * i + g));
        if (m) group.push_back(ev.embed_motion(*m));
      }
      if (group.size() >= 2) by_condition.push_back(std::move(group));
    }
    if (!by_condition.empty()) runs["t2m.mmodality"].push_back(metrics::multimodality(by_condition));

    // Motion to text on the tokenizer's encoding of each held-out clip.
    std::vector<std::string> cands;
    std::vector<std::vector<std::string>> refs;
    for (int i = 0; i < n; ++i) {
      conv::Session h;
      h.system_message = sys;
      const auto toks = engine.tokenizer().encode(held.feats[static_cast<std::size_t>(i)]);
      const auto a = engine.respond_ids(h, m2t_prompt_ids(toks, engine.vocab()), nullptr, derive_seed(seed, 50000 + i));
      cands.push_back(a.text);
      refs.push_back({held.clips[static_cast<std::size_t>(i)].caption});
    }
    const auto ling = metrics::linguistic(cands, refs);
    runs["m2t.bleu1"].push_back(ling.bleu1);
    runs["m2t.bleu4"].push_back(ling.bleu4);
    runs["m2t.rouge_l"].push_back(ling.rouge_l);
    runs["m2t.cider"].push_back(ling.cider);
    say(log, "eval run " + std::to_string(r + 1) + "/" + std::to_string(cfg.eval.runs) + ": R@1 " + fixed(ret.r1) +
                 ", motion answers " + std::to_string(motions) + "/" + std::to_string(n));
  }

  // Tokenizer reconstruction is deterministic; one pass.
  metrics::PoseErrors sum;
  for (int i = 0; i < n; ++i) {
    const auto& c = held.clips[static_cast<std::size_t>(i)];
    const auto& f = held.feats[static_cast<std::size_t>(i)];
    const auto rec = engine.tokenizer().decode(engine.tokenizer().encode(f));
    const auto e = metrics::mpjpe_family(motion::recover_positions(rec, motion::initial_root(c.clip)),
                                         motion::forward_kinematics(held.skel, c.clip));
    sum.mpjpe += e.mpjpe / n;
    sum.pa_mpjpe += e.pa_mpjpe / n;
    sum.accl += e.accl / n;
  }
  runs["tokenizer.mpjpe"].push_back(sum.mpjpe);
  runs["tokenizer.pa_mpjpe"].push_back(sum.pa_mpjpe);
  runs["tokenizer.accl"].push_back(sum.accl);

  metrics::MetricReport rep;
  for (const auto& [k, v] : runs) rep.add(k, v);
  return rep;
}

metrics::MetricReport evaluate_files(const FileEvalInputs& in) {
  if (in.runs < 1) throw InvalidArgument("runs must be at least 1");
  std::vector<std::string> names;
  for (const auto& f : fs::directory_iterator(in.predictions))
    if (f.path().extension() == ".json") names.push_back(f.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw InvalidArgument("no .json feature files in " + in.predictions.string());

  std::vector<MotionFeatures> pred, gt;
  for (const auto& n : names) {
    if (!fs::exists(in.ground_truth / n)) throw NotFound("ground truth has no " + n);
    pred.push_back(motion::features_from_json(motion::read_json_file(in.predictions / n)));
    gt.push_back(motion::features_from_json(motion::read_json_file(in.ground_truth / n)));
  }

  std::map<std::string, std::vector<double>> runs;
  metrics::PoseErrors pe;
  metrics::Displacement d;
  const double count = static_cast<double>(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (pred[i].frames != gt[i].frames || pred[i].n_joints != gt[i].n_joints)
      throw InvalidArgument(names[i] + ": prediction and ground truth differ in frames or joints");
    const auto p = motion::recover_positions(pred[i], {});
    const auto g = motion::recover_positions(gt[i], {});
    const auto e = metrics::mpjpe_family(p, g);
    const auto dd = metrics::ade_fde(p, g);
    pe.mpjpe += e.mpjpe / count;
    pe.pa_mpjpe += e.pa_mpjpe / count;
    pe.accl += e.accl / count;
    d.ade += dd.ade / count;
    d.fde += dd.fde / count;
  }
  runs["mpjpe"] = {pe.mpjpe};
  runs["pa_mpjpe"] = {pe.pa_mpjpe};
  runs["accl"] = {pe.accl};
  runs["ade"] = {d.ade};
  runs["fde"] = {d.fde};

  if (!in.evaluator.empty()) {
    const auto ev = load_evaluator(in.evaluator);
    std::vector<std::vector<double>> pe_emb, ge_emb;
    for (std::size_t i = 0; i < names.size(); ++i) {
      pe_emb.push_back(ev.embed_motion(pred[i]));
      ge_emb.push_back(ev.embed_motion(gt[i]));
    }
    if (names.size() >= 2)
      runs["fid"] = {metrics::fid(metrics::GaussianStats::from_samples(ge_emb), metrics::GaussianStats::from_samples(pe_emb))};
    std::vector<std::vector<double>> text;
    if (!in.captions.empty()) {
      const auto caps = motion::read_json_file(in.captions);
      for (const auto& n : names) {
        if (!caps.contains(n)) throw NotFound("captions file has no entry for " + n);
        text.push_back(ev.embed_text(caps[n].get<std::string>()));
      }
    }
    const int subset = std::min<int>(in.div_subset, static_cast<int>(names.size()));
    for (int r = 0; r < in.runs; ++r) {
      const auto seed = derive_seed(in.seed, static_cast<std::uint64_t>(r));
      if (subset >= 2) runs["div"].push_back(metrics::diversity(pe_emb, subset, seed));
      if (!text.empty()) {
        const auto ret = metrics::retrieval_metrics(pe_emb, text, seed);
        runs["r1"].push_back(ret.r1);
        runs["r2"].push_back(ret.r2);
        runs["r3"].push_back(ret.r3);
        runs["mm_dist"].push_back(ret.mm_dist);
      }
    }
  }
  metrics::MetricReport rep;
  for (const auto& [k, v] : runs) rep.add(k, v);
  return rep;
}

metrics::FpsResult measure_fps(const Engine& e, const std::string& system_message,
                               const std::vector<std::string>& captions, int runs, const metrics::Clock& clock) {
  if (captions.empty()) throw InvalidArgument("fps: no prompts");
  std::size_t next = 0;
  auto once = [&]() {
    conv::Session h;
    h.system_message = system_message;
    const auto& c = captions[next++ % captions.size()];
    const auto a = e.respond(h, t2m_prompt(c), nullptr, next);
    int steps = 0;
    for (const auto& m : a.motions) steps += m.length();
    // Decoding to joint positions is part of producing frames.
    for (const auto& m : a.motions) motion::recover_positions(e.tokenizer().decode(m), {});
    return steps;
  };
  return metrics::fps_harness(once, e.tokenizer().config().downsample, runs, clock);
}

// ---- capability probe ------------------------------------------------------------

bool CapabilityReport::passed(double min_separation, double min_r1, double min_motion_rate) const {
  return walk_prompts > 0 && stand_prompts > 0 && separation >= min_separation && r1 >= min_r1 &&
         motion_answers >= min_motion_rate * prompts;
}

CapabilityReport probe_capability(const AppConfig& cfg, const Engine& e, const Log& log) {
  const auto held = load_heldout(cfg, 0);
  const auto ev = load_evaluator(cfg.paths.evaluator_file());
  const auto& sys = cfg.data.dataset.system_message;
  CapabilityReport rep;
  std::vector<double> walk, stand;
  for (std::size_t i = 0; i < held.clips.size(); ++i) {
    const auto& c = held.clips[i];
    if (c.family != motion::MotionFamily::walk && c.family != motion::MotionFamily::stand) continue;
    const auto g = generate_motion(e, sys, c.caption, derive_seed(cfg.seed, 70000 + i));
    auto& bucket = c.family == motion::MotionFamily::walk ? walk : stand;
    (c.family == motion::MotionFamily::walk ? rep.walk_prompts : rep.stand_prompts)++;
    ++rep.prompts;
    if (!g) continue;
    ++rep.motion_answers;
    bucket.push_back(planar_root_speed(*g, e.fps()));
  }
  auto mean_std = [](const std::vector<double>& x, double& m, double& s) {
    m = s = 0;
    if (x.empty()) return;
    for (double v : x) m += v / x.size();
    for (double v : x) s += (v - m) * (v - m);
    s = x.size() > 1 ? std::sqrt(s / (x.size() - 1)) : 0.0;
  };
  mean_std(walk, rep.walk_speed, rep.walk_std);
  mean_std(stand, rep.stand_speed, rep.stand_std);
  const double pooled = std::sqrt((rep.walk_std * rep.walk_std + rep.stand_std * rep.stand_std) / 2);
  const double gap = rep.walk_speed - rep.stand_speed;
  rep.separation = walk.empty() || stand.empty() ? 0.0 : (pooled > 0 ? gap / pooled : (gap > 0 ? 1e9 : 0.0));

  // Retrieval over every held-out clip; a 64-prompt estimate swings by about +-0.05.
  const int n = static_cast<int>(held.clips.size());
  std::vector<std::optional<MotionFeatures>> gen;
  std::vector<std::vector<double>> text;
  for (int i = 0; i < n; ++i) {
    const auto& c = held.clips[static_cast<std::size_t>(i)];
    gen.push_back(generate_motion(e, sys, c.caption, derive_seed(cfg.seed, 90000 + i)));
    text.push_back(ev.embed_text(c.caption));
    ++rep.prompts;
    rep.motion_answers += gen.back().has_value();
  }
  rep.r1 = metrics::retrieval_metrics(embed_generated(ev, gen), text, cfg.seed).r1;
  say(log, "capability: walk " + fixed(rep.walk_speed) + "+-" + fixed(rep.walk_std) + " m/s, stand " +
               fixed(rep.stand_speed) + "+-" + fixed(rep.stand_std) + " m/s, separation " + fixed(rep.separation, 2) +
               ", R@1 " + fixed(rep.r1) + ", motion answers " + std::to_string(rep.motion_answers) + "/" +
               std::to_string(rep.prompts));
  return rep;
}

}  // namespace mtalk::service

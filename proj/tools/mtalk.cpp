#include <csignal>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtalk/common/alloc.hpp"
#include "mtalk/common/error.hpp"
#include "mtalk/motion/io.hpp"
#include "mtalk/service/chat.hpp"
#include "mtalk/service/config.hpp"
#include "mtalk/service/engine.hpp"
#include "mtalk/service/pipeline.hpp"

#include <httplib.h>

using namespace mtalk;
using namespace mtalk::service;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  AppConfig load() const {
    AppConfig cfg = config.empty() ? AppConfig{} : load_config(config);
    if (seed) cfg.seed = *seed;
    for (const auto& o : overrides) apply_override(cfg, o);
    cfg.finalize();
    return cfg;
  }
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void print_report(const metrics::MetricReport& r) {
  for (const auto& [k, v] : r.values) {
    std::printf("%-22s %12.4f", k.c_str(), v.value);
    if (v.runs > 1) std::printf("  +- %.4f (%d runs)", v.ci95, v.runs);
    std::printf("\n");
  }
}

void write_or_print(const std::string& out, const json& j) {
  if (out.empty()) {
    std::cout << j.dump(2) << std::endl;
  } else {
    motion::write_json_file(out, j);
    log_line("wrote " + out);
  }
}

std::vector<std::string> heldout_captions(const AppConfig& cfg) {
  std::vector<std::string> caps;
  for (const auto& c : motion::load_corpus(cfg.paths.heldout_dir())) caps.push_back(c.caption);
  return caps;
}

void chat_repl(const AppConfig& cfg) {
  const auto engine = std::make_shared<const Engine>(Engine::load(cfg));
  SessionStore store;
  ChatService chat(engine, store, cfg.seed);
  std::string id = chat.create_session({{"system_message", cfg.data.dataset.system_message}})["session_id"];
  std::cout << "session " << id << ". Commands: /motion [strategy] [file], /reset, /quit" << std::endl;
  for (std::string line; std::cout << "> " << std::flush, std::getline(std::cin, line);) {
    if (line.empty()) continue;
    try {
      if (line == "/quit") break;
      if (line == "/reset") {
        id = chat.create_session({{"system_message", cfg.data.dataset.system_message}})["session_id"];
        std::cout << "session " << id << std::endl;
        continue;
      }
      if (line.rfind("/motion", 0) == 0) {
        std::istringstream in(line.substr(7));
        std::string strategy = "joint", file;
        in >> strategy >> file;
        const auto m = chat.get_motion(id, strategy, 4);
        std::cout << m["frames"].size() << " frames, seams " << m["seams"].dump() << std::endl;
        if (!file.empty()) motion::write_json_file(file, m);
        continue;
      }
      const auto r = chat.post_turn(id, {{"text", line}});
      if (r["answer_kind"] == "motion")
        std::cout << "[motion: " << r["motion_frames"].get<int>() << " frames]";
      const auto text = r["text"].get<std::string>();
      if (!text.empty()) std::cout << (r["answer_kind"] == "motion" ? " " : "") << text;
      std::cout << std::endl;
    } catch (const std::exception& e) {
      std::cout << "error: " << e.what() << std::endl;
    }
  }
}

httplib::Server* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_memory();
  CLI::App app{"Motion and language chat model: data, training, evaluation and serving"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("-c,--config", common.config, "Config file (key = value with [sections])")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "Override the global seed");
  app.add_option("--set", common.overrides, "Override a config key, e.g. --set lm.dim=64")->allow_extra_args(false);

  auto* gen = app.add_subcommand("gen-corpus", "Synthesize the training and held-out motion corpora");
  auto* ttok = app.add_subcommand("train-tokenizer", "Train the motion tokenizer on the corpus");
  auto* data = app.add_subcommand("build-data", "Train the text vocabulary, build the dataset, fit the evaluator");
  auto* tlm = app.add_subcommand("train-lm", "Train the language model (pretrain, then instruct)");
  auto* all = app.add_subcommand("pipeline", "Run gen-corpus through train-lm");
  auto* dump = app.add_subcommand("show-config", "Print the effective configuration");

  auto* chat = app.add_subcommand("chat", "Interactive chat on stdin");

  std::string tok_clip, tok_out, tok_ckpt;
  auto* tokz = app.add_subcommand("tokenize", "Encode a clip file into a .tokens file");
  tokz->add_option("clip", tok_clip, "Clip JSON (as written in a corpus directory)")->required()->check(CLI::ExistingFile);
  tokz->add_option("-o,--out", tok_out, "Output .tokens file")->required();
  tokz->add_option("--ckpt", tok_ckpt, "Tokenizer checkpoint (default from config)");

  std::string strategy = "joint", comp_out, comp_ckpt;
  int window = 4;
  std::vector<std::string> segments;
  auto* compose = app.add_subcommand("compose", "Decode token segments into one clip");
  compose->add_option("--strategy", strategy, "independent, past or joint")->check(CLI::IsMember({"independent", "past", "joint"}));
  compose->add_option("--window", window, "Past-condition window in tokens")->check(CLI::PositiveNumber);
  compose->add_option("--segments", segments, ".tokens files in order")->required()->check(CLI::ExistingFile);
  compose->add_option("--ckpt", comp_ckpt, "Tokenizer checkpoint (default from config)");
  compose->add_option("-o,--out", comp_out, "Output JSON (stdout if omitted)");

  std::string mode = "model", eval_out;
  FileEvalInputs files;
  auto* eval = app.add_subcommand("eval", "Evaluate the trained model or prediction files");
  eval->add_option("--mode", mode, "model or files")->check(CLI::IsMember({"model", "files"}));
  eval->add_option("--pred", files.predictions, "Directory of predicted feature JSON files");
  eval->add_option("--gt", files.ground_truth, "Directory of ground-truth feature JSON files");
  eval->add_option("--captions", files.captions, "JSON object mapping file name to caption");
  eval->add_option("--evaluator", files.evaluator, "Evaluator JSON (enables FID, R-precision, diversity)");
  eval->add_option("--runs", files.runs, "Repetitions for seeded metrics")->check(CLI::PositiveNumber);
  eval->add_option("-o,--out", eval_out, "Write the report as JSON");

  int fps_runs = 5;
  auto* fps = app.add_subcommand("fps", "Measure batch-size-one text-to-motion generation speed");
  fps->add_option("--runs", fps_runs, "Timed runs")->check(CLI::PositiveNumber);

  auto* probe = app.add_subcommand("probe", "Walk versus stand speed separation and retrieval on held-out prompts");

  std::string host;
  int port = -1;
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
  serve->add_option("--host", host, "Bind address (default from config)");
  serve->add_option("--port", port, "Port (default from config)")->check(CLI::Range(0, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\nRun with --help for usage." << std::endl;
    return 2;
  }

  // A bad config or override is a usage error.
  AppConfig cfg;
  try {
    cfg = common.load();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\nRun with --help for usage." << std::endl;
    return 2;
  }

  try {
    if (*dump) std::cout << config_to_text(cfg);
    if (*gen || *all) gen_corpus(cfg, log_line);
    if (*ttok || *all) train_tokenizer_stage(cfg, log_line);
    if (*data || *all) build_data(cfg, log_line);
    if (*tlm || *all) train_lm_stage(cfg, log_line);
    if (*chat) chat_repl(cfg);

    if (*tokz) {
      motion::Skeleton skel;
      const auto clip = motion::clip_from_json(motion::read_json_file(tok_clip), &skel);
      const auto tk = tok::MotionTokenizer::load(tok_ckpt.empty() ? cfg.paths.tokenizer_ckpt() : fs::path(tok_ckpt));
      motion::write_json_file(tok_out, tok::tokens_to_json(tk.encode(motion::extract_features(skel, clip))));
    }

    if (*compose) {
      const auto tk = tok::MotionTokenizer::load(comp_ckpt.empty() ? cfg.paths.tokenizer_ckpt() : fs::path(comp_ckpt));
      std::vector<tok::MotionTokens> segs;
      for (const auto& s : segments) segs.push_back(tok::tokens_from_json(motion::read_json_file(s)));
      const auto s = comp::parse_strategy(strategy, window);
      ComposedMotion m;
      m.fps = cfg.corpus.generator.fps;
      m.strategy = s;
      m.features = comp::compose(tk, segs, s);
      m.positions = motion::recover_positions(m.features, {});
      m.seams = comp::seam_frames(segs, tk.config().downsample);
      m.parents = cfg.make_skeleton().parents;
      if (static_cast<int>(m.parents.size()) != tk.config().n_joints)
        throw InvalidArgument("tokenizer joint count does not match the configured skeleton");
      write_or_print(comp_out, m.to_json());
    }

    if (*eval) {
      metrics::MetricReport rep;
      if (mode == "model") {
        rep = evaluate_model(cfg, log_line);
      } else {
        if (files.predictions.empty() || files.ground_truth.empty())
          throw InvalidArgument("--mode files needs --pred and --gt");
        files.seed = cfg.seed;
        files.div_subset = cfg.eval.div_subset;
        rep = evaluate_files(files);
      }
      print_report(rep);
      if (!eval_out.empty()) motion::write_json_file(eval_out, rep.to_json());
    }

    if (*fps) {
      const auto engine = Engine::load(cfg);
      const auto r = measure_fps(engine, cfg.data.dataset.system_message, heldout_captions(cfg), fps_runs);
      std::printf("fps %.1f (%lld frames in %.2f s over %d runs)\n", r.fps, static_cast<long long>(r.frames), r.seconds,
                  fps_runs);
    }

    if (*probe) {
      const auto engine = Engine::load(cfg);
      const auto r = probe_capability(cfg, engine, log_line);
      std::printf("%s\n", r.passed() ? "probe: pass" : "probe: fail");
    }

    if (*serve) {
      const auto engine = std::make_shared<const Engine>(Engine::load(cfg));
      SessionStore store(cfg.paths.sessions, cfg.seed);
      ChatService chat_service(engine, store, cfg.seed);
      httplib::Server server;
      register_routes(server, chat_service);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const auto h = host.empty() ? cfg.service.host : host;
      const int p = port >= 0 ? port : cfg.service.port;
      log_line("listening on http://" + h + ":" + std::to_string(p) + " (" + std::to_string(store.ids().size()) +
               " sessions recovered)");
      if (!server.listen(h, p)) throw std::runtime_error("cannot listen on " + h + ":" + std::to_string(p));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}

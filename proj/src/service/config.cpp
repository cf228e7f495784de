#include "mtalk/service/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "mtalk/common/error.hpp"

namespace mtalk::service {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw FormatError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

// from_chars for double is available in libstdc++ 11.
double parse_double(const std::string& key, const std::string& v) { return parse_number<double>(key, v); }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw FormatError("config: '" + key + "' expects true or false, got '" + v + "'");
}

// Shortest text that parses back to the same double.
std::string fmt_double(double d) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, r.ptr);
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

struct Field {
  std::string key;
  std::function<void(AppConfig&, const std::string&)> set;
  std::function<std::string(const AppConfig&)> get;
};

template <class T, class Access>
Field field(std::string key, Access access) {
  Field f;
  f.key = key;
  f.set = [key, access](AppConfig& c, const std::string& v) {
    T& ref = access(c);
    if constexpr (std::is_same_v<T, bool>) ref = parse_bool(key, v);
    else if constexpr (std::is_same_v<T, double>) ref = parse_double(key, v);
    else if constexpr (std::is_same_v<T, std::string>) ref = v;
    else if constexpr (std::is_same_v<T, fs::path>) ref = fs::path(v);
    else ref = parse_number<T>(key, v);
  };
  f.get = [access](const AppConfig& c) {
    const T& ref = access(const_cast<AppConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) return std::string(ref ? "true" : "false");
    else if constexpr (std::is_same_v<T, double>) return fmt_double(ref);
    else if constexpr (std::is_same_v<T, std::string>) return quote(ref);
    else if constexpr (std::is_same_v<T, fs::path>) return quote(ref.string());
    else return std::to_string(ref);
  };
  return f;
}

#define MT_FIELD(T, key, expr) field<T>(key, [](AppConfig& c) -> T& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v{
        MT_FIELD(std::uint64_t, "seed", c.seed),
        MT_FIELD(std::string, "skeleton", c.skeleton),
        MT_FIELD(fs::path, "paths.work_dir", c.paths.work_dir),
        MT_FIELD(fs::path, "paths.corpus", c.paths.corpus),
        MT_FIELD(fs::path, "paths.checkpoints", c.paths.checkpoints),
        MT_FIELD(fs::path, "paths.data", c.paths.data),
        MT_FIELD(fs::path, "paths.sessions", c.paths.sessions),
        MT_FIELD(int, "corpus.clips", c.corpus.clips),
        MT_FIELD(int, "corpus.heldout", c.corpus.heldout),
        MT_FIELD(double, "corpus.fps", c.corpus.generator.fps),
        MT_FIELD(int, "corpus.min_frames", c.corpus.generator.min_frames),
        MT_FIELD(int, "corpus.max_frames", c.corpus.generator.max_frames),
        MT_FIELD(double, "corpus.sibling_rate", c.corpus.generator.sibling_rate),
        MT_FIELD(int, "tokenizer.codebook_size", c.tokenizer.model.codebook_size),
        MT_FIELD(int, "tokenizer.code_dim", c.tokenizer.model.code_dim),
        MT_FIELD(int, "tokenizer.layers", c.tokenizer.model.layers),
        MT_FIELD(int, "tokenizer.downsample", c.tokenizer.model.downsample),
        MT_FIELD(int, "tokenizer.width", c.tokenizer.model.width),
        MT_FIELD(double, "tokenizer.beta_commit", c.tokenizer.model.beta_commit),
        MT_FIELD(double, "tokenizer.root_velocity_weight", c.tokenizer.model.root_velocity_weight),
        MT_FIELD(int, "tokenizer.epochs", c.tokenizer.train.epochs),
        MT_FIELD(int, "tokenizer.batch", c.tokenizer.train.batch),
        MT_FIELD(double, "tokenizer.lr", c.tokenizer.train.lr),
        MT_FIELD(double, "tokenizer.min_lr", c.tokenizer.train.min_lr),
        MT_FIELD(int, "data.text_vocab", c.data.text_vocab),
        MT_FIELD(int, "data.size", c.data.dataset.size),
        MT_FIELD(int, "data.max_turns", c.data.dataset.max_turns),
        MT_FIELD(int, "data.max_tokens", c.data.dataset.max_tokens),
        MT_FIELD(double, "data.multi_turn_rate", c.data.dataset.multi_turn_rate),
        MT_FIELD(std::string, "data.system_message", c.data.dataset.system_message),
        MT_FIELD(double, "data.high_similarity", c.data.dataset.similarity.tau_high),
        MT_FIELD(double, "data.medium_similarity", c.data.dataset.similarity.tau_low),
        MT_FIELD(int, "lm.layers", c.lm.model.layers),
        MT_FIELD(int, "lm.heads", c.lm.model.heads),
        MT_FIELD(int, "lm.dim", c.lm.model.dim),
        MT_FIELD(int, "lm.ff", c.lm.model.ff),
        MT_FIELD(int, "lm.context", c.lm.model.context),
        MT_FIELD(double, "lm.dropout", c.lm.model.dropout),
        MT_FIELD(int, "lm.pretrain_steps", c.lm.pretrain_steps),
        MT_FIELD(int, "lm.instruct_steps", c.lm.instruct_steps),
        MT_FIELD(int, "lm.batch", c.lm.batch),
        MT_FIELD(double, "lm.lr", c.lm.lr),
        MT_FIELD(double, "lm.min_lr", c.lm.min_lr),
        MT_FIELD(double, "lm.weight_decay", c.lm.weight_decay),
        MT_FIELD(double, "lm.grad_clip", c.lm.grad_clip),
        MT_FIELD(bool, "vision.enabled", c.vision.enabled),
        MT_FIELD(int, "decoding.k", c.decoding.k),
        MT_FIELD(double, "decoding.temperature", c.decoding.temperature),
        MT_FIELD(int, "decoding.max_new_tokens", c.decoding.max_new_tokens),
        MT_FIELD(int, "eval.runs", c.eval.runs),
        MT_FIELD(int, "eval.prompts", c.eval.prompts),
        MT_FIELD(int, "eval.evaluator_dim", c.eval.evaluator_dim),
        MT_FIELD(double, "eval.evaluator_ridge", c.eval.evaluator_ridge),
        MT_FIELD(int, "eval.div_subset", c.eval.div_subset),
        MT_FIELD(int, "eval.mm_generations", c.eval.mm_generations),
        MT_FIELD(std::string, "service.host", c.service.host),
        MT_FIELD(int, "service.port", c.service.port),
    };
    Field arch;
    arch.key = "vision.arch";
    arch.set = [](AppConfig& c, const std::string& s) { c.vision.arch = vision::parse_arch(s); };
    arch.get = [](const AppConfig& c) { return quote(vision::arch_name(c.vision.arch)); };
    auto at = [&v](const char* key) {
      return std::find_if(v.begin(), v.end(), [key](const Field& f) { return f.key == key; });
    };
    v.insert(at("vision.enabled") + 1, arch);
    Field mode;
    mode.key = "decoding.mode";
    mode.set = [](AppConfig& c, const std::string& s) {
      if (s == "greedy") c.decoding.mode = lm::DecodingParams::Mode::greedy;
      else if (s == "top_k") c.decoding.mode = lm::DecodingParams::Mode::top_k;
      else throw FormatError("config: decoding.mode must be greedy or top_k, got '" + s + "'");
    };
    mode.get = [](const AppConfig& c) {
      return quote(c.decoding.mode == lm::DecodingParams::Mode::greedy ? "greedy" : "top_k");
    };
    v.insert(at("decoding.k"), mode);
    return v;
  }();
  return f;
}

#undef MT_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw FormatError("config: unknown key '" + key + "'");
}

std::string unquote(const std::string& key, const std::string& v) {
  if (v.size() < 2 || v.front() != '"') return v;
  if (v.back() != '"') throw FormatError("config: unterminated string for '" + key + "'");
  std::string out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (v[i] == '\\' && i + 2 < v.size()) {
      ++i;
      out += v[i] == 'n' ? '\n' : v[i];
    } else {
      out += v[i];
    }
  }
  return out;
}

// Strips a trailing comment that is not inside quotes.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

}  // namespace

void AppConfig::finalize() {
  if (paths.corpus.empty()) paths.corpus = paths.work_dir / "corpus";
  if (paths.checkpoints.empty()) paths.checkpoints = paths.work_dir / "checkpoints";
  if (paths.data.empty()) paths.data = paths.work_dir / "data";
  if (paths.sessions.empty()) paths.sessions = paths.work_dir / "sessions";
  tokenizer.train.seed = seed;
  data.dataset.seed = seed;
  data.dataset.fps = corpus.generator.fps;
  corpus.generator.downsample = tokenizer.model.downsample;
  tokenizer.model.n_joints = make_skeleton().joint_count();
  if (data.dataset.max_tokens > lm.model.context) data.dataset.max_tokens = lm.model.context;
  validate();
}

void AppConfig::validate() const {
  make_skeleton();
  if (corpus.clips < 2) throw InvalidArgument("config: corpus.clips must be at least 2");
  if (corpus.heldout < 32) throw InvalidArgument("config: corpus.heldout must be at least 32 for retrieval");
  corpus.generator.validate();
  tokenizer.model.validate();
  if (data.text_vocab < vocab::TextVocab::kBaseSize) throw InvalidArgument("config: data.text_vocab must be at least 260");
  data.dataset.validate();
  if (lm.pretrain_steps < 0 || lm.instruct_steps < 0 || lm.batch < 1)
    throw InvalidArgument("config: lm steps must be >= 0 and batch >= 1");
  if (lm.model.layers < 1 || lm.model.heads < 1 || lm.model.dim % lm.model.heads != 0 || lm.model.context < 2)
    throw InvalidArgument("config: invalid lm shape");
  decoding.validate();
  if (eval.runs < 1 || eval.prompts < 32 || eval.evaluator_dim < 1 || eval.mm_generations < 2 || eval.div_subset < 1)
    throw InvalidArgument("config: invalid eval section");
  if (service.port < 0 || service.port > 65535) throw InvalidArgument("config: service.port out of range");
}

motion::Skeleton AppConfig::make_skeleton() const {
  if (skeleton == "toy5") return motion::Skeleton::toy5();
  if (skeleton == "humanoid22") return motion::Skeleton::humanoid22();
  throw InvalidArgument("config: skeleton must be toy5 or humanoid22, got '" + skeleton + "'");
}

AppConfig parse_config(const std::string& text) {
  AppConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw FormatError("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = (section.empty() ? "" : section + ".") + trim(line.substr(0, eq));
    find_field(key).set(cfg, unquote(key, trim(line.substr(eq + 1))));
  }
  return cfg;
}

AppConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw NotFound("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const AppConfig& cfg) {
  std::string out, section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += name + " = " + f.get(cfg) + "\n";
  }
  return out;
}

void apply_override(AppConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw FormatError("override '" + assignment + "' must look like section.key=value");
  const auto key = trim(assignment.substr(0, eq));
  find_field(key).set(cfg, unquote(key, trim(assignment.substr(eq + 1))));
}

}  // namespace mtalk::service

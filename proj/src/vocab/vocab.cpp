#include "mtalk/vocab/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "mtalk/common/error.hpp"

namespace mtalk::vocab {

namespace {

std::uint64_t pair_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

// Splits text into special literals and word chunks; a chunk is an optional
// run of spaces followed by non-space bytes, so merges never cross words.
struct Segment {
  std::string_view text;
  int special = -1;
};

std::vector<Segment> segment(std::string_view text) {
  static const std::pair<std::string_view, int> literals[] = {{"</s>", TextVocab::kEos}, {"<img>", TextVocab::kImg}};
  std::vector<Segment> out;
  std::size_t i = 0, chunk_start = 0;
  auto flush = [&](std::size_t end) {
    std::size_t s = chunk_start;
    while (s < end) {
      std::size_t e = s;
      while (e < end && text[e] == ' ') ++e;
      while (e < end && text[e] != ' ') ++e;
      out.push_back({text.substr(s, e - s), -1});
      s = e;
    }
  };
  while (i < text.size()) {
    bool matched = false;
    for (const auto& [lit, id] : literals) {
      if (text.compare(i, lit.size(), lit) == 0) {
        flush(i);
        out.push_back({text.substr(i, lit.size()), id});
        i += lit.size();
        chunk_start = i;
        matched = true;
        break;
      }
    }
    if (!matched) ++i;
  }
  flush(text.size());
  return out;
}

}  // namespace

const std::array<std::string, 4>& TextVocab::specials() {
  static const std::array<std::string, 4> s{"<pad>", "<unk>", "</s>", "<img>"};
  return s;
}

TextVocab::TextVocab(std::vector<std::pair<int, int>> merges) : merges_(std::move(merges)) { build_tables(); }

void TextVocab::build_tables() {
  pieces_.clear();
  rank_.clear();
  for (const auto& s : specials()) pieces_.push_back(s);
  for (int b = 0; b < 256; ++b) pieces_.push_back(std::string(1, static_cast<char>(b)));
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto [a, b] = merges_[r];
    const int id = kBaseSize + static_cast<int>(r);
    if (a < kByteBase || b < kByteBase || a >= id || b >= id)
      throw FormatError("text vocab: merge " + std::to_string(r) + " references an invalid id");
    pieces_.push_back(pieces_[a] + pieces_[b]);
    rank_.emplace(pair_key(a, b), static_cast<int>(r));
  }
}

const std::string& TextVocab::piece(int id) const {
  require(id >= 0 && id < size(), "text vocab: id " + std::to_string(id) + " out of range");
  return pieces_[id];
}

std::vector<int> TextVocab::encode_chunk(std::string_view chunk) const {
  std::vector<int> ids;
  ids.reserve(chunk.size());
  for (unsigned char c : chunk) ids.push_back(kByteBase + c);
  while (ids.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
      if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    const auto [a, b] = merges_[best_rank];
    std::vector<int> next;
    next.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && ids[i] == a && ids[i + 1] == b) {
        next.push_back(kBaseSize + best_rank);
        ++i;
      } else {
        next.push_back(ids[i]);
      }
    }
    ids.swap(next);
  }
  return ids;
}

std::vector<int> TextVocab::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& seg : segment(text)) {
    if (seg.special >= 0) {
      out.push_back(seg.special);
      continue;
    }
    const auto ids = encode_chunk(seg.text);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string TextVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) out += piece(id);
  return out;
}

TextVocab train_text_vocab(const std::vector<std::string>& corpus, int k_t) {
  require(!corpus.empty(), "train_text_vocab: empty corpus");
  require(k_t > TextVocab::kBaseSize, "train_text_vocab: K_t = " + std::to_string(k_t) + " must exceed the " +
                                          std::to_string(TextVocab::kBaseSize) + " byte and special ids");
  // Unique chunks with counts; std::map keeps iteration order independent of hashing.
  std::map<std::string, long long> counts;
  for (const auto& text : corpus)
    for (const auto& seg : segment(text))
      if (seg.special < 0 && !seg.text.empty()) ++counts[std::string(seg.text)];
  std::vector<std::vector<int>> words;
  std::vector<long long> freq;
  for (const auto& [w, c] : counts) {
    std::vector<int> ids;
    for (unsigned char ch : w) ids.push_back(TextVocab::kByteBase + ch);
    words.push_back(std::move(ids));
    freq.push_back(c);
  }
  std::vector<std::pair<int, int>> merges;
  const int max_merges = k_t - TextVocab::kBaseSize;
  while (static_cast<int>(merges.size()) < max_merges) {
    std::map<std::pair<int, int>, long long> pairs;
    for (std::size_t w = 0; w < words.size(); ++w)
      for (std::size_t i = 0; i + 1 < words[w].size(); ++i) pairs[{words[w][i], words[w][i + 1]}] += freq[w];
    // Highest count wins; the map's ascending order makes the smallest pair win ties.
    std::pair<int, int> best{-1, -1};
    long long best_count = 0;
    for (const auto& [p, c] : pairs)
      if (c > best_count) {
        best = p;
        best_count = c;
      }
    if (best_count < 2) break;
    const int id = TextVocab::kBaseSize + static_cast<int>(merges.size());
    merges.push_back(best);
    for (auto& w : words) {
      std::vector<int> next;
      next.reserve(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == best.first && w[i + 1] == best.second) {
          next.push_back(id);
          ++i;
        } else {
          next.push_back(w[i]);
        }
      }
      w.swap(next);
    }
  }
  return TextVocab(std::move(merges));
}

UnifiedVocab::UnifiedVocab(TextVocab text, int layers, int codebook_size)
    : text_(std::move(text)), layers_(layers), k_(codebook_size) {
  require(layers >= 1 && codebook_size >= 1, "unified vocab: Q and K must be positive");
}

int UnifiedVocab::motion_id(int layer, int code) const {
  require(layer >= 0 && layer < layers_ && code >= 0 && code < k_,
          "unified vocab: motion code (" + std::to_string(layer) + ", " + std::to_string(code) + ") out of range");
  return text_.size() + layer * k_ + code;
}

IdClass UnifiedVocab::classify(int id) const {
  require(id >= 0 && id < size(), "unified vocab: id " + std::to_string(id) + " out of range");
  if (id < TextVocab::kByteBase) return {IdKind::special};
  if (id < text_.size()) return {IdKind::text};
  if (id == som()) return {IdKind::som};
  if (id == eom()) return {IdKind::eom};
  const int off = id - text_.size();
  return {IdKind::motion, off / k_, off % k_};
}

std::string UnifiedVocab::decode_text(const std::vector<int>& ids) const {
  for (int id : ids)
    require(id >= 0 && id < text_.size(), "decode_text: id " + std::to_string(id) + " is not a text id");
  return text_.decode(ids);
}

std::string UnifiedVocab::render(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    const auto c = classify(id);
    switch (c.kind) {
      case IdKind::text:
      case IdKind::special: out += text_.piece(id); break;
      case IdKind::som: out += "<som>"; break;
      case IdKind::eom: out += "<eom>"; break;
      case IdKind::motion: out += "<m" + std::to_string(c.layer) + "_" + std::to_string(c.code) + ">"; break;
    }
  }
  return out;
}

std::vector<int> UnifiedVocab::motion_to_symbols(const tok::MotionTokens& tokens) const {
  require(tokens.depth() == layers_, "motion_to_symbols: token depth " + std::to_string(tokens.depth()) +
                                         " does not match Q = " + std::to_string(layers_));
  tokens.validate(k_);
  std::vector<int> out;
  out.reserve(tokens.length() * layers_ + 2);
  out.push_back(som());
  for (int i = 0; i < tokens.length(); ++i)
    for (int q = 0; q < layers_; ++q) out.push_back(motion_id(q, tokens.layers[q][i]));
  out.push_back(eom());
  return out;
}

tok::MotionTokens UnifiedVocab::symbols_to_motion(const std::vector<int>& ids) const {
  require(ids.size() >= 2 && ids.front() == som() && ids.back() == eom(),
          "symbols_to_motion: span must start with <som> and end with <eom>");
  const int n = static_cast<int>(ids.size()) - 2;
  require(n > 0 && n % layers_ == 0, "symbols_to_motion: " + std::to_string(n) +
                                         " motion ids is not a positive multiple of Q = " + std::to_string(layers_));
  tok::MotionTokens out;
  out.layers.assign(layers_, {});
  for (int i = 0; i < n; ++i) {
    const auto c = classify(ids[1 + i]);
    require(c.kind == IdKind::motion, "symbols_to_motion: non-motion id " + std::to_string(ids[1 + i]) +
                                          " inside a motion span");
    require(c.layer == i % layers_, "symbols_to_motion: layer order broken at position " + std::to_string(i));
    out.layers[c.layer].push_back(c.code);
  }
  return out;
}

std::vector<tok::MotionTokens> UnifiedVocab::extract_motion_spans(const std::vector<int>& ids) const {
  std::vector<tok::MotionTokens> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != som()) continue;
    std::size_t j = i + 1;
    while (j < ids.size() && ids[j] != eom() && ids[j] != som()) ++j;
    if (j >= ids.size() || ids[j] != eom()) continue;
    try {
      out.push_back(symbols_to_motion(std::vector<int>(ids.begin() + i, ids.begin() + j + 1)));
    } catch (const InvalidArgument&) {
      // malformed span: skipped
    }
    i = j;
  }
  return out;
}

nlohmann::json UnifiedVocab::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : text_.merges()) merges.push_back({a, b});
  return {{"format_version", 1},
          {"k_t", text_.size()},
          {"merges", merges},
          {"specials", TextVocab::specials()},
          {"boundary", {"<som>", "<eom>"}},
          {"motion", {{"q", layers_}, {"k", k_}}}};
}

UnifiedVocab UnifiedVocab::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != 1) throw FormatError("vocab file: unsupported format_version");
    std::vector<std::pair<int, int>> merges;
    for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<int>(), m.at(1).get<int>());
    TextVocab text(std::move(merges));
    if (text.size() != j.at("k_t").get<int>()) throw FormatError("vocab file: k_t does not match merge count");
    const auto specials = j.at("specials").get<std::vector<std::string>>();
    if (specials.size() != TextVocab::specials().size() ||
        !std::equal(specials.begin(), specials.end(), TextVocab::specials().begin()))
      throw FormatError("vocab file: unexpected special tokens");
    return UnifiedVocab(std::move(text), j.at("motion").at("q").get<int>(), j.at("motion").at("k").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("vocab file: ") + e.what());
  }
}

void UnifiedVocab::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

UnifiedVocab UnifiedVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return from_json(nlohmann::json::parse(ss.str()));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace mtalk::vocab

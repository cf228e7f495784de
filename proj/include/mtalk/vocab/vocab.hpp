#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mtalk/tokenizer/tokenizer.hpp"

namespace mtalk::vocab {

// Byte-level pair-merge subword vocabulary.
//
// Ids: [0, 4) specials, [4, 260) raw bytes, then one id per learned merge in
// rank order.
class TextVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;  // "</s>"
  static constexpr int kImg = 3;  // visual placeholder
  static constexpr int kByteBase = 4;
  static constexpr int kBaseSize = kByteBase + 256;
  static const std::array<std::string, 4>& specials();

  TextVocab() = default;
  explicit TextVocab(std::vector<std::pair<int, int>> merges);

  int size() const { return kBaseSize + static_cast<int>(merges_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  // Bytes spelled by a non-special id.
  const std::string& piece(int id) const;

  // Literal "</s>" and "<img>" map to their reserved ids; everything else is bytes plus merges.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  void build_tables();
  std::vector<int> encode_chunk(std::string_view chunk) const;

  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::uint64_t, int> rank_;  // (left << 32 | right) -> merge rank
};

// Learns up to `k_t - 260` merges; stops early when no pair repeats.
TextVocab train_text_vocab(const std::vector<std::string>& corpus, int k_t);

enum class IdKind { text, special, motion, som, eom };

struct IdClass {
  IdKind kind = IdKind::text;
  int layer = -1;  // motion only
  int code = -1;   // motion only
};

// Text block [0, K_t), Q motion blocks of K ids, then <som>, <eom>.
class UnifiedVocab {
 public:
  UnifiedVocab() = default;
  UnifiedVocab(TextVocab text, int layers, int codebook_size);

  const TextVocab& text() const { return text_; }
  int text_size() const { return text_.size(); }
  int layers() const { return layers_; }
  int codebook_size() const { return k_; }
  int size() const { return text_.size() + layers_ * k_ + 2; }
  int som() const { return text_.size() + layers_ * k_; }
  int eom() const { return som() + 1; }
  int eos() const { return TextVocab::kEos; }
  int img() const { return TextVocab::kImg; }
  int motion_id(int layer, int code) const;
  IdClass classify(int id) const;

  std::vector<int> encode_text(std::string_view t) const { return text_.encode(t); }
  // Text ids only; throws on motion ids.
  std::string decode_text(const std::vector<int>& ids) const;
  // Human-readable rendering of any id sequence (motion ids as <m{layer}_{code}>).
  std::string render(const std::vector<int>& ids) const;

  // <som>, per timestep the Q layer ids (layer 0 first), <eom>.
  std::vector<int> motion_to_symbols(const tok::MotionTokens& tokens) const;
  tok::MotionTokens symbols_to_motion(const std::vector<int>& ids) const;
  // Every well-formed <som>...<eom> span in order.
  std::vector<tok::MotionTokens> extract_motion_spans(const std::vector<int>& ids) const;

  nlohmann::json to_json() const;
  static UnifiedVocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static UnifiedVocab load(const std::filesystem::path& path);

 private:
  TextVocab text_;
  int layers_ = 0;
  int k_ = 0;
};

}  // namespace mtalk::vocab

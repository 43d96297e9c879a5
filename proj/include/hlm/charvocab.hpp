#pragma once

#include <map>
#include <string>
#include <vector>

#include "hlm/common.hpp"
#include "hlm/conllu.hpp"

namespace hlm {

/// Per-language character inventory. Ids are contiguous from 0 with the four
/// special tokens first, then every unique training character in code-point
/// order. Characters are Unicode scalar values (no grapheme clustering).
class CharVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kWordCls = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumSpecials = 4;

  static const std::vector<std::string>& special_names();

  CharVocab() = default;
  explicit CharVocab(std::vector<char32_t> sorted_chars);

  int size() const { return kNumSpecials + static_cast<int>(chars_.size()); }

  /// Id for a character; unseen characters map to UNK.
  int id_of(char32_t c) const {
    auto it = char_to_id_.find(c);
    return it == char_to_id_.end() ? kUnk : it->second;
  }

  bool contains(char32_t c) const { return char_to_id_.count(c) > 0; }

  /// Character for a non-special id.
  char32_t char_of(int id) const;

  const std::vector<char32_t>& chars() const { return chars_; }

  /// One line per entry, specials first, id = line number (0-based).
  std::string to_text() const;
  static CharVocab from_text(const std::string& text);

  void save(const std::string& path) const;
  static CharVocab load(const std::string& path);

 private:
  std::vector<char32_t> chars_;
  std::map<char32_t, int> char_to_id_;
};

/// All unique characters in the training split's token forms.
CharVocab build_vocab(const Treebank& train);

/// One chunk of a word as the intra-word encoder sees it: WORD_CLS followed
/// by at most max_word_len-1 character ids.
struct EncodedWord {
  std::vector<int> char_ids;  // char_ids[0] == kWordCls
  int length() const { return static_cast<int>(char_ids.size()); }
};

/// A window of at most max_seq_len encoded words. Words longer than
/// max_word_len-1 characters are split into several chunks; only the first
/// chunk carries the token's word-level labels.
struct EncodedSentence {
  std::vector<EncodedWord> words;
  std::vector<int> word_to_token;   // encoded-word position -> source token index
  std::vector<int> token_first_word;  // source token index -> its first-piece position
  std::vector<bool> is_first_piece;   // per encoded word
};

/// Splits an over-long form into WORD_CLS-prefixed chunks.
std::vector<EncodedWord> encode_word(const std::string& form, const CharVocab& vocab,
                                     int max_word_len);

/// Encodes a sentence; windows are split at token boundaries when the word
/// count would exceed max_seq_len. token_first_word uses window-global token
/// indices (an index into s.tokens).
std::vector<EncodedSentence> encode_sentence(const Sentence& s, const CharVocab& vocab,
                                             int max_word_len = 16, int max_seq_len = 512);

/// Drops WORD_CLS prefixes and concatenates chunks back to the original form
/// (exact for in-vocabulary text).
std::string decode_word_pieces(const std::vector<EncodedWord>& pieces, const CharVocab& vocab);

}  // namespace hlm

#include "hlm/charvocab.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "hlm/unicode.hpp"

namespace hlm {

const std::vector<std::string>& CharVocab::special_names() {
  static const std::vector<std::string> names = {"[PAD]", "[UNK]", "[WORD_CLS]", "[MASK]"};
  return names;
}

CharVocab::CharVocab(std::vector<char32_t> sorted_chars) : chars_(std::move(sorted_chars)) {
  int id = kNumSpecials;
  for (char32_t c : chars_) {
    if (!char_to_id_.emplace(c, id).second)
      throw DataError("duplicate character in vocabulary");
    ++id;
  }
}

char32_t CharVocab::char_of(int id) const {
  if (id < kNumSpecials || id >= size())
    throw DataError("char_of: id " + std::to_string(id) + " is not a character id");
  return chars_[static_cast<std::size_t>(id - kNumSpecials)];
}

std::string CharVocab::to_text() const {
  std::string out;
  for (const auto& name : special_names()) out += name + "\n";
  for (char32_t c : chars_) {
    utf8_append(out, c);
    out += '\n';
  }
  return out;
}

CharVocab CharVocab::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<char32_t> chars;
  int line_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no < kNumSpecials) {
      if (line != special_names()[static_cast<std::size_t>(line_no)])
        throw ParseError("vocabulary line " + std::to_string(line_no + 1) +
                         ": expected special token " + special_names()[static_cast<std::size_t>(line_no)]);
    } else {
      const auto cps = utf8_decode(line);
      if (cps.size() != 1)
        throw ParseError("vocabulary line " + std::to_string(line_no + 1) +
                         ": expected exactly one character");
      chars.push_back(cps[0]);
    }
    ++line_no;
  }
  if (line_no < kNumSpecials) throw ParseError("vocabulary file truncated");
  return CharVocab(std::move(chars));
}

void CharVocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file: " + path);
  out << to_text();
}

CharVocab CharVocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

CharVocab build_vocab(const Treebank& train) {
  std::set<char32_t> seen;
  for (const auto& sent : train.sentences)
    for (const auto& tok : sent.tokens)
      for (char32_t c : utf8_decode(tok.form)) seen.insert(c);
  return CharVocab(std::vector<char32_t>(seen.begin(), seen.end()));
}

std::vector<EncodedWord> encode_word(const std::string& form, const CharVocab& vocab,
                                     int max_word_len) {
  if (form.empty()) throw DataError("encode_word: empty form");
  if (max_word_len < 2) throw DataError("encode_word: max_word_len must be >= 2");
  const std::vector<char32_t> cps = utf8_decode(form);
  const int chunk = max_word_len - 1;

  std::vector<EncodedWord> pieces;
  for (std::size_t start = 0; start < cps.size(); start += static_cast<std::size_t>(chunk)) {
    EncodedWord w;
    w.char_ids.push_back(CharVocab::kWordCls);
    const std::size_t end = std::min(cps.size(), start + static_cast<std::size_t>(chunk));
    for (std::size_t i = start; i < end; ++i) w.char_ids.push_back(vocab.id_of(cps[i]));
    pieces.push_back(std::move(w));
  }
  return pieces;
}

std::vector<EncodedSentence> encode_sentence(const Sentence& s, const CharVocab& vocab,
                                             int max_word_len, int max_seq_len) {
  std::vector<EncodedSentence> windows;
  EncodedSentence cur;
  cur.token_first_word.assign(s.tokens.size(), -1);

  auto flush = [&]() {
    if (!cur.words.empty()) windows.push_back(std::move(cur));
    cur = EncodedSentence{};
    cur.token_first_word.assign(s.tokens.size(), -1);
  };

  for (std::size_t t = 0; t < s.tokens.size(); ++t) {
    std::vector<EncodedWord> pieces = encode_word(s.tokens[t].form, vocab, max_word_len);
    if (static_cast<int>(pieces.size()) > max_seq_len)
      throw DataError("encode_sentence: token of " + std::to_string(pieces.size()) +
                      " chunks cannot fit a window of " + std::to_string(max_seq_len));
    // All chunks of one token stay in the same window.
    if (static_cast<int>(cur.words.size() + pieces.size()) > max_seq_len) flush();
    for (std::size_t p = 0; p < pieces.size(); ++p) {
      if (p == 0) cur.token_first_word[t] = static_cast<int>(cur.words.size());
      cur.is_first_piece.push_back(p == 0);
      cur.word_to_token.push_back(static_cast<int>(t));
      cur.words.push_back(std::move(pieces[p]));
    }
  }
  flush();
  return windows;
}

std::string decode_word_pieces(const std::vector<EncodedWord>& pieces, const CharVocab& vocab) {
  std::vector<char32_t> cps;
  for (const auto& piece : pieces)
    for (std::size_t i = 1; i < piece.char_ids.size(); ++i)
      cps.push_back(vocab.char_of(piece.char_ids[i]));
  return utf8_encode(cps);
}

}  // namespace hlm

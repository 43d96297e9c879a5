#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hlm/common.hpp"

namespace hlm {

/// One syntactic word. Feature categories are kept in lexicographically
/// sorted order (std::map), so head ordering is stable across runs.
struct Token {
  std::string form;
  std::string lemma;
  std::string upos;
  std::map<std::string, std::string> feats;

  // Columns we parse but do not model; carried through so predictions can be
  // written next to the original annotation.
  std::string id = "_";
  std::string xpos = "_";
  std::string head = "_";
  std::string deprel = "_";
  std::string deps = "_";
  std::string misc = "_";
};

struct Sentence {
  std::string id;
  std::vector<Token> tokens;
};

struct Treebank {
  std::string language_code;
  std::string split;  // train | valid | test
  std::vector<Sentence> sentences;
};

/// Per-language morphological feature inventory derived from the training
/// split: k sorted categories, each with its observed values plus NONE.
struct FeatureSchema {
  static constexpr const char* kNone = "NONE";

  std::vector<std::string> categories;
  // values_per_category[i] lists category i's labels; index 0 is always NONE,
  // the rest are the observed values in sorted order.
  std::vector<std::vector<std::string>> values;

  std::size_t category_count() const { return categories.size(); }

  int category_index(const std::string& cat) const {
    for (std::size_t i = 0; i < categories.size(); ++i)
      if (categories[i] == cat) return static_cast<int>(i);
    return -1;
  }

  /// Label id of `value` within category `cat_idx`; unseen values fall back
  /// to NONE (id 0).
  int value_index(std::size_t cat_idx, const std::string& value) const {
    const auto& vs = values[cat_idx];
    for (std::size_t i = 1; i < vs.size(); ++i)
      if (vs[i] == value) return static_cast<int>(i);
    return 0;
  }
};

/// Parses CoNLL-U text. Multiword-token ranges ("3-4") and empty nodes
/// ("5.1") are skipped; rows with a wrong column count raise ParseError with
/// the 1-based line number.
Treebank parse_conllu(const std::string& text, const std::string& language_code = "",
                      const std::string& split = "");

Treebank load_conllu_file(const std::string& path, const std::string& language_code = "",
                          const std::string& split = "");

/// Serializes the retained columns back to CoNLL-U (one sentence per block).
std::string to_conllu(const Treebank& tb);

FeatureSchema build_feature_schema(const Treebank& train);

struct TreebankStats {
  long long tokens = 0;
  long long sentences = 0;
};

TreebankStats treebank_stats(const Treebank& tb);

/// "Cat1=Val1|Cat2=Val2" -> ordered map; "_" or "" -> empty map.
std::map<std::string, std::string> parse_feats(const std::string& feats_column);

std::string feats_to_string(const std::map<std::string, std::string>& feats);

}  // namespace hlm

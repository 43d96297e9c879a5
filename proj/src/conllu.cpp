#include "hlm/conllu.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace hlm {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      cols.push_back(line.substr(start));
      return cols;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

bool is_integer_id(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (c < '0' || c > '9') return false;
  return true;
}

}  // namespace

std::map<std::string, std::string> parse_feats(const std::string& feats_column) {
  std::map<std::string, std::string> out;
  if (feats_column.empty() || feats_column == "_") return out;
  std::size_t start = 0;
  while (start <= feats_column.size()) {
    std::size_t bar = feats_column.find('|', start);
    if (bar == std::string::npos) bar = feats_column.size();
    const std::string item = feats_column.substr(start, bar - start);
    const std::size_t eq = item.find('=');
    if (eq != std::string::npos && eq > 0) {
      out[item.substr(0, eq)] = item.substr(eq + 1);
    }
    start = bar + 1;
    if (bar == feats_column.size()) break;
  }
  return out;
}

std::string feats_to_string(const std::map<std::string, std::string>& feats) {
  if (feats.empty()) return "_";
  std::string out;
  for (const auto& [cat, val] : feats) {
    if (!out.empty()) out += '|';
    out += cat + "=" + val;
  }
  return out;
}

Treebank parse_conllu(const std::string& text, const std::string& language_code,
                      const std::string& split) {
  Treebank tb;
  tb.language_code = language_code;
  tb.split = split;

  Sentence current;
  std::string pending_id;
  long long line_no = 0;

  auto flush = [&]() {
    if (!current.tokens.empty()) {
      current.id = pending_id.empty() ? std::to_string(tb.sentences.size() + 1) : pending_id;
      tb.sentences.push_back(std::move(current));
    }
    current = Sentence{};
    pending_id.clear();
  };

  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    if (line[0] == '#') {
      const std::string prefix = "# sent_id = ";
      if (line.rfind(prefix, 0) == 0) pending_id = line.substr(prefix.size());
      continue;
    }
    const std::vector<std::string> cols = split_tabs(line);
    if (cols.size() != 10)
      throw ParseError("line " + std::to_string(line_no) + ": expected 10 tab-separated columns, got " +
                       std::to_string(cols.size()));
    // Keep single-integer-ID rows only: ranges ("3-4") and empty nodes
    // ("5.1") have no word-level gold annotation in this task.
    if (!is_integer_id(cols[0])) continue;
    if (cols[1].empty())
      throw ParseError("line " + std::to_string(line_no) + ": empty FORM column");

    Token tok;
    tok.id = cols[0];
    tok.form = cols[1];
    tok.lemma = cols[2];
    tok.upos = cols[3];
    tok.xpos = cols[4];
    tok.feats = parse_feats(cols[5]);
    tok.head = cols[6];
    tok.deprel = cols[7];
    tok.deps = cols[8];
    tok.misc = cols[9];
    current.tokens.push_back(std::move(tok));
  }
  flush();
  return tb;
}

Treebank load_conllu_file(const std::string& path, const std::string& language_code,
                          const std::string& split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open treebank file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_conllu(buf.str(), language_code, split);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

std::string to_conllu(const Treebank& tb) {
  std::string out;
  for (const auto& sent : tb.sentences) {
    out += "# sent_id = " + sent.id + "\n";
    long long fallback_id = 0;
    for (const auto& tok : sent.tokens) {
      ++fallback_id;
      const std::string id = tok.id.empty() || tok.id == "_" ? std::to_string(fallback_id) : tok.id;
      out += id + '\t' + tok.form + '\t' + tok.lemma + '\t' + tok.upos + '\t' + tok.xpos + '\t' +
             feats_to_string(tok.feats) + '\t' + tok.head + '\t' + tok.deprel + '\t' + tok.deps +
             '\t' + tok.misc + '\n';
    }
    out += '\n';
  }
  return out;
}

FeatureSchema build_feature_schema(const Treebank& train) {
  std::map<std::string, std::set<std::string>> observed;
  for (const auto& sent : train.sentences)
    for (const auto& tok : sent.tokens)
      for (const auto& [cat, val] : tok.feats) observed[cat].insert(val);

  FeatureSchema schema;
  for (const auto& [cat, vals] : observed) {
    schema.categories.push_back(cat);
    std::vector<std::string> labels{FeatureSchema::kNone};
    labels.insert(labels.end(), vals.begin(), vals.end());
    schema.values.push_back(std::move(labels));
  }
  return schema;
}

TreebankStats treebank_stats(const Treebank& tb) {
  TreebankStats st;
  st.sentences = static_cast<long long>(tb.sentences.size());
  for (const auto& sent : tb.sentences) st.tokens += static_cast<long long>(sent.tokens.size());
  return st;
}

}  // namespace hlm

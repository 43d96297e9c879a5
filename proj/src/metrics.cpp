#include "hlm/metrics.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace hlm {

std::string ScoreReport::to_tsv() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << task << "\tscore\t" << score << "\n";
  for (const auto& [name, value] : components) os << task << "\t" << name << "\t" << value << "\n";
  return os.str();
}

ScoreReport pos_score(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.size() != gold.size())
    throw DataError("pos_score: prediction/gold length mismatch (" + std::to_string(pred.size()) +
                    " vs " + std::to_string(gold.size()) + ")");
  const std::size_t n = gold.size();

  std::size_t correct = 0;
  std::set<std::string> classes;
  std::map<std::string, long long> tp, fp, fn;
  for (std::size_t i = 0; i < n; ++i) {
    classes.insert(pred[i]);
    classes.insert(gold[i]);
    if (pred[i] == gold[i]) {
      ++correct;
      ++tp[gold[i]];
    } else {
      ++fp[pred[i]];
      ++fn[gold[i]];
    }
  }

  const double accuracy = n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
  double f1_sum = 0.0;
  for (const auto& c : classes) {
    const double tpc = static_cast<double>(tp[c]);
    const double fpc = static_cast<double>(fp[c]);
    const double fnc = static_cast<double>(fn[c]);
    const double precision = tpc + fpc > 0 ? tpc / (tpc + fpc) : 0.0;
    const double recall = tpc + fnc > 0 ? tpc / (tpc + fnc) : 0.0;
    f1_sum += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  const double macro_f1 = classes.empty() ? 0.0 : f1_sum / static_cast<double>(classes.size());

  ScoreReport r;
  r.task = "pos";
  r.components = {{"accuracy", accuracy}, {"f1", macro_f1}};
  r.score = (accuracy + macro_f1) / 2.0;
  return r;
}

ScoreReport morph_score(const std::vector<Feats>& pred, const std::vector<Feats>& gold) {
  if (pred.size() != gold.size())
    throw DataError("morph_score: prediction/gold length mismatch (" + std::to_string(pred.size()) +
                    " vs " + std::to_string(gold.size()) + ")");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Feats& p = pred[i];
    const Feats& g = gold[i];
    if (p.empty() && g.empty()) {
      total += 1.0;
      continue;
    }
    long long matched = 0;
    long long spurious = 0;
    for (const auto& [cat, val] : p) {
      auto it = g.find(cat);
      if (it == g.end())
        ++spurious;  // category predicted but absent in the label
      else if (it->second == val)
        ++matched;
    }
    total += static_cast<double>(matched) /
             static_cast<double>(static_cast<long long>(g.size()) + spurious);
  }

  ScoreReport r;
  r.task = "morph";
  const double s = pred.empty() ? 0.0 : total / static_cast<double>(pred.size());
  r.components = {{"token_accuracy", s}};
  r.score = s;
  return r;
}

ScoreReport lemma_score(const std::vector<std::vector<std::string>>& pred_topk,
                        const std::vector<std::string>& gold) {
  if (pred_topk.size() != gold.size())
    throw DataError("lemma_score: prediction/gold length mismatch (" +
                    std::to_string(pred_topk.size()) + " vs " + std::to_string(gold.size()) + ")");
  const std::size_t n = gold.size();
  std::size_t at1 = 0, at3 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cands = pred_topk[i];
    if (!cands.empty() && cands[0] == gold[i]) ++at1;
    const std::size_t top = std::min<std::size_t>(cands.size(), 3);
    for (std::size_t k = 0; k < top; ++k) {
      if (cands[k] == gold[i]) {
        ++at3;
        break;
      }
    }
  }
  const double acc1 = n == 0 ? 0.0 : static_cast<double>(at1) / static_cast<double>(n);
  const double acc3 = n == 0 ? 0.0 : static_cast<double>(at3) / static_cast<double>(n);

  ScoreReport r;
  r.task = "lemma";
  r.components = {{"acc@1", acc1}, {"acc@3", acc3}};
  r.score = (acc1 + acc3) / 2.0;
  return r;
}

}  // namespace hlm

#pragma once

#include <map>
#include <string>
#include <vector>

#include "hlm/common.hpp"

namespace hlm {

/// Scores mirroring the shared task's official evaluation:
///  pos   = (accuracy + macro-F1) / 2
///  morph = mean per-token accuracy with deductions for spurious categories
///  lemma = (accuracy@1 + accuracy@3) / 2
struct ScoreReport {
  std::string task;  // pos | morph | lemma
  double score = 0.0;
  // pos: {accuracy, f1}; lemma: {acc@1, acc@3}; morph: {mean token accuracy}
  std::vector<std::pair<std::string, double>> components;

  std::string to_tsv() const;
};

ScoreReport pos_score(const std::vector<std::string>& pred, const std::vector<std::string>& gold);

using Feats = std::map<std::string, std::string>;

ScoreReport morph_score(const std::vector<Feats>& pred, const std::vector<Feats>& gold);

ScoreReport lemma_score(const std::vector<std::vector<std::string>>& pred_topk,
                        const std::vector<std::string>& gold);

}  // namespace hlm

#pragma once

#include <algorithm>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uwf/common.hpp"

namespace uwf {

/// Parallel (id, score, label) arrays for one evaluation set.
struct ScoredSet {
  std::vector<std::string> ids;
  std::vector<double> scores;  // in [0,1]
  std::vector<int> labels;     // 0/1

  size_t size() const { return scores.size(); }
  void push(std::string id, double score, int label) {
    ids.push_back(std::move(id));
    scores.push_back(score);
    labels.push_back(label);
  }
  int count_positive() const {
    int n = 0;
    for (int l : labels) n += (l == 1);
    return n;
  }
  int count_negative() const { return static_cast<int>(labels.size()) - count_positive(); }
};

/// Probability that a random positive outranks a random negative, ties at 1/2
/// (Mann-Whitney U through average ranks).
inline double auroc(const ScoredSet& s) {
  int npos = s.count_positive();
  int nneg = s.count_negative();
  if (npos == 0 || nneg == 0)
    throw DataError("auroc undefined: needs both classes, got " + std::to_string(npos) +
                    " positives and " + std::to_string(nneg) + " negatives");
  size_t n = s.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return s.scores[a] < s.scores[b]; });
  // average ranks within tie groups, 1-based
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && s.scores[order[j]] == s.scores[order[i]]) ++j;
    double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (s.labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j;
  }
  double u = pos_rank_sum - static_cast<double>(npos) * (npos + 1) / 2.0;
  return u / (static_cast<double>(npos) * nneg);
}

/// Average-precision form: sum over descending thresholds of
/// (recall step) * precision at that threshold.
inline double auprc(const ScoredSet& s) {
  int npos = s.count_positive();
  if (npos == 0) throw DataError("auprc undefined: no positive labels");
  size_t n = s.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return s.scores[a] > s.scores[b]; });
  double ap = 0.0;
  double tp = 0.0, fp = 0.0, prev_recall = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && s.scores[order[j]] == s.scores[order[i]]) ++j;
    for (size_t k = i; k < j; ++k) {
      if (s.labels[order[k]] == 1) tp += 1.0;
      else fp += 1.0;
    }
    double recall = tp / npos;
    double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct SensSpec {
  std::optional<double> sensitivity;  // unset when no positives in the set
  std::optional<double> specificity;  // unset when no negatives
};

/// Confusion-matrix rates at a fixed threshold; predicted positive means
/// score >= threshold. A class with no members yields an undefined metric.
inline SensSpec sensitivity_specificity(const ScoredSet& s, double threshold) {
  int tp = 0, fn = 0, tn = 0, fp = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    bool pred = s.scores[i] >= threshold;
    if (s.labels[i] == 1) {
      pred ? ++tp : ++fn;
    } else {
      pred ? ++fp : ++tn;
    }
  }
  SensSpec out;
  if (tp + fn > 0) out.sensitivity = static_cast<double>(tp) / (tp + fn);
  if (tn + fp > 0) out.specificity = static_cast<double>(tn) / (tn + fp);
  return out;
}

/// Threshold maximizing Youden's J (sens + spec - 1) over the candidate
/// thresholds induced by the scores. Ties resolve to the lowest threshold.
inline double youden_threshold(const ScoredSet& s) {
  std::vector<double> cands = s.scores;
  cands.push_back(0.0);
  cands.push_back(1.0);
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  double best_j = -2.0, best_t = 0.5;
  for (double t : cands) {
    auto ss = sensitivity_specificity(s, t);
    if (!ss.sensitivity || !ss.specificity) continue;
    double j = *ss.sensitivity + *ss.specificity - 1.0;
    if (j > best_j + 1e-12) {
      best_j = j;
      best_t = t;
    }
  }
  return best_t;
}

struct EvalRow {
  int task_id = 0;
  std::string domain;  // "rgb" | "frequency"
  std::string model;   // architecture id or "fusion"
  double auroc = 0.0;
  double auprc = 0.0;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  double threshold = 0.5;
  int n_test = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string threshold_rule;  // "fixed" | "youden-validation"
  std::string split_id;
  uint64_t seed = 0;

  bool any_undefined() const {
    for (const auto& r : rows)
      if (!r.sensitivity || !r.specificity) return true;
    return false;
  }
};

struct RunKey {
  int task_id;
  std::string domain;
  std::string model;
  bool operator<(const RunKey& o) const {
    return std::tie(task_id, domain, model) < std::tie(o.task_id, o.domain, o.model);
  }
};

/// Assemble one report row per declared (task, domain, model). Every declared
/// key must have predictions; missing ones are reported together.
inline EvalReport evaluate_run(const std::map<RunKey, ScoredSet>& predictions,
                               const std::vector<RunKey>& declared, double threshold,
                               const std::string& threshold_rule, const std::string& split_id,
                               uint64_t seed) {
  std::vector<std::string> missing;
  for (const auto& k : declared)
    if (!predictions.count(k))
      missing.push_back("task" + std::to_string(k.task_id) + "/" + k.domain + "/" + k.model);
  if (!missing.empty()) {
    std::string msg = "missing predictions for " + std::to_string(missing.size()) + " row(s):";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  EvalReport report;
  report.threshold_rule = threshold_rule;
  report.split_id = split_id;
  report.seed = seed;
  for (const auto& k : declared) {
    const ScoredSet& s = predictions.at(k);
    EvalRow row;
    row.task_id = k.task_id;
    row.domain = k.domain;
    row.model = k.model;
    row.auroc = auroc(s);
    row.auprc = auprc(s);
    auto ss = sensitivity_specificity(s, threshold);
    row.sensitivity = ss.sensitivity;
    row.specificity = ss.specificity;
    row.threshold = threshold;
    row.n_test = static_cast<int>(s.size());
    report.rows.push_back(row);
  }
  return report;
}

namespace detail {
inline std::string fmt_metric(const std::optional<double>& v) {
  if (!v) return "undef";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << (*v * 100.0) << "%";
  return ss.str();
}
inline std::string fmt_metric(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << (v * 100.0) << "%";
  return ss.str();
}
}  // namespace detail

inline std::string eval_report_csv(const EvalReport& r) {
  std::ostringstream ss;
  ss << "task,domain,model,auroc,auprc,sensitivity,specificity,threshold,threshold_rule,"
        "split,seed,n_test\n";
  ss << std::setprecision(10);
  for (const auto& row : r.rows) {
    ss << row.task_id << ',' << row.domain << ',' << row.model << ',' << row.auroc << ','
       << row.auprc << ',';
    if (row.sensitivity) ss << *row.sensitivity;
    ss << ',';
    if (row.specificity) ss << *row.specificity;
    ss << ',' << row.threshold << ',' << r.threshold_rule << ',' << r.split_id << ','
       << r.seed << ',' << row.n_test << '\n';
  }
  return ss.str();
}

/// Text table grouped into (task x domain) blocks.
inline std::string eval_report_table(const EvalReport& r) {
  static const char* task_names[] = {"", "Quality Assessment", "RDR Identification",
                                     "DME Identification"};
  std::ostringstream ss;
  ss << std::left;
  int last_task = -1;
  std::string last_domain;
  for (const auto& row : r.rows) {
    if (row.task_id != last_task || row.domain != last_domain) {
      std::string title = "Task " + std::to_string(row.task_id);
      if (row.task_id >= 1 && row.task_id <= 3) title += " - " + std::string(task_names[row.task_id]);
      title += ": " + std::string(row.domain == "rgb" ? "RGB" : "Frequency") + " domain";
      ss << '\n' << title << '\n';
      ss << std::setw(22) << "Model" << std::setw(9) << "AUROC" << std::setw(9) << "AUPRC"
         << std::setw(9) << "Sens." << std::setw(9) << "Spec." << '\n';
      ss << std::string(58, '-') << '\n';
      last_task = row.task_id;
      last_domain = row.domain;
    }
    ss << std::setw(22) << row.model << std::setw(9) << detail::fmt_metric(row.auroc)
       << std::setw(9) << detail::fmt_metric(row.auprc) << std::setw(9)
       << detail::fmt_metric(row.sensitivity) << std::setw(9)
       << detail::fmt_metric(row.specificity) << '\n';
  }
  return ss.str();
}

}  // namespace uwf

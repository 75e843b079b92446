#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "uwf/common.hpp"

namespace uwf {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split name: " + s);
}

/// One manifest row. A record participates in a task iff its label for that
/// task is present.
struct ImageRecord {
  std::string image_id;
  std::string image_path;
  std::map<int, int> task_labels;  // task_id in {1,2,3} -> 0/1
  std::optional<Split> split;

  bool has_label(int task_id) const { return task_labels.count(task_id) > 0; }
  int label(int task_id) const { return task_labels.at(task_id); }
};

struct TaskDefinition {
  int task_id;
  std::string positive_class_name;
  std::string negative_class_name;
  int input_resolution;
};

/// The three screening tasks. Task 1 trains at 448 px; tasks 2-3 default to
/// the backbone-native size (overridable per run).
inline const std::array<TaskDefinition, 3>& task_definitions() {
  static const std::array<TaskDefinition, 3> defs = {{
      {1, "Gradable", "Ungradable", 448},
      {2, "RDR", "No RDR", 224},
      {3, "DME", "No DME", 224},
  }};
  return defs;
}

inline const TaskDefinition& task_definition(int task_id) {
  if (task_id < 1 || task_id > 3)
    throw ConfigError("task_id must be 1, 2 or 3, got " + std::to_string(task_id));
  return task_definitions()[static_cast<size_t>(task_id - 1)];
}

inline constexpr const char* kManifestHeader =
    "image_id,image_path,task1_label,task2_label,task3_label";

/// Parse the CSV manifest. Each row must carry at least one task label and
/// every present label must be exactly 0 or 1.
inline std::vector<ImageRecord> load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw DataError("manifest file not found: " + path.string());
  std::ifstream f(path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("manifest is empty (no header): " + path.string());
  if (trim(line) != kManifestHeader)
    throw DataError("manifest header mismatch, expected '" + std::string(kManifestHeader) +
                    "', got '" + trim(line) + "'");
  std::vector<ImageRecord> records;
  std::set<std::string> seen_ids;
  size_t row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 5)
      throw DataError("manifest row " + std::to_string(row) + ": expected 5 fields, got " +
                      std::to_string(fields.size()));
    ImageRecord rec;
    rec.image_id = trim(fields[0]);
    rec.image_path = trim(fields[1]);
    if (rec.image_id.empty())
      throw DataError("manifest row " + std::to_string(row) + ": empty image_id");
    if (!seen_ids.insert(rec.image_id).second)
      throw DataError("manifest row " + std::to_string(row) + ": duplicate image_id '" +
                      rec.image_id + "'");
    for (int t = 1; t <= 3; ++t) {
      std::string v = trim(fields[static_cast<size_t>(t + 1)]);
      if (v.empty()) continue;
      if (v == "0" || v == "1") {
        rec.task_labels[t] = (v == "1");
      } else {
        throw DataError("manifest row " + std::to_string(row) + ": task" + std::to_string(t) +
                        "_label must be 0, 1 or empty, got '" + v + "'");
      }
    }
    if (rec.task_labels.empty())
      throw DataError("manifest row " + std::to_string(row) + " (" + rec.image_id +
                      "): no label for any task");
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::string write_manifest_text(const std::vector<ImageRecord>& records) {
  std::ostringstream ss;
  ss << kManifestHeader << '\n';
  for (const auto& r : records) {
    ss << r.image_id << ',' << r.image_path;
    for (int t = 1; t <= 3; ++t) {
      ss << ',';
      if (r.has_label(t)) ss << r.label(t);
    }
    ss << '\n';
  }
  return ss.str();
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<ImageRecord>& records) {
  write_text_file(path, write_manifest_text(records));
}

struct SplitAssignment {
  std::unordered_map<std::string, Split> by_id;
  uint64_t seed = 0;
  std::array<double, 3> ratios{0.64, 0.16, 0.20};
  int task_id = 0;

  Split at(const std::string& id) const {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("image_id not in split assignment: " + id);
    return it->second;
  }
  std::array<int, 3> sizes() const {
    std::array<int, 3> n{0, 0, 0};
    for (const auto& [_, s] : by_id) n[static_cast<size_t>(s)]++;
    return n;
  }
};

namespace detail {
/// Largest-remainder apportionment of n items over the three buckets; ties on
/// the fractional part favor train, then val, so drift lands in the largest
/// bucket whenever the targets do not break the tie themselves.
inline std::array<int, 3> apportion(int n, const std::array<double, 3>& ratios) {
  std::array<int, 3> counts;
  std::array<double, 3> remainders;
  int assigned = 0;
  for (size_t i = 0; i < 3; ++i) {
    double target = ratios[i] * n;
    counts[i] = static_cast<int>(std::floor(target + 1e-9));
    remainders[i] = target - counts[i];
    assigned += counts[i];
  }
  int leftover = n - assigned;
  std::array<size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return remainders[a] > remainders[b]; });
  for (int k = 0; k < leftover; ++k) counts[order[static_cast<size_t>(k)]]++;
  return counts;
}
}  // namespace detail

/// Deterministic label-stratified split for one task. Per class, items are
/// shuffled with the seeded generator and dealt train/val/test by
/// largest-remainder counts, so each per-split class count stays within one
/// item of ratio * class_size.
inline SplitAssignment stratified_split(const std::vector<ImageRecord>& records,
                                        const std::array<double, 3>& ratios, uint64_t seed,
                                        int task_id) {
  double ratio_sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(ratio_sum - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1, got " + std::to_string(ratio_sum));
  for (double r : ratios)
    if (r < 0.0) throw ConfigError("split ratios must be non-negative");

  std::array<std::vector<const ImageRecord*>, 2> by_class;
  for (const auto& rec : records) {
    if (!rec.has_label(task_id))
      throw DataError("record '" + rec.image_id + "' has no label for task " +
                      std::to_string(task_id));
    by_class[static_cast<size_t>(rec.label(task_id))].push_back(&rec);
  }

  SplitAssignment out;
  out.seed = seed;
  out.ratios = ratios;
  out.task_id = task_id;
  for (size_t cls = 0; cls < 2; ++cls) {
    auto& items = by_class[cls];
    if (items.empty()) continue;
    int n = static_cast<int>(items.size());
    auto counts = detail::apportion(n, ratios);
    int splits_requested = 0;
    for (size_t i = 0; i < 3; ++i) splits_requested += ratios[i] > 0.0;
    if (n < splits_requested)
      throw DataError("class " + std::to_string(cls) + " of task " + std::to_string(task_id) +
                      " has " + std::to_string(n) + " records, fewer than the " +
                      std::to_string(splits_requested) + " splits requested");
    // stable item order before the shuffle so the result is independent of
    // manifest row order permutations only through image_id
    std::sort(items.begin(), items.end(),
              [](const ImageRecord* a, const ImageRecord* b) { return a->image_id < b->image_id; });
    Rng rng = Rng::child(seed, 1000 * static_cast<uint64_t>(task_id) + cls);
    rng.shuffle(items);
    int idx = 0;
    for (int s = 0; s < 3; ++s)
      for (int k = 0; k < counts[static_cast<size_t>(s)]; ++k)
        out.by_id[items[static_cast<size_t>(idx++)]->image_id] = static_cast<Split>(s);
  }
  return out;
}

/// Exact (negative, positive) counts for one task and split. The negative
/// class is the one named first in the task definition tables.
inline std::pair<int, int> class_distribution(const std::vector<ImageRecord>& records,
                                              int task_id, Split split) {
  int neg = 0, pos = 0;
  for (const auto& rec : records) {
    if (!rec.has_label(task_id) || !rec.split || *rec.split != split) continue;
    (rec.label(task_id) == 1 ? pos : neg)++;
  }
  return {neg, pos};
}

inline void apply_split(std::vector<ImageRecord>& records, const SplitAssignment& assignment) {
  for (auto& rec : records) {
    auto it = assignment.by_id.find(rec.image_id);
    if (it != assignment.by_id.end()) rec.split = it->second;
  }
}

// ---- split CSV (image_id,task_id,split) -------------------------------------

inline std::string write_split_text(const SplitAssignment& a) {
  std::vector<std::pair<std::string, Split>> rows(a.by_id.begin(), a.by_id.end());
  std::sort(rows.begin(), rows.end());
  std::ostringstream ss;
  ss << "image_id,task_id,split\n";
  for (const auto& [id, s] : rows) ss << id << ',' << a.task_id << ',' << split_name(s) << '\n';
  return ss.str();
}

inline void write_split_csv(const std::filesystem::path& path, const SplitAssignment& a) {
  write_text_file(path, write_split_text(a));
}

inline SplitAssignment load_split_csv(const std::filesystem::path& path, int task_id) {
  if (!std::filesystem::exists(path)) throw DataError("split file not found: " + path.string());
  std::ifstream f(path);
  std::string line;
  if (!std::getline(f, line) || trim(line) != "image_id,task_id,split")
    throw DataError("split file header mismatch in " + path.string());
  SplitAssignment a;
  a.task_id = task_id;
  size_t row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 3)
      throw DataError("split file row " + std::to_string(row) + ": expected 3 fields");
    if (std::stoi(fields[1]) != task_id) continue;
    a.by_id[trim(fields[0])] = split_from_name(trim(fields[2]));
  }
  return a;
}

}  // namespace uwf

#include <catch2/catch_amalgamated.hpp>

#include "uwf/data.hpp"

using namespace uwf;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  auto path = std::filesystem::temp_directory_path() / ("uwf_ingest_" + name);
  write_text_file(path, content);
  return path;
}

std::vector<ImageRecord> synthetic_records(int n_negative, int n_positive, int task_id) {
  std::vector<ImageRecord> out;
  for (int i = 0; i < n_negative + n_positive; ++i) {
    ImageRecord r;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "img_%04d", i);
    r.image_id = buf;
    r.image_path = "/data/" + r.image_id + ".png";
    r.task_labels[task_id] = i < n_negative ? 0 : 1;
    out.push_back(std::move(r));
  }
  return out;
}

// Table-1 distribution of the UWF4DR protocol, reconstructed per split.
std::vector<ImageRecord> table1_records() {
  struct Row { int task, neg, pos; Split split; };
  const std::vector<Row> rows = {
      {1, 138, 179, Split::train}, {1, 42, 37, Split::val}, {1, 49, 50, Split::test},
      {2, 69, 92, Split::train},   {2, 16, 24, Split::val}, {2, 25, 25, Split::test},
      {3, 75, 61, Split::train},   {3, 15, 19, Split::val}, {3, 21, 21, Split::test},
  };
  std::vector<ImageRecord> out;
  int counter = 0;
  for (const auto& row : rows)
    for (int i = 0; i < row.neg + row.pos; ++i) {
      ImageRecord r;
      r.image_id = "t" + std::to_string(row.task) + "_" + std::to_string(counter++);
      r.image_path = "/data/x.png";
      r.task_labels[row.task] = i < row.neg ? 0 : 1;
      r.split = row.split;
      out.push_back(std::move(r));
    }
  return out;
}

}  // namespace

TEST_CASE("load_manifest parses labeled rows") {
  auto path = temp_file("ok.csv",
                        "image_id,image_path,task1_label,task2_label,task3_label\n"
                        "a,/x/a.png,1,,0\n"
                        "b,/x/b.png,,1,\n");
  auto records = load_manifest(path);
  REQUIRE(records.size() == 2);
  REQUIRE(records[0].has_label(1));
  REQUIRE(records[0].label(1) == 1);
  REQUIRE_FALSE(records[0].has_label(2));
  REQUIRE(records[0].label(3) == 0);
  REQUIRE(records[1].has_label(2));
  REQUIRE_FALSE(records[1].has_label(1));
}

TEST_CASE("load_manifest accepts a header-only file") {
  auto path = temp_file("empty.csv", "image_id,image_path,task1_label,task2_label,task3_label\n");
  REQUIRE(load_manifest(path).empty());
}

TEST_CASE("load_manifest rejects malformed rows with the row number") {
  auto bad_label = temp_file("bad_label.csv",
                             "image_id,image_path,task1_label,task2_label,task3_label\n"
                             "a,/x/a.png,1,,\n"
                             "b,/x/b.png,,2,\n");
  REQUIRE_THROWS_WITH(load_manifest(bad_label), Catch::Matchers::ContainsSubstring("row 3"));

  auto no_labels = temp_file("no_labels.csv",
                             "image_id,image_path,task1_label,task2_label,task3_label\n"
                             "a,/x/a.png,,,\n");
  REQUIRE_THROWS_WITH(load_manifest(no_labels),
                      Catch::Matchers::ContainsSubstring("no label for any task"));

  auto bad_header = temp_file("bad_header.csv", "id,path,l1,l2,l3\na,/x,1,,\n");
  REQUIRE_THROWS_AS(load_manifest(bad_header), DataError);

  REQUIRE_THROWS_AS(load_manifest("/nonexistent/manifest.csv"), DataError);

  auto dup = temp_file("dup.csv",
                       "image_id,image_path,task1_label,task2_label,task3_label\n"
                       "a,/x/a.png,1,,\n"
                       "a,/x/a2.png,0,,\n");
  REQUIRE_THROWS_WITH(load_manifest(dup), Catch::Matchers::ContainsSubstring("duplicate"));
}

TEST_CASE("manifest write/load round trip reproduces records exactly") {
  auto records = synthetic_records(3, 4, 1);
  records[1].task_labels[2] = 1;
  records[2].task_labels[3] = 0;
  auto path = std::filesystem::temp_directory_path() / "uwf_ingest_roundtrip.csv";
  write_manifest(path, records);
  auto loaded = load_manifest(path);
  REQUIRE(loaded.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    REQUIRE(loaded[i].image_id == records[i].image_id);
    REQUIRE(loaded[i].image_path == records[i].image_path);
    REQUIRE(loaded[i].task_labels == records[i].task_labels);
  }
}

TEST_CASE("stratified split reproduces the 317/79/99 protocol sizes") {
  // 495 records at the task-1 class balance (0.565 / 0.435 -> 280 / 215)
  auto records = synthetic_records(215, 280, 1);
  auto a = stratified_split(records, {0.64, 0.16, 0.20}, 42, 1);
  auto sizes = a.sizes();
  REQUIRE(sizes[0] == 317);
  REQUIRE(sizes[1] == 79);
  REQUIRE(sizes[2] == 99);
}

TEST_CASE("stratified split divides exactly when ratios allow") {
  auto records = synthetic_records(0, 10, 2);
  for (uint64_t seed : {1ull, 7ull, 99ull}) {
    auto a = stratified_split(records, {0.8, 0.1, 0.1}, seed, 2);
    auto sizes = a.sizes();
    REQUIRE(sizes[0] == 8);
    REQUIRE(sizes[1] == 1);
    REQUIRE(sizes[2] == 1);
  }
}

TEST_CASE("stratified split is deterministic for a fixed seed") {
  auto records = synthetic_records(40, 60, 1);
  auto a = stratified_split(records, {0.64, 0.16, 0.20}, 123, 1);
  auto b = stratified_split(records, {0.64, 0.16, 0.20}, 123, 1);
  REQUIRE(a.by_id == b.by_id);
  auto c = stratified_split(records, {0.64, 0.16, 0.20}, 124, 1);
  REQUIRE(a.by_id != c.by_id);  // overwhelmingly likely for 100 records
}

TEST_CASE("stratified split covers every record exactly once and stratifies within one item") {
  Rng rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    int neg = 5 + static_cast<int>(rng.below(120));
    int pos = 5 + static_cast<int>(rng.below(120));
    auto records = synthetic_records(neg, pos, 1);
    std::array<double, 3> ratios{0.64, 0.16, 0.20};
    auto a = stratified_split(records, ratios, rng.next_u64(), 1);
    REQUIRE(a.by_id.size() == records.size());
    std::array<std::array<int, 3>, 2> counts{};  // [class][split]
    for (const auto& r : records)
      counts[static_cast<size_t>(r.label(1))][static_cast<size_t>(a.at(r.image_id))]++;
    for (int cls = 0; cls < 2; ++cls) {
      int class_n = cls == 0 ? neg : pos;
      for (int s = 0; s < 3; ++s) {
        double target = ratios[static_cast<size_t>(s)] * class_n;
        REQUIRE(std::abs(counts[static_cast<size_t>(cls)][static_cast<size_t>(s)] - target) <
                1.0);
      }
    }
  }
}

TEST_CASE("stratified split rejects bad inputs") {
  auto records = synthetic_records(3, 3, 1);
  REQUIRE_THROWS_AS(stratified_split(records, {0.5, 0.2, 0.2}, 1, 1), ConfigError);
  auto unlabeled = synthetic_records(3, 3, 2);
  REQUIRE_THROWS_AS(stratified_split(unlabeled, {0.64, 0.16, 0.2}, 1, 1), DataError);
  auto tiny = synthetic_records(2, 8, 1);  // negative class smaller than 3 splits
  REQUIRE_THROWS_AS(stratified_split(tiny, {0.64, 0.16, 0.2}, 1, 1), DataError);
}

TEST_CASE("class_distribution reproduces the Table-1 counts") {
  auto records = table1_records();
  REQUIRE(class_distribution(records, 1, Split::train) == std::make_pair(138, 179));
  REQUIRE(class_distribution(records, 1, Split::val) == std::make_pair(42, 37));
  REQUIRE(class_distribution(records, 1, Split::test) == std::make_pair(49, 50));
  REQUIRE(class_distribution(records, 2, Split::train) == std::make_pair(69, 92));
  REQUIRE(class_distribution(records, 3, Split::test) == std::make_pair(21, 21));
  REQUIRE(class_distribution({}, 1, Split::train) == std::make_pair(0, 0));
}

TEST_CASE("task-1 totals match the 495-image protocol") {
  auto records = table1_records();
  int task1 = 0;
  for (const auto& r : records) task1 += r.has_label(1);
  REQUIRE(task1 == 495);
}

TEST_CASE("split csv round trip") {
  auto records = synthetic_records(10, 10, 3);
  auto a = stratified_split(records, {0.64, 0.16, 0.20}, 9, 3);
  auto path = std::filesystem::temp_directory_path() / "uwf_ingest_split.csv";
  write_split_csv(path, a);
  auto loaded = load_split_csv(path, 3);
  REQUIRE(loaded.by_id == a.by_id);
  REQUIRE_THROWS_AS(load_split_csv("/nonexistent/split.csv", 1), DataError);
}

TEST_CASE("apply_split attaches assignments to records") {
  auto records = synthetic_records(6, 6, 1);
  auto a = stratified_split(records, {0.5, 0.25, 0.25}, 3, 1);
  apply_split(records, a);
  for (const auto& r : records) {
    REQUIRE(r.split.has_value());
    REQUIRE(*r.split == a.at(r.image_id));
  }
}

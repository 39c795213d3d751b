#include <doctest.h>

#include <fstream>
#include <set>

#include "aad/core.hpp"
#include "aad/synthetic.hpp"
#include "fixtures.hpp"

using namespace aad;
using aad::testing::TempDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("dimension names and indices are a bijection") {
  for (std::size_t i = 0; i < kNumDimensions; ++i) {
    const Dimension m = dimension_from_index(i);
    CHECK(index_of(m) == i);
    CHECK(parse_dimension(to_string(m)) == m);
  }
  CHECK_THROWS_AS(dimension_from_index(4), ValidationError);
  CHECK_THROWS_AS(parse_dimension("XY"), ValidationError);
  CHECK(pole_letter(Dimension::IE, 1) == 'I');
  CHECK(pole_letter(Dimension::PJ, 0) == 'J');
  CHECK(label_string(Labels{1, 0, 1, 0}) == "INTJ");
}

TEST_CASE("load_dataset parses three labeled users") {
  TempDir dir("core");
  write_text(dir / "users.jsonl",
             R"({"user_id":"a","posts":["hi there"],"labels":{"IE":1,"SN":0,"TF":1,"PJ":0},"split":"train"}
{"user_id":"b","posts":["x","y"],"labels":{"IE":0,"SN":1,"TF":0,"PJ":1},"split":"test"}
{"user_id":"c","posts":["z"],"labels":{"IE":1,"SN":1,"TF":1,"PJ":1}}
)");
  const auto users = load_dataset(dir / "users.jsonl");
  REQUIRE(users.size() == 3);
  CHECK(users[0].labels.value() == Labels{1, 0, 1, 0});
  CHECK(users[1].posts.size() == 2);
  CHECK(users[1].split == Split::test);
  CHECK_FALSE(users[2].split.has_value());
}

TEST_CASE("load_dataset errors name the line") {
  TempDir dir("core");
  write_text(dir / "missing.jsonl", "{\"user_id\":\"a\",\"posts\":[\"p\"]}\n{\"user_id\":\"b\"}\n");
  try {
    load_dataset(dir / "missing.jsonl");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  write_text(dir / "dup.jsonl", "{\"user_id\":\"a\",\"posts\":[\"p\"]}\n{\"user_id\":\"a\",\"posts\":[\"q\"]}\n");
  CHECK_THROWS_AS(load_dataset(dir / "dup.jsonl"), ValidationError);
  write_text(dir / "dim.jsonl", "{\"user_id\":\"a\",\"posts\":[\"p\"],\"labels\":{\"IE\":1,\"SN\":0,\"TF\":1,\"XX\":0}}\n");
  CHECK_THROWS(load_dataset(dir / "dim.jsonl"));
}

TEST_CASE("a user without posts is accepted only with a precomputed embedding") {
  TempDir dir("core");
  write_text(dir / "u.jsonl", "{\"user_id\":\"a\",\"posts\":[]}\n");
  CHECK_THROWS(load_dataset(dir / "u.jsonl"));
  const auto users =
      load_dataset(dir / "u.jsonl", DatasetFormat::jsonl, [](const std::string& id) { return id == "a"; });
  CHECK(users.size() == 1);
}

TEST_CASE("dataset round trip preserves records") {
  TempDir dir("core");
  SyntheticConfig c;
  c.n_users = 20;
  c.posts_per_user = 3;
  auto corpus = generate_synthetic(c);
  const auto users = split_dataset(corpus.users, {}, 3);
  save_dataset(dir / "users.jsonl", users);
  CHECK(load_dataset(dir / "users.jsonl") == users);
}

TEST_CASE("split counts of a 60/20/20 file match a brute-force count of its lines") {
  TempDir dir("core");
  SyntheticConfig c;
  c.n_users = 50;
  c.posts_per_user = 1;
  const auto users = split_dataset(generate_synthetic(c).users, {0.6, 0.2, 0.2}, 11);
  save_dataset(dir / "users.jsonl", users);
  std::ifstream in(dir / "users.jsonl");
  std::string line;
  std::size_t tr = 0, va = 0, te = 0;
  while (std::getline(in, line)) {
    tr += line.find("\"split\":\"train\"") != std::string::npos;
    va += line.find("\"split\":\"validation\"") != std::string::npos;
    te += line.find("\"split\":\"test\"") != std::string::npos;
  }
  const SplitCounts counts = count_splits(load_dataset(dir / "users.jsonl"));
  CHECK(counts == SplitCounts{tr, va, te});
  CHECK(counts == SplitCounts{30, 10, 10});
}

TEST_CASE("load_questionnaire reads a reference item and defaults the scale") {
  TempDir dir("core");
  write_text(dir / "q.json", R"({"version":"v1","items":[
    {"id":"Q41","text":"You avoid making phone calls.","construct":"IE"},
    {"id":"Q2","text":"Complex and novel ideas excite you.","construct":"SN"},
    {"id":"Q3","text":"Feelings persuade you.","construct":"TF"},
    {"id":"Q4","text":"Your spaces are organized.","construct":"PJ"}]})");
  const Questionnaire q = load_questionnaire(dir / "q.json");
  REQUIRE(q.size() == 4);
  CHECK(q[0].item_id == "Q41");
  CHECK(q[0].text == "You avoid making phone calls.");
  CHECK(q[0].construct == Dimension::IE);
  CHECK(q[0].scale_min == 1);
  CHECK(q[0].scale_max == 7);
  save_questionnaire(dir / "q2.json", q);
  CHECK(load_questionnaire(dir / "q2.json").items() == q.items());
}

TEST_CASE("a questionnaire missing a dimension is a structural error") {
  TempDir dir("core");
  write_text(dir / "q.json", R"({"version":"v1","items":[
    {"id":"a","text":"x","construct":"IE"},{"id":"b","text":"y","construct":"SN"},
    {"id":"c","text":"z","construct":"TF"}]})");
  CHECK_THROWS_AS(load_questionnaire(dir / "q.json"), ValidationError);
  CHECK_THROWS_AS(Questionnaire("v", {{"a", "x", Dimension::IE, 1, 7}, {"a", "y", Dimension::SN, 1, 7},
                                      {"c", "z", Dimension::TF, 1, 7}, {"d", "w", Dimension::PJ, 1, 7}}),
                  ValidationError);
  CHECK_THROWS_AS(Questionnaire("v", {{"a", "x", Dimension::IE, 1, 2}, {"b", "y", Dimension::SN, 1, 7},
                                      {"c", "z", Dimension::TF, 1, 7}, {"d", "w", Dimension::PJ, 1, 7}}),
                  ValidationError);
}

TEST_CASE("a 60-item synthetic questionnaire has 15 items per dimension") {
  const Questionnaire q = synthetic_questionnaire(15);
  CHECK(q.size() == 60);
  for (Dimension m : kAllDimensions) CHECK(q.items_of(m).size() == 15);
}

TEST_CASE("split_dataset sizes, disjointness and determinism") {
  std::vector<UserRecord> users;
  for (int i = 0; i < 10; ++i) users.push_back({"u" + std::to_string(i), {"p"}, std::nullopt, std::nullopt});
  const auto a = split_dataset(users, {0.6, 0.2, 0.2}, 7);
  CHECK(count_splits(a) == SplitCounts{6, 2, 2});
  CHECK(split_dataset(users, {0.6, 0.2, 0.2}, 7) == a);
  std::set<std::string> seen;
  for (Split s : {Split::train, Split::validation, Split::test}) {
    for (const auto* u : select_split(a, s)) CHECK(seen.insert(u->user_id).second);
  }
  CHECK(seen.size() == 10);
  CHECK_THROWS_AS(split_dataset({users[0], users[1]}, {0.6, 0.2, 0.2}, 1), ValidationError);
  CHECK_THROWS_AS(split_dataset(users, {0.5, 0.2, 0.2}, 1), ValidationError);
}

TEST_CASE("1000 synthetic users land in exactly one split each") {
  SyntheticConfig c;
  c.posts_per_user = 1;
  const auto users = split_dataset(generate_synthetic(c).users, {}, 5);
  std::map<std::string, int> hits;
  for (Split s : {Split::train, Split::validation, Split::test}) {
    for (const auto* u : select_split(users, s)) ++hits[u->user_id];
  }
  CHECK(hits.size() == 1000);
  for (const auto& [id, n] : hits) CHECK(n == 1);
}

TEST_CASE("answer records: mean and population variance") {
  const auto r = AnswerRecord::from_samples("u", "i", {2, 4});
  CHECK(r.mean == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(r.variance == doctest::Approx(1.0).epsilon(1e-12));
  const auto one = AnswerRecord::from_samples("u", "i", {5});
  CHECK(one.mean == 5.0);
  CHECK(one.variance == 0.0);
  CHECK_THROWS_AS(AnswerRecord::from_samples("u", "i", {}), ValidationError);
}

TEST_CASE("answers file: last write wins, round trip recomputes statistics") {
  TempDir dir("core");
  write_text(dir / "a.jsonl", R"({"user_id":"u","item_id":"i","samples":[1,2]}
{"user_id":"u","item_id":"i","samples":[6,6,6]}
{"user_id":"v","item_id":"i","samples":[3]}
)");
  const AnswerStore s = load_answers(dir / "a.jsonl");
  CHECK(s.size() == 2);
  CHECK(s.find("u", "i")->mean == 6.0);
  save_answers(dir / "b.jsonl", s);
  const AnswerStore t = load_answers(dir / "b.jsonl");
  CHECK(t.size() == 2);
  CHECK(t.find("v", "i")->samples == std::vector<double>{3});
}

TEST_CASE("merging two stores averages the pooled samples") {
  AnswerStore a, b;
  a.insert(AnswerRecord::from_samples("u", "i", {2, 2}));
  b.insert(AnswerRecord::from_samples("u", "i", {4, 4}));
  b.insert(AnswerRecord::from_samples("u", "j", {1}));
  const AnswerStore m = AnswerStore::merge_average(a, b);
  CHECK(m.find("u", "i")->mean == 3.0);
  CHECK(m.size() == 2);
}

TEST_CASE("coverage gaps list missing pairs") {
  const Questionnaire q = aad::testing::small_questionnaire(4);
  std::vector<UserRecord> users = {{"u", {"p"}, Labels{1, 1, 1, 1}, Split::train}};
  AnswerStore s;
  s.insert(AnswerRecord::from_samples("u", "Q1", {3}));
  std::vector<const UserRecord*> ptrs = {&users[0]};
  const auto gaps = coverage_gaps(s, ptrs, q);
  CHECK(gaps.size() == 3);
}

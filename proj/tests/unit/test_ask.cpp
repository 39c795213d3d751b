#include <doctest.h>

#include <atomic>
#include <cmath>
#include <deque>
#include <fstream>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "aad/ask.hpp"
#include "fixtures.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

using namespace aad;
using aad::testing::small_questionnaire;
using nlohmann::json;

namespace {

UserRecord user(const std::string& id, std::vector<std::string> posts, std::optional<Labels> labels = {}) {
  UserRecord u;
  u.user_id = id;
  u.posts = std::move(posts);
  u.labels = labels;
  return u;
}

std::string chat_body(const std::string& content) {
  return json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

/// Replays scripted responses in order and records every request body.
struct Script {
  std::deque<HttpResult> replies;
  std::vector<std::string> bodies;
  std::mutex mu;

  void ok(const std::string& content, int times = 1) {
    for (int i = 0; i < times; ++i) replies.push_back({200, chat_body(content), {}, {}});
  }
  void status(int code, std::optional<double> retry_after = {}) { replies.push_back({code, "", retry_after, {}}); }

  ChatTransport transport() {
    return [this](const std::string& body) {
      std::lock_guard lock(mu);
      bodies.push_back(body);
      REQUIRE_FALSE(replies.empty());
      HttpResult r = replies.front();
      replies.pop_front();
      return r;
    };
  }
};

LlmClientConfig test_config(std::vector<double>* sleeps = nullptr) {
  LlmClientConfig c;
  c.model = "mock-model";
  c.sleep = [sleeps](double s) {
    if (sleeps) sleeps->push_back(s);
  };
  return c;
}

RolePlayRequest request(const std::string& u, const std::string& i, int t) { return {u, i, "prompt", t, 0.7}; }

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("render_prompt substitutes placeholders and drops label lines") {
  const PromptTemplate t{"# comment\nType: {label}\nPosts:\n{posts}\nQ: {q} ({lo}-{hi})"};
  const Item item{"Q1", "I enjoy parties.", Dimension::IE, 1, 7};
  const UserRecord u = user("u1", {"first {q} post", "second"}, Labels{1, 0, 1, 0});
  CHECK(render_prompt(t, u, item, true) == "Type: INTJ\nPosts:\nfirst {q} post\nsecond\nQ: I enjoy parties. (1-7)");
  CHECK(render_prompt(t, u, item, false) == "Posts:\nfirst {q} post\nsecond\nQ: I enjoy parties. (1-7)");
  CHECK_THROWS_AS(render_prompt(t, user("u2", {"x"}), item, true), ValidationError);
  CHECK_THROWS_AS(render_prompt(PromptTemplate{"{posts} {q} {mood}"}, u, item, false), ValidationError);
  CHECK_THROWS_AS(render_prompt(PromptTemplate{"just {q}"}, u, item, false), ValidationError);
}

TEST_CASE("render_prompt cuts posts at the character budget") {
  const PromptTemplate t{"{posts}|{q}"};
  const Item item{"Q1", "q", Dimension::IE, 1, 7};
  const UserRecord u = user("u", {"aaaa", "bbbb", "cccc"});
  CHECK(render_prompt(t, u, item, false, 100) == "aaaa\nbbbb\ncccc|q");
  CHECK(render_prompt(t, u, item, false, 7) == "aaaa\nbb|q");
  CHECK(render_prompt(t, u, item, false, 4) == "aaaa|q");
  CHECK(render_prompt(t, u, item, false, 0) == "|q");
}

TEST_CASE("builtin template renders without a label line when labels are excluded") {
  const Item item{"Q1", "I like maps.", Dimension::SN, 1, 5};
  const UserRecord u = user("u", {"hello"}, Labels{0, 0, 0, 0});
  const std::string with = render_prompt(PromptTemplate::builtin(), u, item, true);
  const std::string without = render_prompt(PromptTemplate::builtin(), u, item, false);
  CHECK(with.find("ENFJ") != std::string::npos);
  CHECK(without.find("ENFJ") == std::string::npos);
  CHECK(without.find("MBTI") == std::string::npos);
  CHECK(without.find("from 1") != std::string::npos);
  CHECK(without.find("to 5") != std::string::npos);
  CHECK(without.find('#') == std::string::npos);
}

TEST_CASE("build_requests covers users x items") {
  const Questionnaire q = small_questionnaire(5);
  const UserRecord a = user("a", {"p"}), b = user("b", {"p"});
  const auto reqs = build_requests(PromptTemplate::builtin(), {&a, &b}, q, false, 3, 0.5);
  REQUIRE(reqs.size() == 10);
  CHECK(reqs[6].user_id == "b");
  CHECK(reqs[6].item_id == "Q2");
  CHECK(reqs[6].n_samples == 3);
  CHECK_THROWS_AS(build_requests(PromptTemplate::builtin(), {&a}, q, false, 0, 0.5), ValidationError);
}

TEST_CASE("parse_score and extract_reply") {
  CHECK(parse_score("5") == 5.0);
  CHECK(parse_score("I'd say 4.5 out of 7") == 4.5);
  CHECK(parse_score("-2") == -2.0);
  CHECK_FALSE(parse_score("strongly agree").has_value());
  CHECK(extract_reply(chat_body("6")) == "6");
  CHECK_FALSE(extract_reply("{not json").has_value());
  CHECK_FALSE(extract_reply(R"({"choices": []})").has_value());
}

TEST_CASE("ask_llm: three identical replies give mean 5, variance 0") {
  aad::testing::TempDir dir("ask");
  const Questionnaire q = small_questionnaire(4);
  Script s;
  s.ok("5", 3);
  const auto res = ask_llm(test_config(), s.transport(), {request("u", "Q1", 3)}, q, dir / "a.jsonl", dir / "f.jsonl");
  REQUIRE(res.records.size() == 1);
  CHECK(res.records[0].mean == 5.0);
  CHECK(res.records[0].variance == 0.0);
  CHECK(res.failures.empty());
  const json body = json::parse(s.bodies[0]);
  CHECK(body["model"] == "mock-model");
  CHECK(body["messages"][0]["content"] == "prompt");
  CHECK(body["temperature"] == 0.7);
  CHECK_FALSE(std::filesystem::exists(dir / "f.jsonl"));
}

TEST_CASE("ask_llm clamps out-of-scale scores") {
  aad::testing::TempDir dir("ask");
  Script s;
  s.ok("9");
  const auto res = ask_llm(test_config(), s.transport(), {request("u", "Q1", 1)}, small_questionnaire(4),
                           dir / "a.jsonl", dir / "f.jsonl");
  CHECK(res.records[0].samples == std::vector<double>{7.0});
  CHECK(res.clamped == 1);
}

TEST_CASE("ask_llm retries unparseable replies") {
  aad::testing::TempDir dir("ask");
  Script s;
  s.ok("no idea");
  s.ok("agree");
  s.ok("4");
  const auto res = ask_llm(test_config(), s.transport(), {request("u", "Q1", 1)}, small_questionnaire(4),
                           dir / "a.jsonl", dir / "f.jsonl");
  CHECK(res.records[0].samples == std::vector<double>{4.0});
  CHECK(s.bodies.size() == 3);

  Script bad;
  auto cfg = test_config();
  cfg.max_parse_retries = 1;
  bad.ok("nope", 2);
  const auto failed = ask_llm(cfg, bad.transport(), {request("v", "Q2", 1)}, small_questionnaire(4),
                              dir / "b.jsonl", dir / "fb.jsonl");
  CHECK(failed.records.empty());
  REQUIRE(failed.failures.size() == 1);
  CHECK(failed.failures[0].item_id == "Q2");
  std::ifstream in(dir / "fb.jsonl");
  const json line = json::parse(in);
  CHECK(line["user_id"] == "v");
  CHECK(line["reason"].get<std::string>().find("parse failure") != std::string::npos);
}

TEST_CASE("ask_llm backs off on 429 and 5xx, honoring Retry-After") {
  aad::testing::TempDir dir("ask");
  std::vector<double> sleeps;
  Script s;
  s.status(429, 3.0);
  s.status(503);
  s.status(500);
  s.ok("2");
  const auto res = ask_llm(test_config(&sleeps), s.transport(), {request("u", "Q1", 1)}, small_questionnaire(4),
                           dir / "a.jsonl", dir / "f.jsonl");
  CHECK(res.records[0].mean == 2.0);
  CHECK(sleeps == std::vector<double>{3.0, 2.0, 4.0});

  Script down;
  auto cfg = test_config();
  cfg.max_transport_retries = 2;
  for (int i = 0; i < 3; ++i) down.status(502);
  const auto failed = ask_llm(cfg, down.transport(), {request("u", "Q2", 1)}, small_questionnaire(4),
                              dir / "b.jsonl", dir / "fb.jsonl");
  REQUIRE(failed.failures.size() == 1);
  CHECK(failed.failures[0].reason.find("HTTP 502") != std::string::npos);
}

TEST_CASE("ask_llm aborts on rejected credentials") {
  aad::testing::TempDir dir("ask");
  for (int code : {401, 403}) {
    Script s;
    s.status(code);
    CHECK_THROWS_AS(ask_llm(test_config(), s.transport(), {request("u", "Q1", 1)}, small_questionnaire(4),
                            dir / "a.jsonl", dir / "f.jsonl"),
                    Error);
  }
}

TEST_CASE("ask_llm resumes from a partial answers file") {
  aad::testing::TempDir dir("ask");
  const Questionnaire q = small_questionnaire(4);
  std::vector<RolePlayRequest> reqs;
  for (const char* id : {"Q1", "Q2", "Q3"}) reqs.push_back(request("u", id, 2));
  {
    Script s;
    s.ok("3", 2);
    s.status(401);
    CHECK_THROWS(ask_llm(test_config(), s.transport(), reqs, q, dir / "a.jsonl", dir / "f.jsonl"));
  }
  CHECK(count_lines(dir / "a.jsonl") == 1);
  {
    std::ofstream torn(dir / "a.jsonl", std::ios::app);
    torn << R"({"user_id": "u", "item_id": "Q2", "sam)";
  }
  Script s;
  s.ok("6", 4);
  const auto res = ask_llm(test_config(), s.transport(), reqs, q, dir / "a.jsonl", dir / "f.jsonl");
  CHECK(res.resumed == 1);
  CHECK(s.bodies.size() == 4);
  CHECK(res.records.size() == 3);
  CHECK(count_lines(dir / "a.jsonl") == 3);
  const AnswerStore store = aggregate_answers(res.records);
  CHECK(store.find("u", "Q1")->mean == 3.0);
  CHECK(store.find("u", "Q3")->mean == 6.0);
}

TEST_CASE("ask_llm with concurrent workers collects every pair") {
  aad::testing::TempDir dir("ask");
  const Questionnaire q = small_questionnaire(8);
  std::vector<RolePlayRequest> reqs;
  for (const Item& it : q.items()) reqs.push_back(request("u", it.item_id, 2));
  std::atomic<int> calls{0};
  auto cfg = test_config();
  cfg.max_in_flight = 4;
  const auto res = ask_llm(
      cfg,
      [&](const std::string&) {
        ++calls;
        return HttpResult{200, chat_body("4"), {}, {}};
      },
      reqs, q, dir / "a.jsonl", dir / "f.jsonl");
  CHECK(res.records.size() == 8);
  CHECK(calls.load() == 16);
  CHECK(count_lines(dir / "a.jsonl") == 8);
}

TEST_CASE("http transport against a local server") {
  httplib::Server server;
  std::string auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    const json body = json::parse(req.body);
    res.set_content(chat_body(body["model"] == "m" ? "5" : "1"), "application/json");
  });
  server.Post("/slow", [](const httplib::Request&, httplib::Response& res) {
    res.status = 429;
    res.set_header("Retry-After", "7");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("AAD_TEST_KEY", "sekrit", 1);
  LlmClientConfig c;
  c.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  c.api_key_env = "AAD_TEST_KEY";
  c.timeout = 5;
  const HttpResult r = make_http_transport(c)(json{{"model", "m"}}.dump());
  CHECK(r.status == 200);
  CHECK(extract_reply(r.body) == "5");
  CHECK(auth == "Bearer sekrit");

  c.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/slow";
  const HttpResult slow = make_http_transport(c)("{}");
  CHECK(slow.status == 429);
  CHECK(slow.retry_after == 7.0);

  server.stop();
  th.join();
  CHECK_THROWS_AS(make_http_transport([] {
                    LlmClientConfig bad;
                    bad.endpoint = "ftp://x";
                    return bad;
                  }()),
                  ValidationError);
}

TEST_CASE("ask_synthetic answer model") {
  const Questionnaire q = small_questionnaire(8);
  LatentTraitProfile neutral{"n", {0.3, -0.4, 0.9, -1.0}, 0.0};
  for (const AnswerRecord& r : ask_synthetic({neutral}, q, 0.0, 3, 1)) {
    CHECK(r.mean == 4.0);
    CHECK(r.variance == 0.0);
  }
  LatentTraitProfile extreme{"e", {1.0, 1.0, 1.0, 1.0}, 0.0};
  for (const AnswerRecord& r : ask_synthetic({extreme}, q, 1.0, 2, 1)) CHECK(r.mean == 7.0);
  LatentTraitProfile half{"h", {0.5, -0.5, 0.5, -0.5}, 0.0};
  const auto recs = ask_synthetic({half}, q, 1.0, 1, 1, {{"Q2", 0.5, 1.0}});
  CHECK(recs[0].mean == 5.5);
  CHECK(recs[1].mean == 3.25);
  CHECK(half.labels() == Labels{1, 0, 1, 0});

  std::vector<LatentTraitProfile> group;
  for (int i = 0; i < 200; ++i) {
    group.push_back({"u" + std::to_string(i), {i % 2 ? 0.8 : -0.8, 0, 0, 0}, 0.5});
  }
  const auto answers = ask_synthetic(group, q, 1.0, 5, 13);
  double pos = 0, neg = 0;
  for (std::size_t u = 0; u < 200; ++u) (u % 2 ? pos : neg) += answers[u * 8].mean / 100.0;
  CHECK(pos - neg > 1.0);
  const auto again = ask_synthetic(group, q, 1.0, 5, 13);
  CHECK(again[17].samples == answers[17].samples);
  for (const auto& r : answers) {
    for (double s : r.samples) {
      CHECK(s >= 1.0);
      CHECK(s <= 7.0);
    }
  }
  CHECK_THROWS_AS(ask_synthetic({neutral}, q, 1.5, 1, 1), ValidationError);
  LatentTraitProfile wild{"w", {2.0, 0, 0, 0}, 0.5};
  CHECK_THROWS_AS(ask_synthetic({wild}, q, 1.0, 1, 1), ValidationError);
}

TEST_CASE("aggregate_answers rejects duplicates and keeps two-pass statistics") {
  const std::vector<double> s = {1e9 + 4, 1e9 + 7, 1e9 + 13, 1e9 + 16};
  const AnswerStore store = aggregate_answers({AnswerRecord::from_samples("u", "Q1", s)});
  // Two-pass population variance of {4, 7, 13, 16} is 22.5.
  CHECK(store.find("u", "Q1")->variance == doctest::Approx(22.5).epsilon(1e-9));
  CHECK(store.find("u", "Q1")->mean == 1e9 + 10);
  CHECK_THROWS_AS(aggregate_answers({AnswerRecord::from_samples("u", "Q1", {1}),
                                     AnswerRecord::from_samples("u", "Q1", {2})}),
                  ValidationError);
}

TEST_CASE("shipped prompt asset matches the builtin template") {
  const PromptTemplate file = PromptTemplate::load(AAD_SOURCE_DIR "/assets/roleplay_prompt.txt");
  CHECK(file.text == PromptTemplate::builtin().text);
}

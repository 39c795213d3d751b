#include "aad/ask.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace aad {

using nlohmann::json;

namespace {

constexpr std::string_view kBuiltinTemplate =
    "# Role-play questionnaire prompt. Lines starting with # are dropped.\n"
    "You are taking on the perspective of the author of the social media posts below.\n"
    "Answer the questionnaire statement exactly as this person would.\n"
    "This person's MBTI type is {label}. Stay consistent with it.\n"
    "\n"
    "POSTS:\n"
    "{posts}\n"
    "\n"
    "STATEMENT: {q}\n"
    "Reply with a single number from {lo} (strongly disagree) to {hi} (strongly agree) and nothing else.\n";

const std::set<std::string, std::less<>> kPlaceholders = {"posts", "q", "lo", "hi", "label"};

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

/// Template lines starting with '#' are comments and never reach the model.
std::string strip_comments(std::string_view text) {
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = text.substr(pos, nl - pos);
    if (line.empty() || line.front() != '#') {
      out.append(line);
      if (nl < text.size()) out.push_back('\n');
    }
    pos = nl + 1;
  }
  return out;
}

std::string format_bound(int v) { return std::to_string(v); }

std::string join_posts(const UserRecord& user, std::size_t budget) {
  std::string out;
  bool truncated = false;
  for (const std::string& p : user.posts) {
    const std::size_t need = p.size() + (out.empty() ? 0 : 1);
    if (out.size() + need > budget) {
      const std::size_t room = budget - out.size();
      if (room > (out.empty() ? 0u : 1u)) {
        if (!out.empty()) out.push_back('\n');
        out.append(p, 0, budget - out.size());
      }
      truncated = true;
      break;
    }
    if (!out.empty()) out.push_back('\n');
    out += p;
  }
  if (truncated) {
    spdlog::info("posts of user {} truncated to {} characters", user.user_id, budget);
  }
  return out;
}

void default_sleep(double seconds) {
  std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

struct PersistedPairs {
  std::vector<AnswerRecord> records;
  std::set<std::pair<std::string, std::string>> keys;
};

/// Reads a partially written answers file. A torn final line (interrupted
/// write) is ignored; malformed lines elsewhere are errors.
PersistedPairs read_persisted(const std::filesystem::path& path) {
  PersistedPairs out;
  std::ifstream in(path);
  if (!in) return out;
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error& e) {
      if (i + 1 == lines.size()) {
        spdlog::warn("{}: ignoring torn final line", path.string());
        break;
      }
      throw ParseError(path.string(), i + 1, e.what());
    }
    AnswerRecord r = AnswerRecord::from_samples(j.at("user_id").get<std::string>(), j.at("item_id").get<std::string>(),
                                                j.at("samples").get<std::vector<double>>());
    out.keys.emplace(r.user_id, r.item_id);
    out.records.push_back(std::move(r));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Prompts

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open prompt template " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return PromptTemplate{ss.str()};
}

PromptTemplate PromptTemplate::builtin() { return PromptTemplate{std::string(kBuiltinTemplate)}; }

std::string render_prompt(const PromptTemplate& tmpl, const UserRecord& user, const Item& item, bool include_label,
                          std::size_t post_char_budget) {
  std::string text = strip_comments(tmpl.text);

  // Check placeholders against the template itself so braces inside posts are harmless.
  static const std::regex placeholder(R"(\{([A-Za-z_][A-Za-z0-9_]*)\})");
  for (auto it = std::sregex_iterator(text.begin(), text.end(), placeholder); it != std::sregex_iterator(); ++it) {
    const std::string name = (*it)[1].str();
    if (!kPlaceholders.contains(name)) throw ValidationError("unresolved placeholder {" + name + "} in prompt template");
  }
  if (text.find("{posts}") == std::string::npos || text.find("{q}") == std::string::npos) {
    throw ValidationError("prompt template must contain {posts} and {q}");
  }

  if (include_label) {
    if (!user.labels) throw ValidationError("user " + user.user_id + " has no labels to include in the prompt");
    replace_all(text, "{label}", label_string(*user.labels));
  } else {
    std::string kept;
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      if (line.find("{label}") != std::string::npos) continue;
      kept += line;
      kept.push_back('\n');
    }
    if (!text.empty() && text.back() != '\n' && !kept.empty()) kept.pop_back();
    text = std::move(kept);
  }
  replace_all(text, "{q}", item.text);
  replace_all(text, "{lo}", format_bound(item.scale_min));
  replace_all(text, "{hi}", format_bound(item.scale_max));
  // Posts last, so their content is never rescanned for placeholders.
  const std::string posts = join_posts(user, post_char_budget);
  std::string out;
  std::size_t pos = 0;
  for (std::size_t hit; (hit = text.find("{posts}", pos)) != std::string::npos; pos = hit + 7) {
    out.append(text, pos, hit - pos);
    out += posts;
  }
  out.append(text, pos);
  return out;
}

std::vector<RolePlayRequest> build_requests(const PromptTemplate& tmpl, const std::vector<const UserRecord*>& users,
                                            const Questionnaire& questionnaire, bool include_label, int n_samples,
                                            double temperature, std::size_t post_char_budget) {
  if (n_samples < 1) throw ValidationError("n_samples must be at least 1");
  if (temperature < 0) throw ValidationError("temperature must be non-negative");
  std::vector<RolePlayRequest> out;
  out.reserve(users.size() * questionnaire.size());
  for (const UserRecord* u : users) {
    for (const Item& item : questionnaire.items()) {
      out.push_back({u->user_id, item.item_id, render_prompt(tmpl, *u, item, include_label, post_char_budget),
                     n_samples, temperature});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// LLM client

std::optional<double> parse_score(std::string_view reply) {
  static const std::regex number(R"([-+]?(?:\d+\.?\d*|\.\d+))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(reply.begin(), reply.end(), m, number)) return std::nullopt;
  try {
    return std::stod(m.str());
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::optional<std::string> extract_reply(const std::string& body) {
  const json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) return std::nullopt;
  try {
    const json& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) return std::nullopt;
    return content.get<std::string>();
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

ChatTransport make_http_transport(const LlmClientConfig& config) {
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config.endpoint, m, url)) throw ValidationError("endpoint must be an http(s) URL");
  const std::string host = m[1].str();
  const std::string path = m[2].matched ? m[2].str() : "/";
  std::string key;
  if (const char* k = std::getenv(config.api_key_env.c_str())) key = k;
  const double timeout = config.timeout;
  return [host, path, key, timeout](const std::string& body) {
    httplib::Client client(host);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(
        std::chrono::duration<double>(timeout)));
    client.set_read_timeout(
        std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(timeout)));
    httplib::Headers headers;
    if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
    HttpResult out;
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) {
      out.error = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    if (res->has_header("Retry-After")) {
      try {
        out.retry_after = std::stod(res->get_header_value("Retry-After"));
      } catch (const std::exception&) {
      }
    }
    return out;
  };
}

namespace {

struct SampleOutcome {
  std::optional<double> value;
  std::string reason;
};

/// One sample: transport retries nested inside parse retries.
SampleOutcome draw_sample(const LlmClientConfig& config, const ChatTransport& transport,
                          const RolePlayRequest& req, const std::function<void(double)>& sleep) {
  json body;
  body["model"] = config.model;
  body["messages"] = json::array({{{"role", "user"}, {"content", req.prompt_text}}});
  body["temperature"] = req.temperature;
  body["n"] = 1;
  const std::string payload = body.dump();

  std::string last_reason;
  for (int attempt = 0; attempt <= config.max_parse_retries; ++attempt) {
    HttpResult res;
    double backoff = config.backoff_initial;
    bool delivered = false;
    for (int t = 0; t <= config.max_transport_retries; ++t) {
      res = transport(payload);
      if (res.status == 200) {
        delivered = true;
        break;
      }
      if (res.status == 401 || res.status == 403) {
        throw Error("endpoint rejected credentials (HTTP " + std::to_string(res.status) + "); check " +
                    config.api_key_env);
      }
      const bool retryable = res.status == 0 || res.status == 429 || res.status >= 500;
      last_reason = res.status == 0 ? "transport: " + res.error : "HTTP " + std::to_string(res.status);
      if (!retryable) return {std::nullopt, last_reason};
      if (t == config.max_transport_retries) break;
      const double wait = (res.status == 429 && res.retry_after) ? *res.retry_after : backoff;
      spdlog::debug("({}, {}) {}; retrying in {:.2f}s", req.user_id, req.item_id, last_reason, wait);
      sleep(wait);
      backoff = std::min(backoff * 2.0, config.backoff_max);
    }
    if (!delivered) return {std::nullopt, last_reason + " after " + std::to_string(config.max_transport_retries + 1) +
                                              " attempts"};
    const auto reply = extract_reply(res.body);
    if (!reply) {
      last_reason = "malformed response body";
      continue;
    }
    if (auto score = parse_score(*reply)) return {score, {}};
    last_reason = "no number in reply";
  }
  return {std::nullopt, "parse failure after " + std::to_string(config.max_parse_retries + 1) + " attempts: " +
                            last_reason};
}

}  // namespace

AskLlmResult ask_llm(const LlmClientConfig& config, const ChatTransport& transport,
                     const std::vector<RolePlayRequest>& requests, const Questionnaire& questionnaire,
                     const std::filesystem::path& answers_path, const std::filesystem::path& failures_path) {
  if (config.max_parse_retries < 0 || config.max_transport_retries < 0) {
    throw ValidationError("retry limits must be non-negative");
  }
  const auto sleep = config.sleep ? config.sleep : std::function<void(double)>(default_sleep);
  for (const auto& r : requests) {
    if (!questionnaire.find(r.item_id)) throw ValidationError("request for unknown item " + r.item_id);
    if (r.n_samples < 1) throw ValidationError("request needs at least one sample");
  }

  PersistedPairs done = read_persisted(answers_path);
  AskLlmResult result;
  result.records = std::move(done.records);

  std::vector<const RolePlayRequest*> todo;
  for (const auto& r : requests) {
    if (done.keys.contains({r.user_id, r.item_id})) {
      ++result.resumed;
    } else {
      todo.push_back(&r);
    }
  }
  if (result.resumed > 0) spdlog::info("resuming: {} pairs already answered", result.resumed);

  if (answers_path.has_parent_path()) std::filesystem::create_directories(answers_path.parent_path());
  // Drop a torn tail before appending.
  if (std::filesystem::exists(answers_path)) {
    std::ofstream rewrite(answers_path, std::ios::trunc);
    for (const auto& r : result.records) rewrite << answer_to_json_line(r) << '\n';
  }
  std::ofstream answers(answers_path, std::ios::app);
  if (!answers) throw Error("cannot write " + answers_path.string());
  std::ofstream failures;

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < todo.size();) {
      const RolePlayRequest& req = *todo[k];
      const Item& item = questionnaire[questionnaire.index_of_item(req.item_id)];
      std::vector<double> samples;
      std::string reason;
      std::size_t clamped = 0;
      try {
        for (int s = 0; s < req.n_samples; ++s) {
          SampleOutcome o = draw_sample(config, transport, req, sleep);
          if (!o.value) {
            reason = o.reason;
            break;
          }
          const double c = item.clamp(*o.value);
          if (c != *o.value) {
            spdlog::warn("({}, {}) score {} outside [{}, {}]; clamped to {}", req.user_id, req.item_id, *o.value,
                         item.scale_min, item.scale_max, c);
            ++clamped;
          }
          samples.push_back(c);
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        next.store(todo.size());
        return;
      }
      std::lock_guard lock(mu);
      result.clamped += clamped;
      if (reason.empty()) {
        AnswerRecord rec = AnswerRecord::from_samples(req.user_id, req.item_id, std::move(samples));
        answers << answer_to_json_line(rec) << '\n' << std::flush;
        result.records.push_back(std::move(rec));
      } else {
        if (!failures.is_open()) {
          if (failures_path.has_parent_path()) std::filesystem::create_directories(failures_path.parent_path());
          failures.open(failures_path, std::ios::app);
        }
        failures << json{{"user_id", req.user_id}, {"item_id", req.item_id}, {"reason", reason}}.dump() << '\n'
                 << std::flush;
        result.failures.push_back({req.user_id, req.item_id, reason});
      }
    }
  };

  const int n_threads = std::max(1, std::min<int>(config.max_in_flight, static_cast<int>(todo.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  if (fatal) std::rethrow_exception(fatal);
  if (!result.failures.empty()) {
    spdlog::warn("{} pairs failed; see {}", result.failures.size(), failures_path.string());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic oracle

Labels LatentTraitProfile::labels() const noexcept {
  Labels l{};
  for (std::size_t m = 0; m < kNumDimensions; ++m) l[m] = theta[m] > 0.0 ? 1 : 0;
  return l;
}

std::vector<AnswerRecord> ask_synthetic(const std::vector<LatentTraitProfile>& profiles,
                                        const Questionnaire& questionnaire, double informativeness, int n_samples,
                                        std::uint64_t seed, const std::vector<SyntheticItemProfile>& item_profiles) {
  if (informativeness < 0.0 || informativeness > 1.0) throw ValidationError("informativeness must lie in [0, 1]");
  if (n_samples < 1) throw ValidationError("n_samples must be at least 1");
  std::vector<SyntheticItemProfile> per_item(questionnaire.size());
  for (std::size_t i = 0; i < questionnaire.size(); ++i) per_item[i].item_id = questionnaire[i].item_id;
  for (const auto& p : item_profiles) {
    if (auto idx = questionnaire.find(p.item_id)) per_item[*idx] = p;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<AnswerRecord> out;
  out.reserve(profiles.size() * questionnaire.size());
  for (const auto& prof : profiles) {
    if (prof.noise_sigma < 0) throw ValidationError("noise_sigma must be non-negative");
    for (double t : prof.theta) {
      if (!(t >= -1.0 && t <= 1.0)) throw ValidationError("theta of " + prof.user_id + " outside [-1, 1]");
    }
    for (std::size_t i = 0; i < questionnaire.size(); ++i) {
      const Item& item = questionnaire[i];
      const double center = item.midpoint() + informativeness * per_item[i].informativeness *
                                                  prof.theta[index_of(item.construct)] * item.half_range();
      const double sigma = prof.noise_sigma * per_item[i].noise;
      std::vector<double> samples(static_cast<std::size_t>(n_samples));
      for (double& s : samples) s = item.clamp(center + sigma * gauss(rng));
      out.push_back(AnswerRecord::from_samples(prof.user_id, item.item_id, std::move(samples)));
    }
  }
  return out;
}

AnswerStore aggregate_answers(const std::vector<AnswerRecord>& records) {
  AnswerStore store;
  for (const AnswerRecord& r : records) {
    if (store.contains(r.user_id, r.item_id)) {
      throw ValidationError("pair (" + r.user_id + ", " + r.item_id + ") appears more than once");
    }
    store.insert(AnswerRecord::from_samples(r.user_id, r.item_id, r.samples));
  }
  return store;
}

}  // namespace aad

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "aad/core.hpp"

namespace aad {

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

/// Placeholders: {posts} {q} {lo} {hi} {label}. Lines that mention {label} are
/// dropped entirely when the label is not included.
struct PromptTemplate {
  std::string text;

  static PromptTemplate load(const std::filesystem::path& path);
  /// The shipped role-play template.
  static PromptTemplate builtin();
};

inline constexpr std::size_t kDefaultPostCharBudget = 6000;

/// Substitutes every placeholder. Posts are joined with newlines and cut to
/// `post_char_budget` characters (a notice is logged when that happens).
/// Throws ValidationError on an unknown placeholder or when a label is requested
/// for an unlabeled user.
std::string render_prompt(const PromptTemplate& tmpl, const UserRecord& user, const Item& item, bool include_label,
                          std::size_t post_char_budget = kDefaultPostCharBudget);

struct RolePlayRequest {
  std::string user_id;
  std::string item_id;
  std::string prompt_text;
  int n_samples = 5;
  double temperature = 0.7;
};

std::vector<RolePlayRequest> build_requests(const PromptTemplate& tmpl, const std::vector<const UserRecord*>& users,
                                            const Questionnaire& questionnaire, bool include_label, int n_samples,
                                            double temperature,
                                            std::size_t post_char_budget = kDefaultPostCharBudget);

// ---------------------------------------------------------------------------
// LLM client
// ---------------------------------------------------------------------------

struct HttpResult {
  int status = 0;                    // 0 when the request never completed
  std::string body;
  std::optional<double> retry_after;  // seconds, from a Retry-After header
  std::string error;                 // transport error text when status == 0
};

/// Sends one chat-completion request body and returns the raw response.
using ChatTransport = std::function<HttpResult(const std::string& request_body)>;

struct LlmClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  int max_parse_retries = 3;      // extra attempts per sample after an unparseable reply
  int max_transport_retries = 5;  // extra attempts per call after a transport/HTTP failure
  double backoff_initial = 1.0;   // seconds, doubled per retry
  double backoff_max = 30.0;
  double timeout = 60.0;
  int max_in_flight = 1;
  /// Injected for tests; defaults to std::this_thread::sleep_for.
  std::function<void(double seconds)> sleep;
};

/// HTTP(S) transport built on cpp-httplib. Reads the API key from the configured
/// environment variable (an unset variable sends no Authorization header).
ChatTransport make_http_transport(const LlmClientConfig& config);

/// First integer or decimal number in the text, if any.
std::optional<double> parse_score(std::string_view reply);

/// Extracts choices[0].message.content from a chat-completion response body.
std::optional<std::string> extract_reply(const std::string& body);

struct AskFailure {
  std::string user_id;
  std::string item_id;
  std::string reason;
};

struct AskLlmResult {
  std::vector<AnswerRecord> records;  // previously persisted plus newly collected
  std::vector<AskFailure> failures;
  std::size_t resumed = 0;            // pairs skipped because answers_path already had them
  std::size_t clamped = 0;
};

/// Collects T samples per request. Completed pairs are appended to `answers_path`
/// as they finish, and pairs already present there are skipped, so an interrupted
/// run can be resumed. Pairs that exhaust their retries go to `failures_path`.
AskLlmResult ask_llm(const LlmClientConfig& config, const ChatTransport& transport,
                     const std::vector<RolePlayRequest>& requests, const Questionnaire& questionnaire,
                     const std::filesystem::path& answers_path, const std::filesystem::path& failures_path);

// ---------------------------------------------------------------------------
// Synthetic oracle
// ---------------------------------------------------------------------------

struct LatentTraitProfile {
  std::string user_id;
  std::array<double, kNumDimensions> theta{};  // in [-1, 1]; sign gives the label
  double noise_sigma = 0.5;

  Labels labels() const noexcept;
};

/// Per-item multipliers of the synthetic answer model. Defaults reproduce the
/// homogeneous case.
struct SyntheticItemProfile {
  std::string item_id;
  double informativeness = 1.0;
  double noise = 1.0;
};

/// sample = clamp(mid + informativeness * item.informativeness * theta[m] * half_range
///                + N(0, noise_sigma * item.noise)).
/// Item profiles are matched by item_id; items without one use the defaults.
std::vector<AnswerRecord> ask_synthetic(const std::vector<LatentTraitProfile>& profiles,
                                        const Questionnaire& questionnaire, double informativeness, int n_samples,
                                        std::uint64_t seed,
                                        const std::vector<SyntheticItemProfile>& item_profiles = {});

/// Builds a store from records. Throws ValidationError on a duplicate pair.
AnswerStore aggregate_answers(const std::vector<AnswerRecord>& records);

}  // namespace aad

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aad/error.hpp"

namespace aad {

// ---------------------------------------------------------------------------
// Personality dimensions
// ---------------------------------------------------------------------------

enum class Dimension : std::uint8_t { IE = 0, SN = 1, TF = 2, PJ = 3 };

inline constexpr std::size_t kNumDimensions = 4;
inline constexpr std::array<Dimension, kNumDimensions> kAllDimensions = {
    Dimension::IE, Dimension::SN, Dimension::TF, Dimension::PJ};

constexpr std::size_t index_of(Dimension m) noexcept { return static_cast<std::size_t>(m); }

/// Inverse of index_of; throws ValidationError when `index` >= 4.
Dimension dimension_from_index(std::size_t index);

std::string_view to_string(Dimension m) noexcept;

/// Accepts "IE", "SN", "TF", "PJ" (also "I/E" style). Throws ValidationError otherwise.
Dimension parse_dimension(std::string_view name);

/// Label 1 is the first letter of the pair (I, S, T, P), label 0 the second.
char pole_letter(Dimension m, int label) noexcept;

// ---------------------------------------------------------------------------
// Users
// ---------------------------------------------------------------------------

enum class Split : std::uint8_t { train, validation, test };

std::string_view to_string(Split s) noexcept;
Split parse_split(std::string_view name);

/// One binary label per dimension, indexed by index_of(Dimension).
using Labels = std::array<std::uint8_t, kNumDimensions>;

/// Four-letter type string such as "INTJ".
std::string label_string(const Labels& labels);

struct UserRecord {
  std::string user_id;
  std::vector<std::string> posts;
  std::optional<Labels> labels;
  std::optional<Split> split;

  friend bool operator==(const UserRecord&, const UserRecord&) = default;
};

// ---------------------------------------------------------------------------
// Questionnaire
// ---------------------------------------------------------------------------

inline constexpr int kDefaultScaleMin = 1;
inline constexpr int kDefaultScaleMax = 7;

struct Item {
  std::string item_id;
  std::string text;
  Dimension construct = Dimension::IE;
  int scale_min = kDefaultScaleMin;
  int scale_max = kDefaultScaleMax;

  double midpoint() const noexcept { return 0.5 * (scale_min + scale_max); }
  double half_range() const noexcept { return 0.5 * (scale_max - scale_min); }
  /// Maps a raw answer on [scale_min, scale_max] to [0, 1].
  double normalize(double answer) const noexcept {
    return (answer - scale_min) / static_cast<double>(scale_max - scale_min);
  }
  double clamp(double answer) const noexcept;

  friend bool operator==(const Item&, const Item&) = default;
};

/// Ordered item list with a fixed construct assignment. Immutable once built.
class Questionnaire {
 public:
  Questionnaire() = default;
  /// Validates unique ids, scale width >= 2 and at least one item per dimension.
  Questionnaire(std::string version, std::vector<Item> items);

  const std::string& version() const noexcept { return version_; }
  const std::vector<Item>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  const Item& operator[](std::size_t i) const { return items_.at(i); }

  std::optional<std::size_t> find(std::string_view item_id) const;
  std::size_t index_of_item(std::string_view item_id) const;

  /// Item indices whose construct is `m`, in questionnaire order.
  const std::vector<std::size_t>& items_of(Dimension m) const { return by_construct_[index_of(m)]; }

  /// Same construct assignment, restricted to the given item indices (in the given order).
  Questionnaire subset(const std::vector<std::size_t>& indices, std::string version_suffix) const;

 private:
  std::string version_;
  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> index_;
  std::array<std::vector<std::size_t>, kNumDimensions> by_construct_;
};

// ---------------------------------------------------------------------------
// Answers
// ---------------------------------------------------------------------------

struct AnswerRecord {
  std::string user_id;
  std::string item_id;
  std::vector<double> samples;
  double mean = 0.0;
  double variance = 0.0;  // population variance

  /// Builds a record and computes mean/variance. Throws ValidationError on empty samples.
  static AnswerRecord from_samples(std::string user_id, std::string item_id,
                                   std::vector<double> samples);
};

/// Sampled answers keyed by (user, item). Inserting an existing pair replaces it
/// (last write wins) and logs a warning.
class AnswerStore {
 public:
  void insert(AnswerRecord record);

  const AnswerRecord* find(std::string_view user_id, std::string_view item_id) const;
  bool contains(std::string_view user_id, std::string_view item_id) const {
    return find(user_id, item_id) != nullptr;
  }
  std::size_t size() const noexcept { return size_; }
  bool empty() const noexcept { return size_ == 0; }

  /// Records in deterministic (user_id, item_id) order.
  std::vector<const AnswerRecord*> records() const;

  /// Pools two stores pair-by-pair by concatenating samples (the mean of means
  /// when both sides drew the same T). Pairs present in only one store are copied.
  static AnswerStore merge_average(const AnswerStore& a, const AnswerStore& b);

 private:
  std::map<std::string, std::map<std::string, AnswerRecord, std::less<>>, std::less<>> by_user_;
  std::size_t size_ = 0;
};

struct CoverageGap {
  std::string user_id;
  std::string item_id;
};

/// Pairs in users x questionnaire that have no record in the store.
std::vector<CoverageGap> coverage_gaps(const AnswerStore& store,
                                       const std::vector<const UserRecord*>& users,
                                       const Questionnaire& questionnaire);

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

enum class DatasetFormat : std::uint8_t { jsonl };

/// Returns true when a precomputed embedding exists for the user id, which
/// allows a record without posts.
using HasEmbedding = std::function<bool(const std::string& user_id)>;

std::vector<UserRecord> load_dataset(const std::filesystem::path& path,
                                     DatasetFormat format = DatasetFormat::jsonl,
                                     const HasEmbedding& has_embedding = {});
void save_dataset(const std::filesystem::path& path, const std::vector<UserRecord>& records);

Questionnaire load_questionnaire(const std::filesystem::path& path);
void save_questionnaire(const std::filesystem::path& path, const Questionnaire& questionnaire);

/// Reads answers JSONL; duplicates resolve last-write-wins.
AnswerStore load_answers(const std::filesystem::path& path);
void save_answers(const std::filesystem::path& path, const AnswerStore& store);
/// One JSON line for an answer record (mean/variance are not written; they are recomputed on load).
std::string answer_to_json_line(const AnswerRecord& record);

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitRatios {
  double train = 0.6;
  double validation = 0.2;
  double test = 0.2;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

/// Shuffles users with `seed` and assigns them to disjoint partitions. Sizes are
/// floor(ratio * n) for validation and test, remainder to train; every partition
/// gets at least one user.
std::vector<UserRecord> split_dataset(std::vector<UserRecord> records, SplitRatios ratios,
                                      std::uint64_t seed);

SplitCounts count_splits(const std::vector<UserRecord>& records);

/// Records whose split equals `split`, in input order.
std::vector<const UserRecord*> select_split(const std::vector<UserRecord>& records, Split split);

}  // namespace aad

#include "aad/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace aad {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kNumDimensions> kDimensionNames = {"IE", "SN", "TF", "PJ"};
constexpr std::array<std::array<char, 2>, kNumDimensions> kPoleLetters = {
    {{'E', 'I'}, {'N', 'S'}, {'F', 'T'}, {'J', 'P'}}};

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

Dimension dimension_from_index(std::size_t index) {
  if (index >= kNumDimensions) throw ValidationError("dimension index out of range: " + std::to_string(index));
  return static_cast<Dimension>(index);
}

std::string_view to_string(Dimension m) noexcept { return kDimensionNames[index_of(m)]; }

Dimension parse_dimension(std::string_view name) {
  std::string compact;
  for (char c : name) {
    if (c != '/') compact.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  for (std::size_t i = 0; i < kNumDimensions; ++i) {
    if (compact == kDimensionNames[i]) return static_cast<Dimension>(i);
  }
  throw ValidationError("unknown dimension '" + std::string(name) + "'");
}

char pole_letter(Dimension m, int label) noexcept { return kPoleLetters[index_of(m)][label ? 1 : 0]; }

std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "validation" || name == "val") return Split::validation;
  if (name == "test") return Split::test;
  throw ValidationError("unknown split '" + std::string(name) + "'");
}

std::string label_string(const Labels& labels) {
  std::string out;
  for (Dimension m : kAllDimensions) out.push_back(pole_letter(m, labels[index_of(m)]));
  return out;
}

double Item::clamp(double answer) const noexcept {
  return std::clamp(answer, static_cast<double>(scale_min), static_cast<double>(scale_max));
}

// ---------------------------------------------------------------------------

Questionnaire::Questionnaire(std::string version, std::vector<Item> items)
    : version_(std::move(version)), items_(std::move(items)) {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const Item& item = items_[i];
    if (item.scale_max - item.scale_min < 2) {
      throw ValidationError("item " + item.item_id + ": answer scale needs at least 3 points");
    }
    if (!index_.emplace(item.item_id, i).second) {
      throw ValidationError("duplicate item id '" + item.item_id + "'");
    }
    by_construct_[index_of(item.construct)].push_back(i);
  }
  for (Dimension m : kAllDimensions) {
    if (by_construct_[index_of(m)].empty()) {
      throw ValidationError("questionnaire has no items for dimension " + std::string(to_string(m)));
    }
  }
}

std::optional<std::size_t> Questionnaire::find(std::string_view item_id) const {
  auto it = index_.find(std::string(item_id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Questionnaire::index_of_item(std::string_view item_id) const {
  auto found = find(item_id);
  if (!found) throw ValidationError("unknown item id '" + std::string(item_id) + "'");
  return *found;
}

Questionnaire Questionnaire::subset(const std::vector<std::size_t>& indices,
                                    std::string version_suffix) const {
  std::vector<Item> picked;
  picked.reserve(indices.size());
  for (std::size_t i : indices) picked.push_back(items_.at(i));
  return Questionnaire(version_ + version_suffix, std::move(picked));
}

// ---------------------------------------------------------------------------

AnswerRecord AnswerRecord::from_samples(std::string user_id, std::string item_id,
                                        std::vector<double> samples) {
  if (samples.empty()) {
    throw ValidationError("answer (" + user_id + ", " + item_id + ") has no samples");
  }
  AnswerRecord r;
  r.user_id = std::move(user_id);
  r.item_id = std::move(item_id);
  const double n = static_cast<double>(samples.size());
  r.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double ss = 0.0;
  for (double s : samples) ss += (s - r.mean) * (s - r.mean);
  r.variance = ss / n;
  r.samples = std::move(samples);
  return r;
}

void AnswerStore::insert(AnswerRecord record) {
  auto& row = by_user_[record.user_id];
  auto it = row.find(record.item_id);
  if (it != row.end()) {
    spdlog::warn("duplicate answer for ({}, {}); keeping the later record", record.user_id,
                 record.item_id);
    it->second = std::move(record);
    return;
  }
  std::string key = record.item_id;
  row.emplace(std::move(key), std::move(record));
  ++size_;
}

const AnswerRecord* AnswerStore::find(std::string_view user_id, std::string_view item_id) const {
  auto u = by_user_.find(user_id);
  if (u == by_user_.end()) return nullptr;
  auto i = u->second.find(item_id);
  return i == u->second.end() ? nullptr : &i->second;
}

std::vector<const AnswerRecord*> AnswerStore::records() const {
  std::vector<const AnswerRecord*> out;
  out.reserve(size_);
  for (const auto& [user, row] : by_user_) {
    for (const auto& [item, record] : row) out.push_back(&record);
  }
  return out;
}

AnswerStore AnswerStore::merge_average(const AnswerStore& a, const AnswerStore& b) {
  AnswerStore out;
  for (const AnswerRecord* ra : a.records()) {
    const AnswerRecord* rb = b.find(ra->user_id, ra->item_id);
    if (rb == nullptr) {
      out.insert(*ra);
      continue;
    }
    std::vector<double> samples = ra->samples;
    samples.insert(samples.end(), rb->samples.begin(), rb->samples.end());
    out.insert(AnswerRecord::from_samples(ra->user_id, ra->item_id, std::move(samples)));
  }
  for (const AnswerRecord* rb : b.records()) {
    if (a.find(rb->user_id, rb->item_id) == nullptr) out.insert(*rb);
  }
  return out;
}

std::vector<CoverageGap> coverage_gaps(const AnswerStore& store,
                                       const std::vector<const UserRecord*>& users,
                                       const Questionnaire& questionnaire) {
  std::vector<CoverageGap> gaps;
  for (const UserRecord* u : users) {
    for (const Item& item : questionnaire.items()) {
      if (!store.contains(u->user_id, item.item_id)) gaps.push_back({u->user_id, item.item_id});
    }
  }
  return gaps;
}

// ---------------------------------------------------------------------------
// Dataset JSONL
// ---------------------------------------------------------------------------

namespace {

UserRecord parse_user(const json& j, const std::string& source, std::size_t line,
                      const HasEmbedding& has_embedding) {
  if (!j.is_object()) throw ParseError(source, line, "expected a JSON object");
  UserRecord r;
  auto id = j.find("user_id");
  if (id == j.end() || !id->is_string()) throw ParseError(source, line, "missing string field 'user_id'");
  r.user_id = id->get<std::string>();

  auto posts = j.find("posts");
  if (posts != j.end()) {
    if (!posts->is_array()) throw ParseError(source, line, "'posts' must be an array of strings");
    for (const auto& p : *posts) {
      if (!p.is_string()) throw ParseError(source, line, "'posts' must be an array of strings");
      r.posts.push_back(p.get<std::string>());
    }
  }
  if (r.posts.empty() && !(has_embedding && has_embedding(r.user_id))) {
    throw ParseError(source, line,
                     "user '" + r.user_id + "' has no posts and no precomputed embedding");
  }

  auto labels = j.find("labels");
  if (labels != j.end() && !labels->is_null()) {
    if (!labels->is_object()) throw ParseError(source, line, "'labels' must be an object");
    Labels parsed{};
    std::array<bool, kNumDimensions> seen{};
    for (const auto& [key, value] : labels->items()) {
      Dimension m;
      try {
        m = parse_dimension(key);
      } catch (const ValidationError&) {
        throw ParseError(source, line, "unknown dimension '" + key + "'");
      }
      if (!value.is_number_integer() || (value.get<int>() != 0 && value.get<int>() != 1)) {
        throw ParseError(source, line, "label for " + key + " must be 0 or 1");
      }
      parsed[index_of(m)] = static_cast<std::uint8_t>(value.get<int>());
      seen[index_of(m)] = true;
    }
    for (Dimension m : kAllDimensions) {
      if (!seen[index_of(m)]) {
        throw ParseError(source, line, "labels missing dimension " + std::string(to_string(m)));
      }
    }
    r.labels = parsed;
  }

  auto split = j.find("split");
  if (split != j.end() && !split->is_null()) {
    if (!split->is_string()) throw ParseError(source, line, "'split' must be a string");
    try {
      r.split = parse_split(split->get<std::string>());
    } catch (const ValidationError& e) {
      throw ParseError(source, line, e.what());
    }
  }
  return r;
}

json user_to_json(const UserRecord& r) {
  json j;
  j["user_id"] = r.user_id;
  j["posts"] = r.posts;
  if (r.labels) {
    json labels = json::object();
    for (Dimension m : kAllDimensions) labels[std::string(to_string(m))] = (*r.labels)[index_of(m)];
    j["labels"] = labels;
  }
  if (r.split) j["split"] = std::string(to_string(*r.split));
  return j;
}

}  // namespace

std::vector<UserRecord> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                     const HasEmbedding& has_embedding) {
  if (format != DatasetFormat::jsonl) throw Error("unsupported dataset format");
  auto in = open_input(path);
  const std::string source = path.string();
  std::vector<UserRecord> records;
  std::set<std::string, std::less<>> ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(source, line, e.what());
    }
    UserRecord r = parse_user(j, source, line, has_embedding);
    if (!ids.insert(r.user_id).second) {
      throw ValidationError(source + ":" + std::to_string(line) + ": duplicate user id '" +
                            r.user_id + "'");
    }
    records.push_back(std::move(r));
  }
  return records;
}

void save_dataset(const std::filesystem::path& path, const std::vector<UserRecord>& records) {
  auto out = open_output(path);
  for (const auto& r : records) out << user_to_json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Questionnaire JSON
// ---------------------------------------------------------------------------

Questionnaire load_questionnaire(const std::filesystem::path& path) {
  auto in = open_input(path);
  const std::string source = path.string();
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(source, 0, e.what());
  }
  if (!j.is_object()) throw ParseError(source, 0, "expected a JSON object");
  std::string version = j.value("version", std::string{"unversioned"});
  int lo = kDefaultScaleMin;
  int hi = kDefaultScaleMax;
  if (auto scale = j.find("scale"); scale != j.end() && !scale->is_null()) {
    lo = scale->value("min", kDefaultScaleMin);
    hi = scale->value("max", kDefaultScaleMax);
  }
  auto items_json = j.find("items");
  if (items_json == j.end() || !items_json->is_array()) {
    throw ParseError(source, 0, "missing 'items' array");
  }
  std::vector<Item> items;
  for (std::size_t k = 0; k < items_json->size(); ++k) {
    const json& ij = (*items_json)[k];
    const std::string where = "item " + std::to_string(k);
    if (!ij.contains("id") || !ij["id"].is_string()) throw ParseError(source, 0, where + ": missing 'id'");
    if (!ij.contains("text") || !ij["text"].is_string()) throw ParseError(source, 0, where + ": missing 'text'");
    if (!ij.contains("construct") || !ij["construct"].is_string()) {
      throw ParseError(source, 0, where + ": missing 'construct'");
    }
    Item item;
    item.item_id = ij["id"].get<std::string>();
    item.text = ij["text"].get<std::string>();
    try {
      item.construct = parse_dimension(ij["construct"].get<std::string>());
    } catch (const ValidationError& e) {
      throw ParseError(source, 0, where + ": " + e.what());
    }
    item.scale_min = lo;
    item.scale_max = hi;
    items.push_back(std::move(item));
  }
  return Questionnaire(std::move(version), std::move(items));
}

void save_questionnaire(const std::filesystem::path& path, const Questionnaire& questionnaire) {
  json j;
  j["version"] = questionnaire.version();
  if (questionnaire.size() > 0) {
    j["scale"] = {{"min", questionnaire[0].scale_min}, {"max", questionnaire[0].scale_max}};
  }
  json items = json::array();
  for (const Item& item : questionnaire.items()) {
    items.push_back({{"id", item.item_id},
                     {"text", item.text},
                     {"construct", std::string(to_string(item.construct))}});
  }
  j["items"] = items;
  auto out = open_output(path);
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Answers JSONL
// ---------------------------------------------------------------------------

std::string answer_to_json_line(const AnswerRecord& record) {
  json j;
  j["user_id"] = record.user_id;
  j["item_id"] = record.item_id;
  j["samples"] = record.samples;
  return j.dump();
}

AnswerStore load_answers(const std::filesystem::path& path) {
  auto in = open_input(path);
  const std::string source = path.string();
  AnswerStore store;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(source, line, e.what());
    }
    if (!j.contains("user_id") || !j["user_id"].is_string() || !j.contains("item_id") ||
        !j["item_id"].is_string()) {
      throw ParseError(source, line, "answer needs string 'user_id' and 'item_id'");
    }
    if (!j.contains("samples") || !j["samples"].is_array() || j["samples"].empty()) {
      throw ParseError(source, line, "answer needs a non-empty 'samples' array");
    }
    std::vector<double> samples;
    for (const auto& s : j["samples"]) {
      if (!s.is_number()) throw ParseError(source, line, "samples must be numbers");
      samples.push_back(s.get<double>());
    }
    store.insert(AnswerRecord::from_samples(j["user_id"].get<std::string>(),
                                            j["item_id"].get<std::string>(), std::move(samples)));
  }
  return store;
}

void save_answers(const std::filesystem::path& path, const AnswerStore& store) {
  auto out = open_output(path);
  for (const AnswerRecord* r : store.records()) out << answer_to_json_line(*r) << '\n';
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

std::vector<UserRecord> split_dataset(std::vector<UserRecord> records, SplitRatios ratios,
                                      std::uint64_t seed) {
  if (ratios.train <= 0 || ratios.validation <= 0 || ratios.test <= 0) {
    throw ValidationError("split ratios must be positive");
  }
  if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  const std::size_t n = records.size();
  if (n < 3) throw ValidationError("need at least 3 users to form 3 partitions");

  auto part = [n](double ratio) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9)));
  };
  const std::size_t n_val = part(ratios.validation);
  const std::size_t n_test = part(ratios.test);
  if (n_val + n_test >= n) throw ValidationError("too few users for the requested ratios");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  for (std::size_t k = 0; k < n; ++k) {
    Split s = Split::train;
    if (k < n_test) {
      s = Split::test;
    } else if (k < n_test + n_val) {
      s = Split::validation;
    }
    records[order[k]].split = s;
  }
  return records;
}

SplitCounts count_splits(const std::vector<UserRecord>& records) {
  SplitCounts c;
  for (const auto& r : records) {
    if (!r.split) continue;
    switch (*r.split) {
      case Split::train: ++c.train; break;
      case Split::validation: ++c.validation; break;
      case Split::test: ++c.test; break;
    }
  }
  return c;
}

std::vector<const UserRecord*> select_split(const std::vector<UserRecord>& records, Split split) {
  std::vector<const UserRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

}  // namespace aad

#include "aad/encode.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace aad {

using nlohmann::json;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool word = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
    if (word) {
      current.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch);
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::uint64_t hash_token(std::string_view token, std::uint64_t seed) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (char ch : token) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  h += 0x9e3779b97f4a7c15ULL;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return h ^ (h >> 31);
}

// ---------------------------------------------------------------------------

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  EmbeddingTable table;
  table.source_ = path.string();
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(table.source_, line, e.what());
    }
    if (!j.contains("key") || !j["key"].is_string() || !j.contains("vec") || !j["vec"].is_array()) {
      throw ParseError(table.source_, line, "expected {\"key\": str, \"vec\": [num,...]}");
    }
    std::vector<double> vec;
    for (const auto& x : j["vec"]) {
      if (!x.is_number()) throw ParseError(table.source_, line, "vector entries must be numbers");
      vec.push_back(x.get<double>());
    }
    if (table.dim_ == 0) table.dim_ = vec.size();
    if (vec.size() != table.dim_) {
      throw ParseError(table.source_, line,
                       "vector has dimension " + std::to_string(vec.size()) + ", expected " +
                           std::to_string(table.dim_));
    }
    try {
      table.insert(j["key"].get<std::string>(), std::move(vec));
    } catch (const Error& e) {
      throw ParseError(table.source_, line, e.what());
    }
  }
  if (table.dim_ == 0) throw ParseError(table.source_, 0, "embedding table is empty");
  return table;
}

void EmbeddingTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  std::vector<const std::string*> keys;
  for (const auto& [k, v] : rows_) keys.push_back(&k);
  std::sort(keys.begin(), keys.end(), [](auto* a, auto* b) { return *a < *b; });
  for (const std::string* k : keys) out << json{{"key", *k}, {"vec", rows_.at(*k)}}.dump() << '\n';
}

void EmbeddingTable::insert(std::string key, std::vector<double> vec) {
  if (dim_ == 0) dim_ = vec.size();
  if (vec.size() != dim_) {
    throw DimensionMismatch("embedding '" + key + "' has dimension " + std::to_string(vec.size()) +
                            ", table dimension is " + std::to_string(dim_));
  }
  for (double x : vec) {
    if (!std::isfinite(x)) throw ValidationError("embedding '" + key + "' has non-finite entries");
  }
  if (!rows_.emplace(key, std::move(vec)).second) {
    throw ValidationError("duplicate embedding key '" + key + "'");
  }
}

const std::vector<double>* EmbeddingTable::find(std::string_view key) const {
  auto it = rows_.find(std::string(key));
  return it == rows_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------

EmbeddingProvider EmbeddingProvider::hashing(std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw ValidationError("embedding dimension must be positive");
  EmbeddingProvider p;
  p.name_ = "hashing";
  p.dim_ = dim;
  p.mode_ = EmbeddingMode::hashing;
  p.seed_ = seed;
  return p;
}

EmbeddingProvider EmbeddingProvider::precomputed(std::shared_ptr<const EmbeddingTable> table,
                                                 std::string name) {
  if (!table || table->dim() == 0) throw ValidationError("precomputed provider needs a non-empty table");
  EmbeddingProvider p;
  p.name_ = std::move(name);
  p.dim_ = table->dim();
  p.mode_ = EmbeddingMode::precomputed;
  p.table_ = std::move(table);
  return p;
}

Eigen::VectorXd EmbeddingProvider::hash_posts(const std::vector<std::string_view>& posts) const {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
  if (posts.empty()) return acc;
  for (std::string_view post : posts) {
    for (const std::string& token : tokenize(post)) {
      const std::uint64_t h = hash_token(token, seed_);
      const auto bucket = static_cast<Eigen::Index>(h % dim_);
      acc[bucket] += (h >> 63) ? -1.0 : 1.0;
    }
  }
  acc /= static_cast<double>(posts.size());
  const double norm = acc.norm();
  if (norm > 0.0) acc /= norm;
  return acc;
}

Eigen::VectorXd EmbeddingProvider::lookup(std::string_view key) const {
  const std::vector<double>* row = table_->find(key);
  if (row == nullptr) throw ValidationError("no precomputed embedding for '" + std::string(key) + "'");
  if (row->size() != dim_) throw DimensionMismatch("precomputed embedding dimension mismatch");
  return Eigen::Map<const Eigen::VectorXd>(row->data(), static_cast<Eigen::Index>(row->size()));
}

Eigen::VectorXd EmbeddingProvider::embed_user(const UserRecord& record) const {
  if (mode_ == EmbeddingMode::precomputed) return lookup(record.user_id);
  std::vector<std::string_view> posts(record.posts.begin(), record.posts.end());
  return hash_posts(posts);
}

Eigen::VectorXd EmbeddingProvider::embed_item(const Item& item) const {
  if (mode_ == EmbeddingMode::precomputed) return lookup(item.item_id);
  return hash_posts({item.text});
}

Eigen::VectorXd EmbeddingProvider::embed_text(std::string_view text) const {
  if (mode_ != EmbeddingMode::hashing) throw Error("embed_text requires hashing mode");
  return hash_posts({text});
}

Eigen::MatrixXd EmbeddingProvider::embed_users(const std::vector<const UserRecord*>& users) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t u = 0; u < users.size(); ++u) {
    out.row(static_cast<Eigen::Index>(u)) = embed_user(*users[u]).transpose();
  }
  return out;
}

Eigen::MatrixXd EmbeddingProvider::embed_items(const Questionnaire& questionnaire) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(questionnaire.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < questionnaire.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = embed_item(questionnaire[i]).transpose();
  }
  return out;
}

}  // namespace aad

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "aad/core.hpp"

namespace aad {

/// Lowercases ASCII and splits on ASCII non-alphanumerics. Bytes >= 0x80 are kept
/// inside tokens so UTF-8 words survive intact.
std::vector<std::string> tokenize(std::string_view text);

/// Seeded 64-bit token hash (FNV-1a followed by a splitmix64 finalizer).
std::uint64_t hash_token(std::string_view token, std::uint64_t seed) noexcept;

/// Keyed vectors of one fixed dimension, loaded from `{"key": str, "vec": [...]}` JSONL.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  static EmbeddingTable load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Throws DimensionMismatch on wrong length, ValidationError on duplicate key or non-finite values.
  void insert(std::string key, std::vector<double> vec);

  const std::vector<double>* find(std::string_view key) const;
  bool contains(std::string_view key) const { return find(key) != nullptr; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return rows_.size(); }
  const std::string& source() const noexcept { return source_; }

 private:
  std::size_t dim_ = 0;
  std::string source_ = "computed";
  std::unordered_map<std::string, std::vector<double>> rows_;
};

enum class EmbeddingMode : std::uint8_t { hashing, precomputed };

/// Maps user posts and item texts to fixed-dimension vectors. Stateless after
/// construction; calls are pure.
class EmbeddingProvider {
 public:
  static constexpr std::size_t kDefaultDim = 256;
  static constexpr std::uint64_t kDefaultSeed = 0x5eed'a11d'0000'0001ULL;

  /// Signed feature hashing into `dim` buckets.
  static EmbeddingProvider hashing(std::size_t dim = kDefaultDim, std::uint64_t seed = kDefaultSeed);
  /// Lookups in a table keyed by user_id and item_id.
  static EmbeddingProvider precomputed(std::shared_ptr<const EmbeddingTable> table,
                                       std::string name = "precomputed");

  const std::string& name() const noexcept { return name_; }
  std::size_t dim() const noexcept { return dim_; }
  EmbeddingMode mode() const noexcept { return mode_; }

  Eigen::VectorXd embed_user(const UserRecord& record) const;
  Eigen::VectorXd embed_item(const Item& item) const;
  /// Hashing mode only: a single text treated as one post.
  Eigen::VectorXd embed_text(std::string_view text) const;

  /// Rows follow the argument order.
  Eigen::MatrixXd embed_users(const std::vector<const UserRecord*>& users) const;
  Eigen::MatrixXd embed_items(const Questionnaire& questionnaire) const;

 private:
  EmbeddingProvider() = default;
  Eigen::VectorXd hash_posts(const std::vector<std::string_view>& posts) const;
  Eigen::VectorXd lookup(std::string_view key) const;

  std::string name_;
  std::size_t dim_ = 0;
  EmbeddingMode mode_ = EmbeddingMode::hashing;
  std::uint64_t seed_ = kDefaultSeed;
  std::shared_ptr<const EmbeddingTable> table_;
};

}  // namespace aad

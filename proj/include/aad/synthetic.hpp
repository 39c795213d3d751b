#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "aad/ask.hpp"
#include "aad/core.hpp"

namespace aad {

struct SyntheticConfig {
  std::size_t n_users = 1000;
  std::size_t items_per_dim = 15;
  double post_informativeness = 0.5;  // share of post tokens that are trait words
  std::size_t posts_per_user = 50;
  std::size_t tokens_per_post = 24;
  std::size_t words_per_pole = 60;    // trait vocabulary size per pole
  double noise_sigma = 0.5;           // answer noise stored in each profile
  double theta_min = 0.2;             // |theta| ~ U(theta_min, 1)
  bool heterogeneous_items = false;   // draw per-item informativeness/noise multipliers
  std::uint64_t seed = 13;
};

struct SyntheticCorpus {
  std::vector<UserRecord> users;  // labeled, no split assigned
  Questionnaire questionnaire;
  std::vector<LatentTraitProfile> profiles;
  std::vector<SyntheticItemProfile> item_profiles;
};

/// Items per dimension: the illustrative statements first, then templated ones.
Questionnaire synthetic_questionnaire(std::size_t items_per_dim);

/// Latent traits, labels = sign(theta), and posts whose trait words lean toward
/// each user's poles. post_informativeness = 0 yields label-independent text.
SyntheticCorpus generate_synthetic(const SyntheticConfig& config);

/// {"users": [...], "items": [...]} with thetas and per-item multipliers.
void save_profiles(const std::filesystem::path& path, const std::vector<LatentTraitProfile>& profiles,
                   const std::vector<SyntheticItemProfile>& item_profiles);
void load_profiles(const std::filesystem::path& path, std::vector<LatentTraitProfile>& profiles,
                   std::vector<SyntheticItemProfile>& item_profiles);

}  // namespace aad

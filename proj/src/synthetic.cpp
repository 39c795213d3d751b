#include "aad/synthetic.hpp"

#include <array>
#include <fstream>
#include <random>
#include <string_view>

#include <nlohmann/json.hpp>

namespace aad {

using nlohmann::json;

namespace {

struct SeedItem {
  const char* id;
  const char* text;
  Dimension construct;
  int direction;  // +1 when agreement points to label 1 (I, S, T, P)
};

constexpr std::array<SeedItem, 12> kSeedItems = {{
    {"Q21", "You enjoy solitary hobbies or activities more than group ones.", Dimension::IE, +1},
    {"Q43", "You can easily connect with people you have just met.", Dimension::IE, -1},
    {"Q41", "You avoid making phone calls.", Dimension::IE, +1},
    {"Q2", "Complex and novel ideas excite you more than simple and straightforward ones.", Dimension::SN, -1},
    {"Q42", "You enjoy exploring unfamiliar ideas and viewpoints.", Dimension::SN, -1},
    {"Q57", "You prefer tasks that require you to come up with creative solutions rather than follow concrete steps.",
     Dimension::SN, -1},
    {"Q3", "You usually feel more persuaded by what resonates emotionally with you than by factual arguments.",
     Dimension::TF, -1},
    {"Q58", "You are more likely to rely on emotional intuition than logical reasoning when making a choice.",
     Dimension::TF, -1},
    {"Q15", "You rarely worry about whether you make a good impression on people you meet.", Dimension::TF, +1},
    {"Q4", "Your living and working spaces are clean and organized.", Dimension::PJ, -1},
    {"Q34", "You find it challenging to maintain a consistent work or study schedule.", Dimension::PJ, +1},
    {"Q44", "If your plans are interrupted, your top priority is to get back on track as soon as possible.",
     Dimension::PJ, -1},
}};

// Pole vocabularies, [dimension][label 1 / label 0].
const std::array<std::array<std::vector<std::string_view>, 2>, kNumDimensions> kPoleWords = {{
    {{{"quiet", "alone", "book", "solitude", "home", "recharge", "introvert", "calm", "reading", "privacy"},
      {"party", "friends", "crowd", "social", "talking", "outgoing", "festival", "team", "energized", "meetup"}}},
    {{{"practical", "facts", "concrete", "details", "routine", "realistic", "hands", "experience", "steps", "proven"},
      {"ideas", "theory", "abstract", "imagine", "future", "patterns", "meaning", "possibilities", "vision", "novel"}}},
    {{{"logic", "analysis", "objective", "efficient", "argument", "reason", "data", "critique", "fair", "rational"},
      {"feelings", "empathy", "values", "harmony", "caring", "kindness", "hurt", "compassion", "heart", "support"}}},
    {{{"spontaneous", "flexible", "improvise", "whatever", "later", "options", "wander", "adapt", "casual", "open"},
      {"plan", "schedule", "organized", "deadline", "list", "structure", "decided", "order", "tidy", "calendar"}}},
}};

constexpr std::array<std::string_view, 64> kFiller = {
    "the",   "a",      "and",    "to",     "of",     "it",      "is",     "that",  "was",    "for",    "on",
    "with",  "this",   "just",   "like",   "really", "think",   "today",  "some",  "about",  "what",   "when",
    "time",  "people", "thing",  "know",   "good",   "got",     "make",   "still", "would",  "there",  "day",
    "back",  "went",   "maybe",  "pretty", "lot",    "new",     "week",   "work",  "movie",  "coffee", "music",
    "game",  "post",   "thread", "yeah",   "anyone", "else",    "right",  "kind",  "sure",   "also",   "much",
    "even",  "well",   "year",   "around", "little", "morning", "weather", "video", "school"};

void check_config(const SyntheticConfig& c) {
  if (c.n_users < 3) throw ValidationError("n_users must be at least 3");
  if (c.items_per_dim < 1) throw ValidationError("items_per_dim must be at least 1");
  if (c.post_informativeness < 0 || c.post_informativeness > 1) {
    throw ValidationError("post_informativeness must lie in [0, 1]");
  }
  if (c.theta_min < 0 || c.theta_min >= 1) throw ValidationError("theta_min must lie in [0, 1)");
  if (c.noise_sigma < 0) throw ValidationError("noise_sigma must be non-negative");
  if (c.posts_per_user == 0 || c.tokens_per_post == 0) throw ValidationError("posts need at least one token");
  if (c.words_per_pole == 0) throw ValidationError("words_per_pole must be positive");
}

/// k-th trait word of a pole; past the base list, base words get a letter suffix.
std::string pole_word(std::size_t m, int pole, std::size_t k) {
  const auto& base = kPoleWords[m][static_cast<std::size_t>(pole)];
  std::string w(base[k % base.size()]);
  if (k >= base.size()) {
    for (std::size_t r = k / base.size(); r > 0; r /= 26) w.push_back(static_cast<char>('a' + (r - 1) % 26));
  }
  return w;
}

std::string pad_index(std::size_t n) {
  std::string s = std::to_string(n);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

}  // namespace

Questionnaire synthetic_questionnaire(std::size_t items_per_dim) {
  std::vector<Item> items;
  std::size_t next_id = 100;
  for (Dimension m : kAllDimensions) {
    std::size_t count = 0;
    for (const SeedItem& s : kSeedItems) {
      if (s.construct != m || count == items_per_dim) continue;
      items.push_back({s.id, s.text, m, kDefaultScaleMin, kDefaultScaleMax});
      ++count;
    }
    const auto& words = kPoleWords[index_of(m)];
    for (std::size_t k = 0; count < items_per_dim; ++k, ++count) {
      const int label = static_cast<int>(k % 2 == 0);
      const std::string_view w = words[label == 1 ? 0 : 1][k / 2 % words[0].size()];
      items.push_back({"Q" + std::to_string(next_id++),
                       "You would describe your days with the word '" + std::string(w) + "' (" +
                           std::string(to_string(m)) + " variant " + std::to_string(k + 1) + ").",
                       m, kDefaultScaleMin, kDefaultScaleMax});
    }
  }
  return Questionnaire("synthetic-" + std::to_string(items_per_dim), std::move(items));
}

SyntheticCorpus generate_synthetic(const SyntheticConfig& config) {
  check_config(config);
  SyntheticCorpus out;
  out.questionnaire = synthetic_questionnaire(config.items_per_dim);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> strength(config.theta_min, 1.0);

  // Item keying: seed items carry their own direction, templated items alternate.
  std::vector<int> direction(out.questionnaire.size(), +1);
  for (std::size_t i = 0; i < out.questionnaire.size(); ++i) {
    const Item& item = out.questionnaire[i];
    bool seeded = false;
    for (const SeedItem& s : kSeedItems) {
      if (item.item_id == s.id) {
        direction[i] = s.direction;
        seeded = true;
      }
    }
    if (!seeded) direction[i] = (i % 2 == 0) ? +1 : -1;
  }
  for (std::size_t i = 0; i < out.questionnaire.size(); ++i) {
    SyntheticItemProfile p{out.questionnaire[i].item_id, 1.0, 1.0};
    if (config.heterogeneous_items) {
      p.informativeness = 0.1 + 0.9 * unit(rng);
      p.noise = 0.5 + 1.5 * unit(rng);
    }
    p.informativeness *= direction[i];
    out.item_profiles.push_back(p);
  }

  std::uniform_int_distribution<std::size_t> pick_dim(0, kNumDimensions - 1);
  std::uniform_int_distribution<std::size_t> pick_word(0, config.words_per_pole - 1);
  std::uniform_int_distribution<std::size_t> pick_filler(0, kFiller.size() - 1);
  for (std::size_t u = 0; u < config.n_users; ++u) {
    LatentTraitProfile prof;
    prof.user_id = "u" + pad_index(u);
    prof.noise_sigma = config.noise_sigma;
    for (double& t : prof.theta) t = (unit(rng) < 0.5 ? -1.0 : 1.0) * strength(rng);

    UserRecord rec;
    rec.user_id = prof.user_id;
    rec.labels = prof.labels();
    for (std::size_t p = 0; p < config.posts_per_user; ++p) {
      std::string post;
      for (std::size_t t = 0; t < config.tokens_per_post; ++t) {
        if (!post.empty()) post.push_back(' ');
        if (unit(rng) < config.post_informativeness) {
          const std::size_t m = pick_dim(rng);
          const bool first_pole = unit(rng) < 0.5 * (1.0 + prof.theta[m]);
          post += pole_word(m, first_pole ? 0 : 1, pick_word(rng));
        } else {
          post += kFiller[pick_filler(rng)];
        }
      }
      rec.posts.push_back(std::move(post));
    }
    out.users.push_back(std::move(rec));
    out.profiles.push_back(prof);
  }
  return out;
}

void save_profiles(const std::filesystem::path& path, const std::vector<LatentTraitProfile>& profiles,
                   const std::vector<SyntheticItemProfile>& item_profiles) {
  json j;
  j["users"] = json::array();
  for (const auto& p : profiles) {
    j["users"].push_back({{"user_id", p.user_id}, {"theta", p.theta}, {"noise_sigma", p.noise_sigma}});
  }
  j["items"] = json::array();
  for (const auto& p : item_profiles) {
    j["items"].push_back({{"item_id", p.item_id}, {"informativeness", p.informativeness}, {"noise", p.noise}});
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

void load_profiles(const std::filesystem::path& path, std::vector<LatentTraitProfile>& profiles,
                   std::vector<SyntheticItemProfile>& item_profiles) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  profiles.clear();
  item_profiles.clear();
  try {
    for (const auto& u : j.at("users")) {
      LatentTraitProfile p;
      p.user_id = u.at("user_id").get<std::string>();
      const auto theta = u.at("theta").get<std::vector<double>>();
      if (theta.size() != kNumDimensions) {
        throw ValidationError("profile " + p.user_id + " needs 4 theta values");
      }
      std::copy(theta.begin(), theta.end(), p.theta.begin());
      p.noise_sigma = u.at("noise_sigma").get<double>();
      profiles.push_back(std::move(p));
    }
    if (j.contains("items")) {
      for (const auto& i : j.at("items")) {
        item_profiles.push_back(
            {i.at("item_id").get<std::string>(), i.at("informativeness").get<double>(), i.at("noise").get<double>()});
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

}  // namespace aad

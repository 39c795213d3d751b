// aad: command-line front end for the ask-answer-detect workflow.

#include <cstdio>
#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "aad/ask.hpp"
#include "aad/core.hpp"
#include "aad/encode.hpp"
#include "aad/error.hpp"
#include "aad/eval.hpp"
#include "aad/model.hpp"
#include "aad/runio.hpp"
#include "aad/synthetic.hpp"
#include "aad/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aad;

namespace {

// ---------------------------------------------------------------------------
// Defaults. Every flag maps onto one key of this tree; config files use the same keys.
// ---------------------------------------------------------------------------

json default_config() {
  const SyntheticConfig syn;
  const MoeConfig moe;
  const TrainConfig tr;
  const LlmClientConfig llm;
  json variants = json::array();
  for (auto v : kAllVariants) variants.push_back(std::string(to_string(v)));
  return {
      {"seed", 0},
      {"data",
       {{"dataset", ""},
        {"questionnaire", ""},
        {"answers", ""},
        {"profiles", ""},
        {"embeddings", ""},
        {"split_seed", 0},
        {"split", {{"train", 0.6}, {"validation", 0.2}, {"test", 0.2}}}}},
      {"embedding", {{"dim", EmbeddingProvider::kDefaultDim}, {"hash_seed", EmbeddingProvider::kDefaultSeed}}},
      {"model",
       {{"experts", moe.n_experts},
        {"expert_hidden", moe.expert_hidden},
        {"router_hidden", moe.router_hidden},
        {"activation", "relu"},
        {"loss", "l1"},
        {"huber_delta", moe.huber_delta}}},
      {"train",
       {{"lambda_q", tr.lambda_q},
        {"lambda_cls", tr.lambda_cls},
        {"grad_clip", nullptr},
        {"fusion", "gated"},
        {"stage1", {{"lr", tr.stage1.lr}, {"batch", tr.stage1.batch}, {"epochs", tr.stage1.epochs}}},
        {"stage2",
         {{"lr", tr.stage2.lr},
          {"batch", tr.stage2.batch},
          {"max_epochs", tr.stage2.max_epochs},
          {"patience", tr.stage2.patience}}},
        {"adam", {{"beta1", tr.adam.beta1}, {"beta2", tr.adam.beta2}, {"epsilon", tr.adam.epsilon}}}}},
      {"synthetic",
       {{"n_users", syn.n_users},
        {"items_per_dim", syn.items_per_dim},
        {"post_informativeness", syn.post_informativeness},
        {"posts_per_user", syn.posts_per_user},
        {"tokens_per_post", syn.tokens_per_post},
        {"words_per_pole", syn.words_per_pole},
        {"noise_sigma", syn.noise_sigma},
        {"theta_min", syn.theta_min},
        {"heterogeneous_items", syn.heterogeneous_items}}},
      {"ask",
       {{"backend", "synthetic"},
        {"split", "train"},
        {"samples", 5},
        {"informativeness", 0.8},
        {"temperature", 0.7},
        {"include_label", false},
        {"template", ""},
        {"post_char_budget", kDefaultPostCharBudget}}},
      {"llm",
       {{"endpoint", llm.endpoint},
        {"model", llm.model},
        {"api_key_env", llm.api_key_env},
        {"max_parse_retries", llm.max_parse_retries},
        {"max_transport_retries", llm.max_transport_retries},
        {"max_in_flight", llm.max_in_flight},
        {"timeout", llm.timeout}}},
      {"eval", {{"checkpoint", ""}, {"weights", ""}, {"split", "test"}}},
      {"ablate", {{"variants", variants}, {"seeds", {1, 2, 3, 4, 5}}}},
      {"sweep",
       {{"fractions", {0.4, 0.6, 0.8, 1.0}}, {"questions", {3, 6, 9, 12, 15}}, {"experts", {4, 8, 16, 32}}}},
      {"plots", {{"svg", true}}},
  };
}

// ---------------------------------------------------------------------------
// Flag bindings
// ---------------------------------------------------------------------------

enum class Kind { text, integer, number, boolean, integers, numbers, texts };

struct Binding {
  CLI::Option* opt = nullptr;
  json::json_pointer key;
  Kind kind = Kind::text;
  std::string value;
  std::vector<std::string> values;
  bool flag = false;
};

std::string describe_default(const json& v) {
  if (v.is_null()) return "unset";
  if (v.is_string()) return v.get<std::string>().empty() ? "none" : v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + (x.is_string() ? x.get<std::string>() : x.dump());
    return s;
  }
  return v.dump();
}

json convert(const Binding& b) {
  const std::string name = b.opt->get_name();
  auto num = [&](const std::string& s) {
    try {
      std::size_t pos = 0;
      const double x = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return x;
    } catch (const std::exception&) {
      throw ValidationError(name + ": '" + s + "' is not a number");
    }
  };
  auto integer = [&](const std::string& s) {
    try {
      std::size_t pos = 0;
      const auto x = std::stoull(s, &pos);
      if (pos != s.size() || s.front() == '-') throw std::invalid_argument(s);
      return x;
    } catch (const std::exception&) {
      throw ValidationError(name + ": '" + s + "' is not a non-negative integer");
    }
  };
  switch (b.kind) {
    case Kind::text: return b.value;
    case Kind::integer: return integer(b.value);
    case Kind::number: return num(b.value);
    case Kind::boolean: return b.flag;
    case Kind::integers: {
      json a = json::array();
      for (const auto& s : b.values) a.push_back(integer(s));
      return a;
    }
    case Kind::numbers: {
      json a = json::array();
      for (const auto& s : b.values) a.push_back(num(s));
      return a;
    }
    case Kind::texts: return b.values;
  }
  return nullptr;
}

/// One subcommand: its flags, the config sections it reads and echoes, and its body.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::string> sections;
  std::deque<Binding> bindings;
  std::string config_path;
  std::string out;
  bool force = false;

  void bind(const std::string& flag, const std::string& key, Kind kind, const std::string& help,
            const json& defaults) {
    Binding& b = bindings.emplace_back();
    b.key = json::json_pointer(key);
    b.kind = kind;
    const std::string text = help + " [" + key.substr(1) + ", default " + describe_default(defaults[b.key]) + "]";
    switch (kind) {
      case Kind::boolean: b.opt = app->add_flag(flag, b.flag, text); break;
      case Kind::integers:
      case Kind::numbers:
      case Kind::texts: b.opt = app->add_option(flag, b.values, text)->delimiter(',')->type_name("LIST"); break;
      default:
        b.opt = app->add_option(flag, b.value, text)
                    ->type_name(kind == Kind::text ? "TEXT" : kind == Kind::integer ? "UINT" : "NUM");
    }
  }

  /// defaults <- config file <- flags, restricted to `sections`.
  json effective(const json& defaults) const {
    json file = json::object();
    if (!config_path.empty()) file = load_config_file(config_path);
    warn_unknown(file, defaults, "");
    json cfg = json::object();
    for (const auto& s : sections) {
      cfg[s] = defaults.at(s);
      if (file.contains(s)) cfg[s] = merge_config(cfg[s], file[s]);
    }
    for (const auto& b : bindings) {
      if (b.opt->count() > 0) cfg[b.key] = convert(b);
    }
    return cfg;
  }

  static void warn_unknown(const json& file, const json& defaults, const std::string& prefix) {
    for (auto it = file.begin(); it != file.end(); ++it) {
      const std::string key = prefix + "/" + it.key();
      if (!defaults.contains(it.key())) {
        spdlog::warn("config key {} is not recognized and will be ignored", key);
      } else if (it->is_object() && defaults[it.key()].is_object()) {
        warn_unknown(*it, defaults[it.key()], key);
      }
    }
  }
};

void add_common(Command& c) {
  c.app->add_option("--config", c.config_path, "TOML or JSON config file; flags override its values");
  c.app->add_option("--out", c.out, "Run directory (manifest, events log, artifacts)")->required();
  c.app->add_flag("--force", c.force, "Reuse a run directory whose manifest does not match");
}

void add_data_flags(Command& c, const json& d, bool answers) {
  c.bind("--dataset", "/data/dataset", Kind::text, "Users JSONL", d);
  c.bind("--questionnaire", "/data/questionnaire", Kind::text, "Questionnaire JSON", d);
  if (answers) c.bind("--answers", "/data/answers", Kind::text, "Answers JSONL", d);
  c.bind("--split-seed", "/data/split_seed", Kind::integer, "Seed for splitting users that carry no split", d);
  c.bind("--split-train", "/data/split/train", Kind::number, "Train ratio when splitting", d);
  c.bind("--split-validation", "/data/split/validation", Kind::number, "Validation ratio when splitting", d);
  c.bind("--split-test", "/data/split/test", Kind::number, "Test ratio when splitting", d);
}

void add_embedding_flags(Command& c, const json& d) {
  c.bind("--embeddings", "/data/embeddings", Kind::text, "Precomputed embedding table JSONL (replaces hashing)", d);
  c.bind("--embed-dim", "/embedding/dim", Kind::integer, "Hashing embedding dimension d", d);
  c.bind("--hash-seed", "/embedding/hash_seed", Kind::integer, "Hashing seed", d);
}

void add_model_flags(Command& c, const json& d) {
  c.bind("--experts", "/model/experts", Kind::integer, "Number of experts K", d);
  c.bind("--expert-hidden", "/model/expert_hidden", Kind::integer, "Expert hidden width H", d);
  c.bind("--router-hidden", "/model/router_hidden", Kind::integer, "Router hidden width", d);
  c.bind("--activation", "/model/activation", Kind::text, "Expert activation: relu|tanh", d);
  c.bind("--loss", "/model/loss", Kind::text, "Answer loss: l1|huber", d);
  c.bind("--huber-delta", "/model/huber_delta", Kind::number, "Huber transition point", d);
}

void add_train_flags(Command& c, const json& d, bool seed = true) {
  if (seed) c.bind("--seed", "/seed", Kind::integer, "Model initialization and shuffling seed", d);
  c.bind("--lambda-q", "/train/lambda_q", Kind::number, "Answer loss weight in stage 2", d);
  c.bind("--lambda-cls", "/train/lambda_cls", Kind::number, "Classification loss weight in stage 2", d);
  c.bind("--grad-clip", "/train/grad_clip", Kind::number, "Max global gradient norm", d);
  c.bind("--fusion", "/train/fusion", Kind::text, "Fusion: gated|average|posts_only|evidence_only", d);
  c.bind("--stage1-lr", "/train/stage1/lr", Kind::number, "Stage 1 learning rate", d);
  c.bind("--stage1-batch", "/train/stage1/batch", Kind::integer, "Stage 1 batch size (pairs)", d);
  c.bind("--stage1-epochs", "/train/stage1/epochs", Kind::integer, "Stage 1 epochs", d);
  c.bind("--stage2-lr", "/train/stage2/lr", Kind::number, "Stage 2 learning rate", d);
  c.bind("--stage2-batch", "/train/stage2/batch", Kind::integer, "Stage 2 batch size (users)", d);
  c.bind("--stage2-max-epochs", "/train/stage2/max_epochs", Kind::integer, "Stage 2 epoch limit", d);
  c.bind("--patience", "/train/stage2/patience", Kind::integer, "Early-stopping patience (epochs)", d);
}

// ---------------------------------------------------------------------------
// Typed config access
// ---------------------------------------------------------------------------

template <class T>
T get(const json& cfg, const std::string& key) {
  const json::json_pointer ptr(key);
  if (!cfg.contains(ptr)) throw ValidationError("config key " + key + " is missing");
  try {
    return cfg[ptr].get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config key " + key + " has the wrong type: " + cfg[ptr].dump());
  }
}

fs::path required_path(const json& cfg, const std::string& key, const std::string& flag) {
  const auto p = get<std::string>(cfg, key);
  if (p.empty()) throw ValidationError(flag + " is required");
  return p;
}

FusionMode parse_fusion(const std::string& s) {
  if (s == "gated") return FusionMode::gated;
  if (s == "average") return FusionMode::average;
  if (s == "posts_only") return FusionMode::posts_only;
  if (s == "evidence_only") return FusionMode::evidence_only;
  throw ValidationError("unknown fusion mode '" + s + "'");
}

MoeConfig moe_config(const json& cfg, std::size_t embed_dim) {
  MoeConfig m;
  m.embed_dim = embed_dim;
  m.n_experts = get<std::size_t>(cfg, "/model/experts");
  m.expert_hidden = get<std::size_t>(cfg, "/model/expert_hidden");
  m.router_hidden = get<std::size_t>(cfg, "/model/router_hidden");
  m.activation = parse_activation(get<std::string>(cfg, "/model/activation"));
  const auto loss = get<std::string>(cfg, "/model/loss");
  if (loss == "l1") {
    m.loss = AnswerLossKind::l1;
  } else if (loss == "huber") {
    m.loss = AnswerLossKind::huber;
  } else {
    throw ValidationError("unknown answer loss '" + loss + "'");
  }
  m.huber_delta = get<double>(cfg, "/model/huber_delta");
  m.init_seed = get<std::uint64_t>(cfg, "/seed");
  return m;
}

TrainConfig train_config(const json& cfg) {
  TrainConfig t;
  t.seed = get<std::uint64_t>(cfg, "/seed");
  t.lambda_q = get<double>(cfg, "/train/lambda_q");
  t.lambda_cls = get<double>(cfg, "/train/lambda_cls");
  if (!cfg[json::json_pointer("/train/grad_clip")].is_null()) t.grad_clip = get<double>(cfg, "/train/grad_clip");
  t.stage1.lr = get<double>(cfg, "/train/stage1/lr");
  t.stage1.batch = get<std::size_t>(cfg, "/train/stage1/batch");
  t.stage1.epochs = get<std::size_t>(cfg, "/train/stage1/epochs");
  t.stage2.lr = get<double>(cfg, "/train/stage2/lr");
  t.stage2.batch = get<std::size_t>(cfg, "/train/stage2/batch");
  t.stage2.max_epochs = get<std::size_t>(cfg, "/train/stage2/max_epochs");
  t.stage2.patience = get<std::size_t>(cfg, "/train/stage2/patience");
  t.adam.beta1 = get<double>(cfg, "/train/adam/beta1");
  t.adam.beta2 = get<double>(cfg, "/train/adam/beta2");
  t.adam.epsilon = get<double>(cfg, "/train/adam/epsilon");
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Inputs shared by the training and evaluation commands
// ---------------------------------------------------------------------------

struct Inputs {
  std::vector<UserRecord> dataset;
  Questionnaire questionnaire;
  AnswerStore store;
  std::optional<EmbeddingProvider> provider;
  std::optional<TrainingData> data;
  std::vector<fs::path> files;
};

std::vector<fs::path> input_files(const json& cfg, bool answers) {
  std::vector<fs::path> files = {required_path(cfg, "/data/dataset", "--dataset"),
                                 required_path(cfg, "/data/questionnaire", "--questionnaire")};
  if (answers) files.push_back(required_path(cfg, "/data/answers", "--answers"));
  const auto emb = get<std::string>(cfg, "/data/embeddings");
  if (!emb.empty()) files.emplace_back(emb);
  return files;
}

std::vector<UserRecord> ensure_split(std::vector<UserRecord> users, const json& cfg) {
  const bool missing = std::any_of(users.begin(), users.end(), [](const UserRecord& u) { return !u.split; });
  if (!missing) return users;
  const SplitRatios r{get<double>(cfg, "/data/split/train"), get<double>(cfg, "/data/split/validation"),
                      get<double>(cfg, "/data/split/test")};
  const auto seed = get<std::uint64_t>(cfg, "/data/split_seed");
  spdlog::info("dataset has users without a split; splitting all users with seed {}", seed);
  return split_dataset(std::move(users), r, seed);
}

Inputs load_inputs(const json& cfg) {
  Inputs in;
  in.files = input_files(cfg, true);
  const auto emb = get<std::string>(cfg, "/data/embeddings");
  HasEmbedding has;
  if (!emb.empty()) {
    auto table = std::make_shared<const EmbeddingTable>(EmbeddingTable::load(emb));
    has = [table](const std::string& id) { return table->contains(id); };
    in.provider.emplace(EmbeddingProvider::precomputed(table));
  } else {
    in.provider.emplace(EmbeddingProvider::hashing(get<std::size_t>(cfg, "/embedding/dim"),
                                                   get<std::uint64_t>(cfg, "/embedding/hash_seed")));
  }
  in.dataset = ensure_split(load_dataset(in.files[0], DatasetFormat::jsonl, has), cfg);
  in.questionnaire = load_questionnaire(in.files[1]);
  in.store = load_answers(in.files[2]);
  const auto counts = count_splits(in.dataset);
  spdlog::info("{} users (train {}, validation {}, test {}), {} items, {} answer records", in.dataset.size(),
               counts.train, counts.validation, counts.test, in.questionnaire.size(), in.store.size());
  in.data.emplace(prepare_training_data(in.dataset, in.questionnaire, *in.provider, in.store));
  return in;
}

const std::vector<Eigen::Index>& split_rows(const TrainingData& data, const std::string& split) {
  switch (parse_split(split)) {
    case Split::train: return data.train;
    case Split::validation: return data.validation;
    case Split::test: return data.test;
  }
  throw ValidationError("unknown split " + split);
}

/// Answer MAE over rows that carry answers; null when none do (test users are usually unasked).
json mae_or_null(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows) {
  for (auto r : rows) {
    if (!data.targets.row(r).array().isNaN().all()) return answer_mae(model, data, rows);
  }
  return nullptr;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json result_json(const EvalResult& r) { return r.to_json(); }

/// Opens the run directory; returns nullptr when the recorded run is already complete.
std::unique_ptr<RunDirectory> open_run(const Command& c, const std::string& name, const json& cfg,
                                       const std::vector<fs::path>& inputs) {
  auto run = std::make_unique<RunDirectory>(c.out, name, cfg, inputs, c.force);
  if (run->state() == RunDirectory::State::up_to_date) {
    spdlog::info("{} is up to date; nothing to do", c.out);
    std::cout << (fs::path(c.out) / "manifest.json").string() << '\n';
    return nullptr;
  }
  return run;
}

void finish(RunDirectory& run) {
  run.finish();
  std::cout << (run.path() / "manifest.json").string() << '\n';
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void run_gen_synthetic(const Command& c, const json& defaults) {
  const json cfg = c.effective(defaults);
  SyntheticConfig s;
  s.n_users = get<std::size_t>(cfg, "/synthetic/n_users");
  s.items_per_dim = get<std::size_t>(cfg, "/synthetic/items_per_dim");
  s.post_informativeness = get<double>(cfg, "/synthetic/post_informativeness");
  s.posts_per_user = get<std::size_t>(cfg, "/synthetic/posts_per_user");
  s.tokens_per_post = get<std::size_t>(cfg, "/synthetic/tokens_per_post");
  s.words_per_pole = get<std::size_t>(cfg, "/synthetic/words_per_pole");
  s.noise_sigma = get<double>(cfg, "/synthetic/noise_sigma");
  s.theta_min = get<double>(cfg, "/synthetic/theta_min");
  s.heterogeneous_items = get<bool>(cfg, "/synthetic/heterogeneous_items");
  s.seed = get<std::uint64_t>(cfg, "/seed");
  auto run = open_run(c, "gen-synthetic", cfg, {});
  if (!run) return;
  run->manifest().seeds = {s.seed};

  SyntheticCorpus corpus = generate_synthetic(s);
  const SplitRatios r{get<double>(cfg, "/data/split/train"), get<double>(cfg, "/data/split/validation"),
                      get<double>(cfg, "/data/split/test")};
  corpus.users = split_dataset(std::move(corpus.users), r, get<std::uint64_t>(cfg, "/data/split_seed"));
  const fs::path dir = run->path();
  save_dataset(dir / "users.jsonl", corpus.users);
  save_questionnaire(dir / "questionnaire.json", corpus.questionnaire);
  save_profiles(dir / "profiles.json", corpus.profiles, corpus.item_profiles);
  run->add_artifact("dataset", dir / "users.jsonl");
  run->add_artifact("questionnaire", dir / "questionnaire.json");
  run->add_artifact("profiles", dir / "profiles.json");
  const auto counts = count_splits(corpus.users);
  run->event("generated", {{"users", corpus.users.size()},
                           {"items", corpus.questionnaire.size()},
                           {"train", counts.train},
                           {"validation", counts.validation},
                           {"test", counts.test}});
  spdlog::info("wrote {} users and {} items to {}", corpus.users.size(), corpus.questionnaire.size(),
               dir.string());
  finish(*run);
}

void run_ask(const Command& c, const json& defaults) {
  json cfg = c.effective(defaults);
  const auto backend = get<std::string>(cfg, "/ask/backend");
  if (backend == "synthetic") {
    cfg.erase("llm");
  } else if (backend != "llm") {
    throw ValidationError("unknown ask backend '" + backend + "' (expected llm or synthetic)");
  }
  const auto split = get<std::string>(cfg, "/ask/split");
  const bool include_label = get<bool>(cfg, "/ask/include_label");
  if (include_label && split != "train") {
    throw ValidationError("--include-label is only allowed on the train split (requested " + split + ")");
  }
  std::vector<fs::path> inputs = {required_path(cfg, "/data/dataset", "--dataset"),
                                  required_path(cfg, "/data/questionnaire", "--questionnaire")};
  if (backend == "synthetic") inputs.push_back(required_path(cfg, "/data/profiles", "--profiles"));
  const auto tmpl_path = get<std::string>(cfg, "/ask/template");
  if (backend == "llm" && !tmpl_path.empty()) inputs.emplace_back(tmpl_path);

  auto run = open_run(c, "ask", cfg, inputs);
  if (!run) return;
  const auto seed = get<std::uint64_t>(cfg, "/seed");
  run->manifest().seeds = {seed};

  const auto users = ensure_split(load_dataset(inputs[0]), cfg);
  const Questionnaire q = load_questionnaire(inputs[1]);
  std::vector<const UserRecord*> selected;
  if (split == "all") {
    for (const auto& u : users) selected.push_back(&u);
  } else {
    selected = select_split(users, parse_split(split));
  }
  if (selected.empty()) throw ValidationError("no users in split " + split);
  const int samples = get<int>(cfg, "/ask/samples");
  if (samples < 1) throw ValidationError("--samples must be at least 1");
  const fs::path answers_path = run->path() / "answers.jsonl";

  if (backend == "synthetic") {
    std::vector<LatentTraitProfile> profiles;
    std::vector<SyntheticItemProfile> items;
    load_profiles(inputs[2], profiles, items);
    std::map<std::string, const LatentTraitProfile*> by_id;
    for (const auto& p : profiles) by_id[p.user_id] = &p;
    std::vector<LatentTraitProfile> chosen;
    for (const auto* u : selected) {
      auto it = by_id.find(u->user_id);
      if (it == by_id.end()) throw ValidationError("no latent profile for user " + u->user_id);
      chosen.push_back(*it->second);
    }
    const auto records = ask_synthetic(chosen, q, get<double>(cfg, "/ask/informativeness"), samples, seed, items);
    save_answers(answers_path, aggregate_answers(records));
    run->event("answered", {{"backend", backend}, {"users", chosen.size()}, {"records", records.size()}});
    spdlog::info("{} synthetic answer records for {} users", records.size(), chosen.size());
  } else {
    LlmClientConfig llm;
    llm.endpoint = get<std::string>(cfg, "/llm/endpoint");
    llm.model = get<std::string>(cfg, "/llm/model");
    llm.api_key_env = get<std::string>(cfg, "/llm/api_key_env");
    llm.max_parse_retries = get<int>(cfg, "/llm/max_parse_retries");
    llm.max_transport_retries = get<int>(cfg, "/llm/max_transport_retries");
    llm.max_in_flight = get<int>(cfg, "/llm/max_in_flight");
    llm.timeout = get<double>(cfg, "/llm/timeout");
    const PromptTemplate tmpl = tmpl_path.empty() ? PromptTemplate::builtin() : PromptTemplate::load(tmpl_path);
    const auto requests = build_requests(tmpl, selected, q, include_label, samples,
                                         get<double>(cfg, "/ask/temperature"),
                                         get<std::size_t>(cfg, "/ask/post_char_budget"));
    const fs::path failures_path = run->path() / "failures.jsonl";
    const auto result = ask_llm(llm, make_http_transport(llm), requests, q, answers_path, failures_path);
    run->add_artifact("failures", failures_path);
    run->event("answered", {{"backend", backend},
                            {"requests", requests.size()},
                            {"records", result.records.size()},
                            {"resumed", result.resumed},
                            {"failures", result.failures.size()},
                            {"clamped", result.clamped}});
    spdlog::info("{} answer records ({} resumed), {} failures, {} clamped samples", result.records.size(),
                 result.resumed, result.failures.size(), result.clamped);
    if (!result.failures.empty()) {
      run->write_manifest();
      throw Error(std::to_string(result.failures.size()) + " pairs failed after retries; see " +
                  failures_path.string() + " and rerun to resume");
    }
  }
  run->add_artifact("answers", answers_path);
  finish(*run);
}

EpochSink epoch_sink(RunDirectory& run, const fs::path& path) {
  auto out = std::make_shared<std::ofstream>(path, std::ios::trunc);
  if (!*out) throw Error("cannot write " + path.string());
  return [out, &run](const EpochRecord& e) {
    const json j = e.to_json();
    *out << j.dump() << '\n';
    out->flush();
    run.event("epoch", j);
    spdlog::info("stage {} epoch {}: answer {:.5f} joint {:.5f}{}", e.stage, e.epoch, e.answer_loss, e.joint_loss,
                 e.validation ? fmt::format(" val avg {:.4f}", e.validation->average) : std::string());
  };
}

void run_train(const Command& c, const json& defaults) {
  const json cfg = c.effective(defaults);
  auto run = open_run(c, "train", cfg, input_files(cfg, true));
  if (!run) return;
  const Inputs in = load_inputs(cfg);
  const auto seed = get<std::uint64_t>(cfg, "/seed");
  run->manifest().seeds = {seed};
  const FusionMode fusion = parse_fusion(get<std::string>(cfg, "/train/fusion"));
  const Pipeline p{in.dataset, in.questionnaire, in.store, *in.data, moe_config(cfg, in.provider->dim()), train_config(cfg),
                   in.provider->name()};
  const fs::path dir = run->path();

  PipelineHooks hooks{epoch_sink(*run, dir / "epochs.jsonl"), dir};
  TrainedArtifacts art;
  if (fusion == FusionMode::gated) {
    art = train_pipeline(p, seed, hooks);
  } else {
    // Same two stages with a fixed fusion mode.
    TrainConfig tc = p.train;
    MoeConfig mc = p.moe;
    mc.init_seed = seed;
    tc.seed = seed;
    art.weights = pipeline_weights(p);
    art.model = Model(ModelConfig::for_questionnaire(mc, in.questionnaire, p.provider_name));
    art.report = pretrain_answer_module(art.model, *in.data, tc, hooks.sink);
    art.model.save(dir / "stage1.ckpt");
    art.pretrained = art.model;
    art.report.append(joint_train(art.model, *in.data, art.weights.w, tc, {fusion, dir / "best.ckpt"}, hooks.sink));
  }
  art.model.save(dir / "model.ckpt");
  art.weights.save_json(dir / "weights.json");

  InferenceOptions opt{fusion, art.weights.w, {}};
  json report = {{"seed", seed},
                 {"best_epoch", art.report.best_epoch ? json(*art.report.best_epoch) : json(nullptr)},
                 {"best_validation", art.report.best_validation ? json(*art.report.best_validation) : json(nullptr)},
                 {"stage1_answer_mae_validation", mae_or_null(art.pretrained, *in.data, in.data->validation)},
                 {"answer_mae_validation", mae_or_null(art.model, *in.data, in.data->validation)},
                 {"test", result_json(evaluate(art.model, *in.data, in.data->test, opt))},
                 {"validation", result_json(evaluate(art.model, *in.data, in.data->validation, opt))}};
  write_json(dir / "report.json", report);
  for (const char* name : {"stage1.ckpt", "best.ckpt", "model.ckpt"}) {
    if (fs::exists(dir / name)) run->add_artifact(fs::path(name).stem().string(), dir / name);
  }
  run->add_artifact("weights", dir / "weights.json");
  run->add_artifact("epochs", dir / "epochs.jsonl");
  run->add_artifact("report", dir / "report.json");
  spdlog::info("test avg macro-F1 {:.4f}", report["test"]["avg"].get<double>());
  finish(*run);
}

void run_eval(const Command& c, const json& defaults) {
  const json cfg = c.effective(defaults);
  const fs::path ckpt = required_path(cfg, "/eval/checkpoint", "--checkpoint");
  const auto weights_path = get<std::string>(cfg, "/eval/weights");
  auto files = input_files(cfg, true);
  files.push_back(ckpt);
  if (!weights_path.empty()) files.emplace_back(weights_path);
  auto run = open_run(c, "eval", cfg, files);
  if (!run) return;
  const Inputs in = load_inputs(cfg);
  const Model model = Model::load(ckpt);
  model.check_compatible(in.questionnaire, *in.provider);
  const EvidenceWeights w = weights_path.empty()
                                ? compute_evidence_weights(in.store, select_split(in.dataset, Split::train),
                                                           in.questionnaire)
                                : EvidenceWeights::load_json(weights_path, in.questionnaire);
  const auto split = get<std::string>(cfg, "/eval/split");
  const InferenceOptions opt{parse_fusion(get<std::string>(cfg, "/train/fusion")), w.w, {}};
  Eigen::MatrixXd probs;
  const auto& rows = split_rows(*in.data, split);
  const EvalResult r = evaluate(model, *in.data, rows, opt, &probs);
  const fs::path dir = run->path();
  write_json(dir / "result.json", result_json(r));
  {
    std::ofstream out(dir / "predictions.csv", std::ios::trunc);
    out << "user_id,p_IE,p_SN,p_TF,p_PJ\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out << in.data->user_ids[static_cast<std::size_t>(rows[i])];
      for (Eigen::Index m = 0; m < probs.cols(); ++m) out << fmt::format(",{:.6f}", probs(static_cast<Eigen::Index>(i), m));
      out << '\n';
    }
  }
  run->add_artifact("result", dir / "result.json");
  run->add_artifact("predictions", dir / "predictions.csv");
  run->event("evaluated", result_json(r));
  spdlog::info("{} avg macro-F1 {:.4f} over {} users", split, r.average, r.n_users);
  std::cout << result_json(r).dump() << '\n';
  finish(*run);
}

void run_ablate(const Command& c, const json& defaults) {
  const json cfg = c.effective(defaults);
  std::vector<AblationVariant> variants;
  for (const auto& name : get<std::vector<std::string>>(cfg, "/ablate/variants")) {
    variants.push_back(parse_variant(name));
  }
  const auto seeds = get<std::vector<std::uint64_t>>(cfg, "/ablate/seeds");
  if (variants.empty() || seeds.empty()) throw ValidationError("ablate needs at least one variant and one seed");
  auto run = open_run(c, "ablate", cfg, input_files(cfg, true));
  if (!run) return;
  run->manifest().seeds = seeds;
  const Inputs in = load_inputs(cfg);
  const Pipeline p{in.dataset, in.questionnaire, in.store, *in.data, moe_config(cfg, in.provider->dim()), train_config(cfg),
                   in.provider->name()};
  const fs::path dir = run->path();

  std::map<std::string, std::vector<double>> avg;
  json per_seed = json::array();
  std::ofstream csv(dir / "ablation.csv", std::ios::trunc);
  csv << "seed,variant,IE,SN,TF,PJ,avg\n";
  for (auto seed : seeds) {
    spdlog::info("seed {}: training the full model", seed);
    const TrainedArtifacts art = train_pipeline(p, seed);
    for (auto v : variants) {
      const EvalResult r = run_ablation({v, seed}, p, art, in.data->test);
      const std::string name(to_string(v));
      avg[name].push_back(r.average);
      json row = result_json(r);
      row["seed"] = seed;
      row["variant"] = name;
      per_seed.push_back(row);
      csv << fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", seed, name, r.dims[0].macro_f1,
                         r.dims[1].macro_f1, r.dims[2].macro_f1, r.dims[3].macro_f1, r.average);
      csv.flush();
      run->event("variant", row);
      spdlog::info("seed {} {:<16} avg {:.4f}", seed, name, r.average);
    }
  }

  json summary = json::object();
  const auto full = avg.find("full");
  for (const auto& [name, values] : avg) {
    double mean = 0.0;
    for (double x : values) mean += x;
    json s = {{"mean_avg", mean / static_cast<double>(values.size())}, {"avg", values}};
    if (full != avg.end() && name != "full") {
      std::size_t wins = 0, losses = 0, ties = 0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (full->second[i] > values[i]) {
          ++wins;
        } else if (full->second[i] < values[i]) {
          ++losses;
        } else {
          ++ties;
        }
      }
      s["full_vs"] = {{"wins", wins}, {"losses", losses}, {"ties", ties}, {"p", sign_test_p(wins, losses)}};
    }
    summary[name] = s;
  }
  write_json(dir / "ablation.json", {{"kind", "ablation"}, {"seeds", seeds}, {"summary", summary}, {"runs", per_seed}});
  run->add_artifact("ablation", dir / "ablation.json");
  run->add_artifact("ablation_csv", dir / "ablation.csv");
  finish(*run);
}

void run_analyze_experts(const Command& c, const json& defaults) {
  const json cfg = c.effective(defaults);
  const fs::path ckpt = required_path(cfg, "/eval/checkpoint", "--checkpoint");
  auto files = input_files(cfg, true);
  files.push_back(ckpt);
  auto run = open_run(c, "analyze-experts", cfg, files);
  if (!run) return;
  const Inputs in = load_inputs(cfg);
  const Model model = Model::load(ckpt);
  model.check_compatible(in.questionnaire, *in.provider);
  const auto& rows = split_rows(*in.data, get<std::string>(cfg, "/eval/split"));
  const ActivationMatrix a = expert_activation_matrix(model, *in.data, rows);
  // Baseline: same architecture with zero weights, i.e. uniform gates.
  const Model uniform(model.config(), InitMode::zeros);
  const double base = mean_row_entropy(expert_activation_matrix(uniform, *in.data, rows).matrix);
  json doc = activation_to_json(a, mean_row_entropy(a.matrix));
  doc["uniform_entropy"] = base;
  const fs::path dir = run->path();
  write_json(dir / "activation.json", doc);
  run->add_artifact("activation", dir / "activation.json");
  for (const auto& p : emit_plots({dir / "activation.json"}, dir, get<bool>(cfg, "/plots/svg"))) {
    run->add_artifact(p.filename().string(), p);
  }
  spdlog::info("mean row entropy {:.4f} (uniform-gate baseline {:.4f})", doc["mean_row_entropy"].get<double>(), base);
  finish(*run);
}

enum class SweepKind { data_fraction, questions, experts };

void run_sweep(const Command& c, const json& defaults, SweepKind kind) {
  const json cfg = c.effective(defaults);
  const char* names[] = {"sweep-data-fraction", "sweep-questions", "sweep-experts"};
  const std::string name = names[static_cast<int>(kind)];
  auto run = open_run(c, name, cfg, input_files(cfg, true));
  if (!run) return;
  const Inputs in = load_inputs(cfg);
  const auto seed = get<std::uint64_t>(cfg, "/seed");
  run->manifest().seeds = {seed};
  const Pipeline p{in.dataset, in.questionnaire, in.store, *in.data, moe_config(cfg, in.provider->dim()), train_config(cfg),
                   in.provider->name()};
  std::vector<SweepPoint> points;
  std::string x_label;
  switch (kind) {
    case SweepKind::data_fraction:
      x_label = "fraction";
      points = sweep_data_fraction(p, get<std::vector<double>>(cfg, "/sweep/fractions"), seed);
      break;
    case SweepKind::questions:
      x_label = "items_per_dim";
      points = sweep_questions(p, get<std::vector<std::size_t>>(cfg, "/sweep/questions"), seed);
      break;
    case SweepKind::experts:
      x_label = "experts";
      points = sweep_experts(p, get<std::vector<std::size_t>>(cfg, "/sweep/experts"), seed);
      break;
  }
  for (const auto& pt : points) {
    run->event("point", {{"x", pt.x}, {"avg", pt.result.average}});
    spdlog::info("{} = {}: avg macro-F1 {:.4f}", x_label, pt.x, pt.result.average);
  }
  const fs::path dir = run->path();
  write_json(dir / "sweep.json", sweep_to_json(name, x_label, points));
  run->add_artifact("sweep", dir / "sweep.json");
  for (const auto& path : emit_plots({dir / "sweep.json"}, dir, get<bool>(cfg, "/plots/svg"))) {
    run->add_artifact(path.filename().string(), path);
  }
  finish(*run);
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("aad");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

  const json defaults = default_config();
  CLI::App app{"Ask-answer-detect personality pipeline: synthetic data, role-play answers, training and analysis", "aad"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kEngineVersion));
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  std::deque<Command> commands;
  auto make = [&](const std::string& name, const std::string& help, std::vector<std::string> sections) -> Command& {
    Command& c = commands.emplace_back();
    c.app = app.add_subcommand(name, help);
    c.sections = std::move(sections);
    add_common(c);
    return c;
  };

  Command& gen = make("gen-synthetic", "Generate a synthetic users/questionnaire/profiles fixture",
                      {"seed", "data", "synthetic"});
  gen.bind("--seed", "/seed", Kind::integer, "Generator seed", defaults);
  gen.bind("--n-users", "/synthetic/n_users", Kind::integer, "Number of users", defaults);
  gen.bind("--items-per-dim", "/synthetic/items_per_dim", Kind::integer, "Questionnaire items per dimension",
           defaults);
  gen.bind("--post-informativeness", "/synthetic/post_informativeness", Kind::number,
           "Share of post tokens drawn from trait vocabularies", defaults);
  gen.bind("--posts-per-user", "/synthetic/posts_per_user", Kind::integer, "Posts per user", defaults);
  gen.bind("--tokens-per-post", "/synthetic/tokens_per_post", Kind::integer, "Tokens per post", defaults);
  gen.bind("--words-per-pole", "/synthetic/words_per_pole", Kind::integer, "Vocabulary size of each trait pole",
           defaults);
  gen.bind("--noise-sigma", "/synthetic/noise_sigma", Kind::number, "Answer noise scale stored in profiles",
           defaults);
  gen.bind("--theta-min", "/synthetic/theta_min", Kind::number, "Smallest latent trait magnitude", defaults);
  gen.bind("--heterogeneous-items", "/synthetic/heterogeneous_items", Kind::boolean,
           "Draw per-item informativeness and noise", defaults);
  gen.bind("--split-seed", "/data/split_seed", Kind::integer, "Seed for the train/validation/test split", defaults);
  gen.bind("--split-train", "/data/split/train", Kind::number, "Train ratio", defaults);
  gen.bind("--split-validation", "/data/split/validation", Kind::number, "Validation ratio", defaults);
  gen.bind("--split-test", "/data/split/test", Kind::number, "Test ratio", defaults);

  Command& ask = make("ask", "Collect questionnaire answers from an LLM or the synthetic oracle",
                      {"seed", "data", "ask", "llm"});
  ask.bind("--backend", "/ask/backend", Kind::text, "llm|synthetic", defaults);
  ask.bind("--dataset", "/data/dataset", Kind::text, "Users JSONL", defaults);
  ask.bind("--questionnaire", "/data/questionnaire", Kind::text, "Questionnaire JSON", defaults);
  ask.bind("--profiles", "/data/profiles", Kind::text, "Latent profiles JSON (synthetic backend)", defaults);
  ask.bind("--split", "/ask/split", Kind::text, "Users to ask: train|validation|test|all", defaults);
  ask.bind("--split-seed", "/data/split_seed", Kind::integer, "Seed for splitting users that carry no split",
           defaults);
  ask.bind("--samples", "/ask/samples", Kind::integer, "Samples T per (user, item)", defaults);
  ask.bind("--seed", "/seed", Kind::integer, "Synthetic sampling seed", defaults);
  ask.bind("--informativeness", "/ask/informativeness", Kind::number, "Synthetic answer informativeness",
           defaults);
  ask.bind("--temperature", "/ask/temperature", Kind::number, "LLM sampling temperature", defaults);
  ask.bind("--include-label", "/ask/include_label", Kind::boolean, "Put the user's label in the prompt (train only)",
           defaults);
  ask.bind("--template", "/ask/template", Kind::text, "Prompt template file (builtin when unset)", defaults);
  ask.bind("--post-char-budget", "/ask/post_char_budget", Kind::integer, "Max characters of posts per prompt",
           defaults);
  ask.bind("--endpoint", "/llm/endpoint", Kind::text, "Chat-completions URL", defaults);
  ask.bind("--model", "/llm/model", Kind::text, "Model name sent to the endpoint", defaults);
  ask.bind("--api-key-env", "/llm/api_key_env", Kind::text, "Environment variable holding the API key", defaults);
  ask.bind("--max-parse-retries", "/llm/max_parse_retries", Kind::integer, "Retries after an unparseable reply",
           defaults);
  ask.bind("--max-transport-retries", "/llm/max_transport_retries", Kind::integer,
           "Retries after HTTP or network failures", defaults);
  ask.bind("--max-in-flight", "/llm/max_in_flight", Kind::integer, "Concurrent requests", defaults);
  ask.bind("--timeout", "/llm/timeout", Kind::number, "Request timeout in seconds", defaults);

  const std::vector<std::string> train_sections = {"seed", "data", "embedding", "model", "train"};
  Command& train = make("train", "Stage 1 answer pretraining, then joint stage 2 training", train_sections);
  add_data_flags(train, defaults, true);
  add_embedding_flags(train, defaults);
  add_model_flags(train, defaults);
  add_train_flags(train, defaults);

  Command& eval = make("eval", "Evaluate a checkpoint on one split", {"data", "embedding", "train", "eval"});
  add_data_flags(eval, defaults, true);
  add_embedding_flags(eval, defaults);
  eval.bind("--checkpoint", "/eval/checkpoint", Kind::text, "Model checkpoint", defaults);
  eval.bind("--weights", "/eval/weights", Kind::text, "Evidence weights JSON (recomputed from answers when unset)",
            defaults);
  eval.bind("--split", "/eval/split", Kind::text, "train|validation|test", defaults);
  eval.bind("--fusion", "/train/fusion", Kind::text, "Fusion: gated|average|posts_only|evidence_only", defaults);

  auto with_sections = [&](std::vector<std::string> extra) {
    auto s = train_sections;
    s.insert(s.end(), extra.begin(), extra.end());
    return s;
  };
  Command& ablate = make("ablate", "Train per seed and evaluate ablation variants on the test split",
                         with_sections({"ablate"}));
  add_data_flags(ablate, defaults, true);
  add_embedding_flags(ablate, defaults);
  add_model_flags(ablate, defaults);
  add_train_flags(ablate, defaults, false);
  ablate.bind("--variants", "/ablate/variants", Kind::texts, "Variants to run", defaults);
  ablate.bind("--seeds", "/ablate/seeds", Kind::integers, "Training seeds", defaults);

  Command& analyze = make("analyze-experts", "Expert-by-dimension activation matrix of a checkpoint",
                          {"data", "embedding", "eval", "plots"});
  add_data_flags(analyze, defaults, true);
  add_embedding_flags(analyze, defaults);
  analyze.bind("--checkpoint", "/eval/checkpoint", Kind::text, "Model checkpoint", defaults);
  analyze.bind("--split", "/eval/split", Kind::text, "train|validation|test", defaults);
  analyze.bind("--svg", "/plots/svg", Kind::boolean, "Also render an SVG heatmap", defaults);

  struct SweepDef {
    const char* name;
    const char* help;
    const char* flag;
    const char* key;
    Kind kind;
    const char* flag_help;
    SweepKind sweep;
  };
  const SweepDef sweeps[] = {
      {"sweep-data-fraction", "Retrain on fractions of the training users", "--fractions", "/sweep/fractions",
       Kind::numbers, "Training fractions", SweepKind::data_fraction},
      {"sweep-questions", "Retrain with k random items per dimension", "--questions", "/sweep/questions",
       Kind::integers, "Items per dimension", SweepKind::questions},
      {"sweep-experts", "Retrain with different numbers of experts", "--expert-counts", "/sweep/experts",
       Kind::integers, "Expert counts", SweepKind::experts},
  };
  std::vector<std::pair<Command*, SweepKind>> sweep_cmds;
  for (const auto& s : sweeps) {
    Command& c = make(s.name, s.help, with_sections({"sweep", "plots"}));
    add_data_flags(c, defaults, true);
    add_embedding_flags(c, defaults);
    add_model_flags(c, defaults);
    add_train_flags(c, defaults);
    c.bind(s.flag, s.key, s.kind, s.flag_help, defaults);
    c.bind("--svg", "/plots/svg", Kind::boolean, "Also render an SVG line chart", defaults);
    sweep_cmds.emplace_back(&c, s.sweep);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    if (gen.app->parsed()) run_gen_synthetic(gen, defaults);
    if (ask.app->parsed()) run_ask(ask, defaults);
    if (train.app->parsed()) run_train(train, defaults);
    if (eval.app->parsed()) run_eval(eval, defaults);
    if (ablate.app->parsed()) run_ablate(ablate, defaults);
    if (analyze.app->parsed()) run_analyze_experts(analyze, defaults);
    for (auto& [c, kind] : sweep_cmds) {
      if (c->app->parsed()) run_sweep(*c, defaults, kind);
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}

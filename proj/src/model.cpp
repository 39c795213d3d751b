#include "aad/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace aad {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'A', 'D', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json moe_to_json(const MoeConfig& c) {
  return {{"n_experts", c.n_experts},       {"expert_hidden", c.expert_hidden},
          {"router_hidden", c.router_hidden}, {"embed_dim", c.embed_dim},
          {"activation", std::string(to_string(c.activation))},
          {"init_seed", c.init_seed},       {"loss", c.loss == AnswerLossKind::l1 ? "l1" : "huber"},
          {"huber_delta", c.huber_delta},   {"load_balancing", c.load_balancing}};
}

MoeConfig moe_from_json(const json& j) {
  MoeConfig c;
  c.n_experts = j.at("n_experts").get<std::size_t>();
  c.expert_hidden = j.at("expert_hidden").get<std::size_t>();
  c.router_hidden = j.at("router_hidden").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  c.loss = j.at("loss").get<std::string>() == "huber" ? AnswerLossKind::huber : AnswerLossKind::l1;
  c.huber_delta = j.at("huber_delta").get<double>();
  c.load_balancing = j.at("load_balancing").get<bool>();
  return c;
}

}  // namespace

const BlockSpec& ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  BlockSpec b{std::move(name), total_, rows, cols};
  total_ += b.size();
  blocks_.push_back(std::move(b));
  return blocks_.back();
}

std::optional<std::size_t> ParamLayout::find(std::string_view name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name == name) return i;
  }
  return std::nullopt;
}

ModelConfig ModelConfig::for_questionnaire(const MoeConfig& moe, const Questionnaire& questionnaire,
                                           std::string provider_name) {
  ModelConfig c;
  c.moe = moe;
  c.provider_name = std::move(provider_name);
  c.questionnaire_version = questionnaire.version();
  for (const Item& item : questionnaire.items()) {
    c.item_ids.push_back(item.item_id);
    c.item_constructs.push_back(item.construct);
  }
  return c;
}

Model::Model(ModelConfig config, InitMode init) : config_(std::move(config)) {
  if (config_.item_ids.size() != config_.item_constructs.size() || config_.item_ids.empty()) {
    throw ValidationError("model config needs one construct per item");
  }
  moe_ = AnswerMoe(config_.moe, layout_);
  detect_ = DetectHead(DetectConfig{config_.moe.embed_dim, config_.item_constructs}, layout_);
  params_.assign(layout_.total(), 0.0);
  std::mt19937_64 rng(config_.moe.init_seed);
  moe_.initialize(params_, init, rng);
  detect_.initialize(params_, init, rng);
}

void Model::save(const std::filesystem::path& path) const {
  json header;
  header["format_version"] = kCheckpointVersion;
  header["moe"] = moe_to_json(config_.moe);
  header["provider"] = {{"name", config_.provider_name}, {"dim", config_.moe.embed_dim}};
  header["questionnaire"] = {{"version", config_.questionnaire_version}, {"item_ids", config_.item_ids}};
  json constructs = json::array();
  for (Dimension m : config_.item_constructs) constructs.push_back(std::string(to_string(m)));
  header["questionnaire"]["constructs"] = constructs;
  json blocks = json::array();
  for (const BlockSpec& b : layout_.blocks()) blocks.push_back({b.name, b.rows, b.cols});
  header["blocks"] = blocks;
  header["n_params"] = params_.size();
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(params_.data()),
            static_cast<std::streamsize>(params_.size() * sizeof(double)));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ValidationError(path.string() + " is not a checkpoint");
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError("truncated checkpoint header in " + path.string());
  const json header = json::parse(text);

  ModelConfig config;
  config.moe = moe_from_json(header.at("moe"));
  config.provider_name = header.at("provider").at("name").get<std::string>();
  config.questionnaire_version = header.at("questionnaire").at("version").get<std::string>();
  config.item_ids = header.at("questionnaire").at("item_ids").get<std::vector<std::string>>();
  for (const auto& c : header.at("questionnaire").at("constructs")) {
    config.item_constructs.push_back(parse_dimension(c.get<std::string>()));
  }
  Model model(std::move(config), InitMode::zeros);
  const auto n = header.at("n_params").get<std::size_t>();
  if (n != model.params_.size()) {
    throw DimensionMismatch("checkpoint holds " + std::to_string(n) + " parameters, layout expects " +
                            std::to_string(model.params_.size()));
  }
  in.read(reinterpret_cast<char*>(model.params_.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw ValidationError("truncated checkpoint payload in " + path.string());
  return model;
}

void Model::check_compatible(const Questionnaire& questionnaire, const EmbeddingProvider& provider) const {
  if (provider.dim() != config_.moe.embed_dim) {
    throw DimensionMismatch("checkpoint was trained with embedding dimension " +
                            std::to_string(config_.moe.embed_dim) + ", provider has " +
                            std::to_string(provider.dim()));
  }
  if (questionnaire.size() != config_.n_items()) {
    throw DimensionMismatch("checkpoint expects " + std::to_string(config_.n_items()) + " items, questionnaire has " +
                            std::to_string(questionnaire.size()));
  }
  if (questionnaire.version() != config_.questionnaire_version) {
    throw ValidationError("checkpoint questionnaire version '" + config_.questionnaire_version +
                          "' does not match '" + questionnaire.version() + "'");
  }
  for (std::size_t i = 0; i < questionnaire.size(); ++i) {
    if (questionnaire[i].item_id != config_.item_ids[i] || questionnaire[i].construct != config_.item_constructs[i]) {
      throw ValidationError("questionnaire item " + std::to_string(i) + " differs from the checkpoint");
    }
  }
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd predict_answer_matrix(const Model& model, const Eigen::MatrixXd& user_embeddings,
                                      const Eigen::MatrixXd& item_features, Eigen::MatrixXd* gates) {
  const Eigen::Index nu = user_embeddings.rows();
  const Eigen::Index ni = item_features.rows();
  std::vector<PairIndex> pairs;
  pairs.reserve(static_cast<std::size_t>(nu * ni));
  for (Eigen::Index u = 0; u < nu; ++u) {
    for (Eigen::Index i = 0; i < ni; ++i) pairs.push_back({u, i});
  }
  const Eigen::VectorXd flat = model.moe().predict(model.params(), PairBatch{user_embeddings, item_features, pairs}, gates);
  // flat is user-major; the map reads it as a row-major nu x ni matrix.
  Eigen::MatrixXd out(nu, ni);
  for (Eigen::Index u = 0; u < nu; ++u) out.row(u) = flat.segment(u * ni, ni).transpose();
  return out;
}

Eigen::VectorXd predict_answers(const Model& model, const Eigen::VectorXd& user_embedding,
                                const Questionnaire& questionnaire, const Eigen::MatrixXd& item_embeddings) {
  const Eigen::MatrixXd feats = item_features(item_embeddings, questionnaire);
  const Eigen::MatrixXd users = user_embedding.transpose();
  return predict_answer_matrix(model, users, feats).row(0).transpose();
}

Eigen::MatrixXd form_evidence(const Eigen::MatrixXd& answers, const InferenceOptions& options) {
  Eigen::MatrixXd s = answers;
  if (options.weights.size() > 0) {
    if (options.weights.size() != answers.cols()) throw DimensionMismatch("weights length must equal |Q|");
    s.array().rowwise() *= options.weights.transpose().array();
  }
  if (options.item_keep.size() > 0) {
    if (options.item_keep.size() != answers.cols()) throw DimensionMismatch("item_keep length must equal |Q|");
    s.array().rowwise() *= options.item_keep.transpose().array();
  }
  return s;
}

Eigen::MatrixXd predict_probabilities(const Model& model, const Eigen::MatrixXd& user_embeddings,
                                      const Eigen::MatrixXd& item_features, const InferenceOptions& options) {
  const Eigen::MatrixXd answers = predict_answer_matrix(model, user_embeddings, item_features);
  return model.detect().predict(model.params(), user_embeddings, form_evidence(answers, options), options.fusion);
}

}  // namespace aad

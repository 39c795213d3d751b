#include "aad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace aad {

using nlohmann::json;

namespace {

constexpr std::uint64_t kDropStream = 0xd20bULL;
constexpr std::uint64_t kQuestionStream = 0x9e57ULL;

std::ofstream open_artifact(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::vector<const UserRecord*> rows_to_users(const Pipeline& p, const std::vector<Eigen::Index>& rows) {
  std::vector<const UserRecord*> out;
  out.reserve(rows.size());
  for (Eigen::Index r : rows) out.push_back(&p.dataset.at(static_cast<std::size_t>(r)));
  return out;
}

Model fresh_model(const Pipeline& p, std::uint64_t seed) {
  MoeConfig moe = p.moe;
  moe.init_seed = seed;
  return Model(ModelConfig::for_questionnaire(moe, p.questionnaire, p.provider_name));
}

/// Cell colour for a value in [0, 1]: white to dark blue.
std::string heat_colour(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const auto r = static_cast<int>(std::lround(255 - 215 * v));
  const auto g = static_cast<int>(std::lround(255 - 175 * v));
  const auto b = static_cast<int>(std::lround(255 - 75 * v));
  return fmt::format("#{:02x}{:02x}{:02x}", r, g, b);
}

}  // namespace

// ---------------------------------------------------------------------------
// Ablations

std::string_view to_string(AblationVariant v) noexcept {
  switch (v) {
    case AblationVariant::full: return "full";
    case AblationVariant::no_q_weighting: return "no_q_weighting";
    case AblationVariant::no_gated_fusion: return "no_gated_fusion";
    case AblationVariant::posts_only: return "posts_only";
    case AblationVariant::evidence_only: return "evidence_only";
    case AblationVariant::no_pretrain: return "no_pretrain";
    case AblationVariant::drop_max_item: return "drop_max_item";
    case AblationVariant::drop_min_item: return "drop_min_item";
    case AblationVariant::drop_rand_item: return "drop_rand_item";
  }
  return "?";
}

AblationVariant parse_variant(std::string_view name) {
  for (AblationVariant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw ValidationError("unknown ablation variant '" + std::string(name) + "'");
}

bool retrains(AblationVariant v) noexcept {
  switch (v) {
    case AblationVariant::no_q_weighting:
    case AblationVariant::no_gated_fusion:
    case AblationVariant::posts_only:
    case AblationVariant::evidence_only:
    case AblationVariant::no_pretrain:
      return true;
    default:
      return false;
  }
}

EvidenceWeights pipeline_weights(const Pipeline& p) {
  return compute_evidence_weights(p.store, rows_to_users(p, p.data.train), p.questionnaire);
}

TrainedArtifacts train_pipeline(const Pipeline& p, std::uint64_t seed, const PipelineHooks& hooks) {
  TrainConfig cfg = p.train;
  cfg.seed = seed;
  TrainedArtifacts out{fresh_model(p, seed), {}, pipeline_weights(p), {}};
  out.report = pretrain_answer_module(out.pretrained, p.data, cfg, hooks.sink);
  if (!hooks.checkpoint_dir.empty()) out.pretrained.save(hooks.checkpoint_dir / "stage1.ckpt");
  out.model = out.pretrained;
  JointOptions opts;
  if (!hooks.checkpoint_dir.empty()) opts.checkpoint_path = hooks.checkpoint_dir / "best.ckpt";
  out.report.append(joint_train(out.model, p.data, out.weights.w, cfg, opts, hooks.sink));
  return out;
}

Eigen::VectorXd drop_item_mask(AblationVariant v, const Eigen::VectorXd& weights,
                               const std::vector<Dimension>& constructs, std::uint64_t seed) {
  if (weights.size() != static_cast<Eigen::Index>(constructs.size())) {
    throw DimensionMismatch("weights and constructs differ in length");
  }
  Eigen::VectorXd keep = Eigen::VectorXd::Ones(weights.size());
  if (v != AblationVariant::drop_max_item && v != AblationVariant::drop_min_item &&
      v != AblationVariant::drop_rand_item) {
    return keep;
  }
  std::mt19937_64 rng(seed ^ kDropStream);
  for (Dimension m : kAllDimensions) {
    std::vector<Eigen::Index> items;
    for (std::size_t i = 0; i < constructs.size(); ++i) {
      if (constructs[i] == m) items.push_back(static_cast<Eigen::Index>(i));
    }
    if (items.empty()) continue;
    Eigen::Index chosen = items.front();
    if (v == AblationVariant::drop_rand_item) {
      std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
      chosen = items[pick(rng)];
    } else {
      for (Eigen::Index i : items) {
        if (v == AblationVariant::drop_max_item ? weights[i] > weights[chosen] : weights[i] < weights[chosen]) {
          chosen = i;
        }
      }
    }
    keep[chosen] = 0.0;
  }
  return keep;
}

EvalResult run_ablation(const AblationSpec& spec, const Pipeline& p, const TrainedArtifacts& trained,
                        const std::vector<Eigen::Index>& rows, TrainReport* report) {
  const Eigen::VectorXd& w = trained.weights.w;
  TrainConfig cfg = p.train;
  cfg.seed = spec.seed;
  auto retrain = [&](Model model, const Eigen::VectorXd& weights, FusionMode mode) {
    TrainReport r = joint_train(model, p.data, weights, cfg, JointOptions{mode, {}});
    if (report) *report = r;
    return evaluate(model, p.data, rows, InferenceOptions{mode, weights, {}});
  };
  switch (spec.variant) {
    case AblationVariant::full:
      return evaluate(trained.model, p.data, rows, InferenceOptions{FusionMode::gated, w, {}});
    case AblationVariant::no_q_weighting:
      return retrain(trained.pretrained, Eigen::VectorXd::Ones(w.size()), FusionMode::gated);
    case AblationVariant::no_gated_fusion:
      return retrain(trained.pretrained, w, FusionMode::average);
    case AblationVariant::posts_only:
      return retrain(trained.pretrained, w, FusionMode::posts_only);
    case AblationVariant::evidence_only:
      return retrain(trained.pretrained, w, FusionMode::evidence_only);
    case AblationVariant::no_pretrain:
      return retrain(fresh_model(p, spec.seed), w, FusionMode::gated);
    case AblationVariant::drop_max_item:
    case AblationVariant::drop_min_item:
    case AblationVariant::drop_rand_item: {
      const Eigen::VectorXd keep =
          drop_item_mask(spec.variant, w, trained.model.config().item_constructs, spec.seed);
      return evaluate(trained.model, p.data, rows, InferenceOptions{FusionMode::gated, w, keep});
    }
  }
  throw ValidationError("unknown ablation variant");
}

double sign_test_p(std::size_t wins, std::size_t losses) {
  const std::size_t n = wins + losses;
  if (n == 0) return 1.0;
  // sum_{k >= wins} C(n, k) / 2^n
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    double c = 1.0;
    for (std::size_t j = 0; j < k; ++j) c = c * static_cast<double>(n - j) / static_cast<double>(j + 1);
    p += c;
  }
  return p / std::ldexp(1.0, static_cast<int>(n));
}

// ---------------------------------------------------------------------------
// Expert activation

ActivationMatrix expert_activation_matrix(const Model& model, const TrainingData& data,
                                          const std::vector<Eigen::Index>& rows) {
  if (rows.empty()) throw ValidationError("no users to analyze");
  const Eigen::Index q = data.n_items();
  std::vector<std::size_t> construct(static_cast<std::size_t>(q));
  for (Eigen::Index i = 0; i < q; ++i) {
    Eigen::Index m = 0;
    data.items.row(i).tail(static_cast<Eigen::Index>(kNumDimensions)).maxCoeff(&m);
    construct[static_cast<std::size_t>(i)] = static_cast<std::size_t>(m);
  }
  const auto k = static_cast<Eigen::Index>(model.config().moe.n_experts);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(k, static_cast<Eigen::Index>(kNumDimensions));
  // Bounded memory: a few hundred users at a time.
  constexpr std::size_t kUsersPerBlock = 256;
  for (std::size_t begin = 0; begin < rows.size(); begin += kUsersPerBlock) {
    const std::size_t end = std::min(rows.size(), begin + kUsersPerBlock);
    const std::vector<Eigen::Index> block(rows.begin() + static_cast<std::ptrdiff_t>(begin),
                                          rows.begin() + static_cast<std::ptrdiff_t>(end));
    Eigen::MatrixXd gates;
    predict_answer_matrix(model, TrainingData::gather(data.users, block), data.items, &gates);
    for (Eigen::Index r = 0; r < gates.rows(); ++r) {
      acc.col(static_cast<Eigen::Index>(construct[static_cast<std::size_t>(r % q)])) += gates.row(r).transpose();
    }
  }
  ActivationMatrix out;
  out.matrix = acc;
  out.zero_rows.assign(static_cast<std::size_t>(k), false);
  for (Eigen::Index e = 0; e < k; ++e) {
    const double s = acc.row(e).sum();
    if (s > 0.0) {
      out.matrix.row(e) /= s;
    } else {
      out.zero_rows[static_cast<std::size_t>(e)] = true;
      spdlog::warn("expert {} received no gate mass", e);
    }
  }
  return out;
}

double mean_row_entropy(const Eigen::MatrixXd& matrix) {
  double total = 0.0;
  std::size_t counted = 0;
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    if (matrix.row(r).sum() <= 0.0) continue;
    double h = 0.0;
    for (Eigen::Index c = 0; c < matrix.cols(); ++c) {
      const double v = matrix(r, c);
      if (v > 0.0) h -= v * std::log(v);
    }
    total += h;
    ++counted;
  }
  if (counted == 0) throw ValidationError("activation matrix has no non-zero rows");
  return total / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<SweepPoint> sweep_data_fraction(const Pipeline& p, const std::vector<double>& fractions,
                                            std::uint64_t seed) {
  if (fractions.empty()) throw ValidationError("no sweep points");
  std::vector<SweepPoint> out;
  for (double f : fractions) {
    const TrainingData sub = subsample_train(p.data, f, seed);
    const Pipeline ps{p.dataset, p.questionnaire, p.store, sub, p.moe, p.train, p.provider_name};
    const TrainedArtifacts t = train_pipeline(ps, seed);
    out.push_back({f, evaluate(t.model, sub, sub.test, InferenceOptions{FusionMode::gated, t.weights.w, {}})});
    spdlog::info("data fraction {:.2f}: test avg macro-F1 {:.4f}", f, out.back().result.average);
  }
  return out;
}

std::vector<SweepPoint> sweep_questions(const Pipeline& p, const std::vector<std::size_t>& per_dimension,
                                        std::uint64_t seed) {
  if (per_dimension.empty()) throw ValidationError("no sweep points");
  std::vector<SweepPoint> out;
  for (std::size_t k : per_dimension) {
    if (k == 0) throw ValidationError("need at least one item per dimension");
    std::mt19937_64 rng(seed ^ kQuestionStream);
    std::vector<std::size_t> chosen;
    for (Dimension m : kAllDimensions) {
      std::vector<std::size_t> items = p.questionnaire.items_of(m);
      std::shuffle(items.begin(), items.end(), rng);
      items.resize(std::min(k, items.size()));
      chosen.insert(chosen.end(), items.begin(), items.end());
    }
    std::sort(chosen.begin(), chosen.end());
    const Questionnaire sub_q = p.questionnaire.subset(chosen, "k" + std::to_string(k));
    const TrainingData sub = select_items(p.data, chosen);
    const Pipeline ps{p.dataset, sub_q, p.store, sub, p.moe, p.train, p.provider_name};
    const TrainedArtifacts t = train_pipeline(ps, seed);
    out.push_back({static_cast<double>(k),
                   evaluate(t.model, sub, sub.test, InferenceOptions{FusionMode::gated, t.weights.w, {}})});
    spdlog::info("{} items per dimension: test avg macro-F1 {:.4f}", k, out.back().result.average);
  }
  return out;
}

std::vector<SweepPoint> sweep_experts(const Pipeline& p, const std::vector<std::size_t>& experts,
                                      std::uint64_t seed) {
  if (experts.empty()) throw ValidationError("no sweep points");
  std::vector<SweepPoint> out;
  for (std::size_t k : experts) {
    Pipeline ps = p;
    ps.moe.n_experts = k;
    const TrainedArtifacts t = train_pipeline(ps, seed);
    out.push_back({static_cast<double>(k),
                   evaluate(t.model, p.data, p.data.test, InferenceOptions{FusionMode::gated, t.weights.w, {}})});
    spdlog::info("{} experts: test avg macro-F1 {:.4f}", k, out.back().result.average);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

json activation_to_json(const ActivationMatrix& a, double entropy) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < a.matrix.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < a.matrix.cols(); ++c) row.push_back(a.matrix(r, c));
    rows.push_back(std::move(row));
  }
  json zero = json::array();
  for (std::size_t e = 0; e < a.zero_rows.size(); ++e) {
    if (a.zero_rows[e]) zero.push_back(e);
  }
  return {{"kind", "activation"}, {"matrix", rows}, {"zero_rows", zero}, {"mean_row_entropy", entropy}};
}

json sweep_to_json(std::string_view name, std::string_view x_label, const std::vector<SweepPoint>& points) {
  json pts = json::array();
  for (const SweepPoint& p : points) pts.push_back({{"x", p.x}, {"result", p.result.to_json()}});
  return {{"kind", "sweep"}, {"name", name}, {"x_label", x_label}, {"points", pts}};
}

void write_activation_csv(const std::filesystem::path& path, const Eigen::MatrixXd& matrix) {
  if (matrix.rows() == 0) throw ValidationError("empty activation matrix");
  auto out = open_artifact(path);
  out << "expert,IE,SN,TF,PJ\n";
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    out << r;
    for (Eigen::Index c = 0; c < matrix.cols(); ++c) out << fmt::format(",{:.6f}", matrix(r, c));
    out << '\n';
  }
}

void write_sweep_csv(const std::filesystem::path& path, std::string_view x_label,
                     const std::vector<SweepPoint>& points) {
  if (points.empty()) throw ValidationError("empty sweep");
  auto out = open_artifact(path);
  out << x_label << ",IE,SN,TF,PJ,avg\n";
  for (const SweepPoint& p : points) {
    out << fmt::format("{:g}", p.x);
    for (const auto& d : p.result.dims) out << fmt::format(",{:.6f}", d.macro_f1);
    out << fmt::format(",{:.6f}\n", p.result.average);
  }
}

void write_activation_svg(const std::filesystem::path& path, const Eigen::MatrixXd& matrix) {
  if (matrix.rows() == 0) throw ValidationError("empty activation matrix");
  constexpr int cell = 18, left = 40, top = 30;
  const auto rows = static_cast<int>(matrix.rows());
  auto out = open_artifact(path);
  out << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10">)",
                     left + 4 * cell * 2 + 10, top + rows * cell + 10)
      << '\n';
  const std::array<const char*, 4> names = {"IE", "SN", "TF", "PJ"};
  for (int c = 0; c < 4; ++c) {
    out << fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{}</text>)", left + c * cell * 2 + cell,
                       top - 8, names[static_cast<std::size_t>(c)])
        << '\n';
  }
  for (int r = 0; r < rows; ++r) {
    out << fmt::format(R"(<text x="{}" y="{}" text-anchor="end">{}</text>)", left - 4, top + r * cell + 13, r) << '\n';
    for (int c = 0; c < 4; ++c) {
      out << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>)", left + c * cell * 2,
                         top + r * cell, cell * 2 - 1, cell - 1, heat_colour(matrix(r, c)))
          << '\n';
    }
  }
  out << "</svg>\n";
}

void write_sweep_svg(const std::filesystem::path& path, std::string_view x_label,
                     const std::vector<SweepPoint>& points) {
  if (points.empty()) throw ValidationError("empty sweep");
  constexpr double w = 360, h = 220, pad = 40;
  double xmin = points.front().x, xmax = points.front().x;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
  }
  const double span = xmax > xmin ? xmax - xmin : 1.0;
  auto px = [&](double x) { return pad + (x - xmin) / span * (w - 2 * pad); };
  auto py = [&](double y) { return h - pad - std::clamp(y, 0.0, 1.0) * (h - 2 * pad); };
  auto out = open_artifact(path);
  out << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10">)",
                     w, h)
      << '\n';
  out << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>)", pad, h - pad, w - pad) << '\n';
  out << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>)", pad, h - pad, pad) << '\n';
  out << fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{}</text>)", w / 2, h - 8, x_label) << '\n';
  out << fmt::format(R"(<text x="10" y="{}">avg macro-F1</text>)", pad - 10) << '\n';
  std::string poly;
  for (const auto& p : points) poly += fmt::format("{:.1f},{:.1f} ", px(p.x), py(p.result.average));
  out << R"(<polyline fill="none" stroke="#2050b0" stroke-width="2" points=")" << poly << "\"/>\n";
  for (const auto& p : points) {
    out << fmt::format(R"(<circle cx="{:.1f}" cy="{:.1f}" r="3" fill="#2050b0"/>)", px(p.x), py(p.result.average))
        << '\n';
    out << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" text-anchor="middle">{:g}</text>)", px(p.x), h - pad + 14, p.x)
        << '\n';
  }
  out << "</svg>\n";
}

std::vector<std::filesystem::path> emit_plots(const std::vector<std::filesystem::path>& reports,
                                              const std::filesystem::path& out_dir, bool svg) {
  if (reports.empty()) throw ValidationError("no reports given");
  std::vector<std::filesystem::path> written;
  for (const auto& path : reports) {
    std::ifstream in(path);
    if (!in) throw Error("missing report " + path.string());
    if (in.peek() == std::ifstream::traits_type::eof()) throw ValidationError("empty report " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string(), 0, e.what());
    }
    const std::string kind = j.value("kind", "");
    const std::string stem = path.stem().string();
    if (kind == "activation") {
      const auto& rows = j.at("matrix");
      if (rows.empty()) throw ValidationError("empty activation matrix in " + path.string());
      Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(kNumDimensions));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < kNumDimensions; ++c) {
          m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r].at(c).get<double>();
        }
      }
      written.push_back(out_dir / (stem + ".csv"));
      write_activation_csv(written.back(), m);
      if (svg) {
        written.push_back(out_dir / (stem + ".svg"));
        write_activation_svg(written.back(), m);
      }
    } else if (kind == "sweep") {
      std::vector<SweepPoint> points;
      for (const auto& p : j.at("points")) {
        SweepPoint sp;
        sp.x = p.at("x").get<double>();
        const auto& r = p.at("result");
        for (std::size_t m = 0; m < kNumDimensions; ++m) {
          sp.result.dims[m].macro_f1 = r.at(std::string(to_string(dimension_from_index(m)))).get<double>();
        }
        sp.result.average = r.at("avg").get<double>();
        points.push_back(sp);
      }
      if (points.empty()) throw ValidationError("empty sweep in " + path.string());
      const std::string x_label = j.value("x_label", "x");
      written.push_back(out_dir / (stem + ".csv"));
      write_sweep_csv(written.back(), x_label, points);
      if (svg) {
        written.push_back(out_dir / (stem + ".svg"));
        write_sweep_svg(written.back(), x_label, points);
      }
    } else {
      throw ValidationError(path.string() + " is not an activation or sweep result");
    }
  }
  return written;
}

}  // namespace aad

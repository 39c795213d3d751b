#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "aad/eval.hpp"
#include "aad/metrics.hpp"
#include "aad/model.hpp"
#include "aad/synthetic.hpp"

namespace py = pybind11;
using namespace aad;

namespace {

py::dict result_dict(const EvalResult& r) {
  py::dict d;
  for (Dimension m : kAllDimensions) d[py::str(std::string(to_string(m)))] = r[m];
  d["avg"] = r.average;
  d["n_users"] = r.n_users;
  return d;
}

EmbeddingProvider checked_provider(const Model& model, const Eigen::MatrixXd& users, const Questionnaire& q) {
  const EmbeddingProvider p = EmbeddingProvider::hashing(model.config().moe.embed_dim);
  model.check_compatible(q, p);
  if (users.cols() != static_cast<Eigen::Index>(p.dim())) {
    throw DimensionMismatch("users have " + std::to_string(users.cols()) + " columns, the model expects " +
                            std::to_string(p.dim()));
  }
  return p;
}

FusionMode parse_fusion(const std::string& name) {
  if (name == "gated") return FusionMode::gated;
  if (name == "average") return FusionMode::average;
  if (name == "posts_only") return FusionMode::posts_only;
  if (name == "evidence_only") return FusionMode::evidence_only;
  throw ValidationError("unknown fusion mode '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_aad, m) {
  m.doc() = "Bindings for the aad core library";

  // Base first: the most recently registered translator is tried first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<DimensionMismatch>(m, "DimensionMismatch", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.attr("DIMENSIONS") = py::make_tuple("IE", "SN", "TF", "PJ");
  m.attr("DEFAULT_HASH_SEED") = EmbeddingProvider::kDefaultSeed;

  m.def(
      "hash_embed",
      [](const std::vector<std::vector<std::string>>& users, std::size_t dim, std::uint64_t seed) {
        const EmbeddingProvider p = EmbeddingProvider::hashing(dim, seed);
        Eigen::MatrixXd out(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(dim));
        for (std::size_t i = 0; i < users.size(); ++i) {
          UserRecord u;
          u.posts = users[i];
          out.row(static_cast<Eigen::Index>(i)) = p.embed_user(u).transpose();
        }
        return out;
      },
      py::arg("posts"), py::arg("dim") = EmbeddingProvider::kDefaultDim,
      py::arg("seed") = EmbeddingProvider::kDefaultSeed,
      "One L2-normalized hashing embedding per user (a list of posts), as an n x dim array.");

  m.def(
      "macro_f1",
      [](const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& labels) {
        return result_dict(macro_f1(predictions, labels));
      },
      py::arg("predictions"), py::arg("labels"), "Per-dimension macro-F1 of 0/1 n x 4 matrices.");

  m.def("sign_test_p", &sign_test_p, py::arg("wins"), py::arg("losses"));
  m.def("mean_row_entropy", &mean_row_entropy, py::arg("matrix"));

  py::class_<Item>(m, "Item")
      .def_readonly("item_id", &Item::item_id)
      .def_readonly("text", &Item::text)
      .def_property_readonly("construct", [](const Item& i) { return std::string(to_string(i.construct)); })
      .def_readonly("scale_min", &Item::scale_min)
      .def_readonly("scale_max", &Item::scale_max);

  py::class_<Questionnaire>(m, "Questionnaire")
      .def_static("load", &load_questionnaire, py::arg("path"))
      .def("__len__", &Questionnaire::size)
      .def("__getitem__",
           [](const Questionnaire& q, std::size_t i) {
             if (i >= q.size()) throw py::index_error();
             return q[i];
           })
      .def_property_readonly("version", &Questionnaire::version);

  py::class_<Model>(m, "Model")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("n_params", &Model::size)
      .def_property_readonly("embed_dim", [](const Model& m) { return m.config().moe.embed_dim; })
      .def_property_readonly("n_experts", [](const Model& m) { return m.config().moe.n_experts; })
      .def_property_readonly("item_ids", [](const Model& m) { return m.config().item_ids; })
      .def(
          "predict_answers",
          [](const Model& model, const Eigen::MatrixXd& users, const Questionnaire& q) {
            const EmbeddingProvider p = checked_provider(model, users, q);
            return predict_answer_matrix(model, users, item_features(p.embed_items(q), q));
          },
          py::arg("users"), py::arg("questionnaire"),
          "Normalized answers, n_users x |Q|, for hashing-embedded users.")
      .def(
          "predict_probabilities",
          [](const Model& model, const Eigen::MatrixXd& users, const Questionnaire& q,
             std::optional<Eigen::VectorXd> weights, const std::string& fusion) {
            const EmbeddingProvider p = checked_provider(model, users, q);
            InferenceOptions opt{parse_fusion(fusion), weights.value_or(Eigen::VectorXd()), {}};
            return predict_probabilities(model, users, item_features(p.embed_items(q), q), opt);
          },
          py::arg("users"), py::arg("questionnaire"), py::arg("weights") = py::none(), py::arg("fusion") = "gated",
          "Per-dimension probabilities (IE, SN, TF, PJ), n_users x 4.");

  m.def(
      "generate_synthetic",
      [](std::size_t n_users, std::size_t items_per_dim, double post_informativeness, std::size_t posts_per_user,
         std::uint64_t seed) {
        SyntheticConfig c;
        c.n_users = n_users;
        c.items_per_dim = items_per_dim;
        c.post_informativeness = post_informativeness;
        c.posts_per_user = posts_per_user;
        c.seed = seed;
        const SyntheticCorpus corpus = generate_synthetic(c);
        py::list users;
        for (const UserRecord& u : corpus.users) {
          py::dict d;
          d["user_id"] = u.user_id;
          d["posts"] = u.posts;
          d["label"] = u.labels ? label_string(*u.labels) : std::string();
          users.append(d);
        }
        return py::make_tuple(users, corpus.questionnaire);
      },
      py::arg("n_users") = 100, py::arg("items_per_dim") = 15, py::arg("post_informativeness") = 0.5,
      py::arg("posts_per_user") = 50, py::arg("seed") = 13,
      "Synthetic labeled users and their questionnaire: (list of dicts, Questionnaire).");
}

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cladapt/data.hpp"
#include "cladapt/errors.hpp"
#include "cladapt/metrics.hpp"
#include "cladapt/nn.hpp"
#include "cladapt/runner.hpp"
#include "cladapt/strategies.hpp"

namespace py = pybind11;
using namespace cladapt;

namespace {

nn::LabelMask mask_of(const std::vector<std::size_t>& labels, std::size_t width) {
    return nn::LabelMask::from_indices(width, labels);
}

data::Dataset make_dataset(const Matrix& features, const Matrix& labels, std::optional<Matrix> presence) {
    data::Dataset d;
    d.features = features;
    d.labels = labels;
    d.presence = presence ? *presence : Matrix::Ones(labels.rows(), labels.cols());
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
        d.sample_ids.push_back(r);
        d.group_ids.push_back(r);
        d.domains.push_back(data::Domain::A);
    }
    return d;
}

py::dict dataset_dict(const data::Dataset& d) {
    py::dict out;
    out["features"] = d.features;
    out["labels"] = d.labels;
    out["presence"] = d.presence;
    out["sample_ids"] = d.sample_ids;
    out["group_ids"] = d.group_ids;
    return out;
}

py::dict label_values_dict(const metrics::LabelValues& v) {
    py::dict out;
    for (std::size_t i = 0; i < v.labels.size(); ++i)
        out[py::str(data::label_name(v.labels[i]))] = v.defined[i] ? py::object(py::float_(v.values[i])) : py::none();
    return out;
}

}  // namespace

PYBIND11_MODULE(_cladapt, m) {
    m.doc() = "Continual adaptation experiments: MLP, EWC, LWF, joint training and AUC-based transfer metrics";

    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.attr("LABEL_COUNT") = data::kLabelCount;
    m.def("label_name", &data::label_name);
    m.def("domain_labels", [](const std::string& d) { return data::domain_mask(data::parse_domain(d)).indices(); },
          py::arg("domain"), "Label indices annotated in domain 'A' or 'B'.");
    m.def("shared_labels", &data::shared_labels);

    py::class_<nn::MlpModel>(m, "Model")
        .def(py::init([](std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t output_dim,
                         std::uint64_t seed) {
                 return nn::MlpModel(nn::MlpArchitecture{input_dim, std::move(hidden), output_dim}, seed);
             }),
             py::arg("input_dim") = 32, py::arg("hidden") = std::vector<std::size_t>{64, 32},
             py::arg("output_dim") = 21, py::arg("seed") = 0)
        .def_property_readonly("input_dim", &nn::MlpModel::input_dim)
        .def_property_readonly("output_dim", &nn::MlpModel::output_dim)
        .def_property_readonly("parameter_count", &nn::MlpModel::parameter_count)
        .def("predict", &nn::MlpModel::predict, py::arg("x"))
        .def("get_parameters",
             [](const nn::MlpModel& self) {
                 const auto p = self.get_parameters();
                 return std::vector<double>(p.values().begin(), p.values().end());
             })
        .def("set_parameters",
             [](nn::MlpModel& self, std::vector<double> v) {
                 self.set_parameters(nn::ParameterVector(self.layout(), std::move(v)));
             })
        .def("loss",
             [](const nn::MlpModel& self, const Matrix& x, const Matrix& y, const Matrix& cell_mask) {
                 return nn::masked_bce(self.predict(x), y, cell_mask);
             },
             py::arg("x"), py::arg("y"), py::arg("cell_mask"))
        .def("gradient",
             [](const nn::MlpModel& self, const Matrix& x, const Matrix& y, const Matrix& cell_mask) {
                 const auto g = nn::backward(self, x, y, cell_mask);
                 return std::vector<double>(g.values().begin(), g.values().end());
             },
             py::arg("x"), py::arg("y"), py::arg("cell_mask"));

    m.def("masked_bce",
          [](const Matrix& p, const Matrix& y, const Matrix& cell_mask) { return nn::masked_bce(p, y, cell_mask); },
          py::arg("probabilities"), py::arg("targets"), py::arg("cell_mask"));

    m.def(
        "fisher_diagonal",
        [](const nn::MlpModel& model, const Matrix& x, const Matrix& y, const std::vector<std::size_t>& labels) {
            const auto f = cl::fisher_diagonal(model, make_dataset(x, y, std::nullopt), mask_of(labels, model.output_dim()));
            return std::vector<double>(f.values.values().begin(), f.values.values().end());
        },
        py::arg("model"), py::arg("x"), py::arg("y"), py::arg("labels"));

    m.def(
        "ewc_penalty",
        [](const std::vector<double>& theta, const std::vector<double>& mean, const std::vector<double>& precision,
           double lambda) {
            nn::ParameterLayout layout({{"p", theta.size(), 1}});
            cl::GaussianPrior prior;
            prior.mean = nn::ParameterVector(layout, mean);
            prior.precision = precision;
            prior.lambda = lambda;
            const auto pen = cl::ewc_penalty(nn::ParameterVector(layout, theta), prior);
            return py::make_tuple(pen.value,
                                  std::vector<double>(pen.gradient.values().begin(), pen.gradient.values().end()));
        },
        py::arg("theta"), py::arg("mean"), py::arg("precision"), py::arg("lam"),
        "Returns (value, gradient) of lam * sum(precision * (theta - mean)^2).");

    m.def(
        "lwf_loss",
        [](const Matrix& p, const Matrix& y, const Matrix& cell_mask, const Matrix& soft,
           const std::vector<std::size_t>& regularized, double lambda) {
            return cl::lwf_loss(p, y, cell_mask, soft, mask_of(regularized, static_cast<std::size_t>(p.cols())),
                                lambda);
        },
        py::arg("probabilities"), py::arg("targets"), py::arg("cell_mask"), py::arg("soft"), py::arg("regularized"),
        py::arg("lam"));

    m.def(
        "roc_auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            std::vector<std::uint8_t> y(labels.begin(), labels.end());
            return metrics::roc_auc(scores, y);
        },
        py::arg("scores"), py::arg("labels"), "Tie-aware AUC; None when one class is absent.");

    m.def(
        "auc_table",
        [](const Matrix& scores, const Matrix& labels, const Matrix& presence) {
            return label_values_dict(metrics::auc_table(scores, labels, presence,
                                                        nn::LabelMask::all(static_cast<std::size_t>(scores.cols()))));
        },
        py::arg("scores"), py::arg("labels"), py::arg("presence"));

    m.def(
        "generate",
        [](const std::string& spec_json) {
            const auto spec = spec_json.empty() ? data::BenchmarkSpec{}
                                                : data::BenchmarkSpec::from_json(nlohmann::json::parse(spec_json));
            const auto pair = data::generate(spec);
            return py::make_tuple(dataset_dict(pair.a), dataset_dict(pair.b));
        },
        py::arg("spec_json") = "", "Generates domains A and B; returns two dicts of arrays.");

    m.def("default_config", [] { return runner::ExperimentConfig::defaults().to_json().dump(2); });

    m.def(
        "run_experiment",
        [](const std::string& config_json, const std::filesystem::path& out) {
            const auto cfg = runner::ExperimentConfig::from_json(nlohmann::json::parse(config_json));
            {
                py::gil_scoped_release release;
                runner::run_experiment(cfg, out);
            }
            return runner::render_report(runner::summarize(runner::collect_results(cfg, out), cfg.strategy_names()))
                .json;
        },
        py::arg("config_json"), py::arg("out"), "Runs the full protocol and returns the JSON report.");
}

#include "cladapt/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "cladapt/checkpoint.hpp"
#include "cladapt/errors.hpp"
#include "cladapt/util.hpp"

namespace cladapt::cl {

FisherDiagonal fisher_diagonal(const nn::MlpModel& model, const data::Dataset& source_train,
                               const nn::LabelMask& mask) {
    if (source_train.empty()) throw ConfigError("fisher_diagonal: empty dataset");
    if (mask.count() == 0) throw ConfigError("fisher_diagonal: label mask has no active label");
    if (mask.size() != static_cast<std::size_t>(source_train.labels.cols()))
        throw ShapeError("fisher_diagonal: mask width does not match labels");

    // one batched forward pass, then a row-by-row backward pass
    const auto cache = model.forward_cached(source_train.features);
    const Matrix cells = mask.broadcast(static_cast<Eigen::Index>(source_train.size()));
    // per-row mean over active labels, so the batch gradient is scaled by the row count
    Matrix logit_grad = nn::masked_bce_logit_grad(cache.probabilities, source_train.labels, cells) *
                        static_cast<double>(source_train.size());

    FisherDiagonal out{nn::ParameterVector(model.layout()), source_train.size()};
    auto acc = out.values.as_eigen();
    nn::ForwardCache row_cache;
    row_cache.inputs.resize(cache.inputs.size());
    for (Eigen::Index r = 0; r < logit_grad.rows(); ++r) {
        for (std::size_t k = 0; k < cache.inputs.size(); ++k) row_cache.inputs[k] = cache.inputs[k].row(r);
        row_cache.logits = cache.logits.row(r);
        row_cache.probabilities = cache.probabilities.row(r);
        // the log-likelihood gradient is the negated loss gradient; its square is the same
        const auto g = nn::backprop(model, row_cache, logit_grad.row(r));
        acc += g.as_eigen().cwiseAbs2();
    }
    acc /= static_cast<double>(source_train.size());
    return out;
}

void ThresholdRule::validate() const {
    if (kind == Kind::Quantile) {
        if (!(value > 0.0 && value < 1.0)) throw ConfigError("Fisher quantile must lie in (0,1)");
    } else if (!(value >= 0.0) || !std::isfinite(value)) {
        throw ConfigError("Fisher threshold must be a nonnegative number");
    }
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw ConfigError("quantile of an empty set");
    if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0,1]");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

BinarizedFisher binarize_fisher(const FisherDiagonal& fisher, const ThresholdRule& rule) {
    rule.validate();
    const auto f = fisher.values.values();
    BinarizedFisher out;
    out.rho = rule.kind == ThresholdRule::Kind::Absolute ? rule.value
                                                         : quantile(std::vector<double>(f.begin(), f.end()), rule.value);
    out.mask.resize(f.size());
    for (std::size_t p = 0; p < f.size(); ++p) {
        out.mask[p] = f[p] > out.rho ? 1 : 0;
        out.selected += out.mask[p];
    }
    return out;
}

GaussianPrior GaussianPrior::binarized_from(const nn::ParameterVector& mean, const FisherDiagonal& fisher,
                                            const ThresholdRule& rule, double lambda) {
    nn::require_same_length(mean, fisher.values, "GaussianPrior");
    if (!(lambda >= 0.0)) throw ConfigError("EWC lambda must be nonnegative");
    const auto bin = binarize_fisher(fisher, rule);
    GaussianPrior prior;
    prior.mean = mean;
    prior.precision.assign(bin.mask.begin(), bin.mask.end());
    prior.lambda = lambda;
    prior.rule = rule;
    prior.resolved_rho = bin.rho;
    prior.binarized = true;
    return prior;
}

GaussianPrior GaussianPrior::classic_from(const nn::ParameterVector& mean, const FisherDiagonal& fisher,
                                          double lambda) {
    nn::require_same_length(mean, fisher.values, "GaussianPrior");
    if (!(lambda >= 0.0)) throw ConfigError("EWC lambda must be nonnegative");
    GaussianPrior prior;
    prior.mean = mean;
    prior.precision.assign(fisher.values.values().begin(), fisher.values.values().end());
    prior.lambda = lambda;
    prior.binarized = false;
    return prior;
}

Penalty ewc_penalty(const nn::ParameterVector& params, const GaussianPrior& prior) {
    nn::require_same_length(params, prior.mean, "ewc_penalty");
    if (prior.precision.size() != params.size()) throw ShapeError("ewc_penalty: precision length mismatch");
    Penalty out{0.0, nn::ParameterVector(params.layout())};
    auto theta = params.values();
    auto mu = prior.mean.values();
    auto g = out.gradient.values();
    double sum = 0.0;
    for (std::size_t p = 0; p < theta.size(); ++p) {
        const double diff = theta[p] - mu[p];
        sum += prior.precision[p] * diff * diff;
        g[p] = 2.0 * prior.lambda * prior.precision[p] * diff;
    }
    out.value = prior.lambda * sum;
    return out;
}

double EwcRegularizer::parameter_term(const nn::ParameterVector& params, nn::ParameterVector& grad) const {
    if (prior_.lambda == 0.0) return 0.0;
    const auto pen = ewc_penalty(params, prior_);
    if (step_ == PenaltyStep::Explicit) grad.as_eigen() += pen.gradient.as_eigen();
    return pen.value;
}

void EwcRegularizer::after_step(nn::ParameterVector& params, double learning_rate) const {
    if (step_ != PenaltyStep::Proximal || prior_.lambda == 0.0) return;
    nn::require_same_length(params, prior_.mean, "EwcRegularizer::after_step");
    auto theta = params.as_eigen();
    const auto mu = prior_.mean.as_eigen();
    for (Eigen::Index p = 0; p < theta.size(); ++p) {
        const double w = prior_.precision[static_cast<std::size_t>(p)];
        if (w == 0.0) continue;
        const double k = 2.0 * learning_rate * prior_.lambda * w;
        theta(p) = (theta(p) + k * mu(p)) / (1.0 + k);
    }
}

void save_fisher(const FisherDiagonal& fisher, const std::filesystem::path& path) {
    io::ParameterRecord rec;
    rec.kind = "fisher";
    rec.layout = fisher.values.layout();
    rec.metadata["sample_count"] = std::to_string(fisher.sample_count);
    rec.vectors.emplace_back("fisher",
                             std::vector<double>(fisher.values.values().begin(), fisher.values.values().end()));
    io::write_record(path, rec);
}

FisherDiagonal load_fisher(const std::filesystem::path& path) {
    const auto rec = io::read_record(path);
    if (rec.kind != "fisher") throw IntegrityError(path.string() + " is not a Fisher record");
    return {nn::ParameterVector(rec.layout, rec.vector("fisher")), std::stoull(rec.meta("sample_count"))};
}

void save_prior(const GaussianPrior& prior, const std::filesystem::path& path) {
    io::ParameterRecord rec;
    rec.kind = "prior";
    rec.layout = prior.mean.layout();
    rec.metadata["binarized"] = prior.binarized ? "1" : "0";
    rec.metadata["lambda"] = io::format_hex(prior.lambda);
    rec.metadata["resolved_rho"] = io::format_hex(prior.resolved_rho);
    rec.metadata["rule"] = prior.rule.kind == ThresholdRule::Kind::Absolute ? "absolute" : "quantile";
    rec.metadata["rule_value"] = io::format_hex(prior.rule.value);
    rec.vectors.emplace_back("mean", std::vector<double>(prior.mean.values().begin(), prior.mean.values().end()));
    rec.vectors.emplace_back("precision", prior.precision);
    io::write_record(path, rec);
}

GaussianPrior load_prior(const std::filesystem::path& path) {
    const auto rec = io::read_record(path);
    if (rec.kind != "prior") throw IntegrityError(path.string() + " is not a prior record");
    GaussianPrior prior;
    prior.mean = nn::ParameterVector(rec.layout, rec.vector("mean"));
    prior.precision = rec.vector("precision");
    prior.lambda = io::parse_hex(rec.meta("lambda"));
    prior.resolved_rho = io::parse_hex(rec.meta("resolved_rho"));
    prior.binarized = rec.meta("binarized") == "1";
    prior.rule.kind = rec.meta("rule") == "absolute" ? ThresholdRule::Kind::Absolute : ThresholdRule::Kind::Quantile;
    prior.rule.value = io::parse_hex(rec.meta("rule_value"));
    return prior;
}

bool SoftTargets::operator==(const SoftTargets& other) const {
    return sample_ids == other.sample_ids && regularized == other.regularized &&
           values.rows() == other.values.rows() && values.cols() == other.values.cols() &&
           (values.array() == other.values.array()).all();
}

SoftTargets record_soft_targets(const nn::MlpModel& previous, const data::Dataset& adaptation,
                                const nn::LabelMask& regularized) {
    if (regularized.count() == 0) throw ConfigError("record_soft_targets: no regularized label");
    if (regularized.size() != previous.output_dim())
        throw ShapeError("record_soft_targets: label subset width does not match model outputs");
    if (adaptation.empty()) throw ConfigError("record_soft_targets: empty adaptation set");
    const Matrix probs = previous.predict(adaptation.features);
    const auto cols = regularized.indices();
    SoftTargets out;
    out.sample_ids = adaptation.sample_ids;
    out.regularized = regularized;
    out.values.resize(probs.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k)
        out.values.col(static_cast<Eigen::Index>(k)) = probs.col(static_cast<Eigen::Index>(cols[k]));
    return out;
}

SoftTerm lwf_soft_term(const Matrix& probabilities, const Matrix& soft, const nn::LabelMask& regularized,
                       double lambda) {
    const auto cols = regularized.indices();
    if (cols.empty()) throw ConfigError("lwf: empty regularized label set");
    if (regularized.size() != static_cast<std::size_t>(probabilities.cols()))
        throw ShapeError("lwf: regularized mask width does not match probabilities");
    if (soft.rows() != probabilities.rows() || soft.cols() != static_cast<Eigen::Index>(cols.size()))
        throw ShapeError("lwf: soft targets are not aligned with the batch");
    const auto b = probabilities.rows();
    Matrix picked(b, soft.cols());
    for (std::size_t k = 0; k < cols.size(); ++k)
        picked.col(static_cast<Eigen::Index>(k)) = probabilities.col(static_cast<Eigen::Index>(cols[k]));
    const Matrix all_cells = Matrix::Ones(b, soft.cols());
    SoftTerm out;
    out.value = lambda * nn::masked_bce(picked, soft, all_cells);
    const Matrix g = nn::masked_bce_logit_grad(picked, soft, all_cells) * lambda;
    out.logit_grad = Matrix::Zero(b, probabilities.cols());
    for (std::size_t k = 0; k < cols.size(); ++k)
        out.logit_grad.col(static_cast<Eigen::Index>(cols[k])) = g.col(static_cast<Eigen::Index>(k));
    return out;
}

double lwf_loss(const Matrix& probabilities, const Matrix& hard_targets, const Matrix& current_cell_mask,
                const Matrix& soft, const nn::LabelMask& regularized, double lambda) {
    const auto term = lwf_soft_term(probabilities, soft, regularized, lambda);
    return nn::masked_bce(probabilities, hard_targets, current_cell_mask) + term.value;
}

double lwf_loss(const Matrix& probabilities, const Matrix& hard_targets, const nn::LabelMask& current_mask,
                const Matrix& soft, const nn::LabelMask& regularized, double lambda) {
    if (current_mask.count() == 0) throw ConfigError("lwf_loss: current mask has no active label");
    return lwf_loss(probabilities, hard_targets, current_mask.broadcast(probabilities.rows()), soft, regularized,
                    lambda);
}

LwfRegularizer::LwfRegularizer(SoftTargets soft, double lambda, const data::Dataset& train)
    : soft_(std::move(soft)), lambda_(lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("LWF lambda must be nonnegative");
    if (soft_.regularized.count() == 0) throw ConfigError("LWF: empty regularized label set");
    if (soft_.sample_ids != train.sample_ids) throw ShapeError("LWF soft targets are not aligned with training rows");
}

double LwfRegularizer::output_term(std::span<const std::size_t> rows, const Matrix& probabilities,
                                   Matrix& logit_grad) const {
    if (lambda_ == 0.0) return 0.0;
    Matrix soft(static_cast<Eigen::Index>(rows.size()), soft_.values.cols());
    for (std::size_t k = 0; k < rows.size(); ++k)
        soft.row(static_cast<Eigen::Index>(k)) = soft_.values.row(static_cast<Eigen::Index>(rows[k]));
    const auto term = lwf_soft_term(probabilities, soft, soft_.regularized, lambda_);
    logit_grad += term.logit_grad;
    return term.value;
}

void save_soft_targets(const SoftTargets& soft, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const auto cols = soft.label_indices();
    out << "sample_id";
    for (auto c : cols) out << ",t_" << c;
    out << '\n';
    for (std::size_t i = 0; i < soft.sample_ids.size(); ++i) {
        out << soft.sample_ids[i];
        for (Eigen::Index c = 0; c < soft.values.cols(); ++c)
            out << ',' << util::format_double(soft.values(static_cast<Eigen::Index>(i), c));
        out << '\n';
    }
}

SoftTargets load_soft_targets(const std::filesystem::path& path, std::size_t label_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open soft targets " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IntegrityError("empty soft-target file");
    const auto header = util::split_csv(line);
    if (header.empty() || header[0] != "sample_id") throw IntegrityError("soft-target header must start with sample_id");
    std::vector<std::size_t> cols;
    for (std::size_t i = 1; i < header.size(); ++i) {
        if (header[i].rfind("t_", 0) != 0) throw IntegrityError("bad soft-target column " + header[i]);
        cols.push_back(static_cast<std::size_t>(util::parse_int(header[i].substr(2))));
    }
    SoftTargets soft;
    soft.regularized = nn::LabelMask::from_indices(label_count, cols);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = util::split_csv(line);
        if (cells.size() != header.size()) throw IntegrityError("soft-target row has wrong column count");
        soft.sample_ids.push_back(util::parse_int(cells[0]));
        std::vector<double> r;
        for (std::size_t i = 1; i < cells.size(); ++i) r.push_back(util::parse_double(cells[i]));
        rows.push_back(std::move(r));
    }
    soft.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c)
            soft.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return soft;
}

JtMixture select_source_groups(const data::Dataset& source_train, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("JT fraction must lie in [0,1]");
    auto groups = source_train.groups();
    std::sort(groups.begin(), groups.end());
    JtMixture mix;
    mix.fraction = fraction;
    mix.total_groups = groups.size();
    const auto k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(groups.size())));
    std::mt19937_64 rng(util::derive_seed(seed, "jt-groups"));
    std::shuffle(groups.begin(), groups.end(), rng);
    mix.selected_groups.assign(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(mix.selected_groups.begin(), mix.selected_groups.end());
    return mix;
}

data::Dataset jt_mix(const data::Dataset& source_train, const data::Dataset& target_train, double fraction,
                     std::uint64_t seed, JtMixture* mixture) {
    auto mix = select_source_groups(source_train, fraction, seed);
    auto combined = mix.selected_groups.empty() ? target_train
                                                : data::concat(target_train, source_train.select_groups(mix.selected_groups));
    if (mixture) *mixture = std::move(mix);
    return combined;
}

}  // namespace cladapt::cl

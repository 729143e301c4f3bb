#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cladapt/data.hpp"
#include "cladapt/nn.hpp"
#include "cladapt/optim.hpp"

namespace cladapt::cl {

// ---------------------------------------------------------------------------
// Elastic weight consolidation

// Diagonal of the empirical Fisher matrix at the source optimum.
struct FisherDiagonal {
    nn::ParameterVector values;
    std::size_t sample_count = 0;
};

// Entry p is the mean over samples of the squared per-sample log-likelihood gradient,
// where each sample's negative log-likelihood is its mean BCE over `mask`'s labels.
FisherDiagonal fisher_diagonal(const nn::MlpModel& model, const data::Dataset& source_train,
                               const nn::LabelMask& mask);

struct ThresholdRule {
    enum class Kind { Absolute, Quantile };
    Kind kind = Kind::Absolute;
    double value = 0.001;  // rho for Absolute, q for Quantile

    static ThresholdRule absolute(double rho) { return {Kind::Absolute, rho}; }
    static ThresholdRule quantile(double q) { return {Kind::Quantile, q}; }
    void validate() const;
};

struct BinarizedFisher {
    std::vector<std::uint8_t> mask;  // 1 where F_p > rho
    double rho = 0.0;
    std::size_t selected = 0;
};

// Linear-interpolation quantile (the usual "type 7" definition).
double quantile(std::vector<double> values, double q);

BinarizedFisher binarize_fisher(const FisherDiagonal& fisher, const ThresholdRule& rule);

// Gaussian prior N(mean, precision^-1) scaled by lambda. The default binarized form
// has 0/1 precision entries; the classic form keeps the Fisher magnitudes.
struct GaussianPrior {
    nn::ParameterVector mean;
    std::vector<double> precision;
    double lambda = 0.0;
    ThresholdRule rule;
    double resolved_rho = 0.0;
    bool binarized = true;

    static GaussianPrior binarized_from(const nn::ParameterVector& mean, const FisherDiagonal& fisher,
                                        const ThresholdRule& rule, double lambda);
    static GaussianPrior classic_from(const nn::ParameterVector& mean, const FisherDiagonal& fisher, double lambda);
};

struct Penalty {
    double value = 0.0;
    nn::ParameterVector gradient;
};

// lambda * sum_p precision_p * (theta_p - mean_p)^2 and its gradient.
Penalty ewc_penalty(const nn::ParameterVector& params, const GaussianPrior& prior);

// Explicit adds the penalty gradient to every step. Proximal instead applies the exact
// minimizer of lr * penalty after the step, theta <- (theta + 2 lr lambda w mu) / (1 + 2 lr lambda w),
// which stays stable for any lambda.
enum class PenaltyStep { Explicit, Proximal };

class EwcRegularizer : public optim::Regularizer {
public:
    explicit EwcRegularizer(GaussianPrior prior, PenaltyStep step = PenaltyStep::Proximal)
        : prior_(std::move(prior)), step_(step) {}
    double parameter_term(const nn::ParameterVector& params, nn::ParameterVector& grad) const override;
    void after_step(nn::ParameterVector& params, double learning_rate) const override;
    const GaussianPrior& prior() const { return prior_; }
    PenaltyStep step() const { return step_; }

private:
    GaussianPrior prior_;
    PenaltyStep step_;
};

void save_fisher(const FisherDiagonal& fisher, const std::filesystem::path& path);
FisherDiagonal load_fisher(const std::filesystem::path& path);
void save_prior(const GaussianPrior& prior, const std::filesystem::path& path);
GaussianPrior load_prior(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Learning without forgetting

// Frozen outputs of the previous model on the adaptation set, restricted to the
// regularized labels (one column per regularized label, in index order).
struct SoftTargets {
    std::vector<std::int64_t> sample_ids;
    Matrix values;
    nn::LabelMask regularized;

    std::vector<std::size_t> label_indices() const { return regularized.indices(); }
    bool operator==(const SoftTargets& other) const;
};

SoftTargets record_soft_targets(const nn::MlpModel& previous, const data::Dataset& adaptation,
                                const nn::LabelMask& regularized);

struct SoftTerm {
    double value = 0.0;
    Matrix logit_grad;  // B x L, zero outside the regularized labels
};

// lambda * mean BCE between the regularized columns of `probabilities` and `soft` (B x k).
SoftTerm lwf_soft_term(const Matrix& probabilities, const Matrix& soft, const nn::LabelMask& regularized,
                       double lambda);

// masked_bce(hard part) + lambda * soft BCE.
double lwf_loss(const Matrix& probabilities, const Matrix& hard_targets, const Matrix& current_cell_mask,
                const Matrix& soft, const nn::LabelMask& regularized, double lambda);
double lwf_loss(const Matrix& probabilities, const Matrix& hard_targets, const nn::LabelMask& current_mask,
                const Matrix& soft, const nn::LabelMask& regularized, double lambda);

class LwfRegularizer : public optim::Regularizer {
public:
    // `train` must be the set the soft targets were recorded on (same row order).
    LwfRegularizer(SoftTargets soft, double lambda, const data::Dataset& train);
    double output_term(std::span<const std::size_t> rows, const Matrix& probabilities,
                       Matrix& logit_grad) const override;

private:
    SoftTargets soft_;
    double lambda_;
};

// CSV: sample_id,t_<label>... keyed by sample id.
void save_soft_targets(const SoftTargets& soft, const std::filesystem::path& path);
SoftTargets load_soft_targets(const std::filesystem::path& path, std::size_t label_count);

// ---------------------------------------------------------------------------
// Joint training

struct JtMixture {
    double fraction = 0.0;
    std::vector<std::int64_t> selected_groups;  // ascending
    std::size_t total_groups = 0;
};

// round(fraction * groups) source groups, sampled without replacement.
JtMixture select_source_groups(const data::Dataset& source_train, double fraction, std::uint64_t seed);

// Target rows followed by the selected source groups; every row keeps its own presence mask.
data::Dataset jt_mix(const data::Dataset& source_train, const data::Dataset& target_train, double fraction,
                     std::uint64_t seed, JtMixture* mixture = nullptr);

}  // namespace cladapt::cl

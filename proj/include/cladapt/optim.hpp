#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "cladapt/data.hpp"
#include "cladapt/nn.hpp"

namespace cladapt::optim {

struct SgdConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t batch_size = 16;

    void validate() const;
};

// Heavy-ball momentum with coupled L2 decay:
//   g = grad + wd * params;  velocity = momentum * velocity + g;  params -= lr * velocity
void sgd_step(nn::ParameterVector& params, const nn::ParameterVector& grad, nn::ParameterVector& velocity,
              const SgdConfig& cfg);

// Reduce-on-plateau: the rate is multiplied by `factor` once `patience` consecutive
// epochs fail to beat the best loss seen so far by more than `min_delta`.
struct PlateauSchedule {
    double factor = 0.1;
    double current_lr = 0.01;
    double best = std::numeric_limits<double>::infinity();
    std::size_t patience = 1;
    double min_delta = 0.0;
    std::size_t bad_epochs = 0;

    static PlateauSchedule starting_at(double lr, double factor = 0.1);
    void validate() const;
};

PlateauSchedule plateau_update(PlateauSchedule schedule, double epoch_val_loss);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;

    bool operator==(const EpochRecord&) const = default;
};

struct TrainRecord {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    nn::ParameterVector best_parameters;

    const EpochRecord& best() const { return epochs.at(best_epoch); }
    bool operator==(const TrainRecord&) const = default;
};

// CSV: epoch,train_loss,val_loss,lr
void write_train_record_csv(const TrainRecord& record, const std::filesystem::path& path);

// Additional loss terms a strategy contributes to each training step.
class Regularizer {
public:
    virtual ~Regularizer() = default;

    // Value of a penalty on the parameters; its gradient is added to `grad`.
    virtual double parameter_term(const nn::ParameterVector& params, nn::ParameterVector& grad) const;

    // Value of a penalty on the batch outputs; its gradient w.r.t. the logits is added
    // to `logit_grad`. `rows` index the training set the loop was given.
    virtual double output_term(std::span<const std::size_t> rows, const Matrix& probabilities,
                               Matrix& logit_grad) const;

    // Called after every optimizer step with the rate that step used.
    virtual void after_step(nn::ParameterVector& params, double learning_rate) const;
};

struct TrainOptions {
    SgdConfig sgd;
    std::size_t epochs = 30;
    // Training stops once the scheduled rate drops below this.
    double lr_floor = 1e-6;
    std::uint64_t seed = 0;
    // When set, every sample uses this mask; otherwise each sample uses its own presence mask.
    std::optional<nn::LabelMask> mask;
};

// Mini-batch SGD with per-epoch reshuffling, validation-driven plateau decay and
// best-validation model selection. On return `model` holds the best parameters.
TrainRecord train_loop(nn::MlpModel& model, const data::Dataset& train, const data::Dataset& validation,
                       const TrainOptions& options, PlateauSchedule schedule, const Regularizer* extra = nullptr);

// Mean masked BCE of `model` over a whole dataset under the same mask rule as train_loop.
double dataset_loss(const nn::MlpModel& model, const data::Dataset& dataset,
                    const std::optional<nn::LabelMask>& mask = std::nullopt);

}  // namespace cladapt::optim

#include "cladapt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "cladapt/errors.hpp"
#include "cladapt/util.hpp"

namespace cladapt::optim {

void SgdConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
}

void sgd_step(nn::ParameterVector& params, const nn::ParameterVector& grad, nn::ParameterVector& velocity,
              const SgdConfig& cfg) {
    nn::require_same_length(params, grad, "sgd_step");
    nn::require_same_length(params, velocity, "sgd_step");
    auto p = params.values();
    auto g = grad.values();
    auto v = velocity.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double effective = g[i] + cfg.weight_decay * p[i];
        v[i] = cfg.momentum * v[i] + effective;
        p[i] -= cfg.learning_rate * v[i];
    }
}

PlateauSchedule PlateauSchedule::starting_at(double lr, double factor) {
    PlateauSchedule s;
    s.current_lr = lr;
    s.factor = factor;
    s.validate();
    return s;
}

void PlateauSchedule::validate() const {
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must be in (0,1)");
    if (!(current_lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (patience < 1) throw ConfigError("plateau patience must be at least 1");
    if (!(min_delta >= 0.0)) throw ConfigError("plateau min_delta must be nonnegative");
}

PlateauSchedule plateau_update(PlateauSchedule schedule, double epoch_val_loss) {
    if (std::isnan(epoch_val_loss)) throw NumericError("plateau_update: validation loss is NaN");
    if (epoch_val_loss < schedule.best - schedule.min_delta) {
        schedule.best = epoch_val_loss;
        schedule.bad_epochs = 0;
        return schedule;
    }
    if (++schedule.bad_epochs >= schedule.patience) {
        schedule.current_lr *= schedule.factor;
        schedule.bad_epochs = 0;
    }
    return schedule;
}

void write_train_record_csv(const TrainRecord& record, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "epoch,train_loss,val_loss,lr\n";
    for (const auto& e : record.epochs) {
        out << e.epoch << ',' << util::format_double(e.train_loss) << ',' << util::format_double(e.val_loss) << ','
            << util::format_double(e.lr) << '\n';
    }
}

double Regularizer::parameter_term(const nn::ParameterVector&, nn::ParameterVector&) const { return 0.0; }

double Regularizer::output_term(std::span<const std::size_t>, const Matrix&, Matrix&) const { return 0.0; }
void Regularizer::after_step(nn::ParameterVector&, double) const {}

namespace {

Matrix cell_mask_for(const data::Dataset& ds, const std::optional<nn::LabelMask>& mask) {
    if (!mask) return ds.presence;
    if (mask->size() != static_cast<std::size_t>(ds.labels.cols()))
        throw ShapeError("training mask width does not match label count");
    if (mask->count() == 0) throw ConfigError("training mask has no active label");
    return mask->broadcast(static_cast<Eigen::Index>(ds.size()));
}

}  // namespace

double dataset_loss(const nn::MlpModel& model, const data::Dataset& dataset, const std::optional<nn::LabelMask>& mask) {
    if (dataset.empty()) throw ConfigError("cannot evaluate loss on an empty dataset");
    return nn::masked_bce(model.predict(dataset.features), dataset.labels, cell_mask_for(dataset, mask));
}

TrainRecord train_loop(nn::MlpModel& model, const data::Dataset& train, const data::Dataset& validation,
                       const TrainOptions& options, PlateauSchedule schedule, const Regularizer* extra) {
    if (train.empty() || validation.empty()) throw ConfigError("train_loop: empty train or validation split");
    if (options.epochs < 1) throw ConfigError("train_loop: epochs must be at least 1");
    options.sgd.validate();
    schedule.validate();
    {
        auto tg = train.groups(), vg = validation.groups();
        std::sort(tg.begin(), tg.end());
        std::sort(vg.begin(), vg.end());
        std::vector<std::int64_t> both;
        std::set_intersection(tg.begin(), tg.end(), vg.begin(), vg.end(), std::back_inserter(both));
        if (!both.empty()) throw ConfigError("train_loop: train and validation share groups");
    }

    const Matrix train_mask = cell_mask_for(train, options.mask);
    const Matrix val_mask = cell_mask_for(validation, options.mask);
    const std::size_t n = train.size();
    const std::size_t batch = options.sgd.batch_size;

    auto params = model.get_parameters();
    nn::ParameterVector velocity(params.layout());
    std::vector<std::size_t> order(n);

    TrainRecord record;
    double best_val = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(util::derive_seed(options.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        SgdConfig step_cfg = options.sgd;
        step_cfg.learning_rate = schedule.current_lr;
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t stop = std::min(n, start + batch);
            const std::span<const std::size_t> rows(order.data() + start, stop - start);
            const auto b = static_cast<Eigen::Index>(rows.size());
            Matrix x(b, train.features.cols()), y(b, train.labels.cols()), m(b, train.labels.cols());
            for (Eigen::Index k = 0; k < b; ++k) {
                const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(k)]);
                x.row(k) = train.features.row(r);
                y.row(k) = train.labels.row(r);
                m.row(k) = train_mask.row(r);
            }
            // a batch can consist only of samples without active labels when masks vary per sample
            const bool has_cells = m.sum() > 0.0;
            const auto cache = model.forward_cached(x);
            double loss = 0.0;
            Matrix logit_grad = Matrix::Zero(b, y.cols());
            if (has_cells) {
                loss = nn::masked_bce(cache.probabilities, y, m);
                logit_grad = nn::masked_bce_logit_grad(cache.probabilities, y, m);
            }
            if (extra) loss += extra->output_term(rows, cache.probabilities, logit_grad);
            auto grad = nn::backprop(model, cache, logit_grad);
            if (extra) loss += extra->parameter_term(params, grad);
            if (!std::isfinite(loss)) throw NumericError("train_loop: non-finite training loss");
            sgd_step(params, grad, velocity, step_cfg);
            if (extra) extra->after_step(params, step_cfg.learning_rate);
            model.set_parameters(params);
            loss_sum += loss;
            ++steps;
        }

        EpochRecord e;
        e.epoch = epoch;
        e.train_loss = loss_sum / static_cast<double>(steps);
        e.val_loss = nn::masked_bce(model.predict(validation.features), validation.labels, val_mask);
        e.lr = schedule.current_lr;
        record.epochs.push_back(e);
        if (e.val_loss < best_val) {
            best_val = e.val_loss;
            record.best_epoch = epoch;
            record.best_parameters = params;
        }
        schedule = plateau_update(schedule, e.val_loss);
        if (schedule.current_lr < options.lr_floor) break;
    }
    model.set_parameters(record.best_parameters);
    return record;
}

}  // namespace cladapt::optim

#include "cladapt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cladapt/errors.hpp"

namespace cladapt::nn {

ParameterLayout::ParameterLayout(std::vector<TensorShape> entries) : entries_(std::move(entries)) {
    offsets_.reserve(entries_.size());
    for (const auto& e : entries_) {
        offsets_.push_back(total_);
        total_ += e.size();
    }
}

ParameterVector::ParameterVector(ParameterLayout layout)
    : layout_(std::move(layout)), values_(layout_.total_size(), 0.0) {}

ParameterVector::ParameterVector(ParameterLayout layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_.total_size()) {
        throw ShapeError("parameter vector length " + std::to_string(values_.size()) +
                         " does not match layout size " + std::to_string(layout_.total_size()));
    }
}

std::span<double> ParameterVector::entry(std::size_t i) {
    return std::span<double>(values_).subspan(layout_.offset(i), layout_.entries().at(i).size());
}

std::span<const double> ParameterVector::entry(std::size_t i) const {
    return std::span<const double>(values_).subspan(layout_.offset(i), layout_.entries().at(i).size());
}

double ParameterVector::norm() const { return as_eigen().norm(); }

void require_same_length(const ParameterVector& a, const ParameterVector& b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(what) + ": length mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    }
}

LabelMask::LabelMask(std::vector<std::uint8_t> active) : active_(std::move(active)) {
    for (auto& a : active_) a = a ? 1 : 0;
}

LabelMask LabelMask::all(std::size_t labels) { return LabelMask(std::vector<std::uint8_t>(labels, 1)); }

LabelMask LabelMask::none(std::size_t labels) { return LabelMask(std::vector<std::uint8_t>(labels, 0)); }

LabelMask LabelMask::from_indices(std::size_t labels, std::span<const std::size_t> indices) {
    auto mask = none(labels);
    for (auto i : indices) mask.set(i, true);
    return mask;
}

std::size_t LabelMask::count() const {
    std::size_t n = 0;
    for (auto a : active_) n += a;
    return n;
}

std::vector<std::size_t> LabelMask::indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < active_.size(); ++i)
        if (active_[i]) out.push_back(i);
    return out;
}

Matrix LabelMask::broadcast(Eigen::Index rows) const {
    Matrix m(rows, static_cast<Eigen::Index>(active_.size()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) m.col(c).setConstant(active_[c] ? 1.0 : 0.0);
    return m;
}

MlpModel::MlpModel(const MlpArchitecture& arch, std::uint64_t seed) : arch_(arch), seed_(seed) {
    if (arch.input_dim == 0 || arch.output_dim == 0) throw ConfigError("MLP dimensions must be positive");
    std::mt19937_64 rng(seed);
    std::size_t fan_in = arch.input_dim;
    auto make_layer = [&](std::size_t out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        DenseLayer layer{Matrix(out, fan_in), Vector::Zero(static_cast<Eigen::Index>(out))};
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = dist(rng);
        layers_.push_back(std::move(layer));
        fan_in = out;
    };
    for (auto h : arch.hidden) {
        if (h == 0) throw ConfigError("hidden layer width must be positive");
        make_layer(h);
    }
    make_layer(arch.output_dim);
}

MlpModel::MlpModel(std::vector<DenseLayer> layers, std::uint64_t seed) : layers_(std::move(layers)), seed_(seed) {
    if (layers_.empty()) throw ConfigError("MLP needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.bias.size() != l.weight.rows()) throw ShapeError("bias length must equal weight rows");
        if (i > 0 && l.weight.cols() != layers_[i - 1].weight.rows())
            throw ShapeError("layer " + std::to_string(i) + " input width does not match previous output");
    }
    arch_.input_dim = static_cast<std::size_t>(layers_.front().weight.cols());
    arch_.output_dim = static_cast<std::size_t>(layers_.back().weight.rows());
    arch_.hidden.clear();
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i)
        arch_.hidden.push_back(static_cast<std::size_t>(layers_[i].weight.rows()));
}

ParameterLayout MlpModel::layout() const {
    std::vector<TensorShape> entries;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const auto prefix = "fc" + std::to_string(i);
        entries.push_back({prefix + ".weight", static_cast<std::size_t>(l.weight.rows()),
                           static_cast<std::size_t>(l.weight.cols())});
        entries.push_back({prefix + ".bias", static_cast<std::size_t>(l.bias.size()), 1});
    }
    return ParameterLayout(std::move(entries));
}

std::size_t MlpModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

ParameterVector MlpModel::get_parameters() const {
    ParameterVector p(layout());
    std::size_t k = 0;
    for (const auto& l : layers_) {
        // weight is row-major, so its storage order is already the flattening order
        std::copy(l.weight.data(), l.weight.data() + l.weight.size(), p.values().begin() + k);
        k += static_cast<std::size_t>(l.weight.size());
        std::copy(l.bias.data(), l.bias.data() + l.bias.size(), p.values().begin() + k);
        k += static_cast<std::size_t>(l.bias.size());
    }
    return p;
}

void MlpModel::set_parameters(const ParameterVector& params) {
    if (!(params.layout() == layout())) throw ShapeError("parameter layout does not match model");
    std::size_t k = 0;
    auto v = params.values();
    for (auto& l : layers_) {
        std::copy(v.begin() + k, v.begin() + k + l.weight.size(), l.weight.data());
        k += static_cast<std::size_t>(l.weight.size());
        std::copy(v.begin() + k, v.begin() + k + l.bias.size(), l.bias.data());
        k += static_cast<std::size_t>(l.bias.size());
    }
}

namespace {

double clamped_sigmoid(double z) {
    const double p = 1.0 / (1.0 + std::exp(-z));
    return std::clamp(p, kClampEps, 1.0 - kClampEps);
}

void require_cell_shapes(const Matrix& p, const Matrix& y, const Matrix& m) {
    if (p.rows() != y.rows() || p.cols() != y.cols() || p.rows() != m.rows() || p.cols() != m.cols()) {
        throw ShapeError("probabilities, targets and mask must share shape");
    }
    if (p.rows() == 0) throw ShapeError("empty batch");
}

}  // namespace

void check_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string(what) + " contains NaN or infinite values");
}

ForwardCache MlpModel::forward_cached(const Matrix& batch) const {
    if (batch.rows() < 1) throw ShapeError("forward: batch must contain at least one row");
    if (static_cast<std::size_t>(batch.cols()) != arch_.input_dim) {
        throw ShapeError("forward: input width " + std::to_string(batch.cols()) + " does not match model input " +
                         std::to_string(arch_.input_dim));
    }
    ForwardCache cache;
    cache.inputs.reserve(layers_.size());
    Matrix act = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        Matrix z = act * l.weight.transpose();
        z.rowwise() += l.bias.transpose();
        cache.inputs.push_back(std::move(act));
        if (i + 1 < layers_.size()) {
            act = z.array().tanh().matrix();
        } else {
            cache.logits = std::move(z);
        }
    }
    cache.probabilities = cache.logits.unaryExpr(&clamped_sigmoid);
    return cache;
}

Matrix MlpModel::predict(const Matrix& batch) const { return forward_cached(batch).probabilities; }

Matrix forward(const MlpModel& model, const Matrix& batch) { return model.predict(batch); }

double masked_bce(const Matrix& probabilities, const Matrix& targets, const LabelMask& mask) {
    if (static_cast<std::size_t>(probabilities.cols()) != mask.size())
        throw ShapeError("label mask width does not match probabilities");
    if (mask.count() == 0) throw ConfigError("masked_bce: label mask has no active label");
    return masked_bce(probabilities, targets, mask.broadcast(probabilities.rows()));
}

double masked_bce(const Matrix& probabilities, const Matrix& targets, const Matrix& cell_mask) {
    require_cell_shapes(probabilities, targets, cell_mask);
    check_finite(probabilities, "probabilities");
    check_finite(targets, "targets");
    double total = 0.0;
    double cells = 0.0;
    for (Eigen::Index r = 0; r < probabilities.rows(); ++r) {
        for (Eigen::Index c = 0; c < probabilities.cols(); ++c) {
            if (cell_mask(r, c) == 0.0) continue;
            const double p = std::clamp(probabilities(r, c), kClampEps, 1.0 - kClampEps);
            const double y = targets(r, c);
            total -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
            cells += 1.0;
        }
    }
    if (cells == 0.0) throw ConfigError("masked_bce: no active cell in batch");
    return total / cells;
}

Matrix masked_bce_logit_grad(const Matrix& probabilities, const Matrix& targets, const Matrix& cell_mask) {
    require_cell_shapes(probabilities, targets, cell_mask);
    check_finite(probabilities, "probabilities");
    check_finite(targets, "targets");
    const double cells = cell_mask.sum();
    if (cells == 0.0) throw ConfigError("masked_bce: no active cell in batch");
    Matrix grad = Matrix::Zero(probabilities.rows(), probabilities.cols());
    for (Eigen::Index r = 0; r < grad.rows(); ++r) {
        for (Eigen::Index c = 0; c < grad.cols(); ++c) {
            const double p = probabilities(r, c);
            if (cell_mask(r, c) == 0.0 || p <= kClampEps || p >= 1.0 - kClampEps) continue;
            grad(r, c) = (p - targets(r, c)) / cells;
        }
    }
    return grad;
}

ParameterVector backprop(const MlpModel& model, const ForwardCache& cache, const Matrix& logit_grad) {
    const auto& layers = model.layers();
    if (logit_grad.rows() != cache.logits.rows() || logit_grad.cols() != cache.logits.cols())
        throw ShapeError("logit gradient shape does not match forward pass");
    ParameterVector grad(model.layout());
    Matrix delta = logit_grad;
    for (std::size_t i = layers.size(); i-- > 0;) {
        const Matrix& input = cache.inputs[i];
        const Matrix gw = delta.transpose() * input;
        const Vector gb = delta.colwise().sum().transpose();
        auto w_slot = grad.entry(2 * i);
        auto b_slot = grad.entry(2 * i + 1);
        std::copy(gw.data(), gw.data() + gw.size(), w_slot.begin());
        std::copy(gb.data(), gb.data() + gb.size(), b_slot.begin());
        if (i > 0) {
            // input[i] = tanh(z_{i-1}), so dtanh = 1 - input^2
            Matrix upstream = delta * layers[i].weight;
            delta = upstream.array() * (1.0 - input.array().square());
        }
    }
    return grad;
}

ParameterVector backward(const MlpModel& model, const Matrix& batch, const Matrix& targets, const LabelMask& mask) {
    if (mask.count() == 0) throw ConfigError("backward: label mask has no active label");
    if (static_cast<std::size_t>(targets.cols()) != mask.size())
        throw ShapeError("label mask width does not match targets");
    return backward(model, batch, targets, mask.broadcast(batch.rows()));
}

ParameterVector backward(const MlpModel& model, const Matrix& batch, const Matrix& targets, const Matrix& cell_mask) {
    const auto cache = model.forward_cached(batch);
    return backprop(model, cache, masked_bce_logit_grad(cache.probabilities, targets, cell_mask));
}

std::vector<ParameterVector> per_sample_gradients(const MlpModel& model, const Matrix& batch, const Matrix& targets,
                                                  const LabelMask& mask) {
    if (mask.count() == 0) throw ConfigError("per_sample_gradients: label mask has no active label");
    return per_sample_gradients(model, batch, targets, mask.broadcast(batch.rows()));
}

std::vector<ParameterVector> per_sample_gradients(const MlpModel& model, const Matrix& batch, const Matrix& targets,
                                                  const Matrix& cell_mask) {
    if (batch.rows() != targets.rows() || batch.rows() != cell_mask.rows())
        throw ShapeError("per_sample_gradients: row count mismatch");
    std::vector<ParameterVector> out;
    out.reserve(static_cast<std::size_t>(batch.rows()));
    for (Eigen::Index r = 0; r < batch.rows(); ++r) {
        out.push_back(backward(model, batch.row(r), targets.row(r), cell_mask.row(r)));
    }
    return out;
}

}  // namespace cladapt::nn

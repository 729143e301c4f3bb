#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cladapt {

// Rows are samples, columns are features or labels.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

namespace nn {

// Probabilities are clamped to [eps, 1 - eps] before any log is taken.
inline constexpr double kClampEps = 1e-7;

struct TensorShape {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
    bool operator==(const TensorShape&) const = default;
};

// Fixes the order in which named tensors are flattened into a ParameterVector.
class ParameterLayout {
public:
    ParameterLayout() = default;
    explicit ParameterLayout(std::vector<TensorShape> entries);

    const std::vector<TensorShape>& entries() const { return entries_; }
    std::size_t total_size() const { return total_; }
    // Offset of entry `i` within the flat vector.
    std::size_t offset(std::size_t i) const { return offsets_.at(i); }

    bool operator==(const ParameterLayout& other) const { return entries_ == other.entries_; }

private:
    std::vector<TensorShape> entries_;
    std::vector<std::size_t> offsets_;
    std::size_t total_ = 0;
};

// Flat view of every trainable weight, ordered by `layout`.
class ParameterVector {
public:
    ParameterVector() = default;
    explicit ParameterVector(ParameterLayout layout);  // zero-filled
    ParameterVector(ParameterLayout layout, std::vector<double> values);

    const ParameterLayout& layout() const { return layout_; }
    std::size_t size() const { return values_.size(); }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    // Slice of one layout entry.
    std::span<double> entry(std::size_t i);
    std::span<const double> entry(std::size_t i) const;

    Eigen::Map<Vector> as_eigen() { return {values_.data(), static_cast<Eigen::Index>(values_.size())}; }
    Eigen::Map<const Vector> as_eigen() const {
        return {values_.data(), static_cast<Eigen::Index>(values_.size())};
    }

    double norm() const;

    bool operator==(const ParameterVector&) const = default;

private:
    ParameterLayout layout_;
    std::vector<double> values_;
};

void require_same_length(const ParameterVector& a, const ParameterVector& b, const char* what);

// Which labels of the union label space are annotated for the current domain.
class LabelMask {
public:
    LabelMask() = default;
    explicit LabelMask(std::vector<std::uint8_t> active);

    static LabelMask all(std::size_t labels);
    static LabelMask none(std::size_t labels);
    static LabelMask from_indices(std::size_t labels, std::span<const std::size_t> indices);

    std::size_t size() const { return active_.size(); }
    bool operator[](std::size_t i) const { return active_[i] != 0; }
    void set(std::size_t i, bool on) { active_.at(i) = on ? 1 : 0; }
    std::size_t count() const;
    std::vector<std::size_t> indices() const;

    // B x L matrix of 0/1 with this mask on every row.
    Matrix broadcast(Eigen::Index rows) const;

    bool operator==(const LabelMask&) const = default;

private:
    std::vector<std::uint8_t> active_;
};

struct MlpArchitecture {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden = {64, 32};
    std::size_t output_dim = 21;

    bool operator==(const MlpArchitecture&) const = default;
};

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out
};

// Intermediate values of one forward pass, kept for backprop.
struct ForwardCache {
    std::vector<Matrix> inputs;  // input to each layer; inputs[0] is the batch
    Matrix logits;
    Matrix probabilities;  // clamped sigmoid of logits
};

// Dense network: tanh hidden layers, sigmoid multi-label head.
class MlpModel {
public:
    MlpModel() = default;
    // Glorot-uniform weights, zero biases.
    MlpModel(const MlpArchitecture& arch, std::uint64_t seed);
    // Takes ownership of explicit layers; shapes must chain.
    explicit MlpModel(std::vector<DenseLayer> layers, std::uint64_t seed = 0);

    const MlpArchitecture& architecture() const { return arch_; }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::uint64_t seed() const { return seed_; }
    std::size_t input_dim() const { return arch_.input_dim; }
    std::size_t output_dim() const { return arch_.output_dim; }

    ParameterLayout layout() const;
    ParameterVector get_parameters() const;
    void set_parameters(const ParameterVector& params);
    std::size_t parameter_count() const;

    ForwardCache forward_cached(const Matrix& batch) const;
    Matrix predict(const Matrix& batch) const;

private:
    MlpArchitecture arch_;
    std::vector<DenseLayer> layers_;
    std::uint64_t seed_ = 0;
};

Matrix forward(const MlpModel& model, const Matrix& batch);

// Mean binary cross-entropy over the active cells of a B x L batch.
// `cell_mask` holds 0/1 per cell; `mask` applies the same labels to every row.
double masked_bce(const Matrix& probabilities, const Matrix& targets, const LabelMask& mask);
double masked_bce(const Matrix& probabilities, const Matrix& targets, const Matrix& cell_mask);

// d(masked_bce)/d(logits). Cells whose probability sits on the clamp get 0.
Matrix masked_bce_logit_grad(const Matrix& probabilities, const Matrix& targets,
                             const Matrix& cell_mask);

// Reverse-mode pass from a gradient w.r.t. the logits.
ParameterVector backprop(const MlpModel& model, const ForwardCache& cache, const Matrix& logit_grad);

ParameterVector backward(const MlpModel& model, const Matrix& batch, const Matrix& targets,
                         const LabelMask& mask);
ParameterVector backward(const MlpModel& model, const Matrix& batch, const Matrix& targets,
                         const Matrix& cell_mask);

// k-th entry is `backward` on the singleton batch {row k}.
std::vector<ParameterVector> per_sample_gradients(const MlpModel& model, const Matrix& batch,
                                                  const Matrix& targets, const LabelMask& mask);
std::vector<ParameterVector> per_sample_gradients(const MlpModel& model, const Matrix& batch,
                                                  const Matrix& targets, const Matrix& cell_mask);

void check_finite(const Matrix& m, const char* what);

}  // namespace nn
}  // namespace cladapt

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cladapt/data.hpp"
#include "cladapt/nn.hpp"

namespace testsupport {

using cladapt::Matrix;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = n(rng);
    return m;
}

inline Matrix random_binary(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double p = 0.5) {
    std::bernoulli_distribution b(p);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = b(rng) ? 1.0 : 0.0;
    return m;
}

// Random 0/1 cell mask with at least one active cell.
inline Matrix random_cell_mask(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    Matrix m = random_binary(rows, cols, rng, 0.6);
    if (m.sum() == 0.0) m(0, 0) = 1.0;
    return m;
}

// Small random MLP with at most `max_params` parameters.
inline cladapt::nn::MlpModel small_model(std::mt19937_64& rng, std::size_t max_params = 200) {
    std::uniform_int_distribution<std::size_t> dim(1, 5), depth(0, 2);
    while (true) {
        cladapt::nn::MlpArchitecture a;
        a.input_dim = dim(rng);
        a.output_dim = dim(rng);
        a.hidden.clear();
        const auto h = depth(rng);
        for (std::size_t i = 0; i < h; ++i) a.hidden.push_back(dim(rng) + 1);
        cladapt::nn::MlpModel m(a, rng());
        if (m.parameter_count() > max_params) continue;
        // spread the weights a little beyond the Glorot range so gradients are not tiny
        auto p = m.get_parameters();
        std::normal_distribution<double> n(0.0, 0.7);
        for (auto& v : p.values()) v = n(rng);
        m.set_parameters(p);
        return m;
    }
}

// Central differences of f at `x` with step h, one coordinate at a time.
inline std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
inline double max_relative_error(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

// Dataset with `groups` groups of 1..3 rows, random features, labels and a fixed presence mask.
inline cladapt::data::Dataset toy_dataset(std::size_t groups, std::size_t dim, const cladapt::nn::LabelMask& presence,
                                          std::mt19937_64& rng, std::int64_t first_group = 0,
                                          std::int64_t first_sample = 0,
                                          cladapt::data::Domain domain = cladapt::data::Domain::A) {
    std::uniform_int_distribution<int> size(1, 3);
    std::normal_distribution<double> n;
    std::bernoulli_distribution b(0.4);
    cladapt::data::Dataset d;
    std::vector<std::vector<double>> rows;
    std::int64_t sid = first_sample;
    for (std::size_t g = 0; g < groups; ++g) {
        const int k = size(rng);
        for (int i = 0; i < k; ++i) {
            d.sample_ids.push_back(sid++);
            d.group_ids.push_back(first_group + static_cast<std::int64_t>(g));
            d.domains.push_back(domain);
        }
    }
    const auto rows_n = static_cast<Eigen::Index>(d.sample_ids.size());
    const auto labels = static_cast<Eigen::Index>(presence.size());
    d.features.resize(rows_n, static_cast<Eigen::Index>(dim));
    d.labels = Matrix::Zero(rows_n, labels);
    d.presence = presence.broadcast(rows_n);
    for (Eigen::Index r = 0; r < rows_n; ++r) {
        for (Eigen::Index c = 0; c < d.features.cols(); ++c) d.features(r, c) = n(rng);
        for (Eigen::Index c = 0; c < labels; ++c)
            if (presence[static_cast<std::size_t>(c)] && b(rng)) d.labels(r, c) = 1.0;
    }
    return d;
}

}  // namespace testsupport

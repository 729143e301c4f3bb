#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cladapt/nn.hpp"

namespace cladapt::metrics {

// Mann-Whitney AUC with half credit for tied pairs. Empty when a class is missing.
// Sorts once and uses midranks, so it runs in O(n log n).
std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Per-label values over a fixed label set; undefined entries are excluded from averages.
struct LabelValues {
    std::vector<std::size_t> labels;
    std::vector<double> values;
    std::vector<std::uint8_t> defined;

    std::size_t size() const { return labels.size(); }
    std::size_t defined_count() const;
    // Mean over defined entries; empty when none is defined.
    std::optional<double> average() const;
    std::vector<double> defined_values() const;

    bool operator==(const LabelValues&) const = default;
};

using AucTable = LabelValues;

// AUC of every label in `label_set`, using only rows whose presence mask covers the label.
AucTable auc_table(const Matrix& scores, const Matrix& labels, const Matrix& presence,
                   const nn::LabelMask& label_set);

// after - before per label; undefined if either side is.
LabelValues backward_transfer(const AucTable& before, const AucTable& after);
// AUC - 0.5 per label.
LabelValues forward_transfer(const AucTable& unseen_domain_auc);

// Difference of table averages, the form used for a table's "Average" row.
double average_backward_transfer(const AucTable& before, const AucTable& after);

struct Aggregate {
    double min = 0.0;
    double mean = 0.0;
    double max = 0.0;

    bool operator==(const Aggregate&) const = default;
};

Aggregate aggregate(std::span<const double> values);
Aggregate aggregate(const LabelValues& values);

// CSV columns label,value,defined with label names from `name_of`.
void write_label_values_csv(const LabelValues& values, const std::filesystem::path& path,
                            std::string (*name_of)(std::size_t));

}  // namespace cladapt::metrics

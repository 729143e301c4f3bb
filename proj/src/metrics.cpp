#include "cladapt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cladapt/errors.hpp"
#include "cladapt/util.hpp"

namespace cladapt::metrics {

std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
    if (scores.empty()) throw ShapeError("roc_auc: empty input");
    for (double s : scores)
        if (std::isnan(s)) throw NumericError("roc_auc: NaN score");

    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of positive ranks with ties sharing their midrank. Ranks are doubled to stay integral.
    std::uint64_t positives = 0;
    std::uint64_t rank2_sum = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const std::uint64_t midrank2 = i + 1 + j;  // 2 * ((i+1 + j) / 2)
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) {
                ++positives;
                rank2_sum += midrank2;
            }
        }
        i = j;
    }
    const std::uint64_t negatives = n - positives;
    if (positives == 0 || negatives == 0) return std::nullopt;
    // U = R_pos - P(P+1)/2, in doubled units: 2U = rank2_sum - P(P+1)
    const std::uint64_t u2 = rank2_sum - positives * (positives + 1);
    return static_cast<double>(u2) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

std::size_t LabelValues::defined_count() const {
    return static_cast<std::size_t>(std::count(defined.begin(), defined.end(), std::uint8_t{1}));
}

std::vector<double> LabelValues::defined_values() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (defined[i]) out.push_back(values[i]);
    return out;
}

std::optional<double> LabelValues::average() const {
    const auto v = defined_values();
    if (v.empty()) return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

AucTable auc_table(const Matrix& scores, const Matrix& labels, const Matrix& presence,
                   const nn::LabelMask& label_set) {
    if (scores.rows() != labels.rows() || scores.cols() != labels.cols() || presence.rows() != labels.rows() ||
        presence.cols() != labels.cols())
        throw ShapeError("auc_table: scores, labels and presence must share shape");
    if (label_set.size() != static_cast<std::size_t>(scores.cols()))
        throw ShapeError("auc_table: label set width mismatch");
    AucTable table;
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (auto l : label_set.indices()) {
        const auto c = static_cast<Eigen::Index>(l);
        s.clear();
        y.clear();
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
            if (presence(r, c) == 0.0) continue;
            s.push_back(scores(r, c));
            y.push_back(labels(r, c) != 0.0 ? 1 : 0);
        }
        const auto auc = s.empty() ? std::nullopt : roc_auc(s, y);
        table.labels.push_back(l);
        table.values.push_back(auc.value_or(0.0));
        table.defined.push_back(auc ? 1 : 0);
    }
    return table;
}

LabelValues backward_transfer(const AucTable& before, const AucTable& after) {
    if (before.labels != after.labels) throw ConfigError("backward_transfer: tables cover different label sets");
    LabelValues out;
    out.labels = before.labels;
    for (std::size_t i = 0; i < before.size(); ++i) {
        const bool ok = before.defined[i] && after.defined[i];
        out.values.push_back(ok ? after.values[i] - before.values[i] : 0.0);
        out.defined.push_back(ok ? 1 : 0);
    }
    return out;
}

LabelValues forward_transfer(const AucTable& unseen_domain_auc) {
    LabelValues out = unseen_domain_auc;
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = out.defined[i] ? out.values[i] - 0.5 : 0.0;
    return out;
}

double average_backward_transfer(const AucTable& before, const AucTable& after) {
    const auto a = after.average();
    const auto b = before.average();
    if (!a || !b) throw ConfigError("average_backward_transfer: a table has no defined label");
    return *a - *b;
}

Aggregate aggregate(std::span<const double> values) {
    if (values.empty()) throw ConfigError("aggregate: no defined value");
    Aggregate out;
    out.min = *std::min_element(values.begin(), values.end());
    out.max = *std::max_element(values.begin(), values.end());
    // sorted summation keeps the mean independent of input order
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    out.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
    return out;
}

Aggregate aggregate(const LabelValues& values) {
    const auto v = values.defined_values();
    return aggregate(std::span<const double>(v));
}

void write_label_values_csv(const LabelValues& values, const std::filesystem::path& path,
                            std::string (*name_of)(std::size_t)) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "label,value,defined\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
        out << name_of(values.labels[i]) << ',' << (values.defined[i] ? util::format_double(values.values[i]) : "")
            << ',' << (values.defined[i] ? 1 : 0) << '\n';
    }
}

}  // namespace cladapt::metrics

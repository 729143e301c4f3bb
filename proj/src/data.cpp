#include "cladapt/data.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <random>
#include <sstream>

#include "cladapt/errors.hpp"
#include "cladapt/util.hpp"

namespace cladapt::data {

char domain_letter(Domain d) { return d == Domain::A ? 'A' : 'B'; }

Domain parse_domain(std::string_view s) {
    if (s == "A") return Domain::A;
    if (s == "B") return Domain::B;
    throw IntegrityError("unknown domain '" + std::string(s) + "'");
}

std::vector<std::size_t> shared_labels() {
    std::vector<std::size_t> out(kGroupSize);
    for (std::size_t i = 0; i < kGroupSize; ++i) out[i] = i;
    return out;
}

std::vector<std::size_t> unique_labels(Domain d) {
    const std::size_t start = d == Domain::A ? kGroupSize : 2 * kGroupSize;
    std::vector<std::size_t> out(kGroupSize);
    for (std::size_t i = 0; i < kGroupSize; ++i) out[i] = start + i;
    return out;
}

nn::LabelMask domain_mask(Domain d) {
    auto idx = shared_labels();
    auto uniq = unique_labels(d);
    idx.insert(idx.end(), uniq.begin(), uniq.end());
    return nn::LabelMask::from_indices(kLabelCount, idx);
}

nn::LabelMask shared_mask() {
    const auto idx = shared_labels();
    return nn::LabelMask::from_indices(kLabelCount, idx);
}

std::string label_name(std::size_t label) {
    if (label >= kLabelCount) throw ConfigError("label index out of range");
    static constexpr const char* prefixes[] = {"S", "A", "B"};
    return std::string(prefixes[label / kGroupSize]) + std::to_string(label % kGroupSize + 1);
}

Sample Dataset::sample(std::size_t i) const {
    Sample s;
    const auto r = static_cast<Eigen::Index>(i);
    s.features.assign(features.row(r).data(), features.row(r).data() + features.cols());
    s.labels.resize(static_cast<std::size_t>(labels.cols()));
    std::vector<std::uint8_t> present(static_cast<std::size_t>(presence.cols()));
    for (Eigen::Index c = 0; c < labels.cols(); ++c) {
        s.labels[static_cast<std::size_t>(c)] = labels(r, c) != 0.0;
        present[static_cast<std::size_t>(c)] = presence(r, c) != 0.0;
    }
    s.presence = nn::LabelMask(std::move(present));
    s.sample_id = sample_ids.at(i);
    s.group_id = group_ids.at(i);
    s.domain = domains.at(i);
    return s;
}

Dataset Dataset::rows(std::span<const std::size_t> indices) const {
    Dataset out;
    const auto n = static_cast<Eigen::Index>(indices.size());
    out.features.resize(n, features.cols());
    out.labels.resize(n, labels.cols());
    out.presence.resize(n, presence.cols());
    out.sample_ids.reserve(indices.size());
    out.group_ids.reserve(indices.size());
    out.domains.reserve(indices.size());
    for (Eigen::Index k = 0; k < n; ++k) {
        const auto i = indices[static_cast<std::size_t>(k)];
        if (i >= size()) throw ShapeError("row index out of range");
        const auto r = static_cast<Eigen::Index>(i);
        out.features.row(k) = features.row(r);
        out.labels.row(k) = labels.row(r);
        out.presence.row(k) = presence.row(r);
        out.sample_ids.push_back(sample_ids[i]);
        out.group_ids.push_back(group_ids[i]);
        out.domains.push_back(domains[i]);
    }
    return out;
}

Dataset Dataset::select_groups(std::span<const std::int64_t> groups) const {
    std::vector<std::int64_t> wanted(groups.begin(), groups.end());
    std::sort(wanted.begin(), wanted.end());
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < size(); ++i)
        if (std::binary_search(wanted.begin(), wanted.end(), group_ids[i])) idx.push_back(i);
    return rows(idx);
}

std::vector<std::int64_t> Dataset::groups() const {
    std::vector<std::int64_t> out;
    std::vector<std::int64_t> seen;
    for (auto g : group_ids) {
        auto it = std::lower_bound(seen.begin(), seen.end(), g);
        if (it != seen.end() && *it == g) continue;
        seen.insert(it, g);
        out.push_back(g);
    }
    return out;
}

bool Dataset::operator==(const Dataset& other) const {
    auto same = [](const Matrix& x, const Matrix& y) {
        return x.rows() == y.rows() && x.cols() == y.cols() && (x.array() == y.array()).all();
    };
    return same(features, other.features) && same(labels, other.labels) && same(presence, other.presence) &&
           sample_ids == other.sample_ids && group_ids == other.group_ids && domains == other.domains;
}

Dataset concat(const Dataset& first, const Dataset& second) {
    if (first.empty()) return second;
    if (second.empty()) return first;
    if (first.features.cols() != second.features.cols() || first.labels.cols() != second.labels.cols())
        throw ShapeError("cannot concatenate datasets of different widths");
    Dataset out;
    auto stack = [](const Matrix& x, const Matrix& y) {
        Matrix m(x.rows() + y.rows(), x.cols());
        m << x, y;
        return m;
    };
    out.features = stack(first.features, second.features);
    out.labels = stack(first.labels, second.labels);
    out.presence = stack(first.presence, second.presence);
    auto join = [](auto a, const auto& b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    };
    out.sample_ids = join(first.sample_ids, second.sample_ids);
    out.group_ids = join(first.group_ids, second.group_ids);
    out.domains = join(first.domains, second.domains);
    return out;
}

void BenchmarkSpec::validate() const {
    if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
    if (groups_per_domain < 1) throw ConfigError("groups_per_domain must be positive");
    if (min_group_size < 1 || max_group_size < min_group_size) throw ConfigError("invalid group size range");
    if (!(group_variance >= 0.0 && group_variance < 1.0)) throw ConfigError("group_variance must be in [0,1)");
    if (!(signal_scale > 0.0)) throw ConfigError("signal_scale must be positive");
    if (!(rotation_fraction >= 0.0 && rotation_fraction <= 1.0)) throw ConfigError("rotation_fraction must be in [0,1]");
    if (!(rotation_strength >= 0.0 && rotation_strength <= 1.0)) throw ConfigError("rotation_strength must be in [0,1]");
    if (!std::isfinite(translation) || translation < 0.0) throw ConfigError("translation must be a nonnegative number");
    if (mixing_override) {
        const auto& m = *mixing_override;
        if (m.rows() != static_cast<Eigen::Index>(feature_dim) || m.cols() != m.rows())
            throw ConfigError("mixing matrix must be feature_dim x feature_dim");
        Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
        if (!lu.isInvertible()) throw ConfigError("domain shift is not invertible");
    }
}

nlohmann::json BenchmarkSpec::to_json() const {
    nlohmann::json j = {
        {"feature_dim", feature_dim},
        {"groups_per_domain", groups_per_domain},
        {"min_group_size", min_group_size},
        {"max_group_size", max_group_size},
        {"group_variance", group_variance},
        {"signal_scale", signal_scale},
        {"rotation_fraction", rotation_fraction},
        {"rotation_strength", rotation_strength},
        {"translation", translation},
        {"seed", seed},
    };
    if (mixing_override) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < mixing_override->rows(); ++r) {
            std::vector<double> row(mixing_override->row(r).data(),
                                    mixing_override->row(r).data() + mixing_override->cols());
            rows.push_back(row);
        }
        j["mixing"] = rows;
    }
    return j;
}

BenchmarkSpec BenchmarkSpec::from_json(const nlohmann::json& j) {
    BenchmarkSpec s;
    static const std::vector<std::string> known = {"feature_dim",       "groups_per_domain", "min_group_size",
                                                   "max_group_size",    "group_variance",    "signal_scale",
                                                   "rotation_fraction", "translation",       "seed",
                                                   "mixing",            "rotation_strength"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown benchmark field '" + key + "'");
    try {
        s.feature_dim = j.value("feature_dim", s.feature_dim);
        s.groups_per_domain = j.value("groups_per_domain", s.groups_per_domain);
        s.min_group_size = j.value("min_group_size", s.min_group_size);
        s.max_group_size = j.value("max_group_size", s.max_group_size);
        s.group_variance = j.value("group_variance", s.group_variance);
        s.signal_scale = j.value("signal_scale", s.signal_scale);
        s.rotation_fraction = j.value("rotation_fraction", s.rotation_fraction);
        s.rotation_strength = j.value("rotation_strength", s.rotation_strength);
        s.translation = j.value("translation", s.translation);
        s.seed = j.value("seed", s.seed);
        if (j.contains("mixing")) {
            const auto rows = j.at("mixing").get<std::vector<std::vector<double>>>();
            Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
            for (std::size_t r = 0; r < rows.size(); ++r) {
                if (rows[r].size() != static_cast<std::size_t>(m.cols())) throw ConfigError("ragged mixing matrix");
                for (std::size_t c = 0; c < rows[r].size(); ++c)
                    m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
            }
            s.mixing_override = std::move(m);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("benchmark spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::string BenchmarkSpec::hash() const { return util::hex64(util::fnv1a64(to_json().dump())); }

namespace {

// q^strength for a proper rotation q, taking each eigenvalue e^{i phi} to e^{i strength phi}.
Eigen::MatrixXd rotation_power(const Eigen::MatrixXd& q, double strength) {
    if (strength == 1.0) return q;
    const auto k = q.rows();
    if (strength == 0.0) return Eigen::MatrixXd::Identity(k, k);
    Eigen::ComplexEigenSolver<Eigen::MatrixXd> eig(q);
    Eigen::VectorXcd powered(k);
    for (Eigen::Index i = 0; i < k; ++i)
        powered(i) = std::polar(1.0, strength * std::arg(eig.eigenvalues()(i)));
    const Eigen::MatrixXcd v = eig.eigenvectors();
    const Eigen::MatrixXd raw = (v * powered.asDiagonal() * v.inverse()).real();
    // snap back onto the orthogonal group
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return svd.matrixU() * svd.matrixV().transpose();
}

Matrix random_rotation(std::size_t dim, double fraction, double strength, std::mt19937_64& rng) {
    Matrix m = Matrix::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    const auto k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(dim)));
    if (k < 2) return m;
    std::vector<std::size_t> coords(dim);
    for (std::size_t i = 0; i < dim; ++i) coords[i] = i;
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(k);
    std::sort(coords.begin(), coords.end());
    std::normal_distribution<double> normal;
    Eigen::MatrixXd g(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    for (Eigen::Index r = 0; r < g.rows(); ++r)
        for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    if (q.determinant() < 0.0) q.col(0) = -q.col(0);
    q = rotation_power(q, strength);
    for (std::size_t r = 0; r < k; ++r)
        for (std::size_t c = 0; c < k; ++c)
            m(static_cast<Eigen::Index>(coords[r]), static_cast<Eigen::Index>(coords[c])) =
                q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    return m;
}

Dataset draw_domain(const BenchmarkSpec& spec, const GroundTruth& truth, Domain domain, std::int64_t first_group,
                    std::int64_t first_sample) {
    std::mt19937_64 rng(util::derive_seed(spec.seed, domain == Domain::A ? "domain-A" : "domain-B"));
    std::normal_distribution<double> normal;
    std::uniform_int_distribution<std::size_t> group_size(spec.min_group_size, spec.max_group_size);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto d = static_cast<Eigen::Index>(spec.feature_dim);
    const double group_sd = std::sqrt(spec.group_variance);
    const double sample_sd = std::sqrt(1.0 - spec.group_variance);
    const auto mask = domain_mask(domain);

    std::vector<Vector> feats;
    std::vector<Vector> labs;
    Dataset out;
    for (std::size_t g = 0; g < spec.groups_per_domain; ++g) {
        Vector offset(d);
        for (Eigen::Index i = 0; i < d; ++i) offset(i) = group_sd * normal(rng);
        const auto n = group_size(rng);
        for (std::size_t s = 0; s < n; ++s) {
            Vector latent(d);
            for (Eigen::Index i = 0; i < d; ++i) latent(i) = offset(i) + sample_sd * normal(rng);
            Vector observed = domain == Domain::A ? latent : Vector(truth.mixing * latent + truth.translation);
            Vector y = Vector::Zero(static_cast<Eigen::Index>(kLabelCount));
            // shared findings follow the latent (pre-shift) concept; unique ones the observed features
            for (std::size_t l = 0; l < kLabelCount; ++l) {
                if (!mask[l]) continue;
                const bool shared = l < kGroupSize;
                const auto row = static_cast<Eigen::Index>(l);
                const double logit = truth.weights.row(row).dot(shared ? latent : observed) + truth.biases(row);
                const double p = 1.0 / (1.0 + std::exp(-logit));
                y(row) = unit(rng) < p ? 1.0 : 0.0;
            }
            feats.push_back(std::move(observed));
            labs.push_back(std::move(y));
            out.sample_ids.push_back(first_sample++);
            out.group_ids.push_back(first_group + static_cast<std::int64_t>(g));
            out.domains.push_back(domain);
        }
    }
    const auto rows = static_cast<Eigen::Index>(feats.size());
    out.features.resize(rows, d);
    out.labels.resize(rows, static_cast<Eigen::Index>(kLabelCount));
    out.presence = mask.broadcast(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        out.features.row(r) = feats[static_cast<std::size_t>(r)].transpose();
        out.labels.row(r) = labs[static_cast<std::size_t>(r)].transpose();
    }
    return out;
}

}  // namespace

GroundTruth make_ground_truth(const BenchmarkSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(util::derive_seed(spec.seed, "ground-truth"));
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> bias(-2.0, -0.5);
    const auto d = static_cast<Eigen::Index>(spec.feature_dim);
    const auto labels = static_cast<Eigen::Index>(kLabelCount);
    GroundTruth t;
    t.weights.resize(labels, d);
    const double scale = spec.signal_scale / std::sqrt(static_cast<double>(spec.feature_dim));
    for (Eigen::Index r = 0; r < labels; ++r)
        for (Eigen::Index c = 0; c < d; ++c) t.weights(r, c) = scale * normal(rng);
    t.biases.resize(labels);
    for (Eigen::Index r = 0; r < labels; ++r) t.biases(r) = bias(rng);
    t.mixing = spec.mixing_override ? *spec.mixing_override
                                    : random_rotation(spec.feature_dim, spec.rotation_fraction, spec.rotation_strength, rng);
    Vector dir(d);
    for (Eigen::Index i = 0; i < d; ++i) dir(i) = normal(rng);
    t.translation = spec.translation == 0.0 ? Vector::Zero(d) : Vector(dir.normalized() * spec.translation);
    return t;
}

DomainPair generate(const BenchmarkSpec& spec) {
    const auto truth = make_ground_truth(spec);
    DomainPair pair;
    pair.a = draw_domain(spec, truth, Domain::A, 0, 0);
    pair.b = draw_domain(spec, truth, Domain::B, static_cast<std::int64_t>(spec.groups_per_domain),
                         static_cast<std::int64_t>(pair.a.size()));
    return pair;
}

void SplitSpec::validate() const {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0,1)");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw ConfigError("validation_fraction must be in (0,1)");
}

Splits split(const Dataset& dataset, const SplitSpec& spec, std::uint64_t repetition_seed) {
    spec.validate();
    auto groups = dataset.groups();
    if (groups.size() < 10) throw ConfigError("split needs at least 10 groups, got " + std::to_string(groups.size()));
    std::sort(groups.begin(), groups.end());

    std::mt19937_64 test_rng(util::derive_seed(spec.base_seed, "test-split"));
    std::shuffle(groups.begin(), groups.end(), test_rng);
    const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(groups.size())));
    std::vector<std::int64_t> test(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::int64_t> pool(groups.begin() + static_cast<std::ptrdiff_t>(n_test), groups.end());
    std::sort(pool.begin(), pool.end());

    std::mt19937_64 val_rng(util::derive_seed(repetition_seed, "validation-split"));
    std::shuffle(pool.begin(), pool.end(), val_rng);
    const auto n_val = static_cast<std::size_t>(std::lround(spec.validation_fraction * static_cast<double>(pool.size())));
    if (n_test == 0 || n_val == 0 || n_val >= pool.size())
        throw ConfigError("split fractions leave an empty train, validation or test split");
    std::vector<std::int64_t> val(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::int64_t> train(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());

    return {dataset.select_groups(train), dataset.select_groups(val), dataset.select_groups(test)};
}

namespace {

constexpr const char* kDatasetMagic = "# cladapt-dataset v1";

std::string dataset_payload(const Dataset& ds) {
    std::ostringstream out;
    out << "sample_id,group_id,domain";
    for (Eigen::Index i = 0; i < ds.features.cols(); ++i) out << ",f_" << i;
    for (Eigen::Index i = 0; i < ds.labels.cols(); ++i) out << ",y_" << i;
    for (Eigen::Index i = 0; i < ds.presence.cols(); ++i) out << ",m_" << i;
    out << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out << ds.sample_ids[i] << ',' << ds.group_ids[i] << ',' << domain_letter(ds.domains[i]);
        for (Eigen::Index c = 0; c < ds.features.cols(); ++c) out << ',' << util::format_double(ds.features(r, c));
        for (Eigen::Index c = 0; c < ds.labels.cols(); ++c) out << ',' << (ds.labels(r, c) != 0.0 ? '1' : '0');
        for (Eigen::Index c = 0; c < ds.presence.cols(); ++c) out << ',' << (ds.presence(r, c) != 0.0 ? '1' : '0');
        out << '\n';
    }
    return out.str();
}

std::string header_field(const std::string& header, const std::string& key) {
    const auto tag = " " + key + "=";
    const auto pos = header.find(tag);
    if (pos == std::string::npos) throw IntegrityError("dataset header lacks '" + key + "'");
    const auto start = pos + tag.size();
    return header.substr(start, header.find(' ', start) - start);
}

double parse_flag(const std::string& cell) {
    if (cell == "0") return 0.0;
    if (cell == "1") return 1.0;
    throw IntegrityError("expected 0/1 cell, got '" + cell + "'");
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& path, const std::string& spec_hash,
                  std::uint64_t seed) {
    const auto payload = dataset_payload(dataset);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << kDatasetMagic << " spec_hash=" << spec_hash << " seed=" << seed << " rows=" << dataset.size()
        << " features=" << dataset.feature_dim() << " checksum=" << util::hex64(util::fnv1a64(payload)) << '\n';
    out << payload;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path, const std::optional<std::string>& expected_spec_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open dataset " + path.string());
    std::string header;
    if (!std::getline(in, header) || header.rfind(kDatasetMagic, 0) != 0)
        throw IntegrityError("not a cladapt dataset: " + path.string());
    header += ' ';
    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (util::hex64(util::fnv1a64(payload)) != header_field(header, "checksum"))
        throw IntegrityError("dataset checksum mismatch (truncated or edited): " + path.string());
    if (expected_spec_hash && header_field(header, "spec_hash") != *expected_spec_hash)
        throw IntegrityError("dataset was generated from a different benchmark spec");
    const auto rows = static_cast<std::size_t>(util::parse_int(header_field(header, "rows")));
    const auto dim = static_cast<Eigen::Index>(util::parse_int(header_field(header, "features")));
    const auto labels = static_cast<Eigen::Index>(kLabelCount);

    std::istringstream body(payload);
    std::string line;
    std::getline(body, line);  // column header
    if (util::split_csv(line).size() != static_cast<std::size_t>(3 + dim + 2 * labels))
        throw IntegrityError("dataset column header does not match feature count");
    Dataset ds;
    ds.features.resize(static_cast<Eigen::Index>(rows), dim);
    ds.labels.resize(static_cast<Eigen::Index>(rows), labels);
    ds.presence.resize(static_cast<Eigen::Index>(rows), labels);
    for (std::size_t i = 0; i < rows; ++i) {
        if (!std::getline(body, line)) throw IntegrityError("dataset has fewer rows than its header states");
        const auto cells = util::split_csv(line);
        if (cells.size() != static_cast<std::size_t>(3 + dim + 2 * labels))
            throw IntegrityError("dataset row " + std::to_string(i) + " has wrong column count");
        const auto r = static_cast<Eigen::Index>(i);
        ds.sample_ids.push_back(util::parse_int(cells[0]));
        ds.group_ids.push_back(util::parse_int(cells[1]));
        ds.domains.push_back(parse_domain(cells[2]));
        std::size_t k = 3;
        for (Eigen::Index c = 0; c < dim; ++c) ds.features(r, c) = util::parse_double(cells[k++]);
        for (Eigen::Index c = 0; c < labels; ++c) ds.labels(r, c) = parse_flag(cells[k++]);
        for (Eigen::Index c = 0; c < labels; ++c) ds.presence(r, c) = parse_flag(cells[k++]);
    }
    if (std::getline(body, line) && !line.empty()) throw IntegrityError("dataset has trailing rows");
    return ds;
}

}  // namespace cladapt::data

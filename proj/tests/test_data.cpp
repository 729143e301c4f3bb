#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cladapt/data.hpp"
#include "cladapt/errors.hpp"

using namespace cladapt;
using namespace cladapt::data;

namespace {

BenchmarkSpec small_spec() {
    BenchmarkSpec s;
    s.groups_per_domain = 120;
    return s;
}

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

// Means of each group's rows; group means are independent draws even though rows are not.
std::vector<Vector> group_means(const Dataset& d) {
    std::map<std::int64_t, std::pair<Vector, int>> acc;
    for (std::size_t i = 0; i < d.size(); ++i) {
        auto& [sum, n] = acc[d.group_ids[i]];
        if (n == 0) sum = Vector::Zero(d.features.cols());
        sum += d.features.row(static_cast<Eigen::Index>(i)).transpose();
        ++n;
    }
    std::vector<Vector> out;
    for (auto& [g, v] : acc) out.push_back(v.first / v.second);
    return out;
}

}  // namespace

TEST_CASE("label topology") {
    CHECK(shared_labels().size() == 7);
    CHECK(unique_labels(Domain::A).size() == 7);
    CHECK(unique_labels(Domain::B).size() == 7);
    CHECK(domain_mask(Domain::A).count() == 14);
    CHECK(domain_mask(Domain::B).count() == 14);
    std::size_t only_a = 0, only_b = 0, both = 0;
    for (std::size_t l = 0; l < kLabelCount; ++l) {
        const bool a = domain_mask(Domain::A)[l], b = domain_mask(Domain::B)[l];
        only_a += a && !b;
        only_b += b && !a;
        both += a && b;
    }
    CHECK(only_a == 7);
    CHECK(only_b == 7);
    CHECK(both == 7);
    CHECK(label_name(0) == "S1");
    CHECK(label_name(13) == "A7");
    CHECK(label_name(14) == "B1");
    CHECK_THROWS_AS(label_name(21), ConfigError);
}

TEST_CASE("generation is deterministic and respects the presence contract") {
    const auto spec = small_spec();
    const auto p1 = generate(spec);
    const auto p2 = generate(spec);
    CHECK(p1.a == p2.a);
    CHECK(p1.b == p2.b);

    auto other = spec;
    other.seed += 1;
    CHECK_FALSE(generate(other).a == p1.a);

    for (const auto* d : {&p1.a, &p1.b}) {
        for (std::size_t i = 0; i < d->size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            CHECK(d->presence.row(r).sum() == 14.0);
            for (Eigen::Index c = 0; c < d->labels.cols(); ++c)
                if (d->presence(r, c) == 0.0) CHECK(d->labels(r, c) == 0.0);
        }
    }
    CHECK(p1.a.groups().size() == 120);
    CHECK(p1.b.groups().size() == 120);
    CHECK(p1.b.group_ids.front() == 120);
    CHECK(p1.b.sample_ids.front() == static_cast<std::int64_t>(p1.a.size()));
    for (auto d : p1.b.domains) CHECK(d == Domain::B);
    std::map<std::int64_t, int> sizes;
    for (auto g : p1.a.group_ids) ++sizes[g];
    for (auto& [g, n] : sizes) CHECK((n >= 1 && n <= 3));
}

TEST_CASE("default spec label positive rates lie in [0.05, 0.95]") {
    const auto pair = generate(BenchmarkSpec{});
    for (const auto* d : {&pair.a, &pair.b}) {
        for (Eigen::Index c = 0; c < d->labels.cols(); ++c) {
            const double present = d->presence.col(c).sum();
            if (present == 0.0) continue;
            const double rate = d->labels.col(c).sum() / present;
            CHECK(rate >= 0.05);
            CHECK(rate <= 0.95);
        }
    }
}

TEST_CASE("identity shift gives matching feature marginals") {
    auto spec = BenchmarkSpec{};
    spec.rotation_fraction = 0.0;
    spec.translation = 0.0;
    const auto truth = make_ground_truth(spec);
    CHECK(truth.mixing.isIdentity());
    CHECK(truth.translation.isZero());
    const auto pair = generate(spec);
    const auto ga = group_means(pair.a), gb = group_means(pair.b);
    const auto d = pair.a.features.cols();
    for (Eigen::Index c = 0; c < d; ++c) {
        auto stats = [c](const std::vector<Vector>& gm) {
            double m = 0.0, v = 0.0;
            for (const auto& x : gm) m += x(c);
            m /= static_cast<double>(gm.size());
            for (const auto& x : gm) v += (x(c) - m) * (x(c) - m);
            return std::make_pair(m, v / static_cast<double>(gm.size() - 1));
        };
        const auto [ma, va] = stats(ga);
        const auto [mb, vb] = stats(gb);
        const double se = std::sqrt(va / static_cast<double>(ga.size()) + vb / static_cast<double>(gb.size()));
        CHECK(std::abs(ma - mb) < 3.0 * se);
    }
}

TEST_CASE("default shift: rotation on half the coordinates plus unit translation") {
    const BenchmarkSpec spec;
    const auto t = make_ground_truth(spec);
    const auto d = static_cast<Eigen::Index>(spec.feature_dim);
    CHECK((t.mixing * t.mixing.transpose() - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(t.mixing.determinant() == doctest::Approx(1.0));
    CHECK(t.translation.norm() == doctest::Approx(1.0));
    std::size_t fixed = 0;
    for (Eigen::Index i = 0; i < d; ++i) {
        bool untouched = t.mixing(i, i) == 1.0;
        for (Eigen::Index j = 0; j < d; ++j)
            if (j != i && (t.mixing(i, j) != 0.0 || t.mixing(j, i) != 0.0)) untouched = false;
        fixed += untouched;
    }
    CHECK(fixed == 16);
    CHECK_FALSE(t.mixing.isIdentity(1e-3));
}

TEST_CASE("rotation strength scales the rotation angles") {
    auto full = BenchmarkSpec{};
    full.rotation_strength = 1.0;
    auto half = full;
    half.rotation_strength = 0.5;
    auto none = full;
    none.rotation_strength = 0.0;
    const Matrix r1 = make_ground_truth(full).mixing;
    const Matrix rh = make_ground_truth(half).mixing;
    // the same draw, so two half-strength rotations compose to the full one
    CHECK((rh * rh - r1).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(make_ground_truth(none).mixing.isIdentity(1e-12));
    // ground-truth weights do not depend on the strength
    CHECK(make_ground_truth(full).weights == make_ground_truth(half).weights);
}

TEST_CASE("non-invertible or misshapen shifts are rejected") {
    auto spec = small_spec();
    Matrix singular = Matrix::Identity(32, 32);
    singular(3, 3) = 0.0;
    spec.mixing_override = singular;
    CHECK_THROWS_AS(generate(spec), ConfigError);
    spec.mixing_override = Matrix::Identity(31, 31);
    CHECK_THROWS_AS(generate(spec), ConfigError);
}

TEST_CASE("spec validation and json") {
    BenchmarkSpec s;
    s.rotation_fraction = 1.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = BenchmarkSpec{};
    s.rotation_strength = -0.1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = BenchmarkSpec{};
    s.min_group_size = 3;
    s.max_group_size = 2;
    CHECK_THROWS_AS(s.validate(), ConfigError);

    s = BenchmarkSpec{};
    s.translation = 2.5;
    s.mixing_override = Matrix::Identity(32, 32) * 2.0;
    const auto back = BenchmarkSpec::from_json(s.to_json());
    CHECK(back.to_json() == s.to_json());
    CHECK(back.hash() == s.hash());
    CHECK_FALSE(BenchmarkSpec{}.hash() == s.hash());
    auto j = BenchmarkSpec{}.to_json();
    j["bogus"] = 1;
    CHECK_THROWS_AS(BenchmarkSpec::from_json(j), ConfigError);
}

TEST_CASE("split examples") {
    BenchmarkSpec spec;
    spec.groups_per_domain = 100;
    const auto a = generate(spec).a;
    const SplitSpec ss{0.2, 0.1, 7};
    const auto s1 = split(a, ss, 11);
    const auto s2 = split(a, ss, 12);
    CHECK(s1.test.groups().size() == 20);
    CHECK(s1.train.groups().size() + s1.validation.groups().size() == 80);
    CHECK(s1.validation.groups().size() == 8);
    CHECK(s1.test == s2.test);
    CHECK_FALSE(s1.validation == s2.validation);

    // group integrity and full coverage
    std::set<std::int64_t> tr(s1.train.group_ids.begin(), s1.train.group_ids.end());
    std::set<std::int64_t> va(s1.validation.group_ids.begin(), s1.validation.group_ids.end());
    std::set<std::int64_t> te(s1.test.group_ids.begin(), s1.test.group_ids.end());
    for (auto g : va) CHECK_FALSE(tr.count(g));
    for (auto g : te) CHECK_FALSE((tr.count(g) || va.count(g)));
    CHECK(tr.size() + va.size() + te.size() == 100);
    CHECK(s1.train.size() + s1.validation.size() + s1.test.size() == a.size());

    // another base seed moves the test split
    CHECK_FALSE(split(a, SplitSpec{0.2, 0.1, 8}, 11).test == s1.test);
}

TEST_CASE("split errors") {
    BenchmarkSpec spec;
    spec.groups_per_domain = 9;
    CHECK_THROWS_AS(split(generate(spec).a, SplitSpec{}, 1), ConfigError);
    spec.groups_per_domain = 50;
    const auto a = generate(spec).a;
    CHECK_THROWS_AS(split(a, SplitSpec{1.2, 0.1, 0}, 1), ConfigError);
    CHECK_THROWS_AS(split(a, SplitSpec{0.2, 0.0, 0}, 1), ConfigError);
    CHECK_THROWS_AS(split(a, SplitSpec{0.2, 0.999, 0}, 1), ConfigError);
}

TEST_CASE("dataset csv round trip and integrity") {
    const auto spec = small_spec();
    const auto pair = generate(spec);
    const auto path = temp_file("cladapt_test_dataset.csv");
    save_dataset(pair.b, path, spec.hash(), spec.seed);
    CHECK(load_dataset(path, spec.hash()) == pair.b);
    CHECK(load_dataset(path) == pair.b);

    const auto text = slurp(path);
    CHECK(text.rfind("# cladapt-dataset v1 spec_hash=" + spec.hash() + " seed=" + std::to_string(spec.seed), 0) == 0);
    const auto header_end = text.find('\n');
    const auto columns = text.substr(header_end + 1, text.find('\n', header_end + 1) - header_end - 1);
    CHECK(columns.rfind("sample_id,group_id,domain,f_0,", 0) == 0);
    CHECK(columns.find(",y_20,m_0,") != std::string::npos);
    CHECK(columns.substr(columns.size() - 5) == ",m_20");

    SUBCASE("spec hash mismatch") { CHECK_THROWS_AS(load_dataset(path, std::string("deadbeef")), IntegrityError); }
    SUBCASE("truncated file") {
        spit(path, text.substr(0, text.size() / 2));
        CHECK_THROWS_AS(load_dataset(path), IntegrityError);
    }
    SUBCASE("edited label cell") {
        // flip the first y column of the first data row
        auto edited = text;
        const auto row_start = edited.find('\n', header_end + 1) + 1;
        std::size_t pos = row_start;
        for (int commas = 0; commas < 3 + 32; ++pos)
            if (edited[pos] == ',') ++commas;
        edited[pos] = edited[pos] == '0' ? '1' : '0';
        spit(path, edited);
        CHECK_THROWS_AS(load_dataset(path), IntegrityError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("dataset helpers") {
    const auto pair = generate(small_spec());
    const auto& a = pair.a;
    const std::vector<std::int64_t> g{3, 1};
    const auto sel = a.select_groups(g);
    for (auto id : sel.group_ids) CHECK((id == 1 || id == 3));
    CHECK(sel.groups() == std::vector<std::int64_t>{1, 3});
    const auto both = concat(a, pair.b);
    CHECK(both.size() == a.size() + pair.b.size());
    const auto s = both.sample(a.size());
    CHECK(s.domain == Domain::B);
    CHECK(s.presence == domain_mask(Domain::B));
    CHECK(s.features.size() == 32);
}

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "cladapt/checkpoint.hpp"
#include "cladapt/errors.hpp"
#include "cladapt/nn.hpp"
#include "support.hpp"

using namespace cladapt;
using namespace cladapt::nn;
using testsupport::random_matrix;

namespace {

MlpModel logistic_unit(double w, double b) {
    DenseLayer l;
    l.weight = Matrix::Constant(1, 1, w);
    l.bias = Vector::Constant(1, b);
    return MlpModel({l});
}

double reference_sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("parameter layout offsets and sizes") {
    MlpModel m(MlpArchitecture{4, {3}, 2}, 7);
    const auto layout = m.layout();
    REQUIRE(layout.entries().size() == 4);
    CHECK(layout.entries()[0].name == "fc0.weight");
    CHECK(layout.entries()[0].rows == 3);
    CHECK(layout.entries()[0].cols == 4);
    CHECK(layout.entries()[3].name == "fc1.bias");
    std::size_t sum = 0;
    for (const auto& e : layout.entries()) sum += e.size();
    CHECK(layout.total_size() == sum);
    CHECK(layout.total_size() == 3 * 4 + 3 + 2 * 3 + 2);
    CHECK(layout.offset(2) == 15);
    CHECK(m.parameter_count() == sum);
}

TEST_CASE("parameter vector rejects wrong length") {
    ParameterLayout layout({{"w", 2, 2}});
    CHECK_THROWS_AS(ParameterVector(layout, {1.0, 2.0}), ShapeError);
    ParameterVector v(layout, {1, 2, 3, 4});
    CHECK(v.entry(0).size() == 4);
    CHECK(v.norm() == doctest::Approx(std::sqrt(30.0)));
}

TEST_CASE("parameter round trip leaves predictions bit identical") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        auto m = testsupport::small_model(rng);
        const Matrix x = random_matrix(5, static_cast<Eigen::Index>(m.input_dim()), rng);
        const Matrix before = m.predict(x);
        auto p = m.get_parameters();
        m.set_parameters(p);
        CHECK((m.predict(x).array() == before.array()).all());
        CHECK(m.get_parameters() == p);
    }
}

TEST_CASE("glorot init is seeded, bounded and has zero biases") {
    MlpArchitecture a{10, {8}, 3};
    MlpModel m1(a, 42), m2(a, 42), m3(a, 43);
    CHECK(m1.get_parameters() == m2.get_parameters());
    CHECK_FALSE(m1.get_parameters() == m3.get_parameters());
    const double bound0 = std::sqrt(6.0 / (10 + 8));
    CHECK(m1.layers()[0].weight.cwiseAbs().maxCoeff() <= bound0);
    CHECK(m1.layers()[0].bias.isZero());
    CHECK(m1.layers()[1].bias.isZero());
}

TEST_CASE("forward examples") {
    SUBCASE("zero-weight network outputs one half") {
        MlpModel m(MlpArchitecture{3, {4, 2}, 5}, 1);
        auto p = m.get_parameters();
        for (auto& v : p.values()) v = 0.0;
        m.set_parameters(p);
        std::mt19937_64 rng(1);
        const Matrix out = forward(m, random_matrix(6, 3, rng));
        CHECK((out.array() == 0.5).all());
    }
    SUBCASE("single linear unit") {
        CHECK(forward(logistic_unit(1.0, 0.0), Matrix::Zero(1, 1))(0, 0) == 0.5);
        CHECK(forward(logistic_unit(2.0, 0.0), Matrix::Ones(1, 1))(0, 0) == doctest::Approx(0.8808).epsilon(1e-4));
        CHECK(forward(logistic_unit(2.0, 0.0), Matrix::Ones(1, 1))(0, 0) == doctest::Approx(reference_sigmoid(2.0)));
    }
    SUBCASE("outputs stay inside the clamp") {
        const Matrix out = forward(logistic_unit(1.0, 0.0), Matrix{{-1000.0}, {1000.0}});
        CHECK(out(0, 0) == kClampEps);
        CHECK(out(1, 0) == 1.0 - kClampEps);
    }
    SUBCASE("dimension mismatch") {
        MlpModel m(MlpArchitecture{3, {4}, 2}, 1);
        CHECK_THROWS_AS(forward(m, Matrix::Zero(2, 4)), ShapeError);
        CHECK_THROWS_AS(forward(m, Matrix::Zero(0, 3)), ShapeError);
    }
}

TEST_CASE("masked_bce examples") {
    CHECK(masked_bce(Matrix::Constant(1, 1, 0.5), Matrix::Ones(1, 1), LabelMask::all(1)) ==
          doctest::Approx(std::log(2.0)));

    std::mt19937_64 rng(5);
    const Matrix y = testsupport::random_binary(4, 3, rng);
    const Matrix p = y.unaryExpr([](double v) { return v == 1.0 ? 1.0 - kClampEps : kClampEps; });
    CHECK(masked_bce(p, y, LabelMask::all(3)) <= 2e-7);

    // second label is masked out: its probability and target are irrelevant
    const Matrix p2{{0.7, 0.01}};
    const Matrix y2{{1.0, 1.0}};
    const Matrix p3{{0.7, 0.99}};
    const Matrix y3{{1.0, 0.0}};
    const auto mask = LabelMask::from_indices(2, std::vector<std::size_t>{0});
    CHECK(masked_bce(p2, y2, mask) == doctest::Approx(-std::log(0.7)));
    CHECK(masked_bce(p2, y2, mask) == masked_bce(p3, y3, mask));
}

TEST_CASE("masked_bce errors") {
    CHECK_THROWS_AS(masked_bce(Matrix::Constant(1, 2, 0.5), Matrix::Ones(1, 2), LabelMask::none(2)), ConfigError);
    CHECK_THROWS_AS(masked_bce(Matrix::Constant(1, 2, 0.5), Matrix::Ones(1, 2), LabelMask::all(3)), ShapeError);
    Matrix p = Matrix::Constant(1, 1, 0.5);
    p(0, 0) = std::nan("");
    CHECK_THROWS_AS(masked_bce(p, Matrix::Ones(1, 1), LabelMask::all(1)), NumericError);
}

TEST_CASE("masked targets never change the loss") {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 50; ++t) {
        const Matrix p = random_matrix(4, 5, rng).unaryExpr([](double z) { return reference_sigmoid(z); });
        Matrix y = testsupport::random_binary(4, 5, rng);
        const Matrix m = testsupport::random_cell_mask(4, 5, rng);
        const double before = masked_bce(p, y, m);
        for (Eigen::Index r = 0; r < 4; ++r)
            for (Eigen::Index c = 0; c < 5; ++c)
                if (m(r, c) == 0.0) y(r, c) = 1.0 - y(r, c);
        CHECK(masked_bce(p, y, m) == before);
    }
}

TEST_CASE("output-row weights of a masked label do not affect the loss") {
    std::mt19937_64 rng(12);
    MlpModel model(MlpArchitecture{3, {4}, 3}, 9);
    const Matrix x = random_matrix(6, 3, rng);
    const Matrix y = testsupport::random_binary(6, 3, rng);
    const auto mask = LabelMask::from_indices(3, std::vector<std::size_t>{0, 2});
    const double before = masked_bce(model.predict(x), y, mask);
    auto p = model.get_parameters();
    // fc1.weight row 1 and fc1.bias[1] feed only the masked label
    const auto layout = model.layout();
    auto w = p.entry(2);
    for (std::size_t c = 0; c < 4; ++c) w[1 * 4 + c] += 3.0;
    p.entry(3)[1] -= 2.0;
    model.set_parameters(p);
    CHECK(masked_bce(model.predict(x), y, mask) == before);
    // the gradient on those entries is exactly zero
    const auto g = backward(model, x, y, mask);
    for (std::size_t c = 0; c < 4; ++c) CHECK(g.entry(2)[4 + c] == 0.0);
    CHECK(g.entry(3)[1] == 0.0);
}

TEST_CASE("clamp safety: loss is finite for any forward output") {
    std::mt19937_64 rng(13);
    MlpModel model(MlpArchitecture{2, {3}, 2}, 1);
    auto p = model.get_parameters();
    for (auto& v : p.values()) v *= 500.0;
    model.set_parameters(p);
    const Matrix x = random_matrix(20, 2, rng, 50.0);
    const Matrix y = testsupport::random_binary(20, 2, rng);
    const double loss = masked_bce(model.predict(x), y, LabelMask::all(2));
    CHECK(std::isfinite(loss));
    CHECK(loss <= -std::log(kClampEps) + 1e-9);
}

TEST_CASE("backward examples") {
    SUBCASE("logistic unit hand derivative") {
        const auto g = backward(logistic_unit(0.0, 0.0), Matrix::Ones(1, 1), Matrix::Ones(1, 1), LabelMask::all(1));
        CHECK(g[0] == doctest::Approx(-0.5));
        CHECK(g[1] == doctest::Approx(-0.5));
    }
    SUBCASE("stationary point") {
        // targets equal to the model output make every residual zero
        std::mt19937_64 rng(14);
        MlpModel model(MlpArchitecture{3, {4}, 2}, 2);
        const Matrix x = random_matrix(5, 3, rng);
        const Matrix y = model.predict(x);
        CHECK(backward(model, x, y, LabelMask::all(2)).norm() < 1e-6);
    }
    SUBCASE("mask without active label is rejected") {
        MlpModel model(MlpArchitecture{1, {}, 2}, 2);
        CHECK_THROWS_AS(backward(model, Matrix::Ones(1, 1), Matrix::Ones(1, 2), LabelMask::none(2)), ConfigError);
    }
}

TEST_CASE("backward matches central finite differences") {
    std::mt19937_64 rng(15);
    for (int t = 0; t < 100; ++t) {
        auto model = testsupport::small_model(rng);
        const auto d = static_cast<Eigen::Index>(model.input_dim());
        const auto l = static_cast<Eigen::Index>(model.output_dim());
        const Matrix x = random_matrix(4, d, rng);
        const Matrix y = testsupport::random_binary(4, l, rng);
        const Matrix m = testsupport::random_cell_mask(4, l, rng);
        const auto theta = model.get_parameters();
        const auto analytic = backward(model, x, y, m);
        auto f = [&](const std::vector<double>& v) {
            MlpModel probe = model;
            probe.set_parameters(ParameterVector(theta.layout(), v));
            return masked_bce(probe.predict(x), y, m);
        };
        const auto numeric = testsupport::central_differences(
            f, std::vector<double>(theta.values().begin(), theta.values().end()));
        CHECK(testsupport::max_relative_error(analytic.values(), numeric) < 1e-4);
    }
}

TEST_CASE("per-sample gradients") {
    std::mt19937_64 rng(16);
    MlpModel model(MlpArchitecture{3, {5, 4}, 3}, 4);
    SUBCASE("singleton equals backward") {
        const Matrix x = random_matrix(1, 3, rng);
        const Matrix y = testsupport::random_binary(1, 3, rng);
        const auto ps = per_sample_gradients(model, x, y, LabelMask::all(3));
        REQUIRE(ps.size() == 1);
        CHECK(ps[0] == backward(model, x, y, LabelMask::all(3)));
    }
    SUBCASE("identical samples give identical gradients") {
        Matrix x(2, 3);
        x.row(0) = random_matrix(1, 3, rng);
        x.row(1) = x.row(0);
        const Matrix y = Matrix::Ones(2, 3);
        const auto ps = per_sample_gradients(model, x, y, LabelMask::all(3));
        CHECK(ps[0] == ps[1]);
    }
    SUBCASE("mean of per-sample gradients equals the batch gradient") {
        // with a uniform mask every row has the same number of cells
        const Matrix x = random_matrix(9, 3, rng);
        const Matrix y = testsupport::random_binary(9, 3, rng);
        const auto mask = LabelMask::from_indices(3, std::vector<std::size_t>{0, 2});
        const auto ps = per_sample_gradients(model, x, y, mask);
        Vector mean = Vector::Zero(static_cast<Eigen::Index>(model.parameter_count()));
        for (const auto& g : ps) mean += g.as_eigen();
        mean /= 9.0;
        const auto full = backward(model, x, y, mask);
        CHECK((mean - full.as_eigen()).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("model checkpoint round trip is bit exact") {
    std::mt19937_64 rng(17);
    auto model = testsupport::small_model(rng);
    const auto path = std::filesystem::temp_directory_path() / "cladapt_nn_ckpt_test.params";
    io::save_model(model, path);
    const auto loaded = io::load_model(path);
    CHECK(loaded.get_parameters() == model.get_parameters());
    CHECK(loaded.architecture() == model.architecture());
    CHECK(loaded.seed() == model.seed());
    const Matrix x = random_matrix(3, static_cast<Eigen::Index>(model.input_dim()), rng);
    CHECK((loaded.predict(x).array() == model.predict(x).array()).all());
    std::filesystem::remove(path);
}

TEST_CASE("hex float formatting round trips") {
    for (double v : {0.0, -0.0, 1.0, -2.5e-300, 3.141592653589793, 1e308, 5e-324}) {
        const double back = io::parse_hex(io::format_hex(v));
        CHECK(std::memcmp(&back, &v, sizeof v) == 0);
    }
}

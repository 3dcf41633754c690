#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "dbs/adam.hpp"
#include "dbs/ops.hpp"
#include "dbs/rng.hpp"
#include "oracle.hpp"

using dbs::Tensor;
namespace ops = dbs::ops;

namespace {

std::vector<float> random_values(std::size_t n, dbs::Rng& rng, float scale = 1.0f) {
    std::normal_distribution<float> g(0.0f, scale);
    std::vector<float> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

oracle::Vec to_double(std::span<const float> v) { return oracle::Vec(v.begin(), v.end()); }

// Checks every coordinate of `leaf`'s analytic gradient against a central
// difference of the double-precision `reference`.
void expect_gradient_matches(const Tensor& leaf, const std::function<double(const oracle::Vec&)>& reference) {
    auto x = to_double(leaf.values());
    auto g = leaf.grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double numeric = oracle::central_difference(reference, x, i, 1e-4);
        EXPECT_LT(oracle::relative_error(g[i], numeric), 1e-3) << "coordinate " << i << ": analytic " << g[i]
                                                                << " numeric " << numeric;
    }
}

} // namespace

TEST(Tensor, RejectsZeroSizedDimension) { EXPECT_THROW(Tensor({2, 0}, {}), dbs::ShapeError); }

TEST(Tensor, RejectsValueCountMismatch) { EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), dbs::ShapeError); }

TEST(Tensor, RejectsNonFiniteValues) { EXPECT_THROW(Tensor({1}, {NAN}), dbs::NumericError); }

TEST(Tensor, ItemRequiresScalar) { EXPECT_THROW(Tensor({2}, {1, 2}).item(), dbs::ContractError); }

TEST(Tensor, DetachCopiesValuesWithoutHistory) {
    Tensor x({2}, {1, 2}, true);
    auto y = ops::scale(x, 2.0);
    auto d = y.detach();
    EXPECT_EQ(d.op(), "leaf");
    EXPECT_FALSE(d.requires_grad());
    EXPECT_EQ(std::vector<float>(d.values().begin(), d.values().end()), (std::vector<float>{2, 4}));
}

TEST(Forward, AffineWithIdentityIsIdentity) {
    Tensor x({1, 2}, {1, 2});
    Tensor w({2, 2}, {1, 0, 0, 1});
    Tensor b({2}, {0, 0});
    auto y = ops::affine(x, w, b);
    EXPECT_FLOAT_EQ(y.at(0, 0), 1.0f);
    EXPECT_FLOAT_EQ(y.at(0, 1), 2.0f);
}

TEST(Forward, CrossEntropyOfUniformLogitsIsLogK) {
    Tensor z({1, 2}, {0, 0});
    std::vector<int> label{0};
    EXPECT_NEAR(ops::cross_entropy_rows(z, label).item(), std::log(2.0), 1e-6);
}

TEST(Forward, MeanPoolAveragesRows) {
    auto y = ops::mean_pool(Tensor({2, 2}, {1, 3, 3, 5}));
    EXPECT_FLOAT_EQ(y.at(0, 0), 2.0f);
    EXPECT_FLOAT_EQ(y.at(0, 1), 4.0f);
}

TEST(Forward, ShapeMismatchNamesTheOperation) {
    Tensor a({2, 3}, std::vector<float>(6, 1.0f));
    Tensor b({2, 3}, std::vector<float>(6, 1.0f));
    try {
        ops::matmul(a, b);
        FAIL() << "expected a shape error";
    } catch (const dbs::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    }
}

TEST(Forward, OverflowIsReportedAsNumericError) {
    Tensor x({1}, {3e38f});
    EXPECT_THROW(ops::scale(x, 10.0), dbs::NumericError);
}

TEST(Forward, SoftmaxRejectsNonPositiveTemperature) {
    Tensor x({1, 2}, {0, 1});
    EXPECT_THROW(ops::softmax_rows(x, 0.0), dbs::ContractError);
    EXPECT_THROW(ops::softmax_rows(x, -1.0), dbs::ContractError);
}

TEST(Forward, SoftmaxMaskGivesExactZero) {
    Tensor x({1, 3}, {5, 1, 2});
    auto y = ops::softmax_rows(x, 1.0, {true, false, false});
    EXPECT_EQ(y.at(0, 0), 0.0f);
    EXPECT_NEAR(y.at(0, 1) + y.at(0, 2), 1.0, 1e-6);
}

TEST(Forward, SoftmaxRowsAreSimplexAcrossTemperatures) {
    dbs::Rng rng(11);
    std::uniform_real_distribution<double> log_temp(std::log(1e-3), std::log(10.0));
    for (int trial = 0; trial < 200; ++trial) {
        Tensor x({4, 50}, random_values(200, rng, 5.0f));
        const double t = std::exp(log_temp(rng));
        auto y = ops::softmax_rows(x, t);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 50; ++c) {
                EXPECT_GE(y.at(r, c), 0.0f);
                s += y.at(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-6) << "temperature " << t;
        }
    }
}

TEST(Backward, SumHasUnitGradient) {
    Tensor x({3}, {1, 2, 3}, true);
    dbs::backward(ops::sum(x));
    for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 1.0f);
}

TEST(Backward, CrossEntropyGradientIsSoftmaxMinusOneHot) {
    Tensor z({1, 2}, {0, 0}, true);
    std::vector<int> label{0};
    dbs::backward(ops::sum(ops::cross_entropy_rows(z, label)));
    EXPECT_FLOAT_EQ(z.grad()[0], -0.5f);
    EXPECT_FLOAT_EQ(z.grad()[1], 0.5f);
}

TEST(Backward, NonScalarLossIsRejected) {
    Tensor x({3}, {1, 2, 3}, true);
    EXPECT_THROW(dbs::backward(ops::scale(x, 2.0)), dbs::ContractError);
}

TEST(Backward, UnreachableLeafKeepsZeroGradient) {
    Tensor x({2}, {1, 2}, true);
    Tensor unused({2}, {3, 4}, true);
    dbs::backward(ops::sum(x));
    for (float g : unused.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, SharedNodeAccumulatesBothPaths) {
    Tensor x({2}, {1, 2}, true);
    dbs::backward(ops::sum(ops::add(x, ops::scale(x, 3.0))));
    for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 4.0f);
}

TEST(Backward, MixtureGradientIsInnerProductWithEmbeddingRows) {
    dbs::Rng rng(5);
    Tensor alpha({2, 4}, {0.25f, 0.25f, 0.25f, 0.25f, 0.1f, 0.2f, 0.3f, 0.4f}, true);
    Tensor table({4, 3}, random_values(12, rng));
    auto upstream = random_values(6, rng);
    dbs::backward(ops::weighted_sum(ops::matmul(alpha, table), upstream));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < 3; ++c) dot += static_cast<double>(upstream[i * 3 + c]) * table.at(j, c);
            EXPECT_NEAR(alpha.grad()[i * 4 + j], dot, 1e-5);
        }
}

TEST(GradientCheck, TwoLayerNetworkEveryCoordinate) {
    dbs::Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t batch = 3, in = 4, hidden = 5, k = 3;
        Tensor x({batch, in}, random_values(batch * in, rng), true);
        Tensor w1({in, hidden}, random_values(in * hidden, rng, 0.7f), true);
        Tensor b1({hidden}, random_values(hidden, rng, 0.1f), true);
        Tensor w2({hidden, k}, random_values(hidden * k, rng, 0.7f), true);
        Tensor b2({k}, random_values(k, rng, 0.1f), true);
        std::vector<int> labels{0, 2, 1};
        auto loss = ops::mean(ops::cross_entropy_rows(ops::affine(ops::tanh(ops::affine(x, w1, b1)), w2, b2), labels));
        dbs::backward(loss);

        auto net = [&](const oracle::Vec& xv, const oracle::Vec& w1v, const oracle::Vec& b1v, const oracle::Vec& w2v,
                       const oracle::Vec& b2v) {
            double total = 0.0;
            for (std::size_t r = 0; r < batch; ++r) {
                oracle::Vec h(hidden), z(k);
                for (std::size_t o = 0; o < hidden; ++o) {
                    double a = b1v[o];
                    for (std::size_t i = 0; i < in; ++i) a += xv[r * in + i] * w1v[i * hidden + o];
                    h[o] = std::tanh(a);
                }
                for (std::size_t o = 0; o < k; ++o) {
                    double a = b2v[o];
                    for (std::size_t i = 0; i < hidden; ++i) a += h[i] * w2v[i * k + o];
                    z[o] = a;
                }
                total += oracle::cross_entropy(z, labels[r]);
            }
            return total / static_cast<double>(batch);
        };
        const auto xv = to_double(x.values()), w1v = to_double(w1.values()), b1v = to_double(b1.values()),
                   w2v = to_double(w2.values()), b2v = to_double(b2.values());
        expect_gradient_matches(x, [&](const oracle::Vec& v) { return net(v, w1v, b1v, w2v, b2v); });
        expect_gradient_matches(w1, [&](const oracle::Vec& v) { return net(xv, v, b1v, w2v, b2v); });
        expect_gradient_matches(b1, [&](const oracle::Vec& v) { return net(xv, w1v, v, w2v, b2v); });
        expect_gradient_matches(w2, [&](const oracle::Vec& v) { return net(xv, w1v, b1v, v, b2v); });
        expect_gradient_matches(b2, [&](const oracle::Vec& v) { return net(xv, w1v, b1v, w2v, v); });
    }
}

TEST(GradientCheck, SoftplusOfRmsNormalizedRows) {
    dbs::Rng rng(3);
    const std::size_t rows = 3, cols = 5;
    Tensor x({rows, cols}, random_values(rows * cols, rng, 0.4f), true);
    auto weights = random_values(rows * cols, rng);
    dbs::backward(ops::weighted_sum(ops::softplus(ops::rms_normalize_rows(x, 0.1)), weights));
    expect_gradient_matches(x, [&](const oracle::Vec& v) {
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            double ms = 0.0;
            for (std::size_t c = 0; c < cols; ++c) ms += v[r * cols + c] * v[r * cols + c];
            const double inv = 1.0 / std::sqrt(ms / cols + 0.1);
            for (std::size_t c = 0; c < cols; ++c) total += weights[r * cols + c] * oracle::softplus(v[r * cols + c] * inv);
        }
        return total;
    });
}

TEST(GradientCheck, MaskedSoftmaxWithTemperature) {
    dbs::Rng rng(8);
    const std::size_t rows = 2, cols = 6;
    const std::vector<bool> mask{true, false, false, true, false, false};
    for (double t : {2.0, 0.5, 0.1}) {
        Tensor x({rows, cols}, random_values(rows * cols, rng), true);
        auto weights = random_values(rows * cols, rng);
        dbs::backward(ops::weighted_sum(ops::softmax_rows(x, t, mask), weights));
        expect_gradient_matches(x, [&](const oracle::Vec& v) {
            double total = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                auto p = oracle::softmax(std::span<const double>(v).subspan(r * cols, cols), t, mask);
                for (std::size_t c = 0; c < cols; ++c) total += weights[r * cols + c] * p[c];
            }
            return total;
        });
        for (std::size_t r = 0; r < rows; ++r) {
            EXPECT_EQ(x.grad()[r * cols + 0], 0.0f);
            EXPECT_EQ(x.grad()[r * cols + 3], 0.0f);
        }
    }
}

TEST(GradientCheck, EntropyHingeAndRowSplicing) {
    dbs::Rng rng(13);
    Tensor p({2, 3}, {0.2f, 0.3f, 0.5f, 0.6f, 0.3f, 0.1f}, true);
    dbs::backward(ops::sum(ops::row_entropy(p)));
    expect_gradient_matches(p, [](const oracle::Vec& v) {
        double h = 0.0;
        for (double x : v) h -= x * std::log(x);
        return h;
    });

    Tensor h({4}, {0.5f, 1.5f, 2.5f, -1.0f}, true);
    dbs::backward(ops::sum(ops::hinge(h, 1.0)));
    EXPECT_EQ(std::vector<float>(h.grad().begin(), h.grad().end()), (std::vector<float>{0, 1, 1, 0}));

    Tensor host({3, 2}, random_values(6, rng), true);
    Tensor block({2, 2}, random_values(4, rng), true);
    auto weights = random_values(10, rng);
    dbs::backward(ops::weighted_sum(ops::insert_rows(host, block, 1), weights));
    EXPECT_FLOAT_EQ(host.grad()[0], weights[0]);
    EXPECT_FLOAT_EQ(block.grad()[0], weights[2]);
    EXPECT_FLOAT_EQ(block.grad()[3], weights[5]);
    EXPECT_FLOAT_EQ(host.grad()[2], weights[6]);
    EXPECT_FLOAT_EQ(host.grad()[5], weights[9]);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor w({3}, {1, -2, 3}, true);
    w.zero_grad();
    dbs::AdamState state(3, 0.5);
    dbs::adam_step(w, state);
    EXPECT_EQ(std::vector<float>(w.values().begin(), w.values().end()), (std::vector<float>{1, -2, 3}));
    EXPECT_EQ(state.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    Tensor w({1}, {0}, true);
    dbs::AdamState state(1, 0.5);
    dbs::backward(ops::sum(w));
    dbs::adam_step(w, state);
    // m_hat = 1, v_hat = 1: step = 0.5 / (1 + 1e-8).
    EXPECT_NEAR(w.item(), -0.5, 1e-6);
}

// With bias correction a constant gradient yields m_hat = g and v_hat = g^2 at
// every step, so the second step has the same size as the first.
TEST(Adam, IdenticalGradientsGiveEqualBiasCorrectedSteps) {
    Tensor w({1}, {0}, true);
    dbs::AdamState state(1, 0.5);
    dbs::backward(ops::sum(w));
    dbs::adam_step(w, state);
    const double first = -w.item();
    dbs::adam_step(w, state); // same gradient still attached
    const double second = -w.item() - first;
    EXPECT_NEAR(first, 0.5, 1e-6);
    EXPECT_NEAR(second, 0.5, 1e-6);
    EXPECT_LE(second, first + 1e-6);
    EXPECT_EQ(state.step_count, 2u);
}

TEST(Adam, MissingGradientIsContractError) {
    Tensor w({2}, {1, 2}, false);
    dbs::AdamState state(2, 0.5);
    EXPECT_THROW(dbs::adam_step(w, state), dbs::ContractError);
}

TEST(Adam, MomentLengthMustMatch) {
    Tensor w({2}, {1, 2}, true);
    w.zero_grad();
    dbs::AdamState state(3, 0.5);
    EXPECT_THROW(dbs::adam_step(w, state), dbs::ShapeError);
}

TEST(Rng, DerivedStreamsAreDistinctAndStable) {
    EXPECT_EQ(dbs::derive_seed(1, 2), dbs::derive_seed(1, 2));
    EXPECT_NE(dbs::derive_seed(1, 2), dbs::derive_seed(1, 3));
    EXPECT_NE(dbs::derive_seed(1, 2), dbs::derive_seed(2, 2));
    auto a = dbs::make_rng(9, 4), b = dbs::make_rng(9, 4);
    EXPECT_EQ(a(), b());
}

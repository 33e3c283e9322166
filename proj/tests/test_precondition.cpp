#include <gtest/gtest.h>

#include <cmath>

#include "moelora/grad.hpp"
#include "moelora/layer.hpp"
#include "moelora/matrix.hpp"
#include "moelora/precondition.hpp"
#include "moelora/rng.hpp"

using namespace moelora;

namespace {

Matrix orthonormal_columns(RngStream& rng, std::size_t rows, std::size_t cols) {
    Matrix q = seeded_gaussian(rng, rows, cols, 1.0);
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t p = 0; p < j; ++p) {
            double dot = 0.0;
            for (std::size_t i = 0; i < rows; ++i) dot += q(i, j) * q(i, p);
            for (std::size_t i = 0; i < rows; ++i) q(i, j) -= dot * q(i, p);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < rows; ++i) norm += q(i, j) * q(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < rows; ++i) q(i, j) /= norm;
    }
    return q;
}

PrecondConfig undamped() {
    PrecondConfig cfg;
    cfg.damping_rel = 0.0;
    return cfg;
}

} // namespace

TEST(PreconditionPair, OrthonormalColumnsLeaveGradAUntouched) {
    RngStream rng(1);
    LoraExpert e;
    e.b = orthonormal_columns(rng, 8, 3);          // b'b = I
    e.a = orthonormal_columns(rng, 6, 3);          // will transpose below
    e.a = transpose(e.a);                          // a a' = I as well
    const Matrix ga = seeded_gaussian(rng, 3, 6, 1.0);
    const Matrix gb = seeded_gaussian(rng, 8, 3, 1.0);
    const PrecondPair p = precondition_pair(e, ga, gb, undamped());
    EXPECT_LE(max_abs(p.a - ga), 1e-12);
    EXPECT_LE(max_abs(p.b - gb), 1e-12);
}

TEST(PreconditionPair, RankOneIsScalarDivision) {
    RngStream rng(2);
    LoraExpert e;
    e.b = seeded_gaussian(rng, 5, 1, 1.0);
    e.a = seeded_gaussian(rng, 1, 4, 1.0);
    double c = 0.0;
    for (std::size_t i = 0; i < 5; ++i) c += e.b(i, 0) * e.b(i, 0);
    const Matrix ga = seeded_gaussian(rng, 1, 4, 1.0);
    const Matrix gb = seeded_gaussian(rng, 5, 1, 1.0);
    const PrecondPair p = precondition_pair(e, ga, gb, undamped());
    EXPECT_LE(max_abs(p.a - (1.0 / c) * ga), 1e-13);
}

TEST(PreconditionPair, MatchesAdjugateOracleForRankTwo) {
    RngStream rng(3);
    LoraExpert e;
    e.b = seeded_gaussian(rng, 6, 2, 1.0);
    e.a = seeded_gaussian(rng, 2, 5, 1.0);
    const Matrix ga = seeded_gaussian(rng, 2, 5, 1.0);
    const Matrix gb = seeded_gaussian(rng, 6, 2, 1.0);

    const Matrix btb = mat_mul(transpose(e.b), e.b);
    const double det = btb(0, 0) * btb(1, 1) - btb(0, 1) * btb(1, 0);
    Matrix inv(2, 2);
    inv(0, 0) = btb(1, 1) / det;
    inv(1, 1) = btb(0, 0) / det;
    inv(0, 1) = -btb(0, 1) / det;
    inv(1, 0) = -btb(1, 0) / det;

    const PrecondPair p = precondition_pair(e, ga, gb, undamped());
    EXPECT_LE(max_abs(p.a - mat_mul(inv, ga)), 1e-11);
}

TEST(PreconditionPair, ZeroExpertNeedsDamping) {
    LoraExpert e;
    e.b = Matrix(5, 2);
    e.a = Matrix(2, 4);
    const Matrix ga(2, 4);
    const Matrix gb(5, 2);
    EXPECT_THROW(precondition_pair(e, ga, gb, undamped()), std::runtime_error);
    PrecondConfig damped;
    damped.damping_rel = 1e-6;
    EXPECT_NO_THROW(precondition_pair(e, ga, gb, damped));
}

TEST(PreconditionPair, ProjectionIdentityThroughB) {
    // With gA = g*s*b'*grad, b * pA equals g*s * P_col(b) * grad.
    RngStream rng(4);
    LoraExpert e;
    e.b = seeded_gaussian(rng, 7, 3, 1.0);
    e.a = seeded_gaussian(rng, 3, 6, 1.0);
    const Matrix grad = seeded_gaussian(rng, 7, 6, 1.0);
    const double gs = 0.35 * 2.0;
    const Matrix ga = gs * mat_mul(transpose(e.b), grad);
    const Matrix gb = gs * mat_mul(grad, transpose(e.a));
    const PrecondPair p = precondition_pair(e, ga, gb, undamped());

    const Matrix btb_inv = small_inverse(mat_mul(transpose(e.b), e.b), 0.0);
    const Matrix proj = mat_mul(e.b, mat_mul(btb_inv, transpose(e.b)));
    EXPECT_LE(max_abs(mat_mul(e.b, p.a) - gs * mat_mul(proj, grad)), 1e-9);
}

TEST(PreconditionPair, DampingMonotonicallyShrinks) {
    RngStream rng(5);
    LoraExpert e;
    e.b = seeded_gaussian(rng, 8, 3, 1.0);
    e.a = seeded_gaussian(rng, 3, 7, 1.0);
    const Matrix ga = seeded_gaussian(rng, 3, 7, 1.0);
    const Matrix gb = seeded_gaussian(rng, 8, 3, 1.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double rel : {0.0, 1e-6, 1e-3, 1e-1, 1.0, 10.0}) {
        PrecondConfig cfg;
        cfg.damping_rel = rel;
        const PrecondPair p = precondition_pair(e, ga, gb, cfg);
        const double norm = frobenius_norm(p.a);
        EXPECT_LE(norm, prev * (1.0 + 1e-12));
        prev = norm;
    }
}

TEST(IdealGateRescale, UnitGateLeavesUnchanged) {
    RngStream rng(6);
    PrecondPair p{seeded_gaussian(rng, 2, 3, 1.0), seeded_gaussian(rng, 4, 2, 1.0)};
    const PrecondPair q = ideal_gate_rescale(p, 1.0, 1e-4);
    EXPECT_EQ(q.a, p.a);
    EXPECT_EQ(q.b, p.b);
}

TEST(IdealGateRescale, QuarterGateQuadruples) {
    RngStream rng(7);
    PrecondPair p{seeded_gaussian(rng, 2, 3, 1.0), seeded_gaussian(rng, 4, 2, 1.0)};
    const PrecondPair q = ideal_gate_rescale(p, 0.25, 1e-4);
    EXPECT_LE(max_abs(q.a - 4.0 * p.a), 1e-14);
    EXPECT_LE(max_abs(q.b - 4.0 * p.b), 1e-14);
}

TEST(IdealGateRescale, FloorClampsTinyGates) {
    RngStream rng(8);
    PrecondPair p{seeded_gaussian(rng, 2, 2, 1.0), seeded_gaussian(rng, 2, 2, 1.0)};
    const PrecondPair q = ideal_gate_rescale(p, 1e-6, 1e-4);
    EXPECT_LE(max_abs(q.a - 1e4 * p.a), 1e-10 * max_abs(p.a) * 1e4 + 1e-12);
}

TEST(IdealGateRescale, NonPositiveGateThrows) {
    PrecondPair p{Matrix(1, 1), Matrix(1, 1)};
    EXPECT_THROW(ideal_gate_rescale(p, 0.0, 1e-4), std::domain_error);
    EXPECT_THROW(ideal_gate_rescale(p, -0.5, 1e-4), std::domain_error);
}

TEST(PreconditionBundle, DisabledPassesThroughBitwise) {
    RngStream rng(9);
    const LayerShape shape{6, 5, 3, 2, 2, 2.0};
    const MoeLoraLayer layer = init_layer(shape, rng, 0.4);
    GradBundle bundle = GradBundle::zeros(shape);
    bundle.a_grads[0] = seeded_gaussian(rng, 2, 5, 1.0);
    bundle.b_grads[0] = seeded_gaussian(rng, 6, 2, 1.0);
    PrecondConfig cfg;
    cfg.enabled = false;
    const GradBundle out = precondition_bundle(layer, bundle, {}, cfg, StepGranularity::kTokenMode);
    EXPECT_EQ(out.a_grads[0], bundle.a_grads[0]);
    EXPECT_EQ(out.b_grads[0], bundle.b_grads[0]);
}

TEST(PreconditionBundle, OrthonormalFactorsAreFixedPoint) {
    RngStream rng(10);
    const LayerShape shape{8, 6, 1, 1, 3, 3.0};
    MoeLoraLayer layer = init_layer(shape, rng, 0.4);
    layer.experts[0].b = orthonormal_columns(rng, 8, 3);
    layer.experts[0].a = transpose(orthonormal_columns(rng, 6, 3));
    GradBundle bundle = GradBundle::zeros(shape);
    bundle.a_grads[0] = seeded_gaussian(rng, 3, 6, 1.0);
    bundle.b_grads[0] = seeded_gaussian(rng, 8, 3, 1.0);
    const GradBundle out =
        precondition_bundle(layer, bundle, {1.0}, undamped(), StepGranularity::kMatrixMode);
    EXPECT_LE(max_abs(out.a_grads[0] - bundle.a_grads[0]), 1e-12);
    EXPECT_LE(max_abs(out.b_grads[0] - bundle.b_grads[0]), 1e-12);
}

TEST(PreconditionBundle, IdealRescaleDoublesForHalfGates) {
    RngStream rng(11);
    const LayerShape shape{6, 5, 2, 2, 2, 2.0};
    const MoeLoraLayer layer = init_layer(shape, rng, 0.5);
    GradBundle bundle = GradBundle::zeros(shape);
    for (int i = 0; i < 2; ++i) {
        bundle.a_grads[i] = seeded_gaussian(rng, 2, 5, 1.0);
        bundle.b_grads[i] = seeded_gaussian(rng, 6, 2, 1.0);
    }
    PrecondConfig off = undamped();
    PrecondConfig on = undamped();
    on.ideal_gate_rescale = true;
    const std::vector<double> gates{0.5, 0.5};
    const GradBundle base = precondition_bundle(layer, bundle, gates, off, StepGranularity::kMatrixMode);
    const GradBundle scaled = precondition_bundle(layer, bundle, gates, on, StepGranularity::kMatrixMode);
    for (int i = 0; i < 2; ++i) {
        EXPECT_LE(max_abs(scaled.a_grads[i] - 2.0 * base.a_grads[i]),
                  1e-12 * (1.0 + max_abs(base.a_grads[i])));
        EXPECT_LE(max_abs(scaled.b_grads[i] - 2.0 * base.b_grads[i]),
                  1e-12 * (1.0 + max_abs(base.b_grads[i])));
    }
}

TEST(PreconditionBundle, IdealRescaleRejectsTokenMode) {
    RngStream rng(12);
    const LayerShape shape{6, 5, 2, 1, 2, 2.0};
    const MoeLoraLayer layer = init_layer(shape, rng, 0.5);
    GradBundle bundle = GradBundle::zeros(shape);
    PrecondConfig cfg = undamped();
    cfg.ideal_gate_rescale = true;
    EXPECT_THROW(precondition_bundle(layer, bundle, {0.5, 0.5}, cfg, StepGranularity::kTokenMode),
                 std::invalid_argument);
}

TEST(PreconditionBundle, RouterGradientPassesThrough) {
    RngStream rng(13);
    const LayerShape shape{6, 5, 2, 1, 2, 2.0};
    const MoeLoraLayer layer = init_layer(shape, rng, 0.5);
    GradBundle bundle = GradBundle::zeros(shape);
    bundle.router_grad = seeded_gaussian(rng, 2, 5, 1.0);
    bundle.a_grads[0] = seeded_gaussian(rng, 2, 5, 1.0);
    bundle.b_grads[0] = seeded_gaussian(rng, 6, 2, 1.0);
    const GradBundle out =
        precondition_bundle(layer, bundle, {}, undamped(), StepGranularity::kTokenMode);
    EXPECT_EQ(out.router_grad, bundle.router_grad);
}

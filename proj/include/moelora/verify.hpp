#ifndef MOELORA_VERIFY_HPP
#define MOELORA_VERIFY_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moelora/csv.hpp"
#include "moelora/grad.hpp"
#include "moelora/layer.hpp"
#include "moelora/matrix.hpp"
#include "moelora/precondition.hpp"
#include "moelora/rng.hpp"

namespace moelora {

// --- projection matrices ------------------------------------------------------

struct ProjectionPair {
    Matrix col_b;  // m x m, projects onto the column space of b
    Matrix row_a;  // n x n, projects onto the row space of a
};

inline ProjectionPair projection_matrices(const LoraExpert& expert) {
    const Matrix btb = mat_mul(transpose(expert.b), expert.b);
    const Matrix aat = mat_mul(expert.a, transpose(expert.a));
    ProjectionPair p;
    p.col_b = mat_mul(expert.b, mat_mul(small_inverse(btb, 0.0), transpose(expert.b)));
    p.row_a = mat_mul(transpose(expert.a), mat_mul(small_inverse(aat, 0.0), expert.a));
    return p;
}

// --- first-order update predictions -------------------------------------------
//
// Both predictions carry the adapter scaling squared: the chain rule and the
// re-assembly each contribute one factor of s, so with alpha = r (s = 1) the
// coefficients are the bare squared / linear gate weights.

inline Matrix predicted_update_conventional(const MoeLoraLayer& layer,
                                            const std::vector<double>& gates,
                                            const Matrix& grad_x, double eta) {
    const LayerShape& shp = layer.shape;
    const double s2 = shp.scaling() * shp.scaling();
    Matrix out(shp.output_dim, shp.input_dim);
    for (std::size_t i = 0; i < shp.num_experts; ++i) {
        const double g = gates[i];
        if (g == 0.0) continue;
        const ProjectionPair p = projection_matrices(layer.experts[i]);
        out += (g * g) * (mat_mul(p.col_b, grad_x) + mat_mul(grad_x, p.row_a));
    }
    return (-eta * s2) * out;
}

inline Matrix predicted_update_rescaled(const MoeLoraLayer& layer,
                                        const std::vector<double>& gates,
                                        const Matrix& grad_x, double eta) {
    const LayerShape& shp = layer.shape;
    const double s2 = shp.scaling() * shp.scaling();
    Matrix out(shp.output_dim, shp.input_dim);
    for (std::size_t i = 0; i < shp.num_experts; ++i) {
        const double g = gates[i];
        if (g == 0.0) continue;
        const ProjectionPair p = projection_matrices(layer.experts[i]);
        out += g * (mat_mul(p.col_b, grad_x) + mat_mul(grad_x, p.row_a));
    }
    return (-eta * s2) * out;
}

// --- one measured preconditioned step ------------------------------------------

enum class UpdateRoute { kConventional, kSqrtDetach, kIdealRescale };

struct UpdateReport {
    Matrix observed;
    Matrix predicted;
    double first_order_residual = 0.0;  // ||observed - predicted||_F
    double eta = 0.0;
};

namespace detail {

inline GateOutput fixed_gates(const std::vector<double>& gates) {
    GateOutput g;
    g.gates = gates;
    g.logits.assign(gates.size(), 0.0);
    for (std::size_t i = 0; i < gates.size(); ++i)
        if (gates[i] > 0.0) g.selected.push_back(i);
    return g;
}

} // namespace detail

/// Runs one matrix-mode SGD step against the loss 0.5*||X - target||^2 with
/// fixed gates (router bypassed) and reports the observed effective-weight
/// change next to the matching first-order prediction.
///
/// The observed change is assembled from the applied parameter deltas,
/// dB*a + b*dA + dB*dA per expert, which equals the effective-weight
/// difference exactly but without the cancellation of subtracting two O(1)
/// matrices. For the sqrt-detach route the assembly weight is sqrt(g): that
/// is the optimizable-path coefficient of the detached forward, whose frozen
/// correction term cancels in the within-step difference.
inline UpdateReport measure_one_step(MoeLoraLayer& layer, const std::vector<double>& gates,
                                     const Matrix& target, double eta, UpdateRoute route,
                                     double damping_rel = 0.0) {
    const LayerShape& shp = layer.shape;
    const double s = shp.scaling();
    const Matrix x0 = effective_weight(layer, gates);
    if (target.rows() != x0.rows() || target.cols() != x0.cols())
        throw std::invalid_argument("measure_one_step: target must be m x n");
    const Matrix grad_x = x0 - target;

    const GateOutput gate = detail::fixed_gates(gates);
    const ForwardMode mode =
        route == UpdateRoute::kSqrtDetach ? ForwardMode::kSqrtDetach : ForwardMode::kStandard;
    const GradBundle bundle = matrix_mode_bundle(layer, gate, grad_x, mode);

    PrecondConfig cfg;
    cfg.enabled = true;
    cfg.damping_rel = damping_rel;
    cfg.ideal_gate_rescale = route == UpdateRoute::kIdealRescale;
    const GradBundle pre = precondition_bundle(layer, bundle, gates, cfg, StepGranularity::kMatrixMode);

    UpdateReport report;
    report.eta = eta;
    report.predicted = route == UpdateRoute::kConventional
                           ? predicted_update_conventional(layer, gates, grad_x, eta)
                           : predicted_update_rescaled(layer, gates, grad_x, eta);

    report.observed = Matrix(shp.output_dim, shp.input_dim);
    for (std::size_t ei : gate.selected) {
        LoraExpert& ex = layer.experts[ei];
        const Matrix da = (-eta) * pre.a_grads[ei];
        const Matrix db = (-eta) * pre.b_grads[ei];
        const double w = route == UpdateRoute::kSqrtDetach ? std::sqrt(gates[ei]) : gates[ei];
        report.observed += (w * s) * (mat_mul(db, ex.a) + mat_mul(ex.b, da) + mat_mul(db, da));
        ex.a += da;
        ex.b += db;
    }
    report.first_order_residual = frobenius_norm(report.observed - report.predicted);
    return report;
}

/// ||observed rescaled step|| / ||observed conventional step|| for uniform
/// gates 1/k over the first k experts. With k identical experts this is k to
/// first order.
inline double balanced_gate_ratio(const MoeLoraLayer& layer, std::size_t k, double eta,
                                  const Matrix& target) {
    if (k < 1 || k > layer.shape.num_experts)
        throw std::invalid_argument("balanced_gate_ratio: k out of range");
    std::vector<double> gates(layer.shape.num_experts, 0.0);
    for (std::size_t i = 0; i < k; ++i) gates[i] = 1.0 / static_cast<double>(k);
    MoeLoraLayer conv = layer;
    MoeLoraLayer resc = layer;
    const UpdateReport a = measure_one_step(conv, gates, target, eta, UpdateRoute::kConventional);
    const UpdateReport b = measure_one_step(resc, gates, target, eta, UpdateRoute::kIdealRescale);
    return frobenius_norm(b.observed) / frobenius_norm(a.observed);
}

// --- finite-difference gradient checking ---------------------------------------

struct GradCheckConfig {
    std::size_t samples_per_class = 200;
    std::size_t tokens = 4;
    double h_rel = 1e-5;         // h = h_rel * max(1, |theta|)
    double denom_floor = 1e-4;   // keeps the relative error meaningful near zero
    double target_sigma = 0.5;   // MSE targets sit this far from the base output
};

struct GradCheckReport {
    double max_rel_a = 0.0;
    double max_rel_b = 0.0;
    double max_rel_router = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // router coordinates whose bump flips a selection

    double max_rel() const { return std::max({max_rel_a, max_rel_b, max_rel_router}); }
    bool pass(double tol) const { return max_rel() <= tol; }
};

namespace detail {

/// Loss of the layer's current parameters with the base forward's routing
/// decisions frozen: the selected sets are pinned (a changed set returns
/// nullopt), and in sqrt-detach mode the detached constants (sqrt of the base
/// gates, base expert outputs) are taken from the base cache, which is
/// exactly what differentiating through a detach boundary holds fixed.
/// Re-derives the forward from scratch; never calls the backward path.
template <typename LossFn>
std::optional<double> frozen_loss(const MoeLoraLayer& layer, const ForwardCache& base,
                                  const Matrix& x_in, ForwardMode mode, bool router_moved,
                                  LossFn&& loss_of) {
    const LayerShape& shp = layer.shape;
    const double s = shp.scaling();
    Matrix y = mat_mul(layer.base, x_in);
    for (std::size_t t = 0; t < x_in.cols(); ++t) {
        const TokenCache& tc = base.tokens[t];
        const std::vector<double> x = x_in.column(t);
        std::vector<double> gates;
        if (router_moved) {
            const GateOutput fresh = route_token(layer, x);
            if (fresh.selected != tc.gate.selected) return std::nullopt;
            gates = fresh.gates;
        }
        for (std::size_t si = 0; si < tc.gate.selected.size(); ++si) {
            const std::size_t ei = tc.gate.selected[si];
            const double g0 = tc.gate.gates[ei];
            const double g = router_moved ? gates[ei] : g0;
            const LoraExpert& ex = layer.experts[ei];
            std::vector<double> u(shp.rank, 0.0);
            for (std::size_t i = 0; i < shp.rank; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < shp.input_dim; ++j) acc += ex.a(i, j) * x[j];
                u[i] = acc;
            }
            for (std::size_t i = 0; i < shp.output_dim; ++i) {
                double e = 0.0;
                for (std::size_t j = 0; j < shp.rank; ++j) e += ex.b(i, j) * u[j];
                e *= s;
                if (mode == ForwardMode::kStandard)
                    y(i, t) += g * e;
                else
                    y(i, t) += std::sqrt(g0) * e + (g - std::sqrt(g0)) * tc.expert_out[si][i];
            }
        }
    }
    return loss_of(y);
}

} // namespace detail

/// Central-difference check of the analytic expert and router gradients,
/// sampling coordinates uniformly per parameter class. Probe inputs and
/// targets are drawn from the stream; router coordinates whose perturbation
/// changes any token's selected set are excluded and counted.
inline GradCheckReport gradcheck_suite(const MoeLoraLayer& layer, ForwardMode mode, LossKind kind,
                                       const GradCheckConfig& cfg, RngStream& rng) {
    const LayerShape& shp = layer.shape;
    const Matrix x_in = seeded_gaussian(rng, shp.input_dim, cfg.tokens, 1.0);

    MoeLoraLayer work = layer;
    const ForwardResult base = mode == ForwardMode::kStandard ? forward_standard(work, x_in)
                                                              : forward_sqrt_detach(work, x_in);

    Matrix target;
    std::vector<std::size_t> labels;
    if (kind == LossKind::kSoftmaxXent) {
        labels.resize(cfg.tokens);
        for (std::size_t t = 0; t < cfg.tokens; ++t)
            labels[t] = static_cast<std::size_t>(rng.next_u64() % shp.output_dim);
    } else {
        target = base.output + seeded_gaussian(rng, shp.output_dim, cfg.tokens, cfg.target_sigma);
    }

    const auto raw_loss = [&](const Matrix& y) -> double {
        switch (kind) {
            case LossKind::kMseMatrix: return mse_matrix_loss(y, target).loss;
            case LossKind::kMseToken: return mse_token_loss(y, target).loss;
            default: return softmax_xent_loss(y, labels).loss;
        }
    };
    const auto raw_grad = [&](const Matrix& y) -> Matrix {
        switch (kind) {
            case LossKind::kMseMatrix: return mse_matrix_loss(y, target).grad;
            case LossKind::kMseToken: return mse_token_loss(y, target).grad;
            default: return softmax_xent_loss(y, labels).grad;
        }
    };

    // Check the unit-normalized objective: same relative agreement, but the
    // difference-quotient roundoff (proportional to the loss magnitude) stays
    // scale-independent, so the tolerance means the same thing at any width.
    const double norm = 1.0 / std::max(1.0, std::abs(raw_loss(base.output)));
    const auto loss_of = [&](const Matrix& y) -> double { return norm * raw_loss(y); };

    const Matrix dy = norm * raw_grad(base.output);
    const GradBundle analytic = backward_all(work, base.cache, dy);

    GradCheckReport report;
    const auto check_coord = [&](Matrix& param, const Matrix& analytic_grad, std::size_t i,
                                 std::size_t j, bool router_moved, double& max_rel) {
        const double theta = param(i, j);
        const double h = cfg.h_rel * std::max(1.0, std::abs(theta));
        param(i, j) = theta + h;
        const std::optional<double> up = detail::frozen_loss(work, base.cache, x_in, mode,
                                                             router_moved, loss_of);
        param(i, j) = theta - h;
        const std::optional<double> down = detail::frozen_loss(work, base.cache, x_in, mode,
                                                               router_moved, loss_of);
        param(i, j) = theta;
        if (!up || !down) {
            ++report.skipped;
            return;
        }
        const double fd = (*up - *down) / (2.0 * h);
        const double an = analytic_grad(i, j);
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), cfg.denom_floor});
        max_rel = std::max(max_rel, rel);
        ++report.checked;
    };

    for (std::size_t c = 0; c < cfg.samples_per_class; ++c) {
        {
            const std::size_t ei = rng.next_u64() % shp.num_experts;
            const std::size_t i = rng.next_u64() % shp.rank;
            const std::size_t j = rng.next_u64() % shp.input_dim;
            check_coord(work.experts[ei].a, analytic.a_grads[ei], i, j, false, report.max_rel_a);
        }
        {
            const std::size_t ei = rng.next_u64() % shp.num_experts;
            const std::size_t i = rng.next_u64() % shp.output_dim;
            const std::size_t j = rng.next_u64() % shp.rank;
            check_coord(work.experts[ei].b, analytic.b_grads[ei], i, j, false, report.max_rel_b);
        }
        {
            const std::size_t i = rng.next_u64() % shp.num_experts;
            const std::size_t j = rng.next_u64() % shp.input_dim;
            check_coord(work.router, analytic.router_grad, i, j, true, report.max_rel_router);
        }
    }
    return report;
}

// --- verification report rows ---------------------------------------------------

struct VerifyRow {
    std::string config_id;
    double residual = 0.0;   // measured value for this identity
    double tolerance = 0.0;  // bound it is compared against
    bool pass = false;
};

inline std::string verify_csv(const std::vector<VerifyRow>& rows) {
    std::ostringstream os;
    os << "config_id,residual,tolerance,pass\n";
    for (const VerifyRow& r : rows)
        os << r.config_id << ',' << g17(r.residual) << ',' << g17(r.tolerance) << ','
           << (r.pass ? 1 : 0) << '\n';
    return os.str();
}

inline std::string verify_text(const std::vector<VerifyRow>& rows) {
    std::ostringstream os;
    std::size_t failed = 0;
    for (const VerifyRow& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-44s  value %-13.6g  bound %-13.6g  %s\n",
                      r.config_id.c_str(), r.residual, r.tolerance, r.pass ? "pass" : "FAIL");
        os << buf;
        if (!r.pass) ++failed;
    }
    os << (failed ? std::to_string(failed) + " of " : "all ") << rows.size()
       << (failed ? " identities FAILED\n" : " identities pass\n");
    return os.str();
}

inline bool all_pass(const std::vector<VerifyRow>& rows) {
    for (const VerifyRow& r : rows)
        if (!r.pass) return false;
    return true;
}

// --- the full identity suite ------------------------------------------------------

namespace detail {

/// Random positive gates, bounded away from zero, over the first k experts.
inline std::vector<double> random_simplex_gates(std::size_t n, std::size_t k, RngStream& rng) {
    std::vector<double> gates(n, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        gates[i] = 0.5 + rng.next_uniform();
        sum += gates[i];
    }
    for (std::size_t i = 0; i < k; ++i) gates[i] /= sum;
    return gates;
}

/// Well-conditioned oracle layer: unit-scale experts, alpha = r unless given.
inline MoeLoraLayer oracle_layer(std::size_t m, std::size_t n, std::size_t num_experts,
                                 std::size_t top_k, std::size_t rank, RngStream& rng,
                                 double alpha = 0.0) {
    LayerShape shape{m, n, num_experts, top_k, rank, alpha > 0.0 ? alpha : static_cast<double>(rank)};
    MoeLoraLayer layer = init_layer(shape, rng, 1.0);
    return layer;
}

/// Random orthonormal n x n matrix via Gram-Schmidt on gaussian columns.
inline Matrix random_orthonormal(RngStream& rng, std::size_t n) {
    Matrix q = seeded_gaussian(rng, n, n, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t prev = 0; prev < j; ++prev) {
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += q(i, j) * q(i, prev);
            for (std::size_t i = 0; i < n; ++i) q(i, j) -= dot * q(i, prev);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
        norm = std::sqrt(norm);
        if (norm < 1e-12)
            throw std::runtime_error("random_orthonormal: degenerate column");
        for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
    }
    return q;
}

} // namespace detail

/// Identity checks for one configuration: second-order residual scaling and
/// the residual bound for the chosen route, under s = alpha/r.
inline void append_update_identity_rows(std::vector<VerifyRow>& rows, const std::string& id,
                                        const MoeLoraLayer& layer, const std::vector<double>& gates,
                                        const Matrix& target, UpdateRoute route) {
    MoeLoraLayer coarse = layer;
    MoeLoraLayer fine = layer;
    const UpdateReport at4 = measure_one_step(coarse, gates, target, 1e-4, route);
    const UpdateReport at5 = measure_one_step(fine, gates, target, 1e-5, route);
    const double ratio = at4.first_order_residual / at5.first_order_residual;
    rows.push_back({id + "_order", ratio, 90.0, ratio >= 90.0});
    const double bound = 1e-8 * frobenius_norm(at5.predicted) + 1e-12;
    rows.push_back({id + "_resid", at5.first_order_residual, bound,
                    at5.first_order_residual <= bound});
}

/// The full projection/identity verification suite: projector invariants,
/// squared-gate and linear-gate update identities over the (N, k, r) grid,
/// cross-route agreement, the adapter-scaling variant, balanced-gate ratios,
/// and reparameterization invariance of the preconditioner.
inline std::vector<VerifyRow> run_projection_suite(RngStream rng) {
    std::vector<VerifyRow> rows;
    const std::size_t m = 24, n = 18;

    // Projector invariants over random experts.
    {
        double sym = 0.0, idem = 0.0, range = 0.0;
        for (int trial = 0; trial < 50; ++trial) {
            LoraExpert e;
            e.b = seeded_gaussian(rng, m, 1 + trial % 4, 1.0);
            e.a = seeded_gaussian(rng, 1 + trial % 4, n, 1.0);
            const ProjectionPair p = projection_matrices(e);
            sym = std::max({sym, max_abs(p.col_b - transpose(p.col_b)),
                            max_abs(p.row_a - transpose(p.row_a))});
            idem = std::max({idem, max_abs(mat_mul(p.col_b, p.col_b) - p.col_b),
                             max_abs(mat_mul(p.row_a, p.row_a) - p.row_a)});
            range = std::max({range, max_abs(mat_mul(p.col_b, e.b) - e.b),
                              max_abs(mat_mul(e.a, p.row_a) - e.a)});
        }
        rows.push_back({"projector_symmetry", sym, 1e-10, sym <= 1e-10});
        rows.push_back({"projector_idempotence", idem, 1e-9, idem <= 1e-9});
        rows.push_back({"projector_range", range, 1e-9, range <= 1e-9});
    }

    // Update identities over the configuration grid, s = 1.
    for (std::size_t num_experts : {1u, 2u, 5u, 20u}) {
        for (std::size_t k : {1u, 2u, 10u}) {
            if (k > num_experts) continue;
            for (std::size_t rank : {1u, 2u, 4u}) {
                char tag[64];
                std::snprintf(tag, sizeof(tag), "N%zu_k%zu_r%zu", num_experts, k, rank);
                MoeLoraLayer layer = detail::oracle_layer(m, n, num_experts, k, rank, rng);
                const std::vector<double> gates =
                    detail::random_simplex_gates(num_experts, k, rng);
                const Matrix target =
                    effective_weight(layer, gates) - seeded_gaussian(rng, m, n, 0.02);

                append_update_identity_rows(rows, std::string("sq_gate_") + tag, layer, gates,
                                            target, UpdateRoute::kConventional);
                append_update_identity_rows(rows, std::string("lin_gate_sqrt_") + tag, layer, gates,
                                            target, UpdateRoute::kSqrtDetach);
                append_update_identity_rows(rows, std::string("lin_gate_ideal_") + tag, layer, gates,
                                            target, UpdateRoute::kIdealRescale);

                MoeLoraLayer sq_layer = layer;
                MoeLoraLayer id_layer = layer;
                const UpdateReport sq =
                    measure_one_step(sq_layer, gates, target, 1e-5, UpdateRoute::kSqrtDetach);
                const UpdateReport ideal =
                    measure_one_step(id_layer, gates, target, 1e-5, UpdateRoute::kIdealRescale);
                const double cross = frobenius_norm(sq.observed - ideal.observed);
                rows.push_back({std::string("cross_route_") + tag, cross, 1e-9, cross <= 1e-9});
            }
        }
    }

    // Adapter-scaling variant: alpha = 16, r = 4, so s^2 = 16 enters both sides.
    {
        MoeLoraLayer layer = detail::oracle_layer(m, n, 4, 2, 4, rng, 16.0);
        const std::vector<double> gates = detail::random_simplex_gates(4, 2, rng);
        const Matrix target = effective_weight(layer, gates) - seeded_gaussian(rng, m, n, 0.005);
        append_update_identity_rows(rows, "sq_gate_alpha16_N4_k2_r4", layer, gates, target,
                                    UpdateRoute::kConventional);
        append_update_identity_rows(rows, "lin_gate_sqrt_alpha16_N4_k2_r4", layer, gates, target,
                                    UpdateRoute::kSqrtDetach);
    }

    // Balanced-gate magnitude ratios with identical experts.
    for (std::size_t k : {1u, 2u, 5u, 10u}) {
        MoeLoraLayer layer = detail::oracle_layer(m, n, k, k, 3, rng);
        for (std::size_t i = 1; i < k; ++i) layer.experts[i] = layer.experts[0];
        std::vector<double> gates(k, 1.0 / static_cast<double>(k));
        const Matrix target = effective_weight(layer, gates) - seeded_gaussian(rng, m, n, 0.02);
        const double ratio = balanced_gate_ratio(layer, k, 1e-6, target);
        const double rel = std::abs(ratio / static_cast<double>(k) - 1.0);
        char tag[64];
        std::snprintf(tag, sizeof(tag), "balanced_ratio_k%zu", k);
        rows.push_back({tag, rel, 1e-3, rel <= 1e-3});
    }

    // Reparameterization invariance: (b, a) -> (bR, R^-1 a) leaves the
    // first-order update b*pA + pB*a unchanged.
    {
        double worst = 0.0;
        const std::size_t rank = 3;
        for (int trial = 0; trial < 20; ++trial) {
            LoraExpert e;
            e.b = seeded_gaussian(rng, m, rank, 1.0);
            e.a = seeded_gaussian(rng, rank, n, 1.0);
            const Matrix grad_x = seeded_gaussian(rng, m, n, 1.0);
            const Matrix grad_a = mat_mul(transpose(e.b), grad_x);
            const Matrix grad_b = mat_mul(grad_x, transpose(e.a));
            PrecondConfig cfg;
            cfg.damping_rel = 0.0;
            const PrecondPair p = precondition_pair(e, grad_a, grad_b, cfg);
            const Matrix update = mat_mul(e.b, p.a) + mat_mul(p.b, e.a);

            // R = Q1 * diag(spread) * Q2 with condition number <= 100.
            Matrix r_mat(rank, rank);
            {
                const Matrix q1 = detail::random_orthonormal(rng, rank);
                const Matrix q2 = detail::random_orthonormal(rng, rank);
                Matrix d(rank, rank);
                for (std::size_t i = 0; i < rank; ++i)
                    d(i, i) = 0.1 * std::pow(100.0, static_cast<double>(i) /
                                                        static_cast<double>(std::max<std::size_t>(rank - 1, 1)));
                r_mat = mat_mul(q1, mat_mul(d, q2));
            }
            const Matrix r_inv = small_inverse(r_mat, 0.0);
            LoraExpert re;
            re.b = mat_mul(e.b, r_mat);
            re.a = mat_mul(r_inv, e.a);
            const Matrix grad_a2 = mat_mul(transpose(re.b), grad_x);
            const Matrix grad_b2 = mat_mul(grad_x, transpose(re.a));
            const PrecondPair p2 = precondition_pair(re, grad_a2, grad_b2, cfg);
            const Matrix update2 = mat_mul(re.b, p2.a) + mat_mul(p2.b, re.a);
            worst = std::max(worst, frobenius_norm(update2 - update) / frobenius_norm(update));
        }
        rows.push_back({"reparameterization_invariance", worst, 1e-8, worst <= 1e-8});
    }

    return rows;
}

} // namespace moelora

#endif // MOELORA_VERIFY_HPP

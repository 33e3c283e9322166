#ifndef MOELORA_GRAD_HPP
#define MOELORA_GRAD_HPP

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "moelora/layer.hpp"
#include "moelora/matrix.hpp"

namespace moelora {

/// Per-step gradients. Experts that no token selected keep exactly zero
/// matrices.
struct GradBundle {
    std::vector<Matrix> a_grads;  // r x n each
    std::vector<Matrix> b_grads;  // m x r each
    Matrix router_grad;           // N x n
    std::optional<Matrix> x_grad; // matrix-mode full gradient, m x n

    static GradBundle zeros(const LayerShape& s) {
        GradBundle g;
        g.a_grads.assign(s.num_experts, Matrix(s.rank, s.input_dim));
        g.b_grads.assign(s.num_experts, Matrix(s.output_dim, s.rank));
        g.router_grad = Matrix(s.num_experts, s.input_dim);
        return g;
    }

    bool expert_touched(std::size_t i) const {
        for (double v : a_grads[i].data())
            if (v != 0.0) return true;
        for (double v : b_grads[i].data())
            if (v != 0.0) return true;
        return false;
    }
};

namespace detail {

inline void check_cache_dy(const MoeLoraLayer& layer, const ForwardCache& cache, const Matrix& dy) {
    if (dy.rows() != layer.shape.output_dim)
        throw std::invalid_argument("backward: dY rows must equal output_dim");
    if (dy.cols() != cache.tokens.size())
        throw std::invalid_argument("backward: dY token count does not match cache");
}

} // namespace detail

/// Expert gradients. Standard mode accumulates, per token t with gate g:
///   gB += g*s*delta_t*(a*x_t)'   and   gA += g*s*(b'*delta_t)*x_t';
/// sqrt-detach replaces g by sqrt(g). Tokens accumulate in column order.
inline GradBundle backward_expert(const MoeLoraLayer& layer, const ForwardCache& cache,
                                  const Matrix& dy) {
    detail::check_cache_dy(layer, cache, dy);
    require_finite(dy, "backward_expert");
    const LayerShape& shp = layer.shape;
    const double s = shp.scaling();
    GradBundle out = GradBundle::zeros(shp);

    for (std::size_t t = 0; t < cache.tokens.size(); ++t) {
        const TokenCache& tc = cache.tokens[t];
        for (std::size_t si = 0; si < tc.gate.selected.size(); ++si) {
            const std::size_t ei = tc.gate.selected[si];
            const double g = tc.gate.gates[ei];
            const double c = (cache.mode == ForwardMode::kSqrtDetach ? std::sqrt(g) : g) * s;
            const LoraExpert& ex = layer.experts[ei];
            Matrix& gb = out.b_grads[ei];
            Matrix& ga = out.a_grads[ei];
            const std::vector<double>& u = tc.hidden[si];
            for (std::size_t i = 0; i < shp.output_dim; ++i) {
                const double cd = c * dy(i, t);
                for (std::size_t j = 0; j < shp.rank; ++j)
                    gb(i, j) += cd * u[j];
            }
            // v = b' * delta_t
            std::vector<double> v(shp.rank, 0.0);
            for (std::size_t j = 0; j < shp.rank; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < shp.output_dim; ++i) acc += ex.b(i, j) * dy(i, t);
                v[j] = acc;
            }
            for (std::size_t i = 0; i < shp.rank; ++i) {
                const double cv = c * v[i];
                for (std::size_t j = 0; j < shp.input_dim; ++j)
                    ga(i, j) += cv * cache.inputs(j, t);
            }
        }
    }
    return out;
}

/// Router gradient through the restricted softmax. Both forward modes yield
/// the same value: the gate path's derivative is the cached expert output e
/// in either decomposition.
inline Matrix backward_router(const MoeLoraLayer& layer, const ForwardCache& cache,
                              const Matrix& dy) {
    detail::check_cache_dy(layer, cache, dy);
    require_finite(dy, "backward_router");
    const LayerShape& shp = layer.shape;
    Matrix gwg(shp.num_experts, shp.input_dim);

    for (std::size_t t = 0; t < cache.tokens.size(); ++t) {
        const TokenCache& tc = cache.tokens[t];
        const std::size_t k = tc.gate.selected.size();
        std::vector<double> dg(k, 0.0);
        for (std::size_t si = 0; si < k; ++si) {
            double acc = 0.0;
            for (std::size_t i = 0; i < shp.output_dim; ++i) acc += dy(i, t) * tc.expert_out[si][i];
            dg[si] = acc;
        }
        // softmax Jacobian over the selected set: dl = g .* (dg - <g, dg>)
        double inner = 0.0;
        for (std::size_t si = 0; si < k; ++si) inner += tc.gate.gates[tc.gate.selected[si]] * dg[si];
        for (std::size_t si = 0; si < k; ++si) {
            const std::size_t ei = tc.gate.selected[si];
            const double dl = tc.gate.gates[ei] * (dg[si] - inner);
            for (std::size_t j = 0; j < shp.input_dim; ++j)
                gwg(ei, j) += dl * cache.inputs(j, t);
        }
    }
    return gwg;
}

/// Both expert and router parts in one pass.
inline GradBundle backward_all(const MoeLoraLayer& layer, const ForwardCache& cache,
                               const Matrix& dy) {
    GradBundle out = backward_expert(layer, cache, dy);
    out.router_grad = backward_router(layer, cache, dy);
    return out;
}

// --- losses ------------------------------------------------------------------

enum class LossKind { kMseMatrix, kMseToken, kSoftmaxXent };

struct LossResult {
    double loss = 0.0;
    Matrix grad;  // dL/dprediction, same shape as prediction
};

/// 0.5 * ||P - T||_F^2; grad = P - T.
inline LossResult mse_matrix_loss(const Matrix& prediction, const Matrix& target) {
    if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
        throw std::invalid_argument("mse_matrix_loss: shape mismatch");
    LossResult r;
    r.grad = prediction - target;
    double acc = 0.0;
    for (double v : r.grad.data()) acc += v * v;
    r.loss = 0.5 * acc;
    return r;
}

/// Mean over tokens (columns) of 0.5 * ||p_t - t_t||^2.
inline LossResult mse_token_loss(const Matrix& prediction, const Matrix& target) {
    if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
        throw std::invalid_argument("mse_token_loss: shape mismatch");
    if (prediction.cols() == 0)
        throw std::invalid_argument("mse_token_loss: no tokens");
    const double inv_t = 1.0 / static_cast<double>(prediction.cols());
    LossResult r;
    r.grad = prediction - target;
    double acc = 0.0;
    for (double v : r.grad.data()) acc += v * v;
    r.loss = 0.5 * acc * inv_t;
    r.grad *= inv_t;
    return r;
}

/// Mean cross-entropy over tokens; grad column t is softmax(p_t) - onehot.
inline LossResult softmax_xent_loss(const Matrix& prediction, const std::vector<std::size_t>& labels) {
    if (labels.size() != prediction.cols())
        throw std::invalid_argument("softmax_xent_loss: one label per token required");
    if (prediction.cols() == 0)
        throw std::invalid_argument("softmax_xent_loss: no tokens");
    const double inv_t = 1.0 / static_cast<double>(prediction.cols());
    LossResult r;
    r.grad = Matrix(prediction.rows(), prediction.cols());
    double acc = 0.0;
    for (std::size_t t = 0; t < prediction.cols(); ++t) {
        if (labels[t] >= prediction.rows())
            throw std::invalid_argument("softmax_xent_loss: label out of range");
        const std::vector<double> p = softmax(prediction.column(t));
        acc += -std::log(p[labels[t]]);
        for (std::size_t i = 0; i < prediction.rows(); ++i)
            r.grad(i, t) = (p[i] - (i == labels[t] ? 1.0 : 0.0)) * inv_t;
    }
    r.loss = acc * inv_t;
    return r;
}

inline LossResult loss_and_grad(LossKind kind, const Matrix& prediction, const Matrix& target) {
    switch (kind) {
        case LossKind::kMseMatrix: return mse_matrix_loss(prediction, target);
        case LossKind::kMseToken: return mse_token_loss(prediction, target);
        default:
            throw std::invalid_argument("loss_and_grad: softmax-xent takes labels, not a target matrix");
    }
}

/// For losses of the form L(X * X_in): full gradient dL/dX = dY * X_in'.
/// For the pure matrix loss 0.5*||X - T||^2 the gradient is X - T directly.
inline Matrix full_matrix_grad(const Matrix& dy, const Matrix& x_in) {
    if (dy.cols() != x_in.cols())
        throw std::invalid_argument("full_matrix_grad: token counts disagree");
    return mat_mul(dy, transpose(x_in));
}

/// Matrix-mode gradients for a fixed gate vector: the step treats X =
/// W + sum g*s*b*a as the parameter and grad_x = dL/dX as upstream. The
/// router part needs the probe token the gates were routed from; leave it
/// empty to keep the router untouched (oracle mode).
inline GradBundle matrix_mode_bundle(const MoeLoraLayer& layer, const GateOutput& gate,
                                     const Matrix& grad_x, ForwardMode mode,
                                     const std::vector<double>& probe = {}) {
    const LayerShape& shp = layer.shape;
    if (grad_x.rows() != shp.output_dim || grad_x.cols() != shp.input_dim)
        throw std::invalid_argument("matrix_mode_bundle: grad_x must be m x n");
    require_finite(grad_x, "matrix_mode_bundle");
    const double s = shp.scaling();
    GradBundle out = GradBundle::zeros(shp);
    out.x_grad = grad_x;

    for (std::size_t ei : gate.selected) {
        const double g = gate.gates[ei];
        if (g == 0.0) continue;
        const double c = (mode == ForwardMode::kSqrtDetach ? std::sqrt(g) : g) * s;
        const LoraExpert& ex = layer.experts[ei];
        out.a_grads[ei] = c * mat_mul(transpose(ex.b), grad_x);
        out.b_grads[ei] = c * mat_mul(grad_x, transpose(ex.a));
    }

    if (!probe.empty()) {
        if (probe.size() != shp.input_dim)
            throw std::invalid_argument("matrix_mode_bundle: probe length mismatch");
        const std::size_t k = gate.selected.size();
        std::vector<double> dg(k, 0.0);
        for (std::size_t si = 0; si < k; ++si) {
            const LoraExpert& ex = layer.experts[gate.selected[si]];
            const Matrix ba = mat_mul(ex.b, ex.a);
            double acc = 0.0;
            for (std::size_t i = 0; i < ba.size(); ++i) acc += grad_x.data()[i] * ba.data()[i];
            dg[si] = s * acc;
        }
        double inner = 0.0;
        for (std::size_t si = 0; si < k; ++si) inner += gate.gates[gate.selected[si]] * dg[si];
        for (std::size_t si = 0; si < k; ++si) {
            const std::size_t ei = gate.selected[si];
            const double dl = gate.gates[ei] * (dg[si] - inner);
            for (std::size_t j = 0; j < shp.input_dim; ++j)
                out.router_grad(ei, j) += dl * probe[j];
        }
    }
    return out;
}

} // namespace moelora

#endif // MOELORA_GRAD_HPP

#ifndef MOELORA_OPTIMIZER_HPP
#define MOELORA_OPTIMIZER_HPP

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "moelora/grad.hpp"
#include "moelora/layer.hpp"
#include "moelora/matrix.hpp"
#include "moelora/precondition.hpp"

namespace moelora {

enum class OptKind { kSgd, kAdamW };
enum class Schedule { kLinearDecay, kConstant };

struct ParamGroup {
    double lr0 = 0.0;
    Schedule schedule = Schedule::kLinearDecay;
    std::optional<double> max_grad_norm;  // global-norm cap; nullopt = no clipping
};

struct AdamWParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 0.0;
};

struct AdamWState {
    Matrix m;
    Matrix v;
    long long t = 0;
};

/// lr0 * (1 - step/max_steps). step must not exceed max_steps.
inline double linear_lr(double lr0, std::size_t step, std::size_t max_steps) {
    if (step > max_steps)
        throw std::invalid_argument("linear_lr: step exceeds max_steps");
    if (max_steps == 0) return lr0;
    return lr0 * (1.0 - static_cast<double>(step) / static_cast<double>(max_steps));
}

inline double scheduled_lr(const ParamGroup& group, std::size_t step, std::size_t max_steps,
                           std::size_t warmup_steps = 0) {
    double lr = group.schedule == Schedule::kLinearDecay ? linear_lr(group.lr0, step, max_steps)
                                                         : group.lr0;
    if (warmup_steps > 0 && step < warmup_steps)
        lr *= static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    return lr;
}

inline double global_grad_norm(const std::vector<const Matrix*>& grads) {
    double acc = 0.0;
    for (const Matrix* g : grads)
        for (double v : g->data()) acc += v * v;
    return std::sqrt(acc);
}

/// Scales the set in place to global norm <= cap; returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Matrix*>& grads, double cap) {
    if (!(cap > 0.0))
        throw std::invalid_argument("clip_grad_norm: cap must be positive");
    double acc = 0.0;
    for (Matrix* g : grads)
        for (double v : g->data()) acc += v * v;
    const double norm = std::sqrt(acc);
    if (norm > cap) {
        // multiply-then-divide: one rounding per entry, so cap 1 rescales
        // [[3,4]] to exactly [[0.6, 0.8]]
        for (Matrix* g : grads)
            for (double& v : g->data()) v = v * cap / norm;
    }
    return norm;
}

inline void sgd_step(Matrix& param, const Matrix& grad, double lr) {
    if (param.rows() != grad.rows() || param.cols() != grad.cols())
        throw std::invalid_argument("sgd_step: shape mismatch");
    require_finite(grad, "sgd_step");
    for (std::size_t i = 0; i < param.size(); ++i)
        param.data()[i] -= lr * grad.data()[i];
}

/// AdamW with bias correction and decoupled weight decay. Decay is applied
/// after the gradient update as theta *= (1 - lr*lambda), so the decay-only
/// contraction factor is exact.
inline void adamw_step(Matrix& param, const Matrix& grad, AdamWState& state,
                       const AdamWParams& hp, double lr) {
    if (param.rows() != grad.rows() || param.cols() != grad.cols())
        throw std::invalid_argument("adamw_step: shape mismatch");
    require_finite(grad, "adamw_step");
    if (state.t == 0) {
        state.m = Matrix(param.rows(), param.cols());
        state.v = Matrix(param.rows(), param.cols());
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.data()[i];
        double& m = state.m.data()[i];
        double& v = state.v.data()[i];
        m = hp.beta1 * m + (1.0 - hp.beta1) * g;
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        param.data()[i] -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
    }
    if (hp.weight_decay != 0.0) {
        const double factor = 1.0 - lr * hp.weight_decay;
        for (double& p : param.data()) p *= factor;
    }
}

struct StepReport {
    double expert_grad_norm = 0.0;        // raw, before preconditioning
    double router_grad_norm = 0.0;        // before clipping
    double lr_experts = 0.0;
    double lr_router = 0.0;
};

/// Owns optimizer state and the fixed step order: (1) precondition expert
/// gradients, (2) clip the router gradient, (3) schedule learning rates,
/// (4) apply updates. Preconditioning sees the raw gradient before any AdamW
/// moment accumulation; unselected experts' moments are left untouched.
class Optimizer {
public:
    Optimizer(OptKind kind, ParamGroup experts, ParamGroup router, AdamWParams adamw,
              PrecondConfig precond, std::size_t max_steps, std::size_t warmup_steps = 0)
        : kind_(kind), experts_(experts), router_(router), adamw_(adamw), precond_(precond),
          max_steps_(max_steps), warmup_(warmup_steps) {}

    StepReport step(MoeLoraLayer& layer, const GradBundle& bundle,
                    const std::vector<double>& gates, StepGranularity granularity,
                    std::size_t step_index) {
        const std::size_t n_exp = layer.experts.size();
        if (bundle.a_grads.size() != n_exp || bundle.b_grads.size() != n_exp)
            throw std::invalid_argument("optimizer step: bundle expert count mismatch");
        if (kind_ == OptKind::kAdamW && a_states_.empty()) {
            a_states_.resize(n_exp);
            b_states_.resize(n_exp);
        }

        StepReport report;
        {
            std::vector<const Matrix*> raw;
            raw.reserve(2 * n_exp);
            for (const Matrix& g : bundle.a_grads) raw.push_back(&g);
            for (const Matrix& g : bundle.b_grads) raw.push_back(&g);
            report.expert_grad_norm = global_grad_norm(raw);
        }

        const GradBundle pre = precondition_bundle(layer, bundle, gates, precond_, granularity);

        Matrix router_grad = pre.router_grad;
        if (router_.max_grad_norm)
            report.router_grad_norm = clip_grad_norm({&router_grad}, *router_.max_grad_norm);
        else
            report.router_grad_norm = global_grad_norm({&router_grad});

        report.lr_experts = scheduled_lr(experts_, step_index, max_steps_, warmup_);
        report.lr_router = scheduled_lr(router_, step_index, max_steps_, warmup_);

        for (std::size_t i = 0; i < n_exp; ++i) {
            if (!bundle.expert_touched(i)) continue;  // lazy: unselected state untouched
            if (kind_ == OptKind::kSgd) {
                sgd_step(layer.experts[i].a, pre.a_grads[i], report.lr_experts);
                sgd_step(layer.experts[i].b, pre.b_grads[i], report.lr_experts);
            } else {
                adamw_step(layer.experts[i].a, pre.a_grads[i], a_states_[i], adamw_, report.lr_experts);
                adamw_step(layer.experts[i].b, pre.b_grads[i], b_states_[i], adamw_, report.lr_experts);
            }
        }
        if (kind_ == OptKind::kSgd)
            sgd_step(layer.router, router_grad, report.lr_router);
        else
            adamw_step(layer.router, router_grad, router_state_, adamw_, report.lr_router);
        return report;
    }

    const std::vector<AdamWState>& a_states() const { return a_states_; }
    const std::vector<AdamWState>& b_states() const { return b_states_; }
    const AdamWState& router_state() const { return router_state_; }

private:
    OptKind kind_;
    ParamGroup experts_;
    ParamGroup router_;
    AdamWParams adamw_;
    PrecondConfig precond_;
    std::size_t max_steps_;
    std::size_t warmup_;
    std::vector<AdamWState> a_states_;
    std::vector<AdamWState> b_states_;
    AdamWState router_state_;
};

} // namespace moelora

#endif // MOELORA_OPTIMIZER_HPP

#ifndef MOELORA_PRECONDITION_HPP
#define MOELORA_PRECONDITION_HPP

#include <algorithm>
#include <stdexcept>
#include <utility>

#include "moelora/grad.hpp"
#include "moelora/layer.hpp"
#include "moelora/matrix.hpp"

namespace moelora {

struct PrecondConfig {
    bool enabled = true;
    double damping_rel = 1e-6;       // relative to mean diagonal of the r x r factor
    bool ideal_gate_rescale = false; // matrix-mode only
    double gate_floor = 1e-4;
};

enum class StepGranularity { kTokenMode, kMatrixMode };

namespace detail {

/// Scale-free damping: delta = rel * max(1, trace(M)/r).
inline double damping_for(const Matrix& factor, double rel) {
    if (rel == 0.0) return 0.0;
    const double mean_diag = trace(factor) / static_cast<double>(factor.rows());
    return rel * std::max(1.0, mean_diag);
}

} // namespace detail

struct PrecondPair {
    Matrix a;  // preconditioned gradient for a, r x n
    Matrix b;  // preconditioned gradient for b, m x r
};

/// pA = (b'b + dB*I)^-1 * gA and pB = gB * (aa' + dA*I)^-1. With zero damping
/// this is the projection-inducing rank-space rescaling; damping keeps it
/// defined near singular factors.
inline PrecondPair precondition_pair(const LoraExpert& expert, const Matrix& grad_a,
                                     const Matrix& grad_b, const PrecondConfig& cfg) {
    const Matrix btb = mat_mul(transpose(expert.b), expert.b);
    const Matrix aat = mat_mul(expert.a, transpose(expert.a));
    PrecondPair out;
    out.a = mat_mul(small_inverse(btb, detail::damping_for(btb, cfg.damping_rel)), grad_a);
    out.b = mat_mul(grad_b, small_inverse(aat, detail::damping_for(aat, cfg.damping_rel)));
    return out;
}

/// Divide both preconditioned gradients by max(gate, floor).
inline PrecondPair ideal_gate_rescale(PrecondPair pair, double gate, double floor) {
    if (!(gate > 0.0))
        throw std::domain_error("ideal_gate_rescale: gate must be positive");
    const double inv = 1.0 / std::max(gate, floor);
    pair.a *= inv;
    pair.b *= inv;
    return pair;
}

/// Applies precondition_pair per touched expert; in matrix-mode with
/// ideal_gate_rescale on, additionally divides by that step's gate. The
/// router gradient passes through untouched.
inline GradBundle precondition_bundle(const MoeLoraLayer& layer, const GradBundle& bundle,
                                      const std::vector<double>& gates, const PrecondConfig& cfg,
                                      StepGranularity granularity) {
    if (!cfg.enabled) return bundle;
    if (cfg.ideal_gate_rescale && granularity != StepGranularity::kMatrixMode)
        throw std::invalid_argument(
            "precondition_bundle: ideal gate rescale is defined for matrix-mode steps only");
    GradBundle out = bundle;
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
        if (!bundle.expert_touched(i)) continue;
        PrecondPair p = precondition_pair(layer.experts[i], bundle.a_grads[i], bundle.b_grads[i], cfg);
        if (cfg.ideal_gate_rescale) {
            if (gates.size() != layer.experts.size())
                throw std::invalid_argument("precondition_bundle: gate vector length mismatch");
            p = ideal_gate_rescale(std::move(p), gates[i], cfg.gate_floor);
        }
        out.a_grads[i] = std::move(p.a);
        out.b_grads[i] = std::move(p.b);
    }
    return out;
}

} // namespace moelora

#endif // MOELORA_PRECONDITION_HPP

#ifndef MOELORA_BENCH_HPP
#define MOELORA_BENCH_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelora/config.hpp"
#include "moelora/csv.hpp"
#include "moelora/grad.hpp"
#include "moelora/layer.hpp"
#include "moelora/matrix.hpp"
#include "moelora/optimizer.hpp"
#include "moelora/rng.hpp"

namespace moelora {

/// Synthetic desk-scale task. lowrank-recover drives the matrix-mode
/// objective 0.5*||effective_weight - (W + Delta)||_F^2 with the gates routed
/// from the mean-pooled probe; teacher-student trains token-mode against a
/// frozen teacher layer with a planted cluster-aligned router.
struct Task {
    TaskKind kind = TaskKind::kLowRankRecover;
    LayerShape shape;
    std::uint64_t data_seed = 0;

    // lowrank-recover
    Matrix base;    // the layer's frozen W, m x n
    Matrix target;  // W + Delta with ||Delta||_F = 1 (or W when planted rank 0)
    Matrix probe;   // probe tokens, n x P

    // teacher-student
    std::optional<MoeLoraLayer> teacher;
    Matrix cluster_centers;  // n x N
    Matrix eval_inputs;      // held-out tokens, n x E
    Matrix eval_targets;     // teacher outputs on eval_inputs, m x E
    std::size_t batch_tokens = 16;
    double cluster_noise = 0.3;
};

inline Task gen_lowrank_task(std::size_t m, std::size_t n, std::size_t num_experts,
                             std::size_t top_k, std::size_t rank, std::size_t planted_rank,
                             std::uint64_t seed, double alpha = 16.0) {
    if (planted_rank > std::min(m, n))
        throw std::invalid_argument("gen_lowrank_task: planted rank exceeds min(m, n)");
    if (planted_rank > num_experts * rank)
        throw std::invalid_argument(
            "gen_lowrank_task: planted rank exceeds the adapter capacity N*r");
    Task task;
    task.kind = TaskKind::kLowRankRecover;
    task.shape = LayerShape{m, n, num_experts, top_k, rank, alpha};
    task.shape.validate();
    task.data_seed = seed;

    RngStream rng = RngStream(seed).substream(101);
    task.base = seeded_gaussian(rng, m, n, 1.0 / std::sqrt(static_cast<double>(n)));
    Matrix delta(m, n);
    if (planted_rank > 0) {
        const Matrix u = seeded_gaussian(rng, m, planted_rank, 1.0);
        const Matrix v = seeded_gaussian(rng, planted_rank, n, 1.0);
        delta = mat_mul(u, v);
        delta *= 1.0 / frobenius_norm(delta);
    }
    task.target = task.base + delta;
    task.probe = seeded_gaussian(rng, n, 8, 1.0);
    return task;
}

inline Task gen_teacher_task(std::size_t m, std::size_t n, std::size_t num_experts,
                             std::size_t top_k, std::size_t rank, std::size_t tokens,
                             std::uint64_t seed, double alpha = 16.0) {
    if (tokens < 1)
        throw std::invalid_argument("gen_teacher_task: tokens must be >= 1");
    Task task;
    task.kind = TaskKind::kTeacherStudent;
    task.shape = LayerShape{m, n, num_experts, top_k, rank, alpha};
    task.shape.validate();
    task.data_seed = seed;
    task.batch_tokens = tokens;

    RngStream rng = RngStream(seed).substream(202);
    task.cluster_centers = seeded_gaussian(rng, n, num_experts, 1.0);

    MoeLoraLayer teacher = init_layer(task.shape, rng, 0.1);
    // Planted router: row i points along cluster i, scaled so the matched
    // logit is ~6 and cross logits stay small, which keeps routing peaked.
    for (std::size_t i = 0; i < num_experts; ++i) {
        double norm_sq = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            norm_sq += task.cluster_centers(j, i) * task.cluster_centers(j, i);
        const double scale = 6.0 / norm_sq;
        for (std::size_t j = 0; j < n; ++j)
            teacher.router(i, j) = scale * task.cluster_centers(j, i);
    }
    task.teacher = std::move(teacher);

    RngStream eval_rng = RngStream(seed).substream(303);
    const std::size_t eval_tokens = 64;
    task.eval_inputs = Matrix(n, eval_tokens);
    for (std::size_t t = 0; t < eval_tokens; ++t) {
        const std::size_t cluster = eval_rng.next_u64() % num_experts;
        for (std::size_t j = 0; j < n; ++j)
            task.eval_inputs(j, t) =
                task.cluster_centers(j, cluster) + task.cluster_noise * eval_rng.next_gaussian();
    }
    task.eval_targets = forward_standard(*task.teacher, task.eval_inputs).output;
    return task;
}

/// One row per training step; the CSV schema mirrors these fields in order.
struct RunRow {
    std::size_t step = 0;
    double train_loss = 0.0;
    double eval_loss = 0.0;
    double grad_norm_experts = 0.0;
    double grad_norm_router = 0.0;
    double lr_experts = 0.0;
    double lr_router = 0.0;
    double wall_ms = 0.0;
};

struct RunResult {
    std::vector<RunRow> rows;
    MoeLoraLayer layer;
    bool aborted = false;
    std::string diagnostic;
};

namespace detail {

inline Matrix sample_cluster_tokens(const Task& task, std::size_t count, RngStream& rng) {
    const std::size_t n = task.shape.input_dim;
    Matrix x(n, count);
    for (std::size_t t = 0; t < count; ++t) {
        const std::size_t cluster = rng.next_u64() % task.shape.num_experts;
        for (std::size_t j = 0; j < n; ++j)
            x(j, t) = task.cluster_centers(j, cluster) + task.cluster_noise * rng.next_gaussian();
    }
    return x;
}

} // namespace detail

/// Deterministic given (task, config): the layer init and batch stream derive
/// from config.seed. Evaluation runs at step 1 and every eval_every steps;
/// rows in between carry the latest evaluated value. A non-finite training
/// loss aborts with a diagnostic instead of writing garbage rows.
inline RunResult train_loop(const Task& task, const TrainConfig& cfg) {
    validate(cfg);
    const LayerShape shape = cfg.layer_shape();
    if (shape.output_dim != task.shape.output_dim || shape.input_dim != task.shape.input_dim ||
        shape.num_experts != task.shape.num_experts || shape.top_k != task.shape.top_k ||
        shape.rank != task.shape.rank)
        throw std::invalid_argument("train_loop: config dimensions do not match the task");
    if (cfg.task != task.kind)
        throw std::invalid_argument("train_loop: config task kind does not match the task");

    RunResult result;
    RngStream init_rng = RngStream(cfg.seed).substream(1);
    result.layer = init_layer(shape, init_rng, cfg.init_sigma);
    result.layer.mode = cfg.mode;
    if (task.kind == TaskKind::kLowRankRecover)
        result.layer.base = task.base;  // the objective is anchored to the task's W
    else
        result.layer.base = task.teacher->base;  // shared frozen backbone; the
                                                 // student learns adapters + routing

    Optimizer opt(cfg.optimizer, cfg.expert_group(), cfg.router_group(), cfg.adamw_params(),
                  cfg.precond_config(), cfg.max_steps, cfg.warmup_steps);
    RngStream data_rng = RngStream(cfg.seed).substream(2);

    MoeLoraLayer& layer = result.layer;
    double last_eval = 0.0;

    const auto eval_now = [&]() -> double {
        if (task.kind == TaskKind::kLowRankRecover) {
            const GateOutput gate = route_mean_pooled(layer, task.probe);
            return mse_matrix_loss(effective_weight(layer, gate.gates), task.target).loss;
        }
        return mse_token_loss(forward_standard(layer, task.eval_inputs).output, task.eval_targets)
            .loss;
    };

    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();

        double loss = 0.0;
        GradBundle bundle;
        std::vector<double> step_gates;
        StepGranularity granularity = StepGranularity::kTokenMode;

        if (task.kind == TaskKind::kLowRankRecover) {
            const std::vector<double> pooled = mean_pool(task.probe);
            const GateOutput gate = route_token(layer, pooled);
            const LossResult lr = mse_matrix_loss(effective_weight(layer, gate.gates), task.target);
            loss = lr.loss;
            bundle = matrix_mode_bundle(layer, gate, lr.grad, cfg.mode, pooled);
            step_gates = gate.gates;
            granularity = StepGranularity::kMatrixMode;
        } else {
            const Matrix x_in = detail::sample_cluster_tokens(task, cfg.batch_tokens, data_rng);
            const Matrix teacher_out = forward_standard(*task.teacher, x_in).output;
            const ForwardResult fwd = forward(layer, x_in);
            const LossResult lr = mse_token_loss(fwd.output, teacher_out);
            loss = lr.loss;
            bundle = backward_all(layer, fwd.cache, lr.grad);
        }

        if (!std::isfinite(loss)) {
            result.aborted = true;
            result.diagnostic = "non-finite training loss at step " + std::to_string(step);
            return result;
        }

        const StepReport report = opt.step(layer, bundle, step_gates, granularity, step - 1);
        if (step == 1 || step % cfg.eval_every == 0) last_eval = eval_now();

        const double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.rows.push_back({step, loss, last_eval, report.expert_grad_norm,
                               report.router_grad_norm, report.lr_experts, report.lr_router,
                               wall_ms});
    }
    return result;
}

// --- run records as CSV ---------------------------------------------------------

inline const char* kRunCsvHeader =
    "step,train_loss,eval_loss,grad_norm_experts,grad_norm_router,lr_experts,lr_router,wall_ms";

inline std::string run_csv(const std::vector<RunRow>& rows) {
    std::ostringstream os;
    os << kRunCsvHeader << '\n';
    for (const RunRow& r : rows)
        os << r.step << ',' << g17(r.train_loss) << ',' << g17(r.eval_loss) << ','
           << g17(r.grad_norm_experts) << ',' << g17(r.grad_norm_router) << ','
           << g17(r.lr_experts) << ',' << g17(r.lr_router) << ',' << g17(r.wall_ms) << '\n';
    return os.str();
}

inline double loss_at_step(const std::vector<RunRow>& rows, std::size_t step) {
    for (const RunRow& r : rows)
        if (r.step == step) return r.train_loss;
    throw std::out_of_range("loss_at_step: step " + std::to_string(step) + " beyond record");
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median: empty");
    std::sort(v.begin(), v.end());
    const std::size_t mid = v.size() / 2;
    return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

struct RunHandle {
    std::string name;
    std::uint64_t seed = 0;
    const std::vector<RunRow>* rows = nullptr;
};

struct CompareRow {
    std::string name;
    std::uint64_t seed = 0;
    double loss = 0.0;
    double delta_vs_first = 0.0;
};

/// Per-run loss at the requested step plus the delta against the first run.
inline std::vector<CompareRow> compare_runs(const std::vector<RunHandle>& runs,
                                            std::size_t at_step) {
    if (runs.empty()) throw std::invalid_argument("compare_runs: no runs");
    std::vector<CompareRow> out;
    const double first = loss_at_step(*runs.front().rows, at_step);
    for (const RunHandle& r : runs)
        out.push_back({r.name, r.seed, loss_at_step(*r.rows, at_step),
                       loss_at_step(*r.rows, at_step) - first});
    return out;
}

} // namespace moelora

#endif // MOELORA_BENCH_HPP

// Acceptance suite: runs every contract the artifact must satisfy, one
// pass/fail line per criterion, nonzero exit if any fails.
//
// usage: moelora_acceptance <path-to-moelora-cli> [workdir]
//
// The CLI path is needed for the determinism criterion, which re-runs real
// subcommands and byte-compares their outputs.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "moelora/moelora.hpp"

namespace fs = std::filesystem;
using namespace moelora;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int g_failures = 0;

void report(int id, const char* name, const Outcome& outcome, double seconds, double budget) {
    const bool ok = outcome.pass && seconds < budget;
    if (!ok) ++g_failures;
    std::printf("criterion %02d [%s] %s: %s  [%.2f s / %.0f s]\n", id, ok ? "PASS" : "FAIL", name,
                outcome.detail.c_str(), seconds, budget);
    std::fflush(stdout);
}

template <typename Fn>
void run_criterion(int id, const char* name, double budget_seconds, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
        outcome = fn();
    } catch (const std::exception& e) {
        outcome.pass = false;
        outcome.detail = std::string("exception: ") + e.what();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report(id, name, outcome, seconds, budget_seconds);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

MoeLoraLayer oracle_layer(RngStream& rng, std::size_t m, std::size_t n, std::size_t experts,
                          std::size_t k, std::size_t rank, double alpha = 0.0) {
    const LayerShape shape{m, n, experts, k, rank, alpha > 0 ? alpha : double(rank)};
    return init_layer(shape, rng, 1.0);
}

std::vector<double> simplex_gates(std::size_t n, std::size_t k, RngStream& rng) {
    std::vector<double> g(n, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        g[i] = 0.5 + rng.next_uniform();
        sum += g[i];
    }
    for (std::size_t i = 0; i < k; ++i) g[i] /= sum;
    return g;
}

// --- criterion 1: forward value equivalence ------------------------------------

Outcome forward_equivalence() {
    RngStream rng(101);
    double worst = 0.0;
    int pairs = 0;
    while (pairs < 100) {
        for (std::size_t experts : {1u, 5u, 20u}) {
            for (std::size_t k : {1u, 2u, 10u}) {
                if (k > experts) continue;
                for (std::size_t rank : {1u, 4u}) {
                    const LayerShape shape{12, 10, experts, k, rank, 16.0};
                    MoeLoraLayer layer = init_layer(shape, rng, 0.3);
                    layer.router *= 15.0;
                    const Matrix x = seeded_gaussian(rng, 10, 4, 1.0);
                    const Matrix std_out = forward_standard(layer, x).output;
                    const Matrix sqrt_out = forward_sqrt_detach(layer, x).output;
                    worst = std::max(worst, max_abs(std_out - sqrt_out));
                    ++pairs;
                }
            }
        }
    }
    return {worst <= 1e-12,
            "max entry |standard - sqrt-detach| " + fmt(worst) + " over " +
                std::to_string(pairs) + " pairs (tol 1e-12)"};
}

// --- criterion 2: gradient correctness ------------------------------------------

Outcome gradient_correctness() {
    RngStream rng(202);
    MoeLoraLayer layer = oracle_layer(rng, 16, 12, 8, 4, 3);
    {
        RngStream scale_rng(203);
        layer = init_layer(LayerShape{16, 12, 8, 4, 3, 3.0}, scale_rng, 0.4);
        layer.router *= 20.0;
    }
    GradCheckConfig cfg;
    cfg.samples_per_class = 200;
    double worst = 0.0;
    std::size_t skipped = 0;
    for (ForwardMode mode : {ForwardMode::kStandard, ForwardMode::kSqrtDetach}) {
        for (LossKind kind : {LossKind::kMseToken, LossKind::kSoftmaxXent}) {
            RngStream check_rng = RngStream(204).substream(std::size_t(mode) * 2 + std::size_t(kind));
            const GradCheckReport rep = gradcheck_suite(layer, mode, kind, cfg, check_rng);
            worst = std::max(worst, rep.max_rel());
            skipped += rep.skipped;
        }
    }
    return {worst <= 1e-6, "max relative error " + fmt(worst) +
                               " over 200 coords/class, both modes and losses (tol 1e-6), " +
                               std::to_string(skipped) + " selection-flip coords excluded"};
}

// --- criteria 3/4: update identities ---------------------------------------------

struct IdentityResult {
    double worst_ratio = 1e30;   // min over configs of residual(1e-4)/residual(1e-5)
    double worst_margin = 0.0;   // max over configs of residual / bound
    double worst_cross = 0.0;    // max cross-route disagreement (criterion 4)
    bool pass = true;
};

IdentityResult identity_scan(UpdateRoute route, bool with_cross) {
    IdentityResult out;
    RngStream rng(305 + int(route));
    for (std::size_t experts : {1u, 2u, 5u, 20u}) {
        const std::size_t k = std::min<std::size_t>(experts, experts >= 20 ? 10 : experts);
        const MoeLoraLayer proto = oracle_layer(rng, 24, 18, experts, k, 4);
        const std::vector<double> gates = simplex_gates(experts, k, rng);
        const Matrix target = effective_weight(proto, gates) - seeded_gaussian(rng, 24, 18, 0.02);

        MoeLoraLayer coarse = proto;
        MoeLoraLayer fine = proto;
        const UpdateReport r4 = measure_one_step(coarse, gates, target, 1e-4, route);
        const UpdateReport r5 = measure_one_step(fine, gates, target, 1e-5, route);
        const double ratio = r4.first_order_residual / r5.first_order_residual;
        const double bound = 1e-8 * frobenius_norm(r5.predicted) + 1e-12;
        out.worst_ratio = std::min(out.worst_ratio, ratio);
        out.worst_margin = std::max(out.worst_margin, r5.first_order_residual / bound);
        if (ratio < 90.0 || r5.first_order_residual > bound) out.pass = false;

        if (with_cross) {
            MoeLoraLayer sq = proto;
            MoeLoraLayer ideal = proto;
            const UpdateReport a = measure_one_step(sq, gates, target, 1e-5, UpdateRoute::kSqrtDetach);
            const UpdateReport b =
                measure_one_step(ideal, gates, target, 1e-5, UpdateRoute::kIdealRescale);
            const double cross = frobenius_norm(a.observed - b.observed);
            out.worst_cross = std::max(out.worst_cross, cross);
            if (cross > 1e-9) out.pass = false;
        }
    }
    return out;
}

Outcome squared_gate_identity() {
    const IdentityResult r = identity_scan(UpdateRoute::kConventional, false);
    return {r.pass, "eta-ratio >= " + fmt(r.worst_ratio) +
                        " (need 90), residual/bound <= " + fmt(r.worst_margin) +
                        " across N in {1,2,5,20}"};
}

Outcome linear_gate_identity() {
    const IdentityResult sqrt_route = identity_scan(UpdateRoute::kSqrtDetach, true);
    const IdentityResult ideal_route = identity_scan(UpdateRoute::kIdealRescale, false);
    const bool pass = sqrt_route.pass && ideal_route.pass;
    return {pass, "sqrt-detach ratio >= " + fmt(sqrt_route.worst_ratio) + ", ideal ratio >= " +
                      fmt(ideal_route.worst_ratio) + ", cross-route diff <= " +
                      fmt(sqrt_route.worst_cross) + " (tol 1e-9)"};
}

// --- criterion 5: balanced-gate ratio --------------------------------------------

Outcome balanced_ratio() {
    RngStream rng(505);
    double worst = 0.0;
    for (std::size_t k : {1u, 2u, 5u, 10u}) {
        MoeLoraLayer layer = oracle_layer(rng, 20, 16, k, k, 3);
        for (std::size_t i = 1; i < k; ++i) layer.experts[i] = layer.experts[0];
        std::vector<double> gates(k, 1.0 / double(k));
        const Matrix target = effective_weight(layer, gates) - seeded_gaussian(rng, 20, 16, 0.02);
        const double ratio = balanced_gate_ratio(layer, k, 1e-6, target);
        worst = std::max(worst, std::abs(ratio / double(k) - 1.0));
    }
    return {worst <= 1e-3,
            "max |ratio/k - 1| " + fmt(worst) + " for k in {1,2,5,10} (tol 1e-3)"};
}

// --- criteria 6/7: convergence and ablation trends --------------------------------

struct TrendRuns {
    // final and step-100 train losses per arm, indexed by seed
    std::vector<double> final_sgd, final_sqrt_sgd, final_rsgd, final_grsgd;
    std::vector<double> early_rsgd, early_grsgd;
    bool ran_baselines = false;
};

TrendRuns g_trend;

TrainConfig trend_config(PrecondChoice precond, ForwardMode mode, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.task = TaskKind::kLowRankRecover;
    cfg.m = 64;
    cfg.n = 64;
    cfg.num_experts = 20;
    cfg.top_k = 10;
    cfg.rank = 4;
    cfg.planted_rank = 8;
    cfg.alpha = 16.0;
    cfg.mode = mode;
    cfg.precond = precond;
    cfg.optimizer = OptKind::kSgd;
    cfg.lr_experts = 3e-3;
    cfg.lr_router = 3e-6;  // gate lr three orders below the expert lr
    cfg.max_steps = 500;
    cfg.eval_every = 100;
    cfg.seed = seed;
    return cfg;
}

Outcome convergence_trend() {
    const std::uint64_t base_seed = 1000;
    int wins = 0;
    for (std::size_t s = 0; s < 10; ++s) {
        const TrainConfig rsgd = trend_config(PrecondChoice::kRiemannian, ForwardMode::kStandard,
                                              base_seed + s);
        const TrainConfig grsgd = trend_config(PrecondChoice::kRiemannian,
                                               ForwardMode::kSqrtDetach, base_seed + s);
        const Task task = gen_lowrank_task(64, 64, 20, 10, 4, 8, base_seed + s, 16.0);
        const RunResult r1 = train_loop(task, rsgd);
        const RunResult r2 = train_loop(task, grsgd);
        if (r1.aborted || r2.aborted)
            return {false, "a run aborted: " + r1.diagnostic + r2.diagnostic};
        g_trend.final_rsgd.push_back(r1.rows.back().train_loss);
        g_trend.final_grsgd.push_back(r2.rows.back().train_loss);
        g_trend.early_rsgd.push_back(loss_at_step(r1.rows, 100));
        g_trend.early_grsgd.push_back(loss_at_step(r2.rows, 100));
        if (r2.rows.back().train_loss < r1.rows.back().train_loss) ++wins;
    }
    const double med_early_r = median(g_trend.early_rsgd);
    const double med_early_g = median(g_trend.early_grsgd);
    const bool pass = wins >= 8 && med_early_g < med_early_r;
    return {pass, "gRSGD beats RSGD on " + std::to_string(wins) +
                      "/10 seeds (need 8); median at step 100: gRSGD " + fmt(med_early_g) +
                      " vs RSGD " + fmt(med_early_r)};
}

Outcome ablation_trend() {
    const std::uint64_t base_seed = 1000;
    for (std::size_t s = 0; s < 10; ++s) {
        const TrainConfig sgd = trend_config(PrecondChoice::kNone, ForwardMode::kStandard,
                                             base_seed + s);
        const TrainConfig sqrt_sgd = trend_config(PrecondChoice::kNone, ForwardMode::kSqrtDetach,
                                                  base_seed + s);
        const Task task = gen_lowrank_task(64, 64, 20, 10, 4, 8, base_seed + s, 16.0);
        const RunResult r1 = train_loop(task, sgd);
        const RunResult r2 = train_loop(task, sqrt_sgd);
        if (r1.aborted || r2.aborted)
            return {false, "a run aborted: " + r1.diagnostic + r2.diagnostic};
        g_trend.final_sgd.push_back(r1.rows.back().train_loss);
        g_trend.final_sqrt_sgd.push_back(r2.rows.back().train_loss);
    }
    if (g_trend.final_rsgd.empty())
        return {false, "criterion 6 runs unavailable for the preconditioned arms"};
    const double improvement_precond =
        median(g_trend.final_rsgd) - median(g_trend.final_grsgd);
    const double improvement_plain =
        median(g_trend.final_sgd) - median(g_trend.final_sqrt_sgd);
    const bool pass = improvement_precond > 5.0 * improvement_plain;
    return {pass, "improvement(gRSGD over RSGD) " + fmt(improvement_precond) +
                      " vs 5 x improvement(sqrt-SGD over SGD) " + fmt(5.0 * improvement_plain)};
}

// --- criterion 8: reparameterization invariance -----------------------------------

Outcome reparameterization_invariance() {
    RngStream rng(808);
    const std::size_t m = 20, n = 16, rank = 4;
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        LoraExpert e;
        e.b = seeded_gaussian(rng, m, rank, 1.0);
        e.a = seeded_gaussian(rng, rank, n, 1.0);
        const Matrix grad_x = seeded_gaussian(rng, m, n, 1.0);
        PrecondConfig cfg;
        cfg.damping_rel = 0.0;

        const Matrix ga = mat_mul(transpose(e.b), grad_x);
        const Matrix gb = mat_mul(grad_x, transpose(e.a));
        const PrecondPair p = precondition_pair(e, ga, gb, cfg);
        const Matrix update = mat_mul(e.b, p.a) + mat_mul(p.b, e.a);

        const Matrix q1 = detail::random_orthonormal(rng, rank);
        const Matrix q2 = detail::random_orthonormal(rng, rank);
        Matrix d(rank, rank);
        for (std::size_t i = 0; i < rank; ++i)
            d(i, i) = 0.1 * std::pow(100.0, double(i) / double(rank - 1));
        const Matrix r_mat = mat_mul(q1, mat_mul(d, q2));
        const Matrix r_inv = small_inverse(r_mat, 0.0);

        LoraExpert re;
        re.b = mat_mul(e.b, r_mat);
        re.a = mat_mul(r_inv, e.a);
        const Matrix ga2 = mat_mul(transpose(re.b), grad_x);
        const Matrix gb2 = mat_mul(grad_x, transpose(re.a));
        const PrecondPair p2 = precondition_pair(re, ga2, gb2, cfg);
        const Matrix update2 = mat_mul(re.b, p2.a) + mat_mul(p2.b, re.a);
        worst = std::max(worst, frobenius_norm(update2 - update) / frobenius_norm(update));
    }
    return {worst <= 1e-8,
            "max relative drift " + fmt(worst) + " over 20 conditioned reparameterizations (tol 1e-8)"};
}

// --- criterion 9: optimizer conformance --------------------------------------------

Outcome optimizer_conformance() {
    std::ostringstream why;
    bool pass = true;

    {
        RngStream rng(909);
        Matrix p = seeded_gaussian(rng, 3, 3, 1.0);
        Matrix expect = p;
        AdamWState st;
        AdamWParams hp;
        hp.weight_decay = 0.01;
        const double lr = 2e-3;
        for (int i = 0; i < 5; ++i) {
            adamw_step(p, Matrix(3, 3), st, hp, lr);
            for (double& v : expect.data()) v *= 1.0 - lr * hp.weight_decay;
        }
        if (!(p == expect)) {
            pass = false;
            why << "decay-only contraction not exact; ";
        }
    }
    {
        Matrix g(1, 2);
        g(0, 0) = 3.0;
        g(0, 1) = 4.0;
        clip_grad_norm({&g}, 1.0);
        if (g(0, 0) != 0.6 || g(0, 1) != 0.8) {
            pass = false;
            why << "clip([[3,4]], 1) != [[0.6,0.8]]; ";
        }
    }
    if (linear_lr(3e-5, 500, 2000) != 2.25e-5) {
        pass = false;
        why << "linear_lr(3e-5,500,2000) != 2.25e-5; ";
    }
    {
        TrainConfig defaults;
        TrainConfig reparsed;
        apply_config_text(reparsed, echo_config(defaults));
        const bool ok = reparsed == defaults && defaults.lr_router == 3e-8 &&
                        defaults.clip_router == 1.0 && defaults.alpha == 16.0 &&
                        defaults.beta1 == 0.9 && defaults.beta2 == 0.999 &&
                        defaults.eps == 1e-6 && defaults.weight_decay == 0.0 &&
                        defaults.warmup_steps == 0;
        if (!ok) {
            pass = false;
            why << "default config does not echo the documented conventions; ";
        }
    }
    return {pass, pass ? "decay factor exact, clip and schedule arithmetic exact, defaults echoed"
                       : why.str()};
}

// --- criterion 10: determinism through the CLI --------------------------------------

std::string strip_wall_ms_column(const std::string& csv) {
    std::istringstream is(csv);
    std::ostringstream os;
    std::string line;
    while (std::getline(is, line)) {
        const std::size_t comma = line.rfind(',');
        os << line.substr(0, comma) << '\n';
    }
    return os.str();
}

Outcome determinism(const std::string& cli, const fs::path& work) {
    if (cli.empty()) return {false, "no CLI path supplied"};
    const auto run = [&](const std::string& args, const fs::path& log) {
        const std::string cmd = cli + " " + args + " > " + log.string() + " 2>&1";
        return std::system(cmd.c_str());
    };

    // verify subcommand: fully byte-identical report
    const fs::path va = work / "det_verify_a";
    const fs::path vb = work / "det_verify_b";
    fs::create_directories(va);
    fs::create_directories(vb);
    if (run("verify-projection --outdir " + va.string(), work / "verify_a.log") != 0)
        return {false, "verify-projection run failed"};
    if (run("verify-projection --outdir " + vb.string(), work / "verify_b.log") != 0)
        return {false, "verify-projection rerun failed"};
    const std::string report_a = read_text_file((va / "verify_report.csv").string());
    const std::string report_b = read_text_file((vb / "verify_report.csv").string());
    if (report_a != report_b) return {false, "verify_report.csv differs between reruns"};

    // train subcommand: byte-identical up to the measured wall_ms column
    const fs::path ta = work / "det_train_a";
    const fs::path tb = work / "det_train_b";
    fs::create_directories(ta);
    fs::create_directories(tb);
    const std::string train_args =
        "train --m 24 --n 24 --num_experts 6 --top_k 3 --rank 2 --planted_rank 3"
        " --precond riemannian --mode sqrt-detach --lr_experts 3e-3 --lr_router 3e-6"
        " --max_steps 60 --eval_every 10 --seed 77 --outdir ";
    if (run(train_args + ta.string(), work / "train_a.log") != 0)
        return {false, "train run failed"};
    if (run(train_args + tb.string(), work / "train_b.log") != 0)
        return {false, "train rerun failed"};
    const std::string csv_a = read_text_file((ta / "gRSGD_77.csv").string());
    const std::string csv_b = read_text_file((tb / "gRSGD_77.csv").string());
    if (strip_wall_ms_column(csv_a) != strip_wall_ms_column(csv_b))
        return {false, "train CSV differs between reruns outside the wall_ms column"};

    return {true,
            "verify report byte-identical; train CSV byte-identical in all columns except the "
            "measured wall_ms"};
}

} // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    const fs::path work = argc > 2 ? argv[2] : "acceptance_work";
    fs::create_directories(work);

    run_criterion(1, "forward value equivalence of the two modes", 5.0, forward_equivalence);
    run_criterion(2, "analytic gradients vs central differences", 60.0, gradient_correctness);
    run_criterion(3, "squared-gate projection identity", 30.0, squared_gate_identity);
    run_criterion(4, "linear-gate identity via both rescaling routes", 30.0, linear_gate_identity);
    run_criterion(5, "balanced-gate magnitude ratio equals k", 10.0, balanced_ratio);
    run_criterion(6, "preconditioned convergence trend (gRSGD vs RSGD)", 120.0, convergence_trend);
    run_criterion(7, "ablation: rescaling needs the preconditioner", 240.0, ablation_trend);
    run_criterion(8, "reparameterization invariance of the preconditioner", 10.0,
                  reparameterization_invariance);
    run_criterion(9, "optimizer conformance and config defaults", 1.0, optimizer_conformance);
    run_criterion(10, "byte determinism of train and verify outputs", 120.0,
                  [&] { return determinism(cli, work); });

    if (g_failures == 0) {
        std::printf("acceptance: all 10 criteria PASS\n");
        return 0;
    }
    std::printf("acceptance: %d criteria FAILED\n", g_failures);
    return 1;
}

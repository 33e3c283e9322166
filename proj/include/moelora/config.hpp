#ifndef MOELORA_CONFIG_HPP
#define MOELORA_CONFIG_HPP

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelora/csv.hpp"
#include "moelora/layer.hpp"
#include "moelora/optimizer.hpp"
#include "moelora/precondition.hpp"

namespace moelora {

enum class TaskKind { kLowRankRecover, kTeacherStudent };
enum class PrecondChoice { kNone, kRiemannian };

/// Full run configuration. The defaults are the production fine-tuning
/// conventions (expert lr 3e-5, gate lr 3e-8, gate-norm cap 1.0, alpha 16,
/// AdamW (0.9, 0.999, 1e-6), zero weight decay, linear schedule, no warmup);
/// the synthetic tasks are usually run with retuned learning rates passed
/// explicitly.
struct TrainConfig {
    TaskKind task = TaskKind::kLowRankRecover;
    std::size_t m = 64;
    std::size_t n = 64;
    std::size_t num_experts = 20;
    std::size_t top_k = 10;
    std::size_t rank = 4;
    std::size_t planted_rank = 8;   // lowrank-recover target rank
    std::size_t batch_tokens = 16;  // teacher-student tokens per step
    ForwardMode mode = ForwardMode::kStandard;
    PrecondChoice precond = PrecondChoice::kNone;
    bool ideal_rescale = false;
    OptKind optimizer = OptKind::kSgd;
    double lr_experts = 3e-5;
    double lr_router = 3e-8;
    Schedule schedule = Schedule::kLinearDecay;
    std::size_t max_steps = 500;
    std::size_t eval_every = 50;
    double clip_router = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 0.0;
    double alpha = 16.0;
    double init_sigma = 1e-3;
    double damping_rel = 1e-6;
    double gate_floor = 1e-4;
    std::size_t warmup_steps = 0;
    std::uint64_t seed = 42;
    std::string outdir = "out";

    bool operator==(const TrainConfig&) const = default;

    LayerShape layer_shape() const { return {m, n, num_experts, top_k, rank, alpha}; }

    PrecondConfig precond_config() const {
        PrecondConfig p;
        p.enabled = precond == PrecondChoice::kRiemannian;
        p.damping_rel = damping_rel;
        p.ideal_gate_rescale = ideal_rescale;
        p.gate_floor = gate_floor;
        return p;
    }

    AdamWParams adamw_params() const { return {beta1, beta2, eps, weight_decay}; }

    ParamGroup expert_group() const { return {lr_experts, schedule, std::nullopt}; }
    ParamGroup router_group() const { return {lr_router, schedule, clip_router}; }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing characters");
        return d;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: value for '" + key + "' is not a number: " + v);
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long d = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing characters");
        return d;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: value for '" + key + "' is not a non-negative integer: " + v);
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: value for '" + key + "' must be true/false: " + v);
}

} // namespace detail

/// Applies one key = value assignment; unknown keys and malformed values are
/// rejected.
inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_u64;
    if (key == "task") {
        if (value == "lowrank-recover") cfg.task = TaskKind::kLowRankRecover;
        else if (value == "teacher-student") cfg.task = TaskKind::kTeacherStudent;
        else throw std::invalid_argument("config: unknown task: " + value);
    } else if (key == "m") cfg.m = parse_u64(key, value);
    else if (key == "n") cfg.n = parse_u64(key, value);
    else if (key == "num_experts") cfg.num_experts = parse_u64(key, value);
    else if (key == "top_k") cfg.top_k = parse_u64(key, value);
    else if (key == "rank") cfg.rank = parse_u64(key, value);
    else if (key == "planted_rank") cfg.planted_rank = parse_u64(key, value);
    else if (key == "batch_tokens") cfg.batch_tokens = parse_u64(key, value);
    else if (key == "mode") {
        if (value == "standard") cfg.mode = ForwardMode::kStandard;
        else if (value == "sqrt-detach") cfg.mode = ForwardMode::kSqrtDetach;
        else throw std::invalid_argument("config: unknown mode: " + value);
    } else if (key == "precond") {
        if (value == "none") cfg.precond = PrecondChoice::kNone;
        else if (value == "riemannian") cfg.precond = PrecondChoice::kRiemannian;
        else throw std::invalid_argument("config: unknown precond: " + value);
    } else if (key == "ideal_rescale") cfg.ideal_rescale = parse_bool(key, value);
    else if (key == "optimizer") {
        if (value == "sgd") cfg.optimizer = OptKind::kSgd;
        else if (value == "adamw") cfg.optimizer = OptKind::kAdamW;
        else throw std::invalid_argument("config: unknown optimizer: " + value);
    } else if (key == "lr_experts") cfg.lr_experts = parse_double(key, value);
    else if (key == "lr_router") cfg.lr_router = parse_double(key, value);
    else if (key == "schedule") {
        if (value == "linear") cfg.schedule = Schedule::kLinearDecay;
        else if (value == "constant") cfg.schedule = Schedule::kConstant;
        else throw std::invalid_argument("config: unknown schedule: " + value);
    } else if (key == "max_steps") cfg.max_steps = parse_u64(key, value);
    else if (key == "eval_every") cfg.eval_every = parse_u64(key, value);
    else if (key == "clip_router") cfg.clip_router = parse_double(key, value);
    else if (key == "beta1") cfg.beta1 = parse_double(key, value);
    else if (key == "beta2") cfg.beta2 = parse_double(key, value);
    else if (key == "eps") cfg.eps = parse_double(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "alpha") cfg.alpha = parse_double(key, value);
    else if (key == "init_sigma") cfg.init_sigma = parse_double(key, value);
    else if (key == "damping_rel") cfg.damping_rel = parse_double(key, value);
    else if (key == "gate_floor") cfg.gate_floor = parse_double(key, value);
    else if (key == "warmup_steps") cfg.warmup_steps = parse_u64(key, value);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "outdir") cfg.outdir = value;
    else throw std::invalid_argument("config: unknown key: " + key);
}

/// Flat key = value text, one per line, '#' starts a comment.
inline void apply_config_text(TrainConfig& cfg, const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string t = detail::trim(line);
        if (t.empty()) continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " is not a key = value assignment");
        apply_config_entry(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    }
}

inline void apply_config_file(TrainConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    apply_config_text(cfg, ss.str());
}

inline void validate(const TrainConfig& cfg) {
    cfg.layer_shape().validate();
    if (cfg.planted_rank > std::min(cfg.m, cfg.n))
        throw std::invalid_argument("config: planted_rank exceeds min(m, n)");
    if (cfg.batch_tokens < 1)
        throw std::invalid_argument("config: batch_tokens must be >= 1");
    if (cfg.eval_every < 1)
        throw std::invalid_argument("config: eval_every must be >= 1");
    if (!(cfg.clip_router > 0.0))
        throw std::invalid_argument("config: clip_router must be positive");
    if (!(cfg.lr_experts >= 0.0) || !(cfg.lr_router >= 0.0))
        throw std::invalid_argument("config: learning rates must be >= 0");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
        throw std::invalid_argument("config: betas must lie in [0, 1)");
    if (!(cfg.eps > 0.0))
        throw std::invalid_argument("config: eps must be positive");
    if (cfg.weight_decay < 0.0)
        throw std::invalid_argument("config: weight_decay must be >= 0");
    if (cfg.init_sigma < 0.0)
        throw std::invalid_argument("config: init_sigma must be >= 0");
    if (cfg.damping_rel < 0.0)
        throw std::invalid_argument("config: damping_rel must be >= 0");
    if (!(cfg.gate_floor > 0.0))
        throw std::invalid_argument("config: gate_floor must be positive");
    if (cfg.ideal_rescale) {
        if (cfg.precond != PrecondChoice::kRiemannian)
            throw std::invalid_argument("config: ideal_rescale requires precond = riemannian");
        if (cfg.mode != ForwardMode::kStandard)
            throw std::invalid_argument(
                "config: ideal_rescale and sqrt-detach both rescale by the gate; pick one");
        if (cfg.task != TaskKind::kLowRankRecover)
            throw std::invalid_argument("config: ideal_rescale is defined for matrix-mode tasks only");
    }
}

/// Canonical arm name: R marks Riemannian preconditioning, a leading g the
/// sqrt-detach gate rescaling, iR the ideal matrix-mode rescaling.
inline std::string arm_name(const TrainConfig& cfg) {
    const std::string base = cfg.optimizer == OptKind::kSgd ? "SGD" : "AdamW";
    if (cfg.precond == PrecondChoice::kNone)
        return cfg.mode == ForwardMode::kSqrtDetach ? "sqrt-" + base : base;
    if (cfg.ideal_rescale) return "iR" + base;
    return cfg.mode == ForwardMode::kSqrtDetach ? "gR" + base : "R" + base;
}

/// Serialized form; parsing it back reproduces the identical TrainConfig.
inline std::string echo_config(const TrainConfig& cfg) {
    std::ostringstream os;
    os << "task = " << (cfg.task == TaskKind::kLowRankRecover ? "lowrank-recover" : "teacher-student")
       << "\n";
    os << "m = " << cfg.m << "\n";
    os << "n = " << cfg.n << "\n";
    os << "num_experts = " << cfg.num_experts << "\n";
    os << "top_k = " << cfg.top_k << "\n";
    os << "rank = " << cfg.rank << "\n";
    os << "planted_rank = " << cfg.planted_rank << "\n";
    os << "batch_tokens = " << cfg.batch_tokens << "\n";
    os << "mode = " << (cfg.mode == ForwardMode::kStandard ? "standard" : "sqrt-detach") << "\n";
    os << "precond = " << (cfg.precond == PrecondChoice::kNone ? "none" : "riemannian") << "\n";
    os << "ideal_rescale = " << (cfg.ideal_rescale ? "true" : "false") << "\n";
    os << "optimizer = " << (cfg.optimizer == OptKind::kSgd ? "sgd" : "adamw") << "\n";
    os << "lr_experts = " << g17(cfg.lr_experts) << "\n";
    os << "lr_router = " << g17(cfg.lr_router) << "\n";
    os << "schedule = " << (cfg.schedule == Schedule::kLinearDecay ? "linear" : "constant") << "\n";
    os << "max_steps = " << cfg.max_steps << "\n";
    os << "eval_every = " << cfg.eval_every << "\n";
    os << "clip_router = " << g17(cfg.clip_router) << "\n";
    os << "beta1 = " << g17(cfg.beta1) << "\n";
    os << "beta2 = " << g17(cfg.beta2) << "\n";
    os << "eps = " << g17(cfg.eps) << "\n";
    os << "weight_decay = " << g17(cfg.weight_decay) << "\n";
    os << "alpha = " << g17(cfg.alpha) << "\n";
    os << "init_sigma = " << g17(cfg.init_sigma) << "\n";
    os << "damping_rel = " << g17(cfg.damping_rel) << "\n";
    os << "gate_floor = " << g17(cfg.gate_floor) << "\n";
    os << "warmup_steps = " << cfg.warmup_steps << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "outdir = " << cfg.outdir << "\n";
    return os.str();
}

} // namespace moelora

#endif // MOELORA_CONFIG_HPP

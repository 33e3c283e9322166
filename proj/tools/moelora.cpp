// moelora: train and verify mixture-of-low-rank-experts layers with
// Riemannian-preconditioned optimizers and gate-based gradient rescaling.
//
// Subcommands:
//   train              one training run; writes <outdir>/<arm>_<seed>.csv
//   gradcheck          finite-difference check of the analytic gradients
//   verify-projection  projection/update identity suite with CSV report
//   compare            four-arm convergence comparison over paired seeds
//   sweep              cartesian sweep over config keys (--sweep key=v1,v2)
//
// Configuration is flat "key = value" text (see README); flags of the form
// --key value override the file. MOELORA_OUTDIR is the outdir fallback.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "moelora/moelora.hpp"

namespace fs = std::filesystem;
using namespace moelora;

namespace {

int usage(std::ostream& os) {
    os << "usage: moelora <train|gradcheck|verify-projection|compare|sweep>\n"
          "               [--config FILE] [--KEY VALUE ...] [--sweep KEY=V1,V2,... ...]\n"
          "\n"
          "Config keys (defaults in parentheses): task (lowrank-recover), m (64), n (64),\n"
          "  num_experts (20), top_k (10), rank (4), planted_rank (8), batch_tokens (16),\n"
          "  mode (standard), precond (none), ideal_rescale (false), optimizer (sgd),\n"
          "  lr_experts (3e-05), lr_router (3e-08), schedule (linear), max_steps (500),\n"
          "  eval_every (50), clip_router (1), beta1 (0.9), beta2 (0.999), eps (1e-06),\n"
          "  weight_decay (0), alpha (16), init_sigma (0.001), damping_rel (1e-06),\n"
          "  gate_floor (0.0001), warmup_steps (0), seed (42), outdir (out)\n";
    return 2;
}

struct CliArgs {
    TrainConfig cfg;
    std::vector<std::pair<std::string, std::vector<std::string>>> sweeps;
};

CliArgs parse_cli(int argc, char** argv) {
    CliArgs out;
    if (const char* env = std::getenv("MOELORA_OUTDIR"); env && *env) out.cfg.outdir = env;

    // first pass: the config file, so flags override it.
    for (int i = 2; i + 1 < argc; i += 2) {
        if (std::strcmp(argv[i], "--config") == 0) apply_config_file(out.cfg, argv[i + 1]);
    }
    for (int i = 2; i < argc; i += 2) {
        const std::string flag = argv[i];
        if (flag.rfind("--", 0) != 0)
            throw std::invalid_argument("expected a --flag, got: " + flag);
        if (i + 1 >= argc)
            throw std::invalid_argument("flag " + flag + " is missing a value");
        const std::string value = argv[i + 1];
        const std::string key = flag.substr(2);
        if (key == "config") continue;
        if (key == "sweep") {
            const std::size_t eq = value.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("--sweep expects KEY=V1,V2,..., got: " + value);
            std::vector<std::string> values;
            std::string rest = value.substr(eq + 1);
            std::size_t pos = 0;
            while (pos <= rest.size()) {
                const std::size_t comma = rest.find(',', pos);
                values.push_back(rest.substr(pos, comma == std::string::npos ? std::string::npos
                                                                             : comma - pos));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
            if (values.empty())
                throw std::invalid_argument("--sweep needs at least one value");
            out.sweeps.emplace_back(value.substr(0, eq), values);
            continue;
        }
        apply_config_entry(out.cfg, key, value);
    }
    return out;
}

Task build_task(const TrainConfig& cfg) {
    if (cfg.task == TaskKind::kLowRankRecover)
        return gen_lowrank_task(cfg.m, cfg.n, cfg.num_experts, cfg.top_k, cfg.rank,
                                cfg.planted_rank, cfg.seed, cfg.alpha);
    return gen_teacher_task(cfg.m, cfg.n, cfg.num_experts, cfg.top_k, cfg.rank, cfg.batch_tokens,
                            cfg.seed, cfg.alpha);
}

void echo_and_save(const TrainConfig& cfg, const std::string& filename) {
    const std::string text = echo_config(cfg);
    std::cout << text;
    fs::create_directories(cfg.outdir);
    write_text_file((fs::path(cfg.outdir) / filename).string(), text);
}

std::string run_csv_path(const TrainConfig& cfg) {
    return (fs::path(cfg.outdir) / (arm_name(cfg) + "_" + std::to_string(cfg.seed) + ".csv"))
        .string();
}

/// Runs one configuration and writes its CSV; returns false on abort.
bool run_and_write(const Task& task, const TrainConfig& cfg, RunResult& result) {
    result = train_loop(task, cfg);
    write_text_file(run_csv_path(cfg), run_csv(result.rows));
    if (result.aborted) {
        std::cerr << "aborted: " << result.diagnostic << "\n";
        return false;
    }
    return true;
}

int cmd_train(const TrainConfig& cfg) {
    const std::string stem = arm_name(cfg) + "_" + std::to_string(cfg.seed);
    echo_and_save(cfg, stem + ".config");
    const Task task = build_task(cfg);
    RunResult result;
    const bool ok = run_and_write(task, cfg, result);
    save_layer(result.layer, (fs::path(cfg.outdir) / (stem + ".ckpt")).string());
    if (!result.rows.empty())
        std::cout << "run " << arm_name(cfg) << " seed " << cfg.seed << ": "
                  << result.rows.size() << " steps, final train loss "
                  << g17(result.rows.back().train_loss) << ", final eval loss "
                  << g17(result.rows.back().eval_loss) << "\n";
    std::cout << "wrote " << run_csv_path(cfg) << "\n";
    return ok ? 0 : 1;
}

int cmd_gradcheck(const TrainConfig& cfg) {
    echo_and_save(cfg, "resolved_config.txt");
    // Test-scaled layer: unit-ish expert matrices and a spread-out router so
    // every gradient class is well above the comparison floor.
    RngStream rng(cfg.seed);
    MoeLoraLayer layer = init_layer(cfg.layer_shape(), rng, 0.4);
    layer.router *= 20.0;

    GradCheckConfig gc;
    gc.samples_per_class = 200;
    const double tol = 1e-6;

    std::vector<VerifyRow> rows;
    for (ForwardMode mode : {ForwardMode::kStandard, ForwardMode::kSqrtDetach}) {
        for (LossKind kind : {LossKind::kMseToken, LossKind::kSoftmaxXent}) {
            RngStream check_rng = RngStream(cfg.seed).substream(17);
            const GradCheckReport rep = gradcheck_suite(layer, mode, kind, gc, check_rng);
            const std::string id = std::string("gradcheck_") +
                                   (mode == ForwardMode::kStandard ? "standard" : "sqrt-detach") +
                                   (kind == LossKind::kMseToken ? "_mse-token" : "_softmax-xent");
            rows.push_back({id + "_experts_a", rep.max_rel_a, tol, rep.max_rel_a <= tol});
            rows.push_back({id + "_experts_b", rep.max_rel_b, tol, rep.max_rel_b <= tol});
            rows.push_back({id + "_router", rep.max_rel_router, tol, rep.max_rel_router <= tol});
            std::cout << id << ": checked " << rep.checked << " coords, skipped " << rep.skipped
                      << " (selection flips), max rel err " << g17(rep.max_rel()) << "\n";
        }
    }
    write_text_file((fs::path(cfg.outdir) / "gradcheck_report.csv").string(), verify_csv(rows));
    std::cout << verify_text(rows);
    return all_pass(rows) ? 0 : 1;
}

int cmd_verify_projection(const TrainConfig& cfg) {
    echo_and_save(cfg, "resolved_config.txt");
    const std::vector<VerifyRow> rows = run_projection_suite(RngStream(cfg.seed));
    write_text_file((fs::path(cfg.outdir) / "verify_report.csv").string(), verify_csv(rows));
    write_text_file((fs::path(cfg.outdir) / "verify_report.txt").string(), verify_text(rows));
    std::cout << verify_text(rows);
    std::cout << "wrote " << (fs::path(cfg.outdir) / "verify_report.csv").string() << "\n";
    return all_pass(rows) ? 0 : 1;
}

TrainConfig arm_config(const TrainConfig& base, PrecondChoice precond, ForwardMode mode) {
    TrainConfig cfg = base;
    cfg.precond = precond;
    cfg.mode = mode;
    cfg.ideal_rescale = false;
    return cfg;
}

int cmd_compare(const TrainConfig& base, std::size_t num_seeds = 10) {
    echo_and_save(base, "resolved_config.txt");
    const std::vector<TrainConfig> arms{
        arm_config(base, PrecondChoice::kNone, ForwardMode::kStandard),
        arm_config(base, PrecondChoice::kNone, ForwardMode::kSqrtDetach),
        arm_config(base, PrecondChoice::kRiemannian, ForwardMode::kStandard),
        arm_config(base, PrecondChoice::kRiemannian, ForwardMode::kSqrtDetach),
    };
    const std::size_t early = std::min<std::size_t>(100, base.max_steps);

    std::ostringstream summary;
    summary << "arm,seed,loss_step" << early << ",loss_final\n";
    bool ok = true;
    std::cout << "arm        seed   loss@" << early << "        loss@final\n";
    std::map<std::string, std::vector<double>> early_by_arm, final_by_arm;
    for (const TrainConfig& arm : arms) {
        for (std::size_t s = 0; s < num_seeds; ++s) {
            TrainConfig cfg = arm;
            cfg.seed = base.seed + s;
            const Task task = build_task(cfg);
            RunResult result;
            if (!run_and_write(task, cfg, result)) {
                ok = false;
                continue;
            }
            const double at_early = loss_at_step(result.rows, early);
            const double at_final = result.rows.back().train_loss;
            early_by_arm[arm_name(cfg)].push_back(at_early);
            final_by_arm[arm_name(cfg)].push_back(at_final);
            summary << arm_name(cfg) << ',' << cfg.seed << ',' << g17(at_early) << ','
                    << g17(at_final) << '\n';
            std::printf("%-10s %-6zu %-14.6g %-14.6g\n", arm_name(cfg).c_str(), cfg.seed,
                        at_early, at_final);
        }
    }
    std::cout << "medians over " << num_seeds << " paired seeds:\n";
    for (const TrainConfig& arm : arms) {
        const std::string name = arm_name(arm);
        summary << name << ",median," << g17(median(early_by_arm[name])) << ','
                << g17(median(final_by_arm[name])) << '\n';
        std::printf("%-10s median %-14.6g %-14.6g\n", name.c_str(), median(early_by_arm[name]),
                    median(final_by_arm[name]));
    }
    write_text_file((fs::path(base.outdir) / "compare_summary.csv").string(), summary.str());
    std::cout << "wrote " << (fs::path(base.outdir) / "compare_summary.csv").string() << "\n";
    return ok ? 0 : 1;
}

int cmd_sweep(const CliArgs& args) {
    if (args.sweeps.empty()) {
        std::cerr << "sweep: no --sweep KEY=V1,V2,... given\n";
        return 2;
    }
    echo_and_save(args.cfg, "resolved_config.txt");
    std::vector<std::size_t> index(args.sweeps.size(), 0);
    std::ostringstream summary;
    summary << "cell,arm,seed,final_loss\n";
    bool ok = true;
    while (true) {
        TrainConfig cfg = args.cfg;
        std::string cell;
        for (std::size_t d = 0; d < args.sweeps.size(); ++d) {
            const std::string& key = args.sweeps[d].first;
            const std::string& value = args.sweeps[d].second[index[d]];
            apply_config_entry(cfg, key, value);
            cell += (d ? "_" : "") + key + "-" + value;
        }
        validate(cfg);
        const Task task = build_task(cfg);
        RunResult result = train_loop(task, cfg);
        const std::string name =
            arm_name(cfg) + "_" + cell + "_" + std::to_string(cfg.seed) + ".csv";
        write_text_file((fs::path(cfg.outdir) / name).string(), run_csv(result.rows));
        if (result.aborted) {
            std::cerr << "cell " << cell << " aborted: " << result.diagnostic << "\n";
            summary << cell << ',' << arm_name(cfg) << ',' << cfg.seed << ",nan\n";
            ok = false;
        } else {
            summary << cell << ',' << arm_name(cfg) << ',' << cfg.seed << ','
                    << g17(result.rows.empty() ? 0.0 : result.rows.back().train_loss) << '\n';
            std::cout << "cell " << cell << ": final loss "
                      << (result.rows.empty() ? std::string("n/a")
                                              : g17(result.rows.back().train_loss))
                      << "\n";
        }
        // advance the cartesian index
        std::size_t d = 0;
        for (; d < index.size(); ++d) {
            if (++index[d] < args.sweeps[d].second.size()) break;
            index[d] = 0;
        }
        if (d == index.size()) break;
    }
    write_text_file((fs::path(args.cfg.outdir) / "sweep_summary.csv").string(), summary.str());
    std::cout << "wrote " << (fs::path(args.cfg.outdir) / "sweep_summary.csv").string() << "\n";
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) return usage(std::cerr);
    const std::string sub = argv[1];
    if (sub != "train" && sub != "gradcheck" && sub != "verify-projection" && sub != "compare" &&
        sub != "sweep")
        return usage(std::cerr);

    try {
        CliArgs args = parse_cli(argc, argv);
        validate(args.cfg);
        fs::create_directories(args.cfg.outdir);
        if (sub == "train") return cmd_train(args.cfg);
        if (sub == "gradcheck") return cmd_gradcheck(args.cfg);
        if (sub == "verify-projection") return cmd_verify_projection(args.cfg);
        if (sub == "compare") return cmd_compare(args.cfg);
        return cmd_sweep(args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

#include "cli.hpp"

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "d3il/analysis.hpp"
#include "d3il/config.hpp"
#include "d3il/error.hpp"
#include "d3il/log.hpp"
#include "d3il/pipeline.hpp"

namespace d3il::cli {

namespace fs = std::filesystem;

fs::path resolve_output(const fs::path& output_dir) {
    const char* root = std::getenv("D3IL_OUTPUT_ROOT");
    if (root == nullptr || *root == '\0' || output_dir.is_absolute()) return output_dir;
    return fs::path(root) / output_dir;
}

namespace {

struct Options {
    std::string config_path;
    std::optional<std::string> profile;
    std::optional<std::string> method;
    std::vector<std::string> overrides;
    std::optional<std::string> output;
    std::optional<int> threads;
    bool quiet = false;

    // train-features
    bool resume = false;

    // eval
    bool random_init = false;
    std::string baseline;
    // analyze
    int n_per_set = 500;
    // ablate
    std::vector<std::string> cells;
    std::vector<std::uint64_t> seeds{0};
};

// each stage keeps its own copy so a later stage cannot hide the overrides an earlier one ran with
ExperimentConfig resolve(const Options& o, const std::string& stage) {
    auto overrides = o.overrides;
    if (o.method) overrides.push_back("method=\"" + *o.method + "\"");
    if (o.threads) overrides.push_back("threads=" + std::to_string(*o.threads));
    auto c = load_config(o.config_path, o.profile, overrides);
    if (o.output) c.output_dir = *o.output;
    c.output_dir = resolve_output(c.output_dir);
    c.validate();
    torch::set_num_threads(c.threads);
    write_resolved_config(c, c.output_dir, "resolved_config." + stage + ".json");
    return c;
}

void require_file(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) throw IoError("missing " + p.string() + " (" + hint + ")");
}

void require_sets(const RunLayout& l) {
    for (const char* s : {"SE", "SN", "TN"}) require_file(l.data() / s / "manifest.json", "run `collect` first");
}

int cmd_collect(const Options& o) {
    const auto c = resolve(o, "collect");
    const RunLayout l{c.output_dir};
    const auto sets = collect_sets(c);
    write_sets(sets, l.data());
    for (const auto* s : {&sets.se, &sets.sn, &sets.tn}) {
        std::cout << s->label().code() << " " << s->size() << " observations checksum " << s->checksum() << "\n";
    }
    return 0;
}

int cmd_train_features(const Options& o) {
    const auto c = resolve(o, "train-features");
    const RunLayout l{c.output_dir};
    require_sets(l);
    const auto sets = load_sets(l.data());
    if (c.method == Method::kD3il) {
        run_phase1(c, sets, l.features(), o.resume);
    } else {
        run_tpil(c, sets, l.features());
    }
    std::cout << "wrote " << l.feature_checkpoint(c.method).string() << "\n";
    return 0;
}

int cmd_train_policy(const Options& o) {
    const auto c = resolve(o, "train-policy");
    const RunLayout l{c.output_dir};
    require_sets(l);
    const auto ckpt = l.feature_checkpoint(c.method);
    require_file(ckpt, "run `train-features --method " + to_string(c.method) + "` first");
    const auto sets = load_sets(l.data());
    PolicyRun run;
    if (c.method == Method::kD3il) {
        auto model = load_feature_model(ckpt);
        run = run_phase2(c, model, sets, l.policy());
    } else {
        auto model = load_tpil(ckpt);
        run = run_phase2(c, model, sets, l.policy());
    }
    std::cout << "return " << run.final_eval.mean << " +- " << run.final_eval.stddev << " over " << c.phase2.n_eval
              << " episodes\n";
    return 0;
}

int cmd_eval(const Options& o) {
    const auto c = resolve(o, "eval");
    const RunLayout l{c.output_dir};
    EvalResult r;
    std::string what;
    const auto seed = stream_seed(c.seed, "eval.final");
    if (o.baseline == "random") {
        r = evaluate_random(c.target, c.phase2.n_eval, seed);
        what = "uniform-random baseline";
    } else if (o.baseline == "expert") {
        r = evaluate_expert(c.target, c.phase2.n_eval, seed);
        what = "scripted expert";
    } else if (!o.baseline.empty()) {
        throw ConfigError("unknown baseline '" + o.baseline + "' (expected random or expert)");
    } else if (o.random_init) {
        auto policy = init_policy(c.target.state_dim(), c.target.action_dim(), c.phase2_resolved());
        r = final_evaluation(c, policy);
        what = "random-init policy";
    } else {
        const auto path = l.policy() / "policy.pt";
        require_file(path, "run `train-policy` first");
        auto policy = load_policy(path);
        r = final_evaluation(c, policy);
        what = "learned policy";
    }
    std::cout << what << ": return " << r.mean << " +- " << r.stddev << " over " << r.returns.size()
              << " episodes\n";
    return 0;
}

int cmd_analyze(const Options& o) {
    const auto c = resolve(o, "analyze");
    const RunLayout l{c.output_dir};
    require_sets(l);
    const auto ckpt = l.feature_checkpoint(c.method);
    require_file(ckpt, "run `train-features --method " + to_string(c.method) + "` first");
    const auto sets = load_sets(l.data());
    const auto out = l.analysis() / to_string(c.method);
    const auto seed = stream_seed(c.seed, "analysis");

    FeatureDump dump;
    std::optional<RewardInspection> rewards;
    if (c.method == Method::kD3il) {
        auto model = load_feature_model(ckpt);
        dump = dump_features(model, sets, o.n_per_set, seed, ckpt.filename().string());
        const auto d_path = l.policy() / "d_rew.pt";
        if (fs::exists(d_path)) {
            auto d = load_reward_discriminator(d_path);
            rewards = reward_inspection(d3il_observation_reward(model, d),
                                        reward_probe_sets(model, sets, o.n_per_set, seed));
        }
    } else {
        auto model = load_tpil(ckpt);
        dump = dump_features(model, sets, o.n_per_set, ckpt.filename().string());
        std::vector<Observation> se, tn;
        for (int i = 0; i < o.n_per_set; ++i) {
            se.push_back(sets.se.at(i));
            tn.push_back(sets.tn.at(i));
        }
        model->eval();
        rewards = reward_inspection([model](const torch::Tensor& x) mutable { return tpil_reward(model, x); },
                                    {{"SE", std::move(se)}, {"TN", std::move(tn)}});
    }
    dump.write(out / "dump");
    const auto sep = separability(dump, seed);
    const auto emb = embed_2d(dump);
    write_embedding_csv(dump, emb, out / "embedding.csv");
    write_scatter_png(dump, emb, out / "embedding.png");

    nlohmann::json report{{"behavior_probe_accuracy", sep.behavior_probe_accuracy},
                          {"domain_probe_accuracy", sep.domain_probe_accuracy},
                          {"cluster_distance_ratio", sep.cluster_distance_ratio},
                          {"explained_ratio", {emb.explained_ratio(0), emb.explained_ratio(1)}}};
    if (rewards) {
        rewards->write_csv(out / "rewards.csv");
        report["mean_reward"] = rewards->mean_by_label;
    }
    std::ofstream(out / "report.json") << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_ablate(const Options& o) {
    const auto c = resolve(o, "ablate");
    AblationGrid grid{c, o.cells.empty() ? ablation_cell_names() : o.cells, o.seeds};
    for (const auto& cell : grid.cells) ablation_cell(c, cell);  // reject unknown toggles before any work
    const auto table = run_ablation(grid, c.output_dir / "ablation");
    std::cout << "cell                 mean      std\n";
    for (const auto& r : table.rows) {
        std::cout << r.cell << std::string(r.cell.size() < 20 ? 20 - r.cell.size() : 1, ' ') << " " << r.mean << "  "
                  << r.stddev << (r.numerical_fault ? "  (numerical fault: " + r.fault + ")" : "") << "\n";
    }
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"Domain-adaptive imitation learning from visual observations"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("-c,--config", o.config_path, "JSON config overlaid on the profile");
    app.add_option("--profile", o.profile, "desk or paper");
    app.add_option("--method", o.method, "d3il or tpil");
    app.add_option("--set", o.overrides, "key=value override, e.g. phase1.n_epoch_it=100");
    app.add_option("-o,--output", o.output, "output directory (relative paths honour D3IL_OUTPUT_ROOT)");
    app.add_option("--threads", o.threads, "intra-op threads");
    app.add_flag("-q,--quiet", o.quiet, "warnings and errors only");

    auto* collect = app.add_subcommand("collect", "collect O_SE, O_SN and O_TN");
    auto* train_features = app.add_subcommand("train-features", "phase 1 (or the TPIL encoder)");
    train_features->add_flag("--resume", o.resume, "continue phase 1 from its saved training state");
    auto* train_policy = app.add_subcommand("train-policy", "phase 2 on the target task");
    auto* eval = app.add_subcommand("eval", "evaluate a policy on the target task");
    eval->add_flag("--random-init", o.random_init, "evaluate a freshly initialized policy");
    eval->add_option("--baseline", o.baseline, "random or expert");
    auto* analyze = app.add_subcommand("analyze", "feature dump, separability, embedding plot and rewards");
    analyze->add_option("--n-per-set", o.n_per_set, "observations per labeled set")->check(CLI::PositiveNumber);
    auto* ablate = app.add_subcommand("ablate", "loss ladder, reward source and domain-encoder ablations");
    ablate->add_option("--cells", o.cells, "subset of cells (default: all)");
    ablate->add_option("--seeds", o.seeds, "root seeds (default: 0)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
    }
    set_log_level(o.quiet ? LogLevel::kWarn : LogLevel::kInfo);

    try {
        if (*collect) return cmd_collect(o);
        if (*train_features) return cmd_train_features(o);
        if (*train_policy) return cmd_train_policy(o);
        if (*eval) return cmd_eval(o);
        if (*analyze) return cmd_analyze(o);
        if (*ablate) return cmd_ablate(o);
    } catch (const NumericalFault& e) {
        std::cerr << "numerical fault in " << e.component() << ": " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
    }
    return static_cast<int>(ExitCode::kUnknown);
}

}  // namespace d3il::cli

#include "d3il/pipeline.hpp"

#include "d3il/error.hpp"
#include "d3il/log.hpp"

namespace d3il {

namespace fs = std::filesystem;

fs::path RunLayout::feature_checkpoint(Method m) const {
    return m == Method::kD3il ? features() / "feature_model.pt" : features() / "tpil_model.pt";
}

FeatureSets collect_sets(const ExperimentConfig& c) {
    c.validate();
    FeatureSets sets;
    sets.se = collect_set(c.source, c.data.expert_policy, c.data.n_demo, c.data_seed(kSE), kSE);
    sets.sn = collect_set(c.source, c.data.nonexpert_policy, c.data.n_demo, c.data_seed(kSN), kSN);
    sets.tn = collect_set(c.target, c.data.nonexpert_policy, c.data.n_demo, c.data_seed(kTN), kTN);
    sets.tl = init_tl_from_tn(sets.tn);
    return sets;
}

void write_sets(const FeatureSets& sets, const fs::path& data_dir) {
    write_set(sets.se, data_dir / "SE");
    write_set(sets.sn, data_dir / "SN");
    write_set(sets.tn, data_dir / "TN");
}

FeatureSets load_sets(const fs::path& data_dir) {
    FeatureSets sets;
    sets.se = read_set(data_dir / "SE");
    sets.sn = read_set(data_dir / "SN");
    sets.tn = read_set(data_dir / "TN");
    if (sets.se.label() != kSE || sets.sn.label() != kSN || sets.tn.label() != kTN) {
        throw IoError("dataset labels under " + data_dir.string() + " do not match their directories");
    }
    sets.tl = init_tl_from_tn(sets.tn);
    return sets;
}

FeatureModel run_phase1(const ExperimentConfig& c, const FeatureSets& sets, const fs::path& out_dir, bool resume) {
    c.validate();
    auto model = init_model(c.arch(), c.model_seed());
    train_feature_model(model, sets, c.phase1_resolved(), out_dir, resume);
    return model;
}

TpilModel run_tpil(const ExperimentConfig& c, const FeatureSets& sets, const fs::path& out_dir) {
    c.validate();
    auto model = init_tpil(c.arch(), c.model_seed());
    train_tpil(model, sets, c.tpil_resolved(), out_dir);
    return model;
}

EvalResult final_evaluation(const ExperimentConfig& c, ActorCritic& policy) {
    return evaluate_policy(policy, c.target, c.phase2.n_eval, stream_seed(c.seed, "eval.final"));
}

namespace {

PolicyRun finish(const ExperimentConfig& c, PolicyResult result) {
    PolicyRun run{std::move(result), {}};
    run.final_eval = final_evaluation(c, run.result.policy);
    log_info("final evaluation: " + std::to_string(run.final_eval.mean) + " +- " +
             std::to_string(run.final_eval.stddev) + " over " + std::to_string(c.phase2.n_eval) + " episodes");
    return run;
}

}  // namespace

PolicyRun run_phase2(const ExperimentConfig& c, FeatureModel& model, const FeatureSets& sets, const fs::path& out_dir) {
    c.validate();
    return finish(c, train_policy(model, c.target, sets, c.phase2_resolved(), out_dir));
}

PolicyRun run_phase2(const ExperimentConfig& c, TpilModel& model, const FeatureSets& sets, const fs::path& out_dir) {
    c.validate();
    return finish(c, train_policy(tpil_reward_model(model, sets), c.target, c.phase2_resolved(), out_dir));
}

}  // namespace d3il

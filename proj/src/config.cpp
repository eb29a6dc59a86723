#include "d3il/config.hpp"

#include <fstream>

#include "d3il/error.hpp"
#include "d3il/serialize.hpp"

namespace d3il {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Method m) { return m == Method::kD3il ? "d3il" : "tpil"; }

Method parse_method(const std::string& s) {
    if (s == "d3il") return Method::kD3il;
    if (s == "tpil") return Method::kTpil;
    throw ConfigError("unknown method '" + s + "' (expected d3il or tpil)");
}

void ExperimentConfig::validate() const {
    source.validate();
    target.validate();
    if (source.task_family != target.task_family) throw ConfigError("source and target task families differ");
    if (source.image_size != target.image_size) throw ConfigError("source and target image sizes differ");
    if (source.episode_length != target.episode_length) throw ConfigError("source and target episode lengths differ");
    if (source.domain_shift != DomainShift::kNone) throw ConfigError("the source task must be unshifted");
    if (data.n_demo <= 0 || data.n_demo % source.episode_length != 0) {
        throw ConfigError("data.n_demo must be a positive multiple of the episode length");
    }
    if (phase1.batch_per_set > data.n_demo) throw ConfigError("phase1.batch_per_set exceeds the set size");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    phase1.validate();
    phase2.validate();
    tpil.validate();
}

ArchConfig ExperimentConfig::arch() const {
    auto a = ArchConfig::table3(source.image_size);
    a.use_domain_encoders = use_domain_encoders;
    return a;
}

Phase1Config ExperimentConfig::phase1_resolved() const {
    auto p = phase1;
    p.seed = stream_seed(seed, "phase1");
    return p;
}

Phase2Config ExperimentConfig::phase2_resolved() const {
    auto p = phase2;
    p.seed = stream_seed(seed, "phase2");
    return p;
}

TpilConfig ExperimentConfig::tpil_resolved() const {
    auto p = tpil;
    p.seed = stream_seed(seed, "tpil");
    return p;
}

std::uint64_t ExperimentConfig::data_seed(const SetLabel& label) const {
    return stream_seed(seed, "data." + label.code());
}

std::uint64_t ExperimentConfig::model_seed() const { return stream_seed(seed, "model.init"); }

ExperimentConfig desk_profile() {
    ExperimentConfig c;
    c.profile = "desk";
    c.source.task_family = TaskFamily::kPendulumBalance;
    c.source.image_size = 16;
    c.source.episode_length = 100;
    c.target = c.source;
    c.target.domain_shift = DomainShift::kRecolor;
    c.target.shift_params.hue_degrees = 120.0;
    c.data.n_demo = 2000;
    c.phase1.n_epoch_it = 5000;
    c.phase1.discriminator_clip = 0.01;
    c.phase1.checkpoint_every = 1000;
    c.phase2.n_epoch_pol = 30;
    c.phase2.steps_per_epoch = 1000;
    c.phase2.n_update_d = 2;
    c.phase2.n_update_theta = 100;
    c.phase2.expert_pool = 2000;
    c.tpil.n_epoch = 5000;
    c.output_dir = "runs/desk";
    return c;
}

ExperimentConfig paper_profile() {
    ExperimentConfig c;
    c.profile = "paper";
    c.source.task_family = TaskFamily::kPendulumBalance;
    c.source.image_size = 32;
    c.source.episode_length = 1000;
    c.target = c.source;
    c.target.domain_shift = DomainShift::kRecolor;
    c.target.shift_params.hue_degrees = 120.0;
    c.data.n_demo = 10000;
    c.phase1.n_epoch_it = 50000;
    c.phase1.checkpoint_every = 5000;
    c.phase2.n_epoch_pol = 20;
    c.phase2.steps_per_epoch = 10000;
    c.phase2.n_update_d = 20;
    c.phase2.n_update_theta = 1000;
    c.phase2.expert_pool = 10000;
    c.tpil.n_epoch = 50000;
    c.output_dir = "runs/paper";
    return c;
}

ExperimentConfig profile_by_name(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper") return paper_profile();
    throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

namespace {

json adam_json(const AdamConfig& a) { return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}}; }

AdamConfig adam_from(const json& j) {
    return {j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>()};
}

json weights_json(const LossWeights& w) {
    return {{"feat_pred", w.feat_pred},   {"feat_adv", w.feat_adv},     {"img_adv", w.img_adv},
            {"img_recon", w.img_recon},   {"feat_recon", w.feat_recon}, {"img_cycle", w.img_cycle},
            {"feat_cycle", w.feat_cycle}, {"feat_sim", w.feat_sim},     {"feat_reg", w.feat_reg},
            {"c_norm_d", w.c_norm_d},     {"c_norm_b", w.c_norm_b}};
}

LossWeights weights_from(const json& j) {
    LossWeights w;
    w.feat_pred = j.at("feat_pred").get<double>();
    w.feat_adv = j.at("feat_adv").get<double>();
    w.img_adv = j.at("img_adv").get<double>();
    w.img_recon = j.at("img_recon").get<double>();
    w.feat_recon = j.at("feat_recon").get<double>();
    w.img_cycle = j.at("img_cycle").get<double>();
    w.feat_cycle = j.at("feat_cycle").get<double>();
    w.feat_sim = j.at("feat_sim").get<double>();
    w.feat_reg = j.at("feat_reg").get<double>();
    w.c_norm_d = j.at("c_norm_d").get<double>();
    w.c_norm_b = j.at("c_norm_b").get<double>();
    return w;
}

// Every key of `patch` must already exist in `base`; null clears optional blocks.
void check_known_keys(const json& base, const json& patch, const std::string& prefix) {
    if (!patch.is_object()) return;
    for (const auto& [k, v] : patch.items()) {
        const std::string path = prefix.empty() ? k : prefix + "." + k;
        if (!base.is_object() || !base.contains(k)) {
            if (path == "phase2.sparse_goal" || path.rfind("phase2.sparse_goal.", 0) == 0) continue;
            throw ConfigError("unknown configuration key '" + path + "'");
        }
        if (base.at(k).is_object()) check_known_keys(base.at(k), v, path);
    }
}

void from_full_json(const json& j, ExperimentConfig& c) {
    c.profile = j.at("profile").get<std::string>();
    c.method = parse_method(j.at("method").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.threads = j.at("threads").get<int>();
    c.source = j.at("task").at("source").get<EnvSpec>();
    c.target = j.at("task").at("target").get<EnvSpec>();

    const auto& d = j.at("data");
    c.data.n_demo = d.at("n_demo").get<int>();
    c.data.expert_policy = parse_collection_policy(d.at("expert_policy").get<std::string>());
    c.data.nonexpert_policy = parse_collection_policy(d.at("nonexpert_policy").get<std::string>());
    c.use_domain_encoders = j.at("model").at("use_domain_encoders").get<bool>();

    const auto& p1 = j.at("phase1");
    c.phase1.n_epoch_it = p1.at("n_epoch_it").get<int>();
    c.phase1.batch_per_set = p1.at("batch_per_set").get<int>();
    c.phase1.weights = weights_from(p1.at("weights"));
    c.phase1.optimizer = adam_from(p1.at("optimizer"));
    c.phase1.checkpoint_every = p1.at("checkpoint_every").get<int>();
    c.phase1.discriminator_clip = p1.at("discriminator_clip").get<double>();
    c.phase1.critic_gp_weight = p1.at("critic_gp_weight").get<double>();
    c.phase1.log_every = p1.at("log_every").get<int>();

    const auto& p2 = j.at("phase2");
    c.phase2.n_epoch_pol = p2.at("n_epoch_pol").get<int>();
    c.phase2.steps_per_epoch = p2.at("steps_per_epoch").get<int>();
    c.phase2.n_update_d = p2.at("n_update_d").get<int>();
    c.phase2.n_update_theta = p2.at("n_update_theta").get<int>();
    c.phase2.buffer_capacity = p2.at("buffer_capacity").get<std::size_t>();
    const auto& sac = p2.at("sac");
    c.phase2.sac.gamma = sac.at("gamma").get<double>();
    c.phase2.sac.rho = sac.at("rho").get<double>();
    c.phase2.sac.alpha = sac.at("alpha").get<double>();
    c.phase2.sac.optimizer = adam_from(sac.at("optimizer"));
    c.phase2.sac.batch_size = sac.at("batch_size").get<int>();
    c.phase2.sac.hidden = sac.at("hidden").get<int>();
    c.phase2.d_optimizer = adam_from(p2.at("d_optimizer"));
    c.phase2.d_batch = p2.at("d_batch").get<int>();
    c.phase2.d_hidden = p2.at("d_hidden").get<int>();
    c.phase2.gp_weight = p2.at("gp_weight").get<double>();
    c.phase2.tn_mix_fraction = p2.at("tn_mix_fraction").get<double>();
    c.phase2.tn_mix_horizon = p2.at("tn_mix_horizon").get<int>();
    c.phase2.expert_pool = p2.at("expert_pool").get<int>();
    c.phase2.start_steps = p2.at("start_steps").get<int>();
    c.phase2.n_eval = p2.at("n_eval").get<int>();
    c.phase2.expert_feature_source = parse_expert_feature_source(p2.at("expert_feature_source").get<std::string>());
    c.phase2.reward_source = parse_reward_source(p2.at("reward_source").get<std::string>());
    c.phase2.checkpoint_every = p2.at("checkpoint_every").get<int>();
    if (p2.contains("sparse_goal") && !p2.at("sparse_goal").is_null()) {
        const auto& g = p2.at("sparse_goal");
        c.phase2.sparse_goal = SparseGoal{g.value("c", 100.0), g.value("r_goal", 1.0)};
    } else {
        c.phase2.sparse_goal.reset();
    }

    const auto& t = j.at("tpil");
    c.tpil.lambda_d = t.at("lambda_d").get<double>();
    c.tpil.lambda_g = t.at("lambda_g").get<double>();
    c.tpil.n_epoch = t.at("n_epoch").get<int>();
    c.tpil.batch_per_set = t.at("batch_per_set").get<int>();
    c.tpil.optimizer = adam_from(t.at("optimizer"));
    c.tpil.log_every = t.at("log_every").get<int>();
}

}  // namespace

void to_json(json& j, const ExperimentConfig& c) {
    j = json{
        {"profile", c.profile},
        {"method", to_string(c.method)},
        {"seed", c.seed},
        {"output_dir", c.output_dir.string()},
        {"threads", c.threads},
        {"task", {{"source", c.source}, {"target", c.target}}},
        {"data",
         {{"n_demo", c.data.n_demo},
          {"expert_policy", to_string(c.data.expert_policy)},
          {"nonexpert_policy", to_string(c.data.nonexpert_policy)}}},
        {"model", {{"use_domain_encoders", c.use_domain_encoders}}},
        {"phase1",
         {{"n_epoch_it", c.phase1.n_epoch_it},
          {"batch_per_set", c.phase1.batch_per_set},
          {"weights", weights_json(c.phase1.weights)},
          {"optimizer", adam_json(c.phase1.optimizer)},
          {"checkpoint_every", c.phase1.checkpoint_every},
          {"discriminator_clip", c.phase1.discriminator_clip},
          {"critic_gp_weight", c.phase1.critic_gp_weight},
          {"log_every", c.phase1.log_every}}},
        {"phase2",
         {{"n_epoch_pol", c.phase2.n_epoch_pol},
          {"steps_per_epoch", c.phase2.steps_per_epoch},
          {"n_update_d", c.phase2.n_update_d},
          {"n_update_theta", c.phase2.n_update_theta},
          {"buffer_capacity", c.phase2.buffer_capacity},
          {"sac",
           {{"gamma", c.phase2.sac.gamma},
            {"rho", c.phase2.sac.rho},
            {"alpha", c.phase2.sac.alpha},
            {"optimizer", adam_json(c.phase2.sac.optimizer)},
            {"batch_size", c.phase2.sac.batch_size},
            {"hidden", c.phase2.sac.hidden}}},
          {"d_optimizer", adam_json(c.phase2.d_optimizer)},
          {"d_batch", c.phase2.d_batch},
          {"d_hidden", c.phase2.d_hidden},
          {"gp_weight", c.phase2.gp_weight},
          {"tn_mix_fraction", c.phase2.tn_mix_fraction},
          {"tn_mix_horizon", c.phase2.tn_mix_horizon},
          {"expert_pool", c.phase2.expert_pool},
          {"start_steps", c.phase2.start_steps},
          {"n_eval", c.phase2.n_eval},
          {"expert_feature_source", to_string(c.phase2.expert_feature_source)},
          {"reward_source", to_string(c.phase2.reward_source)},
          {"checkpoint_every", c.phase2.checkpoint_every},
          {"sparse_goal", c.phase2.sparse_goal
                              ? json{{"c", c.phase2.sparse_goal->c}, {"r_goal", c.phase2.sparse_goal->r_goal}}
                              : json(nullptr)}}},
        {"tpil",
         {{"lambda_d", c.tpil.lambda_d},
          {"lambda_g", c.tpil.lambda_g},
          {"n_epoch", c.tpil.n_epoch},
          {"batch_per_set", c.tpil.batch_per_set},
          {"optimizer", adam_json(c.tpil.optimizer)},
          {"log_every", c.tpil.log_every}}},
    };
}

void merge_json(const json& patch, ExperimentConfig& c) {
    if (!patch.is_object()) throw ConfigError("configuration must be a JSON object");
    json base = c;
    check_known_keys(base, patch, "");
    base.merge_patch(patch);
    ExperimentConfig out = c;
    try {
        from_full_json(base, out);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed configuration: ") + e.what());
    }
    c = std::move(out);
}

void apply_override(ExperimentConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json patch = json::object();
    json* node = &patch;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
    merge_json(patch, c);
}

ExperimentConfig load_config(const fs::path& path, const std::optional<std::string>& profile_flag,
                             const std::vector<std::string>& overrides) {
    json file = json::object();
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config " + path.string());
        try {
            is >> file;
        } catch (const json::exception& e) {
            throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
        }
    }
    const std::string profile = profile_flag ? *profile_flag : file.value("profile", std::string("desk"));
    auto c = profile_by_name(profile);
    file.erase("profile");
    merge_json(file, c);
    for (const auto& o : overrides) apply_override(c, o);
    c.validate();
    return c;
}

void write_resolved_config(const ExperimentConfig& c, const fs::path& dir, const std::string& file_name) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream os(dir / file_name);
    if (!os) throw IoError("cannot write " + (dir / file_name).string());
    os << json(c).dump(2) << "\n";
}

}  // namespace d3il

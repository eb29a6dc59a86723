#include "d3il/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "d3il/error.hpp"
#include "d3il/log.hpp"

namespace d3il {

namespace fs = std::filesystem;

void AdamConfig::validate(const char* what) const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError(std::string(what) + ": learning rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError(std::string(what) + ": Adam betas must lie in [0, 1)");
    }
}

torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, const AdamConfig& cfg) {
    return torch::optim::Adam(params, torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}));
}

at::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

void Phase1Config::validate() const {
    if (n_epoch_it < 1) throw ConfigError("phase1.n_epoch_it must be at least 1");
    if (batch_per_set < 1) throw ConfigError("phase1.batch_per_set must be at least 1");
    if (checkpoint_every < 0 || discriminator_clip < 0.0 || critic_gp_weight < 0.0) throw ConfigError("phase1 settings must be non-negative");
    weights.validate();
    optimizer.validate("phase1.optimizer");
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    return os;
}

}  // namespace

void LossHistory::write_csv(const fs::path& path) const {
    auto os = open_out(path);
    os << "epoch";
    for (const auto& n : LossReport::column_names()) os << "," << n;
    os << "\n";
    for (std::size_t e = 0; e < epochs.size(); ++e) {
        os << e + 1;
        for (double v : epochs[e].values()) os << "," << fmt(v);
        os << "\n";
    }
}

double LossHistory::mean(const std::string& column, std::size_t first, std::size_t last) const {
    const auto& names = LossReport::column_names();
    const auto it = std::find(names.begin(), names.end(), column);
    require(it != names.end(), "unknown loss column " + column);
    last = std::min(last, epochs.size());
    require(first < last, "empty epoch range");
    const auto col = static_cast<std::size_t>(it - names.begin());
    double sum = 0.0;
    for (std::size_t e = first; e < last; ++e) sum += epochs[e].values()[col];
    return sum / static_cast<double>(last - first);
}

Batches sample_batches(const FeatureSets& sets, int batch_per_set, Rng& rng, torch::Dtype dtype) {
    const auto n = static_cast<std::size_t>(batch_per_set);
    Batches b;
    b.se = to_tensor(sample_minibatch(sets.se, n, rng), dtype);
    b.sn = to_tensor(sample_minibatch(sets.sn, n, rng), dtype);
    b.tn = to_tensor(sample_minibatch(sets.tn, n, rng), dtype);
    b.tl = to_tensor(sample_minibatch(sets.tl, n, rng), dtype);
    return b;
}

namespace {

void assign_grads(const std::vector<torch::Tensor>& params, const torch::Tensor& loss, bool retain) {
    auto grads = torch::autograd::grad({loss}, params, {}, retain, false, /*allow_unused=*/true);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& g = params[i].mutable_grad();
        g = grads[i].defined() ? grads[i] : torch::zeros_like(params[i]);
    }
}

}  // namespace

LossReport phase1_step(FeatureModel& model, const Batches& batches, const LossWeights& w,
                       torch::optim::Optimizer& eg_opt, torch::optim::Optimizer& d_opt,
                       const CriticConstraint& critic, at::Generator* gen) {
    require(critic.clip >= 0.0 && critic.gp_weight >= 0.0, "critic constraints must be non-negative");
    ForwardPass fp(model, batches);
    auto totals = total_losses(fp, w);
    auto d_objective = totals.fdid;
    if (critic.gp_weight > 0.0) {
        require(gen != nullptr, "the critic gradient penalty needs a generator");
        auto gp = critic_gradient_penalty(fp, *gen);
        totals.report.critic_gp = gp.item<double>();
        if (!std::isfinite(totals.report.critic_gp)) throw NumericalFault("critic_gp", "non-finite critic_gp");
        d_objective = d_objective + critic.gp_weight * gp;
    }
    const auto eg_params = model->encoder_generator_parameters();
    const auto d_params = model->discriminator_parameters();
    assign_grads(eg_params, totals.eg, /*retain=*/true);
    assign_grads(d_params, d_objective, /*retain=*/false);
    eg_opt.step();
    d_opt.step();
    if (critic.clip > 0.0) {
        torch::NoGradGuard no_grad;
        for (auto& p : d_params) p.clamp_(-critic.clip, critic.clip);
    }
    return totals.report;
}

namespace {

void save_phase1_state(const fs::path& path, int epoch, FeatureModel& model, torch::optim::Adam& eg_opt,
                       torch::optim::Adam& d_opt, const Rng& rng, at::Generator& gen, const LossHistory& history);
int load_phase1_state(const fs::path& path, FeatureModel& model, torch::optim::Adam& eg_opt,
                      torch::optim::Adam& d_opt, Rng& rng, at::Generator& gen, LossHistory& history);

}  // namespace

LossHistory train_feature_model(FeatureModel& model, const FeatureSets& sets, const Phase1Config& cfg,
                                const fs::path& out_dir, bool resume) {
    cfg.validate();
    require(sets.tl.label() == kTL && sets.tn.label() == kTN && sets.se.label() == kSE && sets.sn.label() == kSN,
            "phase 1 expects the SE, SN, TN and TL sets in that order");
    model->train();
    auto eg_opt = make_adam(model->encoder_generator_parameters(), cfg.optimizer);
    auto d_opt = make_adam(model->discriminator_parameters(), cfg.optimizer);
    Rng rng = make_rng(cfg.seed, "phase1.batches");
    auto gen = make_generator(stream_seed(cfg.seed, "phase1.critic_gp"));
    const CriticConstraint critic{cfg.discriminator_clip, cfg.critic_gp_weight};
    const auto dtype = model->parameters().front().scalar_type();

    LossHistory history;
    history.epochs.reserve(cfg.n_epoch_it);
    const bool persist = !out_dir.empty();
    int first_epoch = 1;
    if (resume) {
        require(persist, "resuming phase 1 needs an output directory");
        first_epoch = load_phase1_state(out_dir / "phase1_state.pt", model, eg_opt, d_opt, rng, gen, history) + 1;
        require(first_epoch <= cfg.n_epoch_it + 1, "saved phase-1 state is past n_epoch_it");
        log_info("resuming phase 1 at epoch " + std::to_string(first_epoch));
    }
    auto checkpoint = [&](int epoch) {
        save_feature_model(model, out_dir / "feature_model.pt");
        save_phase1_state(out_dir / "phase1_state.pt", epoch, model, eg_opt, d_opt, rng, gen, history);
        history.write_csv(out_dir / "losses.csv");
    };
    for (int epoch = first_epoch; epoch <= cfg.n_epoch_it; ++epoch) {
        const auto batches = sample_batches(sets, cfg.batch_per_set, rng, dtype);
        LossReport report;
        try {
            report = phase1_step(model, batches, cfg.weights, eg_opt, d_opt, critic, &gen);
        } catch (const NumericalFault& e) {
            if (persist) history.write_csv(out_dir / "losses.csv");
            log(LogLevel::kError, "phase 1 stopped at epoch " + std::to_string(epoch) + ": " + e.what());
            throw;
        }
        history.epochs.push_back(report);
        if (cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch == 1)) {
            std::ostringstream os;
            os << "phase1 epoch " << epoch << "/" << cfg.n_epoch_it << " L_EG=" << report.eg
               << " L_FDID=" << report.fdid << " img_recon=" << report.img_recon
               << " img_cycle=" << report.img_cycle;
            log_info(os.str());
        }
        if (persist && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) checkpoint(epoch);
    }
    if (persist) checkpoint(std::max(cfg.n_epoch_it, first_epoch - 1));
    return history;
}

torch::Tensor generate_target_expert(FeatureModel& model, const torch::Tensor& o_tn, const torch::Tensor& o_se) {
    require(o_tn.sizes() == o_se.sizes(), "target nonexpert and source expert batches must have equal shape");
    auto domain = model->domain(o_tn, Domain::kTarget);
    auto behavior = model->behavior(o_se, Domain::kSource);
    return model->generate(domain, behavior, Domain::kTarget);
}

Observation generate_target_expert(FeatureModel& model, const Observation& o_tn, const Observation& o_se) {
    torch::NoGradGuard no_grad;
    auto out = generate_target_expert(model, to_tensor(o_tn), to_tensor(o_se))
                   .clamp(0.0, 1.0)
                   .mul(255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({0, 2, 3, 1})
                   .contiguous();
    Observation o;
    o.height = o_tn.height;
    o.width = o_tn.width;
    o.pixels.assign(out.data_ptr<std::uint8_t>(), out.data_ptr<std::uint8_t>() + out.numel());
    o.episode = o_tn.episode;
    o.step = o_tn.step;
    return o;
}

namespace {

constexpr std::int64_t kCheckpointVersion = 1;

void write_int(torch::serialize::OutputArchive& a, const std::string& key, std::int64_t v) {
    a.write(key, c10::IValue(v));
}

std::int64_t read_int(torch::serialize::InputArchive& a, const std::string& key) {
    c10::IValue v;
    if (!a.try_read(key, v)) throw IoError("checkpoint is missing field '" + key + "'");
    return v.toInt();
}

}  // namespace

torch::serialize::OutputArchive new_checkpoint() {
    torch::serialize::OutputArchive a;
    write_int(a, "format_version", kCheckpointVersion);
    return a;
}

torch::serialize::InputArchive open_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing checkpoint " + path.string());
    torch::serialize::InputArchive a;
    try {
        a.load_from(path.string());
    } catch (const c10::Error& e) {
        throw IoError("unreadable checkpoint " + path.string());
    }
    if (read_int(a, "format_version") != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version in " + path.string());
    }
    return a;
}

void save_checkpoint(torch::serialize::OutputArchive& a, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    try {
        a.save_to(tmp.string());
    } catch (const c10::Error& e) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    fs::rename(tmp, path);
}

void write_arch(torch::serialize::OutputArchive& a, const ArchConfig& arch) {
    write_int(a, "arch.image_size", arch.image_size);
    write_int(a, "arch.frame_channels", arch.frame_channels);
    write_int(a, "arch.stack", arch.stack);
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        write_int(a, "arch.conv" + std::to_string(i), arch.conv_channels[i]);
    }
    write_int(a, "arch.domain_dim", arch.domain_dim);
    write_int(a, "arch.feature_disc_hidden", arch.feature_disc_hidden);
    write_int(a, "arch.reward_hidden", arch.reward_hidden);
    write_int(a, "arch.use_domain_encoders", arch.use_domain_encoders ? 1 : 0);
}

ArchConfig read_arch(torch::serialize::InputArchive& a) {
    ArchConfig arch;
    arch.image_size = static_cast<int>(read_int(a, "arch.image_size"));
    arch.frame_channels = static_cast<int>(read_int(a, "arch.frame_channels"));
    arch.stack = static_cast<int>(read_int(a, "arch.stack"));
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        arch.conv_channels[i] = static_cast<int>(read_int(a, "arch.conv" + std::to_string(i)));
    }
    arch.domain_dim = static_cast<int>(read_int(a, "arch.domain_dim"));
    arch.feature_disc_hidden = static_cast<int>(read_int(a, "arch.feature_disc_hidden"));
    arch.reward_hidden = static_cast<int>(read_int(a, "arch.reward_hidden"));
    arch.use_domain_encoders = read_int(a, "arch.use_domain_encoders") != 0;
    arch.validate();
    return arch;
}

namespace {

void save_phase1_state(const fs::path& path, int epoch, FeatureModel& model, torch::optim::Adam& eg_opt,
                       torch::optim::Adam& d_opt, const Rng& rng, at::Generator& gen, const LossHistory& history) {
    auto a = new_checkpoint();
    write_arch(a, model->arch());
    write_int(a, "epoch", epoch);
    torch::serialize::OutputArchive weights, eg, d;
    model->save(weights);
    eg_opt.save(eg);
    d_opt.save(d);
    a.write("model", weights);
    a.write("eg_optimizer", eg);
    a.write("d_optimizer", d);
    std::ostringstream os;
    os << rng;
    a.write("batch_rng", c10::IValue(os.str()));
    a.write("critic_gp_generator", gen.get_state());
    const auto cols = static_cast<std::int64_t>(LossReport::column_names().size());
    std::vector<double> flat;
    for (const auto& e : history.epochs) {
        const auto v = e.values();
        flat.insert(flat.end(), v.begin(), v.end());
    }
    a.write("history", torch::tensor(flat, torch::kFloat64).reshape({-1, cols}));
    save_checkpoint(a, path);
}

int load_phase1_state(const fs::path& path, FeatureModel& model, torch::optim::Adam& eg_opt,
                      torch::optim::Adam& d_opt, Rng& rng, at::Generator& gen, LossHistory& history) {
    auto a = open_checkpoint(path);
    const auto arch = read_arch(a);
    require(arch == model->arch(), "phase-1 state in " + path.string() + " has a different architecture");
    const int epoch = static_cast<int>(read_int(a, "epoch"));
    torch::serialize::InputArchive weights, eg, d;
    a.read("model", weights);
    a.read("eg_optimizer", eg);
    a.read("d_optimizer", d);
    model->load(weights);
    eg_opt.load(eg);
    d_opt.load(d);
    c10::IValue rng_state;
    a.read("batch_rng", rng_state);
    std::istringstream is(rng_state.toStringRef());
    is >> rng;
    if (!is) throw IoError("corrupt batch RNG state in " + path.string());
    torch::Tensor gen_state, h;
    a.read("critic_gp_generator", gen_state);
    gen.set_state(gen_state);
    a.read("history", h);
    history.epochs.clear();
    for (std::int64_t e = 0; e < h.size(0); ++e) {
        auto row = h[e].contiguous();
        history.epochs.push_back(
            LossReport::from_values(std::vector<double>(row.data_ptr<double>(), row.data_ptr<double>() + row.numel())));
    }
    if (static_cast<int>(history.epochs.size()) != epoch) throw IoError("inconsistent phase-1 state in " + path.string());
    return epoch;
}

}  // namespace

void save_feature_model(FeatureModel& model, const fs::path& path) {
    auto a = new_checkpoint();
    write_arch(a, model->arch());
    torch::serialize::OutputArchive weights;
    model->save(weights);
    a.write("model", weights);
    save_checkpoint(a, path);
}

FeatureModel load_feature_model(const fs::path& path) {
    auto a = open_checkpoint(path);
    FeatureModel model(read_arch(a));
    torch::serialize::InputArchive weights;
    a.read("model", weights);
    model->load(weights);
    return model;
}

void save_policy(ActorCritic& ac, const fs::path& path) {
    auto a = new_checkpoint();
    write_int(a, "state_dim", ac->state_dim());
    write_int(a, "action_dim", ac->action_dim());
    write_int(a, "hidden", ac->actor->parameters().front().size(0));
    torch::serialize::OutputArchive weights;
    ac->save(weights);
    a.write("policy", weights);
    save_checkpoint(a, path);
}

ActorCritic load_policy(const fs::path& path) {
    auto a = open_checkpoint(path);
    ActorCritic ac(static_cast<int>(read_int(a, "state_dim")), static_cast<int>(read_int(a, "action_dim")),
                   static_cast<int>(read_int(a, "hidden")));
    torch::serialize::InputArchive weights;
    a.read("policy", weights);
    ac->load(weights);
    return ac;
}

void save_reward_discriminator(RewardDiscriminator& d, int behavior_dim, int hidden, const fs::path& path) {
    auto a = new_checkpoint();
    write_int(a, "behavior_dim", behavior_dim);
    write_int(a, "hidden", hidden);
    torch::serialize::OutputArchive weights;
    d->save(weights);
    a.write("d_rew", weights);
    save_checkpoint(a, path);
}

RewardDiscriminator load_reward_discriminator(const fs::path& path) {
    auto a = open_checkpoint(path);
    RewardDiscriminator d(static_cast<int>(read_int(a, "behavior_dim")), static_cast<int>(read_int(a, "hidden")));
    torch::serialize::InputArchive weights;
    a.read("d_rew", weights);
    d->load(weights);
    return d;
}

void SacConfig::validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("sac.gamma must lie in (0, 1)");
    if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("sac.rho must lie in [0, 1)");
    if (alpha < 0.0) throw ConfigError("sac.alpha must be non-negative");
    if (batch_size < 1 || hidden < 1) throw ConfigError("sac batch size and width must be positive");
    optimizer.validate("sac.optimizer");
}

std::string to_string(ExpertFeatureSource s) {
    return s == ExpertFeatureSource::kGeneratedTE ? "generated_TE" : "source_SE";
}

ExpertFeatureSource parse_expert_feature_source(const std::string& s) {
    if (s == "generated_TE") return ExpertFeatureSource::kGeneratedTE;
    if (s == "source_SE") return ExpertFeatureSource::kSourceSE;
    throw ConfigError("unknown expert feature source '" + s + "' (expected generated_TE or source_SE)");
}

std::string to_string(RewardSource s) { return s == RewardSource::kRewardDiscriminator ? "D_rew" : "BD_B"; }

RewardSource parse_reward_source(const std::string& s) {
    if (s == "D_rew") return RewardSource::kRewardDiscriminator;
    if (s == "BD_B") return RewardSource::kBehaviorDiscriminator;
    throw ConfigError("unknown reward source '" + s + "' (expected D_rew or BD_B)");
}

void Phase2Config::validate() const {
    if (n_epoch_pol < 1 || steps_per_epoch < 1) throw ConfigError("phase2 epoch counts must be positive");
    if (n_update_d < 1 || n_update_theta < 1) throw ConfigError("phase2.n_update_d and n_update_theta must be >= 1");
    if (buffer_capacity < 1 || d_batch < 1 || expert_pool < 1 || n_eval < 1 || start_steps < 0) {
        throw ConfigError("phase2 sizes must be positive");
    }
    if (tn_mix_fraction < 0.0 || tn_mix_fraction > 1.0 || tn_mix_horizon < 0) {
        throw ConfigError("phase2.tn_mix_fraction must lie in [0, 1]");
    }
    if (gp_weight < 0.0) throw ConfigError("phase2.gp_weight must be non-negative");
    if (sparse_goal && !(sparse_goal->c > 0.0)) throw ConfigError("sparse goal scale c must be positive");
    sac.validate();
    d_optimizer.validate("phase2.d_optimizer");
}

void PolicyHistory::write_csv(const fs::path& path) const {
    auto os = open_out(path);
    os << "epoch,env_steps,mean_return,std_return,d_rew_loss,critic_loss,actor_loss,mean_reward\n";
    for (const auto& e : epochs) {
        os << e.epoch << "," << e.env_steps << "," << fmt(e.mean_return) << "," << fmt(e.std_return) << ","
           << fmt(e.d_rew_loss) << "," << fmt(e.critic_loss) << "," << fmt(e.actor_loss) << ","
           << fmt(e.mean_reward) << "\n";
    }
}

namespace {

torch::Tensor encode_set(const std::function<torch::Tensor(const torch::Tensor&)>& encode, const ObservationSet& set,
                         std::size_t limit) {
    torch::NoGradGuard no_grad;
    const std::size_t n = std::min(limit, set.size());
    std::vector<torch::Tensor> chunks;
    for (std::size_t start = 0; start < n; start += 256) {
        std::vector<Observation> obs;
        for (std::size_t i = start; i < std::min(n, start + 256); ++i) obs.push_back(set.at(i));
        chunks.push_back(encode(to_tensor(obs)));
    }
    return torch::cat(chunks);
}

}  // namespace

RewardModel d3il_reward_model(FeatureModel& model, const FeatureSets& sets, const Phase2Config& cfg) {
    model->eval();
    RewardModel r;
    r.encode = [model](const torch::Tensor& x) mutable { return model->behavior(x, Domain::kTarget); };
    r.nonexpert_pool = encode_set(r.encode, sets.tn, sets.tn.size());

    if (cfg.reward_source == RewardSource::kBehaviorDiscriminator) {
        r.fixed_reward = [model](const torch::Tensor& f) mutable { return model->bd_b->forward(f).squeeze(1); };
        return r;
    }

    torch::NoGradGuard no_grad;
    if (cfg.expert_feature_source == ExpertFeatureSource::kSourceSE) {
        auto source = [model](const torch::Tensor& x) mutable { return model->behavior(x, Domain::kSource); };
        r.expert_pool = encode_set(source, sets.se, static_cast<std::size_t>(cfg.expert_pool));
        return r;
    }
    Rng rng = make_rng(cfg.seed, "phase2.expert_pool");
    std::uniform_int_distribution<std::size_t> pick_tn(0, sets.tn.size() - 1), pick_se(0, sets.se.size() - 1);
    std::vector<torch::Tensor> chunks;
    for (int start = 0; start < cfg.expert_pool; start += 256) {
        std::vector<Observation> tn, se;
        for (int i = start; i < std::min(cfg.expert_pool, start + 256); ++i) {
            tn.push_back(sets.tn.at(pick_tn(rng)));
            se.push_back(sets.se.at(pick_se(rng)));
        }
        auto te = generate_target_expert(model, to_tensor(tn), to_tensor(se));
        chunks.push_back(model->behavior(te, Domain::kTarget));
    }
    r.expert_pool = torch::cat(chunks);
    return r;
}

SacStats sac_update(ActorCritic& ac, torch::optim::Optimizer& actor_opt, torch::optim::Optimizer& critic_opt,
                    const SacBatch& b, const SacConfig& cfg, at::Generator& gen) {
    require(b.state.size(0) >= 1, "SAC batch is empty");
    torch::Tensor backup;
    {
        torch::NoGradGuard no_grad;
        auto next = ac->sample(b.next_state, gen);
        auto [q1t, q2t] = ac->q_target(b.next_state, next.action);
        backup = b.reward + cfg.gamma * (1.0 - b.done) * (torch::min(q1t, q2t) - cfg.alpha * next.log_prob);
    }
    auto [q1, q2] = ac->q(b.state, b.action);
    auto critic_loss = (q1 - backup).pow(2).mean() + (q2 - backup).pow(2).mean();
    SacStats stats;
    stats.critic_loss = critic_loss.item<double>();
    if (!std::isfinite(stats.critic_loss)) throw NumericalFault("critic", "non-finite critic loss");
    critic_opt.zero_grad();
    critic_loss.backward();
    critic_opt.step();

    auto critic_params = ac->critic_parameters();
    for (auto& p : critic_params) p.set_requires_grad(false);
    auto pi = ac->sample(b.state, gen);
    auto [pq1, pq2] = ac->q(b.state, pi.action);
    auto actor_loss = (cfg.alpha * pi.log_prob - torch::min(pq1, pq2)).mean();
    stats.actor_loss = actor_loss.item<double>();
    if (!std::isfinite(stats.actor_loss)) throw NumericalFault("actor", "non-finite actor loss");
    actor_opt.zero_grad();
    actor_loss.backward();
    actor_opt.step();
    for (auto& p : critic_params) p.set_requires_grad(true);

    ac->polyak_update(cfg.rho);
    return stats;
}

namespace {

torch::Tensor state_tensor(const std::vector<float>& s) {
    return torch::from_blob(const_cast<float*>(s.data()), {1, static_cast<int64_t>(s.size())}, torch::kFloat32)
        .clone();
}

std::vector<double> to_action(const torch::Tensor& a) {
    auto c = a.contiguous().to(torch::kFloat64);
    std::vector<double> out(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
    for (auto& v : out) v = std::clamp(v, -1.0, 1.0);
    return out;
}

EvalResult summarize(std::vector<double> returns) {
    EvalResult r;
    r.returns = std::move(returns);
    const double n = static_cast<double>(r.returns.size());
    r.mean = std::accumulate(r.returns.begin(), r.returns.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : r.returns) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / n);
    return r;
}

template <typename Policy>
EvalResult rollout_returns(const EnvSpec& spec, int n_episodes, std::uint64_t seed, Policy&& policy) {
    require(n_episodes >= 1, "at least one evaluation episode is required");
    const SynthEnv env(spec);
    std::vector<double> returns;
    for (int e = 0; e < n_episodes; ++e) {
        auto [state, obs] = env.reset(stream_seed(seed, "eval.episode." + std::to_string(e)));
        double total = 0.0;
        bool done = false;
        while (!done) {
            auto result = env.step(state, policy(env, state));
            total += result.true_reward;
            done = result.done;
            state = std::move(result.state);
        }
        returns.push_back(total);
    }
    return summarize(std::move(returns));
}

}  // namespace

EvalResult evaluate_policy(ActorCritic& ac, const EnvSpec& spec, int n_episodes, std::uint64_t seed) {
    torch::NoGradGuard no_grad;
    return rollout_returns(spec, n_episodes, seed, [&](const SynthEnv& env, const EnvState& s) {
        return to_action(ac->deterministic(state_tensor(env.policy_state(s)))[0]);
    });
}

EvalResult evaluate_random(const EnvSpec& spec, int n_episodes, std::uint64_t seed) {
    Rng rng = make_rng(seed, "eval.random_actions");
    return rollout_returns(spec, n_episodes, seed, [&](const SynthEnv&, const EnvState&) {
        return uniform_random_action(spec.action_dim(), rng);
    });
}

EvalResult evaluate_expert(const EnvSpec& spec, int n_episodes, std::uint64_t seed) {
    return rollout_returns(spec, n_episodes, seed,
                           [](const SynthEnv& env, const EnvState& s) { return env.scripted_expert(s); });
}

namespace {

torch::Tensor stack_rows(const std::vector<const Transition*>& batch,
                         const std::function<const std::vector<float>&(const Transition&)>& field) {
    const auto width = static_cast<int64_t>(field(*batch.front()).size());
    auto out = torch::empty({static_cast<int64_t>(batch.size()), width}, torch::kFloat32);
    auto* dst = out.data_ptr<float>();
    for (const auto* t : batch) {
        const auto& v = field(*t);
        dst = std::copy(v.begin(), v.end(), dst);
    }
    return out;
}

torch::Tensor sample_rows(const torch::Tensor& pool, int64_t n, Rng& rng) {
    std::uniform_int_distribution<int64_t> pick(0, pool.size(0) - 1);
    std::vector<int64_t> idx(n);
    for (auto& i : idx) i = pick(rng);
    return pool.index_select(0, torch::tensor(idx, torch::kInt64));
}

}  // namespace

ActorCritic init_policy(int state_dim, int action_dim, const Phase2Config& cfg) {
    ActorCritic ac(state_dim, action_dim, cfg.sac.hidden);
    for (auto& child : ac->named_children()) {
        if (child.key() == "q1_target" || child.key() == "q2_target") continue;
        init_parameters(*child.value(), stream_seed(cfg.seed, "phase2.init." + child.key()));
    }
    ac->polyak_update(0.0);
    return ac;
}

PolicyResult train_policy(const RewardModel& reward, const EnvSpec& target, const Phase2Config& cfg,
                          const fs::path& out_dir) {
    cfg.validate();
    require(static_cast<bool>(reward.encode), "reward model has no encoder");
    const bool learned = !reward.fixed_reward;
    if (learned) {
        require(reward.expert_pool.defined() && reward.expert_pool.size(0) > 0, "expert feature pool is empty");
    }
    const SynthEnv env(target);
    const int state_dim = target.state_dim();
    const int action_dim = target.action_dim();

    PolicyResult result;
    result.buffer = ReplayBuffer(cfg.buffer_capacity);
    auto& buffer = result.buffer;
    result.policy = init_policy(state_dim, action_dim, cfg);
    auto& ac = result.policy;
    auto actor_opt = make_adam(ac->actor_parameters(), cfg.sac.optimizer);
    auto critic_opt = make_adam(ac->critic_parameters(), cfg.sac.optimizer);

    std::optional<torch::optim::Adam> d_opt;
    if (learned) {
        const auto dim = static_cast<int>(reward.expert_pool.size(1));
        result.reward = RewardDiscriminator(dim, cfg.d_hidden);
        init_parameters(*result.reward, stream_seed(cfg.seed, "phase2.init.d_rew"));
        d_opt.emplace(make_adam(result.reward->parameters(), cfg.d_optimizer));
    }
    auto& d_rew = result.reward;

    auto reward_of = [&](const torch::Tensor& features) {
        torch::NoGradGuard no_grad;
        return learned ? estimate_reward(d_rew, features) : reward.fixed_reward(features);
    };

    Rng action_rng = make_rng(cfg.seed, "phase2.random_actions");
    Rng sample_rng = make_rng(cfg.seed, "phase2.samples");
    auto gen = make_generator(stream_seed(cfg.seed, "phase2.torch"));
    long env_steps = 0;
    int episode_index = 0;

    for (int epoch = 1; epoch <= cfg.n_epoch_pol; ++epoch) {
        double d_loss_sum = 0.0, critic_sum = 0.0, actor_sum = 0.0, reward_sum = 0.0;
        int d_count = 0, sac_count = 0;
        int epoch_steps = 0;
        while (epoch_steps < cfg.steps_per_epoch) {
            auto [state, obs] = env.reset(stream_seed(cfg.seed, "phase2.episode." + std::to_string(episode_index++)));
            std::vector<Transition> episode;
            bool done = false;
            while (!done) {
                const auto s = env.policy_state(state);
                std::vector<double> action;
                if (env_steps < cfg.start_steps) {
                    action = uniform_random_action(action_dim, action_rng);
                } else {
                    torch::NoGradGuard no_grad;
                    action = to_action(ac->sample(state_tensor(s), gen).action[0]);
                }
                auto step = env.step(state, action);
                Transition t;
                t.state = s;
                t.action.assign(action.begin(), action.end());
                t.next_state = env.policy_state(step.state);
                t.observation = std::move(step.observation);
                t.true_reward = step.true_reward;
                t.reached_goal = step.reached_goal;
                episode.push_back(std::move(t));
                done = step.done;
                state = std::move(step.state);
                ++env_steps;
                ++epoch_steps;
            }
            {
                torch::NoGradGuard no_grad;
                std::vector<Observation> obs_batch;
                for (const auto& t : episode) obs_batch.push_back(t.observation);
                auto feats = reward.encode(to_tensor(obs_batch)).contiguous();
                for (std::size_t i = 0; i < episode.size(); ++i) {
                    auto row = feats[static_cast<int64_t>(i)];
                    episode[i].behavior_feature.assign(row.data_ptr<float>(), row.data_ptr<float>() + row.numel());
                }
            }
            for (auto& t : episode) buffer.push(std::move(t));

            if (learned) {
                for (int k = 0; k < cfg.n_update_d; ++k) {
                    const double horizon = static_cast<double>(cfg.tn_mix_horizon) * cfg.d_batch;
                    const double frac =
                        horizon > 0.0 ? cfg.tn_mix_fraction * std::max(0.0, 1.0 - buffer.size() / horizon) : 0.0;
                    const auto n_tn = static_cast<int64_t>(std::lround(frac * cfg.d_batch));
                    const auto n_replay = cfg.d_batch - n_tn;
                    std::vector<torch::Tensor> learner_parts;
                    if (n_replay > 0) {
                        learner_parts.push_back(stack_rows(buffer.sample(n_replay, sample_rng),
                                                           [](const Transition& t) -> const std::vector<float>& {
                                                               return t.behavior_feature;
                                                           }));
                    }
                    if (n_tn > 0) learner_parts.push_back(sample_rows(reward.nonexpert_pool, n_tn, sample_rng));
                    auto learner = torch::cat(learner_parts);
                    auto expert = sample_rows(reward.expert_pool, cfg.d_batch, sample_rng);
                    auto loss = d_rew_loss(d_rew, expert, learner, cfg.gp_weight, gen);
                    d_opt->zero_grad();
                    loss.objective.backward();
                    d_opt->step();
                    const double v = loss.value.item<double>();
                    if (!std::isfinite(v)) throw NumericalFault("d_rew", "non-finite reward discriminator loss");
                    d_loss_sum += v;
                    ++d_count;
                }
            }

            for (int k = 0; k < cfg.n_update_theta; ++k) {
                const auto sampled = buffer.sample(cfg.sac.batch_size, sample_rng);
                SacBatch b;
                b.state = stack_rows(sampled, [](const Transition& t) -> const std::vector<float>& { return t.state; });
                b.action =
                    stack_rows(sampled, [](const Transition& t) -> const std::vector<float>& { return t.action; });
                b.next_state =
                    stack_rows(sampled, [](const Transition& t) -> const std::vector<float>& { return t.next_state; });
                auto feats = stack_rows(
                    sampled, [](const Transition& t) -> const std::vector<float>& { return t.behavior_feature; });
                b.reward = reward_of(feats).to(torch::kFloat32);
                if (cfg.sparse_goal) {
                    auto reached = torch::empty({static_cast<int64_t>(sampled.size())}, torch::kFloat32);
                    for (std::size_t i = 0; i < sampled.size(); ++i) {
                        reached[static_cast<int64_t>(i)] = sampled[i]->reached_goal ? 1.0f : 0.0f;
                    }
                    b.reward = cfg.sparse_goal->c * (b.reward + reached * cfg.sparse_goal->r_goal);
                }
                // episodes end only at the time limit, so bootstrapping is never cut
                b.done = torch::zeros_like(b.reward);
                reward_sum += b.reward.mean().item<double>();
                auto stats = sac_update(ac, actor_opt, critic_opt, b, cfg.sac, gen);
                critic_sum += stats.critic_loss;
                actor_sum += stats.actor_loss;
                ++sac_count;
            }
        }

        const auto eval = evaluate_policy(ac, target, cfg.n_eval, stream_seed(cfg.seed, "phase2.eval." + std::to_string(epoch)));
        Phase2Epoch row;
        row.epoch = epoch;
        row.env_steps = env_steps;
        row.mean_return = eval.mean;
        row.std_return = eval.stddev;
        row.d_rew_loss = d_count ? d_loss_sum / d_count : 0.0;
        row.critic_loss = sac_count ? critic_sum / sac_count : 0.0;
        row.actor_loss = sac_count ? actor_sum / sac_count : 0.0;
        row.mean_reward = sac_count ? reward_sum / sac_count : 0.0;
        result.history.epochs.push_back(row);
        std::ostringstream os;
        os << "phase2 epoch " << epoch << "/" << cfg.n_epoch_pol << " steps=" << env_steps << " return=" << eval.mean
           << " +- " << eval.stddev << " d_loss=" << row.d_rew_loss << " reward=" << row.mean_reward;
        log_info(os.str());

        if (!out_dir.empty()) {
            result.history.write_csv(out_dir / "policy.csv");
            if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) save_policy(ac, out_dir / "policy.pt");
        }
    }
    if (!out_dir.empty()) {
        save_policy(ac, out_dir / "policy.pt");
        if (learned) {
            save_reward_discriminator(d_rew, static_cast<int>(reward.expert_pool.size(1)), cfg.d_hidden,
                                      out_dir / "d_rew.pt");
        }
    }
    return result;
}

PolicyResult train_policy(FeatureModel& model, const EnvSpec& target, const FeatureSets& sets,
                          const Phase2Config& cfg, const fs::path& out_dir) {
    const auto before = parameter_checksum(model->parameters());
    auto reward = d3il_reward_model(model, sets, cfg);
    auto result = train_policy(reward, target, cfg, out_dir);
    if (parameter_checksum(model->parameters()) != before) {
        throw ContractError("feature model parameters changed during policy training");
    }
    return result;
}

}  // namespace d3il

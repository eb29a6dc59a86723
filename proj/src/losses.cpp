#include "d3il/losses.hpp"

#include <cmath>
#include <functional>

#include "d3il/error.hpp"
#include "d3il/log.hpp"

namespace d3il {

void LossWeights::validate() const {
    const std::array<std::pair<const char*, double>, 11> all{{
        {"feat_pred", feat_pred},
        {"feat_adv", feat_adv},
        {"img_adv", img_adv},
        {"img_recon", img_recon},
        {"feat_recon", feat_recon},
        {"img_cycle", img_cycle},
        {"feat_cycle", feat_cycle},
        {"feat_sim", feat_sim},
        {"feat_reg", feat_reg},
        {"c_norm_d", c_norm_d},
        {"c_norm_b", c_norm_b},
    }};
    for (const auto& [name, v] : all) {
        if (!std::isfinite(v) || v < 0.0) {
            throw ConfigError(std::string("loss weight ") + name + " must be finite and non-negative");
        }
    }
}

const std::vector<std::string>& LossReport::column_names() {
    static const std::vector<std::string> names{"feat_pred", "feat_adv", "img_adv",  "img_recon",
                                                "feat_recon", "img_cycle", "feat_cycle", "feat_sim",
                                                "feat_reg",  "L_EG",      "L_FDID",     "critic_gp"};
    return names;
}

std::vector<double> LossReport::values() const {
    return {feat_pred, feat_adv, img_adv, img_recon, feat_recon, img_cycle, feat_cycle, feat_sim, feat_reg, eg, fdid, critic_gp};
}

LossReport LossReport::from_values(const std::vector<double>& v) {
    require(v.size() == column_names().size(), "loss report needs one value per column");
    LossReport r;
    double* fields[] = {&r.feat_pred, &r.feat_adv, &r.img_adv,   &r.img_recon, &r.feat_recon, &r.img_cycle,
                        &r.feat_cycle, &r.feat_sim, &r.feat_reg, &r.eg,        &r.fdid,       &r.critic_gp};
    for (std::size_t i = 0; i < v.size(); ++i) *fields[i] = v[i];
    return r;
}

Domain domain_of(SetId s) { return (s == SetId::kSE || s == SetId::kSN) ? Domain::kSource : Domain::kTarget; }

const char* code(SetId s) {
    switch (s) {
        case SetId::kSE: return "SE";
        case SetId::kSN: return "SN";
        case SetId::kTN: return "TN";
        case SetId::kTL: return "TL";
    }
    return "??";
}

const torch::Tensor& Batches::operator[](SetId s) const {
    switch (s) {
        case SetId::kSE: return se;
        case SetId::kSN: return sn;
        case SetId::kTN: return tn;
        case SetId::kTL: return tl;
    }
    return se;
}

const std::vector<std::pair<SetId, SetId>>& fake_pairs(SetId real) {
    using enum SetId;
    static const std::array<std::vector<std::pair<SetId, SetId>>, 4> table{{
        {{kSN, kSE}},
        {{kSE, kSN}, {kSE, kTN}, {kSN, kTN}},
        {{kTL, kTN}, {kTL, kSN}, {kTN, kSN}},
        {{kTN, kTL}},
    }};
    return table[static_cast<int>(real)];
}

const std::vector<std::pair<SetId, SetId>>& cycle_set_pairs() {
    using enum SetId;
    static const std::vector<std::pair<SetId, SetId>> pairs{{kSE, kTN}, {kSN, kTL}};
    return pairs;
}

namespace {

int key(SetId s) { return static_cast<int>(s); }
std::pair<int, int> key(SetId x, SetId y) { return {key(x), key(y)}; }

template <typename Map, typename K, typename F>
const torch::Tensor& memo(Map& m, const K& k, F&& compute) {
    auto it = m.find(k);
    if (it == m.end()) it = m.emplace(k, compute()).first;
    return it->second;
}

// Row-wise mean of squared differences over every non-batch dimension.
torch::Tensor per_row_mse(const torch::Tensor& a, const torch::Tensor& b) {
    return (a - b).pow(2).flatten(1).mean(1);
}

torch::Tensor per_row_sq_dist(const torch::Tensor& a, const torch::Tensor& b) {
    return (a - b).pow(2).flatten(1).sum(1);
}

torch::Tensor cat_mean(const std::vector<torch::Tensor>& parts) { return torch::cat(parts).mean(); }

}  // namespace

ForwardPass::ForwardPass(FeatureModel& model, Batches batches) : model_(model), batches_(std::move(batches)) {
    for (SetId s : kAllSets) {
        require(batches_[s].defined(), std::string("missing batch for ") + code(s));
    }
}

int64_t ForwardPass::paired_rows(SetId x, SetId y) const {
    return std::min(batches_[x].size(0), batches_[y].size(0));
}

const torch::Tensor& ForwardPass::behavior(SetId s) {
    return memo(behavior_, key(s), [&] { return model_->behavior(batches_[s], domain_of(s)); });
}

const torch::Tensor& ForwardPass::domain(SetId s) {
    return memo(domain_, key(s), [&] { return model_->domain(batches_[s], domain_of(s)); });
}

const torch::Tensor& ForwardPass::reconstruction(SetId s) {
    return memo(recon_, key(s), [&] { return model_->generate(domain(s), behavior(s), domain_of(s)); });
}

const torch::Tensor& ForwardPass::reconstruction_behavior(SetId s) {
    return memo(recon_b_, key(s), [&] { return model_->behavior(reconstruction(s), domain_of(s)); });
}

const torch::Tensor& ForwardPass::reconstruction_domain(SetId s) {
    return memo(recon_d_, key(s), [&] { return model_->domain(reconstruction(s), domain_of(s)); });
}

const torch::Tensor& ForwardPass::translation(SetId x, SetId y) {
    return memo(trans_, key(x, y), [&] {
        const int64_t n = paired_rows(x, y);
        return model_->generate(domain(x).narrow(0, 0, n), behavior(y).narrow(0, 0, n), domain_of(x));
    });
}

const torch::Tensor& ForwardPass::translation_behavior(SetId x, SetId y) {
    return memo(trans_b_, key(x, y), [&] { return model_->behavior(translation(x, y), domain_of(x)); });
}

const torch::Tensor& ForwardPass::translation_domain(SetId x, SetId y) {
    return memo(trans_d_, key(x, y), [&] { return model_->domain(translation(x, y), domain_of(x)); });
}

const torch::Tensor& ForwardPass::retranslation(SetId x, SetId y) {
    return memo(retrans_, key(x, y), [&] {
        return model_->generate(translation_domain(x, y), translation_behavior(y, x), domain_of(x));
    });
}

namespace {

void require_rows(ForwardPass& fp) {
    for (SetId s : kAllSets) {
        require(fp.input(s).size(0) > 0, std::string("empty batch for ") + code(s));
    }
}

torch::Tensor mean_over(const std::vector<SetId>& sets,
                        const std::function<torch::Tensor(SetId)>& per_row) {
    std::vector<torch::Tensor> parts;
    for (SetId s : sets) parts.push_back(per_row(s));
    return cat_mean(parts);
}

}  // namespace

torch::Tensor feature_prediction_loss(ForwardPass& fp) {
    require_rows(fp);
    using enum SetId;
    auto& m = fp.model();
    auto bd = [&](SetId s) { return m->bd_b->forward(fp.behavior(s)).squeeze(1); };
    auto loss = mean_over({kSE}, bd) - mean_over({kSN, kTN}, bd);
    if (m->has_domain_encoders()) {
        auto dd = [&](SetId s) { return m->dd_d->forward(fp.domain(s)).squeeze(1); };
        loss = loss + mean_over({kSE, kSN}, dd) - mean_over({kTN, kTL}, dd);
    }
    return -loss;
}

torch::Tensor feature_adversarial_loss(ForwardPass& fp) {
    require_rows(fp);
    using enum SetId;
    auto& m = fp.model();
    auto dd = [&](SetId s) { return m->dd_b->forward(fp.behavior(s)).squeeze(1); };
    auto loss = mean_over({kSE, kSN}, dd) - mean_over({kTN, kTL}, dd);
    if (m->has_domain_encoders()) {
        auto bd = [&](SetId s) { return m->bd_d->forward(fp.domain(s)).squeeze(1); };
        loss = loss + mean_over({kSE}, bd) - mean_over({kSN, kTN}, bd);
    }
    return loss;
}

torch::Tensor image_adversarial_loss(ForwardPass& fp) {
    auto& m = fp.model();
    torch::Tensor total;
    for (SetId real : kAllSets) {
        const Domain d = domain_of(real);
        require(fp.input(real).size(0) > 0, std::string("empty batch for ") + code(real));
        auto term = m->image_score(fp.input(real), d).mean();
        std::vector<torch::Tensor> fakes;
        for (const auto& [x, y] : fake_pairs(real)) {
            const auto& t = fp.translation(x, y);
            if (t.size(0) > 0) fakes.push_back(m->image_score(t, d));
        }
        if (fakes.empty()) {
            log_warn(std::string("no fake pairs available for ") + code(real) + "; image adversarial term uses real scores only");
        } else {
            term = term - cat_mean(fakes);
        }
        total = total.defined() ? total + term : term;
    }
    return total;
}

torch::Tensor image_reconstruction_loss(ForwardPass& fp) {
    return mean_over({kAllSets.begin(), kAllSets.end()},
                     [&](SetId s) { return per_row_mse(fp.input(s), fp.reconstruction(s)); });
}

torch::Tensor feature_reconstruction_loss(ForwardPass& fp) {
    const bool with_domain = fp.model()->has_domain_encoders();
    return mean_over({kAllSets.begin(), kAllSets.end()}, [&](SetId s) {
        auto r = per_row_sq_dist(fp.behavior(s), fp.reconstruction_behavior(s));
        if (with_domain) r = r + per_row_sq_dist(fp.domain(s), fp.reconstruction_domain(s));
        return r;
    });
}

torch::Tensor image_cycle_loss(ForwardPass& fp) {
    std::vector<torch::Tensor> parts;
    for (const auto& [x, y] : cycle_set_pairs()) {
        const int64_t n = fp.translation(x, y).size(0);
        parts.push_back(per_row_mse(fp.input(x).narrow(0, 0, n), fp.retranslation(x, y)));
        parts.push_back(per_row_mse(fp.input(y).narrow(0, 0, n), fp.retranslation(y, x)));
    }
    return cat_mean(parts);
}

torch::Tensor feature_cycle_loss(ForwardPass& fp) {
    const bool with_domain = fp.model()->has_domain_encoders();
    std::vector<torch::Tensor> parts;
    for (const auto& [a, b] : cycle_set_pairs()) {
        for (const auto& [x, y] : {std::pair{a, b}, std::pair{b, a}}) {
            const int64_t n = fp.translation(x, y).size(0);
            auto r = per_row_mse(fp.behavior(y).narrow(0, 0, n), fp.translation_behavior(y, x));
            if (with_domain) r = r + per_row_mse(fp.domain(x).narrow(0, 0, n), fp.translation_domain(x, y));
            parts.push_back(r);
        }
    }
    return cat_mean(parts);
}

namespace {

torch::Tensor norm_deviation_sq(const torch::Tensor& f, double target) {
    auto sumsq = f.pow(2).sum(1);
    if (target == 0.0) return sumsq;
    return (sumsq.clamp_min(1e-24).sqrt() - target).pow(2);
}

}  // namespace

torch::Tensor feature_regularization_loss(ForwardPass& fp, double c_norm_d, double c_norm_b) {
    require(c_norm_d >= 0.0 && c_norm_b >= 0.0, "feature norm targets must be non-negative");
    using enum SetId;
    const bool with_domain = fp.model()->has_domain_encoders();
    torch::Tensor loss;
    for (const std::vector<SetId>& group : {std::vector<SetId>{kSE, kSN}, std::vector<SetId>{kTN, kTL}}) {
        auto b = mean_over(group, [&](SetId s) { return norm_deviation_sq(fp.behavior(s), c_norm_b); });
        loss = loss.defined() ? loss + b : b;
        if (with_domain) {
            loss = loss + mean_over(group, [&](SetId s) { return norm_deviation_sq(fp.domain(s), c_norm_d); });
        }
    }
    return loss;
}

torch::Tensor feature_similarity_loss(ForwardPass& fp) {
    require_rows(fp);
    using enum SetId;
    auto mean_gap = [](const torch::Tensor& a, const torch::Tensor& b) {
        return (a.mean(0) - b.mean(0)).pow(2).sum();
    };
    auto loss = mean_gap(fp.behavior(kSN), fp.behavior(kTN));
    if (fp.model()->has_domain_encoders()) {
        loss = loss + mean_gap(fp.domain(kSE), fp.domain(kSN)) + mean_gap(fp.domain(kTN), fp.domain(kTL));
    }
    return loss;
}

torch::Tensor feature_prediction_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return feature_prediction_loss(fp);
}

torch::Tensor feature_adversarial_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return feature_adversarial_loss(fp);
}

torch::Tensor image_adversarial_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return image_adversarial_loss(fp);
}

torch::Tensor image_reconstruction_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return image_reconstruction_loss(fp);
}

torch::Tensor feature_reconstruction_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return feature_reconstruction_loss(fp);
}

torch::Tensor feature_regularization_loss(FeatureModel& model, const Batches& b, double c_norm_d, double c_norm_b) {
    ForwardPass fp(model, b);
    return feature_regularization_loss(fp, c_norm_d, c_norm_b);
}

torch::Tensor feature_similarity_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return feature_similarity_loss(fp);
}

torch::Tensor image_cycle_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return image_cycle_loss(fp);
}

torch::Tensor feature_cycle_loss(FeatureModel& model, const Batches& b) {
    ForwardPass fp(model, b);
    return feature_cycle_loss(fp);
}

namespace {

struct CycleTensors {
    torch::Tensor x, y;
    Features fx, fy;
    torch::Tensor xy, yx;  // ô_(x,y), ô_(y,x)
    Features fxy, fyx;
};

CycleTensors cycle_tensors(FeatureModel& model, const CrossPairs& p) {
    require(p.x_domain != p.y_domain, "cycle pairs must combine one source and one target observation");
    require(p.x.size(0) == p.y.size(0) && p.x.size(0) > 0, "cycle pair batches must be non-empty and equal length");
    CycleTensors c;
    c.x = p.x;
    c.y = p.y;
    c.fx = encode(model, p.x, p.x_domain);
    c.fy = encode(model, p.y, p.y_domain);
    c.xy = model->generate(c.fx.domain, c.fy.behavior, p.x_domain);
    c.yx = model->generate(c.fy.domain, c.fx.behavior, p.y_domain);
    c.fxy = encode(model, c.xy, p.x_domain);
    c.fyx = encode(model, c.yx, p.y_domain);
    return c;
}

}  // namespace

torch::Tensor image_cycle_loss(FeatureModel& model, const CrossPairs& pairs) {
    auto c = cycle_tensors(model, pairs);
    auto back_x = model->generate(c.fxy.domain, c.fyx.behavior, pairs.x_domain);
    auto back_y = model->generate(c.fyx.domain, c.fxy.behavior, pairs.y_domain);
    return torch::cat({per_row_mse(c.x, back_x), per_row_mse(c.y, back_y)}).mean();
}

torch::Tensor feature_cycle_loss(FeatureModel& model, const CrossPairs& pairs) {
    auto c = cycle_tensors(model, pairs);
    auto xy = per_row_mse(c.fy.behavior, c.fyx.behavior);
    auto yx = per_row_mse(c.fx.behavior, c.fxy.behavior);
    if (model->has_domain_encoders()) {
        xy = xy + per_row_mse(c.fx.domain, c.fxy.domain);
        yx = yx + per_row_mse(c.fy.domain, c.fyx.domain);
    }
    return torch::cat({xy, yx}).mean();
}

namespace {

double checked(const char* name, const torch::Tensor& t) {
    const double v = t.item<double>();
    if (!std::isfinite(v)) throw NumericalFault(name, std::string("non-finite loss component ") + name);
    return v;
}

}  // namespace

namespace {

torch::Tensor interpolate_penalty(const std::function<torch::Tensor(const torch::Tensor&)>& critic,
                                  const torch::Tensor& a, const torch::Tensor& b, at::Generator& gen) {
    const int64_t n = std::min(a.size(0), b.size(0));
    require(n > 0, "gradient penalty needs rows on both sides");
    auto x0 = a.detach().narrow(0, 0, n), x1 = b.detach().narrow(0, 0, n);
    std::vector<int64_t> shape(x0.dim(), 1);
    shape[0] = n;
    auto eps = at::rand(shape, gen, x0.options());
    auto x = (eps * x0 + (1.0 - eps) * x1).requires_grad_(true);
    auto out = critic(x).sum();
    auto g = torch::autograd::grad({out}, {x}, {}, /*retain_graph=*/true, /*create_graph=*/true)[0];
    return (g.flatten(1).pow(2).sum(1).clamp_min(1e-24).sqrt() - 1.0).pow(2).mean();
}

}  // namespace

torch::Tensor critic_gradient_penalty(ForwardPass& fp, at::Generator& gen) {
    require_rows(fp);
    using enum SetId;
    auto& m = fp.model();
    auto rows = [&](std::initializer_list<SetId> sets, auto get) {
        std::vector<torch::Tensor> parts;
        for (auto s : sets) parts.push_back(get(s));
        return torch::cat(parts);
    };
    auto be = [&](SetId s) { return fp.behavior(s); };
    auto mlp = [](MlpHead& h) { return [h](const torch::Tensor& x) mutable { return h->forward(x); }; };

    auto gp = interpolate_penalty(mlp(m->dd_b), rows({kSE, kSN}, be), rows({kTN, kTL}, be), gen) +
              interpolate_penalty(mlp(m->bd_b), rows({kSE}, be), rows({kSN, kTN}, be), gen);
    if (m->has_domain_encoders()) {
        auto de = [&](SetId s) { return fp.domain(s); };
        gp = gp + interpolate_penalty(mlp(m->dd_d), rows({kSE, kSN}, de), rows({kTN, kTL}, de), gen) +
             interpolate_penalty(mlp(m->bd_d), rows({kSE}, de), rows({kSN, kTN}, de), gen);
    }
    for (Domain d : {Domain::kSource, Domain::kTarget}) {
        std::vector<torch::Tensor> real, fake;
        for (SetId s : kAllSets) {
            if (domain_of(s) != d) continue;
            real.push_back(fp.input(s));
            for (const auto& [x, y] : fake_pairs(s)) {
                const auto& t = fp.translation(x, y);
                if (t.size(0) > 0) fake.push_back(t);
            }
        }
        if (fake.empty()) continue;
        auto critic = [&m, d](const torch::Tensor& x) { return m->image_score(x, d); };
        gp = gp + interpolate_penalty(critic, torch::cat(real), torch::cat(fake), gen);
    }
    return gp;
}

TotalLosses total_losses(ForwardPass& fp, const LossWeights& w) {
    w.validate();
    auto pred = feature_prediction_loss(fp);
    auto adv = feature_adversarial_loss(fp);
    auto img_adv = image_adversarial_loss(fp);
    auto img_recon = image_reconstruction_loss(fp);
    auto feat_recon = feature_reconstruction_loss(fp);
    auto img_cycle = image_cycle_loss(fp);
    auto feat_cycle = feature_cycle_loss(fp);
    auto sim = feature_similarity_loss(fp);
    auto reg = feature_regularization_loss(fp, w.c_norm_d, w.c_norm_b);

    TotalLosses out;
    out.eg = w.feat_pred * pred + w.feat_adv * adv + w.img_adv * img_adv + w.img_recon * img_recon +
             w.feat_recon * feat_recon + w.img_cycle * img_cycle + w.feat_cycle * feat_cycle + w.feat_sim * sim +
             w.feat_reg * reg;
    out.fdid = w.feat_pred * pred - w.feat_adv * adv - w.img_adv * img_adv;

    auto& r = out.report;
    r.feat_pred = checked("feat_pred", pred);
    r.feat_adv = checked("feat_adv", adv);
    r.img_adv = checked("img_adv", img_adv);
    r.img_recon = checked("img_recon", img_recon);
    r.feat_recon = checked("feat_recon", feat_recon);
    r.img_cycle = checked("img_cycle", img_cycle);
    r.feat_cycle = checked("feat_cycle", feat_cycle);
    r.feat_sim = checked("feat_sim", sim);
    r.feat_reg = checked("feat_reg", reg);
    r.eg = checked("L_EG", out.eg);
    r.fdid = checked("L_FDID", out.fdid);
    return out;
}

TotalLosses total_losses(FeatureModel& model, const Batches& b, const LossWeights& w) {
    ForwardPass fp(model, b);
    return total_losses(fp, w);
}

RewardLoss d_rew_loss(RewardDiscriminator& d, const torch::Tensor& expert_features,
                      const torch::Tensor& learner_features, const torch::Tensor& mix, double gp_weight) {
    require(expert_features.size(0) > 0 && learner_features.size(0) > 0, "reward discriminator batch is empty");
    require(expert_features.size(0) == learner_features.size(0) && mix.size(0) == expert_features.size(0),
            "expert, learner and mixing batches must have equal length");
    require(gp_weight >= 0.0, "gradient penalty weight must be non-negative");
    auto e = expert_features.detach();
    auto l = learner_features.detach();

    auto log_d_expert = torch::log_sigmoid(d->logit(e)).mean();
    auto log_1m_d_learner = torch::log_sigmoid(-d->logit(l)).mean();

    auto a = mix.detach().reshape({-1, 1}).to(e.dtype());
    auto mixed = (a * e + (1.0 - a) * l).requires_grad_(true);
    auto out = d->forward(mixed);
    auto grad = torch::autograd::grad({out.sum()}, {mixed}, {}, /*retain_graph=*/true, /*create_graph=*/true)[0];
    auto gp = (grad.pow(2).sum(1).clamp_min(1e-24).sqrt() - 1.0).pow(2).mean();

    RewardLoss r;
    r.gradient_penalty = gp;
    r.value = log_d_expert + log_1m_d_learner + gp_weight * gp;
    r.objective = -(log_d_expert + log_1m_d_learner) + gp_weight * gp;
    return r;
}

RewardLoss d_rew_loss(RewardDiscriminator& d, const torch::Tensor& expert_features,
                      const torch::Tensor& learner_features, double gp_weight, at::Generator& gen) {
    auto mix = at::rand({expert_features.size(0)}, gen, expert_features.options().requires_grad(false));
    return d_rew_loss(d, expert_features, learner_features, mix, gp_weight);
}

torch::Tensor estimate_reward(RewardDiscriminator& d, const torch::Tensor& behavior_features) {
    return d->logit(behavior_features);
}

torch::Tensor estimate_reward(RewardDiscriminator& d, FeatureModel& model, const torch::Tensor& target_obs) {
    return d->logit(model->behavior(target_obs, Domain::kTarget));
}

double combine_sparse_reward(double r_il, bool reached_goal, double c, double r_goal) {
    if (!(c > 0.0)) throw ConfigError("reward scale c must be positive");
    return c * (r_il + (reached_goal ? r_goal : 0.0));
}

}  // namespace d3il

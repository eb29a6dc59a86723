#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "d3il/model.hpp"

namespace d3il {

struct LossWeights {
    double feat_pred = 0.01;
    double feat_adv = 0.01;
    double img_adv = 1.0;
    double img_recon = 100000.0;
    double feat_recon = 1000.0;
    double img_cycle = 100000.0;
    double feat_cycle = 10.0;
    double feat_sim = 1000.0;
    double feat_reg = 0.1;
    double c_norm_d = 1.0;
    double c_norm_b = 20.0;

    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

struct LossReport {
    double feat_pred = 0, feat_adv = 0, img_adv = 0, img_recon = 0, feat_recon = 0;
    double img_cycle = 0, feat_cycle = 0, feat_sim = 0, feat_reg = 0;
    double eg = 0, fdid = 0;
    // Critic regularizer added on top of L_FDID when enabled; not part of L_FDID itself.
    double critic_gp = 0;

    static const std::vector<std::string>& column_names();
    std::vector<double> values() const;
    static LossReport from_values(const std::vector<double>& v);
};

enum class SetId { kSE = 0, kSN = 1, kTN = 2, kTL = 3 };
inline constexpr std::array<SetId, 4> kAllSets{SetId::kSE, SetId::kSN, SetId::kTN, SetId::kTL};
Domain domain_of(SetId s);
const char* code(SetId s);

/// One minibatch per observation set, each (N, 4C, H, W).
struct Batches {
    torch::Tensor se, sn, tn, tl;
    const torch::Tensor& operator[](SetId s) const;
};

/// Fake pairs scored by the image discriminators: l^a(X) compares real X against generated
/// G(DE(o_x), BE(o_y)) for every (x, y) listed under X.
const std::vector<std::pair<SetId, SetId>>& fake_pairs(SetId real);

/// Set pairs zipped into the cross-domain cycle set (first member source, second target).
const std::vector<std::pair<SetId, SetId>>& cycle_set_pairs();

/// Lazily evaluated forward quantities shared by every loss on one bundle of batches. Pairs of
/// sets are combined index-wise: the i-th row of x goes with the i-th row of y.
class ForwardPass {
public:
    ForwardPass(FeatureModel& model, Batches batches);

    FeatureModel& model() { return model_; }
    const torch::Tensor& input(SetId s) const { return batches_[s]; }

    const torch::Tensor& behavior(SetId s);
    const torch::Tensor& domain(SetId s);
    /// ô = G(DE(o), BE(o))
    const torch::Tensor& reconstruction(SetId s);
    const torch::Tensor& reconstruction_behavior(SetId s);
    const torch::Tensor& reconstruction_domain(SetId s);
    /// ô_(x,y) = G_dom(x)(DE(o_x), BE(o_y))
    const torch::Tensor& translation(SetId x, SetId y);
    const torch::Tensor& translation_behavior(SetId x, SetId y);
    const torch::Tensor& translation_domain(SetId x, SetId y);
    /// G_dom(x)(DE(ô_(x,y)), BE(ô_(y,x)))
    const torch::Tensor& retranslation(SetId x, SetId y);

private:
    int64_t paired_rows(SetId x, SetId y) const;

    FeatureModel model_;
    Batches batches_;
    std::map<int, torch::Tensor> behavior_, domain_, recon_, recon_b_, recon_d_;
    std::map<std::pair<int, int>, torch::Tensor> trans_, trans_b_, trans_d_, retrans_;
};

torch::Tensor feature_prediction_loss(ForwardPass& fp);
torch::Tensor feature_adversarial_loss(ForwardPass& fp);
torch::Tensor image_adversarial_loss(ForwardPass& fp);
torch::Tensor image_reconstruction_loss(ForwardPass& fp);
torch::Tensor feature_reconstruction_loss(ForwardPass& fp);
torch::Tensor image_cycle_loss(ForwardPass& fp);
torch::Tensor feature_cycle_loss(ForwardPass& fp);
torch::Tensor feature_regularization_loss(ForwardPass& fp, double c_norm_d, double c_norm_b);
torch::Tensor feature_similarity_loss(ForwardPass& fp);

torch::Tensor feature_prediction_loss(FeatureModel& model, const Batches& b);
torch::Tensor feature_adversarial_loss(FeatureModel& model, const Batches& b);
torch::Tensor image_adversarial_loss(FeatureModel& model, const Batches& b);
torch::Tensor image_reconstruction_loss(FeatureModel& model, const Batches& b);
torch::Tensor feature_reconstruction_loss(FeatureModel& model, const Batches& b);
torch::Tensor feature_regularization_loss(FeatureModel& model, const Batches& b, double c_norm_d, double c_norm_b);
torch::Tensor feature_similarity_loss(FeatureModel& model, const Batches& b);

/// An explicit cycle pair batch: rows of x (domain dx) zipped with rows of y (domain dy).
struct CrossPairs {
    torch::Tensor x;
    Domain x_domain = Domain::kSource;
    torch::Tensor y;
    Domain y_domain = Domain::kTarget;
};
torch::Tensor image_cycle_loss(FeatureModel& model, const CrossPairs& pairs);
torch::Tensor feature_cycle_loss(FeatureModel& model, const CrossPairs& pairs);
torch::Tensor image_cycle_loss(FeatureModel& model, const Batches& b);
torch::Tensor feature_cycle_loss(FeatureModel& model, const Batches& b);

/// Penalty (‖∇_x C(x)‖ - 1)² at random interpolates, summed over every critic: DD_B and BD_B on
/// behavior features, DD_D and BD_D on domain features, ID_S and ID_T between real and generated
/// images. Inputs are detached, so only the critics receive gradient.
torch::Tensor critic_gradient_penalty(ForwardPass& fp, at::Generator& gen);

struct TotalLosses {
    torch::Tensor eg;
    torch::Tensor fdid;
    LossReport report;
};

/// Both objectives from one forward pass. Throws NumericalFault naming the first non-finite term.
TotalLosses total_losses(ForwardPass& fp, const LossWeights& w);
TotalLosses total_losses(FeatureModel& model, const Batches& b, const LossWeights& w);

/// L_D as written (D maximizes it): E log D(expert) + E log(1 - D(learner)) + gp_weight * GP.
struct RewardLoss {
    torch::Tensor value;
    /// What the optimizer minimizes: -(E log D(expert) + E log(1 - D(learner))) + gp_weight * GP.
    torch::Tensor objective;
    torch::Tensor gradient_penalty;
};

/// Features are the frozen encoder outputs; `mix` holds one coefficient per row in [0, 1].
RewardLoss d_rew_loss(RewardDiscriminator& d, const torch::Tensor& expert_features,
                      const torch::Tensor& learner_features, const torch::Tensor& mix, double gp_weight);
RewardLoss d_rew_loss(RewardDiscriminator& d, const torch::Tensor& expert_features,
                      const torch::Tensor& learner_features, double gp_weight, at::Generator& gen);

/// log D - log(1 - D) = the pre-sigmoid logit, per row.
torch::Tensor estimate_reward(RewardDiscriminator& d, const torch::Tensor& behavior_features);
torch::Tensor estimate_reward(RewardDiscriminator& d, FeatureModel& model, const torch::Tensor& target_obs);

/// c * (r_il + [reached_goal] * r_goal); c must be positive.
double combine_sparse_reward(double r_il, bool reached_goal, double c, double r_goal);

}  // namespace d3il

#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

#include "d3il/model.hpp"
#include "d3il/trainer.hpp"

namespace d3il {

/// Identity forward; backward multiplies the incoming gradient by -lambda.
class GradientReversal : public torch::autograd::Function<GradientReversal> {
public:
    static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& x, double lambda);
    static torch::autograd::tensor_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::tensor_list grad_out);
};

torch::Tensor gradient_reversal(const torch::Tensor& x, double lambda);

/// Third-person imitation baseline: one behavior encoder shared across domains, a behavior
/// classifier and a domain classifier behind a gradient reversal layer.
class TpilModelImpl : public torch::nn::Module {
public:
    explicit TpilModelImpl(const ArchConfig& arch);

    const ArchConfig& arch() const { return arch_; }
    torch::Tensor behavior(const torch::Tensor& x);
    /// Logits of P(expert) and P(source) from behavior features.
    torch::Tensor behavior_logit(const torch::Tensor& features);
    torch::Tensor domain_logit(const torch::Tensor& features);

    BehaviorEncoder be{nullptr};
    MlpHead bd{nullptr}, dd{nullptr};

private:
    ArchConfig arch_;
};
TORCH_MODULE(TpilModel);

TpilModel init_tpil(const ArchConfig& arch, std::uint64_t seed);

/// Labels: domain 1 = source, 0 = target; behavior 1 = expert, 0 = nonexpert.
struct TpilBatch {
    torch::Tensor obs;
    torch::Tensor domain_label;
    torch::Tensor behavior_label;
};

/// Batch-mean CE(BD(BE(o)), b) + lambda_d * CE(DD(GRL(BE(o))), d).
torch::Tensor tpil_loss(TpilModel& model, const TpilBatch& batch, double lambda_d, double lambda_g);

/// BD(BE(o)) in (0, 1), per row.
torch::Tensor tpil_reward(TpilModel& model, const torch::Tensor& obs);

struct TpilConfig {
    double lambda_d = 1.0;
    double lambda_g = 1.0;
    int n_epoch = 5000;
    int batch_per_set = 8;
    AdamConfig optimizer;
    std::uint64_t seed = 0;
    int log_every = 500;

    void validate() const;
};

/// Trains on SE (source, expert), SN (source, nonexpert) and TN (target, nonexpert). Returns the
/// per-epoch loss; with a non-empty `out_dir` also writes tpil_losses.csv and tpil_model.pt.
std::vector<double> train_tpil(TpilModel& model, const FeatureSets& sets, const TpilConfig& cfg,
                               const std::filesystem::path& out_dir = {});

/// Frozen encoder with BD probabilities as the fixed phase-2 reward.
RewardModel tpil_reward_model(TpilModel& model, const FeatureSets& sets);

void save_tpil(TpilModel& model, const std::filesystem::path& path);
TpilModel load_tpil(const std::filesystem::path& path);

}  // namespace d3il

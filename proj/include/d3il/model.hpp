#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "d3il/data.hpp"
#include "d3il/observation.hpp"

namespace d3il {

/// Shape contract for every network. `table3()` is the published layout; `micro()` is the
/// reduced variant used for finite-difference checks.
struct ArchConfig {
    int image_size = 32;
    int frame_channels = kColorChannels;
    int stack = kStackFrames;
    std::array<int, 6> conv_channels{16, 16, 32, 32, 64, 64};
    int domain_dim = 8;
    int feature_disc_hidden = 32;
    int reward_hidden = 100;
    bool use_domain_encoders = true;

    static ArchConfig table3(int image_size);
    static ArchConfig micro(int image_size = 4);

    void validate() const;
    int in_channels() const { return stack * frame_channels; }
    int feature_map() const { return image_size / 4; }
    int behavior_dim() const { return feature_map() * feature_map() * conv_channels[5]; }
    int effective_domain_dim() const { return use_domain_encoders ? domain_dim : 0; }

    bool operator==(const ArchConfig&) const = default;
};

inline constexpr std::array<int, 6> kConvStrides{1, 1, 2, 1, 2, 1};

/// Six 3x3 zero-padded convolutions with the stride ladder above.
class ConvStackImpl : public torch::nn::Module {
public:
    ConvStackImpl(int in_channels, const std::array<int, 6>& channels, bool relu_on_last);
    torch::Tensor forward(torch::Tensor x);

private:
    std::vector<torch::nn::Conv2d> convs_;
    bool relu_on_last_;
};
TORCH_MODULE(ConvStack);

/// (N, 4C, H, W) -> (N, (H/4)(W/4)*64). Final conv is linear.
class BehaviorEncoderImpl : public torch::nn::Module {
public:
    explicit BehaviorEncoderImpl(const ArchConfig& arch);
    torch::Tensor forward(torch::Tensor x);

private:
    ConvStack convs_{nullptr};
};
TORCH_MODULE(BehaviorEncoder);

/// (N, 4C, H, W) -> (N, 8).
class DomainEncoderImpl : public torch::nn::Module {
public:
    explicit DomainEncoderImpl(const ArchConfig& arch);
    torch::Tensor forward(torch::Tensor x);

private:
    ConvStack convs_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(DomainEncoder);

/// (domain feature, behavior feature) -> (N, 4C, H, W). The behavior feature is reshaped to its
/// (64, H/4, W/4) map and the domain feature is tiled over that map as extra channels.
class GeneratorImpl : public torch::nn::Module {
public:
    explicit GeneratorImpl(const ArchConfig& arch);
    torch::Tensor forward(torch::Tensor domain, torch::Tensor behavior);

private:
    ArchConfig arch_;
    std::vector<torch::nn::ConvTranspose2d> layers_;
};
TORCH_MODULE(Generator);

/// Two ReLU hidden layers and a linear scalar head.
class MlpHeadImpl : public torch::nn::Module {
public:
    MlpHeadImpl(int in, int hidden, int out = 1);
    torch::Tensor forward(torch::Tensor x);

private:
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, out_{nullptr};
};
TORCH_MODULE(MlpHead);

class ImageDiscriminatorImpl : public torch::nn::Module {
public:
    explicit ImageDiscriminatorImpl(const ArchConfig& arch);
    torch::Tensor forward(torch::Tensor x);

private:
    ConvStack convs_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ImageDiscriminator);

/// D_rew: behavior feature -> probability. The head is a sigmoid so log D and log(1 - D) stay finite.
class RewardDiscriminatorImpl : public torch::nn::Module {
public:
    RewardDiscriminatorImpl(int behavior_dim, int hidden);
    torch::Tensor logit(torch::Tensor feature);
    torch::Tensor forward(torch::Tensor feature) { return torch::sigmoid(logit(feature)); }

private:
    MlpHead net_{nullptr};
};
TORCH_MODULE(RewardDiscriminator);

/// The twelve-network feature model. With `use_domain_encoders == false` the domain encoders and
/// their discriminators (DD_D, BD_D) are absent and the generators see behavior features only.
class FeatureModelImpl : public torch::nn::Module {
public:
    explicit FeatureModelImpl(const ArchConfig& arch);

    const ArchConfig& arch() const { return arch_; }
    bool has_domain_encoders() const { return arch_.use_domain_encoders; }

    torch::Tensor behavior(const torch::Tensor& x, Domain d);
    /// (N, 8), or (N, 0) when domain encoders are disabled.
    torch::Tensor domain(const torch::Tensor& x, Domain d);
    torch::Tensor generate(const torch::Tensor& domain_feature, const torch::Tensor& behavior_feature, Domain d);
    torch::Tensor image_score(const torch::Tensor& x, Domain d);

    /// Encoders and generators (minimize L_EG).
    std::vector<torch::Tensor> encoder_generator_parameters();
    /// Feature and image discriminators (minimize L_FDID).
    std::vector<torch::Tensor> discriminator_parameters();

    BehaviorEncoder be_s{nullptr}, be_t{nullptr};
    DomainEncoder de_s{nullptr}, de_t{nullptr};
    Generator g_s{nullptr}, g_t{nullptr};
    MlpHead bd_b{nullptr}, dd_b{nullptr}, bd_d{nullptr}, dd_d{nullptr};
    ImageDiscriminator id_s{nullptr}, id_t{nullptr};

private:
    ArchConfig arch_;
};
TORCH_MODULE(FeatureModel);

/// Builds every network and fills parameters from a seeded fan-in-scaled uniform law.
FeatureModel init_model(const ArchConfig& arch, std::uint64_t seed);

/// Deterministic fan-in-scaled uniform fill of every parameter of `module`.
void init_parameters(torch::nn::Module& module, std::uint64_t seed);

struct Features {
    torch::Tensor domain;
    torch::Tensor behavior;
};

/// Runs DE_d and BE_d on a batch.
Features encode(FeatureModel& model, const torch::Tensor& x, Domain d);
torch::Tensor generate(FeatureModel& model, const torch::Tensor& domain_feature,
                       const torch::Tensor& behavior_feature, Domain d);

/// Squashed-Gaussian actor and twin critics with Polyak-averaged targets.
class ActorCriticImpl : public torch::nn::Module {
public:
    ActorCriticImpl(int state_dim, int action_dim, int hidden = 256);

    struct Sample {
        torch::Tensor action;    // in [-1, 1]
        torch::Tensor log_prob;  // (N)
    };
    Sample sample(const torch::Tensor& state, at::Generator& gen);
    torch::Tensor deterministic(const torch::Tensor& state);
    std::pair<torch::Tensor, torch::Tensor> q(const torch::Tensor& state, const torch::Tensor& action);
    std::pair<torch::Tensor, torch::Tensor> q_target(const torch::Tensor& state, const torch::Tensor& action);

    std::vector<torch::Tensor> actor_parameters();
    std::vector<torch::Tensor> critic_parameters();
    /// target <- rho * target + (1 - rho) * critic
    void polyak_update(double rho);

    int state_dim() const { return state_dim_; }
    int action_dim() const { return action_dim_; }

    MlpHead actor{nullptr}, q1{nullptr}, q2{nullptr}, q1_target{nullptr}, q2_target{nullptr};

private:
    std::pair<torch::Tensor, torch::Tensor> mean_log_std(const torch::Tensor& state);
    int state_dim_;
    int action_dim_;
};
TORCH_MODULE(ActorCritic);

/// (N, 4C, H, W) float tensor in [0, 1] from stacked uint8 observations.
torch::Tensor to_tensor(const std::vector<Observation>& batch, torch::Dtype dtype = torch::kFloat32);
torch::Tensor to_tensor(const Observation& o, torch::Dtype dtype = torch::kFloat32);

/// Order-sensitive hash of every parameter's bytes.
std::uint64_t parameter_checksum(const std::vector<torch::Tensor>& params);
std::int64_t parameter_count(torch::nn::Module& module);

}  // namespace d3il

#include "d3il/model.hpp"

#include <cmath>

#include "d3il/error.hpp"
#include "d3il/rng.hpp"

namespace d3il {

namespace nn = torch::nn;

ArchConfig ArchConfig::table3(int image_size) {
    ArchConfig a;
    a.image_size = image_size;
    a.validate();
    return a;
}

ArchConfig ArchConfig::micro(int image_size) {
    ArchConfig a;
    a.image_size = image_size;
    a.frame_channels = 1;
    a.conv_channels = {2, 2, 2, 2, 2, 2};
    a.domain_dim = 2;
    a.feature_disc_hidden = 3;
    a.reward_hidden = 3;
    a.validate();
    return a;
}

void ArchConfig::validate() const {
    if (image_size <= 0 || image_size % 4 != 0) {
        throw ConfigError("image size must be a positive multiple of 4, got " + std::to_string(image_size));
    }
    if (frame_channels <= 0 || stack <= 0 || domain_dim <= 0 || feature_disc_hidden <= 0 || reward_hidden <= 0) {
        throw ConfigError("network widths must be positive");
    }
    for (int c : conv_channels) {
        if (c <= 0) throw ConfigError("conv channel counts must be positive");
    }
}

ConvStackImpl::ConvStackImpl(int in_channels, const std::array<int, 6>& channels, bool relu_on_last)
    : relu_on_last_(relu_on_last) {
    int in = in_channels;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        auto conv = nn::Conv2d(nn::Conv2dOptions(in, channels[i], 3).stride(kConvStrides[i]).padding(1));
        convs_.push_back(register_module("conv" + std::to_string(i), conv));
        in = channels[i];
    }
}

torch::Tensor ConvStackImpl::forward(torch::Tensor x) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        x = convs_[i]->forward(x);
        if (i + 1 < convs_.size() || relu_on_last_) x = torch::relu(x);
    }
    return x;
}

BehaviorEncoderImpl::BehaviorEncoderImpl(const ArchConfig& arch) {
    convs_ = register_module("convs", ConvStack(arch.in_channels(), arch.conv_channels, false));
}

torch::Tensor BehaviorEncoderImpl::forward(torch::Tensor x) { return convs_->forward(x).flatten(1); }

DomainEncoderImpl::DomainEncoderImpl(const ArchConfig& arch) {
    convs_ = register_module("convs", ConvStack(arch.in_channels(), arch.conv_channels, true));
    head_ = register_module("head", nn::Linear(arch.behavior_dim(), arch.domain_dim));
}

torch::Tensor DomainEncoderImpl::forward(torch::Tensor x) { return head_->forward(convs_->forward(x).flatten(1)); }

GeneratorImpl::GeneratorImpl(const ArchConfig& arch) : arch_(arch) {
    const auto& c = arch.conv_channels;
    const std::array<int, 7> out{c[5], c[4], c[3], c[2], c[1], c[0], arch.in_channels()};
    const std::array<int, 7> stride{1, 1, 2, 1, 2, 1, 1};
    int in = c[5] + arch.effective_domain_dim();
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto opts = nn::ConvTranspose2dOptions(in, out[i], 3).stride(stride[i]).padding(1);
        if (stride[i] == 2) opts.output_padding(1);
        layers_.push_back(register_module("deconv" + std::to_string(i), nn::ConvTranspose2d(opts)));
        in = out[i];
    }
}

torch::Tensor GeneratorImpl::forward(torch::Tensor domain, torch::Tensor behavior) {
    const int64_t n = behavior.size(0);
    const int m = arch_.feature_map();
    require(behavior.dim() == 2 && behavior.size(1) == arch_.behavior_dim(),
            "generator: behavior feature length mismatch");
    require(domain.dim() == 2 && domain.size(0) == n && domain.size(1) == arch_.effective_domain_dim(),
            "generator: domain feature length mismatch");
    auto x = behavior.reshape({n, arch_.conv_channels[5], m, m});
    if (domain.size(1) > 0) {
        auto tiled = domain.reshape({n, domain.size(1), 1, 1}).expand({n, domain.size(1), m, m});
        x = torch::cat({x, tiled}, 1);
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i]->forward(x);
        if (i + 1 < layers_.size()) x = torch::relu(x);
    }
    return x;
}

MlpHeadImpl::MlpHeadImpl(int in, int hidden, int out) {
    fc1_ = register_module("fc1", nn::Linear(in, hidden));
    fc2_ = register_module("fc2", nn::Linear(hidden, hidden));
    out_ = register_module("out", nn::Linear(hidden, out));
}

torch::Tensor MlpHeadImpl::forward(torch::Tensor x) {
    x = torch::relu(fc1_->forward(x));
    x = torch::relu(fc2_->forward(x));
    return out_->forward(x);
}

ImageDiscriminatorImpl::ImageDiscriminatorImpl(const ArchConfig& arch) {
    convs_ = register_module("convs", ConvStack(arch.in_channels(), arch.conv_channels, true));
    head_ = register_module("head", nn::Linear(arch.behavior_dim(), 1));
}

torch::Tensor ImageDiscriminatorImpl::forward(torch::Tensor x) {
    return head_->forward(convs_->forward(x).flatten(1)).squeeze(1);
}

RewardDiscriminatorImpl::RewardDiscriminatorImpl(int behavior_dim, int hidden) {
    net_ = register_module("net", MlpHead(behavior_dim, hidden, 1));
}

torch::Tensor RewardDiscriminatorImpl::logit(torch::Tensor feature) { return net_->forward(feature).squeeze(1); }

FeatureModelImpl::FeatureModelImpl(const ArchConfig& arch) : arch_(arch) {
    arch_.validate();
    const int hidden = arch.feature_disc_hidden;
    be_s = register_module("be_s", BehaviorEncoder(arch));
    be_t = register_module("be_t", BehaviorEncoder(arch));
    if (arch.use_domain_encoders) {
        de_s = register_module("de_s", DomainEncoder(arch));
        de_t = register_module("de_t", DomainEncoder(arch));
    }
    g_s = register_module("g_s", Generator(arch));
    g_t = register_module("g_t", Generator(arch));
    bd_b = register_module("bd_b", MlpHead(arch.behavior_dim(), hidden));
    dd_b = register_module("dd_b", MlpHead(arch.behavior_dim(), hidden));
    if (arch.use_domain_encoders) {
        bd_d = register_module("bd_d", MlpHead(arch.domain_dim, hidden));
        dd_d = register_module("dd_d", MlpHead(arch.domain_dim, hidden));
    }
    id_s = register_module("id_s", ImageDiscriminator(arch));
    id_t = register_module("id_t", ImageDiscriminator(arch));
}

namespace {

void check_input(const ArchConfig& arch, const torch::Tensor& x) {
    require(x.dim() == 4 && x.size(1) == arch.in_channels() && x.size(2) == arch.image_size &&
                x.size(3) == arch.image_size,
            "observation batch shape does not match the model (" + std::to_string(arch.in_channels()) + "x" +
                std::to_string(arch.image_size) + "x" + std::to_string(arch.image_size) + ")");
}

}  // namespace

torch::Tensor FeatureModelImpl::behavior(const torch::Tensor& x, Domain d) {
    check_input(arch_, x);
    return d == Domain::kSource ? be_s->forward(x) : be_t->forward(x);
}

torch::Tensor FeatureModelImpl::domain(const torch::Tensor& x, Domain d) {
    check_input(arch_, x);
    if (!arch_.use_domain_encoders) return torch::zeros({x.size(0), 0}, x.options());
    return d == Domain::kSource ? de_s->forward(x) : de_t->forward(x);
}

torch::Tensor FeatureModelImpl::generate(const torch::Tensor& domain_feature, const torch::Tensor& behavior_feature,
                                         Domain d) {
    return d == Domain::kSource ? g_s->forward(domain_feature, behavior_feature)
                                : g_t->forward(domain_feature, behavior_feature);
}

torch::Tensor FeatureModelImpl::image_score(const torch::Tensor& x, Domain d) {
    return d == Domain::kSource ? id_s->forward(x) : id_t->forward(x);
}

namespace {

void append(std::vector<torch::Tensor>& out, torch::nn::Module* m) {
    if (m == nullptr) return;
    for (auto& p : m->parameters()) out.push_back(p);
}

}  // namespace

std::vector<torch::Tensor> FeatureModelImpl::encoder_generator_parameters() {
    std::vector<torch::Tensor> out;
    append(out, be_s.get());
    append(out, be_t.get());
    if (arch_.use_domain_encoders) {
        append(out, de_s.get());
        append(out, de_t.get());
    }
    append(out, g_s.get());
    append(out, g_t.get());
    return out;
}

std::vector<torch::Tensor> FeatureModelImpl::discriminator_parameters() {
    std::vector<torch::Tensor> out;
    append(out, bd_b.get());
    append(out, dd_b.get());
    if (arch_.use_domain_encoders) {
        append(out, bd_d.get());
        append(out, dd_d.get());
    }
    append(out, id_s.get());
    append(out, id_t.get());
    return out;
}

void init_parameters(torch::nn::Module& module, std::uint64_t seed) {
    torch::NoGradGuard no_grad;
    Rng rng(seed);
    auto fill = [&rng](torch::Tensor& t, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        std::vector<double> values(t.numel());
        for (auto& v : values) v = u(rng);
        auto src = torch::from_blob(values.data(), t.sizes(), torch::kFloat64).to(t.dtype());
        t.copy_(src);
    };
    for (auto& m : module.modules(/*include_self=*/true)) {
        torch::Tensor weight, bias;
        int64_t fan_in = 0;
        if (auto* conv = m->as<nn::Conv2d>()) {
            weight = conv->weight;
            bias = conv->bias;
            fan_in = weight.size(1) * weight.size(2) * weight.size(3);
        } else if (auto* deconv = m->as<nn::ConvTranspose2d>()) {
            weight = deconv->weight;
            bias = deconv->bias;
            fan_in = weight.size(0) * weight.size(2) * weight.size(3);
        } else if (auto* lin = m->as<nn::Linear>()) {
            weight = lin->weight;
            bias = lin->bias;
            fan_in = weight.size(1);
        } else {
            continue;
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        fill(weight, bound);
        if (bias.defined()) fill(bias, bound);
    }
}

FeatureModel init_model(const ArchConfig& arch, std::uint64_t seed) {
    FeatureModel model(arch);
    for (auto& child : model->named_children()) {
        init_parameters(*child.value(), stream_seed(seed, "init." + child.key()));
    }
    return model;
}

Features encode(FeatureModel& model, const torch::Tensor& x, Domain d) {
    return {model->domain(x, d), model->behavior(x, d)};
}

torch::Tensor generate(FeatureModel& model, const torch::Tensor& domain_feature, const torch::Tensor& behavior_feature,
                       Domain d) {
    return model->generate(domain_feature, behavior_feature, d);
}

ActorCriticImpl::ActorCriticImpl(int state_dim, int action_dim, int hidden)
    : state_dim_(state_dim), action_dim_(action_dim) {
    actor = register_module("actor", MlpHead(state_dim, hidden, 2 * action_dim));
    q1 = register_module("q1", MlpHead(state_dim + action_dim, hidden, 1));
    q2 = register_module("q2", MlpHead(state_dim + action_dim, hidden, 1));
    q1_target = register_module("q1_target", MlpHead(state_dim + action_dim, hidden, 1));
    q2_target = register_module("q2_target", MlpHead(state_dim + action_dim, hidden, 1));
    torch::NoGradGuard no_grad;
    auto src1 = q1->parameters(), src2 = q2->parameters();
    auto dst1 = q1_target->parameters(), dst2 = q2_target->parameters();
    for (std::size_t i = 0; i < src1.size(); ++i) {
        dst1[i].copy_(src1[i]);
        dst2[i].copy_(src2[i]);
        dst1[i].set_requires_grad(false);
        dst2[i].set_requires_grad(false);
    }
}

std::pair<torch::Tensor, torch::Tensor> ActorCriticImpl::mean_log_std(const torch::Tensor& state) {
    auto out = actor->forward(state);
    auto mean = out.narrow(1, 0, action_dim_);
    auto log_std = out.narrow(1, action_dim_, action_dim_).clamp(-20.0, 2.0);
    return {mean, log_std};
}

ActorCriticImpl::Sample ActorCriticImpl::sample(const torch::Tensor& state, at::Generator& gen) {
    auto [mean, log_std] = mean_log_std(state);
    auto std = log_std.exp();
    auto eps = at::randn(mean.sizes(), gen, mean.options());
    auto u = mean + std * eps;
    static const double kHalfLog2Pi = 0.5 * std::log(2.0 * M_PI);
    auto log_prob = (-0.5 * eps.pow(2) - log_std - kHalfLog2Pi).sum(1);
    // tanh change of variables, log(1 - tanh(u)^2) in a stable form
    log_prob = log_prob - (2.0 * (std::log(2.0) - u - torch::softplus(-2.0 * u))).sum(1);
    return {torch::tanh(u), log_prob};
}

torch::Tensor ActorCriticImpl::deterministic(const torch::Tensor& state) {
    return torch::tanh(mean_log_std(state).first);
}

std::pair<torch::Tensor, torch::Tensor> ActorCriticImpl::q(const torch::Tensor& state, const torch::Tensor& action) {
    auto sa = torch::cat({state, action}, 1);
    return {q1->forward(sa).squeeze(1), q2->forward(sa).squeeze(1)};
}

std::pair<torch::Tensor, torch::Tensor> ActorCriticImpl::q_target(const torch::Tensor& state,
                                                                  const torch::Tensor& action) {
    auto sa = torch::cat({state, action}, 1);
    return {q1_target->forward(sa).squeeze(1), q2_target->forward(sa).squeeze(1)};
}

std::vector<torch::Tensor> ActorCriticImpl::actor_parameters() { return actor->parameters(); }

std::vector<torch::Tensor> ActorCriticImpl::critic_parameters() {
    auto out = q1->parameters();
    for (auto& p : q2->parameters()) out.push_back(p);
    return out;
}

void ActorCriticImpl::polyak_update(double rho) {
    torch::NoGradGuard no_grad;
    auto src1 = q1->parameters(), src2 = q2->parameters();
    auto dst1 = q1_target->parameters(), dst2 = q2_target->parameters();
    for (std::size_t i = 0; i < src1.size(); ++i) {
        dst1[i].mul_(rho).add_(src1[i], 1.0 - rho);
        dst2[i].mul_(rho).add_(src2[i], 1.0 - rho);
    }
}

torch::Tensor to_tensor(const std::vector<Observation>& batch, torch::Dtype dtype) {
    require(!batch.empty(), "empty observation batch");
    const int h = batch.front().height, w = batch.front().width;
    const std::size_t per = static_cast<std::size_t>(h) * w * kObsChannels;
    auto raw = torch::empty({static_cast<int64_t>(batch.size()), h, w, kObsChannels}, torch::kUInt8);
    auto* dst = raw.data_ptr<std::uint8_t>();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        require(batch[i].height == h && batch[i].width == w && batch[i].pixels.size() == per,
                "observations in a batch must share one shape");
        std::copy(batch[i].pixels.begin(), batch[i].pixels.end(), dst + i * per);
    }
    return raw.permute({0, 3, 1, 2}).to(dtype).div_(255.0).contiguous();
}

torch::Tensor to_tensor(const Observation& o, torch::Dtype dtype) { return to_tensor(std::vector<Observation>{o}, dtype); }

std::uint64_t parameter_checksum(const std::vector<torch::Tensor>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params) {
        auto c = p.detach().contiguous();
        const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
        const std::size_t n = c.numel() * c.element_size();
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::int64_t parameter_count(torch::nn::Module& module) {
    std::int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

}  // namespace d3il

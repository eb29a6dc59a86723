#include "micro.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "d3il/rng.hpp"
#include "d3il/trainer.hpp"

namespace testing_support {

d3il::FeatureModel micro_model(std::uint64_t seed, bool domain_encoders) {
    auto arch = d3il::ArchConfig::micro(4);
    arch.use_domain_encoders = domain_encoders;
    auto m = d3il::init_model(arch, seed);
    m->to(torch::kDouble);
    // two-channel ReLU stacks die easily; positive biases keep every unit reachable
    torch::NoGradGuard ng;
    for (auto& p : m->named_parameters())
        if (p.key().find("bias") != std::string::npos) p.value().abs_().add_(0.1);
    return m;
}

d3il::Batches micro_batches(const d3il::ArchConfig& arch, int rows, std::uint64_t seed) {
    auto gen = d3il::make_generator(seed);
    auto draw = [&] {
        return at::rand({rows, arch.in_channels(), arch.image_size, arch.image_size}, gen,
                        torch::TensorOptions().dtype(torch::kDouble));
    };
    d3il::Batches b;
    b.se = draw();
    b.sn = draw();
    b.tn = draw();
    b.tl = draw();
    return b;
}

GradientCheck check_gradient(const std::function<torch::Tensor()>& loss, const std::vector<torch::Tensor>& params,
                             double h) {
    auto value = loss();
    auto grads = torch::autograd::grad({value}, params, {}, false, false, /*allow_unused=*/true);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    GradientCheck out;
    // losses with an inner gradient penalty need grad mode on, so perturb through a detached view
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto flat = params[p].detach().view(-1);
        auto g = grads[p].defined() ? grads[p].reshape(-1) : torch::zeros_like(flat);
        auto acc = flat.accessor<double, 1>();
        for (int64_t i = 0; i < flat.numel(); ++i) {
            const double orig = acc[i];
            acc[i] = orig + h;
            const double up = loss().item<double>();
            acc[i] = orig - h;
            const double down = loss().item<double>();
            acc[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = g[i].item<double>();
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            ++out.entries;
        }
    }
    out.analytic_norm = std::sqrt(a2);
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    out.relative_error = scale > 0.0 ? std::sqrt(diff2) / scale : 0.0;
    return out;
}

std::vector<NamedLoss> micro_loss_suite(d3il::FeatureModel& model, const d3il::Batches& b,
                                        d3il::RewardDiscriminator& d, const torch::Tensor& expert,
                                        const torch::Tensor& learner, const torch::Tensor& mix) {
    auto all = model->parameters();
    std::vector<NamedLoss> out{
        {"feat_pred", [&model, b] { return d3il::feature_prediction_loss(model, b); }, all},
        {"feat_adv", [&model, b] { return d3il::feature_adversarial_loss(model, b); }, all},
        {"img_adv", [&model, b] { return d3il::image_adversarial_loss(model, b); }, all},
        {"img_recon", [&model, b] { return d3il::image_reconstruction_loss(model, b); }, all},
        {"feat_recon", [&model, b] { return d3il::feature_reconstruction_loss(model, b); }, all},
        {"img_cycle", [&model, b] { return d3il::image_cycle_loss(model, b); }, all},
        {"feat_cycle", [&model, b] { return d3il::feature_cycle_loss(model, b); }, all},
        {"feat_reg", [&model, b] { return d3il::feature_regularization_loss(model, b, 1.0, 20.0); }, all},
        {"feat_sim", [&model, b] { return d3il::feature_similarity_loss(model, b); }, all},
        {"d_rew", [&d, expert, learner, mix] { return d3il::d_rew_loss(d, expert, learner, mix, 1.0).value; },
         d->parameters()},
    };
    return out;
}

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("d3il_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

void zero_parameters(torch::nn::Module& m) {
    torch::NoGradGuard ng;
    for (auto& p : m.parameters()) p.zero_();
}

void set_parameter(torch::nn::Module& m, const std::string& name, const std::vector<double>& values) {
    torch::NoGradGuard ng;
    for (auto& p : m.named_parameters(true)) {
        if (p.key() == name) {
            p.value().copy_(torch::tensor(values, torch::kDouble).reshape(p.value().sizes()));
            return;
        }
    }
    throw std::runtime_error("no parameter " + name);
}

ConstantWorld::ConstantWorld() : model(micro_model(3)) {
    for (auto* g : {model->g_s.get(), model->g_t.get()}) {
        zero_parameters(*g);
        set_parameter(*g, "deconv6.bias", {0.25, 0.5, 0.75, 1.0});
    }
    auto img = torch::ones({2, 4, 4, 4}, torch::kDouble);
    for (int c = 0; c < 4; ++c) img.select(1, c).fill_(0.25 * (c + 1));
    batches = {img, img.clone(), img.clone(), img.clone()};
}

d3il::RewardDiscriminator unit_gradient_discriminator() {
    d3il::RewardDiscriminator d(2, 3);
    d->to(torch::kDouble);
    zero_parameters(*d);
    // Hidden unit 1 sits at 1 + x0 > 0 for |x0| < 1, so the logit is 4 (1 + x0) - 4 = 4 x0.
    set_parameter(*d, "net.fc1.weight", {1, 0, 0, 0, 0, 0});
    set_parameter(*d, "net.fc1.bias", {1, 0, 0});
    set_parameter(*d, "net.fc2.weight", {1, 0, 0, 0, 0, 0, 0, 0, 0});
    set_parameter(*d, "net.out.weight", {4, 0, 0});
    set_parameter(*d, "net.out.bias", {-4});
    return d;
}

}  // namespace testing_support

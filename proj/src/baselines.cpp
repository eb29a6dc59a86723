#include "d3il/baselines.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "d3il/error.hpp"
#include "d3il/log.hpp"

namespace d3il {

namespace fs = std::filesystem;

torch::Tensor GradientReversal::forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& x,
                                        double lambda) {
    ctx->saved_data["lambda"] = lambda;
    return x.view_as(x);
}

torch::autograd::tensor_list GradientReversal::backward(torch::autograd::AutogradContext* ctx,
                                                        torch::autograd::tensor_list grad_out) {
    const double lambda = ctx->saved_data["lambda"].toDouble();
    return {grad_out[0] * -lambda, torch::Tensor()};
}

torch::Tensor gradient_reversal(const torch::Tensor& x, double lambda) { return GradientReversal::apply(x, lambda); }

TpilModelImpl::TpilModelImpl(const ArchConfig& arch) : arch_(arch) {
    arch_.validate();
    be = register_module("be", BehaviorEncoder(arch));
    bd = register_module("bd", MlpHead(arch.behavior_dim(), arch.feature_disc_hidden));
    dd = register_module("dd", MlpHead(arch.behavior_dim(), arch.feature_disc_hidden));
}

torch::Tensor TpilModelImpl::behavior(const torch::Tensor& x) {
    require(x.dim() == 4 && x.size(1) == arch_.in_channels() && x.size(2) == arch_.image_size,
            "observation batch shape does not match the TPIL model");
    return be->forward(x);
}

torch::Tensor TpilModelImpl::behavior_logit(const torch::Tensor& features) { return bd->forward(features).squeeze(1); }

torch::Tensor TpilModelImpl::domain_logit(const torch::Tensor& features) { return dd->forward(features).squeeze(1); }

TpilModel init_tpil(const ArchConfig& arch, std::uint64_t seed) {
    TpilModel model(arch);
    for (auto& child : model->named_children()) {
        init_parameters(*child.value(), stream_seed(seed, "tpil.init." + child.key()));
    }
    return model;
}

torch::Tensor tpil_loss(TpilModel& model, const TpilBatch& batch, double lambda_d, double lambda_g) {
    require(batch.obs.defined() && batch.domain_label.defined() && batch.behavior_label.defined(),
            "TPIL batch needs observations, domain labels and behavior labels");
    const auto n = batch.obs.size(0);
    require(n > 0 && batch.domain_label.numel() == n && batch.behavior_label.numel() == n,
            "TPIL labels must have one entry per observation");
    auto features = model->behavior(batch.obs);
    auto b = batch.behavior_label.to(features.dtype()).reshape({n});
    auto d = batch.domain_label.to(features.dtype()).reshape({n});
    auto behavior_ce = torch::binary_cross_entropy_with_logits(model->behavior_logit(features), b);
    auto domain_ce =
        torch::binary_cross_entropy_with_logits(model->domain_logit(gradient_reversal(features, lambda_g)), d);
    return behavior_ce + lambda_d * domain_ce;
}

torch::Tensor tpil_reward(TpilModel& model, const torch::Tensor& obs) {
    return torch::sigmoid(model->behavior_logit(model->behavior(obs)));
}

void TpilConfig::validate() const {
    if (lambda_d < 0.0 || lambda_g < 0.0) throw ConfigError("tpil lambdas must be non-negative");
    if (n_epoch < 1 || batch_per_set < 1) throw ConfigError("tpil epoch and batch counts must be positive");
    optimizer.validate("tpil.optimizer");
}

std::vector<double> train_tpil(TpilModel& model, const FeatureSets& sets, const TpilConfig& cfg,
                               const fs::path& out_dir) {
    cfg.validate();
    auto opt = make_adam(model->parameters(), cfg.optimizer);
    Rng rng = make_rng(cfg.seed, "tpil.batches");
    const auto n = static_cast<std::size_t>(cfg.batch_per_set);
    const auto dtype = model->parameters().front().scalar_type();
    auto labels = [&](float v) { return torch::full({static_cast<int64_t>(n)}, v, torch::kFloat32); };

    std::vector<double> history;
    history.reserve(cfg.n_epoch);
    for (int epoch = 1; epoch <= cfg.n_epoch; ++epoch) {
        TpilBatch batch;
        batch.obs = torch::cat({to_tensor(sample_minibatch(sets.se, n, rng), dtype),
                                to_tensor(sample_minibatch(sets.sn, n, rng), dtype),
                                to_tensor(sample_minibatch(sets.tn, n, rng), dtype)});
        batch.domain_label = torch::cat({labels(1), labels(1), labels(0)});
        batch.behavior_label = torch::cat({labels(1), labels(0), labels(0)});
        auto loss = tpil_loss(model, batch, cfg.lambda_d, cfg.lambda_g);
        const double v = loss.item<double>();
        if (!std::isfinite(v)) throw NumericalFault("tpil", "non-finite TPIL loss at epoch " + std::to_string(epoch));
        opt.zero_grad();
        loss.backward();
        opt.step();
        history.push_back(v);
        if (cfg.log_every > 0 && epoch % cfg.log_every == 0) {
            log_info("tpil epoch " + std::to_string(epoch) + "/" + std::to_string(cfg.n_epoch) +
                     " loss=" + std::to_string(v));
        }
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream os(out_dir / "tpil_losses.csv");
        if (!os) throw IoError("cannot write " + (out_dir / "tpil_losses.csv").string());
        os << "epoch,loss\n" << std::setprecision(17);
        for (std::size_t e = 0; e < history.size(); ++e) os << e + 1 << "," << history[e] << "\n";
        save_tpil(model, out_dir / "tpil_model.pt");
    }
    return history;
}

RewardModel tpil_reward_model(TpilModel& model, const FeatureSets&) {
    model->eval();
    RewardModel r;
    r.encode = [model](const torch::Tensor& x) mutable { return model->behavior(x); };
    r.fixed_reward = [model](const torch::Tensor& f) mutable { return torch::sigmoid(model->behavior_logit(f)); };
    return r;
}

void save_tpil(TpilModel& model, const fs::path& path) {
    auto a = new_checkpoint();
    write_arch(a, model->arch());
    torch::serialize::OutputArchive weights;
    model->save(weights);
    a.write("model", weights);
    save_checkpoint(a, path);
}

TpilModel load_tpil(const fs::path& path) {
    auto a = open_checkpoint(path);
    TpilModel model(read_arch(a));
    torch::serialize::InputArchive weights;
    a.read("model", weights);
    model->load(weights);
    return model;
}

}  // namespace d3il

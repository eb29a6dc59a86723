#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "d3il/analysis.hpp"
#include "d3il/error.hpp"
#include "support/micro.hpp"

using namespace d3il;

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, std::uint64_t seed, double shift = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd x(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) x(r, c) = n(rng) + (c == 0 ? shift : 0.0);
    return x;
}

Eigen::MatrixXd random_rotation(int d, std::uint64_t seed) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(d, d, seed));
    return qr.householderQ();
}

// Two labelled clusters: class 1 shifted along the first axis.
std::pair<Eigen::MatrixXd, std::vector<int>> two_clusters(int per_class, int dim, double shift, std::uint64_t seed) {
    Eigen::MatrixXd x(2 * per_class, dim);
    x.topRows(per_class) = gaussian(per_class, dim, seed, shift);
    x.bottomRows(per_class) = gaussian(per_class, dim, seed + 1);
    std::vector<int> y(2 * per_class, 0);
    std::fill(y.begin(), y.begin() + per_class, 1);
    return {x, y};
}

FeatureDump labelled_dump(int per_label, int dim, std::uint64_t seed) {
    FeatureDump d;
    const std::vector<std::string> labels{"SE", "SN", "TN", "TL", kGeneratedTE};
    d.behavior.resize(per_label * 5, dim);
    d.domain.resize(per_label * 5, 2);
    for (std::size_t k = 0; k < labels.size(); ++k) {
        d.behavior.middleRows(k * per_label, per_label) =
            gaussian(per_label, dim, seed + k, static_cast<double>(k)).cast<float>();
        d.domain.middleRows(k * per_label, per_label) = gaussian(per_label, 2, seed + 10 + k).cast<float>();
        for (int i = 0; i < per_label; ++i) d.labels.push_back(labels[k]);
    }
    d.model_id = "unit";
    return d;
}

}  // namespace

TEST(Probe, SeparatesDistinctClusters) {
    auto [x, y] = two_clusters(100, 4, 6.0, 1);
    EXPECT_GE(probe_accuracy(x, y), 0.99);
}

TEST(Probe, ChanceOnUnrelatedLabels) {
    auto x = gaussian(400, 5, 2);
    std::vector<int> y(400);
    std::mt19937_64 rng(3);
    for (auto& v : y) v = static_cast<int>(rng() % 2);
    EXPECT_NEAR(probe_accuracy(x, y), 0.5, 0.1);
}

TEST(Probe, IdenticalClassesAtChance) {
    auto x = gaussian(200, 3, 4);
    Eigen::MatrixXd both(400, 3);
    both << x, x;
    std::vector<int> y(400, 0);
    std::fill(y.begin(), y.begin() + 200, 1);
    EXPECT_NEAR(probe_accuracy(both, y), 0.5, 0.1);
}

TEST(Probe, InvariantUnderRotation) {
    for (std::uint64_t seed : {5u, 6u, 7u}) {
        auto [x, y] = two_clusters(80, 6, 1.0, seed);
        const Eigen::MatrixXd rotated = x * random_rotation(6, seed + 100);
        EXPECT_NEAR(probe_accuracy(rotated, y), probe_accuracy(x, y), 0.02) << "seed " << seed;
    }
}

TEST(Probe, Contracts) {
    auto x = gaussian(20, 2, 8);
    EXPECT_THROW(probe_accuracy(x, std::vector<int>(20, 1)), ContractError);
    EXPECT_THROW(probe_accuracy(x, std::vector<int>(19, 1)), ContractError);
    EXPECT_THROW(probe_accuracy(gaussian(3, 2, 9), {1, 0, 1}), ContractError);
}

TEST(Separability, ReportsOnLabelledDump) {
    auto d = labelled_dump(60, 4, 10);
    auto r = separability(d);
    // SE sits one unit from SN and two from TN along the first axis.
    EXPECT_GT(r.behavior_probe_accuracy, 0.7);
    EXPECT_GT(r.domain_probe_accuracy, 0.6);
    EXPECT_GT(r.cluster_distance_ratio, 0.0);
}

TEST(Separability, MissingClassIsNan) {
    auto d = labelled_dump(30, 3, 11);
    FeatureDump only_source;
    std::vector<std::size_t> keep = d.rows_with("SE");
    auto sn = d.rows_with("SN");
    keep.insert(keep.end(), sn.begin(), sn.end());
    only_source.behavior.resize(keep.size(), 3);
    only_source.domain.resize(keep.size(), 2);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        only_source.behavior.row(i) = d.behavior.row(keep[i]);
        only_source.domain.row(i) = d.domain.row(keep[i]);
        only_source.labels.push_back(d.labels[keep[i]]);
    }
    auto r = separability(only_source);
    EXPECT_FALSE(std::isnan(r.behavior_probe_accuracy));
    EXPECT_TRUE(std::isnan(r.domain_probe_accuracy));
}

TEST(Separability, ClusterRatio) {
    Eigen::MatrixXd a = gaussian(100, 2, 12), b = gaussian(100, 2, 12);
    EXPECT_NEAR(cluster_distance_ratio(a, b), 0.0, 1e-12);
    EXPECT_GT(cluster_distance_ratio(a, gaussian(100, 2, 13, 10.0)), 5.0);
}

TEST(Embedding, AxesOrthonormalAndCentered) {
    auto d = labelled_dump(40, 6, 14);
    auto e = embed_2d(d);
    EXPECT_TRUE((e.axes.transpose() * e.axes).isApprox(Eigen::Matrix2d::Identity(), 1e-10));
    EXPECT_LT(e.coords.colwise().mean().norm(), 1e-5);
    EXPECT_GE(e.explained_ratio(0), e.explained_ratio(1));
    EXPECT_LE(e.explained_ratio.sum(), 1.0 + 1e-12);
    auto again = embed_2d(d);
    EXPECT_EQ(e.coords, again.coords);
    for (int k = 0; k < 2; ++k) {
        Eigen::Index arg;
        e.axes.col(k).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(e.axes(arg, k), 0.0);
    }
}

TEST(Embedding, FilesWritten) {
    auto dir = testing_support::scratch_dir("embedding_files");
    auto d = labelled_dump(10, 3, 15);
    auto e = embed_2d(d);
    write_embedding_csv(d, e, dir / "embedding.csv");
    write_scatter_png(d, e, dir / "embedding.png", 64);
    std::ifstream csv(dir / "embedding.csv");
    std::string line;
    int lines = 0;
    std::getline(csv, line);
    EXPECT_EQ(line.rfind("# explained_ratio ", 0), 0u);
    std::getline(csv, line);
    EXPECT_EQ(line, "label,pc1,pc2");
    while (std::getline(csv, line)) ++lines;
    EXPECT_EQ(lines, 50);
    std::ifstream png(dir / "embedding.png", std::ios::binary);
    char magic[4] = {};
    png.read(magic, 4);
    EXPECT_EQ(std::string(magic + 1, 3), "PNG");
}

TEST(FeatureDumpTest, RoundTrip) {
    auto dir = testing_support::scratch_dir("dump_roundtrip");
    auto d = labelled_dump(7, 5, 16);
    d.write(dir);
    auto back = FeatureDump::read(dir);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.behavior, d.behavior);
    EXPECT_EQ(back.domain, d.domain);
    EXPECT_EQ(back.model_id, "unit");
    EXPECT_THROW(FeatureDump::read(dir / "missing"), IoError);
    d.labels[0] = "XX";
    EXPECT_THROW(d.validate(), ContractError);
}

TEST(FeatureDumpTest, FromModel) {
    auto arch = ArchConfig::micro(16);
    arch.frame_channels = kColorChannels;
    auto model = init_model(arch, 1);
    EnvSpec src;
    src.episode_length = 20;
    EnvSpec tgt = src;
    tgt.domain_shift = DomainShift::kRecolor;
    FeatureSets s;
    s.se = collect_set(src, CollectionPolicy::kScriptedExpert, 20, 1, kSE);
    s.sn = collect_set(src, CollectionPolicy::kUniformRandom, 20, 2, kSN);
    s.tn = collect_set(tgt, CollectionPolicy::kUniformRandom, 20, 3, kTN);
    s.tl = init_tl_from_tn(s.tn);
    auto d = dump_features(model, s, 8, 0, "micro");
    EXPECT_EQ(d.rows(), 40u);
    EXPECT_EQ(d.behavior.cols(), arch.behavior_dim());
    EXPECT_EQ(d.domain.cols(), arch.domain_dim);
    EXPECT_EQ(d.rows_with(kGeneratedTE).size(), 8u);
    auto tpil = init_tpil(arch, 1);
    auto t = dump_features(tpil, s, 8);
    EXPECT_EQ(t.rows(), 32u);
    EXPECT_TRUE(t.rows_with(kGeneratedTE).empty());

    auto probe = reward_probe_sets(model, s, 5, 0);
    ASSERT_EQ(probe.size(), 2u);
    EXPECT_EQ(probe[0].second.size(), 5u);
}

TEST(RewardInspectionTest, MeansAndCsv) {
    auto dir = testing_support::scratch_dir("reward_inspection");
    Observation o;
    o.height = o.width = 16;
    o.pixels.assign(16 * 16 * 12, 0);
    std::vector<Observation> dark(3, o), bright(2, o);
    for (auto& b : bright) std::fill(b.pixels.begin(), b.pixels.end(), 255);
    for (int i = 0; i < 3; ++i) dark[i].step = i;
    // Mean pixel intensity as the reward: 0 for dark, 1 for bright.
    auto reward = [](const torch::Tensor& x) { return x.mean({1, 2, 3}); };
    auto r = reward_inspection(reward, {{"TN", dark}, {kGeneratedTE, bright}}, 2);
    EXPECT_EQ(r.rows.size(), 5u);
    EXPECT_DOUBLE_EQ(r.mean_by_label["TN"], 0.0);
    EXPECT_DOUBLE_EQ(r.mean_by_label[kGeneratedTE], 1.0);
    EXPECT_EQ(r.rows[2].step, 2);
    r.write_csv(dir / "rewards.csv");
    std::ifstream is(dir / "rewards.csv");
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header, "label,episode,step,reward");
    auto nan_reward = [](const torch::Tensor& x) { return torch::full({x.size(0)}, std::nan("")); };
    EXPECT_THROW(reward_inspection(nan_reward, {{"TN", dark}}), NumericalFault);
}

TEST(Ablation, CellLadder) {
    const auto& names = ablation_cell_names();
    EXPECT_EQ(names.size(), 7u);
    auto base = desk_profile();
    auto basic = ablation_cell(base, "basic");
    EXPECT_EQ(basic.phase1.weights.img_recon, 0.0);
    EXPECT_EQ(basic.phase1.weights.feat_cycle, 0.0);
    auto recon = ablation_cell(base, "plus_recon");
    EXPECT_GT(recon.phase1.weights.img_recon, 0.0);
    EXPECT_EQ(recon.phase1.weights.img_cycle, 0.0);
    auto full = ablation_cell(base, "full");
    EXPECT_EQ(full.phase1.weights.feat_cycle, base.phase1.weights.feat_cycle);
    EXPECT_EQ(ablation_cell(base, "reward_bd_b").phase2.reward_source, RewardSource::kBehaviorDiscriminator);
    EXPECT_FALSE(ablation_cell(base, "no_domain_encoders").use_domain_encoders);
    EXPECT_THROW(ablation_cell(base, "plus_everything"), ConfigError);
}

TEST(Ablation, TableCsv) {
    auto dir = testing_support::scratch_dir("ablation_csv");
    AblationTable t;
    t.rows.push_back({"full", {1.0, 3.0}, 2.0, 1.0, false, {}});
    t.rows.push_back({"basic", {}, 0.0, 0.0, true, "nan in L_EG"});
    t.write_csv(dir / "ablation.csv");
    std::ifstream is(dir / "ablation.csv");
    std::string header, row1, row2;
    std::getline(is, header);
    std::getline(is, row1);
    std::getline(is, row2);
    EXPECT_EQ(header, "cell,mean_return,std_return,n_seeds,returns,fault");
    EXPECT_EQ(row1, "full,2,1,2,1;3,");
    EXPECT_EQ(row2, "basic,0,0,0,,nan in L_EG");
}

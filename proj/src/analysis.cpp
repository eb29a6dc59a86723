#include "d3il/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>

#include <png.h>
#include <nlohmann/json.hpp>

#include "d3il/error.hpp"
#include "d3il/log.hpp"
#include "d3il/pipeline.hpp"

namespace d3il {

namespace fs = std::filesystem;
using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

constexpr int kEncodeBatch = 256;

Eigen::MatrixXf to_eigen(const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    require(c.dim() == 2, "expected a 2-D feature tensor");
    return Eigen::Map<const RowMajorF>(c.data_ptr<float>(), c.size(0), c.size(1));
}

std::vector<Observation> first_n(const ObservationSet& set, int n) {
    require(n >= 0 && static_cast<std::size_t>(n) <= set.size(),
            "set " + set.label().code() + " has fewer than " + std::to_string(n) + " observations");
    std::vector<Observation> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) out.push_back(set.at(i));
    return out;
}

// Runs `f` over observation batches and stacks the (rows, k) results.
torch::Tensor batched(const std::vector<Observation>& obs, const std::function<torch::Tensor(const torch::Tensor&)>& f) {
    std::vector<torch::Tensor> parts;
    for (std::size_t i = 0; i < obs.size(); i += kEncodeBatch) {
        const auto end = std::min(obs.size(), i + kEncodeBatch);
        std::vector<Observation> chunk(obs.begin() + i, obs.begin() + end);
        parts.push_back(f(to_tensor(chunk)));
    }
    return torch::cat(parts);
}

void append(FeatureDump& dump, const std::string& label, const Eigen::MatrixXf& b, const Eigen::MatrixXf& d) {
    const auto old_rows = dump.behavior.rows();
    if (old_rows == 0) {
        dump.behavior = b;
        dump.domain = d;
    } else {
        require(b.cols() == dump.behavior.cols() && d.cols() == dump.domain.cols(), "feature widths differ");
        dump.behavior.conservativeResize(old_rows + b.rows(), Eigen::NoChange);
        dump.behavior.bottomRows(b.rows()) = b;
        dump.domain.conservativeResize(old_rows + d.rows(), Eigen::NoChange);
        dump.domain.bottomRows(d.rows()) = d;
    }
    dump.labels.insert(dump.labels.end(), b.rows(), label);
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXf& m, const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = m.row(rows[i]).cast<double>();
    return out;
}

void write_floats(const Eigen::MatrixXf& m, const fs::path& path) {
    RowMajorF r = m;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(r.data()), static_cast<std::streamsize>(r.size() * sizeof(float)));
    if (!os) throw IoError("short write to " + path.string());
}

Eigen::MatrixXf read_floats(const fs::path& path, Eigen::Index rows, Eigen::Index cols) {
    RowMajorF r(rows, cols);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("missing feature file " + path.string());
    is.read(reinterpret_cast<char*>(r.data()), static_cast<std::streamsize>(r.size() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(r.size() * sizeof(float))) {
        throw IoError("truncated feature file " + path.string());
    }
    return r;
}

}  // namespace

std::vector<std::size_t> FeatureDump::rows_with(const std::string& label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == label) out.push_back(i);
    }
    return out;
}

void FeatureDump::validate() const {
    require(static_cast<Eigen::Index>(labels.size()) == behavior.rows() &&
                static_cast<Eigen::Index>(labels.size()) == domain.rows(),
            "feature dump rows are not aligned with its labels");
    static const std::set<std::string> known{"SE", "SN", "TN", "TL", kGeneratedTE};
    for (const auto& l : labels) require(known.count(l) > 0, "unknown feature dump label '" + l + "'");
}

void FeatureDump::write(const fs::path& dir) const {
    validate();
    fs::create_directories(dir);
    write_floats(behavior, dir / "behavior.f32");
    write_floats(domain, dir / "domain.f32");
    nlohmann::json m;
    m["model_id"] = model_id;
    m["rows"] = rows();
    m["behavior_dim"] = behavior.cols();
    m["domain_dim"] = domain.cols();
    m["dtype"] = "float32-le-rowmajor";
    m["labels"] = labels;
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
    os << m.dump(1) << "\n";
}

FeatureDump FeatureDump::read(const fs::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("missing feature dump manifest " + (dir / "manifest.json").string());
    nlohmann::json m;
    try {
        is >> m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("unreadable feature dump manifest: " + std::string(e.what()));
    }
    FeatureDump d;
    d.model_id = m.at("model_id").get<std::string>();
    d.labels = m.at("labels").get<std::vector<std::string>>();
    const auto rows = m.at("rows").get<Eigen::Index>();
    d.behavior = read_floats(dir / "behavior.f32", rows, m.at("behavior_dim").get<Eigen::Index>());
    d.domain = read_floats(dir / "domain.f32", rows, m.at("domain_dim").get<Eigen::Index>());
    d.validate();
    return d;
}

FeatureDump dump_features(FeatureModel& model, const FeatureSets& sets, int n_per_set, std::uint64_t seed,
                          const std::string& model_id) {
    torch::NoGradGuard no_grad;
    FeatureDump dump;
    dump.model_id = model_id;
    auto add = [&](const std::string& label, const std::vector<Observation>& obs, Domain dom) {
        auto b = batched(obs, [&](const torch::Tensor& x) { return model->behavior(x, dom); });
        auto d = batched(obs, [&](const torch::Tensor& x) { return model->domain(x, dom); });
        append(dump, label, to_eigen(b), to_eigen(d));
    };
    add("SE", first_n(sets.se, n_per_set), Domain::kSource);
    add("SN", first_n(sets.sn, n_per_set), Domain::kSource);
    add("TN", first_n(sets.tn, n_per_set), Domain::kTarget);
    add("TL", first_n(sets.tl, n_per_set), Domain::kTarget);

    Rng rng = make_rng(seed, "dump.pairs");
    const auto tn_idx = sample_indices(sets.tn.size(), n_per_set, rng);
    const auto se_idx = sample_indices(sets.se.size(), n_per_set, rng);
    std::vector<Observation> tn, se;
    for (int i = 0; i < n_per_set; ++i) {
        tn.push_back(sets.tn.at(tn_idx[i]));
        se.push_back(sets.se.at(se_idx[i]));
    }
    std::vector<torch::Tensor> b_parts, d_parts;
    for (int i = 0; i < n_per_set; i += kEncodeBatch) {
        const int end = std::min(n_per_set, i + kEncodeBatch);
        auto te = generate_target_expert(model, to_tensor(std::vector<Observation>(tn.begin() + i, tn.begin() + end)),
                                         to_tensor(std::vector<Observation>(se.begin() + i, se.begin() + end)));
        b_parts.push_back(model->behavior(te, Domain::kTarget));
        d_parts.push_back(model->domain(te, Domain::kTarget));
    }
    append(dump, kGeneratedTE, to_eigen(torch::cat(b_parts)), to_eigen(torch::cat(d_parts)));
    dump.validate();
    return dump;
}

FeatureDump dump_features(TpilModel& model, const FeatureSets& sets, int n_per_set, const std::string& model_id) {
    torch::NoGradGuard no_grad;
    FeatureDump dump;
    dump.model_id = model_id;
    auto add = [&](const std::string& label, const ObservationSet& set) {
        auto b = batched(first_n(set, n_per_set), [&](const torch::Tensor& x) { return model->behavior(x); });
        append(dump, label, to_eigen(b), Eigen::MatrixXf(b.size(0), 0));
    };
    add("SE", sets.se);
    add("SN", sets.sn);
    add("TN", sets.tn);
    add("TL", sets.tl);
    dump.validate();
    return dump;
}

double probe_accuracy(const Eigen::MatrixXd& x, const std::vector<int>& y, double ridge, int folds, std::uint64_t seed) {
    const auto n = x.rows();
    require(static_cast<Eigen::Index>(y.size()) == n, "probe labels must match feature rows");
    require(folds >= 2 && n >= folds, "probe needs at least as many rows as folds");
    require(std::any_of(y.begin(), y.end(), [](int v) { return v > 0; }) &&
                std::any_of(y.begin(), y.end(), [](int v) { return v <= 0; }),
            "probe needs both classes");

    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, "probe.folds");
    std::shuffle(order.begin(), order.end(), rng);

    long correct = 0;
    for (int f = 0; f < folds; ++f) {
        std::vector<Eigen::Index> train, test;
        for (Eigen::Index i = 0; i < n; ++i) (i % folds == f ? test : train).push_back(order[i]);
        Eigen::MatrixXd xt(train.size(), x.cols());
        Eigen::VectorXd yt(train.size());
        for (std::size_t i = 0; i < train.size(); ++i) {
            xt.row(i) = x.row(train[i]);
            yt(i) = y[train[i]] > 0 ? 1.0 : -1.0;
        }
        const Eigen::RowVectorXd mu = xt.colwise().mean();
        const double y_mean = yt.mean();
        xt.rowwise() -= mu;
        yt.array() -= y_mean;

        Eigen::VectorXd w;
        if (xt.rows() <= xt.cols()) {
            Eigen::MatrixXd k = xt * xt.transpose();
            k.diagonal().array() += ridge;
            w = xt.transpose() * k.ldlt().solve(yt);
        } else {
            Eigen::MatrixXd g = xt.transpose() * xt;
            g.diagonal().array() += ridge;
            w = g.ldlt().solve(xt.transpose() * yt);
        }
        for (auto i : test) {
            const double score = (x.row(i) - mu).dot(w) + y_mean;
            if ((score >= 0.0) == (y[i] > 0)) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

double cluster_distance_ratio(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    require(a.rows() > 0 && b.rows() > 0 && a.cols() == b.cols(), "cluster distance needs two non-empty groups");
    const Eigen::RowVectorXd ma = a.colwise().mean(), mb = b.colwise().mean();
    auto spread = [](const Eigen::MatrixXd& m, const Eigen::RowVectorXd& mu) {
        return std::sqrt((m.rowwise() - mu).rowwise().squaredNorm().mean());
    };
    const double within = 0.5 * (spread(a, ma) + spread(b, mb));
    const double between = (ma - mb).norm();
    if (within == 0.0) return between == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return between / within;
}

SeparabilityReport separability(const FeatureDump& dump, std::uint64_t seed) {
    dump.validate();
    const std::set<std::string> present(dump.labels.begin(), dump.labels.end());
    require(present.size() >= 2, "separability needs at least two labels in the dump");

    const auto se = dump.rows_with("SE"), sn = dump.rows_with("SN"), tn = dump.rows_with("TN");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    SeparabilityReport r{nan, nan, nan};

    if (!se.empty() && (!sn.empty() || !tn.empty())) {
        std::size_t take_sn = std::min(sn.size(), se.size() - se.size() / 2);
        std::size_t take_tn = std::min(tn.size(), se.size() - take_sn);
        take_sn = std::min(sn.size(), se.size() - take_tn);
        std::vector<std::size_t> rows = se;
        rows.insert(rows.end(), sn.begin(), sn.begin() + take_sn);
        rows.insert(rows.end(), tn.begin(), tn.begin() + take_tn);
        std::vector<int> y(rows.size(), 0);
        std::fill(y.begin(), y.begin() + se.size(), 1);
        r.behavior_probe_accuracy = probe_accuracy(select_rows(dump.behavior, rows), y, kProbeRidge, kProbeFolds, seed);
    }
    if (!sn.empty() && !tn.empty()) {
        std::vector<std::size_t> rows = sn;
        rows.insert(rows.end(), tn.begin(), tn.end());
        std::vector<int> y(rows.size(), 0);
        std::fill(y.begin(), y.begin() + sn.size(), 1);
        const auto x = select_rows(dump.behavior, rows);
        r.domain_probe_accuracy = probe_accuracy(x, y, kProbeRidge, kProbeFolds, seed);
        r.cluster_distance_ratio = cluster_distance_ratio(x.topRows(sn.size()), x.bottomRows(tn.size()));
    }
    return r;
}

Embedding embed_2d(const FeatureDump& dump) {
    dump.validate();
    require(dump.rows() > 0, "cannot embed an empty dump");
    require(dump.behavior.cols() >= 2, "embedding needs at least two feature dimensions");
    Eigen::MatrixXd x = dump.behavior.cast<double>();
    x.rowwise() -= x.colwise().mean();

    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
    Embedding e;
    e.axes = svd.matrixV().leftCols(2);
    for (int k = 0; k < 2; ++k) {
        Eigen::Index arg;
        e.axes.col(k).cwiseAbs().maxCoeff(&arg);
        if (e.axes(arg, k) < 0.0) e.axes.col(k) *= -1.0;
    }
    const auto s = svd.singularValues();
    const double total = s.squaredNorm();
    e.explained_ratio.setZero();
    for (int k = 0; k < 2 && k < s.size(); ++k) e.explained_ratio(k) = total > 0.0 ? s(k) * s(k) / total : 0.0;
    e.coords = x * e.axes;
    return e;
}

void write_embedding_csv(const FeatureDump& dump, const Embedding& e, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "# explained_ratio " << e.explained_ratio(0) << " " << e.explained_ratio(1) << "\n";
    os << "label,pc1,pc2\n" << std::setprecision(9);
    for (std::size_t i = 0; i < dump.rows(); ++i) {
        os << dump.labels[i] << "," << e.coords(i, 0) << "," << e.coords(i, 1) << "\n";
    }
}

namespace {

std::array<std::uint8_t, 3> label_colour(const std::string& label) {
    if (label == "SE") return {214, 39, 40};
    if (label == "SN") return {255, 127, 14};
    if (label == "TN") return {31, 119, 180};
    if (label == "TL") return {23, 190, 207};
    return {44, 160, 44};
}

}  // namespace

void write_scatter_png(const FeatureDump& dump, const Embedding& e, const fs::path& path, int size) {
    require(size >= 16, "plot size too small");
    std::vector<std::uint8_t> img(static_cast<std::size_t>(size) * size * 3, 255);
    const int margin = size / 20;
    const double x0 = e.coords.col(0).minCoeff(), x1 = e.coords.col(0).maxCoeff();
    const double y0 = e.coords.col(1).minCoeff(), y1 = e.coords.col(1).maxCoeff();
    auto scale = [&](double v, double lo, double hi) {
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
        return margin + static_cast<int>(std::lround(t * (size - 1 - 2 * margin)));
    };
    for (std::size_t i = 0; i < dump.rows(); ++i) {
        const int px = scale(e.coords(i, 0), x0, x1);
        const int py = size - 1 - scale(e.coords(i, 1), y0, y1);
        const auto c = label_colour(dump.labels[i]);
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int x = px + dx, y = py + dy;
                if (x < 0 || y < 0 || x >= size || y >= size) continue;
                std::copy(c.begin(), c.end(), img.begin() + (static_cast<std::size_t>(y) * size + x) * 3);
            }
        }
    }

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng failed writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, size, size, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < size; ++y) png_write_row(png, img.data() + static_cast<std::size_t>(y) * size * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

void RewardInspection::write_csv(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "label,episode,step,reward\n" << std::setprecision(17);
    for (const auto& r : rows) os << r.label << "," << r.episode << "," << r.step << "," << r.reward << "\n";
}

RewardInspection reward_inspection(const ObservationReward& reward,
                                   const std::vector<std::pair<std::string, std::vector<Observation>>>& labeled,
                                   int batch) {
    require(batch > 0, "batch must be positive");
    torch::NoGradGuard no_grad;
    RewardInspection out;
    for (const auto& [label, obs] : labeled) {
        double sum = 0.0;
        for (std::size_t i = 0; i < obs.size(); i += batch) {
            const auto end = std::min(obs.size(), i + static_cast<std::size_t>(batch));
            auto r = reward(to_tensor(std::vector<Observation>(obs.begin() + i, obs.begin() + end)))
                         .to(torch::kFloat64)
                         .contiguous();
            require(r.numel() == static_cast<int64_t>(end - i), "reward function returned the wrong row count");
            const double* p = r.data_ptr<double>();
            for (std::size_t k = i; k < end; ++k) {
                const double v = p[k - i];
                if (!std::isfinite(v)) throw NumericalFault("reward_inspection", "non-finite reward for " + label);
                out.rows.push_back({label, obs[k].episode, obs[k].step, v});
                sum += v;
            }
        }
        if (!obs.empty()) out.mean_by_label[label] = sum / static_cast<double>(obs.size());
    }
    return out;
}

ObservationReward d3il_observation_reward(FeatureModel& model, RewardDiscriminator& d) {
    return [model, d](const torch::Tensor& obs) mutable { return estimate_reward(d, model, obs); };
}

std::vector<std::pair<std::string, std::vector<Observation>>> reward_probe_sets(FeatureModel& model,
                                                                                const FeatureSets& sets, int n,
                                                                                std::uint64_t seed) {
    require(n > 0, "probe size must be positive");
    torch::NoGradGuard no_grad;
    Rng rng = make_rng(seed, "reward_probe");
    const auto tn_idx = sample_indices(sets.tn.size(), n, rng);
    const auto pair_tn = sample_indices(sets.tn.size(), n, rng);
    const auto pair_se = sample_indices(sets.se.size(), n, rng);
    std::vector<Observation> tn, te;
    for (int i = 0; i < n; ++i) {
        tn.push_back(sets.tn.at(tn_idx[i]));
        te.push_back(generate_target_expert(model, sets.tn.at(pair_tn[i]), sets.se.at(pair_se[i])));
    }
    return {{kGeneratedTE, std::move(te)}, {"TN", std::move(tn)}};
}

const std::vector<std::string>& ablation_cell_names() {
    static const std::vector<std::string> names{"basic",      "plus_recon",  "plus_image_cycle",  "plus_similarity",
                                                "full",       "reward_bd_b", "no_domain_encoders"};
    return names;
}

ExperimentConfig ablation_cell(const ExperimentConfig& base, const std::string& cell) {
    const auto& names = ablation_cell_names();
    const auto it = std::find(names.begin(), names.end(), cell);
    if (it == names.end()) throw ConfigError("unknown ablation toggle '" + cell + "'");
    auto c = base;
    auto& w = c.phase1.weights;
    const auto rung = it - names.begin();
    if (rung < 4) w.feat_cycle = 0.0;
    if (rung < 3) w.feat_sim = 0.0;
    if (rung < 2) w.img_cycle = 0.0;
    if (rung < 1) w.img_recon = w.feat_recon = 0.0;
    if (cell == "reward_bd_b") c.phase2.reward_source = RewardSource::kBehaviorDiscriminator;
    if (cell == "no_domain_encoders") c.use_domain_encoders = false;
    return c;
}

void AblationTable::write_csv(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "cell,mean_return,std_return,n_seeds,returns,fault\n" << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.cell << "," << r.mean << "," << r.stddev << "," << r.returns.size() << ",";
        for (std::size_t i = 0; i < r.returns.size(); ++i) os << (i ? ";" : "") << r.returns[i];
        os << "," << (r.numerical_fault ? r.fault : "") << "\n";
    }
}

AblationTable run_ablation(const AblationGrid& grid, const fs::path& out_dir) {
    require(!grid.cells.empty() && !grid.seeds.empty(), "ablation grid needs cells and seeds");
    std::vector<ExperimentConfig> cells;
    for (const auto& name : grid.cells) cells.push_back(ablation_cell(grid.base, name));

    AblationTable table;
    for (const auto& name : grid.cells) table.rows.push_back({name, {}, 0.0, 0.0, false, {}});

    for (auto seed : grid.seeds) {
        auto data_cfg = grid.base;
        data_cfg.seed = seed;
        const auto sets = collect_sets(data_cfg);
        for (std::size_t k = 0; k < cells.size(); ++k) {
            auto cfg = cells[k];
            cfg.seed = seed;
            auto& row = table.rows[k];
            const auto dir = out_dir.empty() ? fs::path{} : out_dir / row.cell / ("seed" + std::to_string(seed));
            if (!dir.empty()) {
                cfg.output_dir = dir;
                write_resolved_config(cfg, dir);
            }
            log_info("ablation cell " + row.cell + " seed " + std::to_string(seed));
            try {
                auto model = run_phase1(cfg, sets, dir.empty() ? dir : RunLayout{dir}.features());
                auto run = run_phase2(cfg, model, sets, dir.empty() ? dir : RunLayout{dir}.policy());
                row.returns.push_back(run.final_eval.mean);
            } catch (const NumericalFault& e) {
                log_warn("ablation cell " + row.cell + " hit a numerical fault: " + e.what());
                row.numerical_fault = true;
                row.fault = e.component();
            }
        }
    }
    for (auto& r : table.rows) {
        if (r.returns.empty()) continue;
        const double n = static_cast<double>(r.returns.size());
        r.mean = std::accumulate(r.returns.begin(), r.returns.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : r.returns) ss += (v - r.mean) * (v - r.mean);
        r.stddev = std::sqrt(ss / n);
    }
    if (!out_dir.empty()) table.write_csv(out_dir / "ablation.csv");
    return table;
}

}  // namespace d3il

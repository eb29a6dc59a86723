#include "d3il/data.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "d3il/error.hpp"
#include "d3il/serialize.hpp"

namespace d3il {

namespace fs = std::filesystem;

std::string SetLabel::code() const {
    std::string s(2, '?');
    s[0] = domain == Domain::kSource ? 'S' : 'T';
    s[1] = behavior == Behavior::kExpert ? 'E' : behavior == Behavior::kNonexpert ? 'N' : 'L';
    return s;
}

SetLabel SetLabel::parse(const std::string& code) {
    if (code.size() != 2 || (code[0] != 'S' && code[0] != 'T') ||
        (code[1] != 'E' && code[1] != 'N' && code[1] != 'L')) {
        throw ConfigError("bad set label '" + code + "'");
    }
    SetLabel l;
    l.domain = code[0] == 'S' ? Domain::kSource : Domain::kTarget;
    l.behavior = code[1] == 'E' ? Behavior::kExpert : code[1] == 'N' ? Behavior::kNonexpert : Behavior::kLearner;
    return l;
}

std::string to_string(CollectionPolicy p) {
    switch (p) {
        case CollectionPolicy::kScriptedExpert: return "scripted_expert";
        case CollectionPolicy::kUniformRandom: return "uniform_random";
        case CollectionPolicy::kMedium: return "medium";
    }
    return "uniform_random";
}

CollectionPolicy parse_collection_policy(const std::string& s) {
    if (s == "scripted_expert") return CollectionPolicy::kScriptedExpert;
    if (s == "uniform_random") return CollectionPolicy::kUniformRandom;
    if (s == "medium") return CollectionPolicy::kMedium;
    throw ConfigError("unknown collection policy '" + s + "'");
}

ObservationSet::ObservationSet(SetLabel label, EnvSpec spec, CollectionPolicy policy, std::uint64_t seed)
    : label_(label), spec_(std::move(spec)), policy_(policy), seed_(seed) {}

void ObservationSet::add_episode(std::vector<PackedFrame> frames) {
    require(static_cast<int>(frames.size()) == spec_.episode_length + 1,
            "episode must hold episode_length + 1 frames");
    for (const auto& f : frames) {
        require(f.height == spec_.image_size && f.width == spec_.image_size, "frame size does not match set spec");
    }
    episodes_.push_back(std::move(frames));
}

std::size_t ObservationSet::size() const {
    return episodes_.size() * static_cast<std::size_t>(spec_.episode_length);
}

Observation ObservationSet::at(std::size_t index) const {
    require(index < size(), "observation index out of range");
    const std::size_t len = spec_.episode_length;
    const std::size_t e = index / len;
    const int t = static_cast<int>(index % len) + 1;  // observation after step t
    const auto& frames = episodes_[e];
    auto frame = [&](int k) -> const PackedFrame& { return frames[std::max(0, t - 3 + k)]; };
    Observation o = stack_frames(frame(0), frame(1), frame(2), frame(3));
    o.episode = static_cast<int>(e);
    o.step = t;
    return o;
}

std::string ObservationSet::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& ep : episodes_) {
        for (const auto& f : ep) {
            for (std::uint8_t b : f.rgb) {
                h ^= b;
                h *= 0x100000001b3ULL;
            }
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

bool ObservationSet::operator==(const ObservationSet& other) const {
    return label_ == other.label_ && spec_ == other.spec_ && policy_ == other.policy_ && seed_ == other.seed_ &&
           episodes_ == other.episodes_;
}

ObservationSet collect_set(const EnvSpec& spec, CollectionPolicy policy, int n_demo, std::uint64_t seed,
                           SetLabel label) {
    require(n_demo > 0 && n_demo % spec.episode_length == 0, "n_demo must be a positive multiple of episode_length");
    const SynthEnv env(spec);
    ObservationSet set(label, spec, policy, seed);
    Rng action_rng = make_rng(seed, "collect.actions");
    std::bernoulli_distribution explore(0.5);
    const int episodes = n_demo / spec.episode_length;
    for (int e = 0; e < episodes; ++e) {
        auto [state, obs] = env.reset(stream_seed(seed, "collect.episode." + std::to_string(e)));
        std::vector<PackedFrame> frames;
        frames.reserve(spec.episode_length + 1);
        frames.push_back(state.frames.back());
        bool done = false;
        while (!done) {
            std::vector<double> action;
            switch (policy) {
                case CollectionPolicy::kScriptedExpert: action = env.scripted_expert(state); break;
                case CollectionPolicy::kUniformRandom: action = uniform_random_action(spec.action_dim(), action_rng); break;
                case CollectionPolicy::kMedium:
                    action = explore(action_rng) ? uniform_random_action(spec.action_dim(), action_rng)
                                                 : env.scripted_expert(state);
                    break;
            }
            auto result = env.step(state, action);
            frames.push_back(result.state.frames.back());
            done = result.done;
            state = std::move(result.state);
        }
        set.add_episode(std::move(frames));
    }
    return set;
}

ObservationSet init_tl_from_tn(const ObservationSet& tn) {
    require(tn.label() == kTN, "init_tl_from_tn expects a (target, nonexpert) set, got " + tn.label().code());
    ObservationSet tl = tn;
    tl.relabel(kTL);
    return tl;
}

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, Rng& rng) {
    require(n <= population, "minibatch of " + std::to_string(n) + " requested from a set of " +
                                 std::to_string(population));
    std::vector<std::size_t> idx(population);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // partial Fisher-Yates
    for (std::size_t i = 0; i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, population - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(n);
    return idx;
}

std::vector<Observation> sample_minibatch(const ObservationSet& set, std::size_t n, Rng& rng) {
    const auto idx = sample_indices(set.size(), n, rng);
    std::vector<Observation> out;
    out.reserve(n);
    for (auto i : idx) out.push_back(set.at(i));
    return out;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char*>(b.data()), 4);
    if (!is) throw IoError("truncated episode header");
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string episode_file(std::size_t e) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "episode_%05zu.bin", e);
    return buf;
}

}  // namespace

void write_set(const ObservationSet& set, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    for (std::size_t e = 0; e < set.episode_count(); ++e) {
        const auto path = dir / episode_file(e);
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot write " + path.string());
        const auto& frames = set.episode_frames(e);
        put_u32(os, static_cast<std::uint32_t>(frames.front().height));
        put_u32(os, static_cast<std::uint32_t>(frames.front().width));
        put_u32(os, kColorChannels);
        put_u32(os, static_cast<std::uint32_t>(frames.size()));
        for (const auto& f : frames) os.write(reinterpret_cast<const char*>(f.rgb.data()), f.rgb.size());
        if (!os) throw IoError("write failed for " + path.string());
    }

    nlohmann::json manifest{
        {"format", "d3il-observation-set"},
        {"version", 1},
        {"label", set.label().code()},
        {"spec", set.spec()},
        {"policy", to_string(set.policy())},
        {"n_demo", set.size()},
        {"seed", set.seed()},
        {"episodes", set.episode_count()},
        {"checksum", set.checksum()},
    };
    std::ofstream ms(dir / "manifest.json");
    if (!ms) throw IoError("cannot write manifest in " + dir.string());
    ms << manifest.dump(2) << "\n";
}

ObservationSet read_set(const fs::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream ms(manifest_path);
    if (!ms) throw IoError("missing dataset manifest " + manifest_path.string());
    nlohmann::json manifest;
    try {
        ms >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("unreadable manifest " + manifest_path.string() + ": " + e.what());
    }
    ObservationSet set(SetLabel::parse(manifest.at("label").get<std::string>()), manifest.at("spec").get<EnvSpec>(),
                       parse_collection_policy(manifest.at("policy").get<std::string>()),
                       manifest.at("seed").get<std::uint64_t>());
    const auto episodes = manifest.at("episodes").get<std::size_t>();
    for (std::size_t e = 0; e < episodes; ++e) {
        const auto path = dir / episode_file(e);
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("missing episode blob " + path.string());
        const int h = static_cast<int>(get_u32(is));
        const int w = static_cast<int>(get_u32(is));
        const auto c = get_u32(is);
        const auto t = get_u32(is);
        if (c != kColorChannels) throw IoError("unexpected channel count in " + path.string());
        std::vector<PackedFrame> frames(t);
        for (auto& f : frames) {
            f.height = h;
            f.width = w;
            f.rgb.resize(static_cast<std::size_t>(h) * w * c);
            is.read(reinterpret_cast<char*>(f.rgb.data()), f.rgb.size());
            if (!is) throw IoError("truncated episode blob " + path.string());
        }
        set.add_episode(std::move(frames));
    }
    if (set.checksum() != manifest.at("checksum").get<std::string>()) {
        throw IoError("checksum mismatch for dataset " + dir.string());
    }
    return set;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    require(capacity > 0, "replay buffer capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
    if (entries_.size() < capacity_) {
        entries_.push_back(std::move(t));
        return;
    }
    entries_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
}

std::vector<const Transition*> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
    require(!entries_.empty(), "cannot sample from an empty replay buffer");
    std::uniform_int_distribution<std::size_t> pick(0, entries_.size() - 1);
    std::vector<const Transition*> out(n);
    for (auto& p : out) p = &entries_[pick(rng)];
    return out;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
    require(i < entries_.size(), "replay index out of range");
    if (entries_.size() < capacity_) return entries_[i];
    return entries_[(head_ + i) % capacity_];
}

}  // namespace d3il

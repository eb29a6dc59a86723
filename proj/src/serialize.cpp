#include "d3il/serialize.hpp"

#include "d3il/error.hpp"

namespace d3il {

void to_json(nlohmann::json& j, const EnvSpec& spec) {
    j = nlohmann::json{
        {"task_family", to_string(spec.task_family)},
        {"image_size", spec.image_size},
        {"episode_length", spec.episode_length},
        {"domain_shift", to_string(spec.domain_shift)},
        {"shift_params",
         {{"hue_degrees", spec.shift_params.hue_degrees},
          {"tilt_degrees", spec.shift_params.tilt_degrees},
          {"link_count", spec.shift_params.link_count}}},
        {"seed", spec.seed},
    };
}

void from_json(const nlohmann::json& j, EnvSpec& spec) {
    try {
        EnvSpec out;
        out.task_family = parse_task_family(j.value("task_family", to_string(out.task_family)));
        if (j.contains("image_height") || j.contains("image_width")) {
            const int h = j.at("image_height").get<int>();
            const int w = j.at("image_width").get<int>();
            if (h != w) throw ConfigError("non-square image " + std::to_string(h) + "x" + std::to_string(w));
            out.image_size = h;
        }
        out.image_size = j.value("image_size", out.image_size);
        out.episode_length = j.value("episode_length", out.episode_length);
        out.domain_shift = parse_domain_shift(j.value("domain_shift", to_string(out.domain_shift)));
        if (j.contains("shift_params")) {
            const auto& p = j.at("shift_params");
            out.shift_params.hue_degrees = p.value("hue_degrees", 0.0);
            out.shift_params.tilt_degrees = p.value("tilt_degrees", 0.0);
            out.shift_params.link_count = p.value("link_count", 1);
        }
        out.seed = j.value("seed", std::uint64_t{0});
        out.validate();
        spec = out;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed env spec: ") + e.what());
    }
}

}  // namespace d3il

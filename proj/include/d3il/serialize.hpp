#pragma once

#include <nlohmann/json.hpp>

#include "d3il/envs.hpp"

namespace d3il {

void to_json(nlohmann::json& j, const EnvSpec& spec);
void from_json(const nlohmann::json& j, EnvSpec& spec);

}  // namespace d3il

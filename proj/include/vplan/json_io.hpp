#pragma once

// JSON helpers shared by the persistence code. Config files may carry
// // and /* */ comments.

#include "vplan/common.hpp"
#include "vplan/corpus.hpp"

#include <json.hpp>

#include <string>

namespace vplan {

inline nlohmann::json parse_json(const std::string& text, const std::string& where) {
    try {
        return nlohmann::json::parse(text, nullptr, true, /*ignore_comments=*/true);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(where + ": " + e.what());
    }
}

nlohmann::json to_json(const WorldConfig& c);
WorldConfig world_config_from_json(const nlohmann::json& j);

}  // namespace vplan

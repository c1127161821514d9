#pragma once

// JSON mappings for the shared domain types.

#include "cor/sample.hpp"
#include "cor/trace.hpp"
#include "json.hpp"

namespace cor {

void to_json(nlohmann::json& j, const ReasoningTrace& t);
void from_json(const nlohmann::json& j, ReasoningTrace& t);

void to_json(nlohmann::json& j, const Violation& v);
void from_json(const nlohmann::json& j, Violation& v);

void to_json(nlohmann::json& j, const RegionAnnotation& r);
void from_json(const nlohmann::json& j, RegionAnnotation& r);

void to_json(nlohmann::json& j, const Sample& s);
void from_json(const nlohmann::json& j, Sample& s);

// Uncertainty is stored as its decimal string so precision survives.
UncertaintyScore parse_uncertainty(std::string_view text);

}  // namespace cor

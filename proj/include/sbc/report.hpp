#pragma once

#include "sbc/metrics.hpp"
#include "sbc/prune.hpp"

#include <json.hpp>

#include <string>

namespace sbc {

// Machine-readable run reports. Every CLI subcommand emits one JSON document
// with the shared envelope {version, command, config} plus per-command
// sections; the shape is pinned by the schema below and the checked-in copy
// in docs/report.schema.json. wall_ms fields are the only run-dependent
// values; everything else is deterministic for fixed seed and flags.

extern const char* const kReportSchemaText;

nlohmann::json report_schema();

/// Subset JSON-Schema checker (type, properties, required, items, enum,
/// additionalProperties, minimum). Throws InvalidArgument with the offending
/// path on violation.
void validate_schema(const nlohmann::json& doc, const nlohmann::json& schema);

/// Validates against the embedded report schema.
void validate_report(const nlohmann::json& doc);

nlohmann::json to_json(const ModuleCompressionStats& m);
nlohmann::json to_json(const CompressionReport& r);
nlohmann::json to_json(const SopsReport& r);
nlohmann::json to_json(const FidelityReport& r);

/// Shared envelope; callers attach command-specific sections afterwards.
nlohmann::json make_report(const std::string& command,
                           nlohmann::json config);

/// Serialize with a stable key order and fixed formatting, then write.
void write_report(const std::string& path, const nlohmann::json& doc);

}  // namespace sbc

#include "sbc/report.hpp"

#include <fstream>

namespace sbc {

using nlohmann::json;

const char* const kReportSchemaText = R"json({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "compression run report",
  "type": "object",
  "required": ["version", "command", "config"],
  "properties": {
    "version": {"type": "integer", "minimum": 1},
    "command": {"enum": ["prune", "quantize", "eval", "sops", "gen"]},
    "config": {"type": "object"},
    "method": {"type": "string"},
    "modules": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["index", "name", "d_in", "d_out", "replication", "proxy_loss", "wall_ms"],
        "properties": {
          "index": {"type": "integer", "minimum": 0},
          "name": {"type": "string"},
          "d_in": {"type": "integer", "minimum": 1},
          "d_out": {"type": "integer", "minimum": 1},
          "replication": {"type": "integer", "minimum": 1},
          "prunable": {"type": "integer", "minimum": 0},
          "pruned": {"type": "integer", "minimum": 0},
          "sparsity": {"type": "number", "minimum": 0},
          "proxy_loss": {"type": "number", "minimum": 0},
          "wall_ms": {"type": "number", "minimum": 0},
          "bits": {"type": "integer", "minimum": 2},
          "rtn_fallback_rows": {"type": "integer", "minimum": 0}
        },
        "additionalProperties": false
      }
    },
    "totals": {
      "type": "object",
      "required": ["proxy_loss", "wall_ms"],
      "properties": {
        "prunable": {"type": "integer", "minimum": 0},
        "pruned": {"type": "integer", "minimum": 0},
        "sparsity": {"type": "number", "minimum": 0},
        "proxy_loss": {"type": "number", "minimum": 0},
        "wall_ms": {"type": "number", "minimum": 0},
        "rtn_fallback_rows": {"type": "integer", "minimum": 0}
      },
      "additionalProperties": false
    },
    "accuracy": {
      "type": "object",
      "required": ["top1", "samples"],
      "properties": {
        "top1": {"type": "number", "minimum": 0},
        "samples": {"type": "integer", "minimum": 0}
      },
      "additionalProperties": false
    },
    "fidelity": {
      "type": "object",
      "required": ["output_vrd", "module_vrd"],
      "properties": {
        "output_vrd": {"type": "number", "minimum": 0},
        "module_vrd": {"type": "array", "items": {"type": "number", "minimum": 0}}
      },
      "additionalProperties": false
    },
    "sops": {
      "type": "object",
      "required": ["modules", "sops_total", "sops_avg", "macs_total", "macs_avg", "samples"],
      "properties": {
        "modules": {
          "type": "array",
          "items": {
            "type": "object",
            "required": ["index", "name", "real_input", "ops_total", "ops_avg"],
            "properties": {
              "index": {"type": "integer", "minimum": 0},
              "name": {"type": "string"},
              "real_input": {"type": "boolean"},
              "ops_total": {"type": "integer", "minimum": 0},
              "ops_avg": {"type": "number", "minimum": 0}
            },
            "additionalProperties": false
          }
        },
        "sops_total": {"type": "integer", "minimum": 0},
        "sops_avg": {"type": "number", "minimum": 0},
        "macs_total": {"type": "integer", "minimum": 0},
        "macs_avg": {"type": "number", "minimum": 0},
        "samples": {"type": "integer", "minimum": 0}
      },
      "additionalProperties": false
    },
    "teacher": {
      "type": "object",
      "required": ["layer_rates", "outputs"],
      "properties": {
        "layer_rates": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "outputs": {"type": "object"}
      },
      "additionalProperties": false
    }
  },
  "additionalProperties": false
})json";

json report_schema() { return json::parse(kReportSchemaText); }

namespace {

bool type_matches(const json& doc, const std::string& type) {
  if (type == "object") return doc.is_object();
  if (type == "array") return doc.is_array();
  if (type == "string") return doc.is_string();
  if (type == "boolean") return doc.is_boolean();
  if (type == "integer") return doc.is_number_integer();
  if (type == "number") return doc.is_number();
  if (type == "null") return doc.is_null();
  throw InvalidArgument("schema: unsupported type keyword " + type);
}

void check(const json& doc, const json& schema, const std::string& path) {
  if (schema.contains("enum")) {
    bool hit = false;
    for (const json& cand : schema["enum"])
      if (doc == cand) {
        hit = true;
        break;
      }
    if (!hit)
      throw InvalidArgument("report schema: " + path + ": value not in enum");
  }
  if (schema.contains("type") &&
      !type_matches(doc, schema["type"].get<std::string>()))
    throw InvalidArgument("report schema: " + path + ": expected type " +
                          schema["type"].get<std::string>());
  if (schema.contains("minimum") && doc.is_number() &&
      doc.get<double>() < schema["minimum"].get<double>())
    throw InvalidArgument("report schema: " + path + ": below minimum");
  if (doc.is_object()) {
    if (schema.contains("required"))
      for (const json& key : schema["required"])
        if (!doc.contains(key.get<std::string>()))
          throw InvalidArgument("report schema: " + path +
                                ": missing required key " +
                                key.get<std::string>());
    const json* props =
        schema.contains("properties") ? &schema["properties"] : nullptr;
    bool closed = schema.contains("additionalProperties") &&
                  schema["additionalProperties"].is_boolean() &&
                  !schema["additionalProperties"].get<bool>();
    for (auto it = doc.begin(); it != doc.end(); ++it) {
      if (props && props->contains(it.key()))
        check(it.value(), (*props)[it.key()], path + "/" + it.key());
      else if (closed)
        throw InvalidArgument("report schema: " + path + ": unexpected key " +
                              it.key());
    }
  }
  if (doc.is_array() && schema.contains("items")) {
    int i = 0;
    for (const json& el : doc)
      check(el, schema["items"], path + "/" + std::to_string(i++));
  }
}

}  // namespace

void validate_schema(const json& doc, const json& schema) {
  check(doc, schema, "");
}

void validate_report(const json& doc) { validate_schema(doc, report_schema()); }

json to_json(const ModuleCompressionStats& m) {
  json j;
  j["index"] = m.index;
  j["name"] = m.name;
  j["d_in"] = m.d_in;
  j["d_out"] = m.d_out;
  j["replication"] = m.replication;
  j["proxy_loss"] = m.proxy_loss;
  j["wall_ms"] = m.wall_ms;
  if (m.bits > 0) {
    j["bits"] = m.bits;
    j["rtn_fallback_rows"] = m.rtn_fallback_rows;
  } else {
    j["prunable"] = m.prunable;
    j["pruned"] = m.pruned;
    j["sparsity"] = m.sparsity;
  }
  return j;
}

json to_json(const CompressionReport& r) {
  json j;
  j["method"] = r.method;
  json mods = json::array();
  bool quant = !r.modules.empty() && r.modules.front().bits > 0;
  long fallback = 0;
  for (const auto& m : r.modules) {
    mods.push_back(to_json(m));
    fallback += m.rtn_fallback_rows;
  }
  j["modules"] = std::move(mods);
  json totals;
  totals["proxy_loss"] = r.proxy_loss_total;
  totals["wall_ms"] = r.wall_ms_total;
  if (quant) {
    totals["rtn_fallback_rows"] = fallback;
  } else {
    totals["prunable"] = r.prunable_total;
    totals["pruned"] = r.pruned_total;
    totals["sparsity"] = r.sparsity_total;
  }
  j["totals"] = std::move(totals);
  return j;
}

json to_json(const SopsReport& r) {
  json j;
  json mods = json::array();
  for (const auto& m : r.modules)
    mods.push_back(json{{"index", m.index},
                        {"name", m.name},
                        {"real_input", m.real_input},
                        {"ops_total", m.ops_total},
                        {"ops_avg", m.ops_avg}});
  j["modules"] = std::move(mods);
  j["sops_total"] = r.sops_total;
  j["sops_avg"] = r.sops_avg;
  j["macs_total"] = r.macs_total;
  j["macs_avg"] = r.macs_avg;
  j["samples"] = r.samples;
  return j;
}

json to_json(const FidelityReport& r) {
  json j;
  j["output_vrd"] = r.output_vrd;
  j["module_vrd"] = r.module_vrd;
  return j;
}

json make_report(const std::string& command, json config) {
  json j;
  j["version"] = 1;
  j["command"] = command;
  j["config"] = std::move(config);
  return j;
}

void write_report(const std::string& path, const json& doc) {
  validate_report(doc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument(path + ": cannot open for writing");
  out << doc.dump(2) << "\n";
  if (!out) throw InvalidArgument(path + ": write failed");
}

}  // namespace sbc

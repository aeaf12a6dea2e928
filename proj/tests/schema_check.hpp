#pragma once

#include <string>

#include <json.hpp>

namespace blora::testing {

// Minimal JSON-Schema (draft-07 subset) checker covering what the shipped
// report schema uses: $ref into #/definitions, type, const, required,
// properties and items.
inline bool schema_validate(const nlohmann::json& schema, const nlohmann::json& value,
                            const nlohmann::json& root, std::string& err) {
    using nlohmann::json;
    if (schema.contains("$ref")) {
        std::string ref = schema["$ref"].get<std::string>();
        const std::string prefix = "#/definitions/";
        if (ref.rfind(prefix, 0) != 0) {
            err = "unsupported $ref " + ref;
            return false;
        }
        return schema_validate(root["definitions"][ref.substr(prefix.size())], value, root, err);
    }
    if (schema.contains("const")) {
        if (value != schema["const"]) {
            err = "const mismatch: " + value.dump() + " != " + schema["const"].dump();
            return false;
        }
    }
    if (schema.contains("type")) {
        std::string type = schema["type"].get<std::string>();
        bool ok = (type == "object" && value.is_object()) ||
                  (type == "array" && value.is_array()) ||
                  (type == "string" && value.is_string()) ||
                  (type == "number" && value.is_number()) ||
                  (type == "integer" && value.is_number_integer()) ||
                  (type == "boolean" && value.is_boolean());
        if (!ok) {
            err = "expected " + type + ", got " + value.dump().substr(0, 80);
            return false;
        }
    }
    if (schema.contains("required")) {
        for (const auto& key : schema["required"]) {
            if (!value.contains(key.get<std::string>())) {
                err = "missing required key " + key.get<std::string>();
                return false;
            }
        }
    }
    if (schema.contains("properties") && value.is_object()) {
        for (const auto& [key, sub] : schema["properties"].items()) {
            if (value.contains(key) && !schema_validate(sub, value[key], root, err)) {
                err = key + ": " + err;
                return false;
            }
        }
    }
    if (schema.contains("items") && value.is_array()) {
        for (const auto& item : value) {
            if (!schema_validate(schema["items"], item, root, err)) return false;
        }
    }
    return true;
}

inline bool validate_report(const nlohmann::json& schema_doc, const std::string& kind,
                            const nlohmann::json& report, std::string& err) {
    return schema_validate(schema_doc["definitions"][kind], report, schema_doc, err);
}

} // namespace blora::testing

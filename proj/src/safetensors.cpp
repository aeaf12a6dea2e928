#include "safetensors.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

namespace blora {

using nlohmann::json;

int64_t tensor_file_entry::numel() const {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 1) fail_format("entry shape dimensions must be >= 1");
        n *= d;
    }
    return n;
}

std::span<const uint8_t> tensor_file::bytes_of(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) fail_usage("no tensor named \"" + name + "\" in file");
    const tensor_file_entry& e = it->second;
    return std::span<const uint8_t>(payload.data() + e.begin, e.byte_size());
}

tensor tensor_file::load(const std::string& name) const {
    const tensor_file_entry& e = entries.at(name);
    std::vector<int64_t> shape = e.shape.empty() ? std::vector<int64_t>{1} : e.shape;
    return tensor::from_bytes(std::move(shape), e.dt, bytes_of(name));
}

void tensor_file::add(const std::string& name, const tensor& t) {
    if (has(name)) fail_invariant("duplicate tensor name \"" + name + "\"");
    std::vector<uint8_t> bytes = t.to_bytes();
    tensor_file_entry e;
    e.dt = t.storage_dtype();
    e.shape = t.shape();
    e.begin = payload.size();
    e.end = payload.size() + bytes.size();
    payload.insert(payload.end(), bytes.begin(), bytes.end());
    entries.emplace(name, std::move(e));
}

static uint64_t read_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

tensor_file parse_safetensors(std::span<const uint8_t> bytes) {
    if (bytes.size() < 8) fail_format("truncated file: shorter than the 8-byte header length");
    uint64_t header_len = read_u64_le(bytes.data());
    if (header_len > bytes.size() - 8) {
        fail_format("truncated file: header length " + std::to_string(header_len) +
                    " exceeds the " + std::to_string(bytes.size() - 8) + " bytes present");
    }

    // Collect top-level keys during the parse so duplicate tensor names are
    // caught (a plain DOM parse would silently keep one of them).
    std::vector<std::string> top_keys;
    int depth_of_root = -1;
    auto cb = [&](int depth, json::parse_event_t event, json& parsed) {
        if (event == json::parse_event_t::object_start && depth_of_root < 0) depth_of_root = depth;
        if (event == json::parse_event_t::key && depth == depth_of_root + 1) {
            top_keys.push_back(parsed.get<std::string>());
        }
        return true;
    };

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<ptrdiff_t>(header_len), cb);
    } catch (const json::exception& e) {
        fail_format(std::string("malformed JSON header: ") + e.what());
    }
    if (!header.is_object()) fail_format("JSON header is not an object");

    {
        std::set<std::string> seen;
        for (const std::string& k : top_keys) {
            if (!seen.insert(k).second) fail_format("duplicate tensor name \"" + k + "\" in header");
        }
    }

    tensor_file file;
    file.payload.assign(bytes.begin() + 8 + static_cast<ptrdiff_t>(header_len), bytes.end());

    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        const json& v = it.value();
        if (name == "__metadata__") {
            if (!v.is_object()) fail_format("__metadata__ is not an object");
            for (auto mit = v.begin(); mit != v.end(); ++mit) {
                if (!mit.value().is_string()) {
                    fail_format("__metadata__ value for \"" + mit.key() + "\" is not a string");
                }
                file.metadata[mit.key()] = mit.value().get<std::string>();
            }
            continue;
        }
        if (!v.is_object()) fail_format("entry \"" + name + "\" is not an object");
        tensor_file_entry e;
        if (!v.contains("dtype") || !v["dtype"].is_string()) {
            fail_format("entry \"" + name + "\" has no dtype string");
        }
        e.dt = dtype_from_name(v["dtype"].get<std::string>());
        if (!v.contains("shape") || !v["shape"].is_array()) {
            fail_format("entry \"" + name + "\" has no shape array");
        }
        for (const json& d : v["shape"]) {
            if (!d.is_number_unsigned() && !d.is_number_integer()) {
                fail_format("entry \"" + name + "\" has a non-integer shape dimension");
            }
            int64_t dim = d.get<int64_t>();
            if (dim < 1) fail_format("entry \"" + name + "\" has shape dimension " + std::to_string(dim));
            e.shape.push_back(dim);
        }
        if (!v.contains("data_offsets") || !v["data_offsets"].is_array() || v["data_offsets"].size() != 2) {
            fail_format("entry \"" + name + "\" has no [begin, end) data_offsets pair");
        }
        e.begin = v["data_offsets"][0].get<uint64_t>();
        e.end = v["data_offsets"][1].get<uint64_t>();
        if (e.end < e.begin || e.end > file.payload.size()) {
            fail_format("entry \"" + name + "\" has out-of-bounds data_offsets [" +
                        std::to_string(e.begin) + ", " + std::to_string(e.end) + ")");
        }
        uint64_t expect = static_cast<uint64_t>(e.numel()) * dtype_byte_width(e.dt);
        if (e.byte_size() != expect) {
            fail_format("entry \"" + name + "\" occupies " + std::to_string(e.byte_size()) +
                        " bytes but shape and dtype imply " + std::to_string(expect));
        }
        file.entries.emplace(name, std::move(e));
    }

    // Overlap check over the byte ranges, in begin order.
    std::vector<std::pair<uint64_t, std::pair<uint64_t, std::string>>> ranges;
    for (const auto& [name, e] : file.entries) ranges.push_back({e.begin, {e.end, name}});
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].first < ranges[i - 1].second.first) {
            fail_format("entries \"" + ranges[i - 1].second.second + "\" and \"" +
                        ranges[i].second.second + "\" have overlapping data_offsets");
        }
    }
    return file;
}

static void append_json_string(std::string& out, const std::string& s) {
    out += '"';
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out += buf;
                } else {
                    out += c;
                }
        }
    }
    out += '"';
}

std::vector<uint8_t> serialize_safetensors(const tensor_file& file) {
    // Repack the payload in lexicographic name order (std::map iteration).
    std::vector<uint8_t> payload;
    std::map<std::string, std::pair<uint64_t, uint64_t>> packed;
    for (const auto& [name, e] : file.entries) {
        uint64_t expect = static_cast<uint64_t>(e.numel()) * dtype_byte_width(e.dt);
        if (e.byte_size() != expect) {
            fail_invariant("entry \"" + name + "\" byte range disagrees with shape and dtype");
        }
        if (e.end > file.payload.size()) {
            fail_invariant("entry \"" + name + "\" points past the payload");
        }
        uint64_t begin = payload.size();
        payload.insert(payload.end(), file.payload.begin() + static_cast<ptrdiff_t>(e.begin),
                       file.payload.begin() + static_cast<ptrdiff_t>(e.end));
        packed[name] = {begin, payload.size()};
    }

    std::string header = "{";
    bool first = true;
    if (!file.metadata.empty()) {
        header += "\"__metadata__\":{";
        bool mfirst = true;
        for (const auto& [k, v] : file.metadata) {
            if (!mfirst) header += ',';
            mfirst = false;
            append_json_string(header, k);
            header += ':';
            append_json_string(header, v);
        }
        header += '}';
        first = false;
    }
    for (const auto& [name, e] : file.entries) {
        if (!first) header += ',';
        first = false;
        append_json_string(header, name);
        header += ":{\"dtype\":\"";
        header += dtype_name(e.dt);
        header += "\",\"shape\":[";
        for (size_t i = 0; i < e.shape.size(); ++i) {
            if (i) header += ',';
            header += std::to_string(e.shape[i]);
        }
        header += "],\"data_offsets\":[";
        header += std::to_string(packed[name].first);
        header += ',';
        header += std::to_string(packed[name].second);
        header += "]}";
    }
    header += '}';

    std::vector<uint8_t> out(8 + header.size() + payload.size());
    uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) out[static_cast<size_t>(i)] = static_cast<uint8_t>(len >> (8 * i));
    std::copy(header.begin(), header.end(), out.begin() + 8);
    std::copy(payload.begin(), payload.end(), out.begin() + 8 + static_cast<ptrdiff_t>(header.size()));
    return out;
}

std::vector<uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_format("cannot open \"" + path + "\"");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_binary_file(const std::string& path, std::span<const uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail_format("cannot write \"" + path + "\"");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail_format("short write to \"" + path + "\"");
}

tensor_file read_tensor_file(const std::string& path) {
    return parse_safetensors(read_binary_file(path));
}

void write_tensor_file(const tensor_file& file, const std::string& path) {
    write_binary_file(path, serialize_safetensors(file));
}

} // namespace blora

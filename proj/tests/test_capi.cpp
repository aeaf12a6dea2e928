// Exercises the shared-library C API surface end to end.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <unistd.h>

#include <json.hpp>

#include "blora.h"

namespace {

struct temp_dir {
    std::filesystem::path path;
    temp_dir() {
        path = std::filesystem::temp_directory_path() /
               ("blora_capi_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~temp_dir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

struct adapter_guard {
    blora_adapter* ptr = nullptr;
    ~adapter_guard() { blora_adapter_free(ptr); }
};

struct string_guard {
    char* ptr = nullptr;
    ~string_guard() { blora_string_free(ptr); }
    std::string str() const { return ptr ? ptr : ""; }
};

blora_toy_params quick_params(uint64_t sample_seed = 3) {
    blora_toy_params params{};
    params.steps = 8;
    params.sample_seed = sample_seed;
    return params;
}

} // namespace

TEST_CASE("version and error text") {
    CHECK(std::string(blora_version()) == "0.1.0");
    adapter_guard adapter;
    CHECK(blora_adapter_open("no_such_file.safetensors", &adapter.ptr) == BLORA_ERR_FORMAT);
    CHECK(std::string(blora_last_error()).find("no_such_file") != std::string::npos);
}

TEST_CASE("null arguments are usage errors") {
    CHECK(blora_adapter_open(nullptr, nullptr) == BLORA_ERR_USAGE);
    CHECK(blora_train_toy(nullptr, nullptr, nullptr) == BLORA_ERR_USAGE);
    CHECK(blora_keymap_json("dot", nullptr) == BLORA_ERR_USAGE);
}

TEST_CASE("train, save, reopen, inspect, extract, combine, scale, merge") {
    temp_dir dir;
    blora_toy_params params = quick_params();

    adapter_guard trained;
    string_guard report;
    REQUIRE(blora_train_toy(&params, &trained.ptr, &report.ptr) == BLORA_OK);
    nlohmann::json train_doc = nlohmann::json::parse(report.str());
    CHECK(train_doc["kind"] == "train");
    CHECK(train_doc["steps"] == 8);

    std::string adapter_path = dir.file("a.safetensors");
    REQUIRE(blora_adapter_save(trained.ptr, adapter_path.c_str()) == BLORA_OK);

    adapter_guard reopened;
    REQUIRE(blora_adapter_open(adapter_path.c_str(), &reopened.ptr) == BLORA_OK);

    string_guard inspect;
    REQUIRE(blora_adapter_inspect_json(reopened.ptr, &inspect.ptr) == BLORA_OK);
    nlohmann::json doc = nlohmann::json::parse(inspect.str());
    CHECK(doc["blocks"].contains("W4"));
    CHECK(doc["blocks"].contains("W5"));

    adapter_guard content, style;
    REQUIRE(blora_adapter_extract(reopened.ptr, "W4", "content", &content.ptr) == BLORA_OK);
    REQUIRE(blora_adapter_extract(reopened.ptr, "W5", "style", &style.ptr) == BLORA_OK);
    CHECK(blora_adapter_extract(reopened.ptr, "W0", "content", &content.ptr) ==
          BLORA_ERR_INVARIANT);

    adapter_guard combined;
    REQUIRE(blora_adapter_combine(content.ptr, style.ptr, &combined.ptr) == BLORA_OK);

    adapter_guard clash;
    CHECK(blora_adapter_combine(content.ptr, content.ptr, &clash.ptr) == BLORA_ERR_INVARIANT);
    CHECK(std::string(blora_last_error()).find("W4") != std::string::npos);

    adapter_guard scaled;
    REQUIRE(blora_adapter_scale(combined.ptr, 0.45, &scaled.ptr) == BLORA_OK);

    std::string base_path = dir.file("base.safetensors");
    REQUIRE(blora_toy_base_weights(&params, nullptr, base_path.c_str()) == BLORA_OK);
    std::string merged_path = dir.file("merged.safetensors");
    REQUIRE(blora_merge_files(base_path.c_str(), scaled.ptr, 1.0, "{\"note\":\"t\"}",
                              merged_path.c_str()) == BLORA_OK);
    CHECK(std::filesystem::file_size(merged_path) > 0);
}

TEST_CASE("digests are stable across save/open") {
    temp_dir dir;
    blora_toy_params params = quick_params(9);
    adapter_guard trained;
    REQUIRE(blora_train_toy(&params, &trained.ptr, nullptr) == BLORA_OK);

    string_guard d1;
    REQUIRE(blora_adapter_digest(trained.ptr, &d1.ptr) == BLORA_OK);
    std::string path = dir.file("d.safetensors");
    REQUIRE(blora_adapter_save(trained.ptr, path.c_str()) == BLORA_OK);
    string_guard d2;
    REQUIRE(blora_file_digest(path.c_str(), &d2.ptr) == BLORA_OK);
    CHECK(d1.str() == d2.str());
}

TEST_CASE("metadata set/save round trip") {
    temp_dir dir;
    blora_toy_params params = quick_params(5);
    adapter_guard trained;
    REQUIRE(blora_train_toy(&params, &trained.ptr, nullptr) == BLORA_OK);
    REQUIRE(blora_adapter_set_metadata(trained.ptr, "blora.manifest", "{\"x\":1}") == BLORA_OK);
    std::string path = dir.file("m.safetensors");
    REQUIRE(blora_adapter_save(trained.ptr, path.c_str()) == BLORA_OK);
    adapter_guard back;
    REQUIRE(blora_adapter_open(path.c_str(), &back.ptr) == BLORA_OK);
    string_guard inspect;
    REQUIRE(blora_adapter_inspect_json(back.ptr, &inspect.ptr) == BLORA_OK);
    CHECK(nlohmann::json::parse(inspect.str())["metadata"]["blora.manifest"] == "{\"x\":1}");
}

TEST_CASE("keymap schemes") {
    string_guard dot, kohya;
    REQUIRE(blora_keymap_json("dot", &dot.ptr) == BLORA_OK);
    REQUIRE(blora_keymap_json("kohya", &kohya.ptr) == BLORA_OK);
    CHECK(blora_keymap_json("weird", &dot.ptr) == BLORA_ERR_USAGE);
    CHECK(nlohmann::json::parse(dot.str())["total_layers"] == 70);
}

TEST_CASE("probe json via the C API") {
    blora_probe_params params{};
    params.pairs = 4;
    params.seed = 2;
    string_guard out;
    REQUIRE(blora_probe_json(&params, &out.ptr) == BLORA_OK);
    nlohmann::json doc = nlohmann::json::parse(out.str());
    CHECK(doc["kind"] == "probe");
    CHECK(doc["pair_count"]["content"] == 4);
}

TEST_CASE("eval json error paths via the C API") {
    // The happy path needs an embeddings fixture file and lives in the
    // acceptance suite, which writes one with the library.
    temp_dir dir;
    CHECK(blora_eval_json(dir.file("missing.safetensors").c_str(), "a", "b", "c", nullptr) ==
          BLORA_ERR_USAGE);
    string_guard out;
    CHECK(blora_eval_json(dir.file("missing.safetensors").c_str(), "a", "b", "c", &out.ptr) ==
          BLORA_ERR_FORMAT);
}

TEST_CASE("pair grid json via the C API") {
    blora_toy_params params{};
    params.steps = 2;
    params.token_dim = 8;
    params.prompt_dim = 8;
    params.grid_side = 2;
    string_guard out;
    REQUIRE(blora_pair_grid_json(&params, 2, &out.ptr) == BLORA_OK);
    nlohmann::json doc = nlohmann::json::parse(out.str());
    CHECK(doc["kind"] == "pair_grid");
    CHECK(doc["final_loss"].size() == 8);
}

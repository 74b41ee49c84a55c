#pragma once

// Settings shared by the CLI subcommands. Sources are layered: config file,
// then environment, then command-line flags.

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "ictx/corpus.hpp"
#include "ictx/pipeline.hpp"
#include "ictx/vlm.hpp"

namespace ictx {

inline constexpr const char* kEndpointEnv = "ICTX_VLM_ENDPOINT";

struct Settings {
    std::optional<std::filesystem::path> corpus;
    std::optional<std::filesystem::path> embeddings;
    std::optional<std::filesystem::path> tags;
    std::map<std::string, std::filesystem::path, std::less<>> captions;            ///< source -> jsonl
    std::map<std::string, std::filesystem::path, std::less<>> caption_embeddings;  ///< source -> bin

    ExperimentConfig experiment;
    std::optional<std::string> endpoint;
    std::optional<StubMode> stub;
    std::filesystem::path out = ".";

    std::size_t iterations = 5;
    std::size_t bootstrap_shots = 0;
    std::optional<std::size_t> refresh_shots;
    std::size_t probe_tests = 100;
};

/// Parses a TOML config; relative paths resolve against the file's directory.
/// Unknown keys are errors.
void apply_config_file(Settings& settings, const std::filesystem::path& path);
/// ICTX_VLM_ENDPOINT replaces whatever backend the file chose.
void apply_environment(Settings& settings);

/// Loads every store the settings name. The corpus is mandatory.
Resources load_resources(const Settings& settings);

/// Stub or HTTP client; HTTP clients are health-checked first (TransportError when unreachable).
std::unique_ptr<CaptionModel> make_model(const Settings& settings, const Resources& res);

/// "<source>=<path>"
std::pair<std::string, std::filesystem::path> parse_assignment(std::string_view text, std::string_view flag);

}  // namespace ictx

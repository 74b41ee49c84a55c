#pragma once

// Experiment orchestration: bootstrapping model-generated captions, iterative
// prompting, the strategy x caption-source x shot-count grid, and the
// short-cut probe.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ictx/assign.hpp"
#include "ictx/corpus.hpp"
#include "ictx/metric.hpp"
#include "ictx/select.hpp"
#include "ictx/vlm.hpp"

namespace ictx {

struct ExperimentConfig {
    std::vector<Strategy> strategies{Strategy::RS};
    std::vector<std::string> caption_sources{"gtc"};
    std::vector<std::size_t> shot_counts{4, 8, 16, 32};
    Split test_split = Split::Test;
    Split database_split = Split::Train;
    std::uint64_t seed = 0;
    OrderPolicy order_policy;
    std::string sicr_source = "gtc";  ///< caption embeddings used by sicr-clip
    TagScoring tag_scoring = TagScoring::Intersection;
    DecodingParams decoding;
    std::optional<std::size_t> n_tests;  ///< first n test images; all when unset
    std::optional<std::filesystem::path> cache_dir;
    unsigned workers = 1;
    BatchOptions batch;

    /// Throws ValidationError on empty lists, bad labels or diir-tt shot counts not divisible by 4.
    void validate() const;
};

/// Test image ids for an experiment: the split in manifest order, truncated to n.
std::vector<std::string> test_ids_for(const CorpusIndex& corpus, Split split, std::optional<std::size_t> n);

/// Per-test seed: derived from the master seed and the test id only.
std::uint64_t test_seed(std::uint64_t master, std::string_view test_id);

/// The configured policy as applied to one test image: similarity policies fall
/// back to as-retrieved for strategies without scores, and an unseeded random
/// policy gets a seed derived from the master seed and the test id.
OrderPolicy effective_order_policy(const OrderPolicy& configured, Strategy strategy, std::uint64_t master,
                                   std::string_view test_id);

// --- report ---------------------------------------------------------------

struct ReportRow {
    std::string strategy;
    std::string caption_source;
    std::size_t shots = 0;
    std::optional<double> cider;  ///< nullopt: cell failed
    bool operator==(const ReportRow&) const = default;
};

struct MeanRow {
    std::string strategy;
    std::string caption_source;
    std::optional<double> mean;  ///< nullopt when any of its rows failed
    bool operator==(const MeanRow&) const = default;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::vector<MeanRow> means;
    bool operator==(const EvalReport&) const = default;
};

/// Means per (strategy, caption_source) in first-appearance order.
EvalReport summarize(std::vector<ReportRow> rows);

std::string report_csv(const EvalReport& report);
std::string means_csv(const EvalReport& report);
/// {"by_strategy": {source: [{"strategy", "series": [[shots, cider], ...]}]},
///  "by_caption_source": {strategy: [{"caption_source", "series": ...}]}}
nlohmann::ordered_json chart_data_json(const EvalReport& report);
/// Parses report.csv back into a summarized report.
EvalReport read_report_csv(const std::filesystem::path& path);
/// Writes report.csv, means.csv and chart_data.json into dir.
void write_report_files(const EvalReport& report, const std::filesystem::path& dir);

/// Mean over strategies of (mean[mgca:s] - mean[gtc]) for every anchor store s.
/// Throws ValidationError when an mgca row has no gtc partner or either mean failed.
std::map<std::string, double> mgca_improvement(const EvalReport& report);

// --- grid -----------------------------------------------------------------

/// Throws ValidationError naming the first store the configured strategies or sources need but lack.
void check_dependencies(const ExperimentConfig& cfg, const Resources& res);

struct CellResult {
    Strategy strategy = Strategy::RS;
    std::string caption_source;
    std::size_t shots = 0;
    std::optional<double> cider;
    std::string error;
    bool cached = false;
    std::string key_hash;
};

struct GridStats {
    std::size_t generation_calls = 0;
    std::size_t cached_cells = 0;
    std::size_t computed_cells = 0;
    std::size_t failed_cells = 0;
};

struct GridOptions {
    /// Stop after computing this many cells (cached cells do not count).
    std::optional<std::size_t> cell_budget;
};

struct GridRun {
    EvalReport report;
    std::vector<CellResult> cells;
    GridStats stats;
    bool complete = true;
};

/// Canonical cache key of one cell; hashed with SHA-256 for the cache file name.
nlohmann::ordered_json cell_key(const ExperimentConfig& cfg, Strategy strategy, const std::string& source,
                                std::size_t shots, const std::string& model_id,
                                const std::vector<std::string>& test_ids);
std::string sha256_hex(std::string_view data);

GridRun run_grid(const ExperimentConfig& cfg, const Resources& res, CaptionModel& model, const GridOptions& opts = {});

// --- bootstrap and iterative prompting ------------------------------------

struct BootstrapOptions {
    std::size_t n_seed_shots = 0;
    std::uint64_t seed = 0;
    Split database_split = Split::Train;
    DecodingParams decoding;
    BatchOptions batch;
};

struct BootstrapResult {
    CaptionStore store;
    std::vector<std::string> failed_ids;
};

/// The fixed seed pool: n + 1 database images drawn once, so every target has
/// n members other than itself.
std::vector<std::string> bootstrap_seed_pool(const CorpusIndex& corpus, const BootstrapOptions& opts);
/// Store source "vlm<N>" with one caption per database image.
BootstrapResult bootstrap_mgc(const Resources& res, CaptionModel& model, const BootstrapOptions& opts);

struct IterateOptions {
    std::size_t iterations = 5;
    std::size_t bootstrap_shots = 0;
    std::vector<std::size_t> shot_counts{4, 8, 16, 32};
    /// RS shots used to regenerate database captions; max(shot_counts) when unset.
    std::optional<std::size_t> refresh_shots;
    std::uint64_t seed = 0;
    Split database_split = Split::Train;
    Split test_split = Split::Test;
    std::optional<std::size_t> n_tests;
    DecodingParams decoding;
    BatchOptions batch;
    unsigned workers = 1;
};

struct IterationRecord {
    std::size_t iteration = 0;
    std::string snapshot;  ///< "iter:<t>"
    double cider = 0.0;
    std::size_t changed = 0;
    std::vector<std::string> failed_ids;
    bool operator==(const IterationRecord&) const = default;
};

struct IterationTrace {
    std::vector<IterationRecord> iterations;
    std::vector<CaptionStore> snapshots;
};

IterationTrace iterate_prompting(const Resources& res, CaptionModel& model, const IterateOptions& opts);
/// One JSON object per line, iteration order.
std::string trace_jsonl(const IterationTrace& trace);

// --- short-cut probe ------------------------------------------------------

struct ProbeOptions {
    std::size_t n_tests = 100;
    std::size_t n_shots = 5;
    std::uint64_t seed = 0;
    Split database_split = Split::Train;
    Split test_split = Split::Test;
    DecodingParams decoding;
    BatchOptions batch;
    unsigned workers = 1;
};

struct ProbeCondition {
    std::string condition;  ///< identical | siir-clip | rs
    double gtc_cider = 0.0;
    double icc_cider = 0.0;
};

struct ProbeReport {
    std::size_t n_tests = 0;
    std::vector<ProbeCondition> conditions;
    const ProbeCondition& at(std::string_view condition) const;
};

/// Donor for one test image: seed-ordered walk over the database, first image
/// other than the test image with at least n_shots captions.
std::string probe_donor(const CorpusIndex& corpus, const std::vector<std::string>& database, std::string_view test_id,
                        std::size_t n_shots, std::uint64_t seed);
ProbeReport shortcut_probe(const Resources& res, CaptionModel& model, const ProbeOptions& opts);
nlohmann::ordered_json probe_json(const ProbeReport& report);

}  // namespace ictx

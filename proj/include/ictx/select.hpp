#pragma once

// Image selection: the six ways of choosing the n in-context images for a
// test image. Every strategy is a pure function of its inputs (and seed);
// ties are broken by ascending image id so outputs are reproducible.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "ictx/corpus.hpp"

namespace ictx {

enum class Strategy { RS, SiirClip, SiirTag, SicrClip, DiirTr, DiirTt };

/// rs | siir-clip | siir-tag | sicr-clip | diir-tr | diir-tt
std::string_view to_string(Strategy s) noexcept;
Strategy parse_strategy(std::string_view text);
/// True for strategies whose shots carry retrieval scores.
bool has_scores(Strategy s) noexcept;

enum class TagScoring { Intersection, Jaccard };

struct SelectionSpec {
    Strategy strategy = Strategy::RS;
    std::size_t n_shots = 4;
    std::uint64_t seed = 0;              ///< RS sampling and DIIR-TR tag shuffling
    std::string caption_source = "gtc";  ///< SICR mediator captions
    std::vector<std::string> pool;       ///< candidate image ids
    TagScoring tag_scoring = TagScoring::Intersection;
};

struct ShotSet {
    std::vector<std::string> image_ids;
    std::vector<std::optional<double>> scores;  ///< nullopt for RS
    /// SICR only: the caption that matched each image, parallel to image_ids.
    std::vector<std::string> matched_captions;
    /// DIIR-TT only: slots filled from the pooled ranking.
    std::size_t backfilled = 0;

    std::size_t size() const noexcept { return image_ids.size(); }
    bool operator==(const ShotSet&) const = default;
};

/// {"test_id": ..., "strategy": ..., "shots": [{"image_id": ..., "score": x|null}]}
nlohmann::ordered_json shot_set_json(const ShotSet& shots, std::string_view test_id, Strategy strategy);

struct ScoredId {
    std::string id;
    double score = 0.0;
    bool operator==(const ScoredId&) const = default;
};

struct ScanOptions {
    unsigned workers = 1;
};

/// Exact top-k by cosine similarity, descending, ties by ascending id.
/// Throws ValidationError on dimension mismatch, a zero-norm query or an
/// eligible zero-norm row, or k larger than the eligible row count.
std::vector<ScoredId> cosine_topk(std::span<const float> query, const EmbeddingStore& store, std::size_t k,
                                  const std::unordered_set<std::string>& exclude = {}, const ScanOptions& opts = {});
/// Same over an explicit subset of rows.
std::vector<ScoredId> cosine_topk_rows(std::span<const float> query, const EmbeddingStore& store,
                                       std::span<const std::size_t> rows, std::size_t k, const ScanOptions& opts = {});

/// |pooled(a) n pooled(b)|
std::size_t tag_similarity(const TagSet& a, const TagSet& b);
/// |pooled(a) n pooled(b)| / |pooled(a) u pooled(b)|, 0 for two empty sets.
double tag_jaccard(const TagSet& a, const TagSet& b);

ShotSet select_rs(const SelectionSpec& spec, std::string_view test_id);
ShotSet select_siir_clip(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                         const ScanOptions& opts = {});
ShotSet select_siir_tag(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                        const ScanOptions& opts = {});
/// Matched captions are returned in ShotSet::matched_captions.
ShotSet select_sicr_clip(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                         const ScanOptions& opts = {});
ShotSet select_diir_tr(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                       const ScanOptions& opts = {});
ShotSet select_diir_tt(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                       const ScanOptions& opts = {});

/// Dispatches on spec.strategy.
ShotSet select_shots(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                     const ScanOptions& opts = {});

}  // namespace ictx

#pragma once

// Caption assignment for selected shots and in-context sequence assembly.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ictx/corpus.hpp"
#include "ictx/metric.hpp"
#include "ictx/select.hpp"

namespace ictx {

/// Where shot captions come from.
///   gtc            ground truth, index 0
///   mgc:<store>    the store's caption
///   mgca:<store>   the ground truth caption closest (CIDEr-D) to the store's caption
///   sicr-matched   the captions SICR retrieval matched on
struct CaptionSource {
    enum class Kind { Gtc, Mgc, Mgca, SicrMatched };
    Kind kind = Kind::Gtc;
    std::string store;

    bool operator==(const CaptionSource&) const = default;
};

CaptionSource parse_caption_source(std::string_view label);
std::string to_string(const CaptionSource& source);

struct OrderPolicy {
    enum class Kind { AsRetrieved, AscSimilarity, DescSimilarity, Random };
    Kind kind = Kind::AscSimilarity;
    /// Random only. Unset means "derive from the experiment seed".
    std::optional<std::uint64_t> seed;

    bool needs_scores() const noexcept { return kind == Kind::AscSimilarity || kind == Kind::DescSimilarity; }
    bool operator==(const OrderPolicy&) const = default;
};

/// as-retrieved | asc-similarity | desc-similarity | random | random:<seed>
OrderPolicy parse_order_policy(std::string_view text);
std::string to_string(const OrderPolicy& policy);

struct Shot {
    std::string image_id;
    std::string caption;
    bool operator==(const Shot&) const = default;
};

struct InContextSequence {
    std::vector<Shot> shots;
    std::string test_image_id;
    OrderPolicy order_policy;
    bool operator==(const InContextSequence&) const = default;
};

/// {"test_id":..., "shots":[{"image_id":..., "caption":...}], "order_policy":...}
nlohmann::ordered_json sequence_json(const InContextSequence& seq);

std::vector<std::string> assign_gtc(std::span<const std::string> ids, const CorpusIndex& corpus);
/// Throws ValidationError listing every id the store lacks.
std::vector<std::string> assign_mgc(std::span<const std::string> ids, const CaptionStore& store);
/// Index of the reference scoring highest against `anchor` on its own; lowest index wins ties.
std::size_t mgca_select_index(std::string_view anchor, std::span<const std::string> gtcs, const DocFreqTable& df);
std::vector<std::string> assign_mgca(std::span<const std::string> ids, const CorpusIndex& corpus,
                                     const CaptionStore& anchors, const DocFreqTable& df);

/// Captions for `shots` under `source`. sicr-matched needs a ShotSet produced by SICR.
std::vector<std::string> assign_captions(const CaptionSource& source, const ShotSet& shots, const Resources& res,
                                         const DocFreqTable& df);

/// Permutation of shot positions under `policy`. Random requires policy.seed.
std::vector<std::size_t> order_indices(std::span<const std::optional<double>> scores, const OrderPolicy& policy);

/// Zips shots with captions and reorders them. Throws ValidationError when the
/// policy needs scores the ShotSet lacks, when lengths differ, when a caption is
/// empty or when the test image is among the shots.
InContextSequence build_sequence(const ShotSet& shots, std::span<const std::string> captions, std::string_view test_id,
                                 const OrderPolicy& policy);

}  // namespace ictx

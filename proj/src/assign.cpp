#include "ictx/assign.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>

#include "ictx/error.hpp"
#include "ictx/rng.hpp"

namespace ictx {

CaptionSource parse_caption_source(std::string_view label) {
    if (label == "gtc") return {CaptionSource::Kind::Gtc, ""};
    if (label == "sicr-matched") return {CaptionSource::Kind::SicrMatched, ""};
    auto with_store = [&](std::string_view prefix, CaptionSource::Kind kind) -> std::optional<CaptionSource> {
        if (!label.starts_with(prefix)) return std::nullopt;
        auto store = label.substr(prefix.size());
        if (store.empty()) throw ValidationError("caption source '" + std::string(label) + "' names no store");
        return CaptionSource{kind, std::string(store)};
    };
    if (auto s = with_store("mgc:", CaptionSource::Kind::Mgc)) return *s;
    if (auto s = with_store("mgca:", CaptionSource::Kind::Mgca)) return *s;
    throw ValidationError("unknown caption source '" + std::string(label) +
                          "' (expected gtc|mgc:<store>|mgca:<store>|sicr-matched)");
}

std::string to_string(const CaptionSource& source) {
    switch (source.kind) {
        case CaptionSource::Kind::Gtc: return "gtc";
        case CaptionSource::Kind::Mgc: return "mgc:" + source.store;
        case CaptionSource::Kind::Mgca: return "mgca:" + source.store;
        case CaptionSource::Kind::SicrMatched: return "sicr-matched";
    }
    return "gtc";
}

OrderPolicy parse_order_policy(std::string_view text) {
    if (text == "as-retrieved") return {OrderPolicy::Kind::AsRetrieved, std::nullopt};
    if (text == "asc-similarity") return {OrderPolicy::Kind::AscSimilarity, std::nullopt};
    if (text == "desc-similarity") return {OrderPolicy::Kind::DescSimilarity, std::nullopt};
    if (text == "random") return {OrderPolicy::Kind::Random, std::nullopt};
    if (text.starts_with("random:")) {
        auto digits = text.substr(7);
        std::uint64_t seed = 0;
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), seed);
        if (digits.empty() || ec != std::errc{} || ptr != digits.data() + digits.size())
            throw ValidationError("bad seed in order policy '" + std::string(text) + "'");
        return {OrderPolicy::Kind::Random, seed};
    }
    throw ValidationError("unknown order policy '" + std::string(text) +
                          "' (expected as-retrieved|asc-similarity|desc-similarity|random[:seed])");
}

std::string to_string(const OrderPolicy& policy) {
    switch (policy.kind) {
        case OrderPolicy::Kind::AsRetrieved: return "as-retrieved";
        case OrderPolicy::Kind::AscSimilarity: return "asc-similarity";
        case OrderPolicy::Kind::DescSimilarity: return "desc-similarity";
        case OrderPolicy::Kind::Random:
            return policy.seed ? "random:" + std::to_string(*policy.seed) : std::string("random");
    }
    return "asc-similarity";
}

nlohmann::ordered_json sequence_json(const InContextSequence& seq) {
    nlohmann::ordered_json j;
    j["test_id"] = seq.test_image_id;
    auto shots = nlohmann::ordered_json::array();
    for (const auto& s : seq.shots) shots.push_back({{"image_id", s.image_id}, {"caption", s.caption}});
    j["shots"] = std::move(shots);
    j["order_policy"] = to_string(seq.order_policy);
    return j;
}

std::vector<std::string> assign_gtc(std::span<const std::string> ids, const CorpusIndex& corpus) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(corpus.at(id).captions.front());
    return out;
}

std::vector<std::string> assign_mgc(std::span<const std::string> ids, const CaptionStore& store) {
    std::vector<std::string> out;
    std::vector<std::string> missing;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        if (const auto* c = store.find(id)) out.push_back(*c);
        else missing.push_back(id);
    }
    if (!missing.empty()) {
        std::string msg = "caption store '" + store.source() + "' is missing " + std::to_string(missing.size()) + " id(s):";
        for (const auto& m : missing) msg += " " + m;
        throw ValidationError(msg);
    }
    return out;
}

std::size_t mgca_select_index(std::string_view anchor, std::span<const std::string> gtcs, const DocFreqTable& df) {
    if (gtcs.empty()) throw ValidationError("mgca needs at least one ground-truth caption");
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t j = 0; j < gtcs.size(); ++j) {
        const double s = cider_d(anchor, gtcs.subspan(j, 1), df).value;
        if (s > best_score) {
            best_score = s;
            best = j;
        }
    }
    return best;
}

std::vector<std::string> assign_mgca(std::span<const std::string> ids, const CorpusIndex& corpus,
                                     const CaptionStore& anchors, const DocFreqTable& df) {
    const auto anchor_captions = assign_mgc(ids, anchors);
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& gtcs = corpus.at(ids[i]).captions;
        out.push_back(gtcs[mgca_select_index(anchor_captions[i], gtcs, df)]);
    }
    return out;
}

std::vector<std::string> assign_captions(const CaptionSource& source, const ShotSet& shots, const Resources& res,
                                         const DocFreqTable& df) {
    switch (source.kind) {
        case CaptionSource::Kind::Gtc: return assign_gtc(shots.image_ids, res.corpus);
        case CaptionSource::Kind::Mgc: return assign_mgc(shots.image_ids, res.require_caption_store(source.store));
        case CaptionSource::Kind::Mgca:
            return assign_mgca(shots.image_ids, res.corpus, res.require_caption_store(source.store), df);
        case CaptionSource::Kind::SicrMatched:
            if (shots.matched_captions.size() != shots.size())
                throw ValidationError("sicr-matched captions are only available with the sicr-clip strategy");
            return shots.matched_captions;
    }
    throw ValidationError("unhandled caption source");
}

std::vector<std::size_t> order_indices(std::span<const std::optional<double>> scores, const OrderPolicy& policy) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (policy.needs_scores()) {
        for (const auto& s : scores)
            if (!s) throw ValidationError("order policy " + to_string(policy) + " needs retrieval scores");
    }
    switch (policy.kind) {
        case OrderPolicy::Kind::AsRetrieved: break;
        case OrderPolicy::Kind::AscSimilarity:
            std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return *scores[a] < *scores[b]; });
            break;
        case OrderPolicy::Kind::DescSimilarity:
            std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return *scores[a] > *scores[b]; });
            break;
        case OrderPolicy::Kind::Random: {
            if (!policy.seed) throw ValidationError("random order policy has no seed");
            Rng rng(*policy.seed);
            rng.shuffle(std::span<std::size_t>(idx));
            break;
        }
    }
    return idx;
}

InContextSequence build_sequence(const ShotSet& shots, std::span<const std::string> captions, std::string_view test_id,
                                 const OrderPolicy& policy) {
    if (captions.size() != shots.size())
        throw ValidationError("got " + std::to_string(captions.size()) + " captions for " +
                              std::to_string(shots.size()) + " shots");
    InContextSequence seq;
    seq.test_image_id = test_id;
    seq.order_policy = policy;
    for (std::size_t i : order_indices(shots.scores, policy)) {
        if (shots.image_ids[i] == test_id)
            throw ValidationError("test image " + std::string(test_id) + " appears among its own shots");
        if (captions[i].empty()) throw ValidationError("empty caption for shot " + shots.image_ids[i]);
        seq.shots.push_back({shots.image_ids[i], captions[i]});
    }
    return seq;
}

}  // namespace ictx

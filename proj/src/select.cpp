#include "ictx/select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ictx/error.hpp"
#include "ictx/parallel.hpp"
#include "ictx/rng.hpp"

namespace ictx {

std::string_view to_string(Strategy s) noexcept {
    switch (s) {
        case Strategy::RS: return "rs";
        case Strategy::SiirClip: return "siir-clip";
        case Strategy::SiirTag: return "siir-tag";
        case Strategy::SicrClip: return "sicr-clip";
        case Strategy::DiirTr: return "diir-tr";
        case Strategy::DiirTt: return "diir-tt";
    }
    return "rs";
}

Strategy parse_strategy(std::string_view text) {
    for (auto s : {Strategy::RS, Strategy::SiirClip, Strategy::SiirTag, Strategy::SicrClip, Strategy::DiirTr,
                   Strategy::DiirTt})
        if (to_string(s) == text) return s;
    throw ValidationError("unknown strategy '" + std::string(text) +
                          "' (expected rs|siir-clip|siir-tag|sicr-clip|diir-tr|diir-tt)");
}

bool has_scores(Strategy s) noexcept { return s != Strategy::RS; }

nlohmann::ordered_json shot_set_json(const ShotSet& shots, std::string_view test_id, Strategy strategy) {
    nlohmann::ordered_json j;
    j["test_id"] = test_id;
    j["strategy"] = to_string(strategy);
    auto arr = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < shots.size(); ++i) {
        nlohmann::ordered_json s;
        s["image_id"] = shots.image_ids[i];
        if (shots.scores[i]) s["score"] = *shots.scores[i];
        else s["score"] = nullptr;
        arr.push_back(std::move(s));
    }
    j["shots"] = std::move(arr);
    return j;
}

namespace {

/// Orders (score desc, id asc).
struct RankBefore {
    bool operator()(const ScoredId& a, const ScoredId& b) const {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    }
};

std::vector<double> cosine_scores(std::span<const float> query, const EmbeddingStore& store,
                                  std::span<const std::size_t> rows, unsigned workers) {
    if (query.size() != store.dim())
        throw ValidationError("query dim " + std::to_string(query.size()) + " does not match store dim " +
                              std::to_string(store.dim()));
    double qsq = 0.0;
    for (float v : query) qsq += static_cast<double>(v) * v;
    const double qnorm = std::sqrt(qsq);
    if (qnorm == 0.0 || !std::isfinite(qnorm)) throw ValidationError("zero-norm query vector");

    std::vector<double> scores(rows.size());
    parallel_for(rows.size(), workers, [&](std::size_t i) {
        const std::size_t r = rows[i];
        const double rnorm = store.row_norm(r);
        if (rnorm == 0.0) throw ValidationError("zero-norm embedding row " + store.id(r));
        const auto v = store.row(r);
        double dot = 0.0;
        for (std::size_t d = 0; d < v.size(); ++d) dot += static_cast<double>(query[d]) * v[d];
        scores[i] = dot / (qnorm * rnorm);
    });
    return scores;
}

std::vector<ScoredId> top_k(std::vector<ScoredId> items, std::size_t k) {
    k = std::min(k, items.size());
    std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(k), items.end(), RankBefore{});
    items.resize(k);
    return items;
}

/// Pool with the test image removed; duplicates are an input error.
std::vector<std::string> effective_pool(const SelectionSpec& spec, std::string_view test_id) {
    std::vector<std::string> pool;
    pool.reserve(spec.pool.size());
    std::unordered_set<std::string> seen;
    for (const auto& id : spec.pool) {
        if (!seen.insert(id).second) throw ValidationError("candidate pool lists " + id + " twice");
        if (id != test_id) pool.push_back(id);
    }
    if (spec.n_shots == 0) throw ValidationError("n_shots must be positive");
    if (spec.n_shots > pool.size())
        throw ValidationError("n_shots " + std::to_string(spec.n_shots) + " exceeds pool size " +
                              std::to_string(pool.size()));
    return pool;
}

ShotSet from_ranked(const std::vector<ScoredId>& ranked) {
    ShotSet out;
    for (const auto& r : ranked) {
        out.image_ids.push_back(r.id);
        out.scores.emplace_back(r.score);
    }
    return out;
}

std::size_t intersection_size(const TagIndex::Interned& a, const TagIndex::Interned& b) {
    std::size_t n = 0;
    auto i = a.begin();
    auto j = b.begin();
    while (i != a.end() && j != b.end()) {
        if (*i < *j) ++i;
        else if (*j < *i) ++j;
        else {
            ++n;
            ++i;
            ++j;
        }
    }
    return n;
}

double tag_score(const TagIndex::Interned& query, const TagIndex::Interned& cand, TagScoring scoring) {
    const auto inter = intersection_size(query, cand);
    if (scoring == TagScoring::Intersection) return static_cast<double>(inter);
    const auto uni = query.size() + cand.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct TagPool {
    std::vector<std::string> ids;
    std::vector<std::size_t> rows;
};

TagPool tag_pool(const TagIndex& tags, const std::vector<std::string>& pool) {
    TagPool p;
    p.ids = pool;
    p.rows.reserve(pool.size());
    for (const auto& id : pool) {
        auto r = tags.row_of(id);
        if (!r) throw ValidationError("missing tags for pool image " + id);
        p.rows.push_back(*r);
    }
    return p;
}

/// Every pool image scored against `query`, sorted best first.
template <typename CandidateTags>
std::vector<ScoredId> rank_by_tags(const TagPool& pool, const TagIndex::Interned& query, TagScoring scoring,
                                   CandidateTags&& candidate_tags, unsigned workers) {
    std::vector<ScoredId> scored(pool.ids.size());
    parallel_for(pool.ids.size(), workers, [&](std::size_t i) {
        scored[i] = {pool.ids[i], tag_score(query, candidate_tags(pool.rows[i]), scoring)};
    });
    std::sort(scored.begin(), scored.end(), RankBefore{});
    return scored;
}

std::size_t test_tag_row(const TagIndex& tags, std::string_view test_id) {
    auto row = tags.row_of(test_id);
    if (!row) throw ValidationError("missing tags for test image " + std::string(test_id));
    if (tags.interned_pooled(*row).empty())
        throw ValidationError("test image " + std::string(test_id) + " has an empty tag set");
    return *row;
}

}  // namespace

std::vector<ScoredId> cosine_topk_rows(std::span<const float> query, const EmbeddingStore& store,
                                       std::span<const std::size_t> rows, std::size_t k, const ScanOptions& opts) {
    if (k > rows.size())
        throw ValidationError("k = " + std::to_string(k) + " exceeds the " + std::to_string(rows.size()) +
                              " eligible rows");
    const auto scores = cosine_scores(query, store, rows, opts.workers);
    std::vector<ScoredId> items(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) items[i] = {store.id(rows[i]), scores[i]};
    return top_k(std::move(items), k);
}

std::vector<ScoredId> cosine_topk(std::span<const float> query, const EmbeddingStore& store, std::size_t k,
                                  const std::unordered_set<std::string>& exclude, const ScanOptions& opts) {
    std::vector<std::size_t> rows;
    rows.reserve(store.size());
    for (std::size_t r = 0; r < store.size(); ++r)
        if (!exclude.contains(store.id(r))) rows.push_back(r);
    return cosine_topk_rows(query, store, rows, k, opts);
}

std::size_t tag_similarity(const TagSet& a, const TagSet& b) {
    const auto pa = a.pooled();
    const auto pb = b.pooled();
    std::vector<std::string> common;
    std::set_intersection(pa.begin(), pa.end(), pb.begin(), pb.end(), std::back_inserter(common));
    return common.size();
}

double tag_jaccard(const TagSet& a, const TagSet& b) {
    const auto inter = tag_similarity(a, b);
    const auto uni = a.pooled().size() + b.pooled().size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

ShotSet select_rs(const SelectionSpec& spec, std::string_view test_id) {
    const auto pool = effective_pool(spec, test_id);
    Rng rng(spec.seed);
    ShotSet out;
    for (std::size_t i : rng.sample_indices(pool.size(), spec.n_shots)) {
        out.image_ids.push_back(pool[i]);
        out.scores.emplace_back(std::nullopt);
    }
    return out;
}

ShotSet select_siir_clip(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                         const ScanOptions& opts) {
    const auto pool = effective_pool(spec, test_id);
    const auto& store = res.require_image_embeddings();
    const auto query = store.vector_of(test_id);
    std::vector<std::size_t> rows;
    rows.reserve(pool.size());
    for (const auto& id : pool) {
        auto r = store.row_of(id);
        if (!r) throw ValidationError("missing embedding for pool image " + id);
        rows.push_back(*r);
    }
    return from_ranked(cosine_topk_rows(query, store, rows, spec.n_shots, opts));
}

ShotSet select_siir_tag(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                        const ScanOptions& opts) {
    const auto pool = effective_pool(spec, test_id);
    const auto& tags = res.require_tags();
    const auto test_row = test_tag_row(tags, test_id);
    const auto tp = tag_pool(tags, pool);
    auto ranked = rank_by_tags(tp, tags.interned_pooled(test_row), spec.tag_scoring,
                               [&](std::size_t r) -> const TagIndex::Interned& { return tags.interned_pooled(r); },
                               opts.workers);
    ranked.resize(spec.n_shots);
    return from_ranked(ranked);
}

ShotSet select_sicr_clip(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                         const ScanOptions& opts) {
    const auto pool = effective_pool(spec, test_id);
    const auto& captions = res.require_caption_embeddings(spec.caption_source);
    const auto query = res.require_image_embeddings().vector_of(test_id);
    const std::unordered_set<std::string> eligible(pool.begin(), pool.end());

    std::vector<std::size_t> rows;
    std::vector<CaptionRef> refs;
    for (std::size_t r = 0; r < captions.size(); ++r) {
        auto ref = parse_caption_id(captions.id(r));
        if (!eligible.contains(ref.image_id)) continue;
        rows.push_back(r);
        refs.push_back(std::move(ref));
    }
    const auto scores = cosine_scores(query, captions, rows, opts.workers);
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return captions.id(rows[a]) < captions.id(rows[b]);
    });

    const bool ground_truth = spec.caption_source == "gtc";
    const CaptionStore* store = ground_truth ? nullptr : &res.require_caption_store(spec.caption_source);
    ShotSet out;
    std::unordered_set<std::string> owners;
    for (std::size_t idx : order) {
        if (out.size() == spec.n_shots) break;
        const auto& ref = refs[idx];
        if (!owners.insert(ref.image_id).second) continue;
        std::string text;
        if (ground_truth) {
            const auto& rec = res.corpus.at(ref.image_id);
            if (ref.index >= rec.captions.size())
                throw ValidationError("caption id " + captions.id(rows[idx]) + " points past the ground-truth list");
            text = rec.captions[ref.index];
        } else {
            const auto* c = store->find(ref.image_id);
            if (!c) throw ValidationError("caption store '" + spec.caption_source + "' has no entry for " + ref.image_id);
            text = *c;
        }
        out.image_ids.push_back(ref.image_id);
        out.scores.emplace_back(scores[idx]);
        out.matched_captions.push_back(std::move(text));
    }
    if (out.size() < spec.n_shots)
        throw ValidationError("fewer than " + std::to_string(spec.n_shots) + " distinct owning images in caption store '" +
                              spec.caption_source + "'");
    return out;
}

ShotSet select_diir_tr(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                       const ScanOptions& opts) {
    const auto pool = effective_pool(spec, test_id);
    const auto& tags = res.require_tags();
    test_tag_row(tags, test_id);
    auto all_tags = tags.at(test_id).pooled();
    if (all_tags.size() < spec.n_shots) throw ValidationError("insufficient tags for DIIR-TR");
    Rng rng(spec.seed);
    rng.shuffle(std::span<std::string>(all_tags));

    const auto tp = tag_pool(tags, pool);
    const std::size_t n = spec.n_shots;
    const std::size_t base = all_tags.size() / n;
    const std::size_t extra = all_tags.size() % n;
    std::unordered_set<std::string> chosen;
    ShotSet out;
    std::size_t offset = 0;
    for (std::size_t c = 0; c < n; ++c) {
        const std::size_t len = base + (c < extra ? 1 : 0);
        const auto cluster = tags.intern(std::span<const std::string>(all_tags).subspan(offset, len));
        offset += len;
        const auto ranked = rank_by_tags(
            tp, cluster, spec.tag_scoring,
            [&](std::size_t r) -> const TagIndex::Interned& { return tags.interned_pooled(r); }, opts.workers);
        for (const auto& cand : ranked) {
            if (chosen.insert(cand.id).second) {
                out.image_ids.push_back(cand.id);
                out.scores.emplace_back(cand.score);
                break;
            }
        }
    }
    return out;
}

ShotSet select_diir_tt(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                       const ScanOptions& opts) {
    if (spec.n_shots % kTagCategories != 0)
        throw ValidationError("diir-tt needs n_shots divisible by 4, got " + std::to_string(spec.n_shots));
    const auto pool = effective_pool(spec, test_id);
    const auto& tags = res.require_tags();
    const auto test_row = test_tag_row(tags, test_id);
    const auto tp = tag_pool(tags, pool);
    const std::size_t k = spec.n_shots / kTagCategories;

    std::optional<std::vector<ScoredId>> pooled;
    auto pooled_ranking = [&]() -> const std::vector<ScoredId>& {
        if (!pooled)
            pooled = rank_by_tags(
                tp, tags.interned_pooled(test_row), spec.tag_scoring,
                [&](std::size_t r) -> const TagIndex::Interned& { return tags.interned_pooled(r); }, opts.workers);
        return *pooled;
    };

    std::unordered_set<std::string> chosen;
    ShotSet out;
    auto take = [&](const ScoredId& cand) {
        chosen.insert(cand.id);
        out.image_ids.push_back(cand.id);
        out.scores.emplace_back(cand.score);
    };

    for (std::size_t c = 0; c < kTagCategories; ++c) {
        const auto cat = static_cast<TagCategory>(c);
        std::size_t taken = 0;
        const auto& query = tags.interned(test_row, cat);
        if (!query.empty()) {
            const auto ranked = rank_by_tags(
                tp, query, spec.tag_scoring,
                [&](std::size_t r) -> const TagIndex::Interned& { return tags.interned(r, cat); }, opts.workers);
            for (const auto& cand : ranked) {
                if (taken == k || cand.score <= 0.0) break;
                if (chosen.contains(cand.id)) continue;
                take(cand);
                ++taken;
            }
        }
        for (const auto& cand : pooled_ranking()) {
            if (taken == k) break;
            if (chosen.contains(cand.id)) continue;
            take(cand);
            ++taken;
            ++out.backfilled;
        }
    }
    return out;
}

ShotSet select_shots(const SelectionSpec& spec, std::string_view test_id, const Resources& res,
                     const ScanOptions& opts) {
    switch (spec.strategy) {
        case Strategy::RS: return select_rs(spec, test_id);
        case Strategy::SiirClip: return select_siir_clip(spec, test_id, res, opts);
        case Strategy::SiirTag: return select_siir_tag(spec, test_id, res, opts);
        case Strategy::SicrClip: return select_sicr_clip(spec, test_id, res, opts);
        case Strategy::DiirTr: return select_diir_tr(spec, test_id, res, opts);
        case Strategy::DiirTt: return select_diir_tt(spec, test_id, res, opts);
    }
    throw ValidationError("unhandled strategy");
}

}  // namespace ictx

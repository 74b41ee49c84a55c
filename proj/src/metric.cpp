#include "ictx/metric.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "ictx/error.hpp"
#include "ictx/parallel.hpp"

namespace ictx {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : text) {
        if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
            current.push_back(static_cast<char>(c));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

namespace {

using NgramCounts = std::unordered_map<std::string, std::uint32_t>;

/// Term frequencies of every n-gram with 1 <= n <= n_max.
NgramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n_max) {
    NgramCounts counts;
    for (std::size_t n = 1; n <= n_max; ++n) {
        if (tokens.size() < n) break;
        for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
            std::string key = tokens[i];
            for (std::size_t k = 1; k < n; ++k) {
                key.push_back(' ');
                key += tokens[i + k];
            }
            ++counts[key];
        }
    }
    return counts;
}

std::size_t ngram_order(const std::string& key) {
    return static_cast<std::size_t>(std::count(key.begin(), key.end(), ' ')) + 1;
}

struct TfIdfVector {
    std::array<std::unordered_map<std::string, double>, kCiderMaxN> weights;
    std::array<double, kCiderMaxN> norm{};
    // The reference scorer measures length as the bigram count.
    double length = 0.0;
};

TfIdfVector to_vector(const NgramCounts& counts, const DocFreqTable& df) {
    TfIdfVector v;
    const double log_docs = std::log(static_cast<double>(df.num_docs));
    for (const auto& [key, tf] : counts) {
        const std::size_t n = ngram_order(key);
        const double idf = log_docs - std::log(std::max(1.0, static_cast<double>(df.count(key))));
        const double w = tf * idf;
        v.weights[n - 1].emplace(key, w);
        v.norm[n - 1] += w * w;
        if (n == 2) v.length += tf;
    }
    for (auto& x : v.norm) x = std::sqrt(x);
    return v;
}

std::array<double, kCiderMaxN> similarity(const TfIdfVector& hyp, const TfIdfVector& ref) {
    std::array<double, kCiderMaxN> val{};
    const double delta = hyp.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
    for (std::size_t n = 0; n < kCiderMaxN; ++n) {
        for (const auto& [key, w_hyp] : hyp.weights[n]) {
            auto it = ref.weights[n].find(key);
            if (it == ref.weights[n].end()) continue;
            val[n] += std::min(w_hyp, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val[n] /= hyp.norm[n] * ref.norm[n];
        val[n] *= penalty;
    }
    return val;
}

}  // namespace

DocFreqTable build_df(const std::map<std::string, std::vector<std::string>, std::less<>>& references,
                      std::size_t n_max) {
    if (references.empty()) throw ValidationError("cannot build a df table from an empty reference set");
    DocFreqTable table;
    table.n_max = n_max;
    table.num_docs = references.size();
    for (const auto& [id, captions] : references) {
        std::unordered_set<std::string> seen;
        for (const auto& c : captions)
            for (auto& [key, tf] : count_ngrams(tokenize(c), n_max)) seen.insert(key);
        for (const auto& key : seen) ++table.df[key];
    }
    return table;
}

DocFreqTable build_df(const CorpusIndex& corpus, Split split, std::size_t n_max) {
    std::map<std::string, std::vector<std::string>, std::less<>> refs;
    for (const auto& r : corpus.records())
        if (r.split == split) refs.emplace(r.image_id, r.captions);
    return build_df(refs, n_max);
}

std::string df_table_json(const DocFreqTable& table) {
    std::map<std::string, std::uint32_t> sorted(table.df.begin(), table.df.end());
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [key, count] : sorted) entries.push_back({key, count});
    nlohmann::json j;
    j["entries"] = std::move(entries);
    j["num_docs"] = table.num_docs;
    return j.dump();
}

void write_df_table(const DocFreqTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot write " + path.string());
    out << df_table_json(table);
}

DocFreqTable load_df_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    DocFreqTable table;
    try {
        const auto j = nlohmann::json::parse(in);
        table.num_docs = j.at("num_docs").get<std::size_t>();
        for (const auto& e : j.at("entries")) table.df.emplace(e.at(0).get<std::string>(), e.at(1).get<std::uint32_t>());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": malformed df table: " + e.what());
    }
    if (table.num_docs == 0) throw ValidationError(path.string() + ": num_docs must be positive");
    return table;
}

CiderScore cider_d(std::string_view candidate, std::span<const std::string> refs, const DocFreqTable& df) {
    if (refs.empty()) throw ValidationError("cider_d needs at least one reference");
    if (df.num_docs == 0) throw ValidationError("cider_d needs a df table with at least one document");
    const auto hyp = to_vector(count_ngrams(tokenize(candidate), df.n_max), df);
    CiderScore score;
    for (const auto& r : refs) {
        const auto ref = to_vector(count_ngrams(tokenize(r), df.n_max), df);
        const auto s = similarity(hyp, ref);
        for (std::size_t n = 0; n < kCiderMaxN; ++n) score.per_n[n] += s[n];
    }
    double sum = 0.0;
    for (auto& x : score.per_n) {
        x /= static_cast<double>(refs.size());
        sum += x;
    }
    score.value = sum / static_cast<double>(kCiderMaxN) * 10.0;
    return score;
}

double corpus_cider(const std::map<std::string, std::string, std::less<>>& candidates, const CorpusIndex& corpus,
                    const DocFreqTable& df, unsigned workers) {
    if (candidates.empty()) throw ValidationError("corpus_cider needs at least one candidate");
    std::vector<std::pair<const std::string*, const ImageRecord*>> items;
    items.reserve(candidates.size());
    for (const auto& [id, caption] : candidates) {
        const auto* rec = corpus.find(id);
        if (!rec) throw ValidationError("candidate caption for unknown image " + id);
        items.emplace_back(&caption, rec);
    }
    std::vector<double> scores(items.size());
    parallel_for(items.size(), workers, [&](std::size_t i) {
        scores[i] = cider_d(*items[i].first, items[i].second->captions, df).value;
    });
    double total = 0.0;
    for (double s : scores) total += s;
    return total / static_cast<double>(scores.size()) * 100.0;
}

}  // namespace ictx

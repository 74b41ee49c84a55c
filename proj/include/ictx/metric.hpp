#pragma once

// CIDEr-D consensus metric.
//
// Mirrors the coco-caption CIDEr-D scorer: TF-IDF n-gram vectors for n = 1..4,
// candidate term weights clipped to the reference weights, a Gaussian length
// penalty with sigma = 6, and a final x10 scale. The document-frequency table
// is built once from a reference corpus and passed in explicitly.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ictx/corpus.hpp"

namespace ictx {

inline constexpr std::size_t kCiderMaxN = 4;
inline constexpr double kCiderSigma = 6.0;

/// Lowercase, map every byte outside [a-z0-9] to a space, split on whitespace.
std::vector<std::string> tokenize(std::string_view text);

/// Document frequencies keyed by the n-gram's tokens joined with single spaces.
struct DocFreqTable {
    std::size_t n_max = kCiderMaxN;
    std::unordered_map<std::string, std::uint32_t> df;
    std::size_t num_docs = 0;

    std::uint32_t count(const std::string& ngram) const {
        auto it = df.find(ngram);
        return it == df.end() ? 0 : it->second;
    }
};

/// df[g] = number of documents (images) with g in at least one caption.
/// Throws ValidationError on an empty reference map.
DocFreqTable build_df(const std::map<std::string, std::vector<std::string>, std::less<>>& references,
                      std::size_t n_max = kCiderMaxN);
/// Same, with every image of `split` as one document.
DocFreqTable build_df(const CorpusIndex& corpus, Split split, std::size_t n_max = kCiderMaxN);

/// {"entries":[["tok tok",count],...],"num_docs":N}, entries sorted by n-gram, no trailing newline.
std::string df_table_json(const DocFreqTable& table);
void write_df_table(const DocFreqTable& table, const std::filesystem::path& path);
DocFreqTable load_df_table(const std::filesystem::path& path);

struct CiderScore {
    double value = 0.0;                 ///< 10 x mean(per_n)
    std::array<double, kCiderMaxN> per_n{};  ///< reference-averaged similarity for each n
};

/// Throws ValidationError when refs is empty.
CiderScore cider_d(std::string_view candidate, std::span<const std::string> refs, const DocFreqTable& df);

/// Mean of per-image cider_d against all ground-truth captions, x100.
/// Throws ValidationError for candidates of unknown images or an empty map.
double corpus_cider(const std::map<std::string, std::string, std::less<>>& candidates, const CorpusIndex& corpus,
                    const DocFreqTable& df, unsigned workers = 1);

}  // namespace ictx

#pragma once

// Ingestion and lookup for everything the experiments read from disk:
// the image manifest with ground-truth captions, dense embeddings, semantic
// tags and model-generated caption stores. All stores are immutable once
// loaded and safe to read from any number of threads.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ictx {

enum class Split { Train, Val, Test };

std::string_view to_string(Split split) noexcept;
/// Throws ValidationError on anything other than train|val|test.
Split parse_split(std::string_view text);

struct ImageRecord {
    std::string image_id;
    Split split = Split::Train;
    std::vector<std::string> captions;  ///< ground truth, index 0 = manifest order
    std::optional<std::string> file;    ///< relative path to the image bytes

    bool operator==(const ImageRecord&) const = default;
};

struct SplitCounts {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;

    bool operator==(const SplitCounts&) const = default;
};

class CorpusIndex {
public:
    CorpusIndex() = default;
    /// Throws ValidationError on duplicate ids or empty caption lists.
    explicit CorpusIndex(std::vector<ImageRecord> records);

    std::span<const ImageRecord> records() const noexcept { return records_; }
    std::size_t size() const noexcept { return records_.size(); }
    bool contains(std::string_view image_id) const;
    const ImageRecord* find(std::string_view image_id) const;
    /// Throws ValidationError when the id is unknown.
    const ImageRecord& at(std::string_view image_id) const;
    /// Ids of one split in manifest order.
    std::vector<std::string> split_ids(Split split) const;
    SplitCounts split_counts() const noexcept { return counts_; }

    bool operator==(const CorpusIndex& other) const { return records_ == other.records_; }

private:
    std::vector<ImageRecord> records_;
    std::unordered_map<std::string, std::size_t> by_id_;
    SplitCounts counts_;
};

CorpusIndex load_manifest(const std::filesystem::path& path);
void write_manifest(const CorpusIndex& corpus, const std::filesystem::path& path);

/// All ids of `split` except `exclude`, manifest order.
std::vector<std::string> candidate_pool(const CorpusIndex& corpus, Split split, std::string_view exclude);

// --- embeddings -----------------------------------------------------------

enum class EmbeddingKind { Image, Caption };

/// Row-major float32 matrix with one row per id. Rows are stored as loaded;
/// row norms are cached so retrieval can normalize on the fly.
class EmbeddingStore {
public:
    EmbeddingStore() = default;
    /// Throws ValidationError on shape mismatch, duplicate ids or non-finite values.
    EmbeddingStore(std::vector<std::string> ids, std::size_t dim, std::vector<float> matrix,
                   EmbeddingKind kind = EmbeddingKind::Image);

    std::size_t size() const noexcept { return ids_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    EmbeddingKind kind() const noexcept { return kind_; }
    std::span<const std::string> ids() const noexcept { return ids_; }
    const std::string& id(std::size_t row) const { return ids_[row]; }
    std::span<const float> row(std::size_t r) const { return {matrix_.data() + r * dim_, dim_}; }
    double row_norm(std::size_t r) const { return norms_[r]; }
    std::span<const float> data() const noexcept { return matrix_; }
    std::optional<std::size_t> row_of(std::string_view id) const;
    /// Throws ValidationError naming the id when absent.
    std::span<const float> vector_of(std::string_view id) const;

private:
    std::vector<std::string> ids_;
    std::size_t dim_ = 0;
    std::vector<float> matrix_;
    std::vector<double> norms_;
    std::unordered_map<std::string, std::size_t> by_id_;
    EmbeddingKind kind_ = EmbeddingKind::Image;
};

/// Sidecar path convention: "<stem>.bin" -> "<stem>.ids.json".
std::filesystem::path sidecar_path_for(const std::filesystem::path& bin_path);

EmbeddingStore load_embeddings(const std::filesystem::path& bin_path, const std::filesystem::path& sidecar_path,
                               EmbeddingKind kind = EmbeddingKind::Image);
void write_embeddings(const EmbeddingStore& store, const std::filesystem::path& bin_path,
                      const std::filesystem::path& sidecar_path);

struct CaptionRef {
    std::string image_id;
    std::size_t index = 0;
};

/// Splits "<image_id>#<k>" (on the last '#'). Throws ValidationError otherwise.
CaptionRef parse_caption_id(std::string_view caption_id);
std::string make_caption_id(std::string_view image_id, std::size_t index);

// --- tags -----------------------------------------------------------------

enum class TagCategory { Object = 0, Class = 1, Attribute = 2, Relation = 3 };

inline constexpr std::size_t kTagCategories = 4;
std::string_view to_string(TagCategory category) noexcept;

/// Sorted, deduplicated, lowercase string sets. Empty strings are dropped.
struct TagSet {
    std::string image_id;
    std::vector<std::string> objects;
    std::vector<std::string> classes;
    std::vector<std::string> attributes;
    std::vector<std::string> relations;

    const std::vector<std::string>& category(TagCategory c) const;
    std::vector<std::string>& category(TagCategory c);
    /// Union of all four categories, sorted.
    std::vector<std::string> pooled() const;
    bool empty() const noexcept;
    /// Lowercases, sorts and deduplicates every category in place.
    void normalize();

    bool operator==(const TagSet&) const = default;
};

/// Tag sets with tags interned to integers for fast intersection counts.
class TagIndex {
public:
    using Interned = std::vector<std::uint32_t>;  // sorted

    TagIndex() = default;
    explicit TagIndex(std::vector<TagSet> sets);

    std::size_t size() const noexcept { return sets_.size(); }
    const TagSet* find(std::string_view image_id) const;
    /// Throws ValidationError when the image has no tag record.
    const TagSet& at(std::string_view image_id) const;
    std::span<const TagSet> sets() const noexcept { return sets_; }

    std::optional<std::size_t> row_of(std::string_view image_id) const;
    const Interned& interned(std::size_t row, TagCategory c) const {
        return interned_[row][static_cast<std::size_t>(c)];
    }
    const Interned& interned_pooled(std::size_t row) const { return pooled_[row]; }
    /// Interns the given tags; unknown tags get ids no stored set contains.
    Interned intern(std::span<const std::string> tags) const;

private:
    std::vector<TagSet> sets_;
    std::unordered_map<std::string, std::size_t> by_id_;
    std::unordered_map<std::string, std::uint32_t> vocab_;
    std::vector<std::array<Interned, kTagCategories>> interned_;
    std::vector<Interned> pooled_;
};

TagIndex load_tags(const std::filesystem::path& path);
void write_tags(const TagIndex& tags, const std::filesystem::path& path);

// --- caption stores -------------------------------------------------------

struct CaptionStoreEntry {
    std::string image_id;
    std::string source;
    std::string caption;
};

/// One caption per image for a single caption source ("tf@66", "vlm0", ...).
class CaptionStore {
public:
    CaptionStore() = default;
    explicit CaptionStore(std::string source) : source_(std::move(source)) {}

    const std::string& source() const noexcept { return source_; }
    std::size_t size() const noexcept { return order_.size(); }
    /// Throws ValidationError on duplicate ids or empty captions.
    void add(std::string image_id, std::string caption);
    const std::string* find(std::string_view image_id) const;
    /// Insertion-ordered entries.
    std::vector<CaptionStoreEntry> entries() const;

    bool operator==(const CaptionStore& other) const {
        return source_ == other.source_ && order_ == other.order_ && captions_ == other.captions_;
    }

private:
    std::string source_;
    std::vector<std::string> order_;
    std::map<std::string, std::string, std::less<>> captions_;
};

CaptionStore load_caption_store(const std::filesystem::path& path);
void write_caption_store(const CaptionStore& store, const std::filesystem::path& path);

// --- bundle ---------------------------------------------------------------

/// Everything loaded for one experiment. Optional members are absent when the
/// corresponding file was not supplied; consumers raise ValidationError naming
/// the missing dependency.
struct Resources {
    CorpusIndex corpus;
    std::optional<EmbeddingStore> image_embeddings;
    std::map<std::string, EmbeddingStore, std::less<>> caption_embeddings;  ///< by caption source
    std::optional<TagIndex> tags;
    std::map<std::string, CaptionStore, std::less<>> caption_stores;  ///< by source

    const EmbeddingStore& require_image_embeddings() const;
    const TagIndex& require_tags() const;
    const CaptionStore& require_caption_store(std::string_view source) const;
    const EmbeddingStore& require_caption_embeddings(std::string_view source) const;
};

struct ValidationReport {
    std::vector<std::string> problems;
    std::vector<std::string> summary;
    bool ok() const noexcept { return problems.empty(); }
};

/// Cross-store invariants: every embedding, tag and caption id resolves
/// against the corpus, and caption-embedding ids point at existing captions.
ValidationReport validate_resources(const Resources& resources);

}  // namespace ictx

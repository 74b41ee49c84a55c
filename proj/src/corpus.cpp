#include "ictx/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ictx/error.hpp"

namespace ictx {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

static_assert(std::endian::native == std::endian::little, "embedding codec assumes a little-endian host");

std::ifstream open_input(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream in(path, mode);
    if (!in) throw ValidationError("cannot open " + path.string());
    return in;
}

std::ofstream open_output(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, mode | std::ios::trunc);
    if (!out) throw RuntimeError("cannot write " + path.string());
    return out;
}

std::string where(const std::filesystem::path& path, std::size_t line) {
    return path.filename().string() + ":" + std::to_string(line);
}

bool is_blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

/// Calls fn(record, line_no) for every non-blank line; wraps JSON failures
/// with the file and line number.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
    auto in = open_input(path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_blank(line)) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError(where(path, line_no) + ": malformed line: " + e.what());
        }
        if (!record.is_object()) throw ValidationError(where(path, line_no) + ": malformed line: expected an object");
        try {
            fn(record, line_no);
        } catch (const json::exception& e) {
            throw ValidationError(where(path, line_no) + ": malformed line: " + e.what());
        }
    }
}

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

void sort_unique(std::vector<std::string>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

std::string_view to_string(Split split) noexcept {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::Train;
    if (text == "val") return Split::Val;
    if (text == "test") return Split::Test;
    throw ValidationError("invalid split '" + std::string(text) + "' (expected train|val|test)");
}

// --- CorpusIndex ----------------------------------------------------------

CorpusIndex::CorpusIndex(std::vector<ImageRecord> records) : records_(std::move(records)) {
    by_id_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const auto& r = records_[i];
        if (r.image_id.empty()) throw ValidationError("record " + std::to_string(i) + " has an empty image_id");
        if (r.captions.empty()) throw ValidationError("image " + r.image_id + " has no captions");
        if (!by_id_.emplace(r.image_id, i).second) throw ValidationError("duplicate image_id " + r.image_id);
        switch (r.split) {
            case Split::Train: ++counts_.train; break;
            case Split::Val: ++counts_.val; break;
            case Split::Test: ++counts_.test; break;
        }
    }
}

bool CorpusIndex::contains(std::string_view image_id) const { return find(image_id) != nullptr; }

const ImageRecord* CorpusIndex::find(std::string_view image_id) const {
    auto it = by_id_.find(std::string(image_id));
    return it == by_id_.end() ? nullptr : &records_[it->second];
}

const ImageRecord& CorpusIndex::at(std::string_view image_id) const {
    if (const auto* r = find(image_id)) return *r;
    throw ValidationError("unknown image_id " + std::string(image_id));
}

std::vector<std::string> CorpusIndex::split_ids(Split split) const {
    std::vector<std::string> out;
    for (const auto& r : records_)
        if (r.split == split) out.push_back(r.image_id);
    return out;
}

CorpusIndex load_manifest(const std::filesystem::path& path) {
    std::vector<ImageRecord> records;
    std::unordered_map<std::string, std::size_t> first_seen;
    for_each_jsonl(path, [&](const json& j, std::size_t line_no) {
        ImageRecord r;
        r.image_id = j.at("image_id").get<std::string>();
        if (r.image_id.empty()) throw ValidationError(where(path, line_no) + ": malformed line: empty image_id");
        try {
            r.split = parse_split(j.at("split").get<std::string>());
        } catch (const ValidationError& e) {
            throw ValidationError(where(path, line_no) + ": malformed line: " + e.what());
        }
        r.captions = j.at("captions").get<std::vector<std::string>>();
        if (r.captions.empty()) throw ValidationError(where(path, line_no) + ": malformed line: no captions");
        if (auto it = j.find("file"); it != j.end() && !it->is_null()) r.file = it->get<std::string>();
        if (!first_seen.emplace(r.image_id, line_no).second)
            throw ValidationError("duplicate image_id " + r.image_id + " at line " + std::to_string(line_no));
        records.push_back(std::move(r));
    });
    return CorpusIndex(std::move(records));
}

void write_manifest(const CorpusIndex& corpus, const std::filesystem::path& path) {
    auto out = open_output(path);
    for (const auto& r : corpus.records()) {
        ordered_json j;
        j["image_id"] = r.image_id;
        j["split"] = to_string(r.split);
        j["captions"] = r.captions;
        if (r.file) j["file"] = *r.file;
        out << j.dump() << '\n';
    }
}

std::vector<std::string> candidate_pool(const CorpusIndex& corpus, Split split, std::string_view exclude) {
    std::vector<std::string> out;
    for (const auto& r : corpus.records())
        if (r.split == split && r.image_id != exclude) out.push_back(r.image_id);
    return out;
}

// --- EmbeddingStore -------------------------------------------------------

EmbeddingStore::EmbeddingStore(std::vector<std::string> ids, std::size_t dim, std::vector<float> matrix,
                               EmbeddingKind kind)
    : ids_(std::move(ids)), dim_(dim), matrix_(std::move(matrix)), kind_(kind) {
    if (dim_ == 0) throw ValidationError("embedding dim must be positive");
    if (matrix_.size() != ids_.size() * dim_) throw ValidationError("id count mismatch: matrix rows do not match ids");
    norms_.resize(ids_.size());
    by_id_.reserve(ids_.size());
    for (std::size_t r = 0; r < ids_.size(); ++r) {
        if (!by_id_.emplace(ids_[r], r).second) throw ValidationError("duplicate embedding id " + ids_[r]);
        double sq = 0.0;
        for (float v : row(r)) {
            if (!std::isfinite(v)) throw ValidationError("non-finite value in embedding row " + ids_[r]);
            sq += static_cast<double>(v) * v;
        }
        norms_[r] = std::sqrt(sq);
    }
}

std::optional<std::size_t> EmbeddingStore::row_of(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
}

std::span<const float> EmbeddingStore::vector_of(std::string_view id) const {
    if (auto r = row_of(id)) return row(*r);
    throw ValidationError("missing embedding for " + std::string(id));
}

std::filesystem::path sidecar_path_for(const std::filesystem::path& bin_path) {
    auto p = bin_path;
    p.replace_extension(".ids.json");
    return p;
}

namespace {
constexpr char kMagic[4] = {'I', 'C', 'E', 'B'};

std::uint32_t read_u32_le(const unsigned char* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}
}  // namespace

EmbeddingStore load_embeddings(const std::filesystem::path& bin_path, const std::filesystem::path& sidecar_path,
                               EmbeddingKind kind) {
    auto in = open_input(bin_path, std::ios::binary);
    unsigned char header[12];
    if (!in.read(reinterpret_cast<char*>(header), sizeof header))
        throw ValidationError(bin_path.string() + ": truncated header");
    if (std::memcmp(header, kMagic, 4) != 0) throw ValidationError(bin_path.string() + ": bad magic");
    const std::size_t count = read_u32_le(header + 4);
    const std::size_t dim = read_u32_le(header + 8);
    if (dim == 0) throw ValidationError(bin_path.string() + ": dim must be positive");

    std::vector<float> matrix(count * dim);
    const auto bytes = static_cast<std::streamsize>(matrix.size() * sizeof(float));
    if (!in.read(reinterpret_cast<char*>(matrix.data()), bytes))
        throw ValidationError(bin_path.string() + ": payload shorter than count x dim");
    if (in.peek() != std::ifstream::traits_type::eof())
        throw ValidationError(bin_path.string() + ": trailing bytes after payload");

    std::vector<std::string> ids;
    try {
        auto sidecar = open_input(sidecar_path);
        ids = json::parse(sidecar).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ValidationError(sidecar_path.string() + ": malformed sidecar: " + e.what());
    }
    if (ids.size() != count)
        throw ValidationError("id count mismatch: " + sidecar_path.string() + " lists " + std::to_string(ids.size()) +
                              " ids, header count is " + std::to_string(count));
    for (std::size_t i = 0; i < matrix.size(); ++i)
        if (!std::isfinite(matrix[i]))
            throw ValidationError(bin_path.string() + ": non-finite value in row " + ids[i / dim]);
    return EmbeddingStore(std::move(ids), dim, std::move(matrix), kind);
}

void write_embeddings(const EmbeddingStore& store, const std::filesystem::path& bin_path,
                      const std::filesystem::path& sidecar_path) {
    auto out = open_output(bin_path, std::ios::binary);
    out.write(kMagic, 4);
    write_u32_le(out, static_cast<std::uint32_t>(store.size()));
    write_u32_le(out, static_cast<std::uint32_t>(store.dim()));
    const auto data = store.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    auto side = open_output(sidecar_path);
    side << json(std::vector<std::string>(store.ids().begin(), store.ids().end())).dump() << '\n';
}

CaptionRef parse_caption_id(std::string_view caption_id) {
    const auto hash = caption_id.rfind('#');
    if (hash == std::string_view::npos || hash == 0 || hash + 1 == caption_id.size())
        throw ValidationError("caption id '" + std::string(caption_id) + "' is not of the form <image_id>#<k>");
    std::size_t k = 0;
    for (char c : caption_id.substr(hash + 1)) {
        if (c < '0' || c > '9')
            throw ValidationError("caption id '" + std::string(caption_id) + "' has a non-numeric index");
        k = k * 10 + static_cast<std::size_t>(c - '0');
    }
    return {std::string(caption_id.substr(0, hash)), k};
}

std::string make_caption_id(std::string_view image_id, std::size_t index) {
    return std::string(image_id) + "#" + std::to_string(index);
}

// --- tags -----------------------------------------------------------------

std::string_view to_string(TagCategory category) noexcept {
    switch (category) {
        case TagCategory::Object: return "objects";
        case TagCategory::Class: return "classes";
        case TagCategory::Attribute: return "attributes";
        case TagCategory::Relation: return "relations";
    }
    return "objects";
}

const std::vector<std::string>& TagSet::category(TagCategory c) const {
    switch (c) {
        case TagCategory::Object: return objects;
        case TagCategory::Class: return classes;
        case TagCategory::Attribute: return attributes;
        case TagCategory::Relation: return relations;
    }
    return objects;
}

std::vector<std::string>& TagSet::category(TagCategory c) {
    return const_cast<std::vector<std::string>&>(std::as_const(*this).category(c));
}

std::vector<std::string> TagSet::pooled() const {
    std::vector<std::string> all;
    all.reserve(objects.size() + classes.size() + attributes.size() + relations.size());
    for (auto* v : {&objects, &classes, &attributes, &relations}) all.insert(all.end(), v->begin(), v->end());
    sort_unique(all);
    return all;
}

bool TagSet::empty() const noexcept {
    return objects.empty() && classes.empty() && attributes.empty() && relations.empty();
}

void TagSet::normalize() {
    for (auto* v : {&objects, &classes, &attributes, &relations}) {
        for (auto& t : *v) t = lowercase(std::move(t));
        std::erase_if(*v, [](const std::string& t) { return t.empty(); });
        sort_unique(*v);
    }
}

TagIndex::TagIndex(std::vector<TagSet> sets) : sets_(std::move(sets)) {
    by_id_.reserve(sets_.size());
    interned_.resize(sets_.size());
    pooled_.resize(sets_.size());
    for (std::size_t i = 0; i < sets_.size(); ++i) {
        auto& s = sets_[i];
        s.normalize();
        if (!by_id_.emplace(s.image_id, i).second) throw ValidationError("duplicate tag record for image_id " + s.image_id);
        for (std::size_t c = 0; c < kTagCategories; ++c) {
            auto& ids = interned_[i][c];
            for (const auto& t : s.category(static_cast<TagCategory>(c))) {
                auto [it, inserted] = vocab_.emplace(t, static_cast<std::uint32_t>(vocab_.size()));
                ids.push_back(it->second);
            }
            std::sort(ids.begin(), ids.end());
            pooled_[i].insert(pooled_[i].end(), ids.begin(), ids.end());
        }
        auto& p = pooled_[i];
        std::sort(p.begin(), p.end());
        p.erase(std::unique(p.begin(), p.end()), p.end());
    }
}

const TagSet* TagIndex::find(std::string_view image_id) const {
    auto r = row_of(image_id);
    return r ? &sets_[*r] : nullptr;
}

const TagSet& TagIndex::at(std::string_view image_id) const {
    if (const auto* s = find(image_id)) return *s;
    throw ValidationError("missing tags for " + std::string(image_id));
}

std::optional<std::size_t> TagIndex::row_of(std::string_view image_id) const {
    auto it = by_id_.find(std::string(image_id));
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
}

TagIndex::Interned TagIndex::intern(std::span<const std::string> tags) const {
    Interned out;
    auto unknown = static_cast<std::uint32_t>(vocab_.size());
    std::set<std::string> seen;
    for (const auto& t : tags) {
        auto lower = lowercase(t);
        if (lower.empty() || !seen.insert(lower).second) continue;
        auto it = vocab_.find(lower);
        out.push_back(it != vocab_.end() ? it->second : unknown++);
    }
    std::sort(out.begin(), out.end());
    return out;
}

TagIndex load_tags(const std::filesystem::path& path) {
    std::vector<TagSet> sets;
    std::unordered_map<std::string, std::size_t> first_seen;
    for_each_jsonl(path, [&](const json& j, std::size_t line_no) {
        TagSet s;
        s.image_id = j.at("image_id").get<std::string>();
        for (std::size_t c = 0; c < kTagCategories; ++c) {
            const auto cat = static_cast<TagCategory>(c);
            if (auto it = j.find(std::string(to_string(cat))); it != j.end() && !it->is_null())
                s.category(cat) = it->get<std::vector<std::string>>();
        }
        if (!first_seen.emplace(s.image_id, line_no).second)
            throw ValidationError("duplicate image_id " + s.image_id + " in " + path.filename().string() + " at line " +
                                  std::to_string(line_no));
        sets.push_back(std::move(s));
    });
    return TagIndex(std::move(sets));
}

void write_tags(const TagIndex& tags, const std::filesystem::path& path) {
    auto out = open_output(path);
    for (const auto& s : tags.sets()) {
        ordered_json j;
        j["image_id"] = s.image_id;
        for (std::size_t c = 0; c < kTagCategories; ++c) {
            const auto cat = static_cast<TagCategory>(c);
            j[std::string(to_string(cat))] = s.category(cat);
        }
        out << j.dump() << '\n';
    }
}

// --- caption stores -------------------------------------------------------

void CaptionStore::add(std::string image_id, std::string caption) {
    if (caption.empty()) throw ValidationError("empty caption for " + image_id + " in source " + source_);
    if (captions_.contains(image_id))
        throw ValidationError("duplicate caption entry for (" + image_id + ", " + source_ + ")");
    order_.push_back(image_id);
    captions_.emplace(std::move(image_id), std::move(caption));
}

const std::string* CaptionStore::find(std::string_view image_id) const {
    auto it = captions_.find(image_id);
    return it == captions_.end() ? nullptr : &it->second;
}

std::vector<CaptionStoreEntry> CaptionStore::entries() const {
    std::vector<CaptionStoreEntry> out;
    out.reserve(order_.size());
    for (const auto& id : order_) out.push_back({id, source_, captions_.find(id)->second});
    return out;
}

CaptionStore load_caption_store(const std::filesystem::path& path) {
    std::optional<CaptionStore> store;
    for_each_jsonl(path, [&](const json& j, std::size_t line_no) {
        auto id = j.at("image_id").get<std::string>();
        auto source = j.at("source").get<std::string>();
        auto caption = j.at("caption").get<std::string>();
        if (!store) store.emplace(source);
        if (source != store->source())
            throw ValidationError(where(path, line_no) + ": source '" + source + "' differs from '" + store->source() +
                                  "' used earlier in the file");
        try {
            store->add(std::move(id), std::move(caption));
        } catch (const ValidationError& e) {
            throw ValidationError(where(path, line_no) + ": " + e.what());
        }
    });
    if (!store) throw ValidationError(path.string() + ": caption store is empty");
    return std::move(*store);
}

void write_caption_store(const CaptionStore& store, const std::filesystem::path& path) {
    auto out = open_output(path);
    for (const auto& e : store.entries()) {
        ordered_json j;
        j["image_id"] = e.image_id;
        j["source"] = e.source;
        j["caption"] = e.caption;
        out << j.dump() << '\n';
    }
}

// --- Resources ------------------------------------------------------------

const EmbeddingStore& Resources::require_image_embeddings() const {
    if (!image_embeddings) throw ValidationError("image embeddings are required but were not loaded (--embeddings)");
    return *image_embeddings;
}

const TagIndex& Resources::require_tags() const {
    if (!tags) throw ValidationError("semantic tags are required but were not loaded (--tags)");
    return *tags;
}

const CaptionStore& Resources::require_caption_store(std::string_view source) const {
    auto it = caption_stores.find(source);
    if (it == caption_stores.end())
        throw ValidationError("caption store '" + std::string(source) + "' is required but was not loaded (--captions)");
    return it->second;
}

const EmbeddingStore& Resources::require_caption_embeddings(std::string_view source) const {
    auto it = caption_embeddings.find(source);
    if (it == caption_embeddings.end())
        throw ValidationError("caption embeddings for source '" + std::string(source) +
                              "' are required but were not loaded (--caption-embeddings)");
    return it->second;
}

ValidationReport validate_resources(const Resources& res) {
    ValidationReport rep;
    const auto& corpus = res.corpus;
    const auto counts = corpus.split_counts();
    std::ostringstream line;
    line << "manifest: " << corpus.size() << " images (train " << counts.train << ", val " << counts.val << ", test "
         << counts.test << ")";
    rep.summary.push_back(line.str());

    auto limited = [&](std::vector<std::string>& missing, const std::string& what) {
        if (missing.empty()) return;
        std::string msg = what + ": " + std::to_string(missing.size()) + " unresolved id(s), e.g. " + missing.front();
        rep.problems.push_back(std::move(msg));
    };

    if (res.image_embeddings) {
        std::vector<std::string> missing;
        for (const auto& id : res.image_embeddings->ids())
            if (!corpus.contains(id)) missing.push_back(id);
        limited(missing, "image embeddings");
        rep.summary.push_back("image embeddings: " + std::to_string(res.image_embeddings->size()) + " x " +
                              std::to_string(res.image_embeddings->dim()));
    }
    for (const auto& [source, store] : res.caption_embeddings) {
        std::vector<std::string> missing;
        auto cs = res.caption_stores.find(source);
        const CaptionStore* captions = cs == res.caption_stores.end() ? nullptr : &cs->second;
        for (const auto& cid : store.ids()) {
            try {
                const auto ref = parse_caption_id(cid);
                const auto* rec = corpus.find(ref.image_id);
                bool ok = rec != nullptr;
                if (ok && source == "gtc") ok = ref.index < rec->captions.size();
                else if (ok) ok = ref.index == 0 && captions != nullptr && captions->find(ref.image_id) != nullptr;
                if (!ok) missing.push_back(cid);
            } catch (const ValidationError&) {
                missing.push_back(cid);
            }
        }
        limited(missing, "caption embeddings '" + source + "'");
        rep.summary.push_back("caption embeddings '" + source + "': " + std::to_string(store.size()) + " x " +
                              std::to_string(store.dim()));
    }
    if (res.tags) {
        std::vector<std::string> missing;
        std::size_t empty = 0;
        for (const auto& s : res.tags->sets()) {
            if (!corpus.contains(s.image_id)) missing.push_back(s.image_id);
            if (s.empty()) ++empty;
        }
        limited(missing, "tags");
        rep.summary.push_back("tags: " + std::to_string(res.tags->size()) + " images (" + std::to_string(empty) +
                              " with no tags)");
    }
    for (const auto& [source, store] : res.caption_stores) {
        std::vector<std::string> missing;
        for (const auto& e : store.entries())
            if (!corpus.contains(e.image_id)) missing.push_back(e.image_id);
        limited(missing, "caption store '" + source + "'");
        rep.summary.push_back("captions '" + source + "': " + std::to_string(store.size()) + " entries");
    }
    return rep;
}

}  // namespace ictx

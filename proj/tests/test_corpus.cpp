#include <cstring>
#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "fixture.hpp"
#include "ictx/corpus.hpp"
#include "ictx/error.hpp"

using namespace ictx;

namespace {

std::filesystem::path write(const std::filesystem::path& dir, const std::string& name, const std::string& text) {
    auto p = dir / name;
    std::ofstream(p, std::ios::binary) << text;
    return p;
}

std::string error_of(const auto& fn) {
    try {
        fn();
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "";
}

void write_raw_embeddings(const std::filesystem::path& bin, const char* magic, std::uint32_t count, std::uint32_t dim,
                          const std::vector<float>& payload) {
    std::ofstream o(bin, std::ios::binary);
    o.write(magic, 4);
    auto u32 = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        o.write(reinterpret_cast<const char*>(b), 4);
    };
    u32(count);
    u32(dim);
    o.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
}

}  // namespace

TEST(Manifest, SplitCountsOfSixLineFixture) {
    auto dir = fixture::temp_dir("manifest");
    auto p = write(dir, "m.jsonl",
                   R"({"image_id":"a","split":"train","captions":["c0","c1"]}
{"image_id":"b","split":"train","captions":["c"]}
{"image_id":"c","split":"train","captions":["c"],"file":"c.jpg"}
{"image_id":"d","split":"train","captions":["c"]}
{"image_id":"e","split":"val","captions":["c"]}
{"image_id":"f","split":"test","captions":["c"]}
)");
    const auto corpus = load_manifest(p);
    EXPECT_EQ(corpus.split_counts(), (SplitCounts{4, 1, 1}));
    EXPECT_EQ(corpus.at("c").file, std::optional<std::string>("c.jpg"));
    EXPECT_EQ(corpus.at("a").captions, (std::vector<std::string>{"c0", "c1"}));
}

TEST(Manifest, DuplicateIdNamesIdAndLine) {
    auto dir = fixture::temp_dir("manifest");
    std::string text;
    for (const char* id : {"x0", "x1", "x2", "x3", "x1"})
        text += std::string(R"({"image_id":")") + id + R"(","split":"train","captions":["c"]})" + "\n";
    auto p = write(dir, "m.jsonl", text);
    EXPECT_EQ(error_of([&] { load_manifest(p); }), "duplicate image_id x1 at line 5");
}

TEST(Manifest, MalformedLineReportsLineNumber) {
    auto dir = fixture::temp_dir("manifest");
    auto p = write(dir, "m.jsonl",
                   "{\"image_id\":\"a\",\"split\":\"train\",\"captions\":[\"c\"]}\n{\"image_id\":\"b\",\"split\":\"nope\"\n");
    const auto msg = error_of([&] { load_manifest(p); });
    EXPECT_NE(msg.find(":2: malformed line"), std::string::npos) << msg;

    auto q = write(dir, "bad_split.jsonl", "{\"image_id\":\"a\",\"split\":\"dev\",\"captions\":[\"c\"]}\n");
    EXPECT_NE(error_of([&] { load_manifest(q); }).find(":1:"), std::string::npos);
    auto r = write(dir, "no_caps.jsonl", "{\"image_id\":\"a\",\"split\":\"train\",\"captions\":[]}\n");
    EXPECT_NE(error_of([&] { load_manifest(r); }).find("no captions"), std::string::npos);
}

TEST(Manifest, RoundTripProperty) {
    Rng rng(11);
    auto dir = fixture::temp_dir("roundtrip");
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<ImageRecord> recs;
        const auto n = 1 + rng.below(30);
        for (std::size_t i = 0; i < n; ++i) {
            ImageRecord r;
            r.image_id = "id" + std::to_string(trial) + "_" + std::to_string(i);
            r.split = static_cast<Split>(rng.below(3));
            for (std::size_t k = 0, m = 1 + rng.below(6); k < m; ++k)
                r.captions.push_back("cap \"" + std::to_string(rng.below(1000)) + "\" \\ ünï");
            if (rng.below(2)) r.file = "images/" + r.image_id + ".jpg";
            recs.push_back(std::move(r));
        }
        const CorpusIndex corpus(recs);
        const auto p = dir / "rt.jsonl";
        write_manifest(corpus, p);
        EXPECT_EQ(load_manifest(p), corpus);
    }
}

TEST(CandidatePool, ExcludesAndKeepsManifestOrder) {
    CorpusIndex corpus({{"a", Split::Train, {"x"}, {}}, {"v", Split::Val, {"x"}, {}}, {"b", Split::Train, {"x"}, {}},
                        {"c", Split::Train, {"x"}, {}}});
    EXPECT_EQ(candidate_pool(corpus, Split::Train, "b"), (std::vector<std::string>{"a", "c"}));
    EXPECT_EQ(candidate_pool(corpus, Split::Train, "zzz"), (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_TRUE(candidate_pool(corpus, Split::Test, "a").empty());
}

TEST(CandidatePool, PropertyNeverContainsExcludedAndIsSublist) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ImageRecord> recs;
        const auto n = 1 + rng.below(40);
        for (std::size_t i = 0; i < n; ++i)
            recs.push_back({"i" + std::to_string(i), static_cast<Split>(rng.below(3)), {"c"}, {}});
        const CorpusIndex corpus(recs);
        const std::string exclude = "i" + std::to_string(rng.below(n + 3));
        const auto split = static_cast<Split>(rng.below(3));
        const auto pool = candidate_pool(corpus, split, exclude);
        EXPECT_EQ(std::find(pool.begin(), pool.end(), exclude), pool.end());
        std::size_t j = 0;
        for (const auto& r : corpus.records())
            if (r.split == split && r.image_id != exclude) {
                ASSERT_LT(j, pool.size());
                EXPECT_EQ(pool[j++], r.image_id);
            }
        EXPECT_EQ(j, pool.size());
    }
}

TEST(Embeddings, LoadsShapeWithoutNormalizing) {
    auto dir = fixture::temp_dir("emb");
    const std::vector<float> payload{1, 2, 3, 4, 0, 0, 0, 5, -1, 0.5f, 0.25f, 8};
    write_raw_embeddings(dir / "e.bin", "ICEB", 3, 4, payload);
    write(dir, "e.ids.json", R"(["a","b","c"])");
    const auto store = load_embeddings(dir / "e.bin", sidecar_path_for(dir / "e.bin"));
    EXPECT_EQ(store.size(), 3u);
    EXPECT_EQ(store.dim(), 4u);
    EXPECT_EQ(store.row(1)[3], 5.0f);
    EXPECT_EQ(store.vector_of("c")[3], 8.0f);
    EXPECT_EQ(*store.row_of("b"), 1u);
}

TEST(Embeddings, RejectsBrokenFiles) {
    auto dir = fixture::temp_dir("emb");
    const std::vector<float> payload(12, 1.0f);
    write_raw_embeddings(dir / "e.bin", "ICEB", 3, 4, payload);
    write(dir, "two.json", R"(["a","b"])");
    EXPECT_NE(error_of([&] { load_embeddings(dir / "e.bin", dir / "two.json"); }).find("id count mismatch"),
              std::string::npos);

    write_raw_embeddings(dir / "magic.bin", "XXXX", 3, 4, payload);
    write(dir, "three.json", R"(["a","b","c"])");
    EXPECT_NE(error_of([&] { load_embeddings(dir / "magic.bin", dir / "three.json"); }).find("bad magic"),
              std::string::npos);

    auto nan_payload = payload;
    nan_payload[5] = std::numeric_limits<float>::quiet_NaN();
    write_raw_embeddings(dir / "nan.bin", "ICEB", 3, 4, nan_payload);
    EXPECT_NE(error_of([&] { load_embeddings(dir / "nan.bin", dir / "three.json"); }).find("non-finite"),
              std::string::npos);

    write_raw_embeddings(dir / "short.bin", "ICEB", 3, 4, std::vector<float>(11, 1.0f));
    EXPECT_NE(error_of([&] { load_embeddings(dir / "short.bin", dir / "three.json"); }).find("shorter"),
              std::string::npos);

    write(dir, "dup.json", R"(["a","a","c"])");
    EXPECT_NE(error_of([&] { load_embeddings(dir / "e.bin", dir / "dup.json"); }).find("duplicate"), std::string::npos);
}

TEST(Embeddings, WriteLoadRoundTrip) {
    auto dir = fixture::temp_dir("emb");
    Rng rng(3);
    std::vector<std::string> ids;
    std::vector<float> m;
    for (int i = 0; i < 20; ++i) {
        ids.push_back("r" + std::to_string(i));
        auto v = fixture::random_vector(rng, 7);
        m.insert(m.end(), v.begin(), v.end());
    }
    const EmbeddingStore store(ids, 7, m);
    write_embeddings(store, dir / "x.bin", sidecar_path_for(dir / "x.bin"));
    const auto back = load_embeddings(dir / "x.bin", dir / "x.ids.json");
    ASSERT_EQ(back.size(), 20u);
    EXPECT_TRUE(std::equal(store.data().begin(), store.data().end(), back.data().begin()));
}

#ifdef ICTX_ORACLE_DIR
TEST(Embeddings, LargeFileMatchesByteLevelOracle) {
    const std::filesystem::path dir = ICTX_ORACLE_DIR;
    const auto store = load_embeddings(dir / "big.bin", dir / "big.ids.json");
    std::ifstream in(dir / "big.expect.json");
    const auto expect = nlohmann::json::parse(in);
    ASSERT_EQ(store.size(), expect["count"].get<std::size_t>());
    ASSERT_EQ(store.dim(), expect["dim"].get<std::size_t>());
    EXPECT_EQ(store.id(0), expect["ids"][0]);
    EXPECT_EQ(store.id(store.size() - 1), expect["ids"][1]);
    for (const auto& [row, hexes] : expect["rows"].items()) {
        const auto r = std::stoul(row);
        const auto v = store.row(r);
        for (std::size_t k = 0; k < v.size(); ++k) {
            unsigned char bytes[4];
            std::memcpy(bytes, &v[k], 4);
            char hex[9];
            std::snprintf(hex, sizeof hex, "%02x%02x%02x%02x", bytes[0], bytes[1], bytes[2], bytes[3]);
            ASSERT_EQ(std::string(hex), hexes[k].get<std::string>()) << "row " << r << " col " << k;
        }
    }
}
#endif

TEST(CaptionIds, ParseAndFormat) {
    const auto ref = parse_caption_id("COCO#val#12#3");
    EXPECT_EQ(ref.image_id, "COCO#val#12");
    EXPECT_EQ(ref.index, 3u);
    EXPECT_EQ(make_caption_id("a", 2), "a#2");
    EXPECT_THROW(parse_caption_id("nohash"), ValidationError);
    EXPECT_THROW(parse_caption_id("a#x"), ValidationError);
}

TEST(Tags, LowercaseDedupAndMissingKeys) {
    auto dir = fixture::temp_dir("tags");
    auto p = write(dir, "t.jsonl",
                   R"({"image_id":"a","objects":["Dog","dog"],"classes":["Animal"],"attributes":["brown",""],"relations":["near"]}
{"image_id":"b","objects":["cat"]}
)");
    const auto tags = load_tags(p);
    EXPECT_EQ(tags.at("a").objects, (std::vector<std::string>{"dog"}));
    EXPECT_EQ(tags.at("a").attributes, (std::vector<std::string>{"brown"}));
    EXPECT_TRUE(tags.at("b").relations.empty());
    EXPECT_EQ(tags.at("a").pooled(), (std::vector<std::string>{"animal", "brown", "dog", "near"}));
}

TEST(Tags, DuplicateLineIsError) {
    auto dir = fixture::temp_dir("tags");
    auto p = write(dir, "t.jsonl", "{\"image_id\":\"a\"}\n{\"image_id\":\"a\"}\n");
    EXPECT_THROW(load_tags(p), ValidationError);
}

TEST(Tags, HundredRecordFixtureEveryIdPresent) {
    auto dir = fixture::temp_dir("tags");
    Rng rng(9);
    std::string text;
    for (int i = 0; i < 100; ++i)
        text += "{\"image_id\":\"t" + std::to_string(i) + "\",\"objects\":[\"o" + std::to_string(rng.below(9)) + "\"]}\n";
    auto p = write(dir, "t.jsonl", text);
    // independent count: one record per non-empty line
    std::ifstream in(p);
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) lines += !l.empty();
    const auto tags = load_tags(p);
    EXPECT_EQ(tags.size(), lines);
    for (int i = 0; i < 100; ++i) EXPECT_NE(tags.find("t" + std::to_string(i)), nullptr);

    write_tags(tags, dir / "back.jsonl");
    const auto back = load_tags(dir / "back.jsonl");
    ASSERT_EQ(back.size(), tags.size());
    for (std::size_t i = 0; i < tags.size(); ++i) EXPECT_EQ(back.sets()[i], tags.sets()[i]);
}

TEST(Tags, InternedIntersectionsMatchStrings) {
    const auto fx = fixture::make_cluster_fixture({});
    const auto& tags = *fx.res.tags;
    for (std::size_t r = 0; r < tags.size(); ++r) {
        EXPECT_EQ(tags.interned_pooled(r).size(), tags.sets()[r].pooled().size());
        EXPECT_EQ(tags.intern(tags.sets()[r].pooled()), tags.interned_pooled(r));
    }
    const std::vector<std::string> unknown{"never-seen"};
    EXPECT_EQ(tags.intern(unknown).size(), 1u);
}

TEST(CaptionStore, OneEntryPerImageAndNonEmpty) {
    CaptionStore s("tf@66");
    s.add("a", "a man riding a");
    EXPECT_THROW(s.add("a", "again"), ValidationError);
    EXPECT_THROW(s.add("b", ""), ValidationError);
    EXPECT_EQ(*s.find("a"), "a man riding a");
    EXPECT_EQ(s.find("zz"), nullptr);

    auto dir = fixture::temp_dir("store");
    write_caption_store(s, dir / "c.jsonl");
    EXPECT_EQ(load_caption_store(dir / "c.jsonl"), s);
    auto p = write(dir, "mixed.jsonl",
                   "{\"image_id\":\"a\",\"source\":\"x\",\"caption\":\"c\"}\n{\"image_id\":\"b\",\"source\":\"y\",\"caption\":\"c\"}\n");
    EXPECT_THROW(load_caption_store(p), ValidationError);
}

TEST(Validate, CaptionEmbeddingIdsResolve) {
    auto fx = fixture::make_cluster_fixture({});
    EXPECT_TRUE(validate_resources(fx.res).ok());

    std::vector<std::string> ids{"img000#0", "img000#7"};
    fx.res.caption_embeddings["gtc"] = EmbeddingStore(ids, 2, {1, 0, 0, 1}, EmbeddingKind::Caption);
    const auto rep = validate_resources(fx.res);
    ASSERT_FALSE(rep.ok());
    EXPECT_NE(rep.problems.front().find("img000#7"), std::string::npos);
}

TEST(Validate, ClusterFixtureCaptionIdsAlwaysInRange) {
    const auto fx = fixture::make_cluster_fixture({.clusters = 4, .seed = 77});
    for (const auto& cid : fx.res.caption_embeddings.at("gtc").ids()) {
        const auto ref = parse_caption_id(cid);
        EXPECT_LT(ref.index, fx.res.corpus.at(ref.image_id).captions.size());
    }
}

TEST(Resources, RequireNamesMissingDependency) {
    Resources res;
    EXPECT_NE(error_of([&] { res.require_tags(); }).find("--tags"), std::string::npos);
    EXPECT_NE(error_of([&] { res.require_image_embeddings(); }).find("--embeddings"), std::string::npos);
    EXPECT_NE(error_of([&] { res.require_caption_store("vlm0"); }).find("vlm0"), std::string::npos);
}

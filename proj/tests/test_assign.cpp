#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "fixture.hpp"
#include "ictx/assign.hpp"
#include "ictx/error.hpp"

using namespace ictx;
using nlohmann::json;

namespace {

json load_fixture(const std::string& name) {
    std::ifstream in(std::filesystem::path(ICTX_FIXTURES_DIR) / name);
    return json::parse(in);
}

struct MgcaCase {
    CorpusIndex corpus;
    CaptionStore anchors{"tf@66"};
    DocFreqTable df;
    std::vector<std::string> ids;
    std::vector<std::size_t> selected;
    std::vector<std::vector<double>> scores;
};

MgcaCase mgca_case() {
    const auto j = load_fixture("mgca_oracle.json");
    MgcaCase c;
    std::map<std::string, std::vector<std::string>, std::less<>> docs;
    for (const auto& d : j["df_docs"]) docs[d["image_id"]] = d["captions"].get<std::vector<std::string>>();
    c.df = build_df(docs);
    std::vector<ImageRecord> recs;
    for (const auto& im : j["images"]) {
        const std::string id = im["image_id"];
        recs.push_back({id, Split::Train, im["captions"].get<std::vector<std::string>>(), {}});
        c.anchors.add(id, im["anchor"]);
        c.ids.push_back(id);
        c.selected.push_back(im["selected"]);
        c.scores.push_back(im["scores"].get<std::vector<double>>());
    }
    c.corpus = CorpusIndex(recs);
    return c;
}

ShotSet scored(std::vector<std::string> ids, std::vector<std::optional<double>> scores) {
    ShotSet s;
    s.image_ids = std::move(ids);
    s.scores = std::move(scores);
    return s;
}

}  // namespace

TEST(AssignGtc, FirstCaptionInInputOrder) {
    const CorpusIndex corpus({{"a", Split::Train, {"c0", "c1"}, {}}, {"b", Split::Train, {"d0"}, {}}});
    const std::vector<std::string> a{"a"};
    EXPECT_EQ(assign_gtc(a, corpus), (std::vector<std::string>{"c0"}));
    EXPECT_TRUE(assign_gtc({}, corpus).empty());
    const std::vector<std::string> ba{"b", "a"};
    EXPECT_EQ(assign_gtc(ba, corpus), (std::vector<std::string>{"d0", "c0"}));
    const std::vector<std::string> missing{"zz"};
    EXPECT_THROW(assign_gtc(missing, corpus), ValidationError);
}

TEST(AssignGtc, ThirtyTwoIdsOfFixture) {
    const auto fx = fixture::make_cluster_fixture({});
    auto ids = fx.res.corpus.split_ids(Split::Train);
    ids.resize(32);
    const auto caps = assign_gtc(ids, fx.res.corpus);
    ASSERT_EQ(caps.size(), 32u);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(caps[i], fx.res.corpus.at(ids[i]).captions[0]);
}

TEST(AssignMgc, LooksUpStoreAndListsMissing) {
    CaptionStore store("tf@66");
    store.add("a", "a man riding a");
    store.add("b", "a dog");
    const std::vector<std::string> a{"a"};
    EXPECT_EQ(assign_mgc(a, store), (std::vector<std::string>{"a man riding a"}));
    const std::vector<std::string> bad{"a", "x", "b", "y"};
    try {
        assign_mgc(bad, store);
        FAIL();
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("x"), std::string::npos);
        EXPECT_NE(msg.find("y"), std::string::npos);
        EXPECT_NE(msg.find("tf@66"), std::string::npos);
    }
}

TEST(AssignMgc, ThirtyTwoIdsAgainstVlmStoreKeepOrder) {
    const auto fx = fixture::make_cluster_fixture({});
    auto ids = fx.res.corpus.split_ids(Split::Train);
    ids.resize(32);
    std::reverse(ids.begin(), ids.end());
    const auto& store = fx.res.caption_stores.at("vlm0");
    const auto caps = assign_mgc(ids, store);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(caps[i], *store.find(ids[i]));
}

TEST(AssignMgca, SelectionsEqualBruteForceArgmax) {
    const auto c = mgca_case();
    ASSERT_EQ(c.ids.size(), 20u);
    const auto caps = assign_mgca(c.ids, c.corpus, c.anchors, c.df);
    for (std::size_t i = 0; i < c.ids.size(); ++i) {
        const auto& gtcs = c.corpus.at(c.ids[i]).captions;
        std::size_t best = 0;
        for (std::size_t j = 1; j < gtcs.size(); ++j)
            if (c.scores[i][j] > c.scores[i][best]) best = j;
        EXPECT_EQ(best, c.selected[i]);
        EXPECT_EQ(caps[i], gtcs[c.selected[i]]) << c.ids[i];
        for (std::size_t j = 0; j < gtcs.size(); ++j) {
            const std::vector<std::string> one{gtcs[j]};
            EXPECT_NEAR(cider_d(*c.anchors.find(c.ids[i]), one, c.df).value, c.scores[i][j], 1e-4);
        }
    }
}

TEST(AssignMgca, AnchorEqualToGtcSelectsIt) {
    const auto c = mgca_case();
    for (const auto& id : c.ids) {
        const auto& gtcs = c.corpus.at(id).captions;
        for (std::size_t j = 0; j < gtcs.size(); ++j) EXPECT_EQ(mgca_select_index(gtcs[j], gtcs, c.df), j);
    }
}

TEST(AssignMgca, NoOverlapSelectsIndexZero) {
    const auto c = mgca_case();
    for (const auto& id : c.ids) EXPECT_EQ(mgca_select_index("zxq vrrm plonk", c.corpus.at(id).captions, c.df), 0u);
}

TEST(AssignCaptions, DispatchOnSource) {
    const auto fx = fixture::make_cluster_fixture({});
    const auto df = build_df(fx.res.corpus, Split::Train);
    ShotSet s = scored({"img001", "img002"}, {0.3, 0.4});
    EXPECT_EQ(assign_captions(parse_caption_source("gtc"), s, fx.res, df),
              (std::vector<std::string>{fx.res.corpus.at("img001").captions[0], fx.res.corpus.at("img002").captions[0]}));
    EXPECT_EQ(assign_captions(parse_caption_source("mgc:vlm0"), s, fx.res, df)[1],
              *fx.res.caption_stores.at("vlm0").find("img002"));
    // tf@66 drops the canonical caption's last word, so its nearest GTC is caption 0
    EXPECT_EQ(assign_captions(parse_caption_source("mgca:tf@66"), s, fx.res, df)[0],
              fx.res.corpus.at("img001").captions[0]);
    EXPECT_THROW(assign_captions(parse_caption_source("sicr-matched"), s, fx.res, df), ValidationError);
    s.matched_captions = {"m1", "m2"};
    EXPECT_EQ(assign_captions(parse_caption_source("sicr-matched"), s, fx.res, df),
              (std::vector<std::string>{"m1", "m2"}));
    EXPECT_THROW(assign_captions(parse_caption_source("mgc:nope"), s, fx.res, df), ValidationError);
}

TEST(CaptionSourceLabel, ParseAndFormat) {
    for (const char* label : {"gtc", "mgc:tf@66", "mgca:vlm0", "sicr-matched"})
        EXPECT_EQ(to_string(parse_caption_source(label)), label);
    EXPECT_THROW(parse_caption_source("mgc:"), ValidationError);
    EXPECT_THROW(parse_caption_source("human"), ValidationError);
}

TEST(OrderPolicyLabel, ParseAndFormat) {
    for (const char* label : {"as-retrieved", "asc-similarity", "desc-similarity", "random:7"})
        EXPECT_EQ(to_string(parse_order_policy(label)), label);
    EXPECT_FALSE(parse_order_policy("random").seed);
    EXPECT_THROW(parse_order_policy("random:x"), ValidationError);
    EXPECT_THROW(parse_order_policy("sorted"), ValidationError);
    EXPECT_EQ(OrderPolicy{}.kind, OrderPolicy::Kind::AscSimilarity);
}

TEST(BuildSequence, AsRetrievedKeepsRsOrder) {
    const auto s = scored({"c", "a", "b"}, {std::nullopt, std::nullopt, std::nullopt});
    const std::vector<std::string> caps{"cc", "aa", "bb"};
    const auto seq = build_sequence(s, caps, "t", parse_order_policy("as-retrieved"));
    EXPECT_EQ(seq.shots, (std::vector<Shot>{{"c", "cc"}, {"a", "aa"}, {"b", "bb"}}));
    EXPECT_EQ(seq.test_image_id, "t");
}

TEST(BuildSequence, AscendingSimilarityPutsNearestLast) {
    const std::vector<std::optional<double>> scores{0.9, 0.2, 0.5};
    EXPECT_EQ(order_indices(scores, parse_order_policy("asc-similarity")), (std::vector<std::size_t>{1, 2, 0}));
    EXPECT_EQ(order_indices(scores, parse_order_policy("desc-similarity")), (std::vector<std::size_t>{0, 2, 1}));
    const auto seq = build_sequence(scored({"x", "y", "z"}, scores), std::vector<std::string>{"cx", "cy", "cz"}, "t", {});
    EXPECT_EQ(seq.shots.back(), (Shot{"x", "cx"}));
}

TEST(BuildSequence, RandomSeededIsDeterministic) {
    const std::vector<std::optional<double>> scores(10, std::nullopt);
    const auto a = order_indices(scores, parse_order_policy("random:7"));
    EXPECT_EQ(a, order_indices(scores, parse_order_policy("random:7")));
    EXPECT_THROW(order_indices(scores, parse_order_policy("random")), ValidationError);
}

TEST(BuildSequence, Errors) {
    const auto rs = scored({"a", "b"}, {std::nullopt, std::nullopt});
    const std::vector<std::string> caps{"ca", "cb"};
    EXPECT_THROW(build_sequence(rs, caps, "t", parse_order_policy("asc-similarity")), ValidationError);
    EXPECT_THROW(build_sequence(rs, std::vector<std::string>{"ca"}, "t", parse_order_policy("as-retrieved")),
                 ValidationError);
    EXPECT_THROW(build_sequence(rs, caps, "a", parse_order_policy("as-retrieved")), ValidationError);
    EXPECT_THROW(build_sequence(rs, std::vector<std::string>{"ca", ""}, "t", parse_order_policy("as-retrieved")),
                 ValidationError);
}

TEST(BuildSequence, PropertyEveryPolicyIsPermutation) {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const auto n = 1 + rng.below(32);
        ShotSet s;
        std::vector<std::string> caps;
        for (std::size_t i = 0; i < n; ++i) {
            s.image_ids.push_back("i" + std::to_string(i));
            // coarse scores so ties occur
            s.scores.emplace_back(double(rng.below(5)) / 4.0);
            caps.push_back("caption " + std::to_string(rng.below(3)));
        }
        std::vector<Shot> want;
        for (std::size_t i = 0; i < n; ++i) want.push_back({s.image_ids[i], caps[i]});
        std::ranges::sort(want, {}, &Shot::image_id);
        for (const char* p : {"as-retrieved", "asc-similarity", "desc-similarity", "random:99"}) {
            auto got = build_sequence(s, caps, "test", parse_order_policy(p)).shots;
            ASSERT_EQ(got.size(), n);
            std::ranges::sort(got, {}, &Shot::image_id);
            EXPECT_EQ(got, want) << p;
        }
        const auto asc = order_indices(s.scores, parse_order_policy("asc-similarity"));
        for (std::size_t i = 1; i < n; ++i) {
            EXPECT_LE(*s.scores[asc[i - 1]], *s.scores[asc[i]]);
            if (*s.scores[asc[i - 1]] == *s.scores[asc[i]]) EXPECT_LT(asc[i - 1], asc[i]);
        }
    }
}

TEST(SequenceJson, Shape) {
    InContextSequence seq{{{"a", "a cat"}}, "t", parse_order_policy("desc-similarity")};
    EXPECT_EQ(sequence_json(seq).dump(),
              R"({"test_id":"t","shots":[{"image_id":"a","caption":"a cat"}],"order_policy":"desc-similarity"})");
}

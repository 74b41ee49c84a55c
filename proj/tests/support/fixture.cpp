#include "fixture.hpp"

#include <atomic>
#include <cmath>
#include <numbers>

#include <fmt/format.h>
#include <unistd.h>

namespace ictx::fixture {

double gaussian(Rng& rng) {
    const double u1 = (static_cast<double>(rng.next() >> 11) + 0.5) / 9007199254740992.0;
    const double u2 = static_cast<double>(rng.next() >> 11) / 9007199254740992.0;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<float> random_vector(Rng& rng, std::size_t dim) {
    std::vector<float> v(dim);
    for (auto& x : v) x = static_cast<float>(gaussian(rng));
    return v;
}

std::size_t Fixture::cluster(std::string_view image_id) const {
    const auto recs = res.corpus.records();
    for (std::size_t i = 0; i < recs.size(); ++i)
        if (recs[i].image_id == image_id) return cluster_of[i];
    throw std::out_of_range("unknown image " + std::string(image_id));
}

namespace {

std::string word(std::size_t cluster, std::size_t k) { return fmt::format("k{}w{}", cluster, k); }

/// Caption 0 is the cluster's canonical sentence; caption j > 0 swaps word j
/// for a cluster synonym, so caption 0 sits at the centre of the five.
std::vector<std::string> cluster_captions(std::size_t c) {
    std::vector<std::string> base;
    for (std::size_t k = 0; k < 6; ++k) base.push_back(word(c, k));
    auto join = [](const std::vector<std::string>& w) {
        std::string s;
        for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
        return s;
    };
    std::vector<std::string> out{join(base)};
    for (std::size_t j = 1; j < 5; ++j) {
        auto v = base;
        v[j] = word(c, 5 + j);
        out.push_back(join(v));
    }
    return out;
}

}  // namespace

Fixture make_cluster_fixture(const ClusterSpec& spec) {
    Rng rng(spec.seed);
    const std::size_t total_clusters = spec.clusters + spec.test_only_clusters;
    std::vector<std::vector<float>> centres;
    for (std::size_t c = 0; c < total_clusters; ++c) centres.push_back(random_vector(rng, spec.dim));

    struct Planned {
        std::size_t cluster;
        Split split;
    };
    std::vector<Planned> plan;
    for (std::size_t c = 0; c < spec.clusters; ++c)
        for (std::size_t i = 0; i < spec.train_per_cluster; ++i) plan.push_back({c, Split::Train});
    for (std::size_t c = 0; c < spec.clusters; ++c)
        for (std::size_t i = 0; i < spec.test_per_cluster; ++i) plan.push_back({c, Split::Test});
    for (std::size_t c = spec.clusters; c < total_clusters; ++c) plan.push_back({c, Split::Test});

    Fixture fx;
    std::vector<ImageRecord> records;
    std::vector<std::string> ids;
    std::vector<float> matrix;
    std::vector<std::string> cap_ids;
    std::vector<float> cap_matrix;
    std::vector<TagSet> tags;
    CaptionStore tf("tf@66");
    CaptionStore vlm("vlm0");

    for (std::size_t i = 0; i < plan.size(); ++i) {
        const auto [c, split] = plan[i];
        const std::string id = fmt::format("img{:03}", i);
        auto captions = cluster_captions(c);
        records.push_back({id, split, captions, std::nullopt});
        fx.cluster_of.push_back(c);

        std::vector<float> v(spec.dim);
        for (std::size_t d = 0; d < spec.dim; ++d)
            v[d] = centres[c][d] + static_cast<float>(spec.noise * gaussian(rng));
        ids.push_back(id);
        matrix.insert(matrix.end(), v.begin(), v.end());
        for (std::size_t k = 0; k < captions.size(); ++k) {
            cap_ids.push_back(make_caption_id(id, k));
            for (std::size_t d = 0; d < spec.dim; ++d)
                cap_matrix.push_back(v[d] + static_cast<float>(spec.noise * gaussian(rng)));
        }

        TagSet t;
        t.image_id = id;
        t.objects = {fmt::format("obj{}a", c), fmt::format("obj{}b", c)};
        if (rng.below(2)) t.objects.push_back(fmt::format("obj{}", rng.below(total_clusters)));
        t.classes = {fmt::format("class{}", c % 3)};
        t.attributes = {fmt::format("attr{}", rng.below(6))};
        if (rng.below(2)) t.attributes.push_back(fmt::format("attr{}c{}", rng.below(3), c));
        if (spec.empty_relations_every == 0 || (i + 1) % spec.empty_relations_every != 0)
            t.relations = {fmt::format("rel{}", rng.below(4)), fmt::format("rel{}c{}", rng.below(2), c)};
        t.normalize();
        tags.push_back(std::move(t));

        const auto& canon = captions.front();
        tf.add(id, canon.substr(0, canon.rfind(' ')));
        vlm.add(id, captions[1]);
    }

    fx.res.corpus = CorpusIndex(std::move(records));
    fx.res.image_embeddings = EmbeddingStore(ids, spec.dim, std::move(matrix));
    fx.res.caption_embeddings.emplace("gtc", EmbeddingStore(cap_ids, spec.dim, std::move(cap_matrix), EmbeddingKind::Caption));
    fx.res.tags = TagIndex(std::move(tags));
    fx.res.caption_stores.emplace("tf@66", std::move(tf));
    fx.res.caption_stores.emplace("vlm0", std::move(vlm));
    return fx;
}

WrittenFixture write_fixture(const Fixture& fx, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    WrittenFixture w;
    w.dir = dir;
    w.manifest = dir / "manifest.jsonl";
    w.embeddings = dir / "embeddings.bin";
    w.tags = dir / "tags.jsonl";
    w.caption_embeddings = dir / "caption_emb.gtc.bin";
    w.captions_tf = dir / "captions.tf@66.jsonl";
    w.captions_vlm = dir / "captions.vlm0.jsonl";
    write_manifest(fx.res.corpus, w.manifest);
    write_embeddings(*fx.res.image_embeddings, w.embeddings, sidecar_path_for(w.embeddings));
    write_tags(*fx.res.tags, w.tags);
    const auto& ce = fx.res.caption_embeddings.at("gtc");
    write_embeddings(ce, w.caption_embeddings, sidecar_path_for(w.caption_embeddings));
    write_caption_store(fx.res.caption_stores.at("tf@66"), w.captions_tf);
    write_caption_store(fx.res.caption_stores.at("vlm0"), w.captions_vlm);
    return w;
}

std::filesystem::path temp_dir(const std::string& name) {
    static std::atomic<int> counter{0};
    auto dir = std::filesystem::temp_directory_path() /
               fmt::format("ictx-{}-{}-{}", name, static_cast<long>(::getpid()), counter++);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace ictx::fixture

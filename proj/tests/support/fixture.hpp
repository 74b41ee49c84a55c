#pragma once

// Synthetic corpora for tests. Images come in clusters: members share a
// cluster-specific vocabulary, a canonical first caption, tags drawn from the
// cluster's tag pool and embeddings scattered around a cluster centre.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ictx/corpus.hpp"
#include "ictx/rng.hpp"

namespace ictx::fixture {

struct ClusterSpec {
    std::size_t clusters = 5;
    std::size_t train_per_cluster = 8;
    std::size_t test_per_cluster = 2;
    /// Extra clusters with a single test image each and no database members.
    std::size_t test_only_clusters = 0;
    std::size_t dim = 16;
    double noise = 0.2;
    std::uint64_t seed = 1;
    /// Every k-th image gets an empty relation set (0: never).
    std::size_t empty_relations_every = 0;
};

struct Fixture {
    Resources res;
    std::vector<std::size_t> cluster_of;  ///< parallel to manifest order

    std::size_t cluster(std::string_view image_id) const;
};

/// Stores: image embeddings, tags, caption embeddings for "gtc", caption
/// stores "tf@66" (canonical caption minus its last word) and "vlm0"
/// (the image's second caption).
Fixture make_cluster_fixture(const ClusterSpec& spec);

struct WrittenFixture {
    std::filesystem::path dir, manifest, embeddings, tags, caption_embeddings;
    std::filesystem::path captions_tf, captions_vlm;
};

WrittenFixture write_fixture(const Fixture& fx, const std::filesystem::path& dir);

/// Box-Muller over Rng, so vectors are identical on every platform.
double gaussian(Rng& rng);
std::vector<float> random_vector(Rng& rng, std::size_t dim);

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& name);

}  // namespace ictx::fixture

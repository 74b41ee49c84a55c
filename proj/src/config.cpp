#include "ictx/config.hpp"

#include <cstdlib>
#include <set>

#include <spdlog/spdlog.h>
#include <toml.hpp>

#include "ictx/error.hpp"

namespace ictx {

namespace {

struct FileReader {
    const std::filesystem::path& file;

    [[noreturn]] void fail(std::string_view key, std::string_view what) const {
        throw ValidationError(file.string() + ": key '" + std::string(key) + "' " + std::string(what));
    }

    std::string str(const toml::node& n, std::string_view key) const {
        auto v = n.value<std::string>();
        if (!v) fail(key, "must be a string");
        return *v;
    }

    std::int64_t integer(const toml::node& n, std::string_view key) const {
        auto v = n.value<std::int64_t>();
        if (!v) fail(key, "must be an integer");
        return *v;
    }

    std::size_t count(const toml::node& n, std::string_view key) const {
        auto v = integer(n, key);
        if (v < 0) fail(key, "must be non-negative");
        return static_cast<std::size_t>(v);
    }

    std::vector<std::string> strings(const toml::node& n, std::string_view key) const {
        const auto* arr = n.as_array();
        if (!arr) fail(key, "must be an array of strings");
        std::vector<std::string> out;
        for (const auto& e : *arr) out.push_back(str(e, key));
        return out;
    }

    std::vector<std::size_t> counts(const toml::node& n, std::string_view key) const {
        const auto* arr = n.as_array();
        if (!arr) fail(key, "must be an array of integers");
        std::vector<std::size_t> out;
        for (const auto& e : *arr) out.push_back(count(e, key));
        return out;
    }

    std::filesystem::path path(const toml::node& n, std::string_view key) const {
        std::filesystem::path p = str(n, key);
        return p.is_absolute() ? p : file.parent_path() / p;
    }

    std::map<std::string, std::filesystem::path, std::less<>> path_table(const toml::node& n, std::string_view key) const {
        const auto* tbl = n.as_table();
        if (!tbl) fail(key, "must be a table of source = path");
        std::map<std::string, std::filesystem::path, std::less<>> out;
        for (const auto& [k, v] : *tbl) out[std::string(k.str())] = path(v, key);
        return out;
    }
};

}  // namespace

void apply_config_file(Settings& s, const std::filesystem::path& file) {
    toml::table root;
    try {
        root = toml::parse_file(file.string());
    } catch (const toml::parse_error& e) {
        const auto& src = e.source();
        throw ValidationError(file.string() + ":" + std::to_string(src.begin.line) + ": " + std::string(e.description()));
    }
    const FileReader r{file};
    auto& exp = s.experiment;
    for (const auto& [k, node] : root) {
        const std::string key(k.str());
        if (key == "corpus") s.corpus = r.path(node, key);
        else if (key == "embeddings") s.embeddings = r.path(node, key);
        else if (key == "tags") s.tags = r.path(node, key);
        else if (key == "captions") s.captions = r.path_table(node, key);
        else if (key == "caption_embeddings") s.caption_embeddings = r.path_table(node, key);
        else if (key == "strategies") {
            exp.strategies.clear();
            for (const auto& name : r.strings(node, key)) exp.strategies.push_back(parse_strategy(name));
        } else if (key == "caption_sources") exp.caption_sources = r.strings(node, key);
        else if (key == "shots") exp.shot_counts = r.counts(node, key);
        else if (key == "split") exp.test_split = parse_split(r.str(node, key));
        else if (key == "database_split") exp.database_split = parse_split(r.str(node, key));
        else if (key == "endpoint") s.endpoint = r.str(node, key);
        else if (key == "stub") s.stub = parse_stub_mode(r.str(node, key));
        else if (key == "seed") exp.seed = static_cast<std::uint64_t>(r.count(node, key));
        else if (key == "order_policy") exp.order_policy = parse_order_policy(r.str(node, key));
        else if (key == "cache_dir") exp.cache_dir = r.path(node, key);
        else if (key == "out") s.out = r.path(node, key);
        else if (key == "sicr_source") exp.sicr_source = r.str(node, key);
        else if (key == "tag_scoring") {
            const auto v = r.str(node, key);
            if (v == "intersection") exp.tag_scoring = TagScoring::Intersection;
            else if (v == "jaccard") exp.tag_scoring = TagScoring::Jaccard;
            else r.fail(key, "must be intersection|jaccard");
        } else if (key == "n_tests") exp.n_tests = r.count(node, key);
        else if (key == "workers") exp.workers = static_cast<unsigned>(r.count(node, key));
        else if (key == "max_in_flight") exp.batch.max_in_flight = static_cast<unsigned>(r.count(node, key));
        else if (key == "iterations") s.iterations = r.count(node, key);
        else if (key == "bootstrap_shots") s.bootstrap_shots = r.count(node, key);
        else if (key == "refresh_shots") s.refresh_shots = r.count(node, key);
        else if (key == "probe_tests") s.probe_tests = r.count(node, key);
        else if (key == "decoding") {
            const auto* tbl = node.as_table();
            if (!tbl) r.fail(key, "must be a table");
            for (const auto& [dk, dv] : *tbl) {
                const std::string dkey = "decoding." + std::string(dk.str());
                if (dk.str() == "length_penalty") {
                    auto v = dv.value<double>();
                    if (!v) r.fail(dkey, "must be a number");
                    exp.decoding.length_penalty = *v;
                } else if (dk.str() == "max_tokens") exp.decoding.max_tokens = static_cast<int>(r.integer(dv, dkey));
                else if (dk.str() == "beam_size") exp.decoding.beam_size = static_cast<int>(r.integer(dv, dkey));
                else if (dk.str() == "seed") exp.decoding.seed = static_cast<std::uint64_t>(r.count(dv, dkey));
                else r.fail(dkey, "is not a known key");
            }
        } else {
            r.fail(key, "is not a known key");
        }
    }
    if (s.endpoint && s.stub) throw ValidationError(file.string() + ": set either endpoint or stub, not both");
}

void apply_environment(Settings& s) {
    if (const char* env = std::getenv(kEndpointEnv); env && *env) {
        s.endpoint = env;
        s.stub.reset();
    }
}

Resources load_resources(const Settings& s) {
    if (!s.corpus) throw ValidationError("no corpus given (--corpus or corpus = in the config)");
    Resources res;
    res.corpus = load_manifest(*s.corpus);
    if (s.embeddings) res.image_embeddings = load_embeddings(*s.embeddings, sidecar_path_for(*s.embeddings));
    if (s.tags) res.tags = load_tags(*s.tags);
    for (const auto& [source, path] : s.captions) {
        auto store = load_caption_store(path);
        if (store.source() != source)
            throw ValidationError(path.string() + ": holds source '" + store.source() + "', configured as '" + source + "'");
        res.caption_stores.emplace(source, std::move(store));
    }
    for (const auto& [source, path] : s.caption_embeddings)
        res.caption_embeddings.emplace(source, load_embeddings(path, sidecar_path_for(path), EmbeddingKind::Caption));
    return res;
}

std::unique_ptr<CaptionModel> make_model(const Settings& s, const Resources& res) {
    if (s.stub) return std::make_unique<StubModel>(*s.stub, res);
    if (!s.endpoint) throw ValidationError("no model backend: pass --stub <mode> or --endpoint <url>");
    auto client = std::make_unique<HttpModelClient>(*s.endpoint);
    const auto model = client->model_id();
    spdlog::info("model backend {} reports model {}", *s.endpoint, model);
    return client;
}

std::pair<std::string, std::filesystem::path> parse_assignment(std::string_view text, std::string_view flag) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos || eq == 0 || eq + 1 == text.size())
        throw ValidationError(std::string(flag) + " expects <source>=<path>, got '" + std::string(text) + "'");
    return {std::string(text.substr(0, eq)), std::filesystem::path(std::string(text.substr(eq + 1)))};
}

}  // namespace ictx

#include "ictx/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "ictx/error.hpp"
#include "ictx/parallel.hpp"
#include "ictx/rng.hpp"

namespace ictx {

void ExperimentConfig::validate() const {
    if (strategies.empty()) throw ValidationError("no strategies configured");
    if (caption_sources.empty()) throw ValidationError("no caption sources configured");
    if (shot_counts.empty()) throw ValidationError("no shot counts configured");
    for (const auto& s : caption_sources) parse_caption_source(s);
    for (auto n : shot_counts)
        if (n == 0) throw ValidationError("shot counts must be positive");
    if (std::find(strategies.begin(), strategies.end(), Strategy::DiirTt) != strategies.end())
        for (auto n : shot_counts)
            if (n % kTagCategories != 0)
                throw ValidationError("diir-tt needs shot counts divisible by 4, got " + std::to_string(n));
    if (n_tests && *n_tests == 0) throw ValidationError("n_tests must be positive");
    if (batch.max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
    decoding.validate();
}

std::vector<std::string> test_ids_for(const CorpusIndex& corpus, Split split, std::optional<std::size_t> n) {
    auto ids = corpus.split_ids(split);
    if (ids.empty()) throw ValidationError("split " + std::string(to_string(split)) + " has no images");
    if (n && *n < ids.size()) ids.resize(*n);
    return ids;
}

std::uint64_t test_seed(std::uint64_t master, std::string_view test_id) {
    return derive_seed(master, {hash_string(test_id)});
}

OrderPolicy effective_order_policy(const OrderPolicy& configured, Strategy strategy, std::uint64_t master,
                             std::string_view test_id) {
    OrderPolicy p = configured;
    if (p.needs_scores() && !has_scores(strategy)) p = {OrderPolicy::Kind::AsRetrieved, std::nullopt};
    if (p.kind == OrderPolicy::Kind::Random && !p.seed)
        p.seed = derive_seed(master, {hash_string("order"), hash_string(test_id)});
    return p;
}

// --- report ---------------------------------------------------------------

EvalReport summarize(std::vector<ReportRow> rows) {
    EvalReport report;
    report.rows = std::move(rows);
    struct Acc {
        double sum = 0.0;
        std::size_t count = 0;
        bool failed = false;
    };
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, Acc> acc;
    for (const auto& r : report.rows) {
        auto key = std::make_pair(r.strategy, r.caption_source);
        auto [it, fresh] = acc.try_emplace(key);
        if (fresh) order.push_back(key);
        if (r.cider) it->second.sum += *r.cider;
        else it->second.failed = true;
        ++it->second.count;
    }
    for (const auto& key : order) {
        const auto& a = acc[key];
        MeanRow m{key.first, key.second, std::nullopt};
        if (!a.failed) m.mean = a.sum / static_cast<double>(a.count);
        report.means.push_back(std::move(m));
    }
    return report;
}

namespace {

std::string format_score(const std::optional<double>& v) { return v ? fmt::format("{:.10f}", *v) : "failed"; }

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw RuntimeError("cannot write " + tmp);
        out << text;
        if (!out) throw RuntimeError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

std::string report_csv(const EvalReport& report) {
    std::string out = "strategy,caption_source,shots,cider\n";
    for (const auto& r : report.rows)
        out += fmt::format("{},{},{},{}\n", r.strategy, r.caption_source, r.shots, format_score(r.cider));
    return out;
}

std::string means_csv(const EvalReport& report) {
    std::string out = "strategy,caption_source,mean\n";
    for (const auto& m : report.means)
        out += fmt::format("{},{},{}\n", m.strategy, m.caption_source, format_score(m.mean));
    return out;
}

nlohmann::ordered_json chart_data_json(const EvalReport& report) {
    auto series_of = [&](const std::string& strategy, const std::string& source) {
        auto s = nlohmann::ordered_json::array();
        for (const auto& r : report.rows)
            if (r.strategy == strategy && r.caption_source == source)
                s.push_back({r.shots, r.cider ? nlohmann::ordered_json(*r.cider) : nlohmann::ordered_json(nullptr)});
        return s;
    };
    nlohmann::ordered_json by_strategy = nlohmann::ordered_json::object();
    nlohmann::ordered_json by_source = nlohmann::ordered_json::object();
    for (const auto& m : report.means) {
        auto series = series_of(m.strategy, m.caption_source);
        by_strategy[m.caption_source].push_back({{"strategy", m.strategy}, {"series", series}});
        by_source[m.strategy].push_back({{"caption_source", m.caption_source}, {"series", series}});
    }
    nlohmann::ordered_json j;
    j["by_strategy"] = std::move(by_strategy);
    j["by_caption_source"] = std::move(by_source);
    return j;
}

EvalReport read_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "strategy,caption_source,shots,cider")
        throw ValidationError(path.string() + ": unexpected header");
    std::vector<ReportRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
        auto bad = [&] { return ValidationError(path.string() + ":" + std::to_string(lineno) + ": malformed row"); };
        if (cols.size() != 4) throw bad();
        ReportRow r{cols[0], cols[1], 0, std::nullopt};
        auto [p, ec] = std::from_chars(cols[2].data(), cols[2].data() + cols[2].size(), r.shots);
        if (ec != std::errc{} || p != cols[2].data() + cols[2].size()) throw bad();
        if (cols[3] != "failed") {
            double v = 0.0;
            auto [q, ec2] = std::from_chars(cols[3].data(), cols[3].data() + cols[3].size(), v);
            if (ec2 != std::errc{} || q != cols[3].data() + cols[3].size()) throw bad();
            r.cider = v;
        }
        rows.push_back(std::move(r));
    }
    return summarize(std::move(rows));
}

void write_report_files(const EvalReport& report, const std::filesystem::path& dir) {
    write_text(dir / "report.csv", report_csv(report));
    write_text(dir / "means.csv", means_csv(report));
    write_text(dir / "chart_data.json", chart_data_json(report).dump(2) + "\n");
}

std::map<std::string, double> mgca_improvement(const EvalReport& report) {
    std::map<std::string, std::optional<double>> gtc;
    for (const auto& m : report.means)
        if (m.caption_source == "gtc") gtc[m.strategy] = m.mean;
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& m : report.means) {
        if (!m.caption_source.starts_with("mgca:")) continue;
        auto it = gtc.find(m.strategy);
        if (it == gtc.end())
            throw ValidationError("no gtc row to pair with " + m.caption_source + " for strategy " + m.strategy);
        if (!it->second || !m.mean)
            throw ValidationError("failed cells in the " + m.strategy + " gtc/" + m.caption_source + " pairing");
        auto& a = acc[m.caption_source.substr(5)];
        a.first += *m.mean - *it->second;
        ++a.second;
    }
    std::map<std::string, double> out;
    for (const auto& [store, a] : acc) out[store] = a.first / static_cast<double>(a.second);
    return out;
}

// --- grid -----------------------------------------------------------------

std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw RuntimeError("sha256 failed");
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
    return hex;
}

namespace {

std::string_view to_string(TagScoring s) { return s == TagScoring::Jaccard ? "jaccard" : "intersection"; }

nlohmann::ordered_json decoding_json(const DecodingParams& p) {
    nlohmann::ordered_json j;
    j["length_penalty"] = p.length_penalty;
    j["max_tokens"] = p.max_tokens;
    j["beam_size"] = p.beam_size;
    j["seed"] = p.seed ? nlohmann::ordered_json(*p.seed) : nlohmann::ordered_json(nullptr);
    return j;
}

/// Counts generate() calls reaching the wrapped model.
class CountingModel final : public CaptionModel {
public:
    explicit CountingModel(CaptionModel& inner) : inner_(inner) {}
    GenerationResponse generate(const GenerationRequest& request) override {
        ++calls_;
        return inner_.generate(request);
    }
    std::string model_id() override { return inner_.model_id(); }
    std::size_t calls() const { return calls_.load(); }

private:
    CaptionModel& inner_;
    std::atomic<std::size_t> calls_{0};
};


struct CellOutput {
    double cider = 0.0;
    std::map<std::string, std::string, std::less<>> captions;
};

CellOutput compute_cell(const ExperimentConfig& cfg, const Resources& res, const DocFreqTable& df, CaptionModel& model,
                        Strategy strategy, const CaptionSource& source, std::size_t shots,
                        const std::vector<std::string>& test_ids, const std::vector<std::string>& pool) {
    std::vector<GenerationRequest> requests(test_ids.size());
    parallel_for(test_ids.size(), cfg.workers, [&](std::size_t i) {
        const auto& tid = test_ids[i];
        SelectionSpec spec;
        spec.strategy = strategy;
        spec.n_shots = shots;
        spec.seed = test_seed(cfg.seed, tid);
        spec.caption_source = cfg.sicr_source;
        spec.pool = pool;
        spec.tag_scoring = cfg.tag_scoring;
        const auto selected = select_shots(spec, tid, res);
        const auto captions = assign_captions(source, selected, res, df);
        const auto seq = build_sequence(selected, captions, tid, effective_order_policy(cfg.order_policy, strategy, cfg.seed, tid));
        requests[i] = make_request(seq, cfg.decoding);
    });
    const auto responses = batch_generate(model, requests, cfg.batch);
    CellOutput out;
    for (std::size_t i = 0; i < test_ids.size(); ++i) out.captions.emplace(test_ids[i], responses[i].caption);
    out.cider = corpus_cider(out.captions, res.corpus, df, cfg.workers);
    return out;
}

std::optional<double> read_cache(const std::filesystem::path& file, const nlohmann::ordered_json& key) {
    std::ifstream in(file);
    if (!in) return std::nullopt;
    auto j = nlohmann::ordered_json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("key") || j["key"] != key || !j.contains("cider") ||
        !j["cider"].is_number()) {
        spdlog::warn("ignoring unusable cache entry {}", file.string());
        return std::nullopt;
    }
    return j["cider"].get<double>();
}

}  // namespace

void check_dependencies(const ExperimentConfig& cfg, const Resources& res) {
    for (auto s : cfg.strategies) {
        switch (s) {
            case Strategy::RS: break;
            case Strategy::SiirClip: res.require_image_embeddings(); break;
            case Strategy::SicrClip:
                res.require_image_embeddings();
                res.require_caption_embeddings(cfg.sicr_source);
                if (cfg.sicr_source != "gtc") res.require_caption_store(cfg.sicr_source);
                break;
            case Strategy::SiirTag:
            case Strategy::DiirTr:
            case Strategy::DiirTt: res.require_tags(); break;
        }
    }
    for (const auto& label : cfg.caption_sources) {
        const auto src = parse_caption_source(label);
        if (src.kind == CaptionSource::Kind::Mgc || src.kind == CaptionSource::Kind::Mgca)
            res.require_caption_store(src.store);
    }
}

nlohmann::ordered_json cell_key(const ExperimentConfig& cfg, Strategy strategy, const std::string& source,
                                std::size_t shots, const std::string& model_id,
                                const std::vector<std::string>& test_ids) {
    nlohmann::ordered_json k;
    k["strategy"] = to_string(strategy);
    k["caption_source"] = source;
    k["shots"] = shots;
    k["order_policy"] = to_string(cfg.order_policy);
    k["seed"] = cfg.seed;
    k["model"] = model_id;
    k["test_split"] = to_string(cfg.test_split);
    k["database_split"] = to_string(cfg.database_split);
    k["sicr_source"] = strategy == Strategy::SicrClip ? nlohmann::ordered_json(cfg.sicr_source) : nullptr;
    k["tag_scoring"] = to_string(cfg.tag_scoring);
    k["decoding"] = decoding_json(cfg.decoding);
    k["test_ids"] = test_ids;
    return k;
}

GridRun run_grid(const ExperimentConfig& cfg, const Resources& res, CaptionModel& model, const GridOptions& opts) {
    cfg.validate();
    check_dependencies(cfg, res);
    const auto test_ids = test_ids_for(res.corpus, cfg.test_split, cfg.n_tests);
    const auto pool = res.corpus.split_ids(cfg.database_split);
    const auto df = build_df(res.corpus, cfg.database_split);
    CountingModel counted(model);
    const auto model_id = model.model_id();
    if (cfg.cache_dir) std::filesystem::create_directories(*cfg.cache_dir);

    GridRun run;
    std::vector<ReportRow> rows;
    for (auto strategy : cfg.strategies) {
        for (const auto& label : cfg.caption_sources) {
            const auto source = parse_caption_source(label);
            if (source.kind == CaptionSource::Kind::SicrMatched && strategy != Strategy::SicrClip) continue;
            for (auto shots : cfg.shot_counts) {
                CellResult cell;
                cell.strategy = strategy;
                cell.caption_source = label;
                cell.shots = shots;
                const auto key = cell_key(cfg, strategy, label, shots, model_id, test_ids);
                cell.key_hash = sha256_hex(key.dump());
                std::optional<std::filesystem::path> cache_file;
                if (cfg.cache_dir) cache_file = *cfg.cache_dir / (cell.key_hash + ".json");

                if (cache_file) {
                    if (auto hit = read_cache(*cache_file, key)) {
                        cell.cider = hit;
                        cell.cached = true;
                        ++run.stats.cached_cells;
                    }
                }
                if (!cell.cached) {
                    if (opts.cell_budget && run.stats.computed_cells >= *opts.cell_budget) {
                        run.complete = false;
                        break;
                    }
                    ++run.stats.computed_cells;
                    try {
                        auto out = compute_cell(cfg, res, df, counted, strategy, source, shots, test_ids, pool);
                        cell.cider = out.cider;
                        if (cache_file) {
                            nlohmann::ordered_json entry;
                            entry["key"] = key;
                            entry["cider"] = out.cider;
                            entry["captions"] = out.captions;
                            write_text(*cache_file, entry.dump() + "\n");
                        }
                    } catch (const Error& e) {
                        cell.error = e.what();
                        ++run.stats.failed_cells;
                        spdlog::warn("cell {}/{}/{} failed: {}", to_string(strategy), label, shots, e.what());
                    }
                }
                rows.push_back({std::string(to_string(strategy)), label, shots, cell.cider});
                run.cells.push_back(std::move(cell));
            }
            if (!run.complete) break;
        }
        if (!run.complete) break;
    }
    run.stats.generation_calls = counted.calls();
    run.report = summarize(std::move(rows));
    return run;
}

// --- bootstrap and iterative prompting ------------------------------------

std::vector<std::string> bootstrap_seed_pool(const CorpusIndex& corpus, const BootstrapOptions& opts) {
    if (opts.n_seed_shots == 0) return {};
    const auto ids = corpus.split_ids(opts.database_split);
    if (ids.size() < opts.n_seed_shots + 1)
        throw ValidationError("database has " + std::to_string(ids.size()) + " images; a seed pool of " +
                              std::to_string(opts.n_seed_shots) + " needs at least " +
                              std::to_string(opts.n_seed_shots + 1));
    Rng rng(derive_seed(opts.seed, {hash_string("bootstrap-pool")}));
    std::vector<std::string> pool;
    for (auto i : rng.sample_indices(ids.size(), opts.n_seed_shots + 1)) pool.push_back(ids[i]);
    return pool;
}

namespace {

InContextSequence fixed_pool_sequence(const CorpusIndex& corpus, const std::vector<std::string>& pool, std::size_t n,
                                      const std::string& target) {
    InContextSequence seq;
    seq.test_image_id = target;
    seq.order_policy = {OrderPolicy::Kind::AsRetrieved, std::nullopt};
    for (const auto& id : pool) {
        if (seq.shots.size() == n) break;
        if (id == target) continue;
        seq.shots.push_back({id, corpus.at(id).captions.front()});
    }
    return seq;
}

/// Generates for every target; successes land in the store in target order.
std::vector<std::string> generate_into(CaptionModel& model, const std::vector<std::string>& targets,
                                       const std::vector<GenerationRequest>& requests, const BatchOptions& batch,
                                       CaptionStore& store) {
    std::vector<std::optional<GenerationResponse>> results;
    std::vector<std::string> failed;
    try {
        for (auto& r : batch_generate(model, requests, batch)) results.emplace_back(std::move(r));
    } catch (const BatchError& e) {
        results = e.partial();
        for (std::size_t k = 0; k < e.failed().size(); ++k) {
            const auto i = e.failed()[k];
            failed.push_back(targets[i]);
            spdlog::warn("generation failed for {}: {}", targets[i], e.messages()[k]);
        }
    }
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (results[i]) store.add(targets[i], results[i]->caption);
    return failed;
}

std::map<std::string, std::string, std::less<>> generate_all(CaptionModel& model,
                                                              const std::vector<std::string>& targets,
                                                              const std::vector<GenerationRequest>& requests,
                                                              const BatchOptions& batch) {
    const auto responses = batch_generate(model, requests, batch);
    std::map<std::string, std::string, std::less<>> out;
    for (std::size_t i = 0; i < targets.size(); ++i) out.emplace(targets[i], responses[i].caption);
    return out;
}

CaptionStore relabel(const CaptionStore& store, std::string source) {
    CaptionStore out(std::move(source));
    for (auto& e : store.entries()) out.add(e.image_id, e.caption);
    return out;
}

}  // namespace

BootstrapResult bootstrap_mgc(const Resources& res, CaptionModel& model, const BootstrapOptions& opts) {
    opts.decoding.validate();
    const auto pool = bootstrap_seed_pool(res.corpus, opts);
    const auto targets = res.corpus.split_ids(opts.database_split);
    std::vector<GenerationRequest> requests;
    requests.reserve(targets.size());
    for (const auto& t : targets)
        requests.push_back(make_request(fixed_pool_sequence(res.corpus, pool, opts.n_seed_shots, t), opts.decoding));
    BootstrapResult out{CaptionStore("vlm" + std::to_string(opts.n_seed_shots)), {}};
    out.failed_ids = generate_into(model, targets, requests, opts.batch, out.store);
    return out;
}

IterationTrace iterate_prompting(const Resources& res, CaptionModel& model, const IterateOptions& opts) {
    if (opts.iterations < 1) throw ValidationError("iterations must be >= 1");
    if (opts.shot_counts.empty()) throw ValidationError("no shot counts configured");
    const std::size_t refresh =
        opts.refresh_shots.value_or(*std::max_element(opts.shot_counts.begin(), opts.shot_counts.end()));
    const auto df = build_df(res.corpus, opts.database_split);
    const auto database = res.corpus.split_ids(opts.database_split);
    const auto tests = test_ids_for(res.corpus, opts.test_split, opts.n_tests);

    IterationTrace trace;
    {
        BootstrapOptions b{opts.bootstrap_shots, opts.seed, opts.database_split, opts.decoding, opts.batch};
        auto boot = bootstrap_mgc(res, model, b);
        const auto pool = bootstrap_seed_pool(res.corpus, b);
        std::vector<GenerationRequest> requests;
        for (const auto& t : tests)
            requests.push_back(make_request(fixed_pool_sequence(res.corpus, pool, b.n_seed_shots, t), opts.decoding));
        const auto test_caps = generate_all(model, tests, requests, opts.batch);
        auto snapshot = relabel(boot.store, "iter:1");
        trace.iterations.push_back(
            {1, "iter:1", corpus_cider(test_caps, res.corpus, df, opts.workers), snapshot.size(), boot.failed_ids});
        trace.snapshots.push_back(std::move(snapshot));
    }

    for (std::size_t t = 2; t <= opts.iterations; ++t) {
        const auto& prev = trace.snapshots.back();
        std::vector<std::string> prev_ids;
        for (const auto& e : prev.entries()) prev_ids.push_back(e.image_id);

        auto rs_sequence = [&](const std::string& target, std::size_t n, std::uint64_t seed) {
            SelectionSpec spec;
            spec.strategy = Strategy::RS;
            spec.n_shots = n;
            spec.seed = seed;
            spec.pool = prev_ids;
            const auto shots = select_rs(spec, target);
            return build_sequence(shots, assign_mgc(shots.image_ids, prev), target,
                                  {OrderPolicy::Kind::AsRetrieved, std::nullopt});
        };

        std::vector<GenerationRequest> requests(database.size());
        parallel_for(database.size(), opts.workers, [&](std::size_t i) {
            const auto seed = derive_seed(opts.seed, {hash_string("ip"), t, hash_string(database[i])});
            requests[i] = make_request(rs_sequence(database[i], refresh, seed), opts.decoding);
        });
        CaptionStore next("iter:" + std::to_string(t));
        IterationRecord rec;
        rec.iteration = t;
        rec.snapshot = next.source();
        rec.failed_ids = generate_into(model, database, requests, opts.batch, next);
        for (const auto& e : next.entries()) {
            const auto* before = prev.find(e.image_id);
            if (!before || *before != e.caption) ++rec.changed;
        }

        std::vector<std::string> targets;
        std::vector<GenerationRequest> test_requests;
        for (auto n : opts.shot_counts)
            for (const auto& tid : tests) {
                const auto seed = derive_seed(opts.seed, {hash_string("ip-test"), t, n, hash_string(tid)});
                test_requests.push_back(make_request(rs_sequence(tid, n, seed), opts.decoding));
            }
        const auto responses = batch_generate(model, test_requests, opts.batch);
        double total = 0.0;
        for (std::size_t s = 0; s < opts.shot_counts.size(); ++s) {
            std::map<std::string, std::string, std::less<>> caps;
            for (std::size_t i = 0; i < tests.size(); ++i)
                caps.emplace(tests[i], responses[s * tests.size() + i].caption);
            total += corpus_cider(caps, res.corpus, df, opts.workers);
        }
        rec.cider = total / static_cast<double>(opts.shot_counts.size());
        trace.iterations.push_back(std::move(rec));
        trace.snapshots.push_back(std::move(next));
    }
    return trace;
}

std::string trace_jsonl(const IterationTrace& trace) {
    std::string out;
    for (const auto& r : trace.iterations) {
        nlohmann::ordered_json j;
        j["iteration"] = r.iteration;
        j["snapshot"] = r.snapshot;
        j["cider"] = r.cider;
        j["changed"] = r.changed;
        j["failed_ids"] = r.failed_ids;
        out += j.dump() + "\n";
    }
    return out;
}

// --- short-cut probe ------------------------------------------------------

const ProbeCondition& ProbeReport::at(std::string_view condition) const {
    for (const auto& c : conditions)
        if (c.condition == condition) return c;
    throw ValidationError("probe report has no condition " + std::string(condition));
}

std::string probe_donor(const CorpusIndex& corpus, const std::vector<std::string>& database, std::string_view test_id,
                        std::size_t n_shots, std::uint64_t seed) {
    std::vector<std::size_t> order(database.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {hash_string("probe-donor"), hash_string(test_id)}));
    rng.shuffle(std::span<std::size_t>(order));
    for (auto i : order) {
        const auto& id = database[i];
        if (id != test_id && corpus.at(id).captions.size() >= n_shots) return id;
    }
    throw ValidationError("no donor image with " + std::to_string(n_shots) + " captions for " + std::string(test_id));
}

ProbeReport shortcut_probe(const Resources& res, CaptionModel& model, const ProbeOptions& opts) {
    if (opts.n_tests == 0) throw ValidationError("probe needs at least one test image");
    const auto df = build_df(res.corpus, opts.database_split);
    const auto database = res.corpus.split_ids(opts.database_split);
    const auto tests = test_ids_for(res.corpus, opts.test_split, opts.n_tests);
    static const std::array<std::string, 3> kConditions{"identical", "siir-clip", "rs"};
    const std::size_t n = opts.n_shots;

    std::vector<std::vector<std::string>> donor_caps(tests.size());
    std::vector<GenerationRequest> requests(kConditions.size() * tests.size());
    parallel_for(tests.size(), opts.workers, [&](std::size_t i) {
        const auto& tid = tests[i];
        const auto& donor = res.corpus.at(probe_donor(res.corpus, database, tid, n, opts.seed)).captions;
        auto& caps = donor_caps[i];
        if (donor.size() == n) {
            caps = donor;
        } else {
            Rng rng(derive_seed(opts.seed, {hash_string("probe-captions"), hash_string(tid)}));
            auto idx = rng.sample_indices(donor.size(), n);
            std::sort(idx.begin(), idx.end());
            for (auto k : idx) caps.push_back(donor[k]);
        }

        SelectionSpec spec;
        spec.n_shots = n;
        spec.pool = database;
        std::array<std::vector<std::string>, 3> shot_ids;
        shot_ids[0].assign(n, tid);
        spec.strategy = Strategy::SiirClip;
        shot_ids[1] = select_siir_clip(spec, tid, res).image_ids;
        spec.strategy = Strategy::RS;
        spec.seed = derive_seed(opts.seed, {hash_string("probe-rs"), hash_string(tid)});
        shot_ids[2] = select_rs(spec, tid).image_ids;

        for (std::size_t c = 0; c < kConditions.size(); ++c) {
            // Built directly: the identical condition puts the test image among its own shots.
            InContextSequence seq;
            seq.test_image_id = tid;
            seq.order_policy = {OrderPolicy::Kind::AsRetrieved, std::nullopt};
            for (std::size_t j = 0; j < n; ++j) seq.shots.push_back({shot_ids[c][j], caps[j]});
            requests[c * tests.size() + i] = make_request(seq, opts.decoding);
        }
    });
    const auto responses = batch_generate(model, requests, opts.batch);

    ProbeReport report;
    report.n_tests = tests.size();
    for (std::size_t c = 0; c < kConditions.size(); ++c) {
        std::map<std::string, std::string, std::less<>> caps;
        std::vector<double> icc(tests.size());
        for (std::size_t i = 0; i < tests.size(); ++i) caps.emplace(tests[i], responses[c * tests.size() + i].caption);
        parallel_for(tests.size(), opts.workers, [&](std::size_t i) {
            icc[i] = cider_d(responses[c * tests.size() + i].caption, donor_caps[i], df).value;
        });
        ProbeCondition pc;
        pc.condition = kConditions[c];
        pc.gtc_cider = corpus_cider(caps, res.corpus, df, opts.workers);
        pc.icc_cider = std::accumulate(icc.begin(), icc.end(), 0.0) / static_cast<double>(icc.size()) * 100.0;
        report.conditions.push_back(pc);
    }
    return report;
}

nlohmann::ordered_json probe_json(const ProbeReport& report) {
    nlohmann::ordered_json j;
    j["n_tests"] = report.n_tests;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : report.conditions)
        arr.push_back({{"condition", c.condition}, {"gtc_cider", c.gtc_cider}, {"icc_cider", c.icc_cider}});
    j["conditions"] = std::move(arr);
    return j;
}

}  // namespace ictx

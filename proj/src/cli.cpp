#include "ictx/cli.hpp"

#include <fstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "ictx/config.hpp"
#include "ictx/error.hpp"

namespace ictx {

namespace {

struct Flags {
    std::string config;
    std::string corpus, embeddings, tags;
    std::vector<std::string> captions, caption_embeddings;
    std::vector<std::string> strategies, caption_sources;
    std::vector<std::size_t> shots;
    std::uint64_t seed = 0;
    std::string order_policy, endpoint, stub, out, cache_dir, split, sicr_source, tag_scoring;
    std::size_t n_tests = 0, workers = 1, max_in_flight = 1;

    std::size_t n = 0;
    std::string test_id;
    std::size_t iterations = 5, bootstrap_shots = 0, refresh_shots = 0;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config, "TOML config file")->check(CLI::ExistingFile);
    sub->add_option("--corpus", f.corpus, "manifest.jsonl");
    sub->add_option("--embeddings", f.embeddings, "image embeddings .bin (sidecar <stem>.ids.json)");
    sub->add_option("--tags", f.tags, "tags.jsonl");
    sub->add_option("--captions", f.captions, "<source>=<captions.jsonl>, repeatable");
    sub->add_option("--caption-embeddings", f.caption_embeddings, "<source>=<caption embeddings .bin>, repeatable");
    sub->add_option("--strategy", f.strategies, "rs|siir-clip|siir-tag|sicr-clip|diir-tr|diir-tt (comma list for run)")
        ->delimiter(',');
    sub->add_option("--caption-source", f.caption_sources, "gtc|mgc:<s>|mgca:<s>|sicr-matched (comma list for run)")
        ->delimiter(',');
    sub->add_option("--shots", f.shots, "shot counts, comma list")->delimiter(',');
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--order-policy", f.order_policy, "as-retrieved|asc-similarity|desc-similarity|random[:seed]");
    auto* ep = sub->add_option("--endpoint", f.endpoint, "model server URL (also " + std::string(kEndpointEnv) + ")");
    sub->add_option("--stub", f.stub, "copy-nearest|echo-last|tag-template")->excludes(ep);
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--cache-dir", f.cache_dir, "grid cell cache directory");
    sub->add_option("--split", f.split, "test split (default test)");
    sub->add_option("--sicr-source", f.sicr_source, "caption embeddings used by sicr-clip (default gtc)");
    sub->add_option("--tag-scoring", f.tag_scoring, "intersection|jaccard");
    sub->add_option("--n-tests", f.n_tests, "number of test images");
    sub->add_option("--workers", f.workers, "worker threads for retrieval and scoring");
    sub->add_option("--max-in-flight", f.max_in_flight, "concurrent generation requests");
}

bool given(const CLI::App* sub, const char* name) {
    const auto* opt = sub->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
}

Settings resolve(const CLI::App* sub, const Flags& f) {
    Settings s;
    if (!f.config.empty()) apply_config_file(s, f.config);
    apply_environment(s);
    auto& exp = s.experiment;
    if (given(sub, "--corpus")) s.corpus = f.corpus;
    if (given(sub, "--embeddings")) s.embeddings = f.embeddings;
    if (given(sub, "--tags")) s.tags = f.tags;
    for (const auto& c : f.captions) {
        auto [k, v] = parse_assignment(c, "--captions");
        s.captions[k] = v;
    }
    for (const auto& c : f.caption_embeddings) {
        auto [k, v] = parse_assignment(c, "--caption-embeddings");
        s.caption_embeddings[k] = v;
    }
    if (given(sub, "--strategy")) {
        exp.strategies.clear();
        for (const auto& name : f.strategies) exp.strategies.push_back(parse_strategy(name));
    }
    if (given(sub, "--caption-source")) exp.caption_sources = f.caption_sources;
    if (given(sub, "--shots")) exp.shot_counts = f.shots;
    if (given(sub, "--seed")) exp.seed = f.seed;
    if (given(sub, "--order-policy")) exp.order_policy = parse_order_policy(f.order_policy);
    if (given(sub, "--endpoint")) {
        s.endpoint = f.endpoint;
        s.stub.reset();
    }
    if (given(sub, "--stub")) {
        s.stub = parse_stub_mode(f.stub);
        s.endpoint.reset();
    }
    if (given(sub, "--out")) s.out = f.out;
    if (given(sub, "--cache-dir")) exp.cache_dir = f.cache_dir;
    if (given(sub, "--split")) exp.test_split = parse_split(f.split);
    if (given(sub, "--sicr-source")) exp.sicr_source = f.sicr_source;
    if (given(sub, "--tag-scoring")) {
        if (f.tag_scoring == "intersection") exp.tag_scoring = TagScoring::Intersection;
        else if (f.tag_scoring == "jaccard") exp.tag_scoring = TagScoring::Jaccard;
        else throw ValidationError("--tag-scoring must be intersection|jaccard");
    }
    if (given(sub, "--n-tests")) {
        exp.n_tests = f.n_tests;
        s.probe_tests = f.n_tests;
    }
    if (given(sub, "--workers")) exp.workers = static_cast<unsigned>(std::max<std::size_t>(1, f.workers));
    if (given(sub, "--max-in-flight")) exp.batch.max_in_flight = static_cast<unsigned>(f.max_in_flight);
    if (given(sub, "--iterations")) s.iterations = f.iterations;
    if (given(sub, "--bootstrap-shots")) s.bootstrap_shots = f.bootstrap_shots;
    if (given(sub, "--refresh-shots")) s.refresh_shots = f.refresh_shots;
    return s;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    if (!o) throw RuntimeError("cannot write " + path.string());
    o << text;
}

/// The single strategy and shot count a select/assign call works on.
SelectionSpec single_spec(const CLI::App* sub, const Flags& f, const Settings& s, const Resources& res) {
    const auto& exp = s.experiment;
    if (exp.strategies.size() != 1) throw ValidationError("give exactly one --strategy");
    if (f.test_id.empty()) throw ValidationError("--test-id is required");
    SelectionSpec spec;
    spec.strategy = exp.strategies.front();
    if (given(sub, "--n")) spec.n_shots = f.n;
    else if (exp.shot_counts.size() == 1) spec.n_shots = exp.shot_counts.front();
    else throw ValidationError("give --n (or a single --shots value)");
    spec.seed = test_seed(exp.seed, f.test_id);
    spec.caption_source = exp.sicr_source;
    spec.tag_scoring = exp.tag_scoring;
    res.corpus.at(f.test_id);
    spec.pool = res.corpus.split_ids(exp.database_split);
    return spec;
}

int cmd_validate(const CLI::App* sub, const Flags& f, std::ostream& out, std::ostream& err) {
    const auto s = resolve(sub, f);
    const auto res = load_resources(s);
    const auto rep = validate_resources(res);
    for (const auto& line : rep.summary) out << line << "\n";
    if (given(sub, "--strategy") || given(sub, "--caption-source") || !f.config.empty())
        check_dependencies(s.experiment, res);
    if (!rep.ok()) {
        for (const auto& p : rep.problems) err << "error: " << p << "\n";
        return 1;
    }
    out << "ok\n";
    return 0;
}

int cmd_select(const CLI::App* sub, const Flags& f, std::ostream& out) {
    const auto s = resolve(sub, f);
    const auto res = load_resources(s);
    const auto spec = single_spec(sub, f, s, res);
    const auto shots = select_shots(spec, f.test_id, res, {s.experiment.workers});
    out << shot_set_json(shots, f.test_id, spec.strategy).dump() << "\n";
    return 0;
}

int cmd_assign(const CLI::App* sub, const Flags& f, std::ostream& out) {
    const auto s = resolve(sub, f);
    const auto res = load_resources(s);
    const auto spec = single_spec(sub, f, s, res);
    if (s.experiment.caption_sources.size() != 1) throw ValidationError("give exactly one --caption-source");
    const auto source = parse_caption_source(s.experiment.caption_sources.front());
    const auto df = build_df(res.corpus, s.experiment.database_split);
    const auto shots = select_shots(spec, f.test_id, res, {s.experiment.workers});
    const auto captions = assign_captions(source, shots, res, df);
    const auto policy = effective_order_policy(s.experiment.order_policy, spec.strategy, s.experiment.seed, f.test_id);
    out << sequence_json(build_sequence(shots, captions, f.test_id, policy)).dump() << "\n";
    return 0;
}

void print_means(const EvalReport& report, std::ostream& out) {
    for (const auto& m : report.means)
        out << fmt::format("{:<10} {:<20} {}\n", m.strategy, m.caption_source,
                           m.mean ? fmt::format("{:.2f}", *m.mean) : "failed");
}

int cmd_run(const CLI::App* sub, const Flags& f, std::ostream& out, std::ostream& err) {
    const auto s = resolve(sub, f);
    const auto res = load_resources(s);
    s.experiment.validate();
    check_dependencies(s.experiment, res);
    auto model = make_model(s, res);
    const auto run = run_grid(s.experiment, res, *model);
    write_report_files(run.report, s.out);
    print_means(run.report, out);
    out << fmt::format("cells: {} computed, {} cached, {} failed; generation calls: {}\n", run.stats.computed_cells,
                       run.stats.cached_cells, run.stats.failed_cells, run.stats.generation_calls);
    if (run.stats.failed_cells > 0) {
        for (const auto& c : run.cells)
            if (!c.cider) err << "error: cell " << to_string(c.strategy) << "/" << c.caption_source << "/" << c.shots
                              << " failed: " << c.error << "\n";
        return 2;
    }
    return 0;
}

int cmd_iterate(const CLI::App* sub, const Flags& f, std::ostream& out) {
    const auto s = resolve(sub, f);
    const auto res = load_resources(s);
    auto model = make_model(s, res);
    IterateOptions o;
    o.iterations = s.iterations;
    o.bootstrap_shots = s.bootstrap_shots;
    o.shot_counts = s.experiment.shot_counts;
    o.refresh_shots = s.refresh_shots;
    o.seed = s.experiment.seed;
    o.database_split = s.experiment.database_split;
    o.test_split = s.experiment.test_split;
    o.n_tests = s.experiment.n_tests;
    o.decoding = s.experiment.decoding;
    o.batch = s.experiment.batch;
    o.workers = s.experiment.workers;
    const auto trace = iterate_prompting(res, *model, o);
    write_file(s.out / "trace.jsonl", trace_jsonl(trace));
    for (const auto& snap : trace.snapshots)
        write_caption_store(snap, s.out / ("captions." + snap.source() + ".jsonl"));
    for (const auto& r : trace.iterations)
        out << fmt::format("iteration {}: cider {:.2f}, changed {}\n", r.iteration, r.cider, r.changed);
    return 0;
}

int cmd_probe(const CLI::App* sub, const Flags& f, std::ostream& out) {
    const auto s = resolve(sub, f);
    const auto res = load_resources(s);
    auto model = make_model(s, res);
    ProbeOptions o;
    o.n_tests = s.probe_tests;
    o.seed = s.experiment.seed;
    o.database_split = s.experiment.database_split;
    o.test_split = s.experiment.test_split;
    o.decoding = s.experiment.decoding;
    o.batch = s.experiment.batch;
    o.workers = s.experiment.workers;
    const auto report = shortcut_probe(res, *model, o);
    write_file(s.out / "probe.json", probe_json(report).dump(2) + "\n");
    for (const auto& c : report.conditions)
        out << fmt::format("{:<10} gtc {:.2f}  icc {:.2f}\n", c.condition, c.gtc_cider, c.icc_cider);
    return 0;
}

int cmd_report(const CLI::App* sub, const Flags& f, std::ostream& out) {
    const auto s = resolve(sub, f);
    const auto report = read_report_csv(s.out / "report.csv");
    write_report_files(report, s.out);
    print_means(report, out);
    bool has_mgca = false;
    for (const auto& m : report.means) has_mgca |= m.caption_source.starts_with("mgca:");
    if (has_mgca)
        for (const auto& [store, delta] : mgca_improvement(report))
            out << fmt::format("mgca:{} vs gtc: {:+.2f}\n", store, delta);
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    auto previous = spdlog::default_logger();
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto logger = std::make_shared<spdlog::logger>("ictx", sink);
    logger->set_pattern("%l: %v");
    logger->set_level(spdlog::level::warn);
    spdlog::set_default_logger(logger);

    CLI::App app{"In-context captioning experiment harness"};
    app.require_subcommand(1);
    Flags f;
    auto* validate = app.add_subcommand("validate", "load every store and check cross-references");
    auto* select = app.add_subcommand("select", "print the shot set for one test image");
    auto* assign = app.add_subcommand("assign", "print the in-context sequence for one test image");
    auto* run = app.add_subcommand("run", "run the strategy x caption source x shots grid");
    auto* iterate = app.add_subcommand("iterate", "iterative prompting");
    auto* probe = app.add_subcommand("probe", "short-cut inference probe");
    auto* report = app.add_subcommand("report", "rebuild means.csv and chart_data.json from report.csv");
    for (auto* sub : {validate, select, assign, run, iterate, probe, report}) add_common(sub, f);
    for (auto* sub : {select, assign}) {
        sub->add_option("--n", f.n, "shot count");
        sub->add_option("--test-id", f.test_id, "test image id");
    }
    iterate->add_option("--iterations", f.iterations, "number of iterations (default 5)");
    iterate->add_option("--bootstrap-shots", f.bootstrap_shots, "seed pool size of iteration 1 (default 0)");
    iterate->add_option("--refresh-shots", f.refresh_shots, "RS shots when regenerating database captions");

    int code = 0;
    try {
        app.parse(argc, argv);
        if (*validate) code = cmd_validate(validate, f, out, err);
        else if (*select) code = cmd_select(select, f, out);
        else if (*assign) code = cmd_assign(assign, f, out);
        else if (*run) code = cmd_run(run, f, out, err);
        else if (*iterate) code = cmd_iterate(iterate, f, out);
        else if (*probe) code = cmd_probe(probe, f, out);
        else if (*report) code = cmd_report(report, f, out);
    } catch (const CLI::ParseError& e) {
        code = app.exit(e, out, err);
        if (code != 0) code = 1;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        code = 1;
    } catch (const RuntimeError& e) {
        err << "error: " << e.what() << "\n";
        code = 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        code = 2;
    }
    spdlog::set_default_logger(previous);
    return code;
}

}  // namespace ictx

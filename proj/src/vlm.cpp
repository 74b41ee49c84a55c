#include "ictx/vlm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>

#include <httplib.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

namespace ictx {

void DecodingParams::validate() const {
    if (max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
    if (beam_size < 1) throw ValidationError("beam_size must be >= 1");
}

std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

ImagePayload ImagePayload::from_bytes(std::string_view bytes) { return {Mode::B64, base64_encode(bytes)}; }

GenerationRequest make_request(const InContextSequence& seq, const DecodingParams& params) {
    GenerationRequest req;
    for (const auto& s : seq.shots) req.shots.push_back({ImagePayload::by_id(s.image_id), s.caption});
    req.test_image = ImagePayload::by_id(seq.test_image_id);
    req.params = params;
    return req;
}

namespace {

nlohmann::json payload_json(const ImagePayload& p) {
    return {{p.mode == ImagePayload::Mode::Id ? "id" : "b64", p.value}};
}

ImagePayload payload_from(const nlohmann::json& j, std::string_view where) {
    if (!j.is_object() || j.size() != 1) throw ProtocolError(std::string(where) + " must be {\"id\":..} or {\"b64\":..}");
    if (auto it = j.find("id"); it != j.end() && it->is_string()) return ImagePayload::by_id(it->get<std::string>());
    if (auto it = j.find("b64"); it != j.end() && it->is_string())
        return {ImagePayload::Mode::B64, it->get<std::string>()};
    throw ProtocolError(std::string(where) + " must be {\"id\":..} or {\"b64\":..}");
}

const nlohmann::json& field(const nlohmann::json& j, const char* key, std::string_view where) {
    auto it = j.find(key);
    if (it == j.end()) throw ProtocolError(std::string(where) + " lacks \"" + key + "\"");
    return *it;
}

int positive_int(const nlohmann::json& j, const char* key) {
    const auto& v = field(j, key, "params");
    if (!v.is_number_integer()) throw ProtocolError(std::string("params.") + key + " must be an integer");
    return v.get<int>();
}

}  // namespace

nlohmann::json request_to_json(const GenerationRequest& req) {
    nlohmann::json shots = nlohmann::json::array();
    for (const auto& s : req.shots) shots.push_back({{"image", payload_json(s.image)}, {"caption", s.caption}});
    nlohmann::json params = {{"length_penalty", req.params.length_penalty},
                             {"max_tokens", req.params.max_tokens},
                             {"beam_size", req.params.beam_size}};
    if (req.params.seed) params["seed"] = *req.params.seed;
    return {{"shots", std::move(shots)}, {"test_image", payload_json(req.test_image)}, {"params", std::move(params)}};
}

GenerationRequest request_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ProtocolError("request body must be a JSON object");
    GenerationRequest req;
    const auto& shots = field(j, "shots", "request");
    if (!shots.is_array()) throw ProtocolError("shots must be an array");
    for (const auto& s : shots) {
        if (!s.is_object()) throw ProtocolError("each shot must be an object");
        const auto& caption = field(s, "caption", "shot");
        if (!caption.is_string()) throw ProtocolError("shot caption must be a string");
        req.shots.push_back({payload_from(field(s, "image", "shot"), "shot image"), caption.get<std::string>()});
    }
    req.test_image = payload_from(field(j, "test_image", "request"), "test_image");
    const auto& p = field(j, "params", "request");
    if (!p.is_object()) throw ProtocolError("params must be an object");
    const auto& lp = field(p, "length_penalty", "params");
    if (!lp.is_number()) throw ProtocolError("params.length_penalty must be a number");
    req.params.length_penalty = lp.get<double>();
    req.params.max_tokens = positive_int(p, "max_tokens");
    req.params.beam_size = positive_int(p, "beam_size");
    if (auto it = p.find("seed"); it != p.end() && !it->is_null()) {
        if (!it->is_number_unsigned()) throw ProtocolError("params.seed must be an unsigned integer");
        req.params.seed = it->get<std::uint64_t>();
    }
    try {
        req.params.validate();
    } catch (const ValidationError& e) {
        throw ProtocolError(e.what());
    }
    return req;
}

nlohmann::json response_to_json(const GenerationResponse& resp) {
    nlohmann::json j = {{"caption", resp.caption}, {"model", resp.model}};
    if (resp.latency_ms) j["latency_ms"] = *resp.latency_ms;
    return j;
}

GenerationResponse response_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ProtocolError("response body must be a JSON object");
    GenerationResponse resp;
    const auto& caption = field(j, "caption", "response");
    if (!caption.is_string() || caption.get<std::string>().empty())
        throw ProtocolError("response caption must be a non-empty string");
    const auto& model = field(j, "model", "response");
    if (!model.is_string()) throw ProtocolError("response model must be a string");
    resp.caption = caption.get<std::string>();
    resp.model = model.get<std::string>();
    if (auto it = j.find("latency_ms"); it != j.end() && !it->is_null()) {
        if (!it->is_number()) throw ProtocolError("latency_ms must be a number");
        resp.latency_ms = it->get<double>();
    }
    return resp;
}

nlohmann::json error_json(std::string_view code, std::string_view message) {
    return {{"error", {{"code", code}, {"message", message}}}};
}

// --- stub -----------------------------------------------------------------

StubMode parse_stub_mode(std::string_view text) {
    if (text == "copy-nearest") return StubMode::CopyNearest;
    if (text == "echo-last") return StubMode::EchoLast;
    if (text == "tag-template") return StubMode::TagTemplate;
    throw ValidationError("unknown stub mode '" + std::string(text) + "' (expected copy-nearest|echo-last|tag-template)");
}

std::string_view to_string(StubMode mode) noexcept {
    switch (mode) {
        case StubMode::CopyNearest: return "copy-nearest";
        case StubMode::EchoLast: return "echo-last";
        case StubMode::TagTemplate: return "tag-template";
    }
    return "echo-last";
}

namespace {

double cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw ValidationError("zero-norm embedding in copy-nearest");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::string stub_generate(const InContextSequence& seq, StubMode mode, const Resources& res) {
    switch (mode) {
        case StubMode::EchoLast:
            if (seq.shots.empty()) throw ValidationError("echo-last needs at least one shot");
            return seq.shots.back().caption;
        case StubMode::CopyNearest: {
            if (seq.shots.empty()) throw ValidationError("copy-nearest needs at least one shot");
            const auto& emb = res.require_image_embeddings();
            const auto test = emb.vector_of(seq.test_image_id);
            std::size_t best = 0;
            double best_score = -2.0;
            for (std::size_t i = 0; i < seq.shots.size(); ++i) {
                const double s = cosine(test, emb.vector_of(seq.shots[i].image_id));
                if (s > best_score) {
                    best_score = s;
                    best = i;
                }
            }
            return seq.shots[best].caption;
        }
        case StubMode::TagTemplate: {
            const auto& objects = res.require_tags().at(seq.test_image_id).objects;
            if (objects.empty()) return "a photo";
            std::string out = "a photo of ";
            const std::size_t n = std::min<std::size_t>(3, objects.size());
            for (std::size_t i = 0; i < n; ++i) {
                if (i) out += " and ";
                out += objects[i];
            }
            return out;
        }
    }
    throw ValidationError("unhandled stub mode");
}

StubModel::StubModel(StubMode mode, const Resources& res) : mode_(mode), res_(res) {
    if (mode == StubMode::CopyNearest) res.require_image_embeddings();
    if (mode == StubMode::TagTemplate) res.require_tags();
}

GenerationResponse StubModel::generate(const GenerationRequest& request) {
    InContextSequence seq;
    auto id_of = [](const ImagePayload& p) {
        if (p.mode != ImagePayload::Mode::Id) throw ModelError("unsupported_payload", "the stub resolves images by id only");
        return p.value;
    };
    for (const auto& s : request.shots) seq.shots.push_back({id_of(s.image), s.caption});
    seq.test_image_id = id_of(request.test_image);
    try {
        return {stub_generate(seq, mode_, res_), model_id(), std::nullopt};
    } catch (const ValidationError& e) {
        throw ModelError("stub", e.what());
    }
}

// --- HTTP client ----------------------------------------------------------

HttpModelClient::HttpModelClient(std::string endpoint, std::chrono::milliseconds timeout)
    : endpoint_(std::move(endpoint)), timeout_(timeout) {
    while (!endpoint_.empty() && endpoint_.back() == '/') endpoint_.pop_back();
    if (endpoint_.empty()) throw ValidationError("empty model endpoint");
}

namespace {

httplib::Client make_client(const std::string& endpoint, std::chrono::milliseconds timeout) {
    httplib::Client cli(endpoint);
    if (!cli.is_valid()) throw ValidationError("invalid model endpoint '" + endpoint + "'");
    cli.set_connection_timeout(std::chrono::seconds(5));
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    return cli;
}

nlohmann::json parse_body(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) throw ProtocolError("response body is not JSON");
    return j;
}

[[noreturn]] void raise_http_error(const httplib::Result& res) {
    auto j = nlohmann::json::parse(res->body, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.contains("error") && j["error"].is_object()) {
        const auto& e = j["error"];
        if (e.contains("code") && e["code"].is_string() && e.contains("message") && e["message"].is_string())
            throw ModelError(e["code"].get<std::string>(), e["message"].get<std::string>());
    }
    throw ProtocolError("HTTP " + std::to_string(res->status) + " without an error payload");
}

}  // namespace

std::string HttpModelClient::health() {
    auto cli = make_client(endpoint_, timeout_);
    auto res = cli.Get("/v1/health");
    if (!res) throw TransportError(endpoint_ + "/v1/health: " + httplib::to_string(res.error()));
    if (res->status != 200) raise_http_error(res);
    const auto j = parse_body(res->body);
    if (!j.is_object() || j.value("status", "") != "ok" || !j.contains("model") || !j["model"].is_string())
        throw ProtocolError("health response must be {\"status\":\"ok\",\"model\":str}");
    return j["model"].get<std::string>();
}

std::string HttpModelClient::model_id() {
    if (!model_) model_ = health();
    return *model_;
}

GenerationResponse HttpModelClient::generate(const GenerationRequest& request) {
    auto cli = make_client(endpoint_, timeout_);
    const auto body = request_to_json(request).dump();
    const auto started = std::chrono::steady_clock::now();
    auto res = cli.Post("/v1/generate", body, "application/json");
    if (!res) throw TransportError(endpoint_ + "/v1/generate: " + httplib::to_string(res.error()));
    try {
        if (res->status < 200 || res->status >= 300) raise_http_error(res);
        auto resp = response_from_json(parse_body(res->body));
        if (!resp.latency_ms)
            resp.latency_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        return resp;
    } catch (const ProtocolError& e) {
        spdlog::error("protocol violation from {}: {}; request: {}", endpoint_, e.what(), body.substr(0, 2000));
        throw;
    }
}

// --- server ---------------------------------------------------------------

ProtocolServer::ProtocolServer(CaptionModel& model) : model_(model), server_(std::make_unique<httplib::Server>()) {
    auto send_json = [](httplib::Response& res, int status, const nlohmann::json& j) {
        res.status = status;
        res.set_content(j.dump(), "application/json");
    };
    server_->Get("/v1/health", [this, send_json](const httplib::Request&, httplib::Response& res) {
        try {
            send_json(res, 200, {{"status", "ok"}, {"model", model_.model_id()}});
        } catch (const std::exception& e) {
            send_json(res, 503, error_json("backend", e.what()));
        }
    });
    server_->Post("/v1/generate", [this, send_json](const httplib::Request& req, httplib::Response& res) {
        GenerationRequest parsed;
        try {
            auto j = nlohmann::json::parse(req.body, nullptr, false);
            if (j.is_discarded()) throw ProtocolError("request body is not JSON");
            parsed = request_from_json(j);
        } catch (const ProtocolError& e) {
            send_json(res, 400, error_json("bad_request", e.what()));
            return;
        }
        try {
            send_json(res, 200, response_to_json(model_.generate(parsed)));
        } catch (const ModelError& e) {
            send_json(res, 500, error_json(e.code(), e.what()));
        } catch (const std::exception& e) {
            send_json(res, 500, error_json("backend", e.what()));
        }
    });
}

ProtocolServer::~ProtocolServer() { stop(); }

int ProtocolServer::start(const std::string& host, int port) {
    if (thread_.joinable()) throw RuntimeError("protocol server already running");
    if (port == 0) {
        port_ = server_->bind_to_any_port(host);
    } else {
        if (!server_->bind_to_port(host, port)) port_ = -1;
        else port_ = port;
    }
    if (port_ <= 0) throw RuntimeError("cannot bind protocol server on " + host);
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port_;
}

void ProtocolServer::stop() {
    if (!thread_.joinable()) return;
    server_->stop();
    thread_.join();
}

// --- batching -------------------------------------------------------------

BatchError::BatchError(std::vector<std::optional<GenerationResponse>> partial, std::vector<std::size_t> failed,
                       std::vector<std::string> messages)
    : RuntimeError(std::to_string(failed.size()) + " of " + std::to_string(partial.size()) +
                   " generation requests failed; first at index " + (failed.empty() ? std::string("-") : std::to_string(failed.front())) +
                   ": " + (messages.empty() ? std::string() : messages.front())),
      partial_(std::move(partial)),
      failed_(std::move(failed)),
      messages_(std::move(messages)) {}

namespace {

GenerationResponse generate_with_retry(CaptionModel& model, const GenerationRequest& req, const RetryPolicy& retry) {
    auto backoff = retry.initial_backoff;
    for (int attempt = 1;; ++attempt) {
        try {
            return model.generate(req);
        } catch (const TransportError& e) {
            if (attempt >= retry.attempts) throw;
            spdlog::warn("transport error (attempt {}/{}): {}", attempt, retry.attempts, e.what());
            std::this_thread::sleep_for(backoff);
            backoff = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(backoff.count()) * retry.multiplier));
        }
    }
}

}  // namespace

std::vector<GenerationResponse> batch_generate(CaptionModel& model, std::span<const GenerationRequest> requests,
                                               const BatchOptions& opts) {
    if (opts.max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
    std::vector<std::optional<GenerationResponse>> slots(requests.size());
    std::vector<std::string> errors(requests.size());
    std::vector<char> failed(requests.size(), 0);
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < requests.size(); i = next++) {
            try {
                slots[i] = generate_with_retry(model, requests[i], opts.retry);
            } catch (const std::exception& e) {
                failed[i] = 1;
                errors[i] = e.what();
            }
        }
    };
    const auto threads = std::min<std::size_t>(opts.max_in_flight, requests.size());
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }

    std::vector<std::size_t> failed_idx;
    std::vector<std::string> messages;
    for (std::size_t i = 0; i < requests.size(); ++i)
        if (failed[i]) {
            failed_idx.push_back(i);
            messages.push_back(errors[i]);
        }
    if (!failed_idx.empty()) throw BatchError(std::move(slots), std::move(failed_idx), std::move(messages));
    std::vector<GenerationResponse> out;
    out.reserve(slots.size());
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

}  // namespace ictx

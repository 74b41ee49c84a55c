#pragma once

// Generation contract: a caption model consumes an in-context sequence and
// returns one caption. Backends are reached over a small HTTP+JSON protocol
// (POST /v1/generate, GET /v1/health); a deterministic in-process stub covers
// tests and probes.

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ictx/assign.hpp"
#include "ictx/corpus.hpp"
#include "ictx/error.hpp"

namespace httplib {
class Server;
}

namespace ictx {

struct DecodingParams {
    double length_penalty = -2.0;
    int max_tokens = 20;
    int beam_size = 3;
    std::optional<std::uint64_t> seed;

    /// Throws ValidationError unless max_tokens >= 1 and beam_size >= 1.
    void validate() const;
    bool operator==(const DecodingParams&) const = default;
};

/// An image either named by id (the server resolves it) or shipped inline.
struct ImagePayload {
    enum class Mode { Id, B64 };
    Mode mode = Mode::Id;
    std::string value;

    static ImagePayload by_id(std::string id) { return {Mode::Id, std::move(id)}; }
    static ImagePayload from_bytes(std::string_view bytes);
    bool operator==(const ImagePayload&) const = default;
};

std::string base64_encode(std::string_view bytes);

struct WireShot {
    ImagePayload image;
    std::string caption;
    bool operator==(const WireShot&) const = default;
};

struct GenerationRequest {
    std::vector<WireShot> shots;
    ImagePayload test_image;
    DecodingParams params;
    bool operator==(const GenerationRequest&) const = default;
};

struct GenerationResponse {
    std::string caption;
    std::string model;
    std::optional<double> latency_ms;
    bool operator==(const GenerationResponse&) const = default;
};

/// Id-mode request for a sequence.
GenerationRequest make_request(const InContextSequence& seq, const DecodingParams& params);

nlohmann::json request_to_json(const GenerationRequest& req);
/// Throws ProtocolError on any schema violation.
GenerationRequest request_from_json(const nlohmann::json& j);
nlohmann::json response_to_json(const GenerationResponse& resp);
GenerationResponse response_from_json(const nlohmann::json& j);
nlohmann::json error_json(std::string_view code, std::string_view message);

class CaptionModel {
public:
    virtual ~CaptionModel() = default;
    /// Throws TransportError (retryable), ProtocolError or ModelError.
    virtual GenerationResponse generate(const GenerationRequest& request) = 0;
    virtual std::string model_id() = 0;
};

// --- stub -----------------------------------------------------------------

enum class StubMode { CopyNearest, EchoLast, TagTemplate };

/// copy-nearest | echo-last | tag-template
StubMode parse_stub_mode(std::string_view text);
std::string_view to_string(StubMode mode) noexcept;

/// copy-nearest: caption of the shot whose image is most cosine-similar to the
/// test image (earliest shot on ties). echo-last: last shot's caption.
/// tag-template: "a photo of " + up to 3 sorted object tags joined by " and ",
/// or "a photo" when the test image has no object tags.
std::string stub_generate(const InContextSequence& seq, StubMode mode, const Resources& res);

class StubModel final : public CaptionModel {
public:
    /// Throws ValidationError when the mode's resources are missing.
    StubModel(StubMode mode, const Resources& res);

    GenerationResponse generate(const GenerationRequest& request) override;
    std::string model_id() override { return "stub:" + std::string(to_string(mode_)); }

private:
    StubMode mode_;
    const Resources& res_;
};

// --- HTTP -----------------------------------------------------------------

class HttpModelClient final : public CaptionModel {
public:
    /// endpoint: "http://host:port"
    explicit HttpModelClient(std::string endpoint,
                             std::chrono::milliseconds timeout = std::chrono::seconds(120));

    /// GET /v1/health; returns the advertised model id.
    std::string health();
    GenerationResponse generate(const GenerationRequest& request) override;
    std::string model_id() override;

    const std::string& endpoint() const noexcept { return endpoint_; }

private:
    std::string endpoint_;
    std::chrono::milliseconds timeout_;
    std::optional<std::string> model_;
};

/// Serves any CaptionModel over the wire protocol on a background thread.
class ProtocolServer {
public:
    explicit ProtocolServer(CaptionModel& model);
    ~ProtocolServer();
    ProtocolServer(const ProtocolServer&) = delete;
    ProtocolServer& operator=(const ProtocolServer&) = delete;

    /// Binds host on a free port (port = 0) or the given one, starts serving.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    void stop();
    int port() const noexcept { return port_; }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    CaptionModel& model_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    int port_ = 0;
};

// --- batching -------------------------------------------------------------

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{250};
    double multiplier = 2.0;
};

struct BatchOptions {
    unsigned max_in_flight = 1;
    RetryPolicy retry;
};

class BatchError : public RuntimeError {
public:
    BatchError(std::vector<std::optional<GenerationResponse>> partial, std::vector<std::size_t> failed,
               std::vector<std::string> messages);

    const std::vector<std::optional<GenerationResponse>>& partial() const noexcept { return partial_; }
    const std::vector<std::size_t>& failed() const noexcept { return failed_; }
    const std::vector<std::string>& messages() const noexcept { return messages_; }

private:
    std::vector<std::optional<GenerationResponse>> partial_;
    std::vector<std::size_t> failed_;
    std::vector<std::string> messages_;
};

/// Runs every request with at most max_in_flight concurrent calls. Responses
/// are returned in request order. Transport errors are retried per the policy;
/// anything still failing raises BatchError with the successful responses.
std::vector<GenerationResponse> batch_generate(CaptionModel& model, std::span<const GenerationRequest> requests,
                                               const BatchOptions& opts = {});

}  // namespace ictx

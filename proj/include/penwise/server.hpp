#pragma once

// HTTP front end: POST /v1/suggest, GET /v1/health, GET /v1/models.

#include <memory>
#include <mutex>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "penwise/service.hpp"

namespace penwise {

/// Status code and JSON body for one /v1/suggest call. Kept separate from
/// the socket layer so it can be exercised directly.
struct HttpReply {
    int status = 200;
    nlohmann::json body;
};

inline HttpReply handle_suggest(const SuggestEngine* engine, const std::string& body)
{
    if (engine == nullptr) return {503, {{"error", "models are still loading"}}};
    try {
        const SuggestRequest req = parse_request_text(body, engine->settings().max_candidates);
        return {200, response_to_json(engine->suggest(req))};
    } catch (const RequestError& e) {
        return {400, {{"error", e.what()}, {"field", e.field()}}};
    } catch (const KindUnavailable& e) {
        return {400, {{"error", e.what()}, {"field", "kind"}}};
    } catch (const ValidationError& e) {
        return {400, {{"error", e.what()}, {"field", ""}}};
    } catch (const std::exception& e) {
        return {500, {{"error", e.what()}}};
    }
}

/// Answers 503 on every route until an engine is installed; after that the
/// engine never changes.
class SuggestServer {
  public:
    explicit SuggestServer(std::size_t threads = 4)
    {
        m_http.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
        m_http.Post("/v1/suggest", [this](const httplib::Request& req, httplib::Response& res) {
            auto engine = current();
            reply(res, handle_suggest(engine.get(), req.body));
        });
        m_http.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
            auto engine = current();
            if (!engine) {
                reply(res, {503, {{"status", "loading"}, {"models", nlohmann::json::array()}}});
                return;
            }
            reply(res, {200, {{"status", "ok"}, {"models", engine->model_names()}}});
        });
        m_http.Get("/v1/models", [this](const httplib::Request&, httplib::Response& res) {
            auto engine = current();
            if (!engine) {
                reply(res, {503, {{"error", "models are still loading"}}});
                return;
            }
            reply(res, {200, engine->describe()});
        });
    }

    SuggestServer(const SuggestServer&) = delete;
    SuggestServer& operator=(const SuggestServer&) = delete;

    /// Installs the engine. Calling twice is an error: models are replaced
    /// only by a restart.
    void install(std::shared_ptr<const SuggestEngine> engine)
    {
        std::lock_guard lock(m_mutex);
        if (m_engine) throw InvalidArgument("server: engine already installed");
        m_engine = std::move(engine);
    }

    /// Binds to `port`, or to a free port when it is 0. Returns the port.
    int bind(const std::string& host, int port)
    {
        if (port == 0) {
            const int p = m_http.bind_to_any_port(host);
            if (p < 0) throw IoError("server: cannot bind " + host);
            return p;
        }
        if (!m_http.bind_to_port(host, port)) throw IoError("server: cannot bind " + host + ":" + std::to_string(port));
        return port;
    }

    /// Serves until stop(); blocks the caller.
    void run() { m_http.listen_after_bind(); }
    void wait_until_ready() const { m_http.wait_until_ready(); }
    void stop() { m_http.stop(); }

  private:
    std::shared_ptr<const SuggestEngine> current() const
    {
        std::lock_guard lock(m_mutex);
        return m_engine;
    }

    static void reply(httplib::Response& res, const HttpReply& r)
    {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    }

    httplib::Server m_http;
    mutable std::mutex m_mutex;
    std::shared_ptr<const SuggestEngine> m_engine;
};

}  // namespace penwise

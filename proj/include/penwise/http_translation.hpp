#pragma once

#include <chrono>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "penwise/datapipe.hpp"

namespace penwise {

/// Translation over any HTTP endpoint that accepts POST {text, from, to}
/// and answers {text}. Failed attempts are retried up to `retries` times.
class HttpTranslationClient : public TranslationClient {
  public:
    HttpTranslationClient(std::string host, int port, std::string path = "/translate",
                          std::chrono::milliseconds timeout = std::chrono::milliseconds(5000), int retries = 2)
        : m_host(std::move(host)), m_port(port), m_path(std::move(path)), m_timeout(timeout), m_retries(retries)
    {
        if (retries < 0) {
            throw InvalidArgument("translation: retries must be >= 0");
        }
    }

    std::string translate(const std::string& text, const std::string& from, const std::string& to) const override
    {
        const std::string body = nlohmann::json{{"text", text}, {"from", from}, {"to", to}}.dump();
        std::string last_error = "no attempt made";
        for (int attempt = 0; attempt <= m_retries; ++attempt) {
            httplib::Client cli(m_host, m_port);
            cli.set_connection_timeout(m_timeout);
            cli.set_read_timeout(m_timeout);
            cli.set_write_timeout(m_timeout);
            auto res = cli.Post(m_path, body, "application/json");
            if (!res) {
                last_error = httplib::to_string(res.error());
                continue;
            }
            if (res->status != 200) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            try {
                return nlohmann::json::parse(res->body).at("text").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                last_error = std::string("bad response body: ") + e.what();
            }
        }
        throw TransportError("translation: " + m_host + ":" + std::to_string(m_port) + m_path + " failed after "
                             + std::to_string(m_retries + 1) + " attempts (" + last_error + ")");
    }

  private:
    std::string m_host;
    int m_port;
    std::string m_path;
    std::chrono::milliseconds m_timeout;
    int m_retries;
};

}  // namespace penwise

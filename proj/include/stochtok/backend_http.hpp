// Copyright 2026 The stochtok Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <memory>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "stochtok/common.hpp"
#include "stochtok/harness.hpp"

namespace stochtok {

// Generation server client. POST /generate with the JSON request body
//   {"prompt_token_ids": [...], "max_new_tokens": n,
//    "mode": "greedy"|"sample", "temperature": t, "top_k": k, "seed": s}
// expecting {"text": "...", "token_ids": [...]} back. Any transport or
// payload problem surfaces as BackendError.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(const std::string& base_url, int timeout_seconds = 300)
      : client_(std::make_unique<httplib::Client>(base_url)), url_(base_url) {
    client_->set_connection_timeout(timeout_seconds, 0);
    client_->set_read_timeout(timeout_seconds, 0);
    client_->set_write_timeout(timeout_seconds, 0);
  }

  GenerateResult generate(const GenerateRequest& req) override {
    const std::string body = request_to_json(req).dump();
    const httplib::Result res =
        client_->Post("/generate", body, "application/json");
    if (!res)
      throw BackendError("backend unreachable at " + url_ + ": " +
                         httplib::to_string(res.error()));
    if (res->status != 200)
      throw BackendError("backend returned HTTP " +
                         std::to_string(res->status) + ": " + res->body);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("malformed backend payload: ") +
                         e.what());
    }
    return result_from_json(j);
  }

 private:
  std::unique_ptr<httplib::Client> client_;
  std::string url_;
};

}  // namespace stochtok

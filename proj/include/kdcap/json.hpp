// Copyright 2026 The kdcap Authors.
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

// nlohmann/json, plus the defaulting struct macro for releases before 3.11.

#pragma once

#include <nlohmann/json.hpp>

#ifndef NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT
#define KDCAP_JSON_FROM_WITH_DEFAULT(v1) \
  nlohmann_json_t.v1 = nlohmann_json_j.value(#v1, nlohmann_json_default_obj.v1);
#define NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Type, ...)                                        \
  inline void to_json(nlohmann::json& nlohmann_json_j, const Type& nlohmann_json_t) {                     \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(NLOHMANN_JSON_TO, __VA_ARGS__))                              \
  }                                                                                                       \
  inline void from_json(const nlohmann::json& nlohmann_json_j, Type& nlohmann_json_t) {                   \
    const Type nlohmann_json_default_obj{};                                                               \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(KDCAP_JSON_FROM_WITH_DEFAULT, __VA_ARGS__))                  \
  }
#endif

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

#pragma once

#include "kdcap/common.hpp"
#include "kdcap/tensor.hpp"
#include "kdcap/autograd.hpp"
#include "kdcap/gradcheck.hpp"
#include "kdcap/synthworld.hpp"
#include "kdcap/model.hpp"
#include "kdcap/losses.hpp"
#include "kdcap/decode.hpp"
#include "kdcap/metrics.hpp"
#include "kdcap/optim.hpp"
#include "kdcap/stats.hpp"
#include "kdcap/distill.hpp"
#include "kdcap/profile.hpp"
#include "kdcap/pipeline.hpp"

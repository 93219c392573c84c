// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/version.hpp"

namespace rfwp {

const char* git_head() { return RFWP_GIT_HEAD; }
const char* content_hash() { return RFWP_CONTENT_HASH; }

}  // namespace rfwp

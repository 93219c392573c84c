// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace rfwp {

// Commit the build was configured from, or "unknown".
const char* git_head();
// SHA-1 over the per-file SHA-1s of src/, include/ and tools/ at configure time.
const char* content_hash();

}  // namespace rfwp

// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace thinkv::cli {

//! Entry point shared by the binary and the tests. Returns the process exit
//! code: 0 success, 2 config/input, 3 calibration, 4 out-of-memory,
//! 5 integrity.
int run(const std::vector<std::string>& args);

}  // namespace thinkv::cli

// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace thinkv {

enum class ErrorKind {
  kStructural,    // precondition / shape violation inside the library
  kConfig,        // invalid configuration or malformed input file
  kParse,         // unreadable input (reported with location)
  kCalibration,   // calibration failed to find a usable layer subset
  kOutOfMemory,   // simulated physical block pool exhausted
  kIntegrity,     // internal bookkeeping inconsistency (bad plan, bad run dir)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  // Process exit code for this error family. 0 is success, 1 is reserved for
  // unexpected failures.
  int exit_code() const {
    switch (kind_) {
      case ErrorKind::kStructural:
      case ErrorKind::kConfig:
      case ErrorKind::kParse:
        return 2;
      case ErrorKind::kCalibration:
        return 3;
      case ErrorKind::kOutOfMemory:
        return 4;
      case ErrorKind::kIntegrity:
        return 5;
    }
    return 1;
  }

 private:
  ErrorKind kind_;
};

//! Calibration failure carrying per-layer mode counts (one count per prompt)
//! so the caller can report why no layer qualified.
class CalibrationError : public Error {
 public:
  CalibrationError(const std::string& what,
                   std::map<int, std::vector<int>> mode_counts)
      : Error(ErrorKind::kCalibration, what),
        mode_counts_(std::move(mode_counts)) {}

  const std::map<int, std::vector<int>>& mode_counts_per_layer() const {
    return mode_counts_;
  }

 private:
  std::map<int, std::vector<int>> mode_counts_;
};

}  // namespace thinkv

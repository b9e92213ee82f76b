// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/common.hpp"

#include "thinkv/errors.hpp"

namespace thinkv {

std::string thought_name(ThoughtLabel label, int num_thoughts) {
  if (num_thoughts == 3) {
    switch (label.band) {
      case 0: return "E";
      case 1: return "R";
      case 2: return "T";
      default: break;
    }
  }
  return "B" + std::to_string(label.band);
}

ThoughtLabel thought_from_name(const std::string& name, int num_thoughts) {
  if (num_thoughts == 3) {
    if (name == "E") return kThoughtE;
    if (name == "R") return kThoughtR;
    if (name == "T") return kThoughtT;
  }
  if (!name.empty() && name[0] == 'B') {
    const int band = std::stoi(name.substr(1));
    if (band >= 0 && band < num_thoughts) return ThoughtLabel{band};
  }
  // Bare band index is accepted for any taxonomy.
  try {
    const int band = std::stoi(name);
    if (band >= 0 && band < num_thoughts) return ThoughtLabel{band};
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::kConfig, "unknown thought label '" + name + "' for " +
                                      std::to_string(num_thoughts) +
                                      " categories");
}

int thought_importance(ThoughtLabel label, int num_thoughts) {
  if (num_thoughts == 3) {
    switch (label.band) {
      case 0: return 1;  // E
      case 1: return 2;  // R
      case 2: return 0;  // T
      default: break;
    }
  }
  return num_thoughts - 1 - label.band;
}

bool is_transition(ThoughtLabel label, int num_thoughts) {
  return num_thoughts >= 3 && label.band == num_thoughts - 1;
}

ThoughtLabel prefill_thought(int num_thoughts) {
  return num_thoughts == 3 ? kThoughtR : ThoughtLabel{0};
}

}  // namespace thinkv

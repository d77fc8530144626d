#pragma once

#include <array>
#include <string>

#include "dflow/codebook.hpp"
#include "dflow/errors.hpp"

namespace dflow {

enum class Command { left = 0, straight = 1, right = 2 };

inline constexpr int kNumCommands = 3;

inline std::string to_string(Command c) {
  switch (c) {
    case Command::left: return "left";
    case Command::straight: return "straight";
    case Command::right: return "right";
  }
  return "straight";
}

inline Command command_from_string(const std::string& s) {
  if (s == "left") return Command::left;
  if (s == "straight") return Command::straight;
  if (s == "right") return Command::right;
  throw ValidationError("unknown command '" + s + "'");
}

// Ego state fields as codebook tokens, in this order.
enum EgoField { kEgoX = 0, kEgoY, kEgoHeading, kEgoSpeed, kEgoAccel, kNumEgoFields };

// Conditioning for the planner: navigation command plus tokenized ego state.
struct ContextEncoding {
  Command command = Command::straight;
  std::array<TokenId, kNumEgoFields> ego{};

  void validate(const CodebookSpec& spec) const {
    for (TokenId t : ego) {
      if (t < 0 || t >= spec.size()) throw ValidationError("context: ego token outside codebook");
    }
  }

  bool operator==(const ContextEncoding&) const = default;
};

}  // namespace dflow

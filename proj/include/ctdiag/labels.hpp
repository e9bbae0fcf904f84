#pragma once

#include <optional>
#include <string_view>

namespace ctdiag {

// COVID is the positive class for confusion accounting. The network's output
// is the probability of NON_COVID ("class 1").
enum class Label { kCovid, kNonCovid };

constexpr std::string_view label_name(Label l) noexcept {
  return l == Label::kCovid ? "COVID" : "NON_COVID";
}

constexpr Label other(Label l) noexcept {
  return l == Label::kCovid ? Label::kNonCovid : Label::kCovid;
}

std::optional<Label> parse_label(std::string_view text);

}  // namespace ctdiag

#include "empathrl/emotion.hpp"

#include "empathrl/error.hpp"

namespace empathrl {

namespace {
constexpr std::array<std::string_view, 7> kNames = {
    "anger", "sadness", "depression", "disgust", "fear", "joy", "neutral",
};
}  // namespace

std::string_view to_string(Emotion e) noexcept {
  return kNames[static_cast<std::size_t>(e)];
}

std::string_view to_string(Polarity p) noexcept {
  switch (p) {
    case Polarity::positive:
      return "positive";
    case Polarity::negative:
      return "negative";
    case Polarity::neutral:
      break;
  }
  return "neutral";
}

std::optional<Emotion> try_parse_emotion(std::string_view s) noexcept {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == s) return static_cast<Emotion>(i);
  }
  return std::nullopt;
}

Emotion parse_emotion(std::string_view s) {
  if (auto e = try_parse_emotion(s)) return *e;
  throw InvalidArgument("unknown emotion '" + std::string(s) +
                        "'; expected one of: " + valid_emotion_list());
}

Polarity polarity(Emotion e) noexcept {
  switch (e) {
    case Emotion::joy:
      return Polarity::positive;
    case Emotion::neutral:
      return Polarity::neutral;
    default:
      return Polarity::negative;
  }
}

std::string valid_emotion_list() {
  std::string out;
  for (auto name : kNames) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

}  // namespace empathrl

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace empathrl {

/// The seven emotion categories shared by patient and therapist turns.
enum class Emotion : std::uint8_t {
  anger,
  sadness,
  depression,
  disgust,
  fear,
  joy,
  neutral,
};

inline constexpr std::array<Emotion, 7> kAllEmotions = {
    Emotion::anger, Emotion::sadness, Emotion::depression, Emotion::disgust,
    Emotion::fear,  Emotion::joy,     Emotion::neutral,
};

enum class Polarity : std::uint8_t { positive, negative, neutral };

std::string_view to_string(Emotion e) noexcept;
std::string_view to_string(Polarity p) noexcept;

std::optional<Emotion> try_parse_emotion(std::string_view s) noexcept;

/// Throws InvalidArgument naming the seven valid labels.
Emotion parse_emotion(std::string_view s);

/// joy is positive, neutral is neutral, the remaining five are negative.
Polarity polarity(Emotion e) noexcept;

/// "anger, sadness, ..., neutral" for error messages.
std::string valid_emotion_list();

}  // namespace empathrl

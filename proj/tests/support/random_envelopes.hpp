#pragma once

#include <random>
#include <string>

#include "random_worlds.hpp"
#include "somrs/frp.hpp"

namespace randenv {

using namespace somrs;

inline std::string random_text(std::mt19937& rng) {
  static const std::string alphabet = "abcXYZ019 _-\"\\/\n\tü€";
  std::string s;
  const int n = static_cast<int>(rng() % 12);
  for (int i = 0; i < n; ++i) {
    // Pick whole UTF-8 sequences: the tail holds two multi-byte characters.
    const std::size_t k = rng() % 19;
    if (k == 17) {
      s += "ü";
    } else if (k == 18) {
      s += "€";
    } else {
      s.push_back(alphabet[k]);
    }
  }
  return s;
}

inline double random_price(std::mt19937& rng) {
  switch (rng() % 3) {
    case 0:
      return static_cast<double>(rng() % 100);
    case 1:
      return std::uniform_real_distribution<double>(0, 1e6)(rng);
    default:
      return std::ldexp(static_cast<double>(rng() % 1000 + 1), -static_cast<int>(rng() % 40));
  }
}

inline frp::Formula random_formula(std::mt19937& rng) {
  static auto world = [] {
    std::mt19937 fixed(1);
    return randworld::make_world(fixed, 6);
  }();
  return randworld::make_formula(rng, world.map, 6);
}

inline nlohmann::json random_json(std::mt19937& rng, int depth = 0) {
  switch (rng() % (depth > 2 ? 4 : 6)) {
    case 0:
      return nullptr;
    case 1:
      return static_cast<std::int64_t>(rng() % 2000) - 1000;
    case 2:
      return random_text(rng);
    case 3:
      return rng() % 2 == 0;
    case 4: {
      nlohmann::json a = nlohmann::json::array();
      for (int i = 0, n = static_cast<int>(rng() % 4); i < n; ++i) a.push_back(random_json(rng, depth + 1));
      return a;
    }
    default: {
      nlohmann::json o = nlohmann::json::object();
      for (int i = 0, n = static_cast<int>(rng() % 4); i < n; ++i) o["k" + std::to_string(rng() % 10)] = random_json(rng, depth + 1);
      return o;
    }
  }
}

inline frp::Body random_body(std::mt19937& rng) {
  using namespace frp;
  switch (rng() % 20) {
    case 0: return Arrange{random_formula(rng), random_formula(rng)};
    case 1: return Terms{random_formula(rng), random_price(rng), random_price(rng) + 0.5};
    case 2: return Refuse{random_text(rng)};
    case 3: return Accept{};
    case 4: return Cancel{};
    case 5: {
      Execute e{random_formula(rng), {}};
      for (int i = 0, n = static_cast<int>(rng() % 3); i < n; ++i) e.inputs[random_text(rng)] = random_text(rng);
      return e;
    }
    case 6: return Completed{random_formula(rng)};
    case 7: {
      Failed f;
      if (rng() % 2) f.failure_description = random_formula(rng);
      f.reason = random_text(rng);
      return f;
    }
    case 8: return Stop{};
    case 9: return Compensate{random_formula(rng)};
    case 10: return Compensated{random_formula(rng)};
    case 11: return End{};
    case 12: return Publish{random_json(rng)};
    case 13: return Unpublish{random_text(rng)};
    case 14: {
      Discover d{random_formula(rng), std::nullopt, std::nullopt};
      if (rng() % 2) d.precondition = random_formula(rng);
      if (rng() % 2) d.kind = "physical";
      return d;
    }
    case 15: return GetSnapshot{};
    case 16: return Commit{random_json(rng), rng()};
    case 17: return Subscribe{static_cast<std::uint64_t>(rng()) << 20};
    case 18: return Response{rng() % 2 == 0, random_text(rng), random_text(rng), random_json(rng)};
    default: return MapEvent{rng(), random_json(rng)};
  }
}

inline frp::Envelope random_envelope(std::mt19937& rng) {
  return frp::make_envelope(random_text(rng), random_text(rng), random_text(rng), random_text(rng), random_body(rng));
}

}  // namespace randenv

#include "supermoe/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "supermoe/errors.hpp"

namespace supermoe {

double Rng::normal(double mean, double stddev) {
  // u1 in (0, 1] to keep the log finite.
  double u1 = 1.0 - uniform01();
  double u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

Rng Rng::deserialize(const std::string& text) {
  Rng r;
  std::istringstream is(text);
  is >> r.engine_;
  if (is.fail()) throw CheckpointError("malformed rng state");
  return r;
}

namespace {
// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ (b + 0x9e3779b97f4a7c15ull)); }

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix_seed(mix_seed(a, b), c); }

}  // namespace supermoe

#include "fmtgp/rng.hpp"

#include <cmath>
#include <numbers>

namespace fmtgp {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t RandomStream::mix_seed(std::uint64_t root, std::string_view purpose,
                                     std::uint64_t index) {
  std::uint64_t state = root;
  std::uint64_t a = splitmix64(state);
  state ^= fnv1a(purpose);
  std::uint64_t b = splitmix64(state);
  state ^= index * 0xd1342543de82ef95ULL + 1;
  std::uint64_t c = splitmix64(state);
  return a ^ (b + 0x9e3779b97f4a7c15ULL) ^ (c << 1);
}

RandomStream::RandomStream(std::uint64_t root_seed, std::string_view purpose, std::uint64_t index)
    : stream_seed_(mix_seed(root_seed, purpose, index)), engine_(stream_seed_) {}

double RandomStream::uniform() {
  // 53 high bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RandomStream::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  // u1 in (0, 1] so the log is finite.
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform();
  double radius = std::sqrt(-2.0 * std::log(u1));
  double angle = 2.0 * std::numbers::pi * u2;
  cached_normal_ = radius * std::sin(angle);
  has_cached_normal_ = true;
  return radius * std::cos(angle);
}

Eigen::VectorXd RandomStream::normal_vector(Eigen::Index n) {
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = normal();
  return out;
}

std::uint64_t RandomStream::derive(std::string_view purpose, std::uint64_t index) const {
  return mix_seed(stream_seed_, purpose, index);
}

}  // namespace fmtgp

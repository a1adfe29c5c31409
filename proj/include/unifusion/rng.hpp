#pragma once

#include <cstdint>
#include <string_view>

namespace unifusion {

// Counter-based deterministic generator. Every draw is a pure function of
// (seed, counter), so streams can be checkpointed and resumed by storing
// the counter alone.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : seed_(seed) {}

    // Derives an independent stream from a root seed and a stream name.
    static RngStream keyed(std::uint64_t root, std::string_view name);

    std::uint64_t next_u64();
    double uniform();                      // [0, 1)
    double normal();                       // Box-Muller, consumes 2 uniforms
    int uniform_int(int n);                // [0, n), consumes 1 draw

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace unifusion

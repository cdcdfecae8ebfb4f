// Seeded, scheme-based tensor initialization.
#pragma once

#include <cmath>
#include <stdexcept>

#include "lim/rng.hpp"
#include "lim/tensor.hpp"

namespace lim {

enum class InitScheme { UniformFanIn, Zeros, Ones };

// Deterministic in (shape, seed, scheme). UniformFanIn draws from the
// symmetric uniform with bound sqrt(6 / fan_in) where fan_in = c*h*w,
// i.e. the receptive-field size when the tensor holds conv kernels.
template <typename S>
Tensor4<S> seeded_init(int n, int c, int h, int w, std::uint64_t seed, InitScheme scheme) {
    switch (scheme) {
        case InitScheme::Zeros:
            return Tensor4<S>::zeros(n, c, h, w);
        case InitScheme::Ones:
            return Tensor4<S>::ones(n, c, h, w);
        case InitScheme::UniformFanIn: {
            if (n <= 0 || c <= 0 || h <= 0 || w <= 0) {
                throw std::invalid_argument("seeded_init: uniform-fan-in needs positive extents");
            }
            Tensor4<S> t(n, c, h, w);
            const double fan_in = static_cast<double>(c) * h * w;
            const double bound = std::sqrt(6.0 / fan_in);
            Rng rng(seed);
            for (auto& v : t.data) v = static_cast<S>(rng.uniform(-bound, bound));
            return t;
        }
    }
    throw std::invalid_argument("seeded_init: unknown scheme");
}

}  // namespace lim

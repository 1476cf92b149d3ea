#pragma once

#include <cstdint>

#include "raremem/encoder.hpp"

namespace raremem {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    EncoderParams m;  // first moments, parameter-shaped
    EncoderParams v;  // second moments
    int64_t step = 0;

    static AdamState init(const EncoderParams& params) {
        AdamState s;
        s.m = EncoderParams::zeros_like(params);
        s.v = EncoderParams::zeros_like(params);
        return s;
    }
};

// One bias-corrected Adam step. Deterministic; mutates params and state.
void adam_step(EncoderParams& params, const EncoderGrads& grads, AdamState& state,
               const AdamConfig& config);

}  // namespace raremem

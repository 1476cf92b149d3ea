#pragma once

#include <cstdint>
#include <vector>

#include "raremem/rng.hpp"
#include "raremem/types.hpp"

namespace raremem {

// Window encoder: a token window centered on the output position plus
// sinusoidal absolute-position features, through affine-tanh-affine, then
// L2 normalization into a memory query.

struct EncoderDims {
    int embed_dim = 16;   // e
    int hidden = 256;     // h
    int window = 17;      // W, covers the whole digit block from any in-block position
    int pos_feats = 8;    // P
    int key_size = 64;

    int input_dim() const { return window * embed_dim + pos_feats; }

    bool operator==(const EncoderDims& other) const {
        return embed_dim == other.embed_dim && hidden == other.hidden &&
               window == other.window && pos_feats == other.pos_feats &&
               key_size == other.key_size;
    }
};

struct EncoderParams {
    EncoderDims dims;
    RowMatrixD embed;  // vocab x e
    RowMatrixD w1;     // h x input_dim
    VecD b1;           // h
    RowMatrixD w2;     // key_size x h
    VecD b2;           // key_size

    static EncoderParams init(const EncoderDims& dims, uint64_t seed);
    static EncoderParams zeros_like(const EncoderParams& other);

    void check_finite() const;  // throws on NaN/Inf

    // Elementwise visitors used by the optimizer.
    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        fn(embed);
        fn(w1);
        fn(b1);
        fn(w2);
        fn(b2);
    }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        fn(embed);
        fn(w1);
        fn(b1);
        fn(w2);
        fn(b2);
    }

    bool operator==(const EncoderParams& other) const;
};

using EncoderGrads = EncoderParams;

struct EncodeCache {
    std::vector<int> window_tokens;  // token id per window slot
    VecD input;                      // concatenated embeddings + position features
    VecD hidden;                     // tanh activations
    VecD x;                          // pre-normalization output
    double x_norm = 0.0;
    VecD q;                          // x / |x|
};

// Sinusoidal features of the absolute position (transformer-style pairs of
// sin/cos at geometrically spaced wavelengths).
void position_features(int position, int pos_feats, double* out);

// Encodes the window centered at `position` (padded with A beyond the
// sequence) into a unit query. Throws std::domain_error when |x| underflows.
EncodeCache encode_query(const EncoderParams& params, const std::vector<uint8_t>& tokens,
                         int position);

// Chain rule from d(loss)/d(q) back to every parameter, accumulated into
// `grads` (which must be zeros_like-shaped).
void encode_backward(const EncoderParams& params, const EncodeCache& cache,
                     const VecD& grad_q, EncoderGrads& grads);

}  // namespace raremem

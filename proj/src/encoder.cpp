#include "raremem/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "raremem/synthetic.hpp"

namespace raremem {

EncoderParams EncoderParams::init(const EncoderDims& dims, uint64_t seed) {
    EncoderParams p;
    p.dims = dims;
    Rng rng(derive_seed(seed, 0x656e63 /* "enc" */));

    auto fill_gaussian = [&rng](RowMatrixD& m, double scale) {
        for (int64_t i = 0; i < m.rows(); ++i)
            for (int64_t j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.gaussian();
    };

    p.embed.resize(kVocabSize, dims.embed_dim);
    fill_gaussian(p.embed, 1.0);

    p.w1.resize(dims.hidden, dims.input_dim());
    fill_gaussian(p.w1, 1.0 / std::sqrt(static_cast<double>(dims.input_dim())));
    p.b1 = VecD::Zero(dims.hidden);

    p.w2.resize(dims.key_size, dims.hidden);
    fill_gaussian(p.w2, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
    p.b2 = VecD::Zero(dims.key_size);
    return p;
}

EncoderParams EncoderParams::zeros_like(const EncoderParams& other) {
    EncoderParams p;
    p.dims = other.dims;
    p.embed = RowMatrixD::Zero(other.embed.rows(), other.embed.cols());
    p.w1 = RowMatrixD::Zero(other.w1.rows(), other.w1.cols());
    p.b1 = VecD::Zero(other.b1.size());
    p.w2 = RowMatrixD::Zero(other.w2.rows(), other.w2.cols());
    p.b2 = VecD::Zero(other.b2.size());
    return p;
}

void EncoderParams::check_finite() const {
    bool ok = true;
    for_each_tensor([&ok](const auto& t) { ok = ok && t.allFinite(); });
    if (!ok) throw std::domain_error("EncoderParams: non-finite parameter");
}

bool EncoderParams::operator==(const EncoderParams& other) const {
    return dims == other.dims && embed == other.embed && w1 == other.w1 &&
           b1 == other.b1 && w2 == other.w2 && b2 == other.b2;
}

void position_features(int position, int pos_feats, double* out) {
    const int pairs = pos_feats / 2;
    for (int i = 0; i < pairs; ++i) {
        const double wavelength =
            std::pow(10000.0, static_cast<double>(i) / std::max(1, pairs));
        const double angle = static_cast<double>(position) / wavelength;
        out[2 * i] = std::sin(angle);
        out[2 * i + 1] = std::cos(angle);
    }
    if (pos_feats % 2 == 1)
        out[pos_feats - 1] = std::sin(static_cast<double>(position) / 10000.0);
}

EncodeCache encode_query(const EncoderParams& params, const std::vector<uint8_t>& tokens,
                         int position) {
    const EncoderDims& dims = params.dims;
    if (position < 0 || position >= static_cast<int>(tokens.size()))
        throw std::out_of_range("encode_query: position out of range");

    EncodeCache cache;
    cache.window_tokens.resize(dims.window);
    cache.input.resize(dims.input_dim());

    const int half = dims.window / 2;
    for (int w = 0; w < dims.window; ++w) {
        const int src = position - half + w;
        const uint8_t tok = (src >= 0 && src < static_cast<int>(tokens.size()))
                                ? tokens[src]
                                : kTokenA;  // pad beyond the boundary with A
        cache.window_tokens[w] = tok;
        cache.input.segment(w * dims.embed_dim, dims.embed_dim) = params.embed.row(tok);
    }
    position_features(position, dims.pos_feats,
                      cache.input.data() + dims.window * dims.embed_dim);

    cache.hidden = (params.w1 * cache.input + params.b1).array().tanh();
    cache.x = params.w2 * cache.hidden + params.b2;
    cache.x_norm = cache.x.norm();
    if (cache.x_norm < 1e-12)
        throw std::domain_error("encode_query: |x| is numerically zero");
    cache.q = cache.x / cache.x_norm;
    return cache;
}

void encode_backward(const EncoderParams& params, const EncodeCache& cache,
                     const VecD& grad_q, EncoderGrads& grads) {
    const EncoderDims& dims = params.dims;

    // Through q = x / |x|.
    const VecD grad_x = (grad_q - cache.q.dot(grad_q) * cache.q) / cache.x_norm;

    // Through x = w2 * hidden + b2.
    grads.w2.noalias() += grad_x * cache.hidden.transpose();
    grads.b2 += grad_x;
    const VecD grad_hidden = params.w2.transpose() * grad_x;

    // Through hidden = tanh(w1 * input + b1).
    const VecD grad_z1 =
        grad_hidden.array() * (1.0 - cache.hidden.array().square());
    grads.w1.noalias() += grad_z1 * cache.input.transpose();
    grads.b1 += grad_z1;
    const VecD grad_input = params.w1.transpose() * grad_z1;

    // Scatter window-slot gradients into the embedding rows.
    for (int w = 0; w < dims.window; ++w)
        grads.embed.row(cache.window_tokens[w]) +=
            grad_input.segment(w * dims.embed_dim, dims.embed_dim).transpose();
    // Position features carry no parameters.
}

}  // namespace raremem

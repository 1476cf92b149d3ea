#include "raremem/optimizer.hpp"

#include <cmath>

namespace raremem {

namespace {

template <typename Tensor>
void adam_tensor(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
                 const AdamConfig& cfg, double bias1, double bias2) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v.array().matrix() + (1.0 - cfg.beta2) * grad.array().square().matrix();
    const auto m_hat = m.array() / bias1;
    const auto v_hat = v.array() / bias2;
    param.array() -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
}

}  // namespace

void adam_step(EncoderParams& params, const EncoderGrads& grads, AdamState& state,
               const AdamConfig& config) {
    state.step += 1;
    const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

    adam_tensor(params.embed, grads.embed, state.m.embed, state.v.embed, config, bias1, bias2);
    adam_tensor(params.w1, grads.w1, state.m.w1, state.v.w1, config, bias1, bias2);
    adam_tensor(params.b1, grads.b1, state.m.b1, state.v.b1, config, bias1, bias2);
    adam_tensor(params.w2, grads.w2, state.m.w2, state.v.w2, config, bias1, bias2);
    adam_tensor(params.b2, grads.b2, state.m.b2, state.v.b2, config, bias1, bias2);
}

}  // namespace raremem

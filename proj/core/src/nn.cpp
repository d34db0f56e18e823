#include "coxvae/nn.hpp"

#include <cmath>

namespace coxvae {

Tensor LinearLayer::operator()(const Tensor& x) const {
    Tensor y = matmul(x, transpose(weight));
    if (bias.defined()) y = add_rowvec(y, bias);
    return y;
}

void LinearLayer::collect_params(const std::string& prefix,
                                 std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w", &weight});
    if (bias.defined()) out.push_back({prefix + ".b", &bias});
}

Tensor ResidualBlock::operator()(const Tensor& x) const {
    return add(x, fc2(leaky_relu(fc1(x), slope)));
}

void ResidualBlock::collect_params(const std::string& prefix,
                                   std::vector<ParamRef>& out) {
    fc1.collect_params(prefix + ".fc1", out);
    fc2.collect_params(prefix + ".fc2", out);
}

std::pair<Tensor, Tensor> EncoderNet::forward(const Tensor& x) const {
    if (x.rank() != 2 || x.shape()[1] != pixels())
        throw DimensionError("encoder: expected [Bx" + std::to_string(pixels()) +
                             "] input, got " + shape_to_string(x.shape()));
    Tensor h = leaky_relu(input(x), slope);
    for (const auto& blk : blocks) h = blk(h);
    Tensor mu = mu_head(h);
    Tensor logvar = clamp(logvar_head(h), -10.0, 10.0);
    return {mu, logvar};
}

void EncoderNet::collect_params(const std::string& prefix,
                                std::vector<ParamRef>& out) {
    input.collect_params(prefix + ".in", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect_params(prefix + ".blk" + std::to_string(i), out);
    mu_head.collect_params(prefix + ".mu", out);
    logvar_head.collect_params(prefix + ".logvar", out);
}

Tensor DecoderNet::forward(const Tensor& z) const {
    if (z.rank() != 2 || z.shape()[1] != latent_dim())
        throw DimensionError("decoder: expected [Bx" +
                             std::to_string(latent_dim()) + "] latent, got " +
                             shape_to_string(z.shape()));
    Tensor h = leaky_relu(input(z), slope);
    for (const auto& blk : blocks) h = blk(h);
    return out_head(h);
}

void DecoderNet::collect_params(const std::string& prefix,
                                std::vector<ParamRef>& out) {
    input.collect_params(prefix + ".in", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect_params(prefix + ".blk" + std::to_string(i), out);
    out_head.collect_params(prefix + ".out", out);
}

Tensor glorot_uniform(std::size_t out, std::size_t in, Rng& rng) {
    if (out == 0 || in == 0)
        throw ConfigError("glorot_uniform: layer widths must be positive");
    const double b =
        std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(out * in);
    for (double& x : w) x = rng.uniform(-b, b);
    return Tensor({out, in}, std::move(w));
}

LinearLayer make_linear(std::size_t out, std::size_t in, Rng& rng,
                        bool with_bias) {
    LinearLayer l;
    l.weight = glorot_uniform(out, in, rng);
    if (with_bias) l.bias = Tensor::zeros({out});
    return l;
}

ResidualBlock make_residual_block(std::size_t width, Rng& rng,
                                  bool identity_init) {
    ResidualBlock blk;
    blk.fc1 = make_linear(width, width, rng);
    blk.fc2 = make_linear(width, width, rng);
    if (identity_init) {
        auto w = blk.fc2.weight.values_mut();
        std::fill(w.begin(), w.end(), 0.0);
    }
    return blk;
}

namespace {

constexpr std::size_t kResidualBlocks = 4;

std::vector<ResidualBlock> make_blocks(std::size_t width, Rng& rng,
                                       bool identity_init) {
    std::vector<ResidualBlock> blocks;
    blocks.reserve(kResidualBlocks);
    for (std::size_t i = 0; i < kResidualBlocks; ++i)
        blocks.push_back(make_residual_block(width, rng, identity_init));
    return blocks;
}

} // namespace

EncoderNet make_encoder(std::size_t pixels, std::size_t hidden,
                        std::size_t latent, Rng& rng, bool identity_residuals) {
    if (pixels == 0 || hidden == 0 || latent == 0)
        throw ConfigError("make_encoder: widths must be positive");
    EncoderNet net;
    net.input = make_linear(hidden, pixels, rng);
    net.blocks = make_blocks(hidden, rng, identity_residuals);
    net.mu_head = make_linear(latent, hidden, rng);
    net.logvar_head = make_linear(latent, hidden, rng);
    return net;
}

DecoderNet make_decoder(std::size_t latent, std::size_t hidden,
                        std::size_t pixels, Rng& rng, bool identity_residuals) {
    if (pixels == 0 || hidden == 0 || latent == 0)
        throw ConfigError("make_decoder: widths must be positive");
    DecoderNet net;
    net.input = make_linear(hidden, latent, rng);
    net.blocks = make_blocks(hidden, rng, identity_residuals);
    net.out_head = make_linear(pixels, hidden, rng);
    return net;
}

void AdamOptimizer::step(const std::vector<ParamRef>& params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].tensor->numel(), 0.0);
            v_[i].assign(params[i].tensor->numel(), 0.0);
        }
    }
    if (m_.size() != params.size())
        throw ContractError("AdamOptimizer: parameter list changed size");
    ++t_;
    const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].tensor;
        const auto g = p.grad();
        if (!all_finite(g))
            throw TrainingError("adam_step: non-finite gradient for parameter " +
                                params[i].name);
        auto w = p.values_mut();
        auto& m = m_[i];
        auto& v = v_[i];
        if (m.size() != w.size())
            throw ContractError("AdamOptimizer: moment/parameter size mismatch for " +
                                params[i].name);
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * g[j];
            v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] -= hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.eps);
        }
    }
}

void AdamOptimizer::restore(std::vector<std::vector<double>> m,
                            std::vector<std::vector<double>> v,
                            std::uint64_t t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
}

} // namespace coxvae

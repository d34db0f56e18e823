#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coxvae/rng.hpp"
#include "coxvae/tensor.hpp"

namespace coxvae {

/// Named handle to a parameter tensor owned by a network struct.
struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
};

/// Affine map y = x W^T + b with weight [out x in]. The bias is optional;
/// the Cox head uses a bias-free instance.
struct LinearLayer {
    Tensor weight;
    Tensor bias; // undefined when the layer has no bias

    std::size_t fan_in() const { return weight.shape()[1]; }
    std::size_t fan_out() const { return weight.shape()[0]; }

    Tensor operator()(const Tensor& x) const;

    void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// x + fc2(leaky_relu(fc1(x))); both layers are width x width so the
/// residual addition is well defined.
struct ResidualBlock {
    LinearLayer fc1;
    LinearLayer fc2;
    double slope = 0.01;

    Tensor operator()(const Tensor& x) const;

    void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Input projection, four residual blocks, and two heads sharing the trunk.
/// The log-variance head is clamped to [-10, 10] before use.
struct EncoderNet {
    LinearLayer input;
    std::vector<ResidualBlock> blocks;
    LinearLayer mu_head;
    LinearLayer logvar_head;
    double slope = 0.01;

    std::size_t pixels() const { return input.fan_in(); }
    std::size_t latent_dim() const { return mu_head.fan_out(); }

    std::pair<Tensor, Tensor> forward(const Tensor& x) const; // (mu, logvar)

    void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Latent projection, four residual blocks, per-pixel logit head.
struct DecoderNet {
    LinearLayer input;
    std::vector<ResidualBlock> blocks;
    LinearLayer out_head;
    double slope = 0.01;

    std::size_t latent_dim() const { return input.fan_in(); }
    std::size_t pixels() const { return out_head.fan_out(); }

    Tensor forward(const Tensor& z) const; // logits [B x P]

    void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Glorot-uniform weight matrix [out x in]: entries U(-b, b) with
/// b = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(std::size_t out, std::size_t in, Rng& rng);

LinearLayer make_linear(std::size_t out, std::size_t in, Rng& rng,
                        bool with_bias = true);

/// `identity_init` zero-initializes fc2 so the block is exactly the
/// identity at initialization.
ResidualBlock make_residual_block(std::size_t width, Rng& rng,
                                  bool identity_init = false);

EncoderNet make_encoder(std::size_t pixels, std::size_t hidden,
                        std::size_t latent, Rng& rng,
                        bool identity_residuals = false);

DecoderNet make_decoder(std::size_t latent, std::size_t hidden,
                        std::size_t pixels, Rng& rng,
                        bool identity_residuals = false);

/// Adam with bias correction. Moment buffers are indexed by parameter
/// position, so the parameter list passed to step() must be stable.
class AdamOptimizer {
  public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    AdamOptimizer() = default;
    explicit AdamOptimizer(Hyper h) : hyper_(h) {}

    /// One update. Gradients are read from each parameter's graph node.
    /// A non-finite gradient raises TrainingError naming the parameter.
    void step(const std::vector<ParamRef>& params);

    std::uint64_t step_count() const { return t_; }
    const Hyper& hyper() const { return hyper_; }

    // Checkpoint access: moment buffers in parameter order.
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void restore(std::vector<std::vector<double>> m,
                 std::vector<std::vector<double>> v, std::uint64_t t);

  private:
    Hyper hyper_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace coxvae

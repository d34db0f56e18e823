#pragma once

#include <cstdint>
#include <span>

#include "coxvae/nn.hpp"
#include "coxvae/survstats.hpp"
#include "coxvae/tensor.hpp"

namespace coxvae {

/// Layer widths of the CoxVAE.
struct ModelArch {
    std::size_t pixels = 256;
    std::size_t hidden = 128;
    std::size_t latent = 8;
};

/// Encoder, decoder, and bias-free linear Cox head over the latent space.
struct CoxVae {
    ModelArch arch;
    EncoderNet encoder;
    DecoderNet decoder;
    LinearLayer cox; // [1 x latent], no bias

    static CoxVae init(const ModelArch& arch, std::uint64_t seed);

    std::vector<ParamRef> params();     // all parameters, stable order
    std::vector<ParamRef> vae_params(); // encoder + decoder
    std::vector<ParamRef> cox_params(); // cox head only

    void watch_all(Graph& g);
    void detach_all();
};

/// z = mu + exp(logvar / 2) * eps. Gradients flow to mu and logvar; eps is
/// a constant draw.
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps);

/// Batch mean of 0.5 * sum_d (mu^2 + sigma^2 - 1 - log sigma^2) against the
/// standard-normal prior. Nonnegative.
Tensor kl_divergence(const Tensor& mu, const Tensor& logvar);

/// Bernoulli negative log-likelihood from logits, summed over pixels and
/// averaged over the batch. Computed as softplus(l) - x*l, which is the
/// numerically stable form for any logit magnitude.
Tensor recon_nll(const Tensor& logits, const Tensor& x);

/// recon_nll + beta * kl_divergence (both per-sample means).
Tensor elbo_loss(const Tensor& mu, const Tensor& logvar, const Tensor& logits,
                 const Tensor& x, double beta);

/// One scalar log-hazard per sample: r = z psi^T with a bias-free head.
Tensor cox_head(const LinearLayer& psi, const Tensor& z);

struct CoxPartial {
    Tensor value;      // scalar; an untracked zero when n_events == 0
    int n_events = 0;
};

/// Negative partial Cox log-likelihood, event-count normalized, Breslow
/// convention for ties. Sorts times descending and folds a running
/// max-shifted logsumexp over the growing risk set, so both the value and
/// the gradient cost O(B log B). An all-censored batch yields a flagged
/// zero that must not be backpropagated.
CoxPartial cox_partial_nll(const Tensor& loghazard, std::span<const double> time,
                           std::span<const std::uint8_t> event);

/// tau * elbo + (1 - tau) * cox_nll, tau in [0, 1].
Tensor combined_loss(const Tensor& elbo, const Tensor& cox_nll, double tau);

struct HazardRatioResult {
    double ratio;
    double percent_change;
};

/// exp(weight) and the matching percent change of the hazard rate per unit
/// increase along one latent dimension.
HazardRatioResult hazard_ratio(double weight);

/// Scalar summary of one training step's loss terms.
struct LossReport {
    double total = 0.0;
    double recon_nll = 0.0;
    double kl = 0.0;
    double cox_nll = 0.0;
    int n_events_in_batch = 0;
};

} // namespace coxvae

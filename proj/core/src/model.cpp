#include "coxvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace coxvae {

CoxVae CoxVae::init(const ModelArch& arch, std::uint64_t seed) {
    if (arch.pixels == 0 || arch.hidden == 0 || arch.latent == 0)
        throw ConfigError("CoxVae::init: widths must be positive");
    Rng rng(seed);
    CoxVae m;
    m.arch = arch;
    m.encoder = make_encoder(arch.pixels, arch.hidden, arch.latent, rng);
    m.decoder = make_decoder(arch.latent, arch.hidden, arch.pixels, rng);
    m.cox = make_linear(1, arch.latent, rng, /*with_bias=*/false);
    return m;
}

std::vector<ParamRef> CoxVae::params() {
    std::vector<ParamRef> out = vae_params();
    auto c = cox_params();
    out.insert(out.end(), c.begin(), c.end());
    return out;
}

std::vector<ParamRef> CoxVae::vae_params() {
    std::vector<ParamRef> out;
    encoder.collect_params("enc", out);
    decoder.collect_params("dec", out);
    return out;
}

std::vector<ParamRef> CoxVae::cox_params() {
    std::vector<ParamRef> out;
    cox.collect_params("cox", out);
    return out;
}

void CoxVae::watch_all(Graph& g) {
    for (auto& p : params()) g.watch(*p.tensor);
}

void CoxVae::detach_all() {
    for (auto& p : params()) p.tensor->detach();
}

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps) {
    if (mu.shape() != logvar.shape() || mu.shape() != eps.shape())
        throw DimensionError("reparameterize: mu/logvar/eps shapes disagree: " +
                             shape_to_string(mu.shape()) + ", " +
                             shape_to_string(logvar.shape()) + ", " +
                             shape_to_string(eps.shape()));
    return add(mu, mul(exp(scale(logvar, 0.5)), eps));
}

Tensor kl_divergence(const Tensor& mu, const Tensor& logvar) {
    if (mu.shape() != logvar.shape() || mu.rank() != 2)
        throw DimensionError("kl_divergence: expected matching [Bxd] tensors");
    // per sample: 0.5 * sum_d (mu^2 + exp(logvar) - 1 - logvar)
    Tensor t = add(mul(mu, mu), exp(logvar));
    t = sub(add_scalar(t, -1.0), logvar);
    return mean(scale(sum(t, 1), 0.5));
}

Tensor recon_nll(const Tensor& logits, const Tensor& x) {
    if (logits.shape() != x.shape() || logits.rank() != 2)
        throw DimensionError("recon_nll: expected matching [BxP] tensors, got " +
                             shape_to_string(logits.shape()) + " and " +
                             shape_to_string(x.shape()));
    for (double v : x.values())
        if (!(v >= 0.0 && v <= 1.0))
            throw DomainError("recon_nll: targets must lie in [0,1], got " +
                              std::to_string(v));
    Tensor per_pixel = sub(softplus(logits), mul(x, logits));
    return mean(sum(per_pixel, 1));
}

Tensor elbo_loss(const Tensor& mu, const Tensor& logvar, const Tensor& logits,
                 const Tensor& x, double beta) {
    if (!(beta >= 0.0))
        throw ConfigError("elbo_loss: beta must be nonnegative, got " +
                          std::to_string(beta));
    return add(recon_nll(logits, x), scale(kl_divergence(mu, logvar), beta));
}

Tensor cox_head(const LinearLayer& psi, const Tensor& z) {
    if (psi.bias.defined())
        throw ContractError("cox_head: the Cox head must be bias-free");
    if (z.rank() != 2 || z.shape()[1] != psi.fan_in())
        throw DimensionError("cox_head: expected [Bx" +
                             std::to_string(psi.fan_in()) + "] latent, got " +
                             shape_to_string(z.shape()));
    return reshape(matmul(z, transpose(psi.weight)), {z.shape()[0]});
}

namespace {

/// Running sum of positive terms a_k = d_k * exp(-lse_k), held as
/// s * exp(c) with s kept near unit scale so neither factor overflows.
struct ShiftedSum {
    double s = 0.0;
    double c = 0.0;
    bool empty = true;

    void add(double log_term_scale, double weight) {
        // adds weight * exp(log_term_scale)
        if (empty) {
            c = log_term_scale;
            s = weight;
            empty = false;
            return;
        }
        if (log_term_scale <= c) {
            s += weight * std::exp(log_term_scale - c);
        } else {
            s = s * std::exp(c - log_term_scale) + weight;
            c = log_term_scale;
        }
    }

    /// Returns exp(x) * sum, safe when the true product is moderate.
    double scaled(double x) const {
        if (empty) return 0.0;
        return s * std::exp(x + c);
    }
};

} // namespace

CoxPartial cox_partial_nll(const Tensor& loghazard, std::span<const double> time,
                           std::span<const std::uint8_t> event) {
    if (loghazard.rank() != 1)
        throw DimensionError("cox_partial_nll: log-hazard must be rank-1, got " +
                             shape_to_string(loghazard.shape()));
    const std::size_t n = loghazard.numel();
    if (n == 0 || time.size() != n || event.size() != n)
        throw ContractError("cox_partial_nll: batch size mismatch");
    for (double t : time)
        if (!(t > 0.0))
            throw DomainError("cox_partial_nll: times must be positive");

    int d_total = 0;
    for (auto e : event) d_total += e ? 1 : 0;
    if (d_total == 0) return {Tensor::scalar(0.0), 0};

    // Descending-time order; ties grouped so every tied subject shares the
    // group's full risk set (Breslow).
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (time[a] != time[b]) return time[a] > time[b];
        return a < b;
    });

    const auto r = loghazard.values();
    struct Group {
        double lse;        // log risk-set sum at this time
        int d;             // events in the group
        std::size_t begin; // range into `order`
        std::size_t end;
    };
    std::vector<Group> groups;
    double run_max = -std::numeric_limits<double>::infinity();
    double run_sum = 0.0; // sum of exp(r - run_max) over the risk set so far
    double acc = 0.0;     // sum_i delta_i (r_i - lse_i)
    std::size_t i = 0;
    while (i < n) {
        const double t = time[order[i]];
        const std::size_t begin = i;
        while (i < n && time[order[i]] == t) {
            const double v = r[order[i]];
            if (v <= run_max) {
                run_sum += std::exp(v - run_max);
            } else {
                run_sum = run_sum * std::exp(run_max - v) + 1.0;
                run_max = v;
            }
            ++i;
        }
        const double lse = run_max + std::log(run_sum);
        int d = 0;
        for (std::size_t k = begin; k < i; ++k) {
            if (event[order[k]]) {
                acc += r[order[k]] - lse;
                ++d;
            }
        }
        groups.push_back({lse, d, begin, i});
    }
    const double value = -acc / static_cast<double>(d_total);

    // dL/dr_m = -(1/D) (delta_m - exp(r_m) * sum_{event groups k with
    // t_k <= t_m} d_k / S_k); the inner sum is accumulated group by group
    // in ascending time order, in shifted form to stay finite.
    std::vector<double> r_copy(r.begin(), r.end());
    std::vector<std::uint8_t> ev(event.begin(), event.end());
    auto backward = [order, groups, r_copy, ev, d_total](
                        std::span<const double> out_grad,
                        const std::vector<std::span<double>>& in_grads) {
        if (in_grads[0].empty()) return;
        const double go = out_grad[0];
        const double inv_d = 1.0 / static_cast<double>(d_total);
        ShiftedSum cum;
        for (auto it = groups.rbegin(); it != groups.rend(); ++it) {
            if (it->d > 0) cum.add(-it->lse, static_cast<double>(it->d));
            for (std::size_t k = it->begin; k < it->end; ++k) {
                const std::size_t m = order[k];
                const double delta = ev[m] ? 1.0 : 0.0;
                const double occupancy = cum.scaled(r_copy[m]);
                in_grads[0][m] += go * (-inv_d) * (delta - occupancy);
            }
        }
    };

    Tensor out = custom_op({loghazard}, Shape{}, {value}, backward);
    return {std::move(out), d_total};
}

Tensor combined_loss(const Tensor& elbo, const Tensor& cox_nll, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0))
        throw ConfigError("combined_loss: tau must lie in [0,1], got " +
                          std::to_string(tau));
    return add(scale(elbo, tau), scale(cox_nll, 1.0 - tau));
}

HazardRatioResult hazard_ratio(double weight) {
    if (!std::isfinite(weight))
        throw DomainError("hazard_ratio: weight must be finite");
    const double ratio = std::exp(weight);
    return {ratio, 100.0 * (ratio - 1.0)};
}

} // namespace coxvae

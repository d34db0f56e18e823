#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "coxvae/data.hpp"
#include "coxvae/model.hpp"

namespace coxvae {

struct TrainConfig {
    double tau = 0.2;
    double beta = 1.0;
    double lr_vae = 1e-4;
    double lr_cox = 1e-5;
    std::size_t batch_size = 16;
    std::size_t total_steps = 16000;
    std::size_t latent_dim = 8;
    std::size_t hidden_width = 128;
    std::size_t eval_every = 500;
    bool full_batch_cox = false;
    double val_fraction = 0.2;
    std::uint64_t seed = 42;

    void validate() const;
};

struct HistoryRow {
    std::size_t step = 0;
    double total = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    double cox = 0.0;
    int n_events = 0;
    std::optional<double> val_cindex;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct AdamSnapshot {
    std::uint64_t t = 0;
    std::vector<NamedTensor> m;
    std::vector<NamedTensor> v;
};

/// Epoch-shuffled sampling position; serialized with the RNG state so a
/// resumed run continues mid-epoch bit-exactly.
struct SamplerState {
    std::vector<std::uint32_t> order;
    std::uint64_t cursor = 0;
};

/// Complete training state at one step boundary. Loading a checkpoint and
/// continuing reproduces the uninterrupted run bit-identically.
struct Checkpoint {
    TrainConfig config;
    std::vector<NamedTensor> params;
    AdamSnapshot adam_vae;
    AdamSnapshot adam_cox;
    std::uint64_t step = 0;
    std::string rng_state;
    SamplerState sampler;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds the model from a checkpoint's config and parameter records.
CoxVae model_from_checkpoint(const Checkpoint& ckpt);

struct TrainResult {
    Checkpoint checkpoint; // final, or last-good state on an abort
    std::vector<HistoryRow> history;
    std::optional<std::size_t> aborted_at; // step whose loss went non-finite
};

/// Joint training: one backward pass per step, one Adam on encoder+decoder
/// at lr_vae, a second Adam on the Cox head at lr_cox. All-censored batches
/// skip the Cox optimizer. A non-finite loss aborts with the state of the
/// previous step.
TrainResult train(const TrainConfig& cfg, const Dataset& train_ds,
                  const Dataset& val_ds);

/// Continues a checkpoint up to its config's total_steps. The returned
/// history covers only the resumed steps.
TrainResult resume_training(const Checkpoint& ckpt, const Dataset& train_ds,
                            const Dataset& val_ds);

struct EvalMetrics {
    double cindex = 0.0;
    double ibs = 0.0;
    std::size_t n = 0;
    int n_events = 0;
};

/// Deterministic evaluation: encodes with the posterior mean (no sampling),
/// scores risk with the Cox head, fits the Breslow baseline on
/// `baseline_ds` (the training split), and reports C-index and IBS on
/// `eval_ds`. Metric bounds are asserted here.
EvalMetrics evaluate(const CoxVae& model, const Dataset& eval_ds,
                     const Dataset& baseline_ds);

/// Posterior means [n x d] for a whole dataset, sampling-free.
Tensor encode_mu(const CoxVae& model, const Tensor& images);

/// Cox-head risk score per sample from the posterior mean.
std::vector<double> risk_scores(const CoxVae& model, const Tensor& images);

void write_history_csv(const std::vector<HistoryRow>& history,
                       const std::filesystem::path& path);

} // namespace coxvae

#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "coxvae/rng.hpp"
#include "coxvae/survstats.hpp"
#include "coxvae/tensor.hpp"

namespace coxvae {

/// Parameters of the synthetic organ/tumor image generator.
struct SyntheticConfig {
    std::size_t image_side = 16;
    std::size_t n_samples = 2000;
    int blob_count_min = 0;
    int blob_count_max = 4;
    double blob_radius_min = 1.0; // pixels
    double blob_radius_max = 3.0;
    double hazard_slope = 3.0;        // log-hazard per unit area fraction
    double baseline_rate = 1.0 / 365; // events per day at zero log-hazard
    double censor_rate_target = 0.17;
    std::uint64_t seed = 42;

    void validate() const;
};

/// Images plus survival outcomes. `true_loghazard` is populated by the
/// synthetic generator and empty when the ground truth is unknown.
struct Dataset {
    Tensor images; // [n x P], values in [0, 1]
    SurvivalTable table;
    std::vector<double> true_loghazard;

    std::size_t size() const { return table.size(); }
    std::size_t pixels() const {
        return images.defined() ? images.shape()[1] : 0;
    }
    void validate() const;
};

/// Synthetic survival images: an organ ellipse with 0..4 anti-aliased tumor
/// disks. The true log-hazard is hazard_slope times the tumor-to-organ area
/// fraction; event times are exponential with rate baseline_rate *
/// exp(loghazard), censoring is an independent exponential calibrated by
/// bisection to the target censoring fraction.
Dataset generate_blob_dataset(const SyntheticConfig& cfg);

/// Draws (time, event) outcomes for given log-hazards using the generator's
/// event/censoring scheme. Shared by the blob and digit-label paths.
SurvivalTable draw_survival_outcomes(std::span<const double> loghazard,
                                     double baseline_rate, double censor_target,
                                     Rng& rng);

/// Label-derived hazards for digit images: loghazard = spread *
/// (label - 4.5) / 4.5, monotone in the digit.
SurvivalTable assign_digit_hazards(std::span<const int> labels,
                                   double baseline_rate, double spread,
                                   double censor_target, std::uint64_t seed);

std::vector<double> digit_loghazards(std::span<const int> labels, double spread);

// ---- IDX container (big-endian; images 0x00000803, labels 0x00000801) ----

struct IdxFile {
    std::uint32_t magic = 0;
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> payload;
};

IdxFile load_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxFile& idx);

/// [n x rows*cols] tensor scaled to [0, 1].
Tensor idx_images_to_tensor(const IdxFile& idx);
std::vector<int> idx_labels(const IdxFile& idx);

// ---- dataset directory format --------------------------------------------

/// Writes dir/images.svi (magic "SVIM") and dir/survival.csv.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Deterministic shuffled split into (train, val); both sides nonempty.
std::pair<Dataset, Dataset> split(const Dataset& ds, double val_fraction,
                                  std::uint64_t seed);

} // namespace coxvae

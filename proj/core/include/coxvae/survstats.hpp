#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coxvae/errors.hpp"

namespace coxvae {

/// Right-censored survival data: observed time in days and event indicator
/// (1 = event, 0 = censored).
struct SurvivalTable {
    std::vector<double> time;
    std::vector<std::uint8_t> event;

    std::size_t size() const { return time.size(); }
    std::size_t n_events() const;
    void validate() const;
};

/// Right-continuous piecewise-constant function of time. Evaluation at t
/// returns the value of the last knot <= t; left_limit(t) the value just
/// before t.
class StepFunction {
  public:
    StepFunction() = default;
    StepFunction(double value_before_first, std::vector<double> knots,
                 std::vector<double> values);

    double operator()(double t) const;
    double left_limit(double t) const;

    const std::vector<double>& knots() const { return knots_; }
    const std::vector<double>& step_values() const { return values_; }
    double value_before_first() const { return before_; }

  private:
    double before_ = 0.0;
    std::vector<double> knots_;
    std::vector<double> values_;
};

/// Kaplan-Meier survival estimate: S(t) = prod_{t_k <= t} (1 - d_k / n_k)
/// over distinct event times.
StepFunction kaplan_meier(const SurvivalTable& table);

/// Kaplan-Meier of the censoring distribution (event indicator flipped).
StepFunction censoring_km(const SurvivalTable& table);

/// Breslow cumulative baseline hazard under a fitted log-hazard vector:
/// H0(t) = sum_{event times t_k <= t} d_k / sum_{j: t_j >= t_k} exp(r_j).
StepFunction breslow_baseline(const SurvivalTable& table,
                              std::span<const double> loghazard);

/// Per-subject survival curve S(t) = exp(-H0(t) * exp(r)).
StepFunction survival_curve(const StepFunction& baseline, double loghazard);

/// Harrell's C-index by exact pair enumeration. Comparable pairs are
/// (i, j) with t_i < t_j and delta_i = 1; tied risks count 1/2. Throws
/// MetricError when no pair is comparable.
double concordance_index(const SurvivalTable& table, std::span<const double> risk);

/// Graf's IPCW Brier score at a single evaluation time. `predicted` holds
/// each subject's predicted S(t_eval); `censor_g` the censoring
/// Kaplan-Meier. Subjects censored at or before t_eval contribute zero.
double brier_score(double t_eval, const SurvivalTable& table,
                   std::span<const double> predicted, const StepFunction& censor_g);

/// Trapezoidal integral of the Brier score over `grid`, divided by the
/// grid span. `curves` holds one survival curve per subject.
double integrated_brier(std::span<const double> grid, const SurvivalTable& table,
                        std::span<const StepFunction> curves,
                        const StepFunction& censor_g);

/// Default IBS grid: `points` equally spaced times between the 5th and
/// 95th percentile of observed times.
std::vector<double> default_ibs_grid(const SurvivalTable& table,
                                     std::size_t points = 50);

struct CoxNllValue {
    double value = 0.0;
    int n_events = 0; // 0 flags the all-censored case; value is then 0
};

/// Literal quadratic-time transcription of the negative partial Cox
/// log-likelihood with Breslow tie handling. Test oracle for the fast
/// training-path implementation.
CoxNllValue cox_nll_oracle(std::span<const double> loghazard,
                           const SurvivalTable& table);

} // namespace coxvae

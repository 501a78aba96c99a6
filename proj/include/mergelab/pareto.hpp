#pragma once

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mergelab {

struct Trial {
    bool correct = false;
    std::uint64_t output_tokens = 0;
};

struct EvalRecord {
    std::string model_id;
    std::string method;
    std::optional<double> strength; // absent for parent models
    std::string benchmark;
    std::vector<Trial> trials;
    std::string timestamp;
};

// One record per non-blank line. Throws SchemaViolation naming the line, or
// EmptyInput when the file holds no records. Lines repeating an earlier
// (model_id, benchmark, trial set) are dropped.
std::vector<EvalRecord> ingest_records(const std::filesystem::path& path);
std::vector<EvalRecord> parse_records(std::string_view text);

std::string trial_digest(std::span<const Trial> trials);

// Records sharing (model_id, benchmark) pooled into one, trials concatenated in input order.
std::vector<EvalRecord> pool_records(std::span<const EvalRecord> records);

enum class TokenStat { Mean, Median };

struct SummaryOptions {
    double ci_level = 0.90;
    std::uint64_t bootstrap_n = 10000;
    std::uint64_t seed = 0;
    TokenStat token_stat = TokenStat::Mean;
};

struct ParetoPoint {
    std::string model_id;
    std::string method;
    std::optional<double> strength;
    std::string benchmark;
    double accuracy_mean = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double mean_tokens = 0.0;
    double median_tokens = 0.0;
    double tokens = 0.0; // the token axis: mean or median per SummaryOptions
    std::uint64_t n_trials = 0;
};

/// Accuracy with a percentile-bootstrap interval over trial resamples.
///
/// Each replicate draws n trials with replacement from a seeded mt19937_64;
/// the bounds are the (1-level)/2 and (1+level)/2 empirical quantiles, taking
/// the smallest replicate whose empirical CDF reaches the level.
ParetoPoint summarize(const EvalRecord& record, const SummaryOptions& options = {});

// a dominates b: no worse on both axes, strictly better on at least one.
bool dominates(const ParetoPoint& a, const ParetoPoint& b);

// Non-dominated points sorted by tokens ascending (then accuracy descending, model_id).
std::vector<ParetoPoint> pareto_front(std::span<const ParetoPoint> points);

struct ParetoImprovement {
    ParetoPoint point;
    bool ci_robust = false; // point.ci_low > parent.ci_high
};

std::vector<ParetoImprovement> pareto_improvements(std::span<const ParetoPoint> points, const ParetoPoint& parent);

struct PhaseChangeReport {
    std::string benchmark;
    std::pair<double, double> max_slope_interval;
    double max_slope = 0.0;
    std::pair<double, double> gain_window;
    double total_gain = 0.0; // max accuracy - min accuracy
    std::vector<double> first_differences;
};

// Series must hold at least 3 points with strictly increasing strengths.
// Throws DegenerateInput otherwise and NoTransition for a flat series.
PhaseChangeReport detect_phase_change(std::span<const std::pair<double, double>> series,
                                      const std::string& benchmark = {});

struct ParetoReportOptions {
    SummaryOptions summary;
    std::string parent_id;
};

// Per benchmark: summarized points, the front, improvements over the parent
// and a phase-change report per method with at least three strengths.
nlohmann::json pareto_report(std::span<const EvalRecord> records, const ParetoReportOptions& options);

nlohmann::json to_json(const ParetoPoint& point);
nlohmann::json to_json(const PhaseChangeReport& report);
std::string points_csv(std::span<const ParetoPoint> points);

// Writes pareto_report.json, points.csv and fronts.csv into `out_dir`.
void write_pareto_outputs(const nlohmann::json& report, const std::filesystem::path& out_dir);

} // namespace mergelab

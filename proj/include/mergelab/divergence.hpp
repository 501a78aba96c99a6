#pragma once

#include "mergelab/tensor_store.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mergelab {

struct HistogramBin {
    double left = 0.0;
    double right = 0.0;
    std::uint64_t count = 0;
};

struct TensorDivergence {
    std::string name;
    std::uint64_t numel = 0;
    double relative_l2 = 0.0;
    double max_abs_delta = 0.0;
};

// Parameter-difference statistics of delta = think - direct.
struct DivergenceReport {
    std::vector<HistogramBin> histogram; // symmetric about 0, spans [-max|delta|, +max|delta|]
    double threshold = 0.002;
    std::uint64_t within_threshold = 0;
    double fraction_within_threshold = 0.0; // |delta| <= threshold
    double relative_l2 = 0.0;               // ||delta||_2 / ||direct||_2
    double delta_l2 = 0.0;
    double direct_l2 = 0.0;
    double delta_mean = 0.0;
    double delta_variance = 0.0; // population variance
    double max_abs_delta = 0.0;
    std::uint64_t total_params = 0;
    std::vector<TensorDivergence> per_tensor; // name order
};

struct CurvePoint {
    double quantile = 0.0;
    double cumulative_share = 0.0;
};

// Share of total squared difference carried by the smallest q fraction of
// entries, against the same functional for a zero-mean Gaussian delta.
struct CumulativeCurve {
    std::vector<CurvePoint> points;
    std::vector<CurvePoint> reference_points;
    bool approximate = false; // built from log-domain buckets rather than an exact sort
};

// Gaussian reference share at quantile q. Scale-free, so variance matching
// to the empirical delta does not change it.
double gaussian_sq_share(double q);

// Exact curve from an in-memory sample. Throws DegenerateInput on an all-zero stream.
CumulativeCurve cumulative_sq_curve(std::span<const double> deltas, int grid);

// Streaming form: exact while at most `exact_budget` values have been added,
// then a 4096-bucket log2-domain histogram spanning 64 octaves below max_abs^2.
class SquaredDeltaAccumulator {
public:
    static constexpr int kBuckets = 4096;
    static constexpr double kOctaves = 64.0;

    SquaredDeltaAccumulator(double max_abs, std::uint64_t exact_budget);

    void add(double delta);
    std::uint64_t count() const { return count_; }
    bool bucketed() const { return bucketed_; }
    CumulativeCurve curve(int grid) const;

private:
    void spill();
    int bucket_of(double square) const;

    double log_top_ = 0.0;
    std::uint64_t exact_budget_;
    std::uint64_t count_ = 0;
    bool bucketed_ = false;
    std::vector<double> exact_;
    std::vector<std::uint64_t> bucket_count_;
    std::vector<double> bucket_sum_;
};

struct DivergenceOptions {
    int bins = 2001;
    double threshold = 0.002;
    int curve_grid = 100;
    std::uint64_t exact_curve_budget = std::uint64_t{1} << 22;
    int workers = 1;
};

struct DivergenceAnalysis {
    DivergenceReport report;
    CumulativeCurve curve;
};

// Two streaming passes over name-sorted tensors: range and moments, then the
// histogram and cumulative curve. Per-tensor partials are reduced in name order
// with compensated summation, so results do not depend on worker scheduling.
DivergenceAnalysis analyze_divergence(const Checkpoint& direct, const Checkpoint& think,
                                      const DivergenceOptions& options = {});

DivergenceReport compute_divergence(const Checkpoint& direct, const Checkpoint& think, int bins, double threshold);

struct ProbeEntry {
    double drop_rate = 0.0;
    std::filesystem::path path;
    std::string content_digest;
    std::uint64_t kept = 0;
    std::uint64_t total = 0;
};

struct ProbeOptions {
    std::uint64_t seed = 0;
    DtypePolicy dtype_policy = DtypePolicy::PreserveSource;
    std::uint64_t shard_limit_bytes = std::uint64_t{5} << 30;
    int workers = 1;
};

/// Writes base + dare_process(model - base, p) for every rate under
/// `output_root`/p_<rate>/ and a probe_manifest.json describing the outputs.
/// Evaluating the probed checkpoints is left to an external harness.
std::vector<ProbeEntry> dare_viability_probe(const Checkpoint& model, const Checkpoint& base,
                                             std::span<const double> drop_rates,
                                             const std::filesystem::path& output_root, const ProbeOptions& options);

nlohmann::json to_json(const DivergenceReport& report);
nlohmann::json to_json(const CumulativeCurve& curve);
std::string histogram_csv(const DivergenceReport& report);
std::string curve_csv(const CumulativeCurve& curve);

} // namespace mergelab

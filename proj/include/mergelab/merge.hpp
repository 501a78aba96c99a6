#pragma once

#include "mergelab/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mergelab {

enum class MergeMethod {
    WeightedAverage,
    Slerp,
    Dare,
    Ties,
    Emr,
    Lore,
    Twin,
    TopKReplace,
    TopKDiffAvg,
    GlobalAvgTopKOverride,
};

std::string_view method_name(MergeMethod method);
std::optional<MergeMethod> parse_method(std::string_view name);
std::span<const MergeMethod> all_methods();
bool requires_base(MergeMethod method);

// Whether top-k selections rank entries within each tensor or across the checkpoint.
enum class TopKScope { PerTensor, Global };

struct MergeRecipe {
    MergeMethod method = MergeMethod::WeightedAverage;
    double strength = 0.5;               // lambda, or t for SLERP
    double drop_rate = 0.2;              // DARE drop p, TIES 1-density, TWIN mask rate
    double top_k_fraction = 0.1;         // custom strategies
    double svt_threshold_fraction = 0.1; // LORE, relative to the largest singular value
    int lore_iters = 5;
    std::uint64_t seed = 0;
    double collinearity_eps = 1e-7;
    TopKScope topk_scope = TopKScope::PerTensor;

    // Throws InvalidParameter on out-of-range values.
    void validate() const;
};

template <typename Scalar>
using Vec = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ConstRef = Eigen::Ref<const Vec<Scalar>>;

using TaskVector = Eigen::ArrayXd;

// Elementwise difference in double; exact for float inputs of similar magnitude.
template <typename Scalar>
TaskVector task_vector(const ConstRef<Scalar>& model, const ConstRef<Scalar>& base);

// ---------------------------------------------------------------------------
// Top-k selection.
//
// A cutoff selects every entry with magnitude > threshold, plus the first
// `ties_quota` entries (lowest flat index first) whose magnitude equals it.
// Per-tensor selection derives the cutoff from the tensor itself; global
// selection passes one computed over the whole checkpoint.
struct TopKCutoff {
    double threshold = 0.0;
    std::uint64_t ties_quota = 0;
};

// ceil(fraction * n), at least 1 when fraction > 0 and n > 0.
std::uint64_t top_count(double fraction, std::uint64_t n);

TopKCutoff top_k_cutoff(const Eigen::Ref<const Eigen::ArrayXd>& magnitudes, std::uint64_t count);
Eigen::Array<bool, Eigen::Dynamic, 1> apply_cutoff(const Eigen::Ref<const Eigen::ArrayXd>& magnitudes,
                                                   const TopKCutoff& cutoff);
Eigen::Array<bool, Eigen::Dynamic, 1> top_k_mask(const Eigen::Ref<const Eigen::ArrayXd>& magnitudes,
                                                 std::uint64_t count);

// ---------------------------------------------------------------------------
// Per-tensor strategies. All inputs are aligned flat tensors of equal length;
// a mismatch throws ShapeMismatch.

template <typename Scalar>
Vec<Scalar> weighted_average(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double strength);

struct TensorMergeDiagnostic {
    std::string name;
    double angle_radians = 0.0;
    double dot = 0.0;
    double norm_direct = 0.0;
    double norm_think = 0.0;
    bool collinear_fallback = false;
};

template <typename Scalar>
struct SlerpResult {
    Vec<Scalar> values;
    TensorMergeDiagnostic diagnostic;
};

/// Spherical interpolation of the two tensors viewed as flat vectors.
///
/// Falls back to weighted_average (and sets collinear_fallback) when the
/// normalized dot product is within `collinearity_eps` of +1 or -1, where the
/// geodesic is numerically or mathematically undefined.
template <typename Scalar>
SlerpResult<Scalar> slerp_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double t,
                                double collinearity_eps = 1e-7);

// Keep mask for DARE: entry i survives iff the stream's i-th uniform is >= p.
Eigen::Array<bool, Eigen::Dynamic, 1> dare_mask(Eigen::Index n, double drop_rate, const Philox4x32& stream);
TaskVector dare_apply_mask(const Eigen::Ref<const TaskVector>& delta,
                           const Eigen::Ref<const Eigen::Array<bool, Eigen::Dynamic, 1>>& keep, double drop_rate);
TaskVector dare_process(const Eigen::Ref<const TaskVector>& delta, double drop_rate, const Philox4x32& stream);

template <typename Scalar>
Vec<Scalar> dare_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                       double strength, double drop_rate, const Philox4x32& direct_stream,
                       const Philox4x32& think_stream);

// Trim / elect sign / disjoint merge. A zero weighted vote elects sign 0 and
// leaves the base value untouched.
template <typename Scalar>
Vec<Scalar> ties_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                       double strength, double density, std::optional<TopKCutoff> direct_cutoff = std::nullopt,
                       std::optional<TopKCutoff> think_cutoff = std::nullopt);

// Elect / mask / rescale. The elected sign is the strict sign of the mean delta.
template <typename Scalar>
Vec<Scalar> emr_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                      double strength);

/// Low-rank estimation merge, no base required.
///
/// Alternates between singular value thresholding of each model's offset from
/// a shared estimate and re-estimating that shared part as the mean of the
/// residuals. Tensors of rank >= 2 are viewed as shape[0] x (rest) matrices;
/// rank-0/1 tensors skip thresholding and reduce to linear interpolation.
template <typename Scalar>
Vec<Scalar> lore_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think,
                       std::span<const std::int64_t> shape, double strength, double threshold_fraction, int iters);

// Shared part is base + mean task vector; the exclusive residuals are sparsified
// by magnitude (no rescale) and blended back in.
template <typename Scalar>
Vec<Scalar> twin_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                       double strength, double mask_rate, std::optional<TopKCutoff> direct_cutoff = std::nullopt,
                       std::optional<TopKCutoff> think_cutoff = std::nullopt);

template <typename Scalar>
Vec<Scalar> topk_replace(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double k_fraction,
                         std::optional<TopKCutoff> cutoff = std::nullopt);

template <typename Scalar>
Vec<Scalar> topk_diff_average(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double k_fraction,
                              std::optional<TopKCutoff> cutoff = std::nullopt);

template <typename Scalar>
Vec<Scalar> global_avg_topk_override(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think,
                                     double k_fraction, std::optional<TopKCutoff> cutoff = std::nullopt);

// ---------------------------------------------------------------------------
// Dispatch used by the orchestrator.

// Magnitude arrays ranked by the method's top-k selections (empty for methods
// without one), in the order their cutoffs are passed to merge_tensor.
template <typename Scalar>
std::vector<Eigen::ArrayXd> selection_magnitudes(const MergeRecipe& recipe, const ConstRef<Scalar>& direct,
                                                 const ConstRef<Scalar>& think, const Vec<Scalar>* base);

// Fraction of entries each selection keeps.
std::vector<double> selection_fractions(const MergeRecipe& recipe);

template <typename Scalar>
struct MergeOutput {
    Vec<Scalar> values;
    std::optional<TensorMergeDiagnostic> diagnostic;
};

template <typename Scalar>
MergeOutput<Scalar> merge_tensor(const MergeRecipe& recipe, std::string_view name,
                                 std::span<const std::int64_t> shape, const ConstRef<Scalar>& direct,
                                 const ConstRef<Scalar>& think, const Vec<Scalar>* base,
                                 std::span<const TopKCutoff> cutoffs = {});

} // namespace mergelab

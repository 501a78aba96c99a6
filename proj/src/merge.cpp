#include "mergelab/merge.hpp"

#include "mergelab/error.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

namespace mergelab {

namespace {

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, 1>;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::array kMethods = {
    MergeMethod::WeightedAverage, MergeMethod::Slerp,       MergeMethod::Dare,        MergeMethod::Ties,
    MergeMethod::Emr,             MergeMethod::Lore,        MergeMethod::Twin,        MergeMethod::TopKReplace,
    MergeMethod::TopKDiffAvg,     MergeMethod::GlobalAvgTopKOverride,
};

inline int sign_of(double x) { return (x > 0.0) - (x < 0.0); }

template <typename Scalar>
void require_aligned(const ConstRef<Scalar>& a, const ConstRef<Scalar>& b) {
    if (a.size() != b.size()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "operand lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    }
}

void require_strength(double strength) {
    if (!(strength >= 0.0 && strength <= 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "strength must lie in [0, 1], got " + std::to_string(strength));
    }
}

void require_drop_rate(double p) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "drop rate must lie in [0, 1), got " + std::to_string(p));
    }
}

BoolArray select(const Eigen::ArrayXd& magnitudes, double fraction, const std::optional<TopKCutoff>& cutoff) {
    if (cutoff) return apply_cutoff(magnitudes, *cutoff);
    return top_k_mask(magnitudes, top_count(fraction, static_cast<std::uint64_t>(magnitudes.size())));
}

template <typename Scalar>
Eigen::ArrayXd abs_difference(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think) {
    return (think.template cast<double>() - direct.template cast<double>()).abs();
}

// Singular value thresholding: zero every singular value below fraction * sigma_max.
RowMajorMatrix svt(const RowMajorMatrix& m, double fraction) {
    if (!m.allFinite()) {
        throw Error(ErrorCode::SvdFailure, "non-finite input to singular value thresholding");
    }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) {
        throw Error(ErrorCode::SvdFailure, "SVD did not converge");
    }
    Eigen::VectorXd sigma = svd.singularValues();
    if (sigma.size() == 0 || sigma[0] == 0.0) {
        return RowMajorMatrix::Zero(m.rows(), m.cols());
    }
    const double cut = fraction * sigma[0];
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        if (sigma[i] < cut) sigma[i] = 0.0;
    }
    return svd.matrixU() * sigma.asDiagonal() * svd.matrixV().transpose();
}

} // namespace

std::string_view method_name(MergeMethod method) {
    switch (method) {
        case MergeMethod::WeightedAverage: return "weighted_average";
        case MergeMethod::Slerp: return "slerp";
        case MergeMethod::Dare: return "dare";
        case MergeMethod::Ties: return "ties";
        case MergeMethod::Emr: return "emr";
        case MergeMethod::Lore: return "lore";
        case MergeMethod::Twin: return "twin";
        case MergeMethod::TopKReplace: return "topk_replace";
        case MergeMethod::TopKDiffAvg: return "topk_diff_average";
        case MergeMethod::GlobalAvgTopKOverride: return "global_avg_topk_override";
    }
    return "weighted_average";
}

std::optional<MergeMethod> parse_method(std::string_view name) {
    for (auto m : kMethods) {
        if (method_name(m) == name) return m;
    }
    return std::nullopt;
}

std::span<const MergeMethod> all_methods() { return kMethods; }

bool requires_base(MergeMethod method) {
    return method == MergeMethod::Dare || method == MergeMethod::Ties || method == MergeMethod::Emr ||
           method == MergeMethod::Twin;
}

void MergeRecipe::validate() const {
    require_strength(strength);
    require_drop_rate(drop_rate);
    if (!(top_k_fraction > 0.0 && top_k_fraction <= 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "top_k_fraction must lie in (0, 1]");
    }
    if (!(svt_threshold_fraction > 0.0 && svt_threshold_fraction < 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "svt_threshold_fraction must lie in (0, 1)");
    }
    if (lore_iters < 1) {
        throw Error(ErrorCode::InvalidParameter, "lore_iters must be positive");
    }
    if (!(collinearity_eps >= 0.0 && collinearity_eps < 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "collinearity_eps must lie in [0, 1)");
    }
}

template <typename Scalar>
TaskVector task_vector(const ConstRef<Scalar>& model, const ConstRef<Scalar>& base) {
    require_aligned<Scalar>(model, base);
    return model.template cast<double>() - base.template cast<double>();
}

// ---------------------------------------------------------------------------

std::uint64_t top_count(double fraction, std::uint64_t n) {
    if (n == 0 || fraction <= 0.0) return 0;
    if (fraction >= 1.0) return n;
    // tolerate representation error, e.g. (2/3)*3
    const double raw = std::ceil(fraction * static_cast<double>(n) - 1e-9);
    const auto count = static_cast<std::uint64_t>(std::max(raw, 1.0));
    return std::min(count, n);
}

TopKCutoff top_k_cutoff(const Eigen::Ref<const Eigen::ArrayXd>& magnitudes, std::uint64_t count) {
    const auto n = static_cast<std::uint64_t>(magnitudes.size());
    if (count == 0) return {std::numeric_limits<double>::infinity(), 0};
    if (count >= n) return {-std::numeric_limits<double>::infinity(), 0};

    std::vector<double> sorted(magnitudes.data(), magnitudes.data() + n);
    auto kth = sorted.begin() + static_cast<std::ptrdiff_t>(count - 1);
    std::nth_element(sorted.begin(), kth, sorted.end(), std::greater<>());
    const double threshold = *kth;
    std::uint64_t above = 0;
    for (std::uint64_t i = 0; i < n; ++i) above += magnitudes[static_cast<Eigen::Index>(i)] > threshold;
    return {threshold, count - above};
}

BoolArray apply_cutoff(const Eigen::Ref<const Eigen::ArrayXd>& magnitudes, const TopKCutoff& cutoff) {
    BoolArray keep(magnitudes.size());
    std::uint64_t quota = cutoff.ties_quota;
    for (Eigen::Index i = 0; i < magnitudes.size(); ++i) {
        const double m = magnitudes[i];
        if (m > cutoff.threshold) {
            keep[i] = true;
        } else if (m == cutoff.threshold && quota > 0) {
            keep[i] = true;
            --quota;
        } else {
            keep[i] = false;
        }
    }
    return keep;
}

BoolArray top_k_mask(const Eigen::Ref<const Eigen::ArrayXd>& magnitudes, std::uint64_t count) {
    return apply_cutoff(magnitudes, top_k_cutoff(magnitudes, count));
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Vec<Scalar> weighted_average(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double strength) {
    require_aligned<Scalar>(direct, think);
    require_strength(strength);
    const double wd = 1.0 - strength;
    const double wt = strength;
    return (wd * direct.template cast<double>() + wt * think.template cast<double>()).template cast<Scalar>();
}

template <typename Scalar>
SlerpResult<Scalar> slerp_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double t,
                                double collinearity_eps) {
    require_aligned<Scalar>(direct, think);
    require_strength(t);

    double dot = 0.0, nd = 0.0, nt = 0.0;
    for (Eigen::Index i = 0; i < direct.size(); ++i) {
        const double a = direct[i];
        const double b = think[i];
        dot += a * b;
        nd += a * a;
        nt += b * b;
    }
    SlerpResult<Scalar> result;
    auto& diag = result.diagnostic;
    diag.dot = dot;
    diag.norm_direct = std::sqrt(nd);
    diag.norm_think = std::sqrt(nt);
    if (diag.norm_direct == 0.0 || diag.norm_think == 0.0) {
        throw Error(ErrorCode::ZeroNorm, "SLERP operand has zero norm");
    }
    const double cosine = std::clamp(dot / (diag.norm_direct * diag.norm_think), -1.0, 1.0);
    diag.angle_radians = std::acos(cosine);

    if (cosine >= 1.0 - collinearity_eps || cosine <= -1.0 + collinearity_eps) {
        diag.collinear_fallback = true;
        result.values = weighted_average<Scalar>(direct, think, t);
        return result;
    }
    const double omega = diag.angle_radians;
    const double s = std::sin(omega);
    const double cd = std::sin((1.0 - t) * omega) / s;
    const double ct = std::sin(t * omega) / s;
    result.values = (cd * direct.template cast<double>() + ct * think.template cast<double>()).template cast<Scalar>();
    return result;
}

BoolArray dare_mask(Eigen::Index n, double drop_rate, const Philox4x32& stream) {
    require_drop_rate(drop_rate);
    BoolArray keep(n);
    for (Eigen::Index i = 0; i < n; ++i) keep[i] = stream.uniform(static_cast<std::uint64_t>(i)) >= drop_rate;
    return keep;
}

TaskVector dare_apply_mask(const Eigen::Ref<const TaskVector>& delta, const Eigen::Ref<const BoolArray>& keep,
                           double drop_rate) {
    require_drop_rate(drop_rate);
    if (delta.size() != keep.size()) {
        throw Error(ErrorCode::ShapeMismatch, "mask length differs from delta length");
    }
    const double scale = 1.0 / (1.0 - drop_rate);
    TaskVector out(delta.size());
    for (Eigen::Index i = 0; i < delta.size(); ++i) out[i] = keep[i] ? delta[i] * scale : 0.0;
    return out;
}

TaskVector dare_process(const Eigen::Ref<const TaskVector>& delta, double drop_rate, const Philox4x32& stream) {
    return dare_apply_mask(delta, dare_mask(delta.size(), drop_rate, stream), drop_rate);
}

template <typename Scalar>
Vec<Scalar> dare_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                       double strength, double drop_rate, const Philox4x32& direct_stream,
                       const Philox4x32& think_stream) {
    require_aligned<Scalar>(direct, think);
    require_strength(strength);
    const TaskVector dd = dare_process(task_vector<Scalar>(direct, base), drop_rate, direct_stream);
    const TaskVector dt = dare_process(task_vector<Scalar>(think, base), drop_rate, think_stream);
    const double wd = 1.0 - strength;
    const double wt = strength;
    return (base.template cast<double>() + (wd * dd + wt * dt)).template cast<Scalar>();
}

template <typename Scalar>
Vec<Scalar> ties_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                       double strength, double density, std::optional<TopKCutoff> direct_cutoff,
                       std::optional<TopKCutoff> think_cutoff) {
    require_aligned<Scalar>(direct, think);
    require_strength(strength);
    if (!(density > 0.0 && density <= 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "TIES density must lie in (0, 1]");
    }
    const TaskVector dd = task_vector<Scalar>(direct, base);
    const TaskVector dt = task_vector<Scalar>(think, base);
    const BoolArray keep_d = select(dd.abs(), density, direct_cutoff);
    const BoolArray keep_t = select(dt.abs(), density, think_cutoff);

    const double wd = 1.0 - strength;
    const double wt = strength;
    Vec<Scalar> out(direct.size());
    for (Eigen::Index i = 0; i < direct.size(); ++i) {
        const double vd = keep_d[i] ? dd[i] : 0.0;
        const double vt = keep_t[i] ? dt[i] : 0.0;
        const int elected = sign_of(wd * vd + wt * vt);
        double num = 0.0, den = 0.0;
        if (elected != 0) {
            if (sign_of(vd) == elected) {
                num += wd * vd;
                den += wd;
            }
            if (sign_of(vt) == elected) {
                num += wt * vt;
                den += wt;
            }
        }
        const double merged = den > 0.0 ? num / den : 0.0;
        out[i] = static_cast<Scalar>(static_cast<double>(base[i]) + merged);
    }
    return out;
}

template <typename Scalar>
Vec<Scalar> emr_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                      double strength) {
    require_aligned<Scalar>(direct, think);
    require_strength(strength);
    const TaskVector dd = task_vector<Scalar>(direct, base);
    const TaskVector dt = task_vector<Scalar>(think, base);
    const Eigen::Index n = dd.size();

    Eigen::ArrayXd unified(n);
    Eigen::ArrayXi elected(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int s = sign_of((dd[i] + dt[i]) / 2.0);
        elected[i] = s;
        unified[i] = s * std::max(std::max(0.0, s * dd[i]), std::max(0.0, s * dt[i]));
    }

    // rescale so each reconstruction keeps its task vector's mean magnitude
    auto rescale = [&](const TaskVector& delta) {
        double magnitude = 0.0, masked = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            magnitude += std::abs(delta[i]);
            if (elected[i] != 0 && sign_of(delta[i]) == elected[i]) masked += std::abs(unified[i]);
        }
        return masked > 0.0 ? magnitude / masked : 0.0;
    };
    const double rho_d = rescale(dd);
    const double rho_t = rescale(dt);

    const double wd = 1.0 - strength;
    const double wt = strength;
    Vec<Scalar> out(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int s = elected[i];
        const double rd = (s != 0 && sign_of(dd[i]) == s) ? rho_d * unified[i] : 0.0;
        const double rt = (s != 0 && sign_of(dt[i]) == s) ? rho_t * unified[i] : 0.0;
        out[i] = static_cast<Scalar>(static_cast<double>(base[i]) + (wd * rd + wt * rt));
    }
    return out;
}

template <typename Scalar>
Vec<Scalar> lore_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think,
                       std::span<const std::int64_t> shape, double strength, double threshold_fraction, int iters) {
    require_aligned<Scalar>(direct, think);
    require_strength(strength);
    if (!(threshold_fraction > 0.0 && threshold_fraction < 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "SVT threshold fraction must lie in (0, 1)");
    }
    if (iters < 1) throw Error(ErrorCode::InvalidParameter, "LORE needs at least one iteration");

    const Eigen::ArrayXd d = direct.template cast<double>();
    const Eigen::ArrayXd t = think.template cast<double>();
    if (!d.allFinite() || !t.allFinite()) {
        throw Error(ErrorCode::SvdFailure, "non-finite LORE input");
    }
    Eigen::ArrayXd shared = (d + t) / 2.0;
    Eigen::ArrayXd delta_d = d - shared;
    Eigen::ArrayXd delta_t = t - shared;

    const bool matrix = shape.size() >= 2 && d.size() > 0;
    if (matrix) {
        const Eigen::Index rows = shape[0];
        const Eigen::Index cols = d.size() / rows;
        auto as_matrix = [&](const Eigen::ArrayXd& a) { return Eigen::Map<const RowMajorMatrix>(a.data(), rows, cols); };
        for (int it = 0; it < iters; ++it) {
            const Eigen::ArrayXd offset_d = d - shared;
            const Eigen::ArrayXd offset_t = t - shared;
            const RowMajorMatrix low_d = svt(as_matrix(offset_d), threshold_fraction);
            const RowMajorMatrix low_t = svt(as_matrix(offset_t), threshold_fraction);
            delta_d = Eigen::Map<const Eigen::ArrayXd>(low_d.data(), d.size());
            delta_t = Eigen::Map<const Eigen::ArrayXd>(low_t.data(), d.size());
            shared = ((d - delta_d) + (t - delta_t)) / 2.0;
        }
    }
    const double wd = 1.0 - strength;
    const double wt = strength;
    return (shared + (wd * delta_d + wt * delta_t)).template cast<Scalar>();
}

template <typename Scalar>
Vec<Scalar> twin_merge(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, const ConstRef<Scalar>& base,
                       double strength, double mask_rate, std::optional<TopKCutoff> direct_cutoff,
                       std::optional<TopKCutoff> think_cutoff) {
    require_aligned<Scalar>(direct, think);
    require_strength(strength);
    require_drop_rate(mask_rate);
    const TaskVector dd = task_vector<Scalar>(direct, base);
    const TaskVector dt = task_vector<Scalar>(think, base);
    const Eigen::ArrayXd shared = base.template cast<double>() + (dd + dt) / 2.0;
    const Eigen::ArrayXd vd = direct.template cast<double>() - shared;
    const Eigen::ArrayXd vt = think.template cast<double>() - shared;
    const double keep_fraction = 1.0 - mask_rate;
    const BoolArray keep_d = select(vd.abs(), keep_fraction, direct_cutoff);
    const BoolArray keep_t = select(vt.abs(), keep_fraction, think_cutoff);

    const double wd = 1.0 - strength;
    const double wt = strength;
    Vec<Scalar> out(direct.size());
    for (Eigen::Index i = 0; i < direct.size(); ++i) {
        const double ed = keep_d[i] ? vd[i] : 0.0;
        const double et = keep_t[i] ? vt[i] : 0.0;
        out[i] = static_cast<Scalar>(shared[i] + (wd * ed + wt * et));
    }
    return out;
}

template <typename Scalar>
Vec<Scalar> topk_replace(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double k_fraction,
                         std::optional<TopKCutoff> cutoff) {
    require_aligned<Scalar>(direct, think);
    const BoolArray chosen = select(abs_difference<Scalar>(direct, think), k_fraction, cutoff);
    return chosen.select(think, direct);
}

template <typename Scalar>
Vec<Scalar> topk_diff_average(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think, double k_fraction,
                              std::optional<TopKCutoff> cutoff) {
    require_aligned<Scalar>(direct, think);
    const BoolArray chosen = select(abs_difference<Scalar>(direct, think), k_fraction, cutoff);
    const Vec<Scalar> midpoint =
        ((direct.template cast<double>() + think.template cast<double>()) / 2.0).template cast<Scalar>();
    return chosen.select(midpoint, direct);
}

template <typename Scalar>
Vec<Scalar> global_avg_topk_override(const ConstRef<Scalar>& direct, const ConstRef<Scalar>& think,
                                     double k_fraction, std::optional<TopKCutoff> cutoff) {
    require_aligned<Scalar>(direct, think);
    const BoolArray chosen = select(abs_difference<Scalar>(direct, think), k_fraction, cutoff);
    const Vec<Scalar> midpoint =
        ((direct.template cast<double>() + think.template cast<double>()) / 2.0).template cast<Scalar>();
    return chosen.select(think, midpoint);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
std::vector<Eigen::ArrayXd> selection_magnitudes(const MergeRecipe& recipe, const ConstRef<Scalar>& direct,
                                                 const ConstRef<Scalar>& think, const Vec<Scalar>* base) {
    switch (recipe.method) {
        case MergeMethod::Ties:
            return {task_vector<Scalar>(direct, *base).abs(), task_vector<Scalar>(think, *base).abs()};
        case MergeMethod::Twin: {
            const TaskVector dd = task_vector<Scalar>(direct, *base);
            const TaskVector dt = task_vector<Scalar>(think, *base);
            const Eigen::ArrayXd shared = base->template cast<double>() + (dd + dt) / 2.0;
            return {(direct.template cast<double>() - shared).abs(), (think.template cast<double>() - shared).abs()};
        }
        case MergeMethod::TopKReplace:
        case MergeMethod::TopKDiffAvg:
        case MergeMethod::GlobalAvgTopKOverride:
            return {abs_difference<Scalar>(direct, think)};
        default:
            return {};
    }
}

std::vector<double> selection_fractions(const MergeRecipe& recipe) {
    switch (recipe.method) {
        case MergeMethod::Ties:
        case MergeMethod::Twin:
            return {1.0 - recipe.drop_rate, 1.0 - recipe.drop_rate};
        case MergeMethod::TopKReplace:
        case MergeMethod::TopKDiffAvg:
        case MergeMethod::GlobalAvgTopKOverride:
            return {recipe.top_k_fraction};
        default:
            return {};
    }
}

template <typename Scalar>
MergeOutput<Scalar> merge_tensor(const MergeRecipe& recipe, std::string_view name,
                                 std::span<const std::int64_t> shape, const ConstRef<Scalar>& direct,
                                 const ConstRef<Scalar>& think, const Vec<Scalar>* base,
                                 std::span<const TopKCutoff> cutoffs) {
    if (requires_base(recipe.method) && base == nullptr) {
        throw Error(ErrorCode::BaseRequired, std::string(method_name(recipe.method)) + " needs a base checkpoint");
    }
    if (base != nullptr && base->size() != direct.size()) {
        throw Error(ErrorCode::ShapeMismatch, "base tensor '" + std::string(name) + "' has a different length");
    }
    auto cutoff = [&](std::size_t i) -> std::optional<TopKCutoff> {
        if (i < cutoffs.size()) return cutoffs[i];
        return std::nullopt;
    };

    MergeOutput<Scalar> out;
    const double lam = recipe.strength;
    switch (recipe.method) {
        case MergeMethod::WeightedAverage:
            out.values = weighted_average<Scalar>(direct, think, lam);
            break;
        case MergeMethod::Slerp: {
            auto r = slerp_merge<Scalar>(direct, think, lam, recipe.collinearity_eps);
            r.diagnostic.name = std::string(name);
            out.values = std::move(r.values);
            out.diagnostic = std::move(r.diagnostic);
            break;
        }
        case MergeMethod::Dare: {
            const std::string method(method_name(recipe.method));
            const Philox4x32 sd(stream_key(recipe.seed, method, "direct", name));
            const Philox4x32 st(stream_key(recipe.seed, method, "thinking", name));
            out.values = dare_merge<Scalar>(direct, think, *base, lam, recipe.drop_rate, sd, st);
            break;
        }
        case MergeMethod::Ties:
            out.values = ties_merge<Scalar>(direct, think, *base, lam, 1.0 - recipe.drop_rate, cutoff(0), cutoff(1));
            break;
        case MergeMethod::Emr:
            out.values = emr_merge<Scalar>(direct, think, *base, lam);
            break;
        case MergeMethod::Lore:
            out.values = lore_merge<Scalar>(direct, think, shape, lam, recipe.svt_threshold_fraction, recipe.lore_iters);
            break;
        case MergeMethod::Twin:
            out.values = twin_merge<Scalar>(direct, think, *base, lam, recipe.drop_rate, cutoff(0), cutoff(1));
            break;
        case MergeMethod::TopKReplace:
            out.values = topk_replace<Scalar>(direct, think, recipe.top_k_fraction, cutoff(0));
            break;
        case MergeMethod::TopKDiffAvg:
            out.values = topk_diff_average<Scalar>(direct, think, recipe.top_k_fraction, cutoff(0));
            break;
        case MergeMethod::GlobalAvgTopKOverride:
            out.values = global_avg_topk_override<Scalar>(direct, think, recipe.top_k_fraction, cutoff(0));
            break;
    }
    return out;
}

#define MERGELAB_INSTANTIATE(Scalar)                                                                                 \
    template TaskVector task_vector<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&);                      \
    template Vec<Scalar> weighted_average<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&, double);        \
    template SlerpResult<Scalar> slerp_merge<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&, double,      \
                                                     double);                                                        \
    template Vec<Scalar> dare_merge<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&,                       \
                                            const ConstRef<Scalar>&, double, double, const Philox4x32&,             \
                                            const Philox4x32&);                                                      \
    template Vec<Scalar> ties_merge<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&,                       \
                                            const ConstRef<Scalar>&, double, double, std::optional<TopKCutoff>,     \
                                            std::optional<TopKCutoff>);                                              \
    template Vec<Scalar> emr_merge<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&,                        \
                                           const ConstRef<Scalar>&, double);                                        \
    template Vec<Scalar> lore_merge<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&,                       \
                                            std::span<const std::int64_t>, double, double, int);                    \
    template Vec<Scalar> twin_merge<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&,                       \
                                            const ConstRef<Scalar>&, double, double, std::optional<TopKCutoff>,     \
                                            std::optional<TopKCutoff>);                                              \
    template Vec<Scalar> topk_replace<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&, double,             \
                                              std::optional<TopKCutoff>);                                            \
    template Vec<Scalar> topk_diff_average<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&, double,        \
                                                   std::optional<TopKCutoff>);                                       \
    template Vec<Scalar> global_avg_topk_override<Scalar>(const ConstRef<Scalar>&, const ConstRef<Scalar>&, double, \
                                                          std::optional<TopKCutoff>);                                \
    template std::vector<Eigen::ArrayXd> selection_magnitudes<Scalar>(const MergeRecipe&, const ConstRef<Scalar>&,  \
                                                                      const ConstRef<Scalar>&, const Vec<Scalar>*); \
    template MergeOutput<Scalar> merge_tensor<Scalar>(const MergeRecipe&, std::string_view,                         \
                                                      std::span<const std::int64_t>, const ConstRef<Scalar>&,       \
                                                      const ConstRef<Scalar>&, const Vec<Scalar>*,                  \
                                                      std::span<const TopKCutoff>);

MERGELAB_INSTANTIATE(float)
MERGELAB_INSTANTIATE(double)

#undef MERGELAB_INSTANTIATE

} // namespace mergelab

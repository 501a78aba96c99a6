#include "mergelab/divergence.hpp"

#include "mergelab/digest.hpp"
#include "mergelab/error.hpp"
#include "mergelab/merge.hpp"
#include "mergelab/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace mergelab {

namespace {

// Neumaier compensated summation.
struct CompensatedSum {
    double sum = 0.0;
    double carry = 0.0;

    void add(double x) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x)) carry += (sum - t) + x;
        else carry += (x - t) + sum;
        sum = t;
    }
    void merge(const CompensatedSum& other) {
        add(other.sum);
        add(other.carry);
    }
    double value() const { return sum + carry; }
};

struct TensorPartial {
    CompensatedSum sq_delta;
    CompensatedSum sq_direct;
    CompensatedSum delta;
    std::uint64_t within = 0;
    std::uint64_t numel = 0;
    double max_abs = 0.0;
};

void require_same_layout(const Checkpoint& a, const Checkpoint& b) {
    if (a.tensors().size() != b.tensors().size()) {
        throw Error(ErrorCode::TensorSetMismatch, "tensor counts differ: " + std::to_string(a.tensors().size()) +
                                                      " vs " + std::to_string(b.tensors().size()));
    }
    for (const auto& [name, meta] : a.tensors()) {
        if (!b.contains(name)) {
            throw Error(ErrorCode::TensorSetMismatch, "'" + name + "' missing from " + b.root().string());
        }
        if (b.meta(name).shape != meta.shape) {
            throw Error(ErrorCode::TensorSetMismatch, "'" + name + "' has different shapes");
        }
    }
}

// erf^-1 on [0, 1): closed-form seed refined by Newton steps.
double erf_inverse(double y) {
    if (y <= 0.0) return 0.0;
    constexpr double a = 0.147;
    const double ln = std::log(1.0 - y * y);
    const double first = 2.0 / (std::numbers::pi * a) + ln / 2.0;
    double x = std::sqrt(std::sqrt(first * first - ln / a) - first);
    for (int i = 0; i < 6; ++i) {
        const double err = std::erf(x) - y;
        x -= err / (2.0 / std::sqrt(std::numbers::pi) * std::exp(-x * x));
    }
    return x;
}

std::vector<CurvePoint> reference_curve(int grid) {
    std::vector<CurvePoint> out;
    out.reserve(static_cast<std::size_t>(grid) + 1);
    for (int j = 0; j <= grid; ++j) {
        const double q = static_cast<double>(j) / grid;
        out.push_back({q, gaussian_sq_share(q)});
    }
    return out;
}

std::string rate_label(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "p_%.4f", rate);
    return buf;
}

} // namespace

double gaussian_sq_share(double q) {
    if (q <= 0.0) return 0.0;
    if (q >= 1.0) return 1.0;
    // E[Z^2; |Z| <= z] with P(|Z| <= z) = q, z = sqrt(2) * erfinv(q)
    const double s = erf_inverse(q);
    const double share = q - 2.0 / std::sqrt(std::numbers::pi) * s * std::exp(-s * s);
    return std::clamp(share, 0.0, 1.0);
}

CumulativeCurve cumulative_sq_curve(std::span<const double> deltas, int grid) {
    if (deltas.empty()) throw Error(ErrorCode::EmptyInput, "cumulative curve of an empty stream");
    double max_abs = 0.0;
    for (double d : deltas) max_abs = std::max(max_abs, std::abs(d));
    SquaredDeltaAccumulator acc(max_abs, deltas.size());
    for (double d : deltas) acc.add(d);
    return acc.curve(grid);
}

SquaredDeltaAccumulator::SquaredDeltaAccumulator(double max_abs, std::uint64_t exact_budget)
    : exact_budget_(exact_budget) {
    log_top_ = max_abs > 0.0 ? std::log2(max_abs * max_abs) : 0.0;
}

int SquaredDeltaAccumulator::bucket_of(double square) const {
    if (square <= 0.0) return 0;
    const double pos = (std::log2(square) - (log_top_ - kOctaves)) / kOctaves * kBuckets;
    if (pos < 0.0) return 0;
    return std::min(kBuckets - 1, static_cast<int>(pos));
}

void SquaredDeltaAccumulator::spill() {
    bucketed_ = true;
    bucket_count_.assign(kBuckets, 0);
    bucket_sum_.assign(kBuckets, 0.0);
    for (double sq : exact_) {
        const int b = bucket_of(sq);
        ++bucket_count_[static_cast<std::size_t>(b)];
        bucket_sum_[static_cast<std::size_t>(b)] += sq;
    }
    exact_.clear();
    exact_.shrink_to_fit();
}

void SquaredDeltaAccumulator::add(double delta) {
    const double sq = delta * delta;
    ++count_;
    if (!bucketed_ && count_ > exact_budget_) spill();
    if (bucketed_) {
        const int b = bucket_of(sq);
        ++bucket_count_[static_cast<std::size_t>(b)];
        bucket_sum_[static_cast<std::size_t>(b)] += sq;
    } else {
        exact_.push_back(sq);
    }
}

CumulativeCurve SquaredDeltaAccumulator::curve(int grid) const {
    if (count_ == 0) throw Error(ErrorCode::EmptyInput, "cumulative curve of an empty stream");
    if (grid < 1) throw Error(ErrorCode::InvalidParameter, "curve grid must be positive");

    CumulativeCurve out;
    out.approximate = bucketed_;
    out.reference_points = reference_curve(grid);
    out.points.reserve(static_cast<std::size_t>(grid) + 1);

    // prefix(c): sum of the c smallest squares
    std::vector<double> cumulative;
    double total = 0.0;
    std::vector<double> sorted;
    if (!bucketed_) {
        sorted = exact_;
        std::sort(sorted.begin(), sorted.end());
        cumulative.resize(sorted.size() + 1, 0.0);
        CompensatedSum run;
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            run.add(sorted[i]);
            cumulative[i + 1] = run.value();
        }
        total = cumulative.back();
    } else {
        CompensatedSum run;
        for (double s : bucket_sum_) run.add(s);
        total = run.value();
    }
    if (total <= 0.0) {
        throw Error(ErrorCode::DegenerateInput, "all deltas are zero; the cumulative share is undefined");
    }

    auto prefix_bucketed = [&](std::uint64_t c) {
        CompensatedSum run;
        std::uint64_t seen = 0;
        for (int b = 0; b < kBuckets && seen < c; ++b) {
            const auto n = bucket_count_[static_cast<std::size_t>(b)];
            if (n == 0) continue;
            if (seen + n <= c) {
                run.add(bucket_sum_[static_cast<std::size_t>(b)]);
                seen += n;
            } else {
                // partial bucket: members assumed equal to the bucket mean
                run.add(bucket_sum_[static_cast<std::size_t>(b)] * static_cast<double>(c - seen) / n);
                seen = c;
            }
        }
        return run.value();
    };

    for (int j = 0; j <= grid; ++j) {
        const double q = static_cast<double>(j) / grid;
        const std::uint64_t c = count_ * static_cast<std::uint64_t>(j) / static_cast<std::uint64_t>(grid);
        double share = 0.0;
        if (j == grid) share = 1.0;
        else if (!bucketed_) share = cumulative[c] / total;
        else share = prefix_bucketed(c) / total;
        share = std::clamp(share, 0.0, 1.0);
        if (!out.points.empty()) share = std::max(share, out.points.back().cumulative_share);
        out.points.push_back({q, share});
    }
    return out;
}

DivergenceAnalysis analyze_divergence(const Checkpoint& direct, const Checkpoint& think,
                                      const DivergenceOptions& options) {
    if (options.bins < 1) throw Error(ErrorCode::InvalidParameter, "histogram needs at least one bin");
    if (!(options.threshold >= 0.0)) throw Error(ErrorCode::InvalidParameter, "threshold must be non-negative");
    require_same_layout(direct, think);

    const auto names = direct.names();
    std::vector<TensorPartial> partials(names.size());

    parallel_for(names.size(), options.workers, [&](std::size_t i) {
        const auto d = load_tensor(direct, names[i]);
        const auto t = load_tensor(think, names[i]);
        TensorPartial& p = partials[i];
        p.numel = static_cast<std::uint64_t>(d.values.size());
        for (Eigen::Index k = 0; k < d.values.size(); ++k) {
            const double a = d.values[k];
            const double delta = static_cast<double>(t.values[k]) - a;
            p.sq_delta.add(delta * delta);
            p.sq_direct.add(a * a);
            p.delta.add(delta);
            p.within += std::abs(delta) <= options.threshold;
            p.max_abs = std::max(p.max_abs, std::abs(delta));
        }
    });

    DivergenceAnalysis analysis;
    DivergenceReport& report = analysis.report;
    report.threshold = options.threshold;
    CompensatedSum sq_delta, sq_direct, sum_delta;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto& p = partials[i];
        sq_delta.merge(p.sq_delta);
        sq_direct.merge(p.sq_direct);
        sum_delta.merge(p.delta);
        report.within_threshold += p.within;
        report.total_params += p.numel;
        report.max_abs_delta = std::max(report.max_abs_delta, p.max_abs);
        const double tensor_direct = std::sqrt(p.sq_direct.value());
        report.per_tensor.push_back({names[i], p.numel,
                                     tensor_direct > 0.0 ? std::sqrt(p.sq_delta.value()) / tensor_direct : 0.0,
                                     p.max_abs});
    }
    if (report.total_params == 0) throw Error(ErrorCode::EmptyInput, "checkpoints hold no parameters");
    report.delta_l2 = std::sqrt(sq_delta.value());
    report.direct_l2 = std::sqrt(sq_direct.value());
    if (report.direct_l2 == 0.0) {
        throw Error(ErrorCode::DegenerateInput, "direct checkpoint has zero norm");
    }
    const double n = static_cast<double>(report.total_params);
    report.relative_l2 = report.delta_l2 / report.direct_l2;
    report.fraction_within_threshold = static_cast<double>(report.within_threshold) / n;
    report.delta_mean = sum_delta.value() / n;
    report.delta_variance = std::max(0.0, sq_delta.value() / n - report.delta_mean * report.delta_mean);

    // second pass: histogram and squared-delta curve, sequential in name order
    double half = report.max_abs_delta;
    if (half == 0.0) half = options.threshold > 0.0 ? options.threshold : 1.0;
    const double width = 2.0 * half / options.bins;
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(options.bins), 0);
    SquaredDeltaAccumulator acc(report.max_abs_delta, options.exact_curve_budget);
    for (const auto& name : names) {
        const auto d = load_tensor(direct, name);
        const auto t = load_tensor(think, name);
        for (Eigen::Index k = 0; k < d.values.size(); ++k) {
            const double delta = static_cast<double>(t.values[k]) - static_cast<double>(d.values[k]);
            auto bin = static_cast<long long>(std::floor((delta + half) / width));
            bin = std::clamp<long long>(bin, 0, options.bins - 1);
            ++counts[static_cast<std::size_t>(bin)];
            acc.add(delta);
        }
    }
    report.histogram.reserve(counts.size());
    for (int b = 0; b < options.bins; ++b) {
        report.histogram.push_back({-half + b * width, -half + (b + 1) * width, counts[static_cast<std::size_t>(b)]});
    }
    if (report.max_abs_delta > 0.0) {
        analysis.curve = acc.curve(options.curve_grid);
    }
    return analysis;
}

DivergenceReport compute_divergence(const Checkpoint& direct, const Checkpoint& think, int bins, double threshold) {
    DivergenceOptions options;
    options.bins = bins;
    options.threshold = threshold;
    return analyze_divergence(direct, think, options).report;
}

std::vector<ProbeEntry> dare_viability_probe(const Checkpoint& model, const Checkpoint& base,
                                             std::span<const double> drop_rates,
                                             const std::filesystem::path& output_root, const ProbeOptions& options) {
    require_same_layout(model, base);
    for (double p : drop_rates) {
        if (!(p >= 0.0 && p < 1.0)) {
            throw Error(ErrorCode::InvalidParameter, "drop rate must lie in [0, 1), got " + std::to_string(p));
        }
    }
    const auto names = model.names();
    const std::string role(role_name(model.role()));
    std::vector<ProbeEntry> entries;

    for (double p : drop_rates) {
        std::vector<TensorSpec> layout;
        for (const auto& name : names) {
            const auto& meta = model.meta(name);
            layout.push_back({name, options.dtype_policy == DtypePolicy::ForceF32 ? Dtype::F32 : meta.dtype,
                              meta.shape});
        }
        ProbeEntry entry;
        entry.drop_rate = p;
        entry.path = output_root / rate_label(p);
        std::filesystem::remove_all(entry.path);

        CheckpointWriter writer(entry.path, std::move(layout), options.shard_limit_bytes,
                                {{"probe_drop_rate", std::to_string(p)}});
        std::vector<std::uint64_t> kept(names.size(), 0);
        parallel_for(names.size(), options.workers, [&](std::size_t i) {
            const auto m = load_tensor(model, names[i]);
            const auto b = load_tensor(base, names[i]);
            const Philox4x32 stream(stream_key(options.seed, "probe-dare", role, names[i]));
            const TaskVector delta = task_vector<float>(m.values, b.values);
            const auto keep = dare_mask(delta.size(), p, stream);
            kept[i] = static_cast<std::uint64_t>(keep.count());
            const TaskVector sparse = dare_apply_mask(delta, keep, p);
            const Eigen::ArrayXf out = (b.values.cast<double>() + sparse).cast<float>();
            writer.write(names[i], out);
        });
        writer.finish(Role::Merged);
        for (std::size_t i = 0; i < names.size(); ++i) {
            entry.kept += kept[i];
            entry.total += model.meta(names[i]).numel();
        }
        entry.content_digest = checkpoint_digest(entry.path);
        entries.push_back(std::move(entry));
    }

    nlohmann::json manifest = {{"model", model.root().string()},
                               {"base", base.root().string()},
                               {"seed", options.seed},
                               {"entries", nlohmann::json::array()}};
    for (const auto& e : entries) {
        manifest["entries"].push_back({{"drop_rate", e.drop_rate},
                                       {"output_path", e.path.string()},
                                       {"content_digest", e.content_digest},
                                       {"kept", e.kept},
                                       {"total", e.total}});
    }
    std::filesystem::create_directories(output_root);
    std::ofstream(output_root / "probe_manifest.json") << manifest.dump(2) << '\n';
    return entries;
}

nlohmann::json to_json(const DivergenceReport& report) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& b : report.histogram) hist.push_back({b.left, b.right, b.count});
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : report.per_tensor) {
        tensors.push_back({{"name", t.name}, {"numel", t.numel}, {"relative_l2", t.relative_l2},
                           {"max_abs_delta", t.max_abs_delta}});
    }
    return {{"total_params", report.total_params},
            {"relative_l2", report.relative_l2},
            {"relative_l2_percent", 100.0 * report.relative_l2},
            {"delta_l2", report.delta_l2},
            {"direct_l2", report.direct_l2},
            {"threshold", report.threshold},
            {"within_threshold", report.within_threshold},
            {"fraction_within_threshold", report.fraction_within_threshold},
            {"delta_mean", report.delta_mean},
            {"delta_variance", report.delta_variance},
            {"max_abs_delta", report.max_abs_delta},
            {"histogram", hist},
            {"per_tensor", tensors}};
}

nlohmann::json to_json(const CumulativeCurve& curve) {
    nlohmann::json pts = nlohmann::json::array();
    for (std::size_t i = 0; i < curve.points.size(); ++i) {
        pts.push_back({curve.points[i].quantile, curve.points[i].cumulative_share,
                       curve.reference_points[i].cumulative_share});
    }
    return {{"approximate", curve.approximate}, {"columns", {"quantile", "share", "gaussian_reference"}},
            {"points", pts}};
}

std::string histogram_csv(const DivergenceReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "bin_left,bin_right,count\n";
    for (const auto& b : report.histogram) out << b.left << ',' << b.right << ',' << b.count << '\n';
    return out.str();
}

std::string curve_csv(const CumulativeCurve& curve) {
    std::ostringstream out;
    out.precision(17);
    out << "quantile,share,gaussian_reference\n";
    for (std::size_t i = 0; i < curve.points.size(); ++i) {
        out << curve.points[i].quantile << ',' << curve.points[i].cumulative_share << ','
            << curve.reference_points[i].cumulative_share << '\n';
    }
    return out.str();
}

} // namespace mergelab

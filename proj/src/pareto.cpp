#include "mergelab/pareto.hpp"

#include "mergelab/digest.hpp"
#include "mergelab/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

namespace mergelab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void line_error(std::size_t line, const std::string& what) {
    throw Error(ErrorCode::SchemaViolation, "line " + std::to_string(line) + ": " + what);
}

std::string require_string(const json& obj, const char* key, std::size_t line) {
    if (!obj.contains(key)) line_error(line, std::string("missing '") + key + "'");
    const auto& v = obj.at(key);
    if (!v.is_string() || v.get<std::string>().empty()) line_error(line, std::string("'") + key + "' must be a non-empty string");
    return v.get<std::string>();
}

EvalRecord parse_record(const json& doc, std::size_t line) {
    if (!doc.is_object()) line_error(line, "record must be a JSON object");
    EvalRecord r;
    r.model_id = require_string(doc, "model_id", line);
    r.method = require_string(doc, "method", line);
    r.benchmark = require_string(doc, "benchmark", line);
    if (doc.contains("strength") && !doc.at("strength").is_null()) {
        const auto& s = doc.at("strength");
        if (!s.is_number()) line_error(line, "'strength' must be a number");
        const double v = s.get<double>();
        if (!(v >= 0.0 && v <= 1.0)) line_error(line, "strength " + std::to_string(v) + " lies outside [0, 1]");
        r.strength = v;
    }
    if (doc.contains("timestamp") && !doc.at("timestamp").is_null()) {
        if (!doc.at("timestamp").is_string()) line_error(line, "'timestamp' must be a string");
        r.timestamp = doc.at("timestamp").get<std::string>();
    }
    if (!doc.contains("trials") || !doc.at("trials").is_array()) line_error(line, "'trials' must be an array");
    const auto& trials = doc.at("trials");
    if (trials.empty()) line_error(line, "'trials' must not be empty");
    for (std::size_t i = 0; i < trials.size(); ++i) {
        const auto& t = trials[i];
        const std::string where = "trials[" + std::to_string(i) + "]";
        if (!t.is_object()) line_error(line, where + " must be an object");
        if (!t.contains("correct") || !t.at("correct").is_boolean()) line_error(line, where + ".correct must be a boolean");
        if (!t.contains("output_tokens") || !t.at("output_tokens").is_number_integer() ||
            t.at("output_tokens").get<std::int64_t>() < 0) {
            line_error(line, where + ".output_tokens must be a non-negative integer");
        }
        r.trials.push_back({t.at("correct").get<bool>(), t.at("output_tokens").get<std::uint64_t>()});
    }
    return r;
}

// Smallest sorted value whose empirical CDF reaches p.
double lower_quantile(const std::vector<double>& sorted, double p) {
    const double n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

std::uint64_t bounded(std::mt19937_64& gen, std::uint64_t n) {
    constexpr auto max = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t limit = max - max % n;
    std::uint64_t x;
    do {
        x = gen();
    } while (x >= limit);
    return x % n;
}

auto point_order_key(const ParetoPoint& p) {
    return std::make_tuple(p.tokens, -p.accuracy_mean, p.model_id, p.method, p.strength.value_or(-1.0), p.benchmark);
}

bool nearly_ge(double a, double b, double scale) { return a >= b - 1e-9 * scale; }

ParetoPoint point_from_json(const json& j) {
    ParetoPoint p;
    p.model_id = j.at("model_id").get<std::string>();
    p.method = j.at("method").get<std::string>();
    if (!j.at("strength").is_null()) p.strength = j.at("strength").get<double>();
    p.benchmark = j.at("benchmark").get<std::string>();
    p.accuracy_mean = j.at("accuracy_mean").get<double>();
    p.ci_low = j.at("ci_low").get<double>();
    p.ci_high = j.at("ci_high").get<double>();
    p.mean_tokens = j.at("mean_tokens").get<double>();
    p.median_tokens = j.at("median_tokens").get<double>();
    p.tokens = j.at("tokens").get<double>();
    p.n_trials = j.at("n_trials").get<std::uint64_t>();
    return p;
}

} // namespace

std::string trial_digest(std::span<const Trial> trials) {
    std::string canonical;
    for (const auto& t : trials) {
        canonical += t.correct ? '1' : '0';
        canonical += ':' + std::to_string(t.output_tokens) + ';';
    }
    return sha256_hex(canonical);
}

std::vector<EvalRecord> parse_records(std::string_view text) {
    std::vector<EvalRecord> out;
    std::set<std::tuple<std::string, std::string, std::string>> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto end = std::min(text.find('\n', pos), text.size());
        const auto line = text.substr(pos, end - pos);
        ++line_no;
        pos = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            if (end == text.size()) break;
            continue;
        }
        const json doc = json::parse(line, nullptr, false);
        if (doc.is_discarded()) line_error(line_no, "not valid JSON");
        auto record = parse_record(doc, line_no);
        if (seen.emplace(record.model_id, record.benchmark, trial_digest(record.trials)).second) {
            out.push_back(std::move(record));
        }
        if (end == text.size()) break;
    }
    if (out.empty()) throw Error(ErrorCode::EmptyInput, "no evaluation records");
    return out;
}

std::vector<EvalRecord> ingest_records(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_records(buf.str());
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

std::vector<EvalRecord> pool_records(std::span<const EvalRecord> records) {
    std::vector<EvalRecord> out;
    std::map<std::pair<std::string, std::string>, std::size_t> index;
    for (const auto& r : records) {
        const auto key = std::make_pair(r.model_id, r.benchmark);
        const auto it = index.find(key);
        if (it == index.end()) {
            index.emplace(key, out.size());
            out.push_back(r);
            continue;
        }
        auto& pooled = out[it->second];
        if (pooled.method != r.method || pooled.strength != r.strength) {
            throw Error(ErrorCode::SchemaViolation, "records for model '" + r.model_id +
                                                        "' disagree on method or strength");
        }
        pooled.trials.insert(pooled.trials.end(), r.trials.begin(), r.trials.end());
    }
    return out;
}

ParetoPoint summarize(const EvalRecord& record, const SummaryOptions& options) {
    if (record.trials.empty()) throw Error(ErrorCode::EmptyInput, "record '" + record.model_id + "' has no trials");
    if (!(options.ci_level > 0.0 && options.ci_level < 1.0)) {
        throw Error(ErrorCode::InvalidParameter, "ci_level must lie in (0, 1)");
    }
    if (options.bootstrap_n == 0) throw Error(ErrorCode::InvalidParameter, "bootstrap_n must be positive");

    const std::uint64_t n = record.trials.size();
    ParetoPoint p;
    p.model_id = record.model_id;
    p.method = record.method;
    p.strength = record.strength;
    p.benchmark = record.benchmark;
    p.n_trials = n;

    std::uint64_t correct = 0;
    double token_sum = 0.0;
    std::vector<double> tokens;
    tokens.reserve(n);
    for (const auto& t : record.trials) {
        correct += t.correct;
        token_sum += static_cast<double>(t.output_tokens);
        tokens.push_back(static_cast<double>(t.output_tokens));
    }
    p.accuracy_mean = static_cast<double>(correct) / static_cast<double>(n);
    p.mean_tokens = token_sum / static_cast<double>(n);
    std::sort(tokens.begin(), tokens.end());
    p.median_tokens = n % 2 ? tokens[n / 2] : (tokens[n / 2 - 1] + tokens[n / 2]) / 2.0;
    p.tokens = options.token_stat == TokenStat::Mean ? p.mean_tokens : p.median_tokens;

    std::mt19937_64 gen(options.seed);
    std::vector<double> replicates(options.bootstrap_n);
    for (auto& rep : replicates) {
        std::uint64_t hits = 0;
        for (std::uint64_t i = 0; i < n; ++i) hits += record.trials[bounded(gen, n)].correct;
        rep = static_cast<double>(hits) / static_cast<double>(n);
    }
    std::sort(replicates.begin(), replicates.end());
    const double tail = (1.0 - options.ci_level) / 2.0;
    p.ci_low = std::min(lower_quantile(replicates, tail), p.accuracy_mean);
    p.ci_high = std::max(lower_quantile(replicates, 1.0 - tail), p.accuracy_mean);
    return p;
}

bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
    return a.accuracy_mean >= b.accuracy_mean && a.tokens <= b.tokens &&
           (a.accuracy_mean > b.accuracy_mean || a.tokens < b.tokens);
}

std::vector<ParetoPoint> pareto_front(std::span<const ParetoPoint> points) {
    std::vector<ParetoPoint> sorted(points.begin(), points.end());
    std::sort(sorted.begin(), sorted.end(),
              [](const ParetoPoint& a, const ParetoPoint& b) { return point_order_key(a) < point_order_key(b); });
    std::vector<ParetoPoint> front;
    double best_before = -std::numeric_limits<double>::infinity(); // best accuracy at strictly fewer tokens
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j].tokens == sorted[i].tokens) ++j;
        const double group_best = sorted[i].accuracy_mean; // sorted by accuracy descending within the group
        for (std::size_t k = i; k < j; ++k) {
            if (sorted[k].accuracy_mean == group_best && group_best > best_before) front.push_back(sorted[k]);
        }
        best_before = std::max(best_before, group_best);
        i = j;
    }
    return front;
}

std::vector<ParetoImprovement> pareto_improvements(std::span<const ParetoPoint> points, const ParetoPoint& parent) {
    std::vector<ParetoImprovement> out;
    for (const auto& p : points) {
        if (dominates(p, parent)) out.push_back({p, p.ci_low > parent.ci_high});
    }
    return out;
}

PhaseChangeReport detect_phase_change(std::span<const std::pair<double, double>> series, const std::string& benchmark) {
    if (series.size() < 3) {
        throw Error(ErrorCode::DegenerateInput, "phase detection needs at least 3 grid points, got " +
                                                    std::to_string(series.size()));
    }
    for (std::size_t i = 1; i < series.size(); ++i) {
        if (!(series[i].first > series[i - 1].first)) {
            throw Error(ErrorCode::DegenerateInput, "strengths must be strictly increasing");
        }
    }
    double lo = series[0].second, hi = series[0].second;
    for (const auto& [_, acc] : series) {
        lo = std::min(lo, acc);
        hi = std::max(hi, acc);
    }
    const double range = hi - lo;
    const double scale = std::max({std::abs(lo), std::abs(hi), 1.0});
    if (!(range > 1e-12 * scale)) {
        throw Error(ErrorCode::NoTransition, "accuracy is flat across the grid" +
                                                 (benchmark.empty() ? std::string() : " for " + benchmark));
    }

    PhaseChangeReport r;
    r.benchmark = benchmark;
    r.total_gain = range;
    const std::size_t steps = series.size() - 1;
    std::vector<double> slopes(steps);
    double max_abs_slope = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const double d = series[i + 1].second - series[i].second;
        r.first_differences.push_back(d);
        slopes[i] = d / (series[i + 1].first - series[i].first);
        max_abs_slope = std::max(max_abs_slope, std::abs(slopes[i]));
    }
    // equal slopes up to rounding count as ties and go to the earlier pair
    std::size_t best = 0;
    for (std::size_t i = 1; i < steps; ++i) {
        if (slopes[i] > slopes[best] + 1e-9 * max_abs_slope) best = i;
    }
    r.max_slope = slopes[best];
    r.max_slope_interval = {series[best].first, series[best + 1].first};

    const double target = 0.5 * range;
    std::size_t win_i = 0, win_j = steps;
    for (std::size_t i = 0; i < steps; ++i) {
        double gained = 0.0;
        for (std::size_t j = i + 1; j <= steps; ++j) {
            gained += std::max(0.0, r.first_differences[j - 1]);
            if (nearly_ge(gained, target, range)) {
                if (j - i < win_j - win_i) {
                    win_i = i;
                    win_j = j;
                }
                break;
            }
        }
    }
    r.gain_window = {series[win_i].first, series[win_j].first};
    return r;
}

json to_json(const ParetoPoint& p) {
    return {{"model_id", p.model_id},
            {"method", p.method},
            {"strength", p.strength ? json(*p.strength) : json(nullptr)},
            {"benchmark", p.benchmark},
            {"accuracy_mean", p.accuracy_mean},
            {"ci_low", p.ci_low},
            {"ci_high", p.ci_high},
            {"mean_tokens", p.mean_tokens},
            {"median_tokens", p.median_tokens},
            {"tokens", p.tokens},
            {"n_trials", p.n_trials}};
}

json to_json(const PhaseChangeReport& r) {
    return {{"benchmark", r.benchmark},
            {"max_slope_interval", {r.max_slope_interval.first, r.max_slope_interval.second}},
            {"max_slope", r.max_slope},
            {"gain_window", {r.gain_window.first, r.gain_window.second}},
            {"total_gain", r.total_gain},
            {"first_differences", r.first_differences}};
}

std::string points_csv(std::span<const ParetoPoint> points) {
    std::ostringstream out;
    out.precision(17);
    out << "benchmark,model_id,method,strength,accuracy_mean,ci_low,ci_high,tokens,mean_tokens,median_tokens,n_trials\n";
    for (const auto& p : points) {
        out << p.benchmark << ',' << p.model_id << ',' << p.method << ',';
        if (p.strength) out << *p.strength;
        out << ',' << p.accuracy_mean << ',' << p.ci_low << ',' << p.ci_high << ',' << p.tokens << ',' << p.mean_tokens
            << ',' << p.median_tokens << ',' << p.n_trials << '\n';
    }
    return out.str();
}

json pareto_report(std::span<const EvalRecord> records, const ParetoReportOptions& options) {
    const auto pooled = pool_records(records);
    std::map<std::string, std::vector<ParetoPoint>> by_benchmark;
    for (const auto& r : pooled) by_benchmark[r.benchmark].push_back(summarize(r, options.summary));

    bool parent_seen = options.parent_id.empty();
    json benchmarks = json::array();
    for (auto& [benchmark, points] : by_benchmark) {
        std::sort(points.begin(), points.end(),
                  [](const ParetoPoint& a, const ParetoPoint& b) { return point_order_key(a) < point_order_key(b); });
        json entry = {{"benchmark", benchmark}};
        json pts = json::array();
        for (const auto& p : points) pts.push_back(to_json(p));
        entry["points"] = pts;
        json front = json::array();
        for (const auto& p : pareto_front(points)) front.push_back(to_json(p));
        entry["front"] = front;

        const auto parent = std::find_if(points.begin(), points.end(),
                                         [&](const ParetoPoint& p) { return p.model_id == options.parent_id; });
        json improvements = json::array();
        if (parent != points.end()) {
            parent_seen = true;
            entry["parent"] = to_json(*parent);
            for (const auto& imp : pareto_improvements(points, *parent)) {
                auto j = to_json(imp.point);
                j["ci_robust"] = imp.ci_robust;
                improvements.push_back(j);
            }
        } else {
            entry["parent"] = nullptr;
        }
        entry["improvements"] = improvements;

        std::map<std::string, std::vector<std::pair<double, double>>> series;
        for (const auto& p : points) {
            if (p.strength) series[p.method].emplace_back(*p.strength, p.accuracy_mean);
        }
        json phases = json::array();
        for (auto& [method, s] : series) {
            std::sort(s.begin(), s.end());
            json phase = {{"method", method}};
            try {
                phase.update(to_json(detect_phase_change(s, benchmark)));
                phase["status"] = "ok";
            } catch (const Error& e) {
                phase["status"] = e.code() == ErrorCode::NoTransition ? "no_transition" : "insufficient_points";
                phase["detail"] = e.what();
            }
            phases.push_back(phase);
        }
        entry["phase_changes"] = phases;
        benchmarks.push_back(entry);
    }
    if (!parent_seen) {
        throw Error(ErrorCode::DegenerateInput, "parent model '" + options.parent_id + "' does not appear in the records");
    }
    return {{"parent_id", options.parent_id},
            {"ci_level", options.summary.ci_level},
            {"bootstrap_n", options.summary.bootstrap_n},
            {"seed", options.summary.seed},
            {"token_stat", options.summary.token_stat == TokenStat::Mean ? "mean" : "median"},
            {"benchmarks", benchmarks}};
}

void write_pareto_outputs(const json& report, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::vector<ParetoPoint> points, fronts;
    for (const auto& b : report.at("benchmarks")) {
        for (const auto& p : b.at("points")) points.push_back(point_from_json(p));
        for (const auto& p : b.at("front")) fronts.push_back(point_from_json(p));
    }
    auto write = [&](const fs::path& file, const std::string& text) {
        std::ofstream out(file, std::ios::trunc);
        out << text;
        if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + file.string());
    };
    write(out_dir / "pareto_report.json", report.dump(2) + "\n");
    write(out_dir / "points.csv", points_csv(points));
    write(out_dir / "fronts.csv", points_csv(fronts));
}

} // namespace mergelab

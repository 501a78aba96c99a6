#include "mergelab/cli.hpp"

#include "mergelab/divergence.hpp"
#include "mergelab/error.hpp"
#include "mergelab/merge.hpp"
#include "mergelab/parallel.hpp"
#include "mergelab/pareto.hpp"
#include "mergelab/sweep.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <optional>

namespace mergelab::cli {

namespace fs = std::filesystem;

namespace {

struct AnalyzeArgs {
    std::string direct, think, out = "divergence";
    int bins = 2001;
    double threshold = 0.002;
    int curve_grid = 100;
};

struct MergeArgs {
    std::string method, direct, think, base, out = "merged";
    std::string dtype_policy = "preserve_source", sidecars = "thinking", topk_scope = "per_tensor";
    double strength = 0.5;
    MergeRecipe recipe;
    std::uint64_t shard_limit = std::uint64_t{5} << 30;
};

struct SweepArgs {
    std::string plan;
    bool rebuild_mismatched = false;
};

struct ProbeArgs {
    std::string model, base, out = "probe", dtype_policy = "preserve_source";
    std::vector<double> rates;
    std::uint64_t seed = 0;
    std::uint64_t shard_limit = std::uint64_t{5} << 30;
};

struct ParetoArgs {
    std::string records, parent_id, out = "pareto", token_stat = "mean";
    double ci_level = 0.90;
    std::uint64_t bootstrap_n = 10000;
    std::uint64_t seed = 0;
};

void write_text(const fs::path& file, const std::string& text) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::trunc);
    out << text;
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + file.string());
}

int run_analyze(const AnalyzeArgs& a, int workers, std::ostream& out) {
    const auto direct = open_checkpoint(a.direct, Role::Direct);
    const auto think = open_checkpoint(a.think, Role::Thinking);
    DivergenceOptions options;
    options.bins = a.bins;
    options.threshold = a.threshold;
    options.curve_grid = a.curve_grid;
    options.workers = workers;
    const auto analysis = analyze_divergence(direct, think, options);
    const fs::path dir = a.out;
    write_text(dir / "divergence_report.json", to_json(analysis.report).dump(2) + "\n");
    write_text(dir / "histogram.csv", histogram_csv(analysis.report));
    if (!analysis.curve.points.empty()) {
        write_text(dir / "cumulative_curve.json", to_json(analysis.curve).dump(2) + "\n");
        write_text(dir / "cumulative_curve.csv", curve_csv(analysis.curve));
    }
    char line[160];
    std::snprintf(line, sizeof line, "relative_l2 %.4f%%  within +-%g: %.4f%%  params %llu\n",
                  100.0 * analysis.report.relative_l2, a.threshold,
                  100.0 * analysis.report.fraction_within_threshold,
                  static_cast<unsigned long long>(analysis.report.total_params));
    out << line << "wrote " << (dir / "divergence_report.json").string() << '\n';
    return kExitOk;
}

int run_merge(MergeArgs a, int workers, std::ostream& out) {
    const auto method = parse_method(a.method);
    if (!method) throw Error(ErrorCode::InvalidParameter, "unknown --method '" + a.method + "'");
    a.recipe.method = *method;
    a.recipe.strength = a.strength;
    if (a.topk_scope == "global") a.recipe.topk_scope = TopKScope::Global;
    else if (a.topk_scope != "per_tensor") throw Error(ErrorCode::InvalidParameter, "--topk-scope must be per_tensor or global");
    if (requires_base(*method) && a.base.empty()) {
        throw Error(ErrorCode::BaseRequired, "--method " + a.method + " requires --base");
    }
    a.recipe.validate();
    const auto policy = parse_dtype_policy(a.dtype_policy);
    const auto sidecars = parse_sidecar_source(a.sidecars);

    const auto direct = open_checkpoint(a.direct, Role::Direct);
    const auto think = open_checkpoint(a.think, Role::Thinking);
    std::optional<Checkpoint> base;
    if (!a.base.empty()) base = open_checkpoint(a.base, Role::Base);

    const auto result = merge_checkpoints(a.recipe, direct, think, base ? &*base : nullptr, a.out,
                                          MergeRunOptions{policy, a.shard_limit, workers});
    const fs::path out_path = a.out;
    if (out_path.extension() != ".safetensors") {
        if (sidecars == SidecarSource::Thinking) copy_sidecars(a.think, out_path);
        if (sidecars == SidecarSource::Direct) copy_sidecars(a.direct, out_path);
    }
    std::size_t fallbacks = 0;
    for (const auto& d : result.diagnostics) fallbacks += d.collinear_fallback;
    out << "merged " << result.tensor_count << " tensors with " << a.method << " at strength "
        << strength_label(a.strength) << " into " << a.out << '\n';
    if (fallbacks > 0) out << fallbacks << " tensors took the collinear linear fallback\n";
    return kExitOk;
}

int run_sweep(const SweepArgs& a, const CLI::Option* workers_flag, int workers, std::ostream& out) {
    auto plan = load_sweep_plan(a.plan);
    if (workers_flag->count() > 0) plan.workers = workers;
    SweepOptions options;
    options.rebuild_mismatched = a.rebuild_mismatched;
    options.after_entry = [&](const ManifestEntry& e) {
        out << status_name(e.status) << ' ' << e.output_path;
        if (!e.error.empty()) out << ": " << e.error;
        out << '\n';
    };
    const auto run = execute_sweep(plan, options);
    out << run.merges_executed << " merged, " << run.entries_skipped << " already done, " << run.entries_failed
        << " failed; manifest " << (plan.output_root / kManifestName).string() << '\n';
    return run.entries_failed > 0 ? kExitData : kExitOk;
}

int run_probe(const ProbeArgs& a, int workers, std::ostream& out) {
    const auto model = open_checkpoint(a.model, Role::Thinking);
    const auto base = open_checkpoint(a.base, Role::Base);
    ProbeOptions options;
    options.seed = a.seed;
    options.dtype_policy = parse_dtype_policy(a.dtype_policy);
    options.shard_limit_bytes = a.shard_limit;
    options.workers = workers;
    const auto entries = dare_viability_probe(model, base, a.rates, a.out, options);
    for (const auto& e : entries) {
        out << "p=" << e.drop_rate << " kept " << e.kept << "/" << e.total << " -> " << e.path.string() << '\n';
    }
    return kExitOk;
}

int run_pareto(const ParetoArgs& a, std::ostream& out) {
    ParetoReportOptions options;
    options.parent_id = a.parent_id;
    options.summary.ci_level = a.ci_level;
    options.summary.bootstrap_n = a.bootstrap_n;
    options.summary.seed = a.seed;
    options.summary.token_stat = a.token_stat == "median" ? TokenStat::Median : TokenStat::Mean;
    const auto records = ingest_records(a.records);
    const auto report = pareto_report(records, options);
    write_pareto_outputs(report, a.out);
    for (const auto& b : report.at("benchmarks")) {
        out << b.at("benchmark").get<std::string>() << ": " << b.at("front").size() << " on the front, "
            << b.at("improvements").size() << " improvements over " << a.parent_id << '\n';
    }
    return kExitOk;
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Usage: return kExitUsage;
        case ErrorKind::Data: return kExitData;
        case ErrorKind::Io: return kExitIo;
    }
    return kExitData;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Merge direct and thinking checkpoints, sweep merging strength and analyse the results.", "mergelab"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", kToolkitVersion);
    int workers = default_workers(1);
    auto* workers_flag = app.add_option("--workers", workers,
                                        "Worker threads for tensor-parallel stages (default: MERGELAB_WORKERS or 1)")
                             ->check(CLI::PositiveNumber);

    AnalyzeArgs analyze;
    auto* analyze_cmd = app.add_subcommand("analyze", "Parameter-difference statistics between the two parents");
    analyze_cmd->add_option("--direct", analyze.direct, "Direct parent checkpoint")->required();
    analyze_cmd->add_option("--think", analyze.think, "Thinking parent checkpoint")->required();
    analyze_cmd->add_option("--bins", analyze.bins, "Histogram bins")->capture_default_str()->check(CLI::PositiveNumber);
    analyze_cmd->add_option("--threshold", analyze.threshold, "Reference |delta| threshold")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    analyze_cmd->add_option("--curve-grid", analyze.curve_grid, "Quantile steps of the cumulative curve")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    analyze_cmd->add_option("--out", analyze.out, "Output directory")->capture_default_str();

    MergeArgs merge;
    auto* merge_cmd = app.add_subcommand("merge", "Merge the parents once with one method and strength");
    merge_cmd->add_option("--method", merge.method, "Merge method")
        ->required()
        ->check(CLI::IsMember({"weighted_average", "slerp", "dare", "ties", "emr", "lore", "twin", "topk_replace",
                               "topk_diff_average", "global_avg_topk_override"}));
    merge_cmd->add_option("--strength", merge.strength, "Merging strength in [0, 1]")->required();
    merge_cmd->add_option("--direct", merge.direct, "Direct parent checkpoint")->required();
    merge_cmd->add_option("--think", merge.think, "Thinking parent checkpoint")->required();
    merge_cmd->add_option("--base", merge.base, "Shared base checkpoint (dare, ties, emr, twin)");
    merge_cmd->add_option("--out", merge.out, "Output directory, or a .safetensors file")->capture_default_str();
    merge_cmd->add_option("--seed", merge.recipe.seed, "Seed for DARE masks")->capture_default_str();
    merge_cmd->add_option("--drop-rate", merge.recipe.drop_rate, "DARE drop rate, TIES 1-density, TWIN mask rate")
        ->capture_default_str();
    merge_cmd->add_option("--top-k-fraction", merge.recipe.top_k_fraction, "Selected fraction for top-k methods")
        ->capture_default_str();
    merge_cmd->add_option("--topk-scope", merge.topk_scope, "Rank top-k within each tensor or across the checkpoint")
        ->capture_default_str()
        ->check(CLI::IsMember({"per_tensor", "global"}));
    merge_cmd->add_option("--svt-threshold", merge.recipe.svt_threshold_fraction,
                          "LORE singular value threshold relative to the largest")
        ->capture_default_str();
    merge_cmd->add_option("--lore-iters", merge.recipe.lore_iters, "LORE iterations")->capture_default_str();
    merge_cmd->add_option("--collinearity-eps", merge.recipe.collinearity_eps, "SLERP linear fallback tolerance")
        ->capture_default_str();
    merge_cmd->add_option("--dtype-policy", merge.dtype_policy, "preserve_source or force_f32")
        ->capture_default_str()
        ->check(CLI::IsMember({"preserve_source", "force_f32"}));
    merge_cmd->add_option("--shard-limit-bytes", merge.shard_limit, "Maximum payload bytes per shard")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    merge_cmd->add_option("--sidecars", merge.sidecars, "Parent whose tokenizer/config files are copied")
        ->capture_default_str()
        ->check(CLI::IsMember({"thinking", "direct", "none"}));

    SweepArgs sweep;
    auto* sweep_cmd = app.add_subcommand("sweep", "Execute or resume a strength sweep described by a plan file");
    sweep_cmd->add_option("--plan", sweep.plan, "Sweep plan JSON")->required();
    sweep_cmd->add_flag("--rebuild-mismatched", sweep.rebuild_mismatched,
                        "Rebuild finished entries whose outputs no longer match their digests");

    ProbeArgs probe;
    auto* probe_cmd = app.add_subcommand("probe-dare", "Write base + DARE-pruned task vectors at several drop rates");
    probe_cmd->add_option("--model", probe.model, "Fine-tuned checkpoint")->required();
    probe_cmd->add_option("--base", probe.base, "Base checkpoint")->required();
    probe_cmd->add_option("--rates", probe.rates, "Comma-separated drop rates in [0, 1)")->required()->delimiter(',');
    probe_cmd->add_option("--out", probe.out, "Output directory")->capture_default_str();
    probe_cmd->add_option("--seed", probe.seed, "Seed for DARE masks")->capture_default_str();
    probe_cmd->add_option("--dtype-policy", probe.dtype_policy, "preserve_source or force_f32")
        ->capture_default_str()
        ->check(CLI::IsMember({"preserve_source", "force_f32"}));
    probe_cmd->add_option("--shard-limit-bytes", probe.shard_limit, "Maximum payload bytes per shard")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);

    ParetoArgs pareto;
    auto* pareto_cmd = app.add_subcommand("pareto", "Confidence intervals, Pareto fronts and phase changes");
    pareto_cmd->add_option("--records", pareto.records, "Evaluation records, one JSON object per line")->required();
    pareto_cmd->add_option("--parent-id", pareto.parent_id, "model_id of the thinking parent")->required();
    pareto_cmd->add_option("--out", pareto.out, "Output directory")->capture_default_str();
    pareto_cmd->add_option("--ci-level", pareto.ci_level, "Two-sided interval level")->capture_default_str();
    pareto_cmd->add_option("--bootstrap-n", pareto.bootstrap_n, "Bootstrap resamples")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    pareto_cmd->add_option("--seed", pareto.seed, "Bootstrap seed")->capture_default_str();
    pareto_cmd->add_option("--token-stat", pareto.token_stat, "Token axis: mean or median output tokens")
        ->capture_default_str()
        ->check(CLI::IsMember({"mean", "median"}));

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::Success& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto* failing = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << failing->help();
        return kExitUsage;
    }

    try {
        if (analyze_cmd->parsed()) return run_analyze(analyze, workers, out);
        if (merge_cmd->parsed()) return run_merge(merge, workers, out);
        if (sweep_cmd->parsed()) return run_sweep(sweep, workers_flag, workers, out);
        if (probe_cmd->parsed()) return run_probe(probe, workers, out);
        if (pareto_cmd->parsed()) return run_pareto(pareto, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitUsage;
}

} // namespace mergelab::cli

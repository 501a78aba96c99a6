#include "mergelab/sweep.hpp"

#include "mergelab/digest.hpp"
#include "mergelab/error.hpp"
#include "mergelab/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>

namespace mergelab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void schema_error(const std::string& what) { throw Error(ErrorCode::SchemaViolation, what); }

double get_number(const json& obj, const char* key, double fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number()) schema_error(std::string("'") + key + "' must be a number");
    return v.get<double>();
}

std::uint64_t get_unsigned(const json& obj, const char* key, std::uint64_t fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        schema_error(std::string("'") + key + "' must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

std::string get_string(const json& obj, const char* key) {
    const auto& v = obj.at(key);
    if (!v.is_string()) schema_error(std::string("'") + key + "' must be a string");
    return v.get<std::string>();
}

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, _] : obj.items()) {
        if (!allowed.count(key)) schema_error("unknown key '" + key + "' in " + where);
    }
}

TopKScope parse_scope(const std::string& name) {
    if (name == "per_tensor") return TopKScope::PerTensor;
    if (name == "global") return TopKScope::Global;
    schema_error("topk_scope must be 'per_tensor' or 'global', got '" + name + "'");
}

// Hyperparameters shared by plan templates and manifest entries; `defaults`
// supplies anything the document leaves out.
MergeRecipe read_recipe_fields(const json& obj, MergeRecipe recipe) {
    const auto method = parse_method(get_string(obj, "method"));
    if (!method) schema_error("unknown method '" + obj.at("method").get<std::string>() + "'");
    recipe.method = *method;
    recipe.drop_rate = get_number(obj, "drop_rate", recipe.drop_rate);
    recipe.top_k_fraction = get_number(obj, "top_k_fraction", recipe.top_k_fraction);
    recipe.svt_threshold_fraction = get_number(obj, "svt_threshold_fraction", recipe.svt_threshold_fraction);
    recipe.lore_iters = static_cast<int>(get_unsigned(obj, "lore_iters", static_cast<std::uint64_t>(recipe.lore_iters)));
    recipe.seed = get_unsigned(obj, "seed", recipe.seed);
    recipe.collinearity_eps = get_number(obj, "collinearity_eps", recipe.collinearity_eps);
    if (obj.contains("topk_scope")) recipe.topk_scope = parse_scope(get_string(obj, "topk_scope"));
    return recipe;
}

fs::path resolve(const fs::path& p, const fs::path& base_dir) {
    if (p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
}

std::string recipe_digest(const SweepPlan& plan, const MergeRecipe& recipe) {
    const json doc = {{"recipe", recipe_to_json(recipe)},
                      {"direct", plan.direct.string()},
                      {"think", plan.think.string()},
                      {"base", plan.base ? plan.base->string() : std::string()},
                      {"dtype_policy", dtype_policy_name(plan.dtype_policy)},
                      {"sidecars", sidecar_source_name(plan.sidecars)},
                      {"shard_limit_bytes", plan.shard_limit_bytes},
                      {"toolkit_version", kToolkitVersion}};
    return sha256_hex(doc.dump());
}

std::string entry_path(const MergeRecipe& recipe) {
    return std::string(method_name(recipe.method)) + "/" + strength_label(recipe.strength);
}

json diagnostic_json(const TensorMergeDiagnostic& d) {
    return {{"name", d.name},           {"angle_radians", d.angle_radians}, {"dot", d.dot},
            {"norm_direct", d.norm_direct}, {"norm_think", d.norm_think},   {"collinear_fallback", d.collinear_fallback}};
}

void write_manifest(const fs::path& root, const SweepManifest& manifest) {
    fs::create_directories(root);
    const fs::path target = root / kManifestName;
    const fs::path tmp = root / (std::string(kManifestName) + ".tmp");
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << to_json(manifest).dump(2) << '\n';
        out.flush();
        if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
    }
    fs::rename(tmp, target);
}

bool is_checkpoint_file(const fs::path& p) {
    const auto name = p.filename().string();
    return p.extension() == ".safetensors" || p.extension() == ".partial" || name == kShardIndexName;
}

std::optional<fs::path> sidecar_dir(const SweepPlan& plan) {
    const fs::path* source = nullptr;
    if (plan.sidecars == SidecarSource::Thinking) source = &plan.think;
    if (plan.sidecars == SidecarSource::Direct) source = &plan.direct;
    if (source == nullptr || !fs::is_directory(*source)) return std::nullopt;
    return *source;
}

} // namespace

std::string strength_label(double strength) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", strength);
    return buf;
}

std::string_view dtype_policy_name(DtypePolicy policy) {
    return policy == DtypePolicy::ForceF32 ? "force_f32" : "preserve_source";
}

DtypePolicy parse_dtype_policy(std::string_view name) {
    if (name == "preserve_source") return DtypePolicy::PreserveSource;
    if (name == "force_f32") return DtypePolicy::ForceF32;
    throw Error(ErrorCode::InvalidParameter,
                "dtype policy must be 'preserve_source' or 'force_f32', got '" + std::string(name) + "'");
}

std::string_view sidecar_source_name(SidecarSource source) {
    switch (source) {
        case SidecarSource::Thinking: return "thinking";
        case SidecarSource::Direct: return "direct";
        case SidecarSource::None: return "none";
    }
    return "none";
}

SidecarSource parse_sidecar_source(std::string_view name) {
    if (name == "thinking") return SidecarSource::Thinking;
    if (name == "direct") return SidecarSource::Direct;
    if (name == "none") return SidecarSource::None;
    throw Error(ErrorCode::InvalidParameter,
                "sidecar source must be 'thinking', 'direct' or 'none', got '" + std::string(name) + "'");
}

json recipe_to_json(const MergeRecipe& r) {
    return {{"method", method_name(r.method)},
            {"strength", r.strength},
            {"drop_rate", r.drop_rate},
            {"top_k_fraction", r.top_k_fraction},
            {"svt_threshold_fraction", r.svt_threshold_fraction},
            {"lore_iters", r.lore_iters},
            {"seed", r.seed},
            {"collinearity_eps", r.collinearity_eps},
            {"topk_scope", r.topk_scope == TopKScope::Global ? "global" : "per_tensor"}};
}

// ---------------------------------------------------------------------------

void require_aligned(const Checkpoint& direct, const Checkpoint& think, const Checkpoint* base) {
    auto compare = [&](const Checkpoint& other, const char* label) {
        if (other.tensors().size() != direct.tensors().size()) {
            throw Error(ErrorCode::TensorSetMismatch, std::string(label) + " parent holds " +
                                                          std::to_string(other.tensors().size()) +
                                                          " tensors, direct holds " +
                                                          std::to_string(direct.tensors().size()));
        }
        for (const auto& [name, meta] : direct.tensors()) {
            if (!other.contains(name)) {
                throw Error(ErrorCode::TensorSetMismatch, "'" + name + "' missing from " + label + " parent");
            }
            if (other.meta(name).shape != meta.shape) {
                throw Error(ErrorCode::TensorSetMismatch, "'" + name + "' differs in shape in " + label + " parent");
            }
        }
    };
    compare(think, "thinking");
    if (base != nullptr) compare(*base, "base");
}

std::map<std::string, std::vector<TopKCutoff>> global_cutoffs(const MergeRecipe& recipe, const Checkpoint& direct,
                                                              const Checkpoint& think, const Checkpoint* base,
                                                              int workers) {
    const auto fractions = selection_fractions(recipe);
    const auto names = direct.names();
    std::map<std::string, std::vector<TopKCutoff>> out;
    if (fractions.empty()) return out;
    if (requires_base(recipe.method) && base == nullptr) {
        throw Error(ErrorCode::BaseRequired, std::string(method_name(recipe.method)) + " needs a base checkpoint");
    }

    const std::size_t selections = fractions.size();
    const std::uint64_t total = direct.param_count();
    auto magnitudes_of = [&](std::size_t i) {
        const auto d = load_tensor(direct, names[i]);
        const auto t = load_tensor(think, names[i]);
        if (base != nullptr) {
            const auto b = load_tensor(*base, names[i]);
            return selection_magnitudes<float>(recipe, d.values, t.values, &b.values);
        }
        return selection_magnitudes<float>(recipe, d.values, t.values, nullptr);
    };

    // k-th largest key per selection. Non-negative doubles order like their bit patterns.
    struct Search {
        std::uint64_t want = 0; // rank still to place within the current prefix
        std::uint64_t prefix = 0;
        bool trivial = false;
        TopKCutoff cutoff;
    };
    std::vector<Search> search(selections);
    for (std::size_t j = 0; j < selections; ++j) {
        const auto k = top_count(fractions[j], total);
        if (k == 0) search[j] = {0, 0, true, {std::numeric_limits<double>::infinity(), 0}};
        else if (k >= total) search[j] = {0, 0, true, {-std::numeric_limits<double>::infinity(), 0}};
        else search[j].want = k;
    }

    constexpr int kDigitBits = 16;
    constexpr std::size_t kDigits = std::size_t{1} << kDigitBits;
    for (int pass = 0; pass < 64 / kDigitBits; ++pass) {
        const int shift = 64 - kDigitBits * (pass + 1);
        std::vector<std::vector<std::uint64_t>> hist(selections, std::vector<std::uint64_t>(kDigits, 0));
        std::mutex hist_mutex;
        parallel_for(names.size(), workers, [&](std::size_t i) {
            const auto mags = magnitudes_of(i);
            std::vector<std::vector<std::uint64_t>> local(selections);
            for (std::size_t j = 0; j < selections; ++j) {
                if (search[j].trivial) continue;
                local[j].assign(kDigits, 0);
                for (Eigen::Index e = 0; e < mags[j].size(); ++e) {
                    const auto key = std::bit_cast<std::uint64_t>(mags[j][e]);
                    if (pass > 0 && (key >> (shift + kDigitBits)) != (search[j].prefix >> (shift + kDigitBits))) {
                        continue;
                    }
                    ++local[j][(key >> shift) & (kDigits - 1)];
                }
            }
            std::lock_guard lock(hist_mutex);
            for (std::size_t j = 0; j < selections; ++j) {
                for (std::size_t g = 0; g < local[j].size(); ++g) hist[j][g] += local[j][g];
            }
        });
        for (std::size_t j = 0; j < selections; ++j) {
            if (search[j].trivial) continue;
            for (std::size_t g = kDigits; g-- > 0;) {
                if (hist[j][g] < search[j].want) {
                    search[j].want -= hist[j][g];
                } else {
                    search[j].prefix |= static_cast<std::uint64_t>(g) << shift;
                    break;
                }
            }
        }
    }

    // search[j].want now counts entries equal to the threshold that must be taken;
    // hand them out to tensors in name order, lowest index first within each.
    std::vector<std::vector<std::uint64_t>> equal(selections, std::vector<std::uint64_t>(names.size(), 0));
    bool any_search = false;
    for (const auto& s : search) any_search = any_search || !s.trivial;
    if (any_search) {
        parallel_for(names.size(), workers, [&](std::size_t i) {
            const auto mags = magnitudes_of(i);
            for (std::size_t j = 0; j < selections; ++j) {
                if (search[j].trivial) continue;
                const double threshold = std::bit_cast<double>(search[j].prefix);
                equal[j][i] = static_cast<std::uint64_t>((mags[j] == threshold).count());
            }
        });
    }
    for (std::size_t j = 0; j < selections; ++j) {
        std::uint64_t quota = search[j].want;
        for (std::size_t i = 0; i < names.size(); ++i) {
            TopKCutoff c = search[j].cutoff;
            if (!search[j].trivial) {
                c.threshold = std::bit_cast<double>(search[j].prefix);
                c.ties_quota = std::min(quota, equal[j][i]);
                quota -= c.ties_quota;
            }
            out[names[i]].push_back(c);
        }
    }
    return out;
}

MergeRunResult merge_checkpoints(const MergeRecipe& recipe, const Checkpoint& direct, const Checkpoint& think,
                                 const Checkpoint* base, const fs::path& out, const MergeRunOptions& options) {
    recipe.validate();
    if (requires_base(recipe.method) && base == nullptr) {
        throw Error(ErrorCode::BaseRequired, std::string(method_name(recipe.method)) + " needs a base checkpoint");
    }
    require_aligned(direct, think, base);

    std::map<std::string, std::vector<TopKCutoff>> cutoffs;
    if (recipe.topk_scope == TopKScope::Global) {
        cutoffs = global_cutoffs(recipe, direct, think, base, options.workers);
    }

    const auto names = direct.names();
    std::vector<TensorSpec> layout;
    layout.reserve(names.size());
    for (const auto& name : names) {
        const auto& meta = think.meta(name);
        layout.push_back({name, options.dtype_policy == DtypePolicy::ForceF32 ? Dtype::F32 : meta.dtype, meta.shape});
    }
    const std::map<std::string, std::string> metadata = {{"merge_method", std::string(method_name(recipe.method))},
                                                         {"merge_strength", strength_label(recipe.strength)},
                                                         {"toolkit_version", kToolkitVersion}};
    CheckpointWriter writer(out, std::move(layout), options.shard_limit_bytes, metadata);

    std::vector<std::optional<TensorMergeDiagnostic>> diagnostics(names.size());
    parallel_for(names.size(), options.workers, [&](std::size_t i) {
        const auto& name = names[i];
        const auto d = load_tensor(direct, name);
        const auto t = load_tensor(think, name);
        std::optional<TensorBuffer> b;
        if (base != nullptr && requires_base(recipe.method)) b = load_tensor(*base, name);
        std::span<const TopKCutoff> tensor_cutoffs;
        if (const auto it = cutoffs.find(name); it != cutoffs.end()) tensor_cutoffs = it->second;
        auto merged = merge_tensor<float>(recipe, name, d.meta.shape, d.values, t.values, b ? &b->values : nullptr,
                                          tensor_cutoffs);
        writer.write(name, merged.values);
        diagnostics[i] = std::move(merged.diagnostic);
    });

    MergeRunResult result;
    result.checkpoint = writer.finish(Role::Merged);
    result.tensor_count = names.size();
    for (auto& d : diagnostics) {
        if (d) result.diagnostics.push_back(std::move(*d));
    }
    return result;
}

std::vector<std::string> copy_sidecars(const fs::path& parent, const fs::path& out_dir) {
    std::vector<std::string> copied;
    if (!fs::is_directory(parent)) return copied;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(parent)) {
        if (entry.is_regular_file() && !is_checkpoint_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    fs::create_directories(out_dir);
    for (const auto& f : files) {
        fs::copy_file(f, out_dir / f.filename(), fs::copy_options::overwrite_existing);
        copied.push_back(f.filename().string());
    }
    return copied;
}

// ---------------------------------------------------------------------------

std::string SweepPlan::digest() const {
    json doc = json::array();
    for (const auto& r : recipes) doc.push_back(recipe_digest(*this, r));
    return sha256_hex(json{{"output_root", output_root.string()}, {"entries", doc}}.dump());
}

std::vector<double> expand_grid(double start, double stop, double step) {
    if (!(step > 0.0)) throw Error(ErrorCode::InvalidPlan, "grid step must be positive");
    if (!(stop >= start)) throw Error(ErrorCode::InvalidPlan, "grid stop must not precede start");
    const double span = stop - start;
    const double steps = std::round(span / step);
    if (std::abs(steps * step - span) > 1e-9 * std::max(1.0, span)) {
        throw Error(ErrorCode::InvalidPlan, "grid step does not divide [start, stop]");
    }
    std::vector<double> out;
    for (long long i = 0; i <= static_cast<long long>(steps); ++i) {
        out.push_back(std::round((start + static_cast<double>(i) * step) * 1e10) / 1e10);
    }
    return out;
}

SweepPlan plan_sweep(const json& config, const fs::path& base_dir) {
    if (!config.is_object()) schema_error("plan must be a JSON object");
    reject_unknown(config,
                   {"direct", "think", "base", "output_root", "dtype_policy", "sidecar_source", "shard_limit_bytes",
                    "workers", "seed", "methods"},
                   "plan");
    for (const char* key : {"direct", "think", "output_root", "methods"}) {
        if (!config.contains(key)) schema_error(std::string("plan is missing '") + key + "'");
    }

    SweepPlan plan;
    plan.direct = resolve(get_string(config, "direct"), base_dir);
    plan.think = resolve(get_string(config, "think"), base_dir);
    if (config.contains("base") && !config.at("base").is_null()) plan.base = resolve(get_string(config, "base"), base_dir);
    plan.output_root = resolve(get_string(config, "output_root"), base_dir);
    if (config.contains("dtype_policy")) plan.dtype_policy = parse_dtype_policy(get_string(config, "dtype_policy"));
    if (config.contains("sidecar_source")) plan.sidecars = parse_sidecar_source(get_string(config, "sidecar_source"));
    plan.shard_limit_bytes = get_unsigned(config, "shard_limit_bytes", plan.shard_limit_bytes);
    if (plan.shard_limit_bytes == 0) throw Error(ErrorCode::InvalidPlan, "shard_limit_bytes must be positive");
    plan.workers = static_cast<int>(get_unsigned(config, "workers", static_cast<std::uint64_t>(default_workers(1))));
    if (plan.workers < 1) throw Error(ErrorCode::InvalidPlan, "workers must be at least 1");
    const std::uint64_t plan_seed = get_unsigned(config, "seed", 0);

    for (const auto* p : {&plan.direct, &plan.think}) {
        if (!fs::exists(*p)) throw Error(ErrorCode::IoFailure, "parent path does not exist: " + p->string());
    }
    if (plan.base && !fs::exists(*plan.base)) {
        throw Error(ErrorCode::IoFailure, "base path does not exist: " + plan.base->string());
    }

    const auto& methods = config.at("methods");
    if (!methods.is_array()) schema_error("'methods' must be an array");
    if (methods.empty()) throw Error(ErrorCode::InvalidPlan, "plan lists no methods");

    std::set<std::string> seen;
    for (std::size_t m = 0; m < methods.size(); ++m) {
        const auto& tmpl = methods[m];
        const std::string where = "methods[" + std::to_string(m) + "]";
        if (!tmpl.is_object()) schema_error(where + " must be an object");
        reject_unknown(tmpl,
                       {"method", "grid", "strengths", "drop_rate", "top_k_fraction", "svt_threshold_fraction",
                        "lore_iters", "seed", "collinearity_eps", "topk_scope"},
                       where);
        if (!tmpl.contains("method")) schema_error(where + " is missing 'method'");
        MergeRecipe defaults;
        defaults.seed = plan_seed;
        const MergeRecipe recipe = read_recipe_fields(tmpl, defaults);
        if (requires_base(recipe.method) && !plan.base) {
            throw Error(ErrorCode::BaseRequired,
                        std::string(method_name(recipe.method)) + " in " + where + " needs a base checkpoint");
        }

        std::vector<double> strengths;
        if (tmpl.contains("grid") == tmpl.contains("strengths")) {
            schema_error(where + " needs exactly one of 'grid' or 'strengths'");
        }
        if (tmpl.contains("grid")) {
            const auto& g = tmpl.at("grid");
            if (!g.is_object()) schema_error(where + ".grid must be an object");
            reject_unknown(g, {"start", "stop", "step"}, where + ".grid");
            for (const char* key : {"start", "stop", "step"}) {
                if (!g.contains(key)) schema_error(where + ".grid is missing '" + key + "'");
            }
            strengths = expand_grid(get_number(g, "start", 0), get_number(g, "stop", 0), get_number(g, "step", 0));
        } else {
            const auto& s = tmpl.at("strengths");
            if (!s.is_array() || s.empty()) schema_error(where + ".strengths must be a non-empty array");
            for (const auto& v : s) {
                if (!v.is_number()) schema_error(where + ".strengths must hold numbers");
                strengths.push_back(v.get<double>());
            }
        }
        for (std::size_t i = 0; i < strengths.size(); ++i) {
            if (!(strengths[i] >= 0.0 && strengths[i] <= 1.0)) {
                throw Error(ErrorCode::InvalidPlan, where + " strength " + std::to_string(strengths[i]) +
                                                        " lies outside [0, 1]");
            }
            if (i > 0 && !(strengths[i] > strengths[i - 1])) {
                throw Error(ErrorCode::InvalidPlan, where + " strengths must be strictly increasing");
            }
        }
        for (double s : strengths) {
            MergeRecipe r = recipe;
            r.strength = s;
            r.validate();
            if (!seen.insert(entry_path(r)).second) {
                throw Error(ErrorCode::InvalidPlan, "duplicate entry " + entry_path(r));
            }
            plan.recipes.push_back(r);
        }
    }
    return plan;
}

SweepPlan load_sweep_plan(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot read plan " + file.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) schema_error("plan " + file.string() + " is not valid JSON");
    return plan_sweep(doc, file.parent_path());
}

std::string_view status_name(EntryStatus status) {
    switch (status) {
        case EntryStatus::Pending: return "pending";
        case EntryStatus::Done: return "done";
        case EntryStatus::Failed: return "failed";
    }
    return "pending";
}

json to_json(const SweepManifest& manifest) {
    json entries = json::array();
    for (const auto& e : manifest.entries) {
        json item = {{"method", method_name(e.recipe.method)},
                     {"strength", e.recipe.strength},
                     {"output_path", e.output_path},
                     {"tensor_count", e.tensor_count},
                     {"content_digest", e.content_digest},
                     {"status", status_name(e.status)},
                     {"recipe", recipe_to_json(e.recipe)},
                     {"recipe_digest", e.recipe_digest}};
        if (!e.error.empty()) item["error"] = e.error;
        if (!e.diagnostics.empty()) {
            json diags = json::array();
            for (const auto& d : e.diagnostics) diags.push_back(diagnostic_json(d));
            item["diagnostics"] = diags;
        }
        entries.push_back(std::move(item));
    }
    return {{"toolkit_version", manifest.toolkit_version}, {"plan_digest", manifest.plan_digest}, {"entries", entries}};
}

SweepManifest manifest_from_json(const json& doc) {
    try {
        SweepManifest m;
        m.toolkit_version = doc.at("toolkit_version").get<std::string>();
        m.plan_digest = doc.at("plan_digest").get<std::string>();
        for (const auto& item : doc.at("entries")) {
            ManifestEntry e;
            e.recipe = read_recipe_fields(item.at("recipe"), MergeRecipe{});
            e.recipe.strength = item.at("recipe").at("strength").get<double>();
            e.recipe_digest = item.at("recipe_digest").get<std::string>();
            e.output_path = item.at("output_path").get<std::string>();
            e.tensor_count = item.at("tensor_count").get<std::size_t>();
            e.content_digest = item.at("content_digest").get<std::string>();
            const auto status = item.at("status").get<std::string>();
            if (status == "done") e.status = EntryStatus::Done;
            else if (status == "failed") e.status = EntryStatus::Failed;
            else if (status == "pending") e.status = EntryStatus::Pending;
            else schema_error("unknown entry status '" + status + "'");
            if (item.contains("error")) e.error = item.at("error").get<std::string>();
            m.entries.push_back(std::move(e));
        }
        return m;
    } catch (const json::exception& ex) {
        schema_error(std::string("malformed sweep manifest: ") + ex.what());
    }
}

std::optional<SweepManifest> read_manifest(const fs::path& output_root) {
    const fs::path file = output_root / kManifestName;
    if (!fs::exists(file)) return std::nullopt;
    std::ifstream in(file);
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) schema_error(file.string() + " is not valid JSON");
    return manifest_from_json(doc);
}

SweepRun execute_sweep(const SweepPlan& plan, const SweepOptions& options) {
    SweepRun run;
    SweepManifest& manifest = run.manifest;
    manifest.plan_digest = plan.digest();

    std::map<std::string, ManifestEntry> previous;
    if (auto old = read_manifest(plan.output_root)) {
        for (auto& e : old->entries) previous.emplace(e.output_path, std::move(e));
    }
    for (const auto& recipe : plan.recipes) {
        ManifestEntry e;
        e.recipe = recipe;
        e.recipe_digest = recipe_digest(plan, recipe);
        e.output_path = entry_path(recipe);
        if (auto it = previous.find(e.output_path);
            it != previous.end() && it->second.recipe_digest == e.recipe_digest && it->second.status == EntryStatus::Done) {
            std::string actual;
            try {
                actual = checkpoint_digest(plan.output_root / e.output_path);
            } catch (const Error&) {
            }
            if (actual == it->second.content_digest) {
                e.status = EntryStatus::Done;
                e.content_digest = actual;
                e.tensor_count = it->second.tensor_count;
            } else if (!options.rebuild_mismatched) {
                throw Error(ErrorCode::DigestMismatch, e.output_path + " no longer matches its recorded digest " +
                                                           it->second.content_digest);
            }
        }
        manifest.entries.push_back(std::move(e));
    }
    write_manifest(plan.output_root, manifest);

    std::optional<Checkpoint> direct, think, base;
    std::string open_error;
    try {
        direct = open_checkpoint(plan.direct, Role::Direct);
        think = open_checkpoint(plan.think, Role::Thinking);
        if (plan.base) base = open_checkpoint(*plan.base, Role::Base);
    } catch (const Error& e) {
        open_error = e.what();
    }
    const auto sidecars = sidecar_dir(plan);
    const MergeRunOptions merge_options{plan.dtype_policy, plan.shard_limit_bytes, plan.workers};

    for (auto& entry : manifest.entries) {
        if (entry.status == EntryStatus::Done) {
            ++run.entries_skipped;
            continue;
        }
        const fs::path out = plan.output_root / entry.output_path;
        entry.error.clear();
        entry.diagnostics.clear();
        try {
            if (!open_error.empty()) throw Error(ErrorCode::IoFailure, open_error);
            fs::remove_all(out);
            fs::create_directories(out);
            ++run.merges_executed;
            auto result = merge_checkpoints(entry.recipe, *direct, *think, base ? &*base : nullptr, out, merge_options);
            if (sidecars) copy_sidecars(*sidecars, out);
            entry.tensor_count = result.tensor_count;
            entry.diagnostics = std::move(result.diagnostics);
            entry.content_digest = checkpoint_digest(out);
            entry.status = EntryStatus::Done;
        } catch (const std::exception& ex) {
            entry.status = EntryStatus::Failed;
            entry.error = ex.what();
            entry.content_digest.clear();
            std::error_code ec;
            fs::remove_all(out, ec);
            ++run.entries_failed;
        }
        write_manifest(plan.output_root, manifest);
        if (options.after_entry) options.after_entry(entry);
    }
    return run;
}

} // namespace mergelab

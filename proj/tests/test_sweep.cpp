#include "doctest.h"

#include "fixtures.hpp"
#include "oracles.hpp"

#include "mergelab/digest.hpp"
#include "mergelab/error.hpp"
#include "mergelab/sweep.hpp"

#include "json.hpp"

#include <algorithm>
#include <random>

using namespace mergelab;
using fixture::RawTensor;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::IoFailure;
}

std::vector<float> random_values(std::size_t n, unsigned seed, bool integer_valued = false) {
    std::mt19937 gen(seed);
    std::normal_distribution<float> normal;
    std::uniform_int_distribution<int> small(-3, 3);
    std::vector<float> v(n);
    for (auto& x : v) x = integer_valued ? static_cast<float>(small(gen)) : normal(gen);
    return v;
}

struct ToyTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> values;
};

// Writes a parent directory holding model.safetensors plus two sidecar files.
void write_parent(const fs::path& dir, std::vector<ToyTensor> tensors, const std::string& tag, bool reverse = false) {
    fs::create_directories(dir);
    if (reverse) std::reverse(tensors.begin(), tensors.end());
    std::vector<RawTensor> raw;
    for (const auto& t : tensors) raw.push_back({t.name, "F32", t.shape, fixture::f32_bytes(t.values)});
    fixture::write_raw(dir / kSingleShardName, raw);
    fixture::write_text(dir / "config.json", "{\"parent\": \"" + tag + "\"}\n");
    fixture::write_text(dir / "tokenizer_config.json", "{\"chat_template\": \"" + tag + "\"}\n");
}

struct Parents {
    std::vector<ToyTensor> direct, think, base;
};

Parents toy_parents(unsigned seed, bool integer_valued = false) {
    Parents p;
    const std::vector<std::pair<std::string, std::vector<std::int64_t>>> layout = {
        {"layers.0.mlp.weight", {6, 5}}, {"layers.0.norm", {5}}, {"layers.1.attn.weight", {4, 5}}};
    unsigned s = seed;
    for (const auto& [name, shape] : layout) {
        std::size_t n = 1;
        for (auto d : shape) n *= static_cast<std::size_t>(d);
        p.base.push_back({name, shape, random_values(n, s++, integer_valued)});
        p.direct.push_back({name, shape, random_values(n, s++, integer_valued)});
        p.think.push_back({name, shape, random_values(n, s++, integer_valued)});
    }
    return p;
}

json plan_doc(const fs::path& root, json methods) {
    return {{"direct", (root / "direct").string()},
            {"think", (root / "think").string()},
            {"base", (root / "base").string()},
            {"output_root", (root / "out").string()},
            {"dtype_policy", "force_f32"},
            {"methods", std::move(methods)}};
}

void write_all(const fs::path& root, const Parents& p, bool reverse = false) {
    write_parent(root / "direct", p.direct, "direct", reverse);
    write_parent(root / "think", p.think, "think", reverse);
    write_parent(root / "base", p.base, "base", reverse);
}

std::vector<float> flat(const Checkpoint& ckpt) {
    std::vector<float> out;
    for (const auto& name : ckpt.names()) {
        const auto t = load_tensor(ckpt, name);
        out.insert(out.end(), t.values.begin(), t.values.end());
    }
    return out;
}

std::vector<float> flat(const std::vector<ToyTensor>& tensors) {
    auto sorted = tensors;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    std::vector<float> out;
    for (const auto& t : sorted) out.insert(out.end(), t.values.begin(), t.values.end());
    return out;
}

} // namespace

TEST_CASE("grid expansion") {
    const auto coarse = expand_grid(0.0, 1.0, 0.1);
    REQUIRE(coarse.size() == 11);
    CHECK(coarse.front() == 0.0);
    CHECK(coarse[3] == 0.3);
    CHECK(coarse.back() == 1.0);
    const auto fine = expand_grid(0.6, 0.7, 0.01);
    REQUIRE(fine.size() == 11);
    std::vector<std::string> labels;
    for (double s : fine) labels.push_back(strength_label(s));
    CHECK(labels.front() == "0.6000");
    CHECK(labels[3] == "0.6300");
    CHECK(labels.back() == "0.7000");
    CHECK(std::adjacent_find(labels.begin(), labels.end()) == labels.end());
    CHECK(code_of([] { expand_grid(0.0, 1.0, 0.3); }) == ErrorCode::InvalidPlan);
    CHECK(code_of([] { expand_grid(0.0, 1.0, 0.0); }) == ErrorCode::InvalidPlan);
    CHECK(code_of([] { expand_grid(0.5, 0.4, 0.1); }) == ErrorCode::InvalidPlan);
}

TEST_CASE("plan validation") {
    fixture::ScratchDir dir("plan");
    write_all(dir.path(), toy_parents(1));

    const auto plan = plan_sweep(plan_doc(dir.path(), {{{"method", "weighted_average"},
                                                        {"grid", {{"start", 0}, {"stop", 1}, {"step", 0.1}}}}}));
    CHECK(plan.recipes.size() == 11);
    CHECK(plan.dtype_policy == DtypePolicy::ForceF32);
    CHECK(plan.sidecars == SidecarSource::Thinking);
    CHECK(plan.recipes[0].drop_rate == 0.2);

    auto no_base = plan_doc(dir.path(), {{{"method", "dare"}, {"strengths", {0.5}}}});
    no_base.erase("base");
    CHECK(code_of([&] { plan_sweep(no_base); }) == ErrorCode::BaseRequired);
    CHECK(kind_of(ErrorCode::BaseRequired) == ErrorKind::Usage);

    CHECK(code_of([&] { plan_sweep(plan_doc(dir.path(), {{{"method", "slerp"}, {"strengths", {0.5, 0.4}}}})); }) ==
          ErrorCode::InvalidPlan);
    CHECK(code_of([&] { plan_sweep(plan_doc(dir.path(), {{{"method", "slerp"}, {"strengths", {0.5, 1.2}}}})); }) ==
          ErrorCode::InvalidPlan);
    CHECK(code_of([&] {
              plan_sweep(plan_doc(dir.path(), {{{"method", "slerp"}, {"strengths", {0.5}}},
                                               {{"method", "slerp"}, {"strengths", {0.5}}, {"seed", 3}}}));
          }) == ErrorCode::InvalidPlan);
    CHECK(code_of([&] {
              plan_sweep(plan_doc(dir.path(), {{{"method", "slerp"}, {"strengths", {0.5}}, {"strenght", 1}}}));
          }) == ErrorCode::SchemaViolation);
    CHECK(code_of([&] { plan_sweep(plan_doc(dir.path(), {{{"method", "magic"}, {"strengths", {0.5}}}})); }) ==
          ErrorCode::SchemaViolation);
    CHECK(code_of([&] {
              plan_sweep(plan_doc(dir.path(), {{{"method", "dare"}, {"strengths", {0.5}}, {"drop_rate", 1.0}}}));
          }) == ErrorCode::InvalidParameter);
    auto missing = plan_doc(dir.path(), {{{"method", "slerp"}, {"strengths", {0.5}}}});
    missing["think"] = (dir / "nowhere").string();
    CHECK(code_of([&] { plan_sweep(missing); }) == ErrorCode::IoFailure);

    // relative paths resolve against the plan file's directory
    json rel = {{"direct", "direct"}, {"think", "think"}, {"output_root", "out"},
                {"methods", {{{"method", "slerp"}, {"strengths", {0.25}}}}}};
    fixture::write_text(dir / "plan.json", rel.dump());
    const auto loaded = load_sweep_plan(dir / "plan.json");
    CHECK(loaded.output_root == dir / "out");
    CHECK(loaded.recipes.size() == 1);
}

TEST_CASE("endpoint identity through the full pipeline") {
    fixture::ScratchDir dir("sweep_endpoints");
    const auto parents = toy_parents(7);
    write_all(dir.path(), parents);
    const auto plan = plan_sweep(plan_doc(dir.path(), {{{"method", "weighted_average"}, {"strengths", {0.0, 1.0}}}}));
    const auto run = execute_sweep(plan);
    CHECK(run.merges_executed == 2);
    REQUIRE(run.manifest.entries.size() == 2);
    for (const auto& e : run.manifest.entries) {
        CHECK(e.status == EntryStatus::Done);
        CHECK(e.tensor_count == 3);
        CHECK(e.content_digest.size() == 64);
    }
    const auto at0 = open_checkpoint(dir / "out/weighted_average/0.0000", Role::Merged);
    const auto at1 = open_checkpoint(dir / "out/weighted_average/1.0000", Role::Merged);
    CHECK(flat(at0) == flat(parents.direct));
    CHECK(flat(at1) == flat(parents.think));
    for (const auto& name : at0.names()) {
        CHECK(at0.meta(name).shape == open_checkpoint(dir / "direct", Role::Direct).meta(name).shape);
    }
    // sidecars come from the thinking parent, byte for byte
    CHECK(file_sha256(dir / "out/weighted_average/0.0000/config.json") == file_sha256(dir / "think/config.json"));
    CHECK(file_sha256(dir / "out/weighted_average/1.0000/tokenizer_config.json") ==
          file_sha256(dir / "think/tokenizer_config.json"));
    CHECK(fs::exists(dir / "out" / kManifestName));
    CHECK_FALSE(fs::exists(dir / "out" / (std::string(kManifestName) + ".tmp")));

    const auto stored = read_manifest(dir / "out");
    REQUIRE(stored);
    CHECK(stored->plan_digest == plan.digest());
    CHECK(stored->toolkit_version == kToolkitVersion);
    CHECK(stored->entries[1].content_digest == run.manifest.entries[1].content_digest);
}

TEST_CASE("interrupted sweep resumes with only the remaining merges") {
    fixture::ScratchDir dir("sweep_resume");
    write_all(dir.path(), toy_parents(11));
    const auto plan = plan_sweep(
        plan_doc(dir.path(), {{{"method", "dare"}, {"grid", {{"start", 0}, {"stop", 1}, {"step", 0.1}}}}}));
    REQUIRE(plan.recipes.size() == 11);

    struct Interrupt {};
    SweepOptions stop_after_three;
    int seen = 0;
    stop_after_three.after_entry = [&](const ManifestEntry&) {
        if (++seen == 3) throw Interrupt{};
    };
    CHECK_THROWS_AS(execute_sweep(plan, stop_after_three), Interrupt);
    const auto partial = read_manifest(dir / "out");
    REQUIRE(partial);
    CHECK(std::count_if(partial->entries.begin(), partial->entries.end(),
                        [](const auto& e) { return e.status == EntryStatus::Done; }) == 3);

    const auto resumed = execute_sweep(plan);
    CHECK(resumed.merges_executed == 8);
    CHECK(resumed.entries_skipped == 3);

    const auto again = execute_sweep(plan);
    CHECK(again.merges_executed == 0);
    CHECK(again.entries_skipped == 11);

    // a fresh sweep of the same plan reproduces every digest
    fixture::ScratchDir other("sweep_resume_fresh");
    write_all(other.path(), toy_parents(11));
    auto fresh_doc = plan_doc(other.path(), {{{"method", "dare"}, {"grid", {{"start", 0}, {"stop", 1}, {"step", 0.1}}}}});
    const auto fresh = execute_sweep(plan_sweep(fresh_doc));
    for (std::size_t i = 0; i < 11; ++i) {
        CHECK(fresh.manifest.entries[i].content_digest == again.manifest.entries[i].content_digest);
    }
}

TEST_CASE("digests ignore parent tensor order and worker count") {
    const auto parents = toy_parents(21);
    const json methods = {{{"method", "dare"}, {"strengths", {0.3, 0.7}}, {"seed", 5}},
                          {{"method", "ties"}, {"strengths", {0.5}}},
                          {{"method", "slerp"}, {"strengths", {0.5}}},
                          {{"method", "lore"}, {"strengths", {0.5}}},
                          {{"method", "topk_replace"}, {"strengths", {0.5}}, {"topk_scope", "global"}}};
    fixture::ScratchDir a("sweep_order_a");
    fixture::ScratchDir b("sweep_order_b");
    write_all(a.path(), parents, false);
    write_all(b.path(), parents, true);
    auto doc_b = plan_doc(b.path(), methods);
    doc_b["workers"] = 3;
    const auto run_a = execute_sweep(plan_sweep(plan_doc(a.path(), methods)));
    const auto run_b = execute_sweep(plan_sweep(doc_b));
    REQUIRE(run_a.manifest.entries.size() == run_b.manifest.entries.size());
    for (std::size_t i = 0; i < run_a.manifest.entries.size(); ++i) {
        CHECK(run_a.manifest.entries[i].status == EntryStatus::Done);
        CHECK(run_a.manifest.entries[i].content_digest == run_b.manifest.entries[i].content_digest);
    }
    CHECK(run_a.manifest.entries[3].diagnostics.size() == 3); // slerp reports every tensor
}

TEST_CASE("tampered outputs are detected on resume") {
    fixture::ScratchDir dir("sweep_tamper");
    write_all(dir.path(), toy_parents(3));
    const auto plan = plan_sweep(plan_doc(dir.path(), {{{"method", "weighted_average"}, {"strengths", {0.2, 0.4}}}}));
    execute_sweep(plan);
    {
        std::fstream f(dir / "out/weighted_average/0.4000" / kSingleShardName, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-1, std::ios::end);
        f.put('\x7f');
    }
    CHECK(code_of([&] { execute_sweep(plan); }) == ErrorCode::DigestMismatch);
    SweepOptions rebuild;
    rebuild.rebuild_mismatched = true;
    const auto run = execute_sweep(plan, rebuild);
    CHECK(run.merges_executed == 1);
    CHECK(run.entries_skipped == 1);
}

TEST_CASE("a failing entry does not stop the sweep") {
    fixture::ScratchDir dir("sweep_failed");
    auto parents = toy_parents(5);
    std::fill(parents.direct[1].values.begin(), parents.direct[1].values.end(), 0.0f); // slerp needs non-zero norms
    write_all(dir.path(), parents);
    const auto plan = plan_sweep(plan_doc(dir.path(), {{{"method", "slerp"}, {"strengths", {0.5}}},
                                                       {{"method", "weighted_average"}, {"strengths", {0.5}}}}));
    const auto run = execute_sweep(plan);
    CHECK(run.entries_failed == 1);
    CHECK(run.manifest.entries[0].status == EntryStatus::Failed);
    CHECK(run.manifest.entries[0].error.find("norm") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out/slerp/0.5000"));
    CHECK(run.manifest.entries[1].status == EntryStatus::Done);
    // failed entries are retried on the next run
    CHECK(execute_sweep(plan).merges_executed == 1);
}

TEST_CASE("checkpoint-wide top-k matches an oracle over the concatenated parents") {
    fixture::ScratchDir dir("sweep_global");
    const auto parents = toy_parents(31, true); // small integers: many exact ties across tensors
    write_all(dir.path(), parents);
    const auto direct = open_checkpoint(dir / "direct", Role::Direct);
    const auto think = open_checkpoint(dir / "think", Role::Thinking);
    const auto base = open_checkpoint(dir / "base", Role::Base);
    const auto d = flat(parents.direct), t = flat(parents.think), b = flat(parents.base);

    for (double k : {0.05, 0.1, 0.37, 1.0}) {
        MergeRecipe r;
        r.topk_scope = TopKScope::Global;
        r.top_k_fraction = k;
        const std::pair<MergeMethod, oracle::Custom> kinds[] = {
            {MergeMethod::TopKReplace, oracle::Custom::Replace},
            {MergeMethod::TopKDiffAvg, oracle::Custom::DiffAverage},
            {MergeMethod::GlobalAvgTopKOverride, oracle::Custom::AverageOverride}};
        for (const auto& [method, kind] : kinds) {
            r.method = method;
            const auto out = merge_checkpoints(r, direct, think, nullptr, dir / "m.safetensors");
            CHECK(flat(out.checkpoint) == oracle::custom(kind, d, t, k));
        }
    }
    for (double drop : {0.0, 0.3, 0.8}) {
        MergeRecipe r;
        r.topk_scope = TopKScope::Global;
        r.drop_rate = drop;
        r.strength = 0.4;
        r.method = MergeMethod::Ties;
        CHECK(flat(merge_checkpoints(r, direct, think, &base, dir / "m.safetensors").checkpoint) ==
              oracle::ties(d, t, b, 0.4, 1.0 - drop));
        r.method = MergeMethod::Twin;
        CHECK(flat(merge_checkpoints(r, direct, think, &base, dir / "m.safetensors").checkpoint) ==
              oracle::twin(d, t, b, 0.4, drop));
    }
}

TEST_CASE("merge_checkpoints rejects misaligned parents") {
    fixture::ScratchDir dir("sweep_misaligned");
    auto parents = toy_parents(2);
    write_all(dir.path(), parents);
    parents.think.pop_back();
    write_parent(dir / "short", parents.think, "short");
    const auto direct = open_checkpoint(dir / "direct", Role::Direct);
    const auto think = open_checkpoint(dir / "short", Role::Thinking);
    CHECK(code_of([&] { merge_checkpoints(MergeRecipe{}, direct, think, nullptr, dir / "m.safetensors"); }) ==
          ErrorCode::TensorSetMismatch);
    MergeRecipe dare;
    dare.method = MergeMethod::Dare;
    CHECK(code_of([&] { merge_checkpoints(dare, direct, direct, nullptr, dir / "m.safetensors"); }) ==
          ErrorCode::BaseRequired);
}

#include "vplan/experiment.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vplan;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::vector<std::uint64_t> seeds;
    int stage = 0;
    std::string cell;
    std::string in_ckpt;
    std::string ckpt;
    std::vector<int> horizons;
    bool teacher_forcing = false;
    bool traces = false;
    std::string manifest;
    bool quiet = false;
};

ExperimentConfig resolve(const Options& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
    if (c.cells.empty()) c.cells.push_back({"main", true, c.stage3.head_mode, c.stage3.K, c.stage3.mask_mode});
    if (!o.out.empty()) c.out_dir = o.out;
    if (!o.seeds.empty()) c.seeds = o.seeds;
    c.validate();
    return c;
}

std::ostream* progress(const Options& o) { return o.quiet ? nullptr : &std::cerr; }

void write_config_copy(const ExperimentConfig& c) {
    fs::create_directories(c.out_dir);
    write_file((fs::path(c.out_dir) / "config.json").string(), to_json(c).dump(2) + "\n");
}

int cmd_gen_corpus(const Options& o) {
    const ExperimentConfig c = resolve(o);
    write_config_copy(c);
    const Corpus corp = generate_corpus(c);
    const fs::path dir = fs::path(c.out_dir) / "corpus";
    fs::create_directories(dir);
    save_world(corp.world, (dir / "world.json").string());
    save_episodes(corp.train, (dir / "train.jsonl").string(), FeatureEncoding::f32_sidecar);
    save_episodes(corp.test, (dir / "test.jsonl").string(), FeatureEncoding::f32_sidecar);
    std::size_t violations = 0;
    for (const auto* split : {&corp.train, &corp.test}) {
        for (const auto& ep : *split) {
            violations += validate_episode(ep, corp.world.schemas.at(static_cast<std::size_t>(ep.schema_id))).size();
        }
    }
    const json meta = {{"key", corp.key},
                       {"hash", corp.hash},
                       {"n_train", corp.train.size()},
                       {"n_test", corp.test.size()},
                       {"vocab_size", corp.world.vocab.size()},
                       {"n_actions", corp.world.vocab.actions.size()},
                       {"violations", violations}};
    write_file((dir / "corpus.json").string(), meta.dump(2) + "\n");
    std::cout << meta.dump(2) << "\n";
    if (violations != 0) throw DataError("generated corpus has " + std::to_string(violations) + " violations");
    return 0;
}

int cmd_train(const Options& o) {
    const ExperimentConfig c = resolve(o);
    if (c.seeds.size() != 1) throw UsageError("train takes exactly one --seed");
    if (o.stage < 1 || o.stage > 3) throw UsageError("--stage must be 1, 2 or 3");
    write_config_copy(c);
    Pipeline p(c, c.out_dir, progress(o));
    const std::uint64_t seed = c.seeds.front();
    const AblationCell* cell = nullptr;
    if (o.stage == 3) {
        if (o.cell.empty() && c.cells.size() != 1) throw UsageError("stage 3 needs --cell when the config has several");
        cell = o.cell.empty() ? &c.cells.front() : &p.cell(o.cell);
    }
    std::string in = o.in_ckpt;
    if (in.empty() && o.stage > 1) in = p.checkpoint_path(o.stage == 3 && !cell->ata ? 1 : o.stage - 1, seed, nullptr);
    const std::string out = p.checkpoint_path(o.stage, seed, cell);
    p.train_stage_from(o.stage, seed, cell, in, out);
    std::cout << json{{"stage", o.stage}, {"seed", seed}, {"checkpoint", out}, {"key", p.stage_key(o.stage, seed, cell)}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_eval(const Options& o) {
    const ExperimentConfig c = resolve(o);
    Pipeline p(c, c.out_dir, progress(o));
    const std::uint64_t seed = c.seeds.front();
    const Corpus& corp = p.corpus();
    std::optional<Model> model;
    std::string source = "teacher-forcing";
    if (!o.teacher_forcing) {
        std::string path = o.ckpt;
        if (path.empty()) {
            if (o.cell.empty() && c.cells.size() != 1) throw UsageError("eval needs --ckpt or --cell");
            const AblationCell& cell = o.cell.empty() ? c.cells.front() : p.cell(o.cell);
            path = p.checkpoint_path(3, seed, &cell);
        }
        if (!fs::exists(path)) throw DataError("missing checkpoint: " + path);
        model = load_checkpoint(path).model;
        if (model->config.vocab_size != p.model_config().vocab_size) {
            throw DataError("checkpoint vocabulary does not match the corpus: " + path);
        }
        source = path;
    }
    const auto& special = corp.world.vocab.special;
    // Teacher-forced responses are exact labels, so the fallback table is never consulted.
    const Mat<float> table = model ? Mat<float>(model->params.at("tok_emb").mat())
                                   : Mat<float>(Mat<float>::Zero(corp.world.vocab.size(), 1));
    const ActionMapper mapper(corp.world.vocab, table);
    const std::vector<int> horizons = o.horizons.empty() ? c.corpus.horizons : o.horizons;
    json result = {{"source", source}, {"seed", seed}, {"horizons", json::object()}};
    std::vector<std::vector<std::string>> rows;
    for (int h : horizons) {
        if (h < 1 || h > c.corpus.min_future) throw UsageError("--horizon must lie in [1, min_future]");
        const auto samples = p.test_samples(h);
        const PlanDecoder dec = model ? model_plan_decoder(*model, special) : teacher_forcing_decoder();
        const EvalReport rep = run_eval(dec, mapper, samples, corp.world.vocab);
        json hj = to_json(rep, o.traces);
        if (c.task == TaskMode::lta) {
            SampleDecoder sd;
            if (model) {
                sd = model_sample_decoder(*model, special, c.ed_temperature, seed);
            } else {
                sd = [](const InstructionSample& s, int n) {
                    return std::vector<std::vector<TokenId>>(static_cast<std::size_t>(n), s.response_tokens);
                };
            }
            hj["ed"] = to_json(edit_distance_report(sd, mapper, samples, corp.world.vocab, c.ed_samples));
        }
        result["horizons"][std::to_string(h)] = hj;
        auto pct = [](double x) {
            std::ostringstream s;
            s << std::fixed << std::setprecision(2) << 100.0 * x;
            return s.str();
        };
        rows.push_back({std::to_string(h), pct(rep.overall.sr), pct(rep.overall.macc), pct(rep.overall.miou),
                        std::to_string(rep.overall.n_samples)});
    }
    fs::create_directories(c.out_dir);
    const std::string out_path = (fs::path(c.out_dir) / (o.teacher_forcing ? "eval_teacher_forcing.json" : "eval.json")).string();
    write_file(out_path, result.dump(2) + "\n");
    std::cout << format_table({"T", "SR", "mAcc", "mIoU", "n"}, rows);
    return 0;
}

int cmd_ablate(const Options& o) {
    const ExperimentConfig c = resolve(o);
    Pipeline p(c, c.out_dir, progress(o));
    const RunManifest m = p.ablate();
    std::cout << render_report(m);
    return 0;
}

int cmd_report(const Options& o) {
    std::string path = o.manifest;
    if (path.empty()) {
        if (o.out.empty()) throw UsageError("report needs --manifest or --out");
        path = (fs::path(o.out) / "manifest.json").string();
    }
    const RunManifest m = verify_manifest(path);
    std::cout << render_report(m);
    return 0;
}

int fail(const char* kind, int code, const std::string& message) {
    std::cerr << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Instruction-tuned visual planning models: corpus generation, staged training, evaluation"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Experiment config (JSON with comments)");
        sub->add_option("--out", o.out, "Output directory (overrides out_dir)");
        sub->add_flag("--quiet", o.quiet, "No progress on stderr");
    };

    auto* gen = app.add_subcommand("gen-corpus", "Generate and validate the episode corpus");
    common(gen);

    auto* train = app.add_subcommand("train", "Train one stage for one seed");
    common(train);
    train->add_option("--stage", o.stage, "Stage: 1 align, 2 auxiliary pretraining, 3 primary fine-tuning")
        ->required()
        ->check(CLI::Range(1, 3));
    train->add_option("--seed", o.seeds, "Run seed")->expected(1);
    train->add_option("--cell", o.cell, "Ablation cell for stage 3");
    train->add_option("--in", o.in_ckpt, "Prerequisite checkpoint (default: the previous stage in --out)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    common(eval);
    eval->add_option("--seed", o.seeds, "Run seed")->expected(1);
    eval->add_option("--cell", o.cell, "Ablation cell whose stage-3 checkpoint to evaluate");
    eval->add_option("--ckpt", o.ckpt, "Checkpoint path");
    eval->add_option("--horizon", o.horizons, "Planning horizon(s)");
    eval->add_flag("--teacher-forcing", o.teacher_forcing, "Score ground-truth responses (harness check)");
    eval->add_flag("--traces", o.traces, "Include per-sample traces in eval.json");

    auto* ablate = app.add_subcommand("ablate", "Run every cell over every seed and write the report");
    common(ablate);
    ablate->add_option("--seed", o.seeds, "Seeds (overrides the config)");

    auto* report = app.add_subcommand("report", "Verify a manifest and print its tables");
    report->add_option("--manifest", o.manifest, "Path to manifest.json");
    report->add_option("--out", o.out, "Run directory holding manifest.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", 1, e.what());
    }

    try {
        if (*gen) return cmd_gen_corpus(o);
        if (*train) return cmd_train(o);
        if (*eval) return cmd_eval(o);
        if (*ablate) return cmd_ablate(o);
        if (*report) return cmd_report(o);
    } catch (const UsageError& e) {
        return fail("usage", 1, e.what());
    } catch (const DataError& e) {
        return fail("data", 2, e.what());
    } catch (const NumericError& e) {
        return fail("numeric", 3, e.what());
    } catch (const std::exception& e) {
        return fail("data", 2, e.what());
    }
    return 1;
}

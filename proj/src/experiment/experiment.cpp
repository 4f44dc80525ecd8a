#include "vplan/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace vplan {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(TaskMode m) { return m == TaskMode::vpa ? "vpa" : "lta"; }

TaskMode task_mode_from_string(std::string_view s) {
    if (s == "vpa") return TaskMode::vpa;
    if (s == "lta") return TaskMode::lta;
    throw DataError("unknown task: " + std::string(s));
}

std::string json_hash(const json& j) { return sha256_hex(j.dump()); }

namespace {

void check_keys(const json& j, const json& allowed, const std::string& where) {
    if (!j.is_object()) throw DataError(where + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        if (!allowed.contains(k)) throw DataError(where + ": unknown key '" + k + "'");
    }
}

json stage_json(const StageConfig& c) {
    json j = to_json(c);
    j.erase("stage");
    j.erase("seed");
    return j;
}

json cell_json(const AblationCell& c) {
    return {{"name", c.name},
            {"ata", c.ata},
            {"head_mode", std::string(to_string(c.head_mode))},
            {"K", c.K},
            {"mask_mode", std::string(to_string(c.mask_mode))}};
}

AblationCell cell_from_json(const json& j) {
    check_keys(j, cell_json(AblationCell{}), "cell");
    AblationCell c;
    c.name = j.value("name", c.name);
    c.ata = j.value("ata", c.ata);
    if (j.contains("head_mode")) c.head_mode = head_mode_from_string(j.at("head_mode").get<std::string>());
    c.K = j.value("K", c.K);
    if (j.contains("mask_mode")) c.mask_mode = mask_mode_from_string(j.at("mask_mode").get<std::string>());
    return c;
}

json corpus_json(const CorpusConfig& c) {
    json w = json::object();
    for (const auto& [t, v] : c.weights) w[std::string(to_string(t))] = v;
    return {{"seed", c.seed},
            {"n_train", c.n_train},
            {"n_test", c.n_test},
            {"test_fraction", c.test_fraction},
            {"min_future", c.min_future},
            {"horizons", c.horizons},
            {"n_align_pairs", c.n_align_pairs},
            {"include_sp", c.include_sp},
            {"weights", w}};
}

CorpusConfig corpus_from_json(const json& j) {
    CorpusConfig c;
    check_keys(j, corpus_json(c), "corpus");
    c.seed = j.value("seed", c.seed);
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.min_future = j.value("min_future", c.min_future);
    c.horizons = j.value("horizons", c.horizons);
    c.n_align_pairs = j.value("n_align_pairs", c.n_align_pairs);
    c.include_sp = j.value("include_sp", c.include_sp);
    if (j.contains("weights")) {
        c.weights.clear();
        for (const auto& [k, v] : j.at("weights").items()) c.weights[task_type_from_string(k)] = v.get<double>();
    }
    return c;
}

StageConfig stage_from(const json& j, Stage stage, const std::string& where) {
    check_keys(j, stage_json(default_stage_config(stage)), where);
    return stage_config_from_json(j, stage);
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

void write_atomic(const std::string& path, const std::string& contents) {
    fs::create_directories(fs::path(path).parent_path());
    const std::string tmp = path + ".tmp";
    write_file(tmp, contents);
    fs::rename(tmp, path);
}

json metrics_json(const MetricsReport& r) { return to_json(r); }

MetricsReport metrics_from_json(const json& j) {
    MetricsReport r;
    r.sr = j.at("sr");
    r.macc = j.at("macc");
    r.miou = j.at("miou");
    r.n_samples = j.at("n_samples");
    r.horizon = j.at("horizon");
    return r;
}

EDReport ed_from_json(const json& j) {
    EDReport r;
    r.ed_verb = j.at("ed_verb");
    r.ed_noun = j.at("ed_noun");
    r.ed_action = j.at("ed_action");
    r.n_sequences = j.at("n_sequences");
    r.horizon = j.at("horizon");
    r.n_samples = j.at("n_samples");
    return r;
}

json cell_metrics_json(const CellMetrics& m) {
    json h = json::object();
    for (const auto& [hz, r] : m.by_horizon) h[std::to_string(hz)] = metrics_json(r);
    json j = {{"horizons", h}};
    if (m.ed) j["ed"] = to_json(*m.ed);
    return j;
}

CellMetrics cell_metrics_from_json(const json& j) {
    CellMetrics m;
    for (const auto& [k, v] : j.at("horizons").items()) m.by_horizon[std::stoi(k)] = metrics_from_json(v);
    if (j.contains("ed")) m.ed = ed_from_json(j.at("ed"));
    return m;
}

// Runs fn(0..n-1) on up to `workers` threads; rethrows the first failure.
template <class F>
void parallel_for(int n, int workers, F fn) {
    if (workers <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (int w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&] {
            for (int i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mu);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

std::string stage_tag(int stage) {
    return std::string(to_string(stage == 1 ? Stage::ALIGN : stage == 2 ? Stage::AUX_PRETRAIN : Stage::PRIMARY_FINETUNE));
}

}  // namespace

// --- configuration ----------------------------------------------------------

std::vector<AblationCell> default_ablation_cells(int K, HeadMode mtp_mode) {
    return {{"ntp_noata", false, HeadMode::NTP, 0, MaskMode::FULL},
            {"ntp_ata", true, HeadMode::NTP, 0, MaskMode::FULL},
            {"mtp_noata", false, mtp_mode, K, MaskMode::FULL},
            {"mtp_ata", true, mtp_mode, K, MaskMode::FULL},
            {"partial_ata", true, mtp_mode, K, MaskMode::PARTIAL}};
}

void ExperimentConfig::validate() const {
    world.validate();
    if (name.empty()) throw DataError("experiment name must not be empty");
    if (seeds.empty()) throw DataError("seeds must not be empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw DataError("duplicate seeds");
    if (out_dir.empty()) throw DataError("out_dir must not be empty");
    if (corpus.n_train < 1 || corpus.n_test < 1) throw DataError("corpus needs at least one train and one test episode");
    if (corpus.n_align_pairs < 1) throw DataError("n_align_pairs must be >= 1");
    if (corpus.horizons.empty()) throw DataError("horizons must not be empty");
    for (int h : corpus.horizons) {
        if (h < 1 || h > corpus.min_future) {
            throw DataError("horizon " + std::to_string(h) + " must lie in [1, min_future=" +
                            std::to_string(corpus.min_future) + "]");
        }
    }
    if (ed_samples < 1) throw DataError("ed_samples must be >= 1");
    if (!(ed_temperature >= 0.0)) throw DataError("ed_temperature must be >= 0");
    if (stage1.stage != Stage::ALIGN || stage2.stage != Stage::AUX_PRETRAIN || stage3.stage != Stage::PRIMARY_FINETUNE) {
        throw DataError("stage configs are out of order");
    }
    try {
        stage1.validate();
        stage2.validate();
        stage3.validate();
    } catch (const UsageError& e) {
        throw DataError(e.what());
    }
    std::set<std::string> names;
    for (const auto& c : cells) {
        if (c.name.empty() || c.name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-") !=
                                  std::string::npos) {
            throw DataError("cell names must be non-empty and use [A-Za-z0-9_-]: '" + c.name + "'");
        }
        if (!names.insert(c.name).second) throw DataError("duplicate cell name " + c.name);
        if (c.head_mode == HeadMode::NTP && c.K != 0) throw DataError("cell " + c.name + ": NTP requires K == 0");
        if (c.head_mode != HeadMode::NTP && c.K < 1) throw DataError("cell " + c.name + ": MTP needs K >= 1");
    }
}

json to_json(const ExperimentConfig& c) {
    json cells = json::array();
    for (const auto& cell : c.cells) cells.push_back(cell_json(cell));
    return {{"name", c.name},
            {"task", std::string(to_string(c.task))},
            {"world", to_json(c.world)},
            {"corpus", corpus_json(c.corpus)},
            {"model", to_json(c.model)},
            {"stage1", stage_json(c.stage1)},
            {"stage2", stage_json(c.stage2)},
            {"stage3", stage_json(c.stage3)},
            {"cells", cells},
            {"seeds", c.seeds},
            {"out_dir", c.out_dir},
            {"ed_samples", c.ed_samples},
            {"ed_temperature", c.ed_temperature}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        check_keys(j, to_json(c), "config");
        c.name = j.value("name", c.name);
        if (j.contains("task")) c.task = task_mode_from_string(j.at("task").get<std::string>());
        if (j.contains("world")) {
            check_keys(j.at("world"), to_json(WorldConfig{}), "world");
            c.world = world_config_from_json(j.at("world"));
        }
        if (j.contains("corpus")) c.corpus = corpus_from_json(j.at("corpus"));
        if (j.contains("model")) {
            check_keys(j.at("model"), to_json(ModelConfig{}), "model");
            c.model = model_config_from_json(j.at("model"));
        }
        if (j.contains("stage1")) c.stage1 = stage_from(j.at("stage1"), Stage::ALIGN, "stage1");
        if (j.contains("stage2")) c.stage2 = stage_from(j.at("stage2"), Stage::AUX_PRETRAIN, "stage2");
        if (j.contains("stage3")) c.stage3 = stage_from(j.at("stage3"), Stage::PRIMARY_FINETUNE, "stage3");
        if (j.contains("cells")) {
            for (const auto& cj : j.at("cells")) c.cells.push_back(cell_from_json(cj));
        }
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        c.out_dir = j.value("out_dir", c.out_dir);
        c.ed_samples = j.value("ed_samples", c.ed_samples);
        c.ed_temperature = j.value("ed_temperature", c.ed_temperature);
    } catch (const json::exception& e) {
        throw DataError(std::string("config: ") + e.what());
    }
    if (c.cells.empty()) {
        c.cells.push_back({"main", true, c.stage3.head_mode, c.stage3.K, c.stage3.mask_mode});
    }
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("config file not found: " + path);
    return experiment_config_from_json(parse_json(read_file(path), path));
}

StageConfig stage_config_for(const ExperimentConfig& c, int stage, std::uint64_t seed, const AblationCell* cell) {
    StageConfig s = stage == 1 ? c.stage1 : stage == 2 ? c.stage2 : c.stage3;
    s.seed = substream(seed, stream::shuffle, 1000 + static_cast<std::uint64_t>(stage))();
    if (stage == 3 && cell) {
        s.head_mode = cell->head_mode;
        s.K = cell->K;
        s.mask_mode = cell->mask_mode;
    }
    return s;
}

// --- corpus -----------------------------------------------------------------

Corpus generate_corpus(const ExperimentConfig& c) {
    Corpus out;
    out.world = generate_world(c.world);
    CutPolicy cut;
    cut.min_future = c.corpus.min_future;
    auto split = sample_split(out.world, c.corpus.n_train, c.corpus.n_test, c.corpus.test_fraction, c.corpus.seed, cut);
    out.train = std::move(split.train);
    out.test = std::move(split.test);
    out.key = json_hash({{"world", to_json(c.world)}, {"corpus", corpus_json(c.corpus)}, {"task", to_string(c.task)}});
    out.hash = sha256_hex(hash_episodes(out.train) + hash_episodes(out.test));
    return out;
}

// --- manifest ---------------------------------------------------------------

json to_json(const RunManifest& m) {
    json runs = json::array();
    for (const auto& r : m.runs) {
        runs.push_back({{"seed", r.seed},
                        {"cell", r.cell},
                        {"checkpoints", r.checkpoints},
                        {"metrics", r.metrics},
                        {"summary", cell_metrics_json(r.summary)}});
    }
    return {{"tool_version", m.tool_version}, {"config", m.config},      {"config_hash", m.config_hash},
            {"corpus_hash", m.corpus_hash},   {"runs", runs},            {"artifacts", m.artifacts}};
}

RunManifest manifest_from_json(const json& j) {
    RunManifest m;
    try {
        m.tool_version = j.at("tool_version");
        m.config = j.at("config");
        m.config_hash = j.at("config_hash");
        m.corpus_hash = j.at("corpus_hash");
        for (const auto& r : j.at("runs")) {
            RunRecord rec;
            rec.seed = r.at("seed");
            rec.cell = r.at("cell");
            rec.checkpoints = r.at("checkpoints").get<std::map<std::string, std::string>>();
            rec.metrics = r.at("metrics");
            rec.summary = cell_metrics_from_json(r.at("summary"));
            m.runs.push_back(std::move(rec));
        }
        m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    return m;
}

RunManifest verify_manifest(const std::string& path) {
    if (!fs::exists(path)) throw DataError("manifest not found: " + path);
    RunManifest m = manifest_from_json(parse_json(read_file(path), path));
    const fs::path base = fs::path(path).parent_path();
    const fs::path config_path = base / "config.json";
    if (fs::exists(config_path)) {
        json c = parse_json(read_file(config_path.string()), config_path.string());
        c.erase("out_dir");
        if (json_hash(c) != m.config_hash) throw DataError("hash mismatch for config.json");
    }
    for (const auto& [rel, sha] : m.artifacts) {
        const fs::path p = base / rel;
        if (!fs::exists(p)) throw DataError("missing artifact: " + rel);
        if (sha256_file(p.string()) != sha) throw DataError("hash mismatch for artifact " + rel);
    }
    for (const auto& r : m.runs) {
        for (const auto& [tag, rel] : r.checkpoints) {
            if (!m.artifacts.count(rel)) throw DataError("checkpoint " + rel + " is not covered by the manifest");
        }
        if (!m.artifacts.count(r.metrics)) throw DataError("metrics " + r.metrics + " are not covered by the manifest");
    }
    return m;
}

// --- pipeline ---------------------------------------------------------------

Pipeline::Pipeline(ExperimentConfig config, std::string out_dir, std::ostream* progress)
    : config_(std::move(config)), out_dir_(std::move(out_dir)), progress_(progress) {
    config_.validate();
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    if (ec || !fs::is_directory(out_dir_)) throw DataError("output directory is not writable: " + out_dir_);
}

void Pipeline::log(const std::string& line) {
    if (!progress_) return;
    std::lock_guard lock(mu_);
    *progress_ << line << std::endl;
}

std::string Pipeline::rel(const std::string& path) const {
    return fs::relative(path, out_dir_).generic_string();
}

const Corpus& Pipeline::corpus() {
    std::lock_guard lock(mu_);
    if (!corpus_) {
        corpus_ = generate_corpus(config_);
        const std::string meta_path = (fs::path(out_dir_) / "corpus" / "corpus.json").string();
        const json meta = {{"key", corpus_->key},
                           {"hash", corpus_->hash},
                           {"n_train", corpus_->train.size()},
                           {"n_test", corpus_->test.size()},
                           {"vocab_size", corpus_->world.vocab.size()},
                           {"n_actions", corpus_->world.vocab.actions.size()}};
        if (fs::exists(meta_path)) {
            const json old = parse_json(read_file(meta_path), meta_path);
            if (old.value("key", "") == corpus_->key && old.value("hash", "") != corpus_->hash) {
                throw DataError("corpus hash mismatch: regenerated corpus differs from " + meta_path);
            }
        }
        write_atomic(meta_path, meta.dump(2) + "\n");
    }
    return *corpus_;
}

ModelConfig Pipeline::model_config() {
    const Corpus& c = corpus();
    ModelConfig m = config_.model;
    m.vocab_size = c.world.vocab.size();
    m.d_v = c.world.config.d_v;
    m.K = 0;
    m.head_mode = HeadMode::NTP;
    m.validate();
    return m;
}

std::vector<AblationCell> Pipeline::cells() const { return config_.cells; }

const AblationCell& Pipeline::cell(const std::string& name) const {
    for (const auto& c : config_.cells) {
        if (c.name == name) return c;
    }
    throw UsageError("unknown cell: " + name);
}

std::string Pipeline::stage_key(int stage, std::uint64_t seed, const AblationCell* cell) {
    if (stage == 1) {
        return json_hash({{"corpus", corpus().key},
                          {"model", to_json(model_config())},
                          {"stage", stage_json(config_.stage1)},
                          {"seed", seed}});
    }
    if (stage == 2) return json_hash({{"prev", stage_key(1, seed, nullptr)}, {"stage", stage_json(config_.stage2)}});
    if (!cell) throw UsageError("stage 3 needs a cell");
    const std::string prev = stage_key(cell->ata ? 2 : 1, seed, nullptr);
    return json_hash({{"prev", prev}, {"stage", stage_json(config_.stage3)}, {"cell", cell_json(*cell)}});
}

std::string Pipeline::checkpoint_path(int stage, std::uint64_t seed, const AblationCell* cell) const {
    fs::path p = fs::path(out_dir_) / seed_dir(seed);
    if (stage == 3) {
        if (!cell) throw UsageError("stage 3 needs a cell");
        return (p / cell->name / "stage3.ckpt").string();
    }
    return (p / ("stage" + std::to_string(stage) + ".ckpt")).string();
}

namespace {

std::optional<Model> load_if_current(const std::string& path, const std::string& key, const ModelConfig* expected) {
    if (!fs::exists(path)) return std::nullopt;
    Checkpoint ck = expected ? load_checkpoint(path, *expected) : load_checkpoint(path);
    if (ck.meta.value("key", "") != key) return std::nullopt;
    return std::move(ck.model);
}

}  // namespace

Model Pipeline::train_stage_from(int stage, std::uint64_t seed, const AblationCell* cell, const std::string& in_ckpt,
                                 const std::string& out_ckpt) {
    if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
    const Corpus& corp = corpus();
    const std::string key = stage_key(stage, seed, cell);
    const std::string where = "[seed " + std::to_string(seed) + (cell ? " " + cell->name : "") + "] stage " +
                              std::to_string(stage);
    if (auto cached = load_if_current(out_ckpt, key, nullptr)) {
        log(where + ": up to date");
        return std::move(*cached);
    }

    Model model;
    if (stage == 1) {
        model = init_model<float>(model_config(), seed);
    } else {
        const int prev = stage == 2 ? 1 : (cell && cell->ata ? 2 : 1);
        if (!fs::exists(in_ckpt)) throw DataError("missing prerequisite checkpoint: " + in_ckpt);
        Checkpoint ck = load_checkpoint(in_ckpt, model_config());
        if (ck.meta.value("key", "") != stage_key(prev, seed, nullptr)) {
            throw DataError("config-hash mismatch: " + in_ckpt + " was not produced by stage " + std::to_string(prev) +
                            " of this config and seed");
        }
        model = std::move(ck.model);
    }

    const StageConfig sc = stage_config_for(config_, stage, seed, cell);
    std::vector<InstructionSample> data;
    if (stage == 1) {
        data = make_alignment_pairs(corp.world, config_.corpus.n_align_pairs, seed);
    } else if (stage == 2) {
        data = build_stage2_mixture(corp.world, corp.train, config_.corpus.weights, config_.corpus.include_sp,
                                    substream(seed, stream::mixture)(), config_.corpus.horizons);
    } else {
        const auto& hz = config_.corpus.horizons;
        data.reserve(corp.train.size());
        for (std::size_t i = 0; i < corp.train.size(); ++i) {
            const int h = hz[i % hz.size()];
            data.push_back(config_.task == TaskMode::vpa ? make_vpa_sample(corp.world, corp.train[i], h)
                                                         : make_lta_sample(corp.world, corp.train[i], h));
        }
    }
    log(where + ": training on " + std::to_string(data.size()) + " samples");
    fs::create_directories(fs::path(out_ckpt).parent_path());
    const std::string log_path = fs::path(out_ckpt).replace_extension(".log.jsonl").string();
    std::ofstream train_log(log_path, std::ios::trunc);
    const auto result = run_stage(model, sc, data, corp.world.vocab.special, &train_log);
    if (!result.epoch_mean_loss.empty()) {
        std::ostringstream msg;
        msg << where << ": epoch mean loss " << std::setprecision(4) << result.epoch_mean_loss.front() << " -> "
            << result.epoch_mean_loss.back();
        log(msg.str());
    }
    const json meta = {{"stage", stage_tag(stage)},
                       {"key", key},
                       {"seed", seed},
                       {"cell", cell ? json(cell->name) : json(nullptr)},
                       {"tool_version", std::string(kToolVersion)}};
    const std::string tmp = out_ckpt + ".tmp";
    save_checkpoint(tmp, model, meta);
    fs::rename(tmp, out_ckpt);
    return model;
}

Model Pipeline::stage(int stage, std::uint64_t seed, const AblationCell* cell, bool train_prerequisites) {
    const std::string out = checkpoint_path(stage, seed, cell);
    if (auto cached = load_if_current(out, stage_key(stage, seed, cell), nullptr)) return std::move(*cached);
    std::string in;
    if (stage > 1) {
        const int prev = stage == 2 ? 1 : (cell && cell->ata ? 2 : 1);
        in = checkpoint_path(prev, seed, nullptr);
        if (train_prerequisites) (void)this->stage(prev, seed, nullptr, true);
    }
    return train_stage_from(stage, seed, cell, in, out);
}

std::vector<InstructionSample> Pipeline::test_samples(int horizon) {
    const Corpus& c = corpus();
    std::vector<InstructionSample> out;
    out.reserve(c.test.size());
    for (const auto& ep : c.test) {
        out.push_back(config_.task == TaskMode::vpa ? make_vpa_sample(c.world, ep, horizon)
                                                    : make_lta_sample(c.world, ep, horizon));
    }
    return out;
}

CellMetrics Pipeline::evaluate(const Model& model, std::uint64_t seed, bool teacher_forcing) {
    const Corpus& c = corpus();
    const auto& special = c.world.vocab.special;
    const ActionMapper mapper(c.world.vocab, model.params.at("tok_emb").mat());
    CellMetrics out;
    for (int h : config_.corpus.horizons) {
        const auto samples = test_samples(h);
        const PlanDecoder dec = teacher_forcing ? teacher_forcing_decoder() : model_plan_decoder(model, special);
        out.by_horizon[h] = run_eval(dec, mapper, samples, c.world.vocab).overall;
        if (config_.task == TaskMode::lta) {
            SampleDecoder sd;
            if (teacher_forcing) {
                sd = [](const InstructionSample& s, int n) {
                    return std::vector<std::vector<TokenId>>(static_cast<std::size_t>(n), s.response_tokens);
                };
            } else {
                sd = model_sample_decoder(model, special, config_.ed_temperature, seed);
            }
            out.ed = edit_distance_report(sd, mapper, samples, c.world.vocab, config_.ed_samples);
        }
    }
    return out;
}

RunRecord Pipeline::run_cell(std::uint64_t seed, const AblationCell& cell) {
    RunRecord rec;
    rec.seed = seed;
    rec.cell = cell.name;
    const Model model = stage(3, seed, &cell);
    const std::string ckpt = checkpoint_path(3, seed, &cell);
    const std::string metrics_path = (fs::path(ckpt).parent_path() / "metrics.json").string();
    const std::string key = json_hash({{"model", stage_key(3, seed, &cell)},
                                       {"horizons", config_.corpus.horizons},
                                       {"ed_samples", config_.ed_samples},
                                       {"ed_temperature", config_.ed_temperature}});
    bool cached = false;
    if (fs::exists(metrics_path)) {
        const json old = parse_json(read_file(metrics_path), metrics_path);
        if (old.value("key", "") == key) {
            rec.summary = cell_metrics_from_json(old);
            cached = true;
        }
    }
    if (!cached) {
        rec.summary = evaluate(model, seed);
        json j = cell_metrics_json(rec.summary);
        j["key"] = key;
        j["cell"] = cell.name;
        j["seed"] = seed;
        write_atomic(metrics_path, j.dump(2) + "\n");
    }
    std::ostringstream msg;
    msg << "[seed " << seed << " " << cell.name << "]";
    for (const auto& [h, r] : rec.summary.by_horizon) {
        msg << " T=" << h << " SR " << std::fixed << std::setprecision(3) << r.sr << " mAcc " << r.macc << " mIoU "
            << r.miou;
    }
    log(msg.str());
    rec.checkpoints["stage1"] = rel(checkpoint_path(1, seed, nullptr));
    if (cell.ata) rec.checkpoints["stage2"] = rel(checkpoint_path(2, seed, nullptr));
    rec.checkpoints["stage3"] = rel(ckpt);
    rec.metrics = rel(metrics_path);
    return rec;
}

RunManifest Pipeline::ablate() {
    const Corpus& corp = corpus();
    json resolved = to_json(config_);
    resolved["out_dir"] = out_dir_;
    write_atomic((fs::path(out_dir_) / "config.json").string(), resolved.dump(2) + "\n");

    const auto& seeds = config_.seeds;
    const auto& cells = config_.cells;
    bool any_ata = false;
    for (const auto& c : cells) any_ata = any_ata || c.ata;
    const int workers = worker_count();

    parallel_for(static_cast<int>(seeds.size()), workers,
                 [&](int i) { stage(any_ata ? 2 : 1, seeds[static_cast<std::size_t>(i)], nullptr); });

    const int n_jobs = static_cast<int>(seeds.size() * cells.size());
    std::vector<RunRecord> records(static_cast<std::size_t>(n_jobs));
    parallel_for(n_jobs, workers, [&](int j) {
        const auto s = static_cast<std::size_t>(j) / cells.size();
        const auto c = static_cast<std::size_t>(j) % cells.size();
        records[static_cast<std::size_t>(j)] = run_cell(seeds[s], cells[c]);
    });

    RunManifest m;
    json hashed = to_json(config_);
    hashed.erase("out_dir");
    m.config = hashed;
    m.config_hash = json_hash(hashed);
    m.corpus_hash = corp.hash;
    m.runs = std::move(records);
    // config.json carries the output path, so it is checked through config_hash instead.
    std::set<std::string> files = {"corpus/corpus.json"};
    for (const auto& r : m.runs) {
        for (const auto& [tag, p] : r.checkpoints) files.insert(p);
        files.insert(r.metrics);
    }
    for (const auto& f : files) m.artifacts[f] = sha256_file((fs::path(out_dir_) / f).string());

    write_atomic((fs::path(out_dir_) / "manifest.json").string(), to_json(m).dump(2) + "\n");
    write_atomic((fs::path(out_dir_) / "report.txt").string(), render_report(m));
    write_atomic((fs::path(out_dir_) / "report.json").string(), report_json(m).dump(2) + "\n");
    return m;
}

// --- reports ----------------------------------------------------------------

std::vector<CellAggregate> aggregate(const RunManifest& m) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunRecord*>> by_cell;
    for (const auto& r : m.runs) {
        if (!by_cell.count(r.cell)) order.push_back(r.cell);
        by_cell[r.cell].push_back(&r);
    }
    auto mean_std = [](const std::vector<double>& v) {
        double mean = 0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0;
        for (double x : v) ss += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        return std::pair{mean, sd};
    };
    std::vector<CellAggregate> out;
    for (const auto& name : order) {
        const auto& runs = by_cell[name];
        CellAggregate a;
        a.cell = name;
        a.n_seeds = static_cast<int>(runs.size());
        for (const auto& [h, unused] : runs.front()->summary.by_horizon) {
            for (int k = 0; k < 3; ++k) {
                std::vector<double> v;
                for (const auto* r : runs) {
                    const auto& mr = r->summary.by_horizon.at(h);
                    v.push_back(k == 0 ? mr.sr : k == 1 ? mr.macc : mr.miou);
                }
                const auto [mu, sd] = mean_std(v);
                a.mean[h][static_cast<std::size_t>(k)] = mu;
                a.stddev[h][static_cast<std::size_t>(k)] = sd;
            }
        }
        if (runs.front()->summary.ed) {
            a.has_ed = true;
            for (int k = 0; k < 3; ++k) {
                std::vector<double> v;
                for (const auto* r : runs) {
                    const auto& e = *r->summary.ed;
                    v.push_back(k == 0 ? e.ed_verb : k == 1 ? e.ed_noun : e.ed_action);
                }
                const auto [mu, sd] = mean_std(v);
                a.ed_mean[static_cast<std::size_t>(k)] = mu;
                a.ed_std[static_cast<std::size_t>(k)] = sd;
            }
        }
        out.push_back(std::move(a));
    }
    return out;
}

namespace {

std::string pm(double mean, double sd, double scale, int precision) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << mean * scale << " ± " << sd * scale;
    return s.str();
}

std::vector<std::string> metric_cells(const CellAggregate& a) {
    std::vector<std::string> row;
    for (const auto& [h, mu] : a.mean) {
        for (std::size_t k = 0; k < 3; ++k) row.push_back(pm(mu[k], a.stddev.at(h)[k], 100.0, 1));
    }
    if (a.has_ed) {
        for (std::size_t k = 0; k < 3; ++k) row.push_back(pm(a.ed_mean[k], a.ed_std[k], 1.0, 3));
    }
    return row;
}

std::vector<std::string> metric_header(const CellAggregate& a) {
    std::vector<std::string> h;
    for (const auto& [hz, unused] : a.mean) {
        const std::string t = "T=" + std::to_string(hz) + " ";
        h.insert(h.end(), {t + "SR", t + "mAcc", t + "mIoU"});
    }
    if (a.has_ed) h.insert(h.end(), {"ED verb", "ED noun", "ED action"});
    return h;
}

}  // namespace

std::string render_report(const RunManifest& m) {
    const auto aggs = aggregate(m);
    std::map<std::string, AblationCell> defs;
    if (m.config.contains("cells")) {
        for (const auto& cj : m.config.at("cells")) {
            const AblationCell c = cell_from_json(cj);
            defs[c.name] = c;
        }
    }
    std::ostringstream out;
    out << "experiment: " << m.config.value("name", "?") << "\n";
    out << "config hash: " << m.config_hash << "\n";
    out << "corpus hash: " << m.corpus_hash << "\n";
    if (aggs.empty()) return out.str();
    out << "seeds per cell: " << aggs.front().n_seeds << " (mean ± sample std; SR/mAcc/mIoU in %, edit distance normalized by the horizon)\n\n";

    auto find = [&](auto pred) -> const CellAggregate* {
        for (const auto& a : aggs) {
            auto it = defs.find(a.cell);
            if (it != defs.end() && pred(it->second)) return &a;
        }
        return nullptr;
    };
    const auto header = metric_header(aggs.front());

    // ATA x MTP matrix.
    std::vector<std::vector<std::string>> rows;
    for (bool mtp : {false, true}) {
        for (bool ata : {false, true}) {
            const auto* a = find([&](const AblationCell& c) {
                return c.ata == ata && (c.head_mode != HeadMode::NTP) == mtp && c.mask_mode == MaskMode::FULL;
            });
            if (!a) continue;
            std::vector<std::string> row = {ata ? "yes" : "no", mtp ? "yes" : "no"};
            for (auto& s : metric_cells(*a)) row.push_back(s);
            rows.push_back(row);
        }
    }
    if (rows.size() > 1) {
        std::vector<std::string> h = {"ATA", "MTP"};
        h.insert(h.end(), header.begin(), header.end());
        out << "Auxiliary task augmentation x multi-token prediction\n" << format_table(h, rows) << "\n";
    }

    // NTP / partial-MTP / MTP, all with auxiliary-task pretraining.
    rows.clear();
    const std::pair<const char*, std::function<bool(const AblationCell&)>> methods[] = {
        {"NTP", [](const AblationCell& c) { return c.ata && c.head_mode == HeadMode::NTP; }},
        {"partial-MTP",
         [](const AblationCell& c) { return c.ata && c.head_mode != HeadMode::NTP && c.mask_mode == MaskMode::PARTIAL; }},
        {"MTP", [](const AblationCell& c) { return c.ata && c.head_mode != HeadMode::NTP && c.mask_mode == MaskMode::FULL; }},
    };
    for (const auto& [label, pred] : methods) {
        const auto* a = find(pred);
        if (!a) continue;
        std::vector<std::string> row = {label};
        for (auto& s : metric_cells(*a)) row.push_back(s);
        rows.push_back(row);
    }
    if (rows.size() > 1) {
        std::vector<std::string> h = {"Method"};
        h.insert(h.end(), header.begin(), header.end());
        out << "Next-token vs partial vs full multi-token prediction\n" << format_table(h, rows) << "\n";
    }

    rows.clear();
    for (const auto& a : aggs) {
        std::vector<std::string> row = {a.cell};
        for (auto& s : metric_cells(a)) row.push_back(s);
        rows.push_back(row);
    }
    std::vector<std::string> h = {"cell"};
    h.insert(h.end(), header.begin(), header.end());
    out << "All cells\n" << format_table(h, rows);
    return out.str();
}

json report_json(const RunManifest& m) {
    json cells = json::array();
    for (const auto& a : aggregate(m)) {
        json hz = json::object();
        for (const auto& [h, mu] : a.mean) {
            const auto& sd = a.stddev.at(h);
            hz[std::to_string(h)] = {{"sr_mean", mu[0]},  {"sr_std", sd[0]},   {"macc_mean", mu[1]},
                                     {"macc_std", sd[1]}, {"miou_mean", mu[2]}, {"miou_std", sd[2]}};
        }
        json c = {{"cell", a.cell}, {"n_seeds", a.n_seeds}, {"horizons", hz}};
        if (a.has_ed) {
            c["ed"] = {{"verb_mean", a.ed_mean[0]},   {"verb_std", a.ed_std[0]},   {"noun_mean", a.ed_mean[1]},
                       {"noun_std", a.ed_std[1]},     {"action_mean", a.ed_mean[2]}, {"action_std", a.ed_std[2]}};
        }
        cells.push_back(std::move(c));
    }
    return {{"config_hash", m.config_hash}, {"corpus_hash", m.corpus_hash}, {"cells", cells}};
}

int worker_count() {
    const char* env = std::getenv("VPLAN_WORKERS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1 || n > 1024) throw UsageError("VPLAN_WORKERS must be a positive integer");
    return static_cast<int>(n);
}

}  // namespace vplan

#pragma once

// Experiment configuration, the cached gen -> stage 1 -> 2 -> 3 -> eval
// pipeline, ablation tables and run manifests.

#include "vplan/evaluation.hpp"
#include "vplan/json_io.hpp"
#include "vplan/training.hpp"

#include <iosfwd>
#include <mutex>

namespace vplan {


// vpa: goal-conditioned plans scored by SR/mAcc/mIoU.
// lta: goal-free long-horizon anticipation, also scored by edit distance.
enum class TaskMode { vpa, lta };

std::string_view to_string(TaskMode m);
TaskMode task_mode_from_string(std::string_view s);

struct CorpusConfig {
    std::uint64_t seed = 11;  // episode sampling; shared by every run seed
    int n_train = 8000;
    int n_test = 300;
    double test_fraction = 0.1;
    int min_future = 4;
    std::vector<int> horizons = {3, 4};
    int n_align_pairs = 2000;
    bool include_sp = false;
    MixtureWeights weights = default_mixture_weights();
};

struct AblationCell {
    std::string name;
    bool ata = true;
    HeadMode head_mode = HeadMode::NTP;
    int K = 0;
    MaskMode mask_mode = MaskMode::FULL;
};

struct ExperimentConfig {
    std::string name = "default";
    TaskMode task = TaskMode::vpa;
    WorldConfig world;
    CorpusConfig corpus;
    ModelConfig model;  // vocab_size and d_v come from the world
    StageConfig stage1 = default_stage_config(Stage::ALIGN);
    StageConfig stage2 = default_stage_config(Stage::AUX_PRETRAIN);
    StageConfig stage3 = default_stage_config(Stage::PRIMARY_FINETUNE);
    std::vector<AblationCell> cells;
    std::vector<std::uint64_t> seeds = {1};
    std::string out_dir = "runs/default";
    int ed_samples = 5;
    double ed_temperature = 1.0;

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

// Hex SHA-256 of a JSON value's canonical dump.
std::string json_hash(const nlohmann::json& j);

// The five cells of the ablation matrices: NTP and MTP with and without
// auxiliary-task pretraining, plus partial MTP with it.
std::vector<AblationCell> default_ablation_cells(int K, HeadMode mtp_mode);

struct Corpus {
    World world;
    std::vector<Episode> train, test;
    std::string key;   // config hash of the corpus inputs
    std::string hash;  // content hash of train + test episodes
};

Corpus generate_corpus(const ExperimentConfig& c);

struct CellMetrics {
    std::map<int, MetricsReport> by_horizon;
    std::optional<EDReport> ed;
};

struct RunRecord {
    std::uint64_t seed = 0;
    std::string cell;
    std::map<std::string, std::string> checkpoints;  // stage tag -> relative path
    std::string metrics;                             // relative path
    CellMetrics summary;
};

struct RunManifest {
    std::string tool_version{kToolVersion};
    nlohmann::json config;  // resolved experiment config
    std::string config_hash;
    std::string corpus_hash;
    std::vector<RunRecord> runs;
    std::map<std::string, std::string> artifacts;  // relative path -> sha256
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

// Loads a manifest and checks every artifact exists with a matching hash.
RunManifest verify_manifest(const std::string& path);

// Owns one output directory. Every stage is keyed by a hash of everything it
// depends on; re-running a finished stage reloads its checkpoint.
class Pipeline {
public:
    Pipeline(ExperimentConfig config, std::string out_dir, std::ostream* progress = nullptr);

    const ExperimentConfig& config() const { return config_; }
    const std::string& out_dir() const { return out_dir_; }

    const Corpus& corpus();
    ModelConfig model_config();

    std::string stage_key(int stage, std::uint64_t seed, const AblationCell* cell);
    std::string checkpoint_path(int stage, std::uint64_t seed, const AblationCell* cell) const;
    const AblationCell& cell(const std::string& name) const;
    std::vector<AblationCell> cells() const;

    // Trains (or reloads) one stage. The prerequisite checkpoint must exist
    // with the expected key unless `train_prerequisites` is set.
    Model stage(int stage, std::uint64_t seed, const AblationCell* cell, bool train_prerequisites = true);
    // Explicit single-stage run with chosen input/output checkpoint paths.
    Model train_stage_from(int stage, std::uint64_t seed, const AblationCell* cell, const std::string& in_ckpt,
                           const std::string& out_ckpt);

    std::vector<InstructionSample> test_samples(int horizon);
    CellMetrics evaluate(const Model& model, std::uint64_t seed, bool teacher_forcing = false);

    // Stage 3 + eval for one cell, cached in <cell dir>/metrics.json.
    RunRecord run_cell(std::uint64_t seed, const AblationCell& cell);
    // All cells over all seeds (VPLAN_WORKERS parallel jobs); writes the
    // manifest and report.
    RunManifest ablate();

private:
    std::string rel(const std::string& path) const;
    void log(const std::string& line);

    ExperimentConfig config_;
    std::string out_dir_;
    std::ostream* progress_;
    std::optional<Corpus> corpus_;
    std::mutex mu_;
};

StageConfig stage_config_for(const ExperimentConfig& c, int stage, std::uint64_t seed, const AblationCell* cell);

// Seed-aggregated tables in the layout of the ATA x MTP matrix and the
// NTP / partial-MTP / MTP comparison.
struct CellAggregate {
    std::string cell;
    int n_seeds = 0;
    std::map<int, std::array<double, 3>> mean, stddev;  // horizon -> (SR, mAcc, mIoU)
    std::array<double, 3> ed_mean{}, ed_std{};
    bool has_ed = false;
};

std::vector<CellAggregate> aggregate(const RunManifest& m);
std::string render_report(const RunManifest& m);
nlohmann::json report_json(const RunManifest& m);

// Parallel worker count from VPLAN_WORKERS (default 1).
int worker_count();

}  // namespace vplan

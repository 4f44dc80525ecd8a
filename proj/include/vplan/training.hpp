#pragma once

// Losses, boundary masks for partial multi-token prediction, gradient
// audit, Adam, and the three training stages.

#include "vplan/model.hpp"

#include <functional>
#include <iosfwd>

namespace vplan {

enum class MaskMode { FULL, PARTIAL };
enum class LossNorm { per_head_mean, sum };
enum class Stage { ALIGN, AUX_PRETRAIN, PRIMARY_FINETUNE };

std::string_view to_string(MaskMode m);
std::string_view to_string(LossNorm n);
std::string_view to_string(Stage s);
MaskMode mask_mode_from_string(std::string_view s);
LossNorm loss_norm_from_string(std::string_view s);
Stage stage_from_string(std::string_view s);

// active[i][q]: head i supervises response position q, i.e. the logit row
// whose head-0 target is response[q] is trained to emit response[q + i].
struct BoundaryMask {
    MaskMode mode = MaskMode::FULL;
    int K = 0;
    int n = 0;  // response length
    std::vector<std::vector<std::uint8_t>> active;

    bool at(int head, int q) const { return active[static_cast<std::size_t>(head)][static_cast<std::size_t>(q)] != 0; }
    int count(int head) const;
};

// Throws DataError when spans are unordered, overlapping or out of range.
BoundaryMask build_boundary_mask(int response_len, std::span<const TokenSpan> spans, int K, MaskMode mode);
BoundaryMask build_boundary_mask(const InstructionSample& s, int K, MaskMode mode);

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> per_head;
    std::vector<int> counts;  // supervised cells per head
};

// Per logit row and head: target token, or -1 when the cell is inactive.
using HeadTargets = std::vector<std::vector<TokenId>>;

// Targets for a batch of encoded samples; rows follow the samples'
// response positions in order.
HeadTargets batch_targets(const std::vector<const EncodedSample*>& batch, int K, MaskMode mode);

// Mean cross-entropy of head 0 over supervised rows. dlogits (optional)
// receives d loss / d logits. Throws DataError without supervised rows.
template <class T>
LossBreakdown loss_ntp(const Mat<T>& logits, std::span<const TokenId> targets, Mat<T>* dlogits = nullptr);

// Sum over heads of each head's cross-entropy (per-head mean or plain sum).
template <class T>
LossBreakdown loss_mtp(const std::vector<Mat<T>>& logits, const HeadTargets& targets, LossNorm norm,
                       std::vector<Mat<T>>* dlogits = nullptr);

// Forward + loss + backward on one batch. grads must come from zero_grads().
template <class T>
LossBreakdown loss_and_grad(const ModelT<T>& model, const std::vector<const EncodedSample*>& batch, MaskMode mode,
                            LossNorm norm, ParamStore<T>* grads, std::uint64_t dropout_seed = 0);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    int probes = 0;
};

// Compares reverse-mode gradients with central differences at n_probes
// random trainable coordinates. rel = |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const ModelT<double>& model, const std::vector<const EncodedSample*>& batch, MaskMode mode,
                           LossNorm norm, double epsilon, int n_probes, std::uint64_t seed, double floor = 1e-8);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    long step = 0;
    std::map<std::string, std::vector<double>> m, v;
};

// Skips tensors that are frozen or have no gradient entry. Throws
// NumericError naming the tensor when a gradient or update is not finite;
// params are untouched in that case.
template <class T>
void optimizer_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, const AdamConfig& cfg);

// Rescales grads so their global L2 norm is at most max_norm; returns the
// norm before clipping.
template <class T>
double clip_global_norm(ParamStore<T>& grads, double max_norm);

struct StageConfig {
    Stage stage = Stage::PRIMARY_FINETUNE;
    HeadMode head_mode = HeadMode::NTP;
    int K = 0;
    MaskMode mask_mode = MaskMode::FULL;
    LossNorm loss_norm = LossNorm::per_head_mean;
    double lr = 6e-4;
    int warmup_steps = 50;
    double final_lr_fraction = 0.1;  // cosine decay floor
    int batch_size = 32;
    int epochs = 1;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const StageConfig& c);
StageConfig stage_config_from_json(const nlohmann::json& j, Stage stage);
StageConfig default_stage_config(Stage stage);

// Names of the tensors a stage trains.
bool stage_trains(Stage stage, const std::string& tensor_name);

struct StepRecord {
    long step = 0;
    int epoch = 0;
    LossBreakdown loss;
    double lr = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

struct StageResult {
    std::vector<StepRecord> log;
    std::vector<double> epoch_mean_loss;
};

// Trains `model` in place. PRIMARY_FINETUNE attaches the configured heads
// first. Each step is appended to `log_out` as one JSON line when given.
StageResult run_stage(Model& model, const StageConfig& config, const std::vector<InstructionSample>& data,
                      const SpecialTokens& special, std::ostream* log_out = nullptr);

}  // namespace vplan

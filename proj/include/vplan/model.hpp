#pragma once

// Decoder-only transformer with an observation adapter and pluggable
// output heads. Forward and backward are hand-written and templated on the
// scalar type: float for training, double for gradient audits.

#include "vplan/augmentation.hpp"
#include "vplan/corpus.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vplan {

enum class HeadMode { NTP, MTP_LINEAR, MTP_UNEMBED_LORA };

std::string_view to_string(HeadMode m);
HeadMode head_mode_from_string(std::string_view s);

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int context_length = 256;
    int d_v = 64;
    int K = 0;  // extra future-token heads
    HeadMode head_mode = HeadMode::NTP;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    double dropout = 0.0;
    // Head 0 gets its own low-rank adapter in MTP_UNEMBED_LORA mode.
    bool head0_adapter = false;
    // Observed frames are uniformly subsampled down to this many (0: keep all).
    int max_obs_frames = 8;

    void validate() const;
    double lora_scale() const { return lora_rank > 0 ? lora_alpha / lora_rank : 0.0; }
    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;
    bool trainable = true;

    std::size_t numel() const { return data.size(); }
    // 1-D tensors view as a single row.
    int rows() const { return shape.size() < 2 ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? static_cast<int>(data.size()) : shape[1]; }
    Eigen::Map<Mat<T>> mat() { return {data.data(), rows(), cols()}; }
    Eigen::Map<const Mat<T>> mat() const { return {data.data(), rows(), cols()}; }
    bool operator==(const Tensor&) const = default;
};

template <class T>
class ParamStore {
public:
    std::map<std::string, Tensor<T>> tensors;

    Tensor<T>& at(const std::string& name);
    const Tensor<T>& at(const std::string& name) const;
    const Tensor<T>* find(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
    void add(const std::string& name, std::vector<int> shape, bool trainable);
    std::size_t count(bool trainable_only) const;

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, t] : tensors) {
            out.tensors[name] = Tensor<U>{t.shape, std::vector<U>(t.data.begin(), t.data.end()), t.trainable};
        }
        return out;
    }
    // Zero tensors for every trainable entry.
    ParamStore zero_grads() const;
    bool operator==(const ParamStore&) const = default;
};

template <class T>
struct ModelT {
    ModelConfig config;
    ParamStore<T> params;
};
using Model = ModelT<float>;

// Fresh trunk with NTP head only.
template <class T>
ModelT<T> init_model(ModelConfig config, std::uint64_t seed);

// Adds K extra heads. MTP_UNEMBED_LORA copies the current unembedding into
// frozen per-head bases. Replaces any previously attached heads.
template <class T>
void attach_heads(ModelT<T>& model, HeadMode mode, int K, std::uint64_t seed);
template <class T>
void detach_heads(ModelT<T>& model);

// Trainable parameters in the extra heads.
std::int64_t head_param_count(const ModelConfig& config);

// --- sequences ------------------------------------------------------------------

// One input sequence. Positions with feature_slot >= 0 take their embedding
// from the adapter applied to features[feature_slot].
struct ModelInput {
    std::vector<TokenId> tokens;
    std::vector<FeatureVec> features;
    std::vector<int> feature_slot;

    int size() const { return static_cast<int>(tokens.size()); }
    void push_token(TokenId t);
    void push_feature(TokenId placeholder, FeatureVec f);
};

// A sample laid out as [obs] <sep> [instruction] <bor> [response[:-1]].
struct EncodedSample {
    ModelInput input;
    int first_target = 0;  // position whose next-token target is response[0]
    std::vector<TokenId> response;
    std::vector<TokenSpan> spans;
};

std::vector<int> subsample_frames(int n_frames, int max_frames);
// Prompt only (ends with <bor>).
ModelInput encode_prompt(const InstructionSample& s, const ModelConfig& config, const SpecialTokens& special);
EncodedSample encode_sample(const InstructionSample& s, const ModelConfig& config, const SpecialTokens& special);

// --- forward / backward -----------------------------------------------------

template <class T>
Mat<T> adapter_apply(const std::vector<FeatureVec>& frames, const ParamStore<T>& params, const ModelConfig& config);

enum class RunMode { train, infer };

template <class T>
struct ForwardOutput {
    Mat<T> hidden;               // final-normed hidden state at each requested position
    std::vector<Mat<T>> logits;  // per head, rows aligned with hidden
};

// Holds the activations of one forward pass so backward can reuse them.
template <class T>
class Transformer {
public:
    explicit Transformer(const ModelT<T>& model) : model_(model) {}

    // positions[s]: positions of sequence s whose logits are wanted. Train
    // mode fills all 1+K heads, infer mode only head 0. dropout_seed is used
    // only when config.dropout > 0 in train mode.
    ForwardOutput<T> forward(const std::vector<const ModelInput*>& batch, const std::vector<std::vector<int>>& positions,
                             RunMode mode, std::uint64_t dropout_seed = 0);

    // Accumulates into grads (trainable tensors only) given d loss / d logits.
    void backward(const std::vector<Mat<T>>& dlogits, ParamStore<T>& grads);

private:
    struct LayerCache {
        Mat<T> xhat1, a, qkv, attn, drop1, x_mid, xhat2, m, u, t, g, drop2;
        std::vector<T> rstd1, rstd2;
        std::vector<Mat<T>> probs;  // [seq * n_heads + head]
    };
    const ModelT<T>& model_;
    std::vector<const ModelInput*> batch_;
    std::vector<int> offsets_;
    std::vector<int> gather_;  // packed row of each requested position
    Mat<T> x0_, xf_, xhat_f_;
    std::vector<T> rstd_f_;
    std::vector<LayerCache> layers_;
    RunMode mode_ = RunMode::infer;
    bool heads_run_ = false;
};

// --- decoding ---------------------------------------------------------------

struct DecodeResult {
    std::vector<TokenId> tokens;  // generated tokens, including <eos> when emitted
    bool truncated = false;       // ran out of context or max_tokens before <eos>
};

// Batched greedy decoding with head 0; argmax ties go to the lowest id.
std::vector<DecodeResult> decode_greedy(const Model& model, const std::vector<ModelInput>& prompts, int max_tokens,
                                        TokenId eos);
// n_sequences samples per prompt; temperature 0 is greedy.
std::vector<DecodeResult> decode_sample(const Model& model, const ModelInput& prompt, double temperature,
                                        std::uint64_t seed, int n_sequences, int max_tokens, TokenId eos);

// --- checkpoints ------------------------------------------------------------

struct Checkpoint {
    Model model;
    nlohmann::json meta;  // stage tag, pipeline hash, ...
};

void save_checkpoint(const std::string& path, const Model& model, const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::string& path);
// Also checks every tensor against the shapes implied by `expected`.
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

// Shapes a model with this config must carry.
std::map<std::string, std::vector<int>> expected_shapes(const ModelConfig& config);

}  // namespace vplan

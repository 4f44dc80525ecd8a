#pragma once

// Plan decoding, free-text to action mapping, and the planning /
// anticipation metrics.

#include "vplan/model.hpp"

#include <functional>
#include <memory>

namespace vplan {

using EmbeddingTable = Eigen::Ref<const Mat<float>>;

// Maps token chunks to actions: exact label match first, otherwise the
// label whose mean token embedding has the highest cosine similarity with
// the chunk's mean embedding (ties: lowest action id).
class ActionMapper {
public:
    ActionMapper(const ActionVocab& vocab, EmbeddingTable table);
    ActionId map(std::span<const TokenId> chunk) const;
    ActionId map(std::string_view text) const;
    const ActionVocab& vocab() const { return vocab_; }

private:
    const ActionVocab& vocab_;
    Mat<float> table_;
    Mat<double> labels_;  // unit-norm mean embedding per action
};

ActionId map_output_to_action(std::string_view text, const ActionVocab& vocab, EmbeddingTable table);

struct PlanPrediction {
    std::vector<TokenId> raw_tokens;
    std::vector<ActionId> parsed_actions;  // exactly `horizon` entries, padded with kInvalidAction
    int horizon = 0;
};

PlanPrediction parse_prediction(std::vector<TokenId> raw, int horizon, const ActionMapper& mapper);

struct MetricsReport {
    double sr = 0.0, macc = 0.0, miou = 0.0;
    int n_samples = 0;
    int horizon = 0;
};

using ActionSeqs = std::vector<std::vector<ActionId>>;

double success_rate(const ActionSeqs& preds, const ActionSeqs& gts);
double mean_accuracy(const ActionSeqs& preds, const ActionSeqs& gts);
double mean_iou(const ActionSeqs& preds, const ActionSeqs& gts);
MetricsReport compute_metrics(const ActionSeqs& preds, const ActionSeqs& gts);

// Optimal-string-alignment Damerau-Levenshtein distance.
int edit_distance(std::span<const int> a, std::span<const int> b);
double normalized_edit_distance(std::span<const int> pred, std::span<const int> gt, int horizon);

struct EDReport {
    double ed_verb = 0.0, ed_noun = 0.0, ed_action = 0.0;
    int n_sequences = 5;
    int horizon = 20;
    int n_samples = 0;
};

// Min over the sampled sequences, per stream, averaged over samples.
// samples[i] holds the candidate action sequences for gts[i].
EDReport edit_distance_from_candidates(const std::vector<ActionSeqs>& samples, const ActionSeqs& gts,
                                       const ActionVocab& vocab, int horizon);

// Greedy plan decoder: one response token list per prompt.
using PlanDecoder = std::function<std::vector<std::vector<TokenId>>(const std::vector<InstructionSample>&)>;
// Sampling decoder: n candidate responses for one prompt.
using SampleDecoder = std::function<std::vector<std::vector<TokenId>>(const InstructionSample&, int n)>;

PlanDecoder model_plan_decoder(const Model& model, const SpecialTokens& special, int batch = 64);
SampleDecoder model_sample_decoder(const Model& model, const SpecialTokens& special, double temperature,
                                   std::uint64_t seed);
// Returns the ground-truth responses.
PlanDecoder teacher_forcing_decoder();

struct SampleTrace {
    int schema_id = -1;
    std::vector<ActionId> predicted, target;
    std::string raw_text;
};

struct EvalReport {
    MetricsReport overall;
    std::map<int, MetricsReport> per_schema;
    std::vector<SampleTrace> traces;
};

EvalReport run_eval(const PlanDecoder& decode, const ActionMapper& mapper, const std::vector<InstructionSample>& samples,
                    const ActionVocab& vocab);

EDReport edit_distance_report(const SampleDecoder& decode, const ActionMapper& mapper,
                              const std::vector<InstructionSample>& samples, const ActionVocab& vocab,
                              int n_samples = 5);

nlohmann::json to_json(const MetricsReport& r);
nlohmann::json to_json(const EDReport& r);
nlohmann::json to_json(const EvalReport& r, bool with_traces);
std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

}  // namespace vplan

#pragma once

// Instruction-tuning samples built from episodes: the primary planning task
// plus the auxiliary goal-modality, goal-prediction and state-prediction
// variants.

#include "vplan/corpus.hpp"

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vplan {

enum class TaskType { VPA, GMA_TEXT, GMA_IMAGE, GMA_NONE, GP, SP, CAPTION };
enum class ObsChannel { FRAMES, IMAGE, TEXT };

std::string_view to_string(TaskType t);
std::string_view to_string(ObsChannel c);
TaskType task_type_from_string(std::string_view s);
ObsChannel channel_from_string(std::string_view s);

// Half-open token range inside response_tokens.
struct TokenSpan {
    int begin = 0;
    int end = 0;
    bool operator==(const TokenSpan&) const = default;
};

struct InstructionSample {
    TaskType task_type = TaskType::VPA;
    ObsChannel channel = ObsChannel::FRAMES;
    std::vector<FeatureVec> obs_frames;  // FRAMES: observed prefix; IMAGE: exactly one vector
    std::vector<TokenId> obs_tokens;     // TEXT channel
    std::vector<TokenId> instruction_tokens;
    std::optional<FeatureVec> goal_image;  // bound to the single <goal_image> slot
    std::vector<TokenId> response_tokens;  // ends with <eos>
    int horizon = 0;
    std::vector<TokenSpan> boundary_spans;
    std::vector<ActionId> target_actions;
    int schema_id = -1;

    bool operator==(const InstructionSample&) const = default;
};

struct PromptTemplate {
    TaskType task_type;
    // Slots: <obs>, <goal text>, <goal image>, <actions>, <h>.
    std::string skeleton;
};

const PromptTemplate& prompt_template(TaskType t);

struct TemplateSlots {
    std::optional<std::string> goal_text;
    bool goal_image = false;
    std::optional<std::string> actions;
    std::optional<int> horizon;
};

// Renders the instruction part of a skeleton (everything after <obs>).
// Throws DataError when a slot in the skeleton is left unfilled.
std::vector<TokenId> render_instruction(const PromptTemplate& tpl, const TemplateSlots& slots, const ActionVocab& vocab);

// "1. a 2. b ..." followed by <eos>, with one span per action.
void render_plan(std::span<const ActionId> actions, const ActionVocab& vocab, std::vector<TokenId>& tokens,
                 std::vector<TokenSpan>& spans);

InstructionSample make_vpa_sample(const World& world, const Episode& ep, int horizon);
// GMA_TEXT, GMA_IMAGE, GMA_NONE in that order.
std::array<InstructionSample, 3> make_gma_samples(const World& world, const Episode& ep, int horizon);
InstructionSample make_gp_sample(const World& world, const Episode& ep, ObsChannel channel);
InstructionSample make_sp_sample(const World& world, const Episode& ep, int horizon);
// Long-horizon anticipation prompt: no goal, `horizon` future actions.
InstructionSample make_lta_sample(const World& world, const Episode& ep, int horizon);
// Single noisy frame of an action captioned with its label.
InstructionSample make_caption_sample(const World& world, ActionId action, std::uint64_t rng_seed);

std::vector<InstructionSample> make_alignment_pairs(const World& world, int n, std::uint64_t seed);

using MixtureWeights = std::map<TaskType, double>;
MixtureWeights default_mixture_weights();

// Largest-remainder split of `total` proportional to the weights.
std::map<TaskType, int> mixture_counts(const MixtureWeights& weights, bool include_sp, int total);

// `total` <= 0 means one sample per episode.
std::vector<InstructionSample> build_stage2_mixture(const World& world, const std::vector<Episode>& corpus,
                                                    const MixtureWeights& weights, bool include_sp,
                                                    std::uint64_t seed, std::span<const int> horizons,
                                                    int total = 0);

// --- response parsing -------------------------------------------------------

// Token chunks between list numbers, up to the first <eos>.
std::vector<std::vector<TokenId>> split_numbered(std::span<const TokenId> response, const ActionVocab& vocab);
// Exact parse; nullopt when a chunk is not an action label.
std::optional<std::vector<ActionId>> parse_plan(std::span<const TokenId> response, const ActionVocab& vocab);
std::optional<int> parse_goal(std::span<const TokenId> response, const World& world);
// One sentence per "." terminator.
std::vector<std::string> parse_states(std::span<const TokenId> response, const ActionVocab& vocab);

// --- persistence ------------------------------------------------------------

void save_samples(const std::vector<InstructionSample>& samples, const std::string& path);
std::vector<InstructionSample> load_samples(const std::string& path);

}  // namespace vplan

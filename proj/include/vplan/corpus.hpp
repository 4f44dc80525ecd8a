#pragma once

// Synthetic procedural worlds: action vocabularies, goal-labelled task
// schemas with step dependency DAGs, and sampled episodes carrying
// per-frame observation features.

#include "vplan/common.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace vplan {

using TokenId = std::int32_t;
using ActionId = std::int32_t;
using FeatureVec = std::vector<float>;

inline constexpr ActionId kInvalidAction = -1;
// Numbered-list tokens "1." .. "32." are always in the vocabulary.
inline constexpr int kMaxListNumber = 32;

struct SpecialTokens {
    TokenId pad = 0;
    TokenId sep = 1;
    TokenId bor = 2;  // begin-of-response
    TokenId eos = 3;
    TokenId goal_image = 4;
    TokenId frame = 5;  // slot whose embedding is an adapted observation feature
    TokenId unk = 6;
    static constexpr int count = 7;
};

struct ActionLabel {
    int verb = 0;  // index into ActionVocab::verbs
    int noun = 0;  // index into ActionVocab::nouns
};

enum class UnknownWordPolicy { error, substitute };

class ActionVocab {
public:
    std::vector<std::string> verbs;
    std::vector<std::string> nouns;
    std::vector<ActionLabel> actions;  // action id == index
    // Per verb: the object state before / after the verb is applied.
    std::vector<std::pair<std::string, std::string>> verb_states;
    SpecialTokens special;
    std::vector<std::string> extra_words;  // goal and prompt words, as passed to finalize()

    // Builds the token table: special tokens first, then every word that any
    // template or label can emit, in a fixed order.
    void finalize(const std::vector<std::string>& extra_words);

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token_text(TokenId id) const;
    std::optional<TokenId> find(std::string_view word) const;
    TokenId id(std::string_view word) const;  // throws DataError when absent

    std::string action_text(ActionId a) const;
    std::vector<TokenId> action_tokens(ActionId a) const;
    std::optional<ActionId> action_by_text(std::string_view text) const;
    TokenId number_token(int n) const;       // "n."
    std::optional<int> list_number(TokenId t) const;  // inverse of number_token
    bool is_special(TokenId t) const { return t >= 0 && t < SpecialTokens::count; }

    bool operator==(const ActionVocab& o) const {
        return verbs == o.verbs && nouns == o.nouns && tokens_ == o.tokens_;
    }

private:
    std::vector<std::string> tokens_;
    std::vector<std::pair<std::string, TokenId>> sorted_;  // word -> id lookup
    TokenId first_number_ = 0;
};

std::vector<TokenId> tokenize(std::string_view text, const ActionVocab& vocab,
                              UnknownWordPolicy policy = UnknownWordPolicy::error);
std::string detokenize(std::span<const TokenId> ids, const ActionVocab& vocab);

struct TaskSchema {
    std::string goal_label;
    std::vector<ActionId> steps;
    // Edges (before, after) as indices into `steps`.
    std::vector<std::pair<int, int>> dependencies;
    int min_len = 0;
    int max_len = 0;

    bool operator==(const TaskSchema&) const = default;
};

struct WorldConfig {
    int n_verbs = 12;
    int n_nouns = 18;
    int n_schemas = 40;
    int min_steps = 6;
    int max_steps = 10;
    double branching = 0.3;
    int d_v = 64;
    double noise_sigma = 0.05;
    int min_frames_per_action = 2;
    int max_frames_per_action = 5;
    std::uint64_t seed = 7;

    void validate() const;
    bool operator==(const WorldConfig&) const = default;
};

struct World {
    WorldConfig config;
    ActionVocab vocab;
    std::vector<TaskSchema> schemas;
    // Clean observation feature of each action (d_v floats each).
    std::vector<FeatureVec> action_basis;

    int n_actions() const { return static_cast<int>(vocab.actions.size()); }
};

World generate_world(const WorldConfig& config);

// Fixed words used by instruction/response templates; always in the vocabulary.
const std::vector<std::string>& prompt_words();

struct Episode {
    int schema_id = 0;
    std::vector<TokenId> goal_tokens;
    std::vector<ActionId> action_sequence;
    std::vector<FeatureVec> observation_frames;
    // Half-open frame ranges [start, end) per action.
    std::vector<std::pair<int, int>> boundaries;
    int cut_index = 1;  // number of observed actions
    FeatureVec terminal_feature;

    int n_future() const { return static_cast<int>(action_sequence.size()) - cut_index; }
    int observed_frame_end() const { return boundaries[static_cast<std::size_t>(cut_index) - 1].second; }
    bool operator==(const Episode&) const = default;
};

struct CutPolicy {
    // Minimum number of future actions left after the cut.
    int min_future = 4;
    // Fixed cut index; unset means uniform over admissible positions.
    std::optional<int> fixed_cut;
};

Episode sample_episode(const World& world, int schema_id, std::uint64_t rng_seed,
                       const CutPolicy& cut_policy = {});

struct Violation {
    enum class Kind { dependency, boundary, cut, membership } kind;
    std::string message;
    // For dependency violations: (prerequisite, dependent) action ids.
    std::pair<ActionId, ActionId> actions{kInvalidAction, kInvalidAction};
};

std::vector<Violation> validate_episode(const Episode& episode, const TaskSchema& schema);

// Deterministic corpus: episode i uses substream (seed, tag, i) and schema
// i % n_schemas, so serial and parallel generation agree.
std::vector<Episode> sample_corpus(const World& world, int n_episodes, std::uint64_t seed,
                                   std::uint64_t tag, const CutPolicy& cut_policy = {});

// Train and test episodes drawn from one stream. Each episode is routed by a
// hash of (schema, action order, cut), so an episode skeleton never appears
// in both splits.
struct CorpusSplit {
    std::vector<Episode> train, test;
};

bool in_test_split(const Episode& episode, double test_fraction);
CorpusSplit sample_split(const World& world, int n_train, int n_test, double test_fraction, std::uint64_t seed,
                         const CutPolicy& cut_policy = {});

// Renders object state sentences from the simulator's verb state table.
std::string render_state_after(const World& world, ActionId a);
std::string render_state_change(const World& world, ActionId a);

// Mean of the frames in a half-open range.
FeatureVec mean_frame(const Episode& ep, std::pair<int, int> range);

// --- persistence --------------------------------------------------------

enum class FeatureEncoding { decimal, f32_sidecar };

void save_world(const World& world, const std::string& path);
World load_world(const std::string& path);

// One JSON record per line; with f32_sidecar the vectors go to
// `<path>.f32` and each record references its byte range.
void save_episodes(const std::vector<Episode>& episodes, const std::string& path,
                   FeatureEncoding encoding);
std::vector<Episode> load_episodes(const std::string& path);

std::string hash_episodes(const std::vector<Episode>& episodes);

}  // namespace vplan

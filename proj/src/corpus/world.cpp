#include "vplan/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace vplan {

namespace {

// Word banks. Verbs, nouns, state adjectives and prompt words are pairwise
// disjoint; goal nouns may reuse step nouns.
constexpr std::array kVerbBank = {"install", "remove", "cut",   "pour",    "wash",   "tighten", "attach", "fold",
                                  "open",    "close",  "mix",   "peel",    "fill",   "drain",   "sand",   "paint",
                                  "press",   "rinse",  "stir",  "measure", "clean",  "place",   "lift",   "insert"};

constexpr std::array<std::pair<const char*, const char*>, kVerbBank.size()> kVerbStates = {{
    {"loose", "mounted"},   {"fixed", "detached"},   {"whole", "sliced"},    {"empty", "full"},
    {"dirty", "spotless"},  {"slack", "secure"},     {"apart", "joined"},    {"flat", "creased"},
    {"shut", "ajar"},       {"exposed", "sealed"},   {"separate", "blended"}, {"unpeeled", "bare"},
    {"hollow", "stocked"},  {"flooded", "dry"},      {"rough", "smooth"},    {"plain", "coloured"},
    {"raised", "pressed"},  {"soapy", "rinsed"},     {"settled", "swirled"}, {"unknown", "sized"},
    {"grimy", "tidy"},      {"aside", "positioned"}, {"low", "high"},        {"outside", "inside"},
}};

constexpr std::array kNounBank = {"legs",  "armrest", "cover",  "cushion", "tire",   "bolt",    "panel",   "shelf",
                                  "drawer", "hinge",  "board",  "pipe",    "valve",  "filter",  "lid",     "bowl",
                                  "dough",  "sauce",  "carrot", "onion",   "pan",    "oven",    "screw",   "frame",
                                  "wheel",  "chain",  "brush",  "canvas",  "tape",   "glue",    "basin",   "tap",
                                  "blade",  "handle", "bracket", "rail",   "cable",  "battery", "lamp",    "mirror"};

constexpr std::array kGoalVerbs = {"assemble", "repair", "cook",     "replace", "build",
                                   "prepare",  "service", "restore", "decorate", "maintain"};
constexpr std::array kGoalNouns = {"sofa",   "bicycle", "cake",    "wardrobe", "engine",
                                   "soup",   "bookcase", "kitchen", "garden",  "desk"};

const std::vector<std::string> kPromptWords = {
    "the",  "person", "is",    "trying", "to",      "achieve", "goal",  "what", "are",   "next", "steps",
    "of",   "will",   "take",  "these",  "actions", "states",  "before", "and", "after", "doing", "changes",
    "from", "n/a",    ".",     "?",      ":",       "a",       "image"};

std::string bank_word(const auto& bank, int i, const char* prefix) {
    if (i < static_cast<int>(bank.size())) return bank[static_cast<std::size_t>(i)];
    return std::string(prefix) + std::to_string(i);
}

}  // namespace

const std::vector<std::string>& prompt_words() { return kPromptWords; }

void WorldConfig::validate() const {
    if (n_verbs < 1 || n_nouns < 1 || n_schemas < 1) throw DataError("world counts must be >= 1");
    if (min_steps < 1 || max_steps < min_steps) throw DataError("invalid steps-per-schema range");
    if (max_steps > n_verbs * n_nouns) {
        throw DataError("steps per schema (" + std::to_string(max_steps) + ") exceed the action vocabulary (" +
                        std::to_string(n_verbs * n_nouns) + ")");
    }
    if (n_schemas > static_cast<int>(kGoalVerbs.size() * kGoalNouns.size())) {
        throw DataError("n_schemas exceeds the goal-label capacity");
    }
    if (!(branching >= 0.0 && branching <= 1.0)) throw DataError("branching must lie in [0,1]");
    if (d_v < 1) throw DataError("d_v must be >= 1");
    if (!std::isfinite(noise_sigma) || noise_sigma < 0.0) throw DataError("noise_sigma must be finite and >= 0");
    if (min_frames_per_action < 1 || max_frames_per_action < min_frames_per_action) {
        throw DataError("invalid frames-per-action range");
    }
}

World generate_world(const WorldConfig& config) {
    config.validate();
    World world;
    world.config = config;
    Rng rng = substream(config.seed, stream::world);

    auto& vocab = world.vocab;
    for (int v = 0; v < config.n_verbs; ++v) {
        vocab.verbs.push_back(bank_word(kVerbBank, v, "verb"));
        if (v < static_cast<int>(kVerbStates.size())) {
            vocab.verb_states.emplace_back(kVerbStates[static_cast<std::size_t>(v)].first,
                                           kVerbStates[static_cast<std::size_t>(v)].second);
        } else {
            vocab.verb_states.emplace_back("pre" + std::to_string(v), "post" + std::to_string(v));
        }
    }
    for (int n = 0; n < config.n_nouns; ++n) vocab.nouns.push_back(bank_word(kNounBank, n, "noun"));
    for (int v = 0; v < config.n_verbs; ++v) {
        for (int n = 0; n < config.n_nouns; ++n) vocab.actions.push_back({v, n});
    }

    std::vector<std::string> goal_labels;
    for (const char* gv : kGoalVerbs) {
        for (const char* gn : kGoalNouns) goal_labels.push_back(std::string(gv) + " " + gn);
    }
    std::shuffle(goal_labels.begin(), goal_labels.end(), rng);
    goal_labels.resize(static_cast<std::size_t>(config.n_schemas));

    std::vector<std::string> extra(kPromptWords);
    for (const char* gv : kGoalVerbs) extra.emplace_back(gv);
    for (const char* gn : kGoalNouns) extra.emplace_back(gn);
    for (int n = 1; n <= kMaxListNumber; ++n) extra.push_back(std::to_string(n));
    vocab.finalize(extra);

    const int n_actions = world.n_actions();
    const auto d_v = static_cast<std::size_t>(config.d_v);
    world.action_basis.assign(static_cast<std::size_t>(n_actions), FeatureVec(d_v, 0.0f));
    if (config.d_v >= n_actions) {
        for (int a = 0; a < n_actions; ++a) world.action_basis[static_cast<std::size_t>(a)][static_cast<std::size_t>(a)] = 1.0f;
    } else {
        std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(config.d_v)));
        for (auto& vec : world.action_basis) {
            for (auto& x : vec) x = static_cast<float>(gauss(rng));
        }
    }

    std::vector<ActionId> all(static_cast<std::size_t>(n_actions));
    std::iota(all.begin(), all.end(), 0);
    std::uniform_int_distribution<int> len_dist(config.min_steps, config.max_steps);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int s = 0; s < config.n_schemas; ++s) {
        TaskSchema schema;
        schema.goal_label = goal_labels[static_cast<std::size_t>(s)];
        schema.min_len = config.min_steps;
        schema.max_len = config.max_steps;
        const int m = len_dist(rng);
        // Partial Fisher-Yates: the first m entries become the steps.
        for (int i = 0; i < m; ++i) {
            std::uniform_int_distribution<int> pick(i, n_actions - 1);
            std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
        }
        schema.steps.assign(all.begin(), all.begin() + m);
        // Edges only point forward in step order, so the graph is acyclic.
        for (int j = 1; j < m; ++j) {
            if (unit(rng) >= config.branching) {
                schema.dependencies.emplace_back(j - 1, j);
            } else if (j >= 2 && unit(rng) < 0.5) {
                std::uniform_int_distribution<int> from(0, j - 2);
                schema.dependencies.emplace_back(from(rng), j);
            }
        }
        world.schemas.push_back(std::move(schema));
    }
    return world;
}

std::string render_state_after(const World& world, ActionId a) {
    const auto& label = world.vocab.actions.at(static_cast<std::size_t>(a));
    const auto& noun = world.vocab.nouns[static_cast<std::size_t>(label.noun)];
    const auto& state = world.vocab.verb_states[static_cast<std::size_t>(label.verb)].second;
    return "the " + noun + " is " + state + " .";
}

std::string render_state_change(const World& world, ActionId a) {
    const auto& label = world.vocab.actions.at(static_cast<std::size_t>(a));
    const auto& noun = world.vocab.nouns[static_cast<std::size_t>(label.noun)];
    const auto& [before, after] = world.vocab.verb_states[static_cast<std::size_t>(label.verb)];
    return "the " + noun + " changes from " + before + " to " + after + " .";
}

}  // namespace vplan

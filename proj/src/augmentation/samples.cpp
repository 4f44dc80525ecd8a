#include "vplan/augmentation.hpp"

#include <algorithm>

namespace vplan {

namespace {

const std::array<PromptTemplate, 7> kTemplates = {{
    {TaskType::VPA, "<obs> the person is trying to achieve <goal text> . what are the next <h> steps ?"},
    {TaskType::GMA_TEXT, "<obs> the person is trying to achieve <goal text> . what are the next <h> steps ?"},
    {TaskType::GMA_IMAGE, "<obs> the person is trying to achieve the goal <goal image> . what are the next <h> steps ?"},
    {TaskType::GMA_NONE, "<obs> goal : n/a . what are the next <h> steps of the person ?"},
    {TaskType::GP, "<obs> what is the person trying to achieve ?"},
    {TaskType::SP, "<obs> the person will take these <actions> . what are the states before and after these actions ?"},
    {TaskType::CAPTION, "<obs> what is the person doing ?"},
}};

void append_tokens(std::vector<TokenId>& out, std::string_view text, const ActionVocab& vocab) {
    const auto t = tokenize(text, vocab);
    out.insert(out.end(), t.begin(), t.end());
}

std::span<const ActionId> future_actions(const Episode& ep, int horizon) {
    if (horizon < 1) throw DataError("horizon must be >= 1");
    if (horizon > ep.n_future()) {
        throw DataError("horizon " + std::to_string(horizon) + " exceeds the " + std::to_string(ep.n_future()) +
                        " future actions of the episode");
    }
    return std::span<const ActionId>(ep.action_sequence).subspan(static_cast<std::size_t>(ep.cut_index),
                                                                 static_cast<std::size_t>(horizon));
}

std::vector<FeatureVec> observed_frames(const Episode& ep) {
    return {ep.observation_frames.begin(), ep.observation_frames.begin() + ep.observed_frame_end()};
}

std::string plan_text(std::span<const ActionId> actions, const ActionVocab& vocab) {
    std::string out;
    for (std::size_t i = 0; i < actions.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(i + 1) + ". " + vocab.action_text(actions[i]);
    }
    return out;
}

InstructionSample plan_sample(const World& world, const Episode& ep, int horizon, TaskType type) {
    const auto future = future_actions(ep, horizon);
    const auto& schema = world.schemas.at(static_cast<std::size_t>(ep.schema_id));
    InstructionSample s;
    s.task_type = type;
    s.channel = ObsChannel::FRAMES;
    s.obs_frames = observed_frames(ep);
    s.horizon = horizon;
    s.schema_id = ep.schema_id;
    s.target_actions.assign(future.begin(), future.end());

    TemplateSlots slots;
    slots.horizon = horizon;
    if (type == TaskType::VPA || type == TaskType::GMA_TEXT) slots.goal_text = schema.goal_label;
    if (type == TaskType::GMA_IMAGE) {
        slots.goal_image = true;
        // Goal image: the last predicted action's segment, in feature space.
        s.goal_image = mean_frame(ep, ep.boundaries[static_cast<std::size_t>(ep.cut_index + horizon - 1)]);
    }
    s.instruction_tokens = render_instruction(prompt_template(type), slots, world.vocab);
    render_plan(future, world.vocab, s.response_tokens, s.boundary_spans);
    return s;
}

}  // namespace

std::string_view to_string(TaskType t) {
    switch (t) {
        case TaskType::VPA: return "VPA";
        case TaskType::GMA_TEXT: return "GMA_TEXT";
        case TaskType::GMA_IMAGE: return "GMA_IMAGE";
        case TaskType::GMA_NONE: return "GMA_NONE";
        case TaskType::GP: return "GP";
        case TaskType::SP: return "SP";
        case TaskType::CAPTION: return "CAPTION";
    }
    return "?";
}

std::string_view to_string(ObsChannel c) {
    switch (c) {
        case ObsChannel::FRAMES: return "FRAMES";
        case ObsChannel::IMAGE: return "IMAGE";
        case ObsChannel::TEXT: return "TEXT";
    }
    return "?";
}

TaskType task_type_from_string(std::string_view s) {
    for (auto t : {TaskType::VPA, TaskType::GMA_TEXT, TaskType::GMA_IMAGE, TaskType::GMA_NONE, TaskType::GP,
                   TaskType::SP, TaskType::CAPTION}) {
        if (to_string(t) == s) return t;
    }
    throw DataError("unknown task type: " + std::string(s));
}

ObsChannel channel_from_string(std::string_view s) {
    for (auto c : {ObsChannel::FRAMES, ObsChannel::IMAGE, ObsChannel::TEXT}) {
        if (to_string(c) == s) return c;
    }
    throw DataError("unknown observation channel: " + std::string(s));
}

const PromptTemplate& prompt_template(TaskType t) {
    for (const auto& tpl : kTemplates) {
        if (tpl.task_type == t) return tpl;
    }
    throw DataError("no template for task type");
}

std::vector<TokenId> render_instruction(const PromptTemplate& tpl, const TemplateSlots& slots, const ActionVocab& vocab) {
    std::string_view rest = tpl.skeleton;
    constexpr std::string_view obs = "<obs> ";
    if (!rest.starts_with(obs)) throw DataError("template must start with the observation slot");
    rest.remove_prefix(obs.size());

    std::vector<TokenId> out;
    while (!rest.empty()) {
        const auto open = rest.find('<');
        append_tokens(out, rest.substr(0, open), vocab);
        if (open == std::string_view::npos) break;
        const auto close = rest.find('>', open);
        const auto slot = rest.substr(open, close - open + 1);
        if (slot == "<goal text>") {
            if (!slots.goal_text) throw DataError("unfilled template slot <goal text>");
            append_tokens(out, *slots.goal_text, vocab);
        } else if (slot == "<goal image>") {
            if (!slots.goal_image) throw DataError("unfilled template slot <goal image>");
            out.push_back(vocab.special.goal_image);
        } else if (slot == "<actions>") {
            if (!slots.actions) throw DataError("unfilled template slot <actions>");
            append_tokens(out, *slots.actions, vocab);
        } else if (slot == "<h>") {
            if (!slots.horizon) throw DataError("unfilled template slot <h>");
            out.push_back(vocab.id(std::to_string(*slots.horizon)));
        } else {
            throw DataError("unknown template slot " + std::string(slot));
        }
        rest.remove_prefix(close + 1);
    }
    return out;
}

void render_plan(std::span<const ActionId> actions, const ActionVocab& vocab, std::vector<TokenId>& tokens,
                 std::vector<TokenSpan>& spans) {
    tokens.clear();
    spans.clear();
    for (std::size_t i = 0; i < actions.size(); ++i) {
        tokens.push_back(vocab.number_token(static_cast<int>(i) + 1));
        const int begin = static_cast<int>(tokens.size());
        const auto label = vocab.action_tokens(actions[i]);
        tokens.insert(tokens.end(), label.begin(), label.end());
        spans.push_back({begin, static_cast<int>(tokens.size())});
    }
    tokens.push_back(vocab.special.eos);
}

InstructionSample make_vpa_sample(const World& world, const Episode& ep, int horizon) {
    return plan_sample(world, ep, horizon, TaskType::VPA);
}

std::array<InstructionSample, 3> make_gma_samples(const World& world, const Episode& ep, int horizon) {
    return {plan_sample(world, ep, horizon, TaskType::GMA_TEXT), plan_sample(world, ep, horizon, TaskType::GMA_IMAGE),
            plan_sample(world, ep, horizon, TaskType::GMA_NONE)};
}

InstructionSample make_lta_sample(const World& world, const Episode& ep, int horizon) {
    // Goal-free prompt, but trained and evaluated as a primary planning task.
    auto s = plan_sample(world, ep, horizon, TaskType::GMA_NONE);
    s.task_type = TaskType::VPA;
    return s;
}

InstructionSample make_gp_sample(const World& world, const Episode& ep, ObsChannel channel) {
    InstructionSample s;
    s.task_type = TaskType::GP;
    s.channel = channel;
    s.schema_id = ep.schema_id;
    switch (channel) {
        case ObsChannel::FRAMES:
            s.obs_frames = observed_frames(ep);
            break;
        case ObsChannel::IMAGE:
            s.obs_frames = {ep.observation_frames[static_cast<std::size_t>(ep.observed_frame_end() - 1)]};
            break;
        case ObsChannel::TEXT:
            s.obs_tokens = tokenize(
                render_state_after(world, ep.action_sequence[static_cast<std::size_t>(ep.cut_index - 1)]),
                world.vocab);
            break;
    }
    s.instruction_tokens = render_instruction(prompt_template(TaskType::GP), {}, world.vocab);
    s.response_tokens = tokenize(world.schemas.at(static_cast<std::size_t>(ep.schema_id)).goal_label, world.vocab);
    s.response_tokens.push_back(world.vocab.special.eos);
    return s;
}

InstructionSample make_sp_sample(const World& world, const Episode& ep, int horizon) {
    const auto future = future_actions(ep, horizon);
    InstructionSample s;
    s.task_type = TaskType::SP;
    s.channel = ObsChannel::FRAMES;
    s.obs_frames = observed_frames(ep);
    s.schema_id = ep.schema_id;
    s.target_actions.assign(future.begin(), future.end());
    TemplateSlots slots;
    slots.actions = plan_text(future, world.vocab);
    s.instruction_tokens = render_instruction(prompt_template(TaskType::SP), slots, world.vocab);
    for (ActionId a : future) append_tokens(s.response_tokens, render_state_change(world, a), world.vocab);
    s.response_tokens.push_back(world.vocab.special.eos);
    return s;
}

InstructionSample make_caption_sample(const World& world, ActionId action, std::uint64_t rng_seed) {
    Rng rng(rng_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    FeatureVec frame = world.action_basis.at(static_cast<std::size_t>(action));
    if (world.config.noise_sigma > 0.0) {
        for (auto& x : frame) x += static_cast<float>(world.config.noise_sigma * noise(rng));
    }
    InstructionSample s;
    s.task_type = TaskType::CAPTION;
    s.channel = ObsChannel::IMAGE;
    s.obs_frames = {std::move(frame)};
    s.instruction_tokens = render_instruction(prompt_template(TaskType::CAPTION), {}, world.vocab);
    s.response_tokens = world.vocab.action_tokens(action);
    s.boundary_spans = {{0, static_cast<int>(s.response_tokens.size())}};
    s.response_tokens.push_back(world.vocab.special.eos);
    s.target_actions = {action};
    return s;
}

std::vector<InstructionSample> make_alignment_pairs(const World& world, int n, std::uint64_t seed) {
    std::vector<InstructionSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = substream(seed, stream::align, static_cast<std::uint64_t>(i));
        // Cycle through the actions so every label is covered.
        const auto action = static_cast<ActionId>(i % world.n_actions());
        out.push_back(make_caption_sample(world, action, rng()));
    }
    return out;
}

std::vector<std::vector<TokenId>> split_numbered(std::span<const TokenId> response, const ActionVocab& vocab) {
    std::vector<std::vector<TokenId>> chunks;
    bool open = false;
    for (TokenId t : response) {
        if (t == vocab.special.eos) break;
        if (vocab.list_number(t)) {
            chunks.emplace_back();
            open = true;
        } else if (open) {
            chunks.back().push_back(t);
        }
    }
    return chunks;
}

std::optional<std::vector<ActionId>> parse_plan(std::span<const TokenId> response, const ActionVocab& vocab) {
    // Strict form: numbers count up from 1 and every chunk is an exact label.
    std::vector<ActionId> out;
    std::vector<TokenId> chunk;
    int number = 0;
    auto flush = [&]() -> bool {
        if (number == 0) return chunk.empty();
        auto a = vocab.action_by_text(detokenize(chunk, vocab));
        if (!a) return false;
        out.push_back(*a);
        chunk.clear();
        return true;
    };
    bool terminated = false;
    for (TokenId t : response) {
        if (t == vocab.special.eos) {
            terminated = true;
            break;
        }
        if (auto n = vocab.list_number(t)) {
            if (*n != number + 1 || !flush()) return std::nullopt;
            number = *n;
        } else {
            chunk.push_back(t);
        }
    }
    if (!terminated || number == 0 || !flush()) return std::nullopt;
    return out;
}

std::optional<int> parse_goal(std::span<const TokenId> response, const World& world) {
    auto end = std::find(response.begin(), response.end(), world.vocab.special.eos);
    const auto text = detokenize(std::span<const TokenId>(response.begin(), end), world.vocab);
    for (std::size_t s = 0; s < world.schemas.size(); ++s) {
        if (world.schemas[s].goal_label == text) return static_cast<int>(s);
    }
    return std::nullopt;
}

std::vector<std::string> parse_states(std::span<const TokenId> response, const ActionVocab& vocab) {
    std::vector<std::string> out;
    std::vector<TokenId> current;
    const TokenId stop = vocab.id(".");
    for (TokenId t : response) {
        if (t == vocab.special.eos) break;
        current.push_back(t);
        if (t == stop) {
            out.push_back(detokenize(current, vocab));
            current.clear();
        }
    }
    return out;
}

}  // namespace vplan

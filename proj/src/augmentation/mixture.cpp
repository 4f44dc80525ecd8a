#include "vplan/augmentation.hpp"
#include "vplan/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace vplan {

using nlohmann::json;

MixtureWeights default_mixture_weights() {
    return {{TaskType::GMA_TEXT, 1.0}, {TaskType::GMA_IMAGE, 1.0}, {TaskType::GMA_NONE, 1.0}, {TaskType::GP, 1.0},
            {TaskType::SP, 1.0}};
}

std::map<TaskType, int> mixture_counts(const MixtureWeights& weights, bool include_sp, int total) {
    std::vector<std::pair<TaskType, double>> active;
    double sum = 0.0;
    for (const auto& [type, w] : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("mixture weights must be finite and nonnegative");
        if (type == TaskType::SP && !include_sp) continue;
        if (type == TaskType::VPA || type == TaskType::CAPTION) {
            throw DataError("mixture weights may only name auxiliary task types");
        }
        if (w > 0.0) active.emplace_back(type, w);
        sum += w;
    }
    if (!(sum > 0.0)) throw DataError("mixture weights must sum to a positive value");

    // Largest remainder: floors first, then +1 to the largest fractional parts
    // (ties broken by task-type order).
    std::map<TaskType, int> counts;
    std::vector<std::pair<double, TaskType>> remainders;
    int assigned = 0;
    for (const auto& [type, w] : active) {
        const double exact = total * w / sum;
        const int floor_count = static_cast<int>(std::floor(exact));
        counts[type] = floor_count;
        assigned += floor_count;
        remainders.emplace_back(exact - floor_count, type);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[remainders[i % remainders.size()].second];
    return counts;
}

std::vector<InstructionSample> build_stage2_mixture(const World& world, const std::vector<Episode>& corpus,
                                                    const MixtureWeights& weights, bool include_sp,
                                                    std::uint64_t seed, std::span<const int> horizons, int total) {
    if (corpus.empty()) throw DataError("cannot build a mixture from an empty corpus");
    if (horizons.empty()) throw DataError("mixture needs at least one horizon");
    if (total <= 0) total = static_cast<int>(corpus.size());
    const auto counts = mixture_counts(weights, include_sp, total);

    std::vector<InstructionSample> out;
    out.reserve(static_cast<std::size_t>(total));
    constexpr std::array kChannels = {ObsChannel::FRAMES, ObsChannel::IMAGE, ObsChannel::TEXT};
    for (const auto& [type, count] : counts) {
        // Each task type walks its own shuffled pass over the episodes.
        std::vector<std::size_t> order(corpus.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng = substream(seed, stream::mixture, static_cast<std::uint64_t>(type));
        std::shuffle(order.begin(), order.end(), rng);
        for (int j = 0; j < count; ++j) {
            const Episode& ep = corpus[order[static_cast<std::size_t>(j) % order.size()]];
            const int horizon = std::min(horizons[static_cast<std::size_t>(j) % horizons.size()], ep.n_future());
            switch (type) {
                case TaskType::GMA_TEXT:
                case TaskType::GMA_IMAGE:
                case TaskType::GMA_NONE:
                    out.push_back(make_gma_samples(world, ep, horizon)[static_cast<std::size_t>(type) -
                                                                       static_cast<std::size_t>(TaskType::GMA_TEXT)]);
                    break;
                case TaskType::GP:
                    out.push_back(make_gp_sample(world, ep, kChannels[static_cast<std::size_t>(j) % kChannels.size()]));
                    break;
                case TaskType::SP:
                    out.push_back(make_sp_sample(world, ep, horizon));
                    break;
                default:
                    break;
            }
        }
    }
    Rng rng = substream(seed, stream::shuffle, 0x4d4958);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

void save_samples(const std::vector<InstructionSample>& samples, const std::string& path) {
    std::string lines;
    for (const auto& s : samples) {
        json j;
        j["task_type"] = to_string(s.task_type);
        j["channel"] = to_string(s.channel);
        j["obs_frames"] = s.obs_frames;
        j["obs_tokens"] = s.obs_tokens;
        j["instruction"] = s.instruction_tokens;
        if (s.goal_image) j["goal_image"] = *s.goal_image;
        j["response"] = s.response_tokens;
        j["horizon"] = s.horizon;
        json spans = json::array();
        for (const auto& sp : s.boundary_spans) spans.push_back({sp.begin, sp.end});
        j["spans"] = std::move(spans);
        j["targets"] = s.target_actions;
        j["schema_id"] = s.schema_id;
        lines += j.dump();
        lines += '\n';
    }
    write_file(path, lines);
}

std::vector<InstructionSample> load_samples(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<InstructionSample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const json j = parse_json(line, path + ":" + std::to_string(line_no));
        InstructionSample s;
        s.task_type = task_type_from_string(j.at("task_type").get<std::string>());
        s.channel = channel_from_string(j.at("channel").get<std::string>());
        s.obs_frames = j.at("obs_frames").get<std::vector<FeatureVec>>();
        s.obs_tokens = j.at("obs_tokens").get<std::vector<TokenId>>();
        s.instruction_tokens = j.at("instruction").get<std::vector<TokenId>>();
        if (j.contains("goal_image")) s.goal_image = j.at("goal_image").get<FeatureVec>();
        s.response_tokens = j.at("response").get<std::vector<TokenId>>();
        s.horizon = j.at("horizon").get<int>();
        for (const auto& sp : j.at("spans")) s.boundary_spans.push_back({sp.at(0).get<int>(), sp.at(1).get<int>()});
        s.target_actions = j.at("targets").get<std::vector<ActionId>>();
        s.schema_id = j.at("schema_id").get<int>();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace vplan

#include "vplan/corpus.hpp"

#include <algorithm>

namespace vplan {

Episode sample_episode(const World& world, int schema_id, std::uint64_t rng_seed, const CutPolicy& cut_policy) {
    if (schema_id < 0 || schema_id >= static_cast<int>(world.schemas.size())) {
        throw DataError("schema id out of range: " + std::to_string(schema_id));
    }
    const TaskSchema& schema = world.schemas[static_cast<std::size_t>(schema_id)];
    const int m = static_cast<int>(schema.steps.size());
    if (m < cut_policy.min_future + 1) {
        throw DataError("schema '" + schema.goal_label + "' has " + std::to_string(m) +
                        " steps; need at least horizon + 1 = " + std::to_string(cut_policy.min_future + 1));
    }
    Rng rng(rng_seed);

    // Uniform choice among ready steps yields a random topological order.
    std::vector<int> indegree(static_cast<std::size_t>(m), 0);
    std::vector<std::vector<int>> successors(static_cast<std::size_t>(m));
    for (const auto& [from, to] : schema.dependencies) {
        successors[static_cast<std::size_t>(from)].push_back(to);
        ++indegree[static_cast<std::size_t>(to)];
    }
    std::vector<int> ready;
    for (int i = 0; i < m; ++i) {
        if (indegree[static_cast<std::size_t>(i)] == 0) ready.push_back(i);
    }

    Episode ep;
    ep.schema_id = schema_id;
    ep.goal_tokens = tokenize(schema.goal_label, world.vocab);
    while (!ready.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, ready.size() - 1);
        const std::size_t k = pick(rng);
        const int step = ready[k];
        ready.erase(ready.begin() + static_cast<std::ptrdiff_t>(k));
        ep.action_sequence.push_back(schema.steps[static_cast<std::size_t>(step)]);
        for (int next : successors[static_cast<std::size_t>(step)]) {
            if (--indegree[static_cast<std::size_t>(next)] == 0) {
                ready.insert(std::lower_bound(ready.begin(), ready.end(), next), next);
            }
        }
    }
    if (static_cast<int>(ep.action_sequence.size()) != m) throw DataError("schema dependency graph has a cycle");

    const auto& cfg = world.config;
    std::uniform_int_distribution<int> frames_dist(cfg.min_frames_per_action, cfg.max_frames_per_action);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (ActionId a : ep.action_sequence) {
        const int k = frames_dist(rng);
        const int start = static_cast<int>(ep.observation_frames.size());
        const auto& basis = world.action_basis[static_cast<std::size_t>(a)];
        for (int f = 0; f < k; ++f) {
            FeatureVec frame(basis);
            if (cfg.noise_sigma > 0.0) {
                for (auto& x : frame) x += static_cast<float>(cfg.noise_sigma * noise(rng));
            }
            ep.observation_frames.push_back(std::move(frame));
        }
        ep.boundaries.emplace_back(start, start + k);
    }

    if (cut_policy.fixed_cut) {
        ep.cut_index = *cut_policy.fixed_cut;
        if (ep.cut_index < 1 || ep.cut_index > m - cut_policy.min_future) {
            throw DataError("fixed cut index leaves too few observed or future actions");
        }
    } else {
        std::uniform_int_distribution<int> cut_dist(1, m - cut_policy.min_future);
        ep.cut_index = cut_dist(rng);
    }
    ep.terminal_feature = mean_frame(ep, ep.boundaries.back());
    return ep;
}

FeatureVec mean_frame(const Episode& ep, std::pair<int, int> range) {
    const auto [start, end] = range;
    if (start < 0 || end <= start || end > static_cast<int>(ep.observation_frames.size())) {
        throw DataError("invalid frame range");
    }
    FeatureVec out(ep.observation_frames[static_cast<std::size_t>(start)].size(), 0.0f);
    // Accumulate in double so the mean is independent of frame count rounding.
    std::vector<double> acc(out.size(), 0.0);
    for (int f = start; f < end; ++f) {
        const auto& frame = ep.observation_frames[static_cast<std::size_t>(f)];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += frame[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / (end - start));
    return out;
}

std::vector<Violation> validate_episode(const Episode& episode, const TaskSchema& schema) {
    std::vector<Violation> out;
    const auto& seq = episode.action_sequence;
    const int m = static_cast<int>(seq.size());

    // Position of each schema step within the sequence; steps are distinct actions.
    std::vector<int> position(schema.steps.size(), -1);
    for (int i = 0; i < m; ++i) {
        auto it = std::find(schema.steps.begin(), schema.steps.end(), seq[static_cast<std::size_t>(i)]);
        if (it == schema.steps.end()) {
            out.push_back({Violation::Kind::membership,
                           "action " + std::to_string(seq[static_cast<std::size_t>(i)]) + " is not a step of the schema"});
            continue;
        }
        auto& pos = position[static_cast<std::size_t>(it - schema.steps.begin())];
        if (pos >= 0) {
            out.push_back({Violation::Kind::membership, "action " + std::to_string(*it) + " appears twice"});
        }
        pos = i;
    }
    for (std::size_t s = 0; s < position.size(); ++s) {
        if (position[s] < 0) {
            out.push_back({Violation::Kind::membership, "step " + std::to_string(schema.steps[s]) + " never executed"});
        }
    }
    for (const auto& [from, to] : schema.dependencies) {
        const int pf = position[static_cast<std::size_t>(from)];
        const int pt = position[static_cast<std::size_t>(to)];
        if (pf >= 0 && pt >= 0 && pf > pt) {
            const ActionId a = schema.steps[static_cast<std::size_t>(from)];
            const ActionId b = schema.steps[static_cast<std::size_t>(to)];
            Violation v{Violation::Kind::dependency,
                        "action " + std::to_string(b) + " precedes its prerequisite " + std::to_string(a)};
            v.actions = {a, b};
            out.push_back(std::move(v));
        }
    }

    if (static_cast<int>(episode.boundaries.size()) != m) {
        out.push_back({Violation::Kind::boundary, "boundary count differs from action count"});
    } else {
        int prev_end = 0;
        for (int i = 0; i < m; ++i) {
            const auto [start, end] = episode.boundaries[static_cast<std::size_t>(i)];
            if (end <= start) {
                out.push_back({Violation::Kind::boundary, "action " + std::to_string(i) + " has an empty segment"});
            }
            if (start < prev_end) {
                out.push_back({Violation::Kind::boundary, "segments " + std::to_string(i - 1) + " and " +
                                                              std::to_string(i) + " overlap or are out of order"});
            }
            prev_end = std::max(prev_end, end);
        }
        if (m > 0 && episode.boundaries.front().first != 0) {
            out.push_back({Violation::Kind::boundary, "segments do not start at frame 0"});
        }
        if (prev_end > static_cast<int>(episode.observation_frames.size())) {
            out.push_back({Violation::Kind::boundary, "segments run past the last frame"});
        }
    }

    if (episode.cut_index < 1 || episode.cut_index >= m) {
        out.push_back({Violation::Kind::cut, "cut index " + std::to_string(episode.cut_index) +
                                                 " leaves no observed or no future action"});
    }
    return out;
}

std::vector<Episode> sample_corpus(const World& world, int n_episodes, std::uint64_t seed, std::uint64_t tag,
                                   const CutPolicy& cut_policy) {
    std::vector<Episode> out;
    out.reserve(static_cast<std::size_t>(n_episodes));
    const int n_schemas = static_cast<int>(world.schemas.size());
    for (int i = 0; i < n_episodes; ++i) {
        Rng sub = substream(seed, tag, static_cast<std::uint64_t>(i));
        out.push_back(sample_episode(world, i % n_schemas, sub(), cut_policy));
    }
    return out;
}

bool in_test_split(const Episode& episode, double test_fraction) {
    std::string key = std::to_string(episode.schema_id) + ":" + std::to_string(episode.cut_index) + ":";
    for (ActionId a : episode.action_sequence) key += std::to_string(a) + ",";
    const std::uint64_t h = std::stoull(sha256_hex(key).substr(0, 12), nullptr, 16);
    return static_cast<double>(h) / static_cast<double>(1ULL << 48) < test_fraction;
}

CorpusSplit sample_split(const World& world, int n_train, int n_test, double test_fraction, std::uint64_t seed,
                         const CutPolicy& cut_policy) {
    if (n_train < 0 || n_test < 0) throw DataError("split sizes must be >= 0");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw DataError("test_fraction must lie in (0, 1)");
    CorpusSplit out;
    const int n_schemas = static_cast<int>(world.schemas.size());
    const long limit = 1000L * (n_train + n_test) + 1000;
    for (long i = 0; static_cast<int>(out.train.size()) < n_train || static_cast<int>(out.test.size()) < n_test; ++i) {
        if (i >= limit) throw DataError("could not fill the train/test split; adjust test_fraction");
        Rng sub = substream(seed, stream::episode, static_cast<std::uint64_t>(i));
        Episode ep = sample_episode(world, static_cast<int>(i % n_schemas), sub(), cut_policy);
        auto& dst = in_test_split(ep, test_fraction) ? out.test : out.train;
        const int cap = &dst == &out.test ? n_test : n_train;
        if (static_cast<int>(dst.size()) < cap) dst.push_back(std::move(ep));
    }
    return out;
}

}  // namespace vplan

#include "vplan/corpus.hpp"
#include "vplan/json_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vplan {

using nlohmann::json;

namespace {

constexpr int kWorldFormatVersion = 1;

void append_f32(std::string& out, const FeatureVec& v) {
    static_assert(std::endian::native == std::endian::little, "sidecar writer assumes a little-endian host");
    const auto* bytes = reinterpret_cast<const char*>(v.data());
    out.append(bytes, v.size() * sizeof(float));
}

FeatureVec read_f32(const std::string& blob, std::size_t offset, std::size_t count) {
    if (offset + count * sizeof(float) > blob.size()) throw DataError("feature sidecar is truncated");
    FeatureVec v(count);
    std::memcpy(v.data(), blob.data() + offset, count * sizeof(float));
    return v;
}

json episode_header(const Episode& ep) {
    json j;
    j["schema_id"] = ep.schema_id;
    j["goal_tokens"] = ep.goal_tokens;
    j["actions"] = ep.action_sequence;
    j["boundaries"] = ep.boundaries;
    j["cut"] = ep.cut_index;
    return j;
}

}  // namespace

json to_json(const WorldConfig& c) {
    return json{{"n_verbs", c.n_verbs},
                {"n_nouns", c.n_nouns},
                {"n_schemas", c.n_schemas},
                {"min_steps", c.min_steps},
                {"max_steps", c.max_steps},
                {"branching", c.branching},
                {"d_v", c.d_v},
                {"noise_sigma", c.noise_sigma},
                {"min_frames_per_action", c.min_frames_per_action},
                {"max_frames_per_action", c.max_frames_per_action},
                {"seed", c.seed}};
}

WorldConfig world_config_from_json(const json& j) {
    WorldConfig c;
    c.n_verbs = j.value("n_verbs", c.n_verbs);
    c.n_nouns = j.value("n_nouns", c.n_nouns);
    c.n_schemas = j.value("n_schemas", c.n_schemas);
    c.min_steps = j.value("min_steps", c.min_steps);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.branching = j.value("branching", c.branching);
    c.d_v = j.value("d_v", c.d_v);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.min_frames_per_action = j.value("min_frames_per_action", c.min_frames_per_action);
    c.max_frames_per_action = j.value("max_frames_per_action", c.max_frames_per_action);
    c.seed = j.value("seed", c.seed);
    return c;
}

void save_world(const World& world, const std::string& path) {
    json j;
    j["format"] = "vplan-world";
    j["version"] = kWorldFormatVersion;
    j["config"] = to_json(world.config);
    j["seed"] = world.config.seed;
    j["vocab"] = {{"verbs", world.vocab.verbs},
                  {"nouns", world.vocab.nouns},
                  {"verb_states", world.vocab.verb_states},
                  {"extra_words", world.vocab.extra_words},
                  {"tokens", world.vocab.tokens()}};
    json schemas = json::array();
    for (const auto& s : world.schemas) {
        schemas.push_back({{"goal", s.goal_label},
                           {"steps", s.steps},
                           {"dependencies", s.dependencies},
                           {"min_len", s.min_len},
                           {"max_len", s.max_len}});
    }
    j["schemas"] = std::move(schemas);
    j["action_basis"] = world.action_basis;
    write_file(path, j.dump(1) + "\n");
}

World load_world(const std::string& path) {
    const json j = parse_json(read_file(path), path);
    if (j.value("format", "") != "vplan-world") throw DataError(path + ": not a world manifest");
    if (j.value("version", 0) != kWorldFormatVersion) throw DataError(path + ": unsupported world format version");
    World w;
    w.config = world_config_from_json(j.at("config"));
    const auto& v = j.at("vocab");
    w.vocab.verbs = v.at("verbs").get<std::vector<std::string>>();
    w.vocab.nouns = v.at("nouns").get<std::vector<std::string>>();
    w.vocab.verb_states = v.at("verb_states").get<std::vector<std::pair<std::string, std::string>>>();
    for (int vi = 0; vi < static_cast<int>(w.vocab.verbs.size()); ++vi) {
        for (int ni = 0; ni < static_cast<int>(w.vocab.nouns.size()); ++ni) w.vocab.actions.push_back({vi, ni});
    }
    w.vocab.finalize(v.at("extra_words").get<std::vector<std::string>>());
    if (w.vocab.tokens() != v.at("tokens").get<std::vector<std::string>>()) {
        throw DataError(path + ": token table does not match its word lists");
    }
    for (const auto& s : j.at("schemas")) {
        TaskSchema t;
        t.goal_label = s.at("goal").get<std::string>();
        t.steps = s.at("steps").get<std::vector<ActionId>>();
        t.dependencies = s.at("dependencies").get<std::vector<std::pair<int, int>>>();
        t.min_len = s.at("min_len").get<int>();
        t.max_len = s.at("max_len").get<int>();
        w.schemas.push_back(std::move(t));
    }
    w.action_basis = j.at("action_basis").get<std::vector<FeatureVec>>();
    return w;
}

void save_episodes(const std::vector<Episode>& episodes, const std::string& path, FeatureEncoding encoding) {
    std::string lines;
    std::string blob;
    const std::string sidecar = path + ".f32";
    for (const auto& ep : episodes) {
        json j = episode_header(ep);
        if (encoding == FeatureEncoding::decimal) {
            j["frames"] = ep.observation_frames;
            j["terminal"] = ep.terminal_feature;
        } else {
            const std::size_t dim = ep.terminal_feature.size();
            j["features"] = {{"offset", blob.size()},
                             {"n_frames", ep.observation_frames.size()},
                             {"dim", dim}};
            for (const auto& f : ep.observation_frames) {
                if (f.size() != dim) throw DataError("ragged frame dimensions");
                append_f32(blob, f);
            }
            append_f32(blob, ep.terminal_feature);
        }
        lines += j.dump();
        lines += '\n';
    }
    write_file(path, lines);
    if (encoding == FeatureEncoding::f32_sidecar) write_file(sidecar, blob);
}

std::vector<Episode> load_episodes(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string blob;
    bool blob_loaded = false;
    std::vector<Episode> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const json j = parse_json(line, path + ":" + std::to_string(line_no));
        Episode ep;
        ep.schema_id = j.at("schema_id").get<int>();
        ep.goal_tokens = j.at("goal_tokens").get<std::vector<TokenId>>();
        ep.action_sequence = j.at("actions").get<std::vector<ActionId>>();
        ep.boundaries = j.at("boundaries").get<std::vector<std::pair<int, int>>>();
        ep.cut_index = j.at("cut").get<int>();
        if (j.contains("frames")) {
            ep.observation_frames = j.at("frames").get<std::vector<FeatureVec>>();
            ep.terminal_feature = j.at("terminal").get<FeatureVec>();
        } else {
            if (!blob_loaded) {
                blob = read_file(path + ".f32");
                blob_loaded = true;
            }
            const auto& f = j.at("features");
            std::size_t offset = f.at("offset").get<std::size_t>();
            const auto n_frames = f.at("n_frames").get<std::size_t>();
            const auto dim = f.at("dim").get<std::size_t>();
            for (std::size_t i = 0; i < n_frames; ++i) {
                ep.observation_frames.push_back(read_f32(blob, offset, dim));
                offset += dim * sizeof(float);
            }
            ep.terminal_feature = read_f32(blob, offset, dim);
        }
        out.push_back(std::move(ep));
    }
    return out;
}

std::string hash_episodes(const std::vector<Episode>& episodes) {
    std::string canon;
    for (const auto& ep : episodes) {
        json j = episode_header(ep);
        j["frames"] = ep.observation_frames;
        j["terminal"] = ep.terminal_feature;
        canon += j.dump();
        canon += '\n';
    }
    return sha256_hex(canon);
}

}  // namespace vplan

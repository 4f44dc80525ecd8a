#include "vplan/model.hpp"

#include <cmath>

namespace vplan {

void ModelInput::push_token(TokenId t) {
    tokens.push_back(t);
    feature_slot.push_back(-1);
}

void ModelInput::push_feature(TokenId placeholder, FeatureVec f) {
    tokens.push_back(placeholder);
    feature_slot.push_back(static_cast<int>(features.size()));
    features.push_back(std::move(f));
}

std::vector<int> subsample_frames(int n_frames, int max_frames) {
    std::vector<int> idx;
    if (max_frames <= 0 || n_frames <= max_frames) {
        for (int i = 0; i < n_frames; ++i) idx.push_back(i);
    } else if (max_frames == 1) {
        idx.push_back(n_frames - 1);
    } else {
        // Evenly spaced, always keeping the first and the most recent frame.
        for (int j = 0; j < max_frames; ++j) {
            idx.push_back(static_cast<int>(std::lround(static_cast<double>(j) * (n_frames - 1) / (max_frames - 1))));
        }
    }
    return idx;
}

ModelInput encode_prompt(const InstructionSample& s, const ModelConfig& config, const SpecialTokens& special) {
    ModelInput in;
    if (s.channel == ObsChannel::TEXT) {
        for (TokenId t : s.obs_tokens) in.push_token(t);
    } else {
        for (int i : subsample_frames(static_cast<int>(s.obs_frames.size()), config.max_obs_frames)) {
            in.push_feature(special.frame, s.obs_frames[static_cast<std::size_t>(i)]);
        }
    }
    in.push_token(special.sep);
    for (TokenId t : s.instruction_tokens) {
        if (t == special.goal_image) {
            if (!s.goal_image) throw DataError("instruction has a <goal_image> slot but no goal image");
            in.push_feature(special.goal_image, *s.goal_image);
        } else {
            in.push_token(t);
        }
    }
    in.push_token(special.bor);
    return in;
}

EncodedSample encode_sample(const InstructionSample& s, const ModelConfig& config, const SpecialTokens& special) {
    if (s.response_tokens.empty()) throw DataError("sample has an empty response");
    EncodedSample e;
    e.input = encode_prompt(s, config, special);
    e.first_target = e.input.size() - 1;
    for (std::size_t j = 0; j + 1 < s.response_tokens.size(); ++j) e.input.push_token(s.response_tokens[j]);
    e.response = s.response_tokens;
    e.spans = s.boundary_spans;
    return e;
}

}  // namespace vplan

#include "vplan/model.hpp"

#include <cmath>

namespace vplan {

namespace {

TokenId argmax_lowest(const Eigen::Ref<const Eigen::Matrix<float, 1, Eigen::Dynamic>>& row) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < row.size(); ++k) {
        if (row[k] > row[best]) best = k;
    }
    return static_cast<TokenId>(best);
}

// Steps all unfinished sequences together; `pick` chooses the next token of
// sequence i from its head-0 logits.
template <class Pick>
std::vector<DecodeResult> decode_loop(const Model& model, std::vector<ModelInput> seqs, int max_tokens, TokenId eos,
                                      Pick pick) {
    const int ctx = model.config.context_length;
    std::vector<DecodeResult> results(seqs.size());
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (seqs[i].size() > ctx) throw DataError("prompt does not fit the context window");
        if (max_tokens > 0) {
            active.push_back(i);
        } else {
            results[i].truncated = true;
        }
    }
    Transformer<float> net(model);
    while (!active.empty()) {
        std::vector<const ModelInput*> batch;
        std::vector<std::vector<int>> positions;
        for (std::size_t i : active) {
            batch.push_back(&seqs[i]);
            positions.push_back({seqs[i].size() - 1});
        }
        const auto out = net.forward(batch, positions, RunMode::infer);
        std::vector<std::size_t> still;
        for (std::size_t k = 0; k < active.size(); ++k) {
            const std::size_t i = active[k];
            const TokenId t = pick(i, out.logits[0].row(static_cast<Eigen::Index>(k)));
            results[i].tokens.push_back(t);
            if (t == eos) continue;
            if (static_cast<int>(results[i].tokens.size()) >= max_tokens || seqs[i].size() + 1 > ctx) {
                results[i].truncated = true;
                continue;
            }
            seqs[i].push_token(t);
            still.push_back(i);
        }
        active = std::move(still);
    }
    return results;
}

}  // namespace

std::vector<DecodeResult> decode_greedy(const Model& model, const std::vector<ModelInput>& prompts, int max_tokens,
                                        TokenId eos) {
    return decode_loop(model, prompts, max_tokens, eos,
                       [](std::size_t, const auto& row) { return argmax_lowest(row); });
}

std::vector<DecodeResult> decode_sample(const Model& model, const ModelInput& prompt, double temperature,
                                        std::uint64_t seed, int n_sequences, int max_tokens, TokenId eos) {
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw UsageError("temperature must be finite and >= 0");
    std::vector<Rng> rngs;
    for (int j = 0; j < n_sequences; ++j) rngs.push_back(substream(seed, stream::sampling, static_cast<std::uint64_t>(j)));
    std::vector<ModelInput> seqs(static_cast<std::size_t>(n_sequences), prompt);
    std::vector<double> probs;
    return decode_loop(model, std::move(seqs), max_tokens, eos, [&](std::size_t i, const auto& row) -> TokenId {
        if (temperature == 0.0) return argmax_lowest(row);
        const double mx = row.maxCoeff();
        probs.resize(static_cast<std::size_t>(row.size()));
        double sum = 0.0;
        for (Eigen::Index k = 0; k < row.size(); ++k) {
            probs[static_cast<std::size_t>(k)] = std::exp((row[k] - mx) / temperature);
            sum += probs[static_cast<std::size_t>(k)];
        }
        const double u = std::uniform_real_distribution<double>(0.0, sum)(rngs[i]);
        double acc = 0.0;
        for (std::size_t k = 0; k < probs.size(); ++k) {
            acc += probs[k];
            if (u < acc) return static_cast<TokenId>(k);
        }
        // Rounding left u at the top of the range: take the last nonzero entry.
        for (std::size_t k = probs.size(); k-- > 0;) {
            if (probs[k] > 0.0) return static_cast<TokenId>(k);
        }
        return 0;
    });
}

}  // namespace vplan

#include "vplan/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace vplan {

using nlohmann::json;

namespace {

Eigen::RowVectorXd mean_embedding(std::span<const TokenId> tokens, const Mat<float>& table) {
    Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(table.cols());
    for (TokenId t : tokens) v += table.row(t).cast<double>();
    return v / static_cast<double>(tokens.size());
}

void check_shapes(const ActionSeqs& preds, const ActionSeqs& gts) {
    if (preds.size() != gts.size()) throw DataError("prediction / ground-truth count mismatch");
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].size() != gts[i].size()) throw DataError("prediction / ground-truth horizon mismatch");
        if (gts[i].empty()) throw DataError("horizon must be >= 1");
    }
}

}  // namespace

ActionMapper::ActionMapper(const ActionVocab& vocab, EmbeddingTable table) : vocab_(vocab), table_(table) {
    if (vocab.actions.empty()) throw DataError("action vocabulary is empty");
    if (table_.rows() != vocab.size()) throw DataError("embedding table does not match the vocabulary");
    labels_.resize(static_cast<Eigen::Index>(vocab.actions.size()), table_.cols());
    for (std::size_t a = 0; a < vocab.actions.size(); ++a) {
        const auto toks = vocab.action_tokens(static_cast<ActionId>(a));
        Eigen::RowVectorXd v = mean_embedding(toks, table_);
        const double n = v.norm();
        labels_.row(static_cast<Eigen::Index>(a)) = n > 0 ? Eigen::RowVectorXd(v / n) : v;
    }
}

ActionId ActionMapper::map(std::span<const TokenId> chunk) const {
    if (chunk.empty()) return kInvalidAction;
    if (auto exact = vocab_.action_by_text(detokenize(chunk, vocab_))) return *exact;
    for (TokenId t : chunk) {
        if (t < 0 || t >= vocab_.size()) return kInvalidAction;
    }
    const Eigen::RowVectorXd v = mean_embedding(chunk, table_);
    const double n = v.norm();
    if (!(n > 0.0)) return kInvalidAction;
    const Eigen::VectorXd sims = labels_ * (v.transpose() / n);
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < sims.size(); ++a) {
        if (sims[a] > sims[best]) best = a;
    }
    return static_cast<ActionId>(best);
}

ActionId ActionMapper::map(std::string_view text) const {
    return map(tokenize(text, vocab_, UnknownWordPolicy::substitute));
}

ActionId map_output_to_action(std::string_view text, const ActionVocab& vocab, EmbeddingTable table) {
    return ActionMapper(vocab, table).map(text);
}

PlanPrediction parse_prediction(std::vector<TokenId> raw, int horizon, const ActionMapper& mapper) {
    PlanPrediction p;
    p.horizon = horizon;
    p.raw_tokens = std::move(raw);
    for (const auto& chunk : split_numbered(p.raw_tokens, mapper.vocab())) {
        if (static_cast<int>(p.parsed_actions.size()) == horizon) break;
        p.parsed_actions.push_back(mapper.map(chunk));
    }
    p.parsed_actions.resize(static_cast<std::size_t>(horizon), kInvalidAction);
    return p;
}

double success_rate(const ActionSeqs& preds, const ActionSeqs& gts) {
    check_shapes(preds, gts);
    if (preds.empty()) return 0.0;
    double hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == gts[i] ? 1.0 : 0.0;
    return hits / static_cast<double>(preds.size());
}

double mean_accuracy(const ActionSeqs& preds, const ActionSeqs& gts) {
    check_shapes(preds, gts);
    if (preds.empty()) return 0.0;
    double total = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        int hit = 0;
        for (std::size_t k = 0; k < gts[i].size(); ++k) hit += preds[i][k] == gts[i][k];
        total += static_cast<double>(hit) / static_cast<double>(gts[i].size());
    }
    return total / static_cast<double>(preds.size());
}

double mean_iou(const ActionSeqs& preds, const ActionSeqs& gts) {
    check_shapes(preds, gts);
    if (preds.empty()) return 0.0;
    double total = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const std::set<ActionId> p(preds[i].begin(), preds[i].end()), g(gts[i].begin(), gts[i].end());
        std::size_t inter = 0;
        for (ActionId a : p) inter += g.count(a);
        total += static_cast<double>(inter) / static_cast<double>(p.size() + g.size() - inter);
    }
    return total / static_cast<double>(preds.size());
}

MetricsReport compute_metrics(const ActionSeqs& preds, const ActionSeqs& gts) {
    MetricsReport r;
    r.sr = success_rate(preds, gts);
    r.macc = mean_accuracy(preds, gts);
    r.miou = mean_iou(preds, gts);
    r.n_samples = static_cast<int>(preds.size());
    r.horizon = gts.empty() ? 0 : static_cast<int>(gts[0].size());
    return r;
}

int edit_distance(std::span<const int> a, std::span<const int> b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1));
    for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            const int cost = a[i - 1] == b[j - 1] ? 0 : 1;
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost});
            if (i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1]) {
                d[i][j] = std::min(d[i][j], d[i - 2][j - 2] + 1);
            }
        }
    }
    return d[n][m];
}

double normalized_edit_distance(std::span<const int> pred, std::span<const int> gt, int horizon) {
    if (horizon < 1) throw DataError("horizon must be >= 1");
    return static_cast<double>(edit_distance(pred, gt)) / horizon;
}

EDReport edit_distance_from_candidates(const std::vector<ActionSeqs>& samples, const ActionSeqs& gts,
                                       const ActionVocab& vocab, int horizon) {
    if (samples.size() != gts.size()) throw DataError("candidate / ground-truth count mismatch");
    EDReport r;
    r.horizon = horizon;
    r.n_samples = static_cast<int>(gts.size());
    r.n_sequences = samples.empty() ? 0 : static_cast<int>(samples[0].size());
    auto stream_of = [&](const std::vector<ActionId>& seq, int which) {
        std::vector<int> out;
        for (ActionId a : seq) {
            if (a < 0 || a >= static_cast<ActionId>(vocab.actions.size())) {
                out.push_back(-1);
            } else {
                const auto& l = vocab.actions[static_cast<std::size_t>(a)];
                out.push_back(which == 0 ? l.verb : which == 1 ? l.noun : a);
            }
        }
        return out;
    };
    for (std::size_t i = 0; i < gts.size(); ++i) {
        if (static_cast<int>(gts[i].size()) < horizon) throw DataError("fewer future actions than the horizon");
        if (samples[i].empty()) throw DataError("no candidate sequences");
        const std::vector<ActionId> gt(gts[i].begin(), gts[i].begin() + horizon);
        double best[3] = {INFINITY, INFINITY, INFINITY};
        for (const auto& cand : samples[i]) {
            for (int s = 0; s < 3; ++s) {
                best[s] = std::min(best[s], normalized_edit_distance(stream_of(cand, s), stream_of(gt, s), horizon));
            }
        }
        r.ed_verb += best[0];
        r.ed_noun += best[1];
        r.ed_action += best[2];
    }
    if (!gts.empty()) {
        r.ed_verb /= static_cast<double>(gts.size());
        r.ed_noun /= static_cast<double>(gts.size());
        r.ed_action /= static_cast<double>(gts.size());
    }
    return r;
}

PlanDecoder model_plan_decoder(const Model& model, const SpecialTokens& special, int batch) {
    return [&model, special, batch](const std::vector<InstructionSample>& prompts) {
        std::vector<std::vector<TokenId>> out;
        for (std::size_t begin = 0; begin < prompts.size(); begin += static_cast<std::size_t>(batch)) {
            std::vector<ModelInput> inputs;
            int max_tokens = 0;
            for (std::size_t k = begin; k < std::min(prompts.size(), begin + static_cast<std::size_t>(batch)); ++k) {
                inputs.push_back(encode_prompt(prompts[k], model.config, special));
                // Three tokens per action plus <eos>, with a little slack.
                max_tokens = std::max(max_tokens, 3 * prompts[k].horizon + 3);
            }
            for (auto& r : decode_greedy(model, inputs, max_tokens, special.eos)) out.push_back(std::move(r.tokens));
        }
        return out;
    };
}

SampleDecoder model_sample_decoder(const Model& model, const SpecialTokens& special, double temperature,
                                   std::uint64_t seed) {
    auto counter = std::make_shared<std::uint64_t>(0);
    return [&model, special, temperature, seed, counter](const InstructionSample& prompt, int n) {
        const auto input = encode_prompt(prompt, model.config, special);
        const std::uint64_t sub = substream(seed, stream::sampling, (*counter)++)();
        std::vector<std::vector<TokenId>> out;
        for (auto& r : decode_sample(model, input, temperature, sub, n, 3 * prompt.horizon + 3, special.eos)) {
            out.push_back(std::move(r.tokens));
        }
        return out;
    };
}

PlanDecoder teacher_forcing_decoder() {
    return [](const std::vector<InstructionSample>& prompts) {
        std::vector<std::vector<TokenId>> out;
        for (const auto& p : prompts) out.push_back(p.response_tokens);
        return out;
    };
}

EvalReport run_eval(const PlanDecoder& decode, const ActionMapper& mapper, const std::vector<InstructionSample>& samples,
                    const ActionVocab& vocab) {
    EvalReport rep;
    if (samples.empty()) throw DataError("empty evaluation set");
    std::vector<std::vector<TokenId>> raw;
    try {
        raw = decode(samples);
    } catch (const NumericError&) {
        // A numerically broken model scores as all-invalid plans.
        raw.assign(samples.size(), {});
    }
    if (raw.size() != samples.size()) throw DataError("decoder returned the wrong number of responses");
    ActionSeqs preds, gts;
    std::map<int, std::pair<ActionSeqs, ActionSeqs>> by_schema;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        auto pred = parse_prediction(std::move(raw[i]), s.horizon, mapper);
        SampleTrace tr{s.schema_id, pred.parsed_actions, s.target_actions, detokenize(pred.raw_tokens, vocab)};
        preds.push_back(pred.parsed_actions);
        gts.push_back(s.target_actions);
        by_schema[s.schema_id].first.push_back(pred.parsed_actions);
        by_schema[s.schema_id].second.push_back(s.target_actions);
        rep.traces.push_back(std::move(tr));
    }
    rep.overall = compute_metrics(preds, gts);
    for (const auto& [schema, pg] : by_schema) rep.per_schema[schema] = compute_metrics(pg.first, pg.second);
    return rep;
}

EDReport edit_distance_report(const SampleDecoder& decode, const ActionMapper& mapper,
                              const std::vector<InstructionSample>& samples, const ActionVocab& vocab, int n_samples) {
    if (samples.empty()) throw DataError("empty evaluation set");
    const int horizon = samples[0].horizon;
    std::vector<ActionSeqs> cands;
    ActionSeqs gts;
    for (const auto& s : samples) {
        if (s.horizon != horizon) throw DataError("edit-distance samples must share one horizon");
        ActionSeqs c;
        for (auto& raw : decode(s, n_samples)) c.push_back(parse_prediction(std::move(raw), horizon, mapper).parsed_actions);
        cands.push_back(std::move(c));
        gts.push_back(s.target_actions);
    }
    return edit_distance_from_candidates(cands, gts, vocab, horizon);
}

json to_json(const MetricsReport& r) {
    return {{"sr", r.sr}, {"macc", r.macc}, {"miou", r.miou}, {"n_samples", r.n_samples}, {"horizon", r.horizon}};
}

json to_json(const EDReport& r) {
    return {{"ed_verb", r.ed_verb},         {"ed_noun", r.ed_noun},   {"ed_action", r.ed_action},
            {"n_sequences", r.n_sequences}, {"horizon", r.horizon},   {"n_samples", r.n_samples}};
}

json to_json(const EvalReport& r, bool with_traces) {
    json j = to_json(r.overall);
    json per = json::object();
    for (const auto& [schema, m] : r.per_schema) per[std::to_string(schema)] = to_json(m);
    j["per_schema"] = std::move(per);
    if (with_traces) {
        json tr = json::array();
        for (const auto& t : r.traces) {
            tr.push_back({{"schema_id", t.schema_id}, {"predicted", t.predicted}, {"target", t.target}, {"raw", t.raw_text}});
        }
        j["traces"] = std::move(tr);
    }
    return j;
}

std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& r : rows) {
        for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
    }
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < width.size(); ++c) {
            const std::string cell = c < cells.size() ? cells[c] : "";
            if (c) out << "  ";
            if (c == 0) {
                out << std::left << std::setw(static_cast<int>(width[c])) << cell;
            } else {
                out << std::right << std::setw(static_cast<int>(width[c])) << cell;
            }
        }
        out << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto w : width) total += w;
    out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
    return out.str();
}

}  // namespace vplan

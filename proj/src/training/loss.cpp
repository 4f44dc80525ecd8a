#include "vplan/training.hpp"

#include <cmath>

namespace vplan {

std::string_view to_string(MaskMode m) { return m == MaskMode::FULL ? "FULL" : "PARTIAL"; }
std::string_view to_string(LossNorm n) { return n == LossNorm::per_head_mean ? "per_head_mean" : "sum"; }
std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::ALIGN: return "ALIGN";
        case Stage::AUX_PRETRAIN: return "AUX_PRETRAIN";
        case Stage::PRIMARY_FINETUNE: return "PRIMARY_FINETUNE";
    }
    return "?";
}

MaskMode mask_mode_from_string(std::string_view s) {
    if (s == "FULL") return MaskMode::FULL;
    if (s == "PARTIAL") return MaskMode::PARTIAL;
    throw DataError("unknown mask mode: " + std::string(s));
}

LossNorm loss_norm_from_string(std::string_view s) {
    if (s == "per_head_mean") return LossNorm::per_head_mean;
    if (s == "sum") return LossNorm::sum;
    throw DataError("unknown loss normalization: " + std::string(s));
}

Stage stage_from_string(std::string_view s) {
    for (auto st : {Stage::ALIGN, Stage::AUX_PRETRAIN, Stage::PRIMARY_FINETUNE}) {
        if (to_string(st) == s) return st;
    }
    throw DataError("unknown stage: " + std::string(s));
}

int BoundaryMask::count(int head) const {
    int c = 0;
    for (auto a : active[static_cast<std::size_t>(head)]) c += a;
    return c;
}

BoundaryMask build_boundary_mask(int n, std::span<const TokenSpan> spans, int K, MaskMode mode) {
    if (K < 0) throw DataError("K must be >= 0");
    // span_of[q]: index of the span holding response position q, or -1.
    std::vector<int> span_of(static_cast<std::size_t>(std::max(n, 0)), -1);
    int prev_end = 0;
    for (std::size_t k = 0; k < spans.size(); ++k) {
        const auto& sp = spans[k];
        if (sp.begin < prev_end || sp.end <= sp.begin || sp.end > n) {
            throw DataError("boundary spans must be ordered, non-empty, disjoint and inside the response");
        }
        for (int q = sp.begin; q < sp.end; ++q) span_of[static_cast<std::size_t>(q)] = static_cast<int>(k);
        prev_end = sp.end;
    }
    BoundaryMask m;
    m.mode = mode;
    m.K = K;
    m.n = n;
    m.active.assign(static_cast<std::size_t>(K + 1), std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0));
    for (int q = 0; q < n; ++q) m.active[0][static_cast<std::size_t>(q)] = 1;
    for (int i = 1; i <= K; ++i) {
        for (int q = 0; q + i < n; ++q) {
            const int a = span_of[static_cast<std::size_t>(q)];
            const bool on = mode == MaskMode::FULL || (a >= 0 && a == span_of[static_cast<std::size_t>(q + i)]);
            m.active[static_cast<std::size_t>(i)][static_cast<std::size_t>(q)] = on ? 1 : 0;
        }
    }
    return m;
}

BoundaryMask build_boundary_mask(const InstructionSample& s, int K, MaskMode mode) {
    return build_boundary_mask(static_cast<int>(s.response_tokens.size()), s.boundary_spans, K, mode);
}

HeadTargets batch_targets(const std::vector<const EncodedSample*>& batch, int K, MaskMode mode) {
    HeadTargets t(static_cast<std::size_t>(K + 1));
    for (const EncodedSample* e : batch) {
        const int n = static_cast<int>(e->response.size());
        const auto mask = build_boundary_mask(n, e->spans, K, mode);
        for (int i = 0; i <= K; ++i) {
            for (int q = 0; q < n; ++q) {
                t[static_cast<std::size_t>(i)].push_back(mask.at(i, q) ? e->response[static_cast<std::size_t>(q + i)] : -1);
            }
        }
    }
    return t;
}

namespace {

// Cross-entropy summed over active rows; writes softmax - onehot (times
// `scale`) into d when given.
template <class T>
double head_ce(const Mat<T>& logits, std::span<const TokenId> targets, double scale, Mat<T>* d, int& count) {
    if (static_cast<std::size_t>(logits.rows()) != targets.size()) throw DataError("logit rows / targets mismatch");
    const Eigen::Index V = logits.cols();
    double sum = 0.0;
    count = 0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] >= 0) ++count;
    }
    if (d) d->setZero(logits.rows(), V);
    std::vector<double> p(static_cast<std::size_t>(V));
    for (std::size_t r = 0; r < targets.size(); ++r) {
        const TokenId t = targets[r];
        if (t < 0) continue;
        if (t >= V) throw DataError("target token out of range");
        const auto row = logits.row(static_cast<Eigen::Index>(r));
        double mx = -INFINITY;
        for (Eigen::Index k = 0; k < V; ++k) mx = std::max(mx, static_cast<double>(row[k]));
        double z = 0.0;
        for (Eigen::Index k = 0; k < V; ++k) {
            p[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(row[k]) - mx);
            z += p[static_cast<std::size_t>(k)];
        }
        sum += mx + std::log(z) - static_cast<double>(row[t]);
        if (d) {
            const double s = (count > 0 ? scale : 0.0) / z;
            auto drow = d->row(static_cast<Eigen::Index>(r));
            for (Eigen::Index k = 0; k < V; ++k) drow[k] = static_cast<T>(p[static_cast<std::size_t>(k)] * s);
            drow[t] -= static_cast<T>(scale);
        }
    }
    return sum;
}

}  // namespace

template <class T>
LossBreakdown loss_ntp(const Mat<T>& logits, std::span<const TokenId> targets, Mat<T>* dlogits) {
    int count = 0;
    for (TokenId t : targets) count += t >= 0;
    if (count == 0) throw DataError("no supervised tokens");
    LossBreakdown out;
    const double sum = head_ce(logits, targets, 1.0 / count, dlogits, count);
    out.total = sum / count;
    out.per_head = {out.total};
    out.counts = {count};
    if (!std::isfinite(out.total)) throw NumericError("non-finite next-token loss");
    return out;
}

template <class T>
LossBreakdown loss_mtp(const std::vector<Mat<T>>& logits, const HeadTargets& targets, LossNorm norm,
                       std::vector<Mat<T>>* dlogits) {
    if (logits.size() != targets.size()) {
        throw DataError("loss_mtp: " + std::to_string(logits.size()) + " heads of logits but " +
                        std::to_string(targets.size()) + " target rows");
    }
    LossBreakdown out;
    if (dlogits) dlogits->assign(logits.size(), Mat<T>());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        int count = 0;
        for (TokenId t : targets[i]) count += t >= 0;
        const double scale = norm == LossNorm::per_head_mean ? (count ? 1.0 / count : 0.0) : 1.0;
        const double sum = head_ce(logits[i], targets[i], scale, dlogits ? &(*dlogits)[i] : nullptr, count);
        const double value = norm == LossNorm::per_head_mean ? (count ? sum / count : 0.0) : sum;
        out.per_head.push_back(value);
        out.counts.push_back(count);
        out.total += value;
    }
    if (!std::isfinite(out.total)) throw NumericError("non-finite multi-token loss");
    return out;
}

template <class T>
LossBreakdown loss_and_grad(const ModelT<T>& model, const std::vector<const EncodedSample*>& batch, MaskMode mode,
                            LossNorm norm, ParamStore<T>* grads, std::uint64_t dropout_seed) {
    std::vector<const ModelInput*> inputs;
    std::vector<std::vector<int>> positions;
    for (const EncodedSample* e : batch) {
        inputs.push_back(&e->input);
        std::vector<int> p(e->response.size());
        for (std::size_t q = 0; q < p.size(); ++q) p[q] = e->first_target + static_cast<int>(q);
        positions.push_back(std::move(p));
    }
    Transformer<T> net(model);
    const auto out = net.forward(inputs, positions, RunMode::train, dropout_seed);
    const auto targets = batch_targets(batch, model.config.K, mode);
    std::vector<Mat<T>> dlogits;
    auto loss = loss_mtp(out.logits, targets, norm, grads ? &dlogits : nullptr);
    if (grads) net.backward(dlogits, *grads);
    return loss;
}

template LossBreakdown loss_ntp<float>(const Mat<float>&, std::span<const TokenId>, Mat<float>*);
template LossBreakdown loss_ntp<double>(const Mat<double>&, std::span<const TokenId>, Mat<double>*);
template LossBreakdown loss_mtp<float>(const std::vector<Mat<float>>&, const HeadTargets&, LossNorm,
                                       std::vector<Mat<float>>*);
template LossBreakdown loss_mtp<double>(const std::vector<Mat<double>>&, const HeadTargets&, LossNorm,
                                        std::vector<Mat<double>>*);
template LossBreakdown loss_and_grad<float>(const ModelT<float>&, const std::vector<const EncodedSample*>&, MaskMode,
                                            LossNorm, ParamStore<float>*, std::uint64_t);
template LossBreakdown loss_and_grad<double>(const ModelT<double>&, const std::vector<const EncodedSample*>&, MaskMode,
                                             LossNorm, ParamStore<double>*, std::uint64_t);

}  // namespace vplan

#include "vplan/training.hpp"

#include <cmath>

namespace vplan {

template <class T>
void optimizer_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
    for (const auto& [name, g] : grads.tensors) {
        for (T x : g.data) {
            if (!std::isfinite(static_cast<double>(x))) throw NumericError("non-finite gradient in tensor " + name);
        }
    }
    const long t = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));

    // Compute every update first so a bad one leaves params untouched.
    std::map<std::string, std::vector<double>> new_m, new_v, updated;
    for (const auto& [name, g] : grads.tensors) {
        const auto it = params.tensors.find(name);
        if (it == params.tensors.end() || !it->second.trainable) continue;
        const Tensor<T>& p = it->second;
        if (p.numel() != g.numel()) throw DataError("gradient shape mismatch for tensor " + name);
        auto m = state.m.count(name) ? state.m.at(name) : std::vector<double>(p.numel(), 0.0);
        auto v = state.v.count(name) ? state.v.at(name) : std::vector<double>(p.numel(), 0.0);
        std::vector<double> out(p.numel());
        for (std::size_t k = 0; k < p.numel(); ++k) {
            const double gk = static_cast<double>(g.data[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            out[k] = static_cast<double>(p.data[k]) - cfg.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
            if (!std::isfinite(out[k])) throw NumericError("non-finite update in tensor " + name);
        }
        new_m[name] = std::move(m);
        new_v[name] = std::move(v);
        updated[name] = std::move(out);
    }
    for (auto& [name, vals] : updated) {
        auto& p = params.tensors.at(name);
        for (std::size_t k = 0; k < vals.size(); ++k) p.data[k] = static_cast<T>(vals[k]);
        state.m[name] = std::move(new_m[name]);
        state.v[name] = std::move(new_v[name]);
    }
    state.step = t;
}

template <class T>
double clip_global_norm(ParamStore<T>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads.tensors) {
        for (T x : g.data) sq += static_cast<double>(x) * static_cast<double>(x);
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [name, g] : grads.tensors) {
            for (T& x : g.data) x *= s;
        }
    }
    return norm;
}

GradCheckResult grad_check(const ModelT<double>& model, const std::vector<const EncodedSample*>& batch, MaskMode mode,
                           LossNorm norm, double epsilon, int n_probes, std::uint64_t seed, double floor) {
    if (model.config.dropout > 0.0) throw UsageError("grad_check needs dropout == 0");
    ModelT<double> work = model;
    auto grads = work.params.zero_grads();
    loss_and_grad(work, batch, mode, norm, &grads);

    std::vector<std::pair<std::string, std::size_t>> sizes;
    std::size_t total = 0;
    for (const auto& [name, g] : grads.tensors) {
        sizes.emplace_back(name, g.numel());
        total += g.numel();
    }
    if (total == 0) throw UsageError("grad_check: no trainable parameters");

    GradCheckResult res;
    Rng rng = substream(seed, stream::init, 0x4743);
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    for (int probe = 0; probe < n_probes; ++probe) {
        std::size_t flat = pick(rng);
        std::size_t t = 0;
        while (flat >= sizes[t].second) flat -= sizes[t++].second;
        const std::string& name = sizes[t].first;
        double& x = work.params.at(name).data[flat];
        const double saved = x;
        x = saved + epsilon;
        const double up = loss_and_grad<double>(work, batch, mode, norm, nullptr).total;
        x = saved - epsilon;
        const double down = loss_and_grad<double>(work, batch, mode, norm, nullptr).total;
        x = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double analytic = grads.at(name).data[flat];
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
        if (probe == 0 || rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_tensor = name;
        }
        ++res.probes;
    }
    return res;
}

template void optimizer_step<float>(ParamStore<float>&, const ParamStore<float>&, AdamState<float>&, const AdamConfig&);
template void optimizer_step<double>(ParamStore<double>&, const ParamStore<double>&, AdamState<double>&,
                                     const AdamConfig&);
template double clip_global_norm<float>(ParamStore<float>&, double);
template double clip_global_norm<double>(ParamStore<double>&, double);

}  // namespace vplan

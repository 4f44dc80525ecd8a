#include "vplan/model.hpp"

#include <cmath>

namespace vplan {

using nlohmann::json;

std::string_view to_string(HeadMode m) {
    switch (m) {
        case HeadMode::NTP: return "NTP";
        case HeadMode::MTP_LINEAR: return "MTP_LINEAR";
        case HeadMode::MTP_UNEMBED_LORA: return "MTP_UNEMBED_LORA";
    }
    return "?";
}

HeadMode head_mode_from_string(std::string_view s) {
    for (auto m : {HeadMode::NTP, HeadMode::MTP_LINEAR, HeadMode::MTP_UNEMBED_LORA}) {
        if (to_string(m) == s) return m;
    }
    throw DataError("unknown head mode: " + std::string(s));
}

void ModelConfig::validate() const {
    if (vocab_size < 1) throw DataError("vocab_size must be >= 1");
    if (d_model < 1 || n_layers < 0 || n_heads < 1) throw DataError("invalid model dimensions");
    if (d_model % n_heads != 0) throw DataError("d_model must be divisible by n_heads");
    if (context_length < 2) throw DataError("context_length must be >= 2");
    if (d_v < 1) throw DataError("d_v must be >= 1");
    if (K < 0) throw DataError("K must be >= 0");
    if (head_mode == HeadMode::NTP && K != 0) throw DataError("head_mode NTP requires K == 0");
    if (lora_rank < 0) throw DataError("lora_rank must be >= 0");
    if (!std::isfinite(lora_alpha)) throw DataError("lora_alpha must be finite");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw DataError("dropout must lie in [0,1)");
    if (max_obs_frames < 0) throw DataError("max_obs_frames must be >= 0");
}

json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"context_length", c.context_length},
            {"d_v", c.d_v},
            {"K", c.K},
            {"head_mode", std::string(to_string(c.head_mode))},
            {"lora_rank", c.lora_rank},
            {"lora_alpha", c.lora_alpha},
            {"dropout", c.dropout},
            {"head0_adapter", c.head0_adapter},
            {"max_obs_frames", c.max_obs_frames}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.d_model = j.value("d_model", c.d_model);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.context_length = j.value("context_length", c.context_length);
        c.d_v = j.value("d_v", c.d_v);
        c.K = j.value("K", c.K);
        if (j.contains("head_mode")) c.head_mode = head_mode_from_string(j.at("head_mode").get<std::string>());
        c.lora_rank = j.value("lora_rank", c.lora_rank);
        c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
        c.dropout = j.value("dropout", c.dropout);
        c.head0_adapter = j.value("head0_adapter", c.head0_adapter);
        c.max_obs_frames = j.value("max_obs_frames", c.max_obs_frames);
    } catch (const json::exception& e) {
        throw DataError(std::string("model config: ") + e.what());
    }
    return c;
}

template <class T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing tensor " + name);
    return it->second;
}

template <class T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing tensor " + name);
    return it->second;
}

template <class T>
const Tensor<T>* ParamStore<T>::find(const std::string& name) const {
    auto it = tensors.find(name);
    return it == tensors.end() ? nullptr : &it->second;
}

template <class T>
void ParamStore<T>::add(const std::string& name, std::vector<int> shape, bool trainable) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    tensors[name] = Tensor<T>{std::move(shape), std::vector<T>(n, T(0)), trainable};
}

template <class T>
std::size_t ParamStore<T>::count(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) {
        if (!trainable_only || t.trainable) n += t.numel();
    }
    return n;
}

template <class T>
ParamStore<T> ParamStore<T>::zero_grads() const {
    ParamStore<T> g;
    for (const auto& [name, t] : tensors) {
        if (t.trainable) g.tensors[name] = Tensor<T>{t.shape, std::vector<T>(t.numel(), T(0)), true};
    }
    return g;
}

template class ParamStore<float>;
template class ParamStore<double>;

std::map<std::string, std::vector<int>> expected_shapes(const ModelConfig& c) {
    const int d = c.d_model, V = c.vocab_size;
    std::map<std::string, std::vector<int>> s;
    s["tok_emb"] = {V, d};
    s["pos_emb"] = {c.context_length, d};
    s["adapter.w"] = {c.d_v, d};
    s["adapter.b"] = {d};
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        s[p + "ln1.g"] = {d};
        s[p + "ln1.b"] = {d};
        s[p + "attn.wqkv"] = {d, 3 * d};
        s[p + "attn.bqkv"] = {3 * d};
        s[p + "attn.wo"] = {d, d};
        s[p + "attn.bo"] = {d};
        s[p + "ln2.g"] = {d};
        s[p + "ln2.b"] = {d};
        s[p + "mlp.w1"] = {d, 4 * d};
        s[p + "mlp.b1"] = {4 * d};
        s[p + "mlp.w2"] = {4 * d, d};
        s[p + "mlp.b2"] = {d};
    }
    s["ln_f.g"] = {d};
    s["ln_f.b"] = {d};
    s["unembed"] = {V, d};
    const int r = c.lora_rank;
    for (int i = 1; i <= c.K; ++i) {
        const std::string p = "head." + std::to_string(i) + ".";
        if (c.head_mode == HeadMode::MTP_LINEAR) {
            s[p + "w"] = {d, d};
        } else if (c.head_mode == HeadMode::MTP_UNEMBED_LORA) {
            s[p + "base"] = {V, d};
            s[p + "lora_a"] = {r, d};
            s[p + "lora_b"] = {V, r};
        }
    }
    if (c.head_mode == HeadMode::MTP_UNEMBED_LORA && c.head0_adapter) {
        s["head.0.lora_a"] = {r, d};
        s["head.0.lora_b"] = {V, r};
    }
    return s;
}

namespace {

bool is_head_tensor(const std::string& name) { return name.rfind("head.", 0) == 0; }

template <class T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.data) x = static_cast<T>(dist(rng));
}

}  // namespace

template <class T>
ModelT<T> init_model(ModelConfig config, std::uint64_t seed) {
    config.K = 0;
    config.head_mode = HeadMode::NTP;
    config.validate();
    ModelT<T> m;
    m.config = config;
    for (const auto& [name, shape] : expected_shapes(config)) m.params.add(name, shape, true);

    Rng rng = substream(seed, stream::init);
    constexpr double kStd = 0.02;
    const double resid_std = kStd / std::sqrt(2.0 * std::max(config.n_layers, 1));
    // Map iteration order is fixed, so the draw order is too.
    for (auto& [name, t] : m.params.tensors) {
        const bool gain = name.ends_with(".g");
        const bool bias = name.ends_with(".b") || name.ends_with(".bqkv") || name.ends_with(".bo") ||
                          name.ends_with(".b1") || name.ends_with(".b2");
        if (gain) {
            std::fill(t.data.begin(), t.data.end(), T(1));
        } else if (bias) {
            continue;
        } else if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) {
            fill_normal(t, resid_std, rng);
        } else {
            fill_normal(t, kStd, rng);
        }
    }
    return m;
}

template <class T>
void detach_heads(ModelT<T>& model) {
    std::erase_if(model.params.tensors, [](const auto& kv) { return is_head_tensor(kv.first); });
    model.config.K = 0;
    model.config.head_mode = HeadMode::NTP;
}

template <class T>
void attach_heads(ModelT<T>& model, HeadMode mode, int K, std::uint64_t seed) {
    detach_heads(model);
    if (mode == HeadMode::NTP) {
        if (K != 0) throw DataError("head_mode NTP requires K == 0");
        return;
    }
    ModelConfig c = model.config;
    c.head_mode = mode;
    c.K = K;
    c.validate();
    model.config = c;

    Rng rng = substream(seed, stream::heads);
    const auto shapes = expected_shapes(c);
    const auto& U = model.params.at("unembed");
    for (const auto& [name, shape] : shapes) {
        if (!is_head_tensor(name)) continue;
        model.params.add(name, shape, true);
        auto& t = model.params.at(name);
        if (name.ends_with(".w")) {
            // Identity start: every extra head initially reproduces head 0.
            for (int i = 0; i < c.d_model; ++i) t.data[static_cast<std::size_t>(i * c.d_model + i)] = T(1);
        } else if (name.ends_with(".base")) {
            t.data = U.data;
            t.trainable = false;
        } else if (name.ends_with(".lora_a")) {
            fill_normal(t, 1.0 / std::sqrt(static_cast<double>(c.d_model)), rng);
        }
        // lora_b stays zero so the adapted heads start equal to the base.
    }
}

std::int64_t head_param_count(const ModelConfig& c) {
    const std::int64_t d = c.d_model, V = c.vocab_size, r = c.lora_rank, K = c.K;
    switch (c.head_mode) {
        case HeadMode::NTP: return 0;
        case HeadMode::MTP_LINEAR: return K * d * d;
        case HeadMode::MTP_UNEMBED_LORA: return (K + (c.head0_adapter ? 1 : 0)) * r * (d + V);
    }
    return 0;
}

template ModelT<float> init_model<float>(ModelConfig, std::uint64_t);
template ModelT<double> init_model<double>(ModelConfig, std::uint64_t);
template void attach_heads<float>(ModelT<float>&, HeadMode, int, std::uint64_t);
template void attach_heads<double>(ModelT<double>&, HeadMode, int, std::uint64_t);
template void detach_heads<float>(ModelT<float>&);
template void detach_heads<double>(ModelT<double>&);

}  // namespace vplan

#include "vplan/model.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace vplan;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.context_length = 16;
    c.d_v = 4;
    return c;
}

template <class T>
void randomize(ModelT<T>& m, std::uint64_t seed, double scale = 0.5) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    for (auto& [name, t] : m.params.tensors) {
        if (name.ends_with(".base")) continue;
        for (auto& x : t.data) x = static_cast<T>(g(rng));
    }
    // Keep frozen bases equal to the unembedding they were copied from.
    for (auto& [name, t] : m.params.tensors) {
        if (name.ends_with(".base")) t.data = m.params.at("unembed").data;
    }
}

ModelInput random_input(int n, int vocab, int d_v, std::uint64_t seed, int n_features = 2) {
    Rng rng(seed);
    std::uniform_int_distribution<int> tok(0, vocab - 1);
    std::normal_distribution<double> g(0.0, 1.0);
    ModelInput in;
    for (int p = 0; p < n; ++p) {
        if (p < n_features) {
            FeatureVec f(static_cast<std::size_t>(d_v));
            for (auto& x : f) x = static_cast<float>(g(rng));
            in.push_feature(5 % vocab, f);
        } else {
            in.push_token(tok(rng));
        }
    }
    return in;
}

std::vector<int> all_positions(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    return p;
}

// Straight-line reference forward for head 0 (and MTP_LINEAR heads).
std::vector<std::vector<std::vector<double>>> reference_forward(const ModelT<double>& m, const ModelInput& in) {
    const auto& c = m.config;
    const int n = in.size(), d = c.d_model, H = c.n_heads, dh = d / H;
    auto P = [&](const std::string& name) -> const std::vector<double>& { return m.params.at(name).data; };
    using Rows = std::vector<std::vector<double>>;
    auto layernorm = [&](const Rows& x, const std::string& g, const std::string& b) {
        Rows y = x;
        for (int i = 0; i < n; ++i) {
            double mean = 0, var = 0;
            for (int k = 0; k < d; ++k) mean += x[i][k];
            mean /= d;
            for (int k = 0; k < d; ++k) var += (x[i][k] - mean) * (x[i][k] - mean);
            var /= d;
            for (int k = 0; k < d; ++k) y[i][k] = (x[i][k] - mean) / std::sqrt(var + 1e-5) * P(g)[k] + P(b)[k];
        }
        return y;
    };
    auto linear = [&](const Rows& x, const std::string& w, const std::string& b, int in_dim, int out_dim) {
        Rows y(x.size(), std::vector<double>(static_cast<std::size_t>(out_dim), 0.0));
        for (std::size_t i = 0; i < x.size(); ++i) {
            for (int o = 0; o < out_dim; ++o) {
                double s = b.empty() ? 0.0 : P(b)[o];
                for (int k = 0; k < in_dim; ++k) s += x[i][k] * P(w)[k * out_dim + o];
                y[i][o] = s;
            }
        }
        return y;
    };

    Rows x(n, std::vector<double>(d, 0.0));
    for (int p = 0; p < n; ++p) {
        const int slot = in.feature_slot[p];
        for (int k = 0; k < d; ++k) {
            double v;
            if (slot >= 0) {
                v = P("adapter.b")[k];
                for (int j = 0; j < c.d_v; ++j) v += in.features[slot][j] * P("adapter.w")[j * d + k];
            } else {
                v = P("tok_emb")[in.tokens[p] * d + k];
            }
            x[p][k] = v + P("pos_emb")[p * d + k];
        }
    }
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string pre = "layer." + std::to_string(l) + ".";
        const Rows a = layernorm(x, pre + "ln1.g", pre + "ln1.b");
        const Rows qkv = linear(a, pre + "attn.wqkv", pre + "attn.bqkv", d, 3 * d);
        Rows att(n, std::vector<double>(d, 0.0));
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < n; ++i) {
                std::vector<double> s(i + 1);
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    double dot = 0;
                    for (int k = 0; k < dh; ++k) dot += qkv[i][h * dh + k] * qkv[j][d + h * dh + k];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (int j = 0; j <= i; ++j) z += (s[j] = std::exp(s[j] - mx));
                for (int j = 0; j <= i; ++j) {
                    for (int k = 0; k < dh; ++k) att[i][h * dh + k] += s[j] / z * qkv[j][2 * d + h * dh + k];
                }
            }
        }
        const Rows proj = linear(att, pre + "attn.wo", pre + "attn.bo", d, d);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < d; ++k) x[i][k] += proj[i][k];
        const Rows mm = layernorm(x, pre + "ln2.g", pre + "ln2.b");
        Rows u = linear(mm, pre + "mlp.w1", pre + "mlp.b1", d, 4 * d);
        for (auto& row : u)
            for (auto& v : row) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
        const Rows out = linear(u, pre + "mlp.w2", pre + "mlp.b2", 4 * d, d);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < d; ++k) x[i][k] += out[i][k];
    }
    const Rows hf = layernorm(x, "ln_f.g", "ln_f.b");
    auto unembed = [&](const Rows& h) {
        Rows lg(n, std::vector<double>(c.vocab_size, 0.0));
        for (int i = 0; i < n; ++i)
            for (int v = 0; v < c.vocab_size; ++v)
                for (int k = 0; k < d; ++k) lg[i][v] += h[i][k] * P("unembed")[v * d + k];
        return lg;
    };
    std::vector<Rows> heads = {unembed(hf)};
    for (int i = 1; i <= c.K; ++i) heads.push_back(unembed(linear(hf, "head." + std::to_string(i) + ".w", "", d, d)));
    return heads;
}

template <class T>
ForwardOutput<T> run_all(const ModelT<T>& m, const ModelInput& in, RunMode mode = RunMode::train) {
    Transformer<T> net(m);
    return net.forward({&in}, {all_positions(in.size())}, mode);
}

}  // namespace

TEST_CASE("adapter: identity, affine bias and matmul oracle") {
    ModelConfig c = tiny_config();
    c.d_v = c.d_model;
    auto m = init_model<double>(c, 1);
    auto& w = m.params.at("adapter.w");
    std::fill(w.data.begin(), w.data.end(), 0.0);
    for (int i = 0; i < c.d_model; ++i) w.data[static_cast<std::size_t>(i * c.d_model + i)] = 1.0;
    const std::vector<FeatureVec> frames = {{1, 2, 3, 4, 5, 6, 7, 8}, {-1, 0.5f, 0, 0, 2, 0, 0, 9}};
    const auto out = adapter_apply(frames, m.params, c);
    for (int i = 0; i < 2; ++i)
        for (int k = 0; k < c.d_model; ++k) CHECK(out(i, k) == frames[i][k]);

    auto& b = m.params.at("adapter.b");
    for (int k = 0; k < c.d_model; ++k) b.data[k] = 0.25 * k - 1.0;
    const auto zero = adapter_apply({FeatureVec(8, 0.0f), FeatureVec(8, 0.0f)}, m.params, c);
    for (int i = 0; i < 2; ++i)
        for (int k = 0; k < c.d_model; ++k) CHECK(zero(i, k) == b.data[k]);

    ModelConfig c2 = tiny_config();
    auto m2 = init_model<float>(c2, 2);
    randomize(m2, 3);
    Rng rng(4);
    std::normal_distribution<float> g(0, 1);
    std::vector<FeatureVec> fr(5, FeatureVec(4));
    for (auto& f : fr)
        for (auto& x : f) x = g(rng);
    const auto got = adapter_apply(fr, m2.params, c2);
    const auto& W = m2.params.at("adapter.w").data;
    const auto& B = m2.params.at("adapter.b").data;
    for (int i = 0; i < 5; ++i) {
        for (int k = 0; k < c2.d_model; ++k) {
            double s = B[k];
            for (int j = 0; j < c2.d_v; ++j) s += static_cast<double>(fr[i][j]) * W[j * c2.d_model + k];
            CHECK(std::abs(got(i, k) - s) < 1e-6);
        }
    }
    CHECK_THROWS_AS(adapter_apply({FeatureVec(3, 0.0f)}, m2.params, c2), DataError);
}

TEST_CASE("forward matches a straight-line reference") {
    ModelConfig c = tiny_config();
    auto m = init_model<double>(c, 5);
    attach_heads(m, HeadMode::MTP_LINEAR, 2, 6);
    randomize(m, 7);
    const auto in = random_input(9, c.vocab_size, c.d_v, 8);
    const auto ref = reference_forward(m, in);
    const auto out = run_all(m, in);
    REQUIRE(out.logits.size() == 3);
    double worst = 0;
    for (std::size_t h = 0; h < 3; ++h)
        for (int i = 0; i < in.size(); ++i)
            for (int v = 0; v < c.vocab_size; ++v) worst = std::max(worst, std::abs(out.logits[h](i, v) - ref[h][i][v]));
    CHECK(worst < 1e-5);

    // The float path agrees too.
    const auto mf = ModelT<float>{m.config, m.params.cast<float>()};
    const auto outf = run_all(mf, in);
    for (int i = 0; i < in.size(); ++i)
        for (int v = 0; v < c.vocab_size; ++v) CHECK(std::abs(outf.logits[0](i, v) - ref[0][i][v]) < 1e-4);
}

TEST_CASE("causality under mutation of later positions") {
    ModelConfig c = tiny_config();
    c.n_layers = 2;
    auto m = init_model<double>(c, 9);
    attach_heads(m, HeadMode::MTP_UNEMBED_LORA, 2, 10);
    randomize(m, 11);
    const int n = 12;
    const auto base = random_input(n, c.vocab_size, c.d_v, 12, 3);
    const auto out = run_all(m, base);
    Rng rng(13);
    std::uniform_int_distribution<int> tok(0, c.vocab_size - 1);
    for (int t = 0; t < n - 1; ++t) {
        ModelInput mutated = base;
        for (int p = t + 1; p < n; ++p) mutated.tokens[p] = tok(rng);
        if (t + 1 < 3) mutated.features[2][0] += 5.0f;
        const auto out2 = run_all(m, mutated);
        for (std::size_t h = 0; h < out.logits.size(); ++h) {
            CHECK(out.logits[h].topRows(t + 1) == out2.logits[h].topRows(t + 1));
        }
    }
}

TEST_CASE("zero low-rank factors make every head equal head 0") {
    for (int rank : {0, 4}) {
        ModelConfig c = tiny_config();
        c.lora_rank = rank;
        auto m = init_model<double>(c, 14);
        randomize(m, 15);
        attach_heads(m, HeadMode::MTP_UNEMBED_LORA, 3, 16);
        for (int i = 1; i <= 3; ++i) {
            const std::string p = "head." + std::to_string(i) + ".";
            CHECK(m.params.at(p + "base").data == m.params.at("unembed").data);
            CHECK_FALSE(m.params.at(p + "base").trainable);
        }
        const auto in = random_input(7, c.vocab_size, c.d_v, 17);
        const auto out = run_all(m, in);
        REQUIRE(out.logits.size() == 4);
        for (int i = 1; i <= 3; ++i) CHECK(out.logits[i] == out.logits[0]);
    }
}

TEST_CASE("softmax of every head sums to one") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 18);
    attach_heads(m, HeadMode::MTP_LINEAR, 2, 19);
    randomize(m, 20, 1.0);
    const auto in = random_input(10, c.vocab_size, c.d_v, 21);
    const auto out = run_all(m, in);
    for (const auto& lg : out.logits) {
        for (int i = 0; i < lg.rows(); ++i) {
            const double mx = lg.row(i).maxCoeff();
            double z = 0;
            for (int v = 0; v < lg.cols(); ++v) z += std::exp(lg(i, v) - mx);
            double s = 0;
            for (int v = 0; v < lg.cols(); ++v) s += std::exp(lg(i, v) - mx) / z;
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("infer mode populates head 0 only; overlong input rejected") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 22);
    attach_heads(m, HeadMode::MTP_LINEAR, 2, 23);
    const auto in = random_input(5, c.vocab_size, c.d_v, 24);
    CHECK(run_all(m, in, RunMode::infer).logits.size() == 1);
    CHECK(run_all(m, in, RunMode::train).logits.size() == 3);
    const auto longer = random_input(c.context_length + 1, c.vocab_size, c.d_v, 25);
    CHECK_THROWS_AS(run_all(m, longer), DataError);
}

TEST_CASE("config invariants") {
    ModelConfig c = tiny_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), DataError);
    c = tiny_config();
    c.K = 2;
    CHECK_THROWS_AS(c.validate(), DataError);
    auto m = init_model<float>(tiny_config(), 1);
    CHECK_THROWS_AS(attach_heads(m, HeadMode::NTP, 2, 1), DataError);
    CHECK(to_json(model_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("head parameter accounting") {
    ModelConfig c;
    c.vocab_size = 32000;
    c.d_model = 4096;
    c.K = 0;
    CHECK(head_param_count(c) == 0);
    c.K = 4;
    c.head_mode = HeadMode::MTP_LINEAR;
    CHECK(head_param_count(c) == 4LL * 4096 * 4096);
    c.head_mode = HeadMode::MTP_UNEMBED_LORA;
    c.lora_rank = 64;
    CHECK(head_param_count(c) == 4LL * 64 * (4096 + 32000));

    // Counting actual tensors agrees with the formula.
    ModelConfig t = tiny_config();
    for (auto mode : {HeadMode::MTP_LINEAR, HeadMode::MTP_UNEMBED_LORA}) {
        auto m = init_model<float>(t, 1);
        const auto before = m.params.count(true);
        attach_heads(m, mode, 3, 2);
        CHECK(static_cast<std::int64_t>(m.params.count(true) - before) == head_param_count(m.config));
    }
}

TEST_CASE("checkpoint round trip and corruption") {
    namespace fs = std::filesystem;
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 30);
    attach_heads(m, HeadMode::MTP_UNEMBED_LORA, 2, 31);
    randomize(m, 32);
    const auto dir = fs::temp_directory_path() / "vplan_ckpt_test";
    fs::create_directories(dir);
    const auto a = (dir / "a.ckpt").string(), b = (dir / "b.ckpt").string();
    save_checkpoint(a, m, {{"stage", "PRIMARY_FINETUNE"}});
    const auto ck = load_checkpoint(a);
    CHECK(ck.model.config == m.config);
    CHECK(ck.model.params == m.params);
    CHECK(ck.meta.at("stage") == "PRIMARY_FINETUNE");
    save_checkpoint(b, ck.model, ck.meta);
    CHECK(read_file(a) == read_file(b));

    ModelConfig wrong = m.config;
    wrong.vocab_size = 12;
    CHECK_THROWS_WITH_AS(load_checkpoint(a, wrong), doctest::Contains("shape mismatch"), DataError);
    CHECK_NOTHROW(load_checkpoint(a, m.config));

    std::string bytes = read_file(a);
    bytes[bytes.size() - 20] ^= 0x01;
    write_file(b, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("checksum"), DataError);
    write_file(b, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(b), DataError);
    write_file(b, "garbage");
    CHECK_THROWS_AS(load_checkpoint(b), DataError);
    fs::remove_all(dir);
}

TEST_CASE("decoding ignores extra heads; sampling limits and determinism") {
    ModelConfig c = tiny_config();
    c.context_length = 24;
    auto base = init_model<float>(c, 40);
    randomize(base, 41, 1.0);
    std::vector<ModelInput> prompts;
    for (int i = 0; i < 10; ++i) prompts.push_back(random_input(4 + i % 5, c.vocab_size, c.d_v, 100 + i));
    const TokenId eos = 3;
    const auto detached = decode_greedy(base, prompts, 12, eos);
    for (auto mode : {HeadMode::MTP_LINEAR, HeadMode::MTP_UNEMBED_LORA}) {
        auto m = base;
        attach_heads(m, mode, 3, 42);
        randomize(m, 43, 1.0);
        // Restore the trunk so only head tensors differ from `base`.
        for (auto& [name, t] : m.params.tensors) {
            if (base.params.contains(name)) t.data = base.params.at(name).data;
        }
        const auto attached = decode_greedy(m, prompts, 12, eos);
        for (std::size_t i = 0; i < prompts.size(); ++i) CHECK(attached[i].tokens == detached[i].tokens);
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto cold = decode_sample(base, prompts[i], 1e-6, 7, 2, 12, eos);
        CHECK(cold[0].tokens == detached[i].tokens);
        CHECK(cold[1].tokens == detached[i].tokens);
        CHECK(decode_sample(base, prompts[i], 0.0, 7, 1, 12, eos)[0].tokens == detached[i].tokens);
        const auto s1 = decode_sample(base, prompts[i], 1.0, 99, 5, 12, eos);
        const auto s2 = decode_sample(base, prompts[i], 1.0, 99, 5, 12, eos);
        for (int k = 0; k < 5; ++k) CHECK(s1[k].tokens == s2[k].tokens);
    }
    // Output stops at max_tokens or the context edge and is flagged.
    const auto r = decode_greedy(base, {random_input(22, c.vocab_size, c.d_v, 5)}, 50, -1);
    CHECK(r[0].truncated);
    CHECK(r[0].tokens.size() == 3);
}

TEST_CASE("sample encoding layout") {
    World w = generate_world(WorldConfig{});
    const auto eps = sample_corpus(w, 5, 1, stream::episode);
    ModelConfig c;
    c.vocab_size = w.vocab.size();
    const auto s = make_gma_samples(w, eps[0], 3)[1];
    const auto e = encode_sample(s, c, w.vocab.special);
    CHECK(e.input.tokens[static_cast<std::size_t>(e.first_target)] == w.vocab.special.bor);
    CHECK(e.input.size() == e.first_target + static_cast<int>(s.response_tokens.size()));
    const int n_obs = std::min<int>(static_cast<int>(s.obs_frames.size()), c.max_obs_frames);
    CHECK(e.input.tokens[static_cast<std::size_t>(n_obs)] == w.vocab.special.sep);
    CHECK(e.input.features.size() == static_cast<std::size_t>(n_obs + 1));
    CHECK(e.input.features.back() == *s.goal_image);

    CHECK(subsample_frames(5, 8) == std::vector<int>{0, 1, 2, 3, 4});
    const auto sub = subsample_frames(30, 8);
    CHECK(sub.size() == 8);
    CHECK(sub.front() == 0);
    CHECK(sub.back() == 29);
    CHECK(std::is_sorted(sub.begin(), sub.end()));
    CHECK(subsample_frames(30, 1) == std::vector<int>{29});
}

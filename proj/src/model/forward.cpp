#include "vplan/model.hpp"

#include <cmath>
#include <limits>

namespace vplan {

namespace {

constexpr double kLnEps = 1e-5;

template <class T>
using CMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
CMap<T> param(const ModelT<T>& m, const std::string& name) {
    return m.params.at(name).mat();
}

template <class T>
Tensor<T>* grad_slot(ParamStore<T>& grads, const std::string& name) {
    auto it = grads.tensors.find(name);
    return it == grads.tensors.end() ? nullptr : &it->second;
}

// Column sums accumulated row by row. Reductions straight into the mapped
// gradient buffer would let heap alignment change the summation order.
template <class T, class Derived>
void add_colsum(Tensor<T>* g, const Eigen::MatrixBase<Derived>& m) {
    if (!g) return;
    RowVec<T> acc = RowVec<T>::Zero(m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r) acc += m.row(r);
    g->mat().row(0) += acc;
}

template <class T>
void add_bias(Mat<T>& x, const CMap<T>& b) {
    x.rowwise() += b.row(0);
}

template <class T>
void layernorm(const Mat<T>& x, const CMap<T>& g, const CMap<T>& b, Mat<T>& xhat, std::vector<T>& rstd, Mat<T>& y) {
    const Eigen::Index n = x.rows(), d = x.cols();
    xhat.resize(n, d);
    y.resize(n, d);
    rstd.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const T var = (x.row(i).array() - mean).square().mean();
        const T r = T(1) / std::sqrt(var + T(kLnEps));
        rstd[static_cast<std::size_t>(i)] = r;
        xhat.row(i) = (x.row(i).array() - mean) * r;
        y.row(i) = xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
    }
}

// Returns d x; accumulates d gain / d bias when the slots exist.
template <class T>
Mat<T> layernorm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd, const CMap<T>& g,
                          Tensor<T>* dg, Tensor<T>* db) {
    if (dg) add_colsum(dg, Mat<T>(dy.cwiseProduct(xhat)));
    add_colsum(db, dy);
    const Eigen::Index n = dy.rows(), d = dy.cols();
    Mat<T> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const RowVec<T> dxhat = dy.row(i).cwiseProduct(g.row(0));
        const T m1 = dxhat.mean();
        const T m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
        dx.row(i) = (dxhat.array() - m1 - xhat.row(i).array() * m2) * rstd[static_cast<std::size_t>(i)];
    }
    return dx;
}

template <class T>
constexpr T gelu_c() {
    return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

// Keeps tanh(.) in `t` for the backward pass.
template <class T>
void gelu(const Mat<T>& u, Mat<T>& t, Mat<T>& out) {
    const auto x = u.array();
    t = (gelu_c<T>() * (x + T(0.044715) * x.cube())).tanh().matrix();
    out = (T(0.5) * x * (T(1) + t.array())).matrix();
}

template <class T>
void gelu_backward_inplace(const Mat<T>& u, const Mat<T>& t, Mat<T>& dg) {
    const auto x = u.array();
    const auto ta = t.array();
    const auto dt = (T(1) - ta.square()) * gelu_c<T>() * (T(1) + T(3) * T(0.044715) * x.square());
    dg.array() *= T(0.5) * (T(1) + ta) + T(0.5) * x * dt;
}

template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::uint64_t seed, std::uint64_t index) {
    Rng rng = substream(seed, stream::dropout, index);
    std::bernoulli_distribution keep(1.0 - p);
    Mat<T> m(rows, cols);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = keep(rng) ? scale : T(0);
    return m;
}

}  // namespace

template <class T>
Mat<T> adapter_apply(const std::vector<FeatureVec>& frames, const ParamStore<T>& params, const ModelConfig& config) {
    const auto W = params.at("adapter.w").mat();
    const auto b = params.at("adapter.b").mat();
    Mat<T> F(static_cast<Eigen::Index>(frames.size()), config.d_v);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        if (static_cast<int>(frames[i].size()) != config.d_v) {
            throw DataError("observation feature has dimension " + std::to_string(frames[i].size()) + ", expected " +
                            std::to_string(config.d_v));
        }
        for (int k = 0; k < config.d_v; ++k) F(static_cast<Eigen::Index>(i), k) = static_cast<T>(frames[i][static_cast<std::size_t>(k)]);
    }
    Mat<T> out = F * W;
    out.rowwise() += b.row(0);
    return out;
}

template <class T>
ForwardOutput<T> Transformer<T>::forward(const std::vector<const ModelInput*>& batch,
                                         const std::vector<std::vector<int>>& positions, RunMode mode,
                                         std::uint64_t dropout_seed) {
    const ModelConfig& c = model_.config;
    const int d = c.d_model, H = c.n_heads, dh = d / H;
    if (positions.size() != batch.size()) throw DataError("positions/batch size mismatch");
    batch_ = batch;
    mode_ = mode;
    offsets_.assign(1, 0);
    gather_.clear();
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const int n = batch[s]->size();
        if (n < 1) throw DataError("empty input sequence");
        if (n > c.context_length) {
            throw DataError("sequence length " + std::to_string(n) + " exceeds context length " +
                            std::to_string(c.context_length));
        }
        for (int p : positions[s]) {
            if (p < 0 || p >= n) throw DataError("logit position out of range");
            gather_.push_back(offsets_.back() + p);
        }
        offsets_.push_back(offsets_.back() + n);
    }
    const int N = offsets_.back();

    // Embeddings.
    const auto tok = param(model_, "tok_emb");
    const auto pos = param(model_, "pos_emb");
    x0_.resize(N, d);
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const ModelInput& in = *batch[s];
        Mat<T> feats;
        if (!in.features.empty()) feats = adapter_apply(in.features, model_.params, c);
        for (int p = 0; p < in.size(); ++p) {
            const int row = offsets_[s] + p;
            const int slot = in.feature_slot[static_cast<std::size_t>(p)];
            if (slot >= 0) {
                x0_.row(row) = feats.row(slot);
            } else {
                const TokenId t = in.tokens[static_cast<std::size_t>(p)];
                if (t < 0 || t >= c.vocab_size) throw DataError("token id " + std::to_string(t) + " out of range");
                x0_.row(row) = tok.row(t);
            }
            x0_.row(row) += pos.row(p);
        }
    }

    const bool use_dropout = mode == RunMode::train && c.dropout > 0.0;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    layers_.resize(static_cast<std::size_t>(c.n_layers));
    Mat<T> x = x0_;
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        LayerCache& L = layers_[static_cast<std::size_t>(l)];
        layernorm(x, param(model_, p + "ln1.g"), param(model_, p + "ln1.b"), L.xhat1, L.rstd1, L.a);
        L.qkv = L.a * param(model_, p + "attn.wqkv");
        add_bias(L.qkv, param(model_, p + "attn.bqkv"));
        L.attn.resize(N, d);
        L.probs.resize(batch.size() * static_cast<std::size_t>(H));
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const int off = offsets_[s], n = offsets_[s + 1] - off;
            for (int h = 0; h < H; ++h) {
                const auto Q = L.qkv.block(off, h * dh, n, dh);
                const auto K = L.qkv.block(off, d + h * dh, n, dh);
                const auto V = L.qkv.block(off, 2 * d + h * dh, n, dh);
                Mat<T>& P = L.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
                P.noalias() = Q * K.transpose();
                for (int i = 0; i < n; ++i) {
                    T mx = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j <= i; ++j) mx = std::max(mx, P(i, j) * scale);
                    T sum = 0;
                    for (int j = 0; j <= i; ++j) {
                        const T e = std::exp(P(i, j) * scale - mx);
                        P(i, j) = e;
                        sum += e;
                    }
                    const T inv = T(1) / sum;
                    for (int j = 0; j <= i; ++j) P(i, j) *= inv;
                    for (int j = i + 1; j < n; ++j) P(i, j) = T(0);
                }
                L.attn.block(off, h * dh, n, dh).noalias() = P * V;
            }
        }
        Mat<T> proj = L.attn * param(model_, p + "attn.wo");
        add_bias(proj, param(model_, p + "attn.bo"));
        if (use_dropout) {
            L.drop1 = dropout_mask<T>(N, d, c.dropout, dropout_seed, static_cast<std::uint64_t>(2 * l));
            proj = proj.cwiseProduct(L.drop1);
        } else {
            L.drop1.resize(0, 0);
        }
        L.x_mid = x + proj;

        layernorm(L.x_mid, param(model_, p + "ln2.g"), param(model_, p + "ln2.b"), L.xhat2, L.rstd2, L.m);
        L.u = L.m * param(model_, p + "mlp.w1");
        add_bias(L.u, param(model_, p + "mlp.b1"));
        gelu(L.u, L.t, L.g);
        Mat<T> out = L.g * param(model_, p + "mlp.w2");
        add_bias(out, param(model_, p + "mlp.b2"));
        if (use_dropout) {
            L.drop2 = dropout_mask<T>(N, d, c.dropout, dropout_seed, static_cast<std::uint64_t>(2 * l + 1));
            out = out.cwiseProduct(L.drop2);
        } else {
            L.drop2.resize(0, 0);
        }
        x = L.x_mid + out;
    }

    // Final norm only on the requested rows.
    Mat<T> xg(static_cast<Eigen::Index>(gather_.size()), d);
    for (std::size_t i = 0; i < gather_.size(); ++i) xg.row(static_cast<Eigen::Index>(i)) = x.row(gather_[i]);
    ForwardOutput<T> out;
    layernorm(xg, param(model_, "ln_f.g"), param(model_, "ln_f.b"), xhat_f_, rstd_f_, out.hidden);
    xf_ = out.hidden;

    const auto U = param(model_, "unembed");
    out.logits.push_back(out.hidden * U.transpose());
    const T ls = static_cast<T>(c.lora_scale());
    if (const auto* a0 = model_.params.find("head.0.lora_a")) {
        const auto B0 = param(model_, "head.0.lora_b");
        out.logits[0].noalias() += ls * ((out.hidden * a0->mat().transpose()) * B0.transpose());
    }
    heads_run_ = mode == RunMode::train && c.K > 0;
    if (heads_run_) {
        for (int i = 1; i <= c.K; ++i) {
            const std::string p = "head." + std::to_string(i) + ".";
            if (c.head_mode == HeadMode::MTP_LINEAR) {
                out.logits.push_back((out.hidden * param(model_, p + "w")) * U.transpose());
            } else {
                Mat<T> li = out.hidden * param(model_, p + "base").transpose();
                li.noalias() +=
                    ls * ((out.hidden * param(model_, p + "lora_a").transpose()) * param(model_, p + "lora_b").transpose());
                out.logits.push_back(std::move(li));
            }
        }
    }
    for (const auto& lg : out.logits) {
        if (!lg.allFinite()) throw NumericError("non-finite logits in forward pass");
    }
    return out;
}

template <class T>
void Transformer<T>::backward(const std::vector<Mat<T>>& dlogits, ParamStore<T>& grads) {
    const ModelConfig& c = model_.config;
    const int d = c.d_model, H = c.n_heads, dh = d / H;
    const std::size_t n_heads_out = heads_run_ ? static_cast<std::size_t>(1 + c.K) : 1;
    if (dlogits.size() != n_heads_out) throw DataError("dlogits head count does not match the forward pass");
    const Eigen::Index M = xf_.rows();
    for (const auto& dl : dlogits) {
        if (dl.rows() != M || dl.cols() != c.vocab_size) throw DataError("dlogits shape mismatch");
    }

    const auto U = param(model_, "unembed");
    const T ls = static_cast<T>(c.lora_scale());
    Tensor<T>* gU = grad_slot(grads, "unembed");
    Mat<T> dH = dlogits[0] * U;
    if (gU) gU->mat().noalias() += dlogits[0].transpose() * xf_;
    if (const auto* a0 = model_.params.find("head.0.lora_a")) {
        const auto A = a0->mat();
        const auto B = param(model_, "head.0.lora_b");
        const Mat<T> dLB = dlogits[0] * B;
        if (auto* g = grad_slot(grads, "head.0.lora_b")) g->mat().noalias() += ls * (dlogits[0].transpose() * (xf_ * A.transpose()));
        if (auto* g = grad_slot(grads, "head.0.lora_a")) g->mat().noalias() += ls * (dLB.transpose() * xf_);
        dH.noalias() += ls * (dLB * A);
    }
    for (std::size_t i = 1; i < n_heads_out; ++i) {
        const std::string p = "head." + std::to_string(i) + ".";
        const Mat<T>& dL = dlogits[i];
        if (c.head_mode == HeadMode::MTP_LINEAR) {
            const auto W = param(model_, p + "w");
            const Mat<T> Z = xf_ * W;
            if (gU) gU->mat().noalias() += dL.transpose() * Z;
            const Mat<T> dZ = dL * U;
            if (auto* g = grad_slot(grads, p + "w")) g->mat().noalias() += xf_.transpose() * dZ;
            dH.noalias() += dZ * W.transpose();
        } else {
            const auto base = param(model_, p + "base");
            const auto A = param(model_, p + "lora_a");
            const auto B = param(model_, p + "lora_b");
            if (auto* g = grad_slot(grads, p + "base")) g->mat().noalias() += dL.transpose() * xf_;
            const Mat<T> dLB = dL * B;
            if (auto* g = grad_slot(grads, p + "lora_b")) g->mat().noalias() += ls * (dL.transpose() * (xf_ * A.transpose()));
            if (auto* g = grad_slot(grads, p + "lora_a")) g->mat().noalias() += ls * (dLB.transpose() * xf_);
            dH.noalias() += dL * base;
            dH.noalias() += ls * (dLB * A);
        }
    }

    const Mat<T> dxg = layernorm_backward(dH, xhat_f_, rstd_f_, param(model_, "ln_f.g"), grad_slot(grads, "ln_f.g"),
                                          grad_slot(grads, "ln_f.b"));
    const int N = offsets_.back();
    Mat<T> dx = Mat<T>::Zero(N, d);
    for (std::size_t i = 0; i < gather_.size(); ++i) dx.row(gather_[i]) += dxg.row(static_cast<Eigen::Index>(i));

    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        const LayerCache& L = layers_[static_cast<std::size_t>(l)];

        // MLP block.
        Mat<T> dout = L.drop2.size() ? Mat<T>(dx.cwiseProduct(L.drop2)) : dx;
        add_colsum(grad_slot(grads, p + "mlp.b2"), dout);
        if (auto* g = grad_slot(grads, p + "mlp.w2")) g->mat().noalias() += L.g.transpose() * dout;
        Mat<T> du = dout * param(model_, p + "mlp.w2").transpose();
        gelu_backward_inplace(L.u, L.t, du);
        add_colsum(grad_slot(grads, p + "mlp.b1"), du);
        if (auto* g = grad_slot(grads, p + "mlp.w1")) g->mat().noalias() += L.m.transpose() * du;
        const Mat<T> dm = du * param(model_, p + "mlp.w1").transpose();
        dx += layernorm_backward(dm, L.xhat2, L.rstd2, param(model_, p + "ln2.g"), grad_slot(grads, p + "ln2.g"),
                                 grad_slot(grads, p + "ln2.b"));

        // Attention block.
        Mat<T> dproj = L.drop1.size() ? Mat<T>(dx.cwiseProduct(L.drop1)) : dx;
        add_colsum(grad_slot(grads, p + "attn.bo"), dproj);
        if (auto* g = grad_slot(grads, p + "attn.wo")) g->mat().noalias() += L.attn.transpose() * dproj;
        const Mat<T> dattn = dproj * param(model_, p + "attn.wo").transpose();
        Mat<T> dqkv(N, 3 * d);
        for (std::size_t s = 0; s + 1 < offsets_.size(); ++s) {
            const int off = offsets_[s], n = offsets_[s + 1] - off;
            for (int h = 0; h < H; ++h) {
                const Mat<T>& P = L.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
                const auto Q = L.qkv.block(off, h * dh, n, dh);
                const auto K = L.qkv.block(off, d + h * dh, n, dh);
                const auto V = L.qkv.block(off, 2 * d + h * dh, n, dh);
                const auto dO = dattn.block(off, h * dh, n, dh);
                dqkv.block(off, 2 * d + h * dh, n, dh).noalias() = P.transpose() * dO;
                Mat<T> dS = dO * V.transpose();
                for (int i = 0; i < n; ++i) {
                    T dot = 0;
                    for (int j = 0; j <= i; ++j) dot += dS(i, j) * P(i, j);
                    for (int j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dS(i, j) - dot) * scale;
                    for (int j = i + 1; j < n; ++j) dS(i, j) = T(0);
                }
                dqkv.block(off, h * dh, n, dh).noalias() = dS * K;
                dqkv.block(off, d + h * dh, n, dh).noalias() = dS.transpose() * Q;
            }
        }
        add_colsum(grad_slot(grads, p + "attn.bqkv"), dqkv);
        if (auto* g = grad_slot(grads, p + "attn.wqkv")) g->mat().noalias() += L.a.transpose() * dqkv;
        const Mat<T> da = dqkv * param(model_, p + "attn.wqkv").transpose();
        dx += layernorm_backward(da, L.xhat1, L.rstd1, param(model_, p + "ln1.g"), grad_slot(grads, p + "ln1.g"),
                                 grad_slot(grads, p + "ln1.b"));
    }

    // Embeddings.
    Tensor<T>* gtok = grad_slot(grads, "tok_emb");
    Tensor<T>* gpos = grad_slot(grads, "pos_emb");
    Tensor<T>* gaw = grad_slot(grads, "adapter.w");
    Tensor<T>* gab = grad_slot(grads, "adapter.b");
    for (std::size_t s = 0; s < batch_.size(); ++s) {
        const ModelInput& in = *batch_[s];
        for (int q = 0; q < in.size(); ++q) {
            const auto row = dx.row(offsets_[s] + q);
            if (gpos) gpos->mat().row(q) += row;
            const int slot = in.feature_slot[static_cast<std::size_t>(q)];
            if (slot >= 0) {
                const FeatureVec& f = in.features[static_cast<std::size_t>(slot)];
                if (gab) gab->mat().row(0) += row;
                if (gaw) {
                    auto W = gaw->mat();
                    for (int k = 0; k < c.d_v; ++k) W.row(k) += static_cast<T>(f[static_cast<std::size_t>(k)]) * row;
                }
            } else if (gtok) {
                gtok->mat().row(in.tokens[static_cast<std::size_t>(q)]) += row;
            }
        }
    }
}

template Mat<float> adapter_apply<float>(const std::vector<FeatureVec>&, const ParamStore<float>&, const ModelConfig&);
template Mat<double> adapter_apply<double>(const std::vector<FeatureVec>&, const ParamStore<double>&, const ModelConfig&);
template class Transformer<float>;
template class Transformer<double>;

}  // namespace vplan

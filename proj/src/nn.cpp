#include "unifusion/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace unifusion::nn {

void init_linear(ParamStore& ps, const std::string& prefix, int in, int out, RngStream& rng, bool bias) {
    ps.create_normal(prefix + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    if (bias) ps.create_full(prefix + ".b", {out}, 0.0);
}

Tensor linear(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& x, const LoraSet* lora) {
    Tensor y = matmul(tp, x, ps.use(tp, prefix + ".w"));
    if (ps.has(prefix + ".b")) y = add_rowvec(tp, y, ps.use(tp, prefix + ".b"));
    if (lora && lora->adapts(prefix)) {
        Tensor a = ps.use(tp, "lora." + prefix + ".a");
        Tensor b = ps.use(tp, "lora." + prefix + ".b");
        y = add(tp, y, scale(tp, matmul(tp, matmul(tp, x, a), b), lora->scale));
    }
    return y;
}

void init_layernorm(ParamStore& ps, const std::string& prefix, int d) {
    ps.create_full(prefix + ".g", {d}, 1.0);
    ps.create_full(prefix + ".b", {d}, 0.0);
}

Tensor layer_norm(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& x) {
    return layernorm(tp, x, ps.use(tp, prefix + ".g"), ps.use(tp, prefix + ".b"));
}

void init_attention(ParamStore& ps, const std::string& prefix, int d, int d_kv, RngStream& rng) {
    init_linear(ps, prefix + ".wq", d, d, rng);
    init_linear(ps, prefix + ".wk", d_kv, d, rng);
    init_linear(ps, prefix + ".wv", d_kv, d, rng);
    init_linear(ps, prefix + ".wo", d, d, rng);
}

Tensor attention(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& xq,
                 const Tensor& xkv, const Tensor* mask, int n_heads, const LoraSet* lora) {
    const int d = ps.param(prefix + ".wq.w").shape[1];
    if (d % n_heads != 0)
        throw std::invalid_argument("attention: width " + std::to_string(d) + " not divisible by " +
                                    std::to_string(n_heads) + " heads");
    const int dh = d / n_heads;
    Tensor q = linear(tp, ps, prefix + ".wq", xq, lora);
    Tensor k = linear(tp, ps, prefix + ".wk", xkv, lora);
    Tensor v = linear(tp, ps, prefix + ".wv", xkv, lora);
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(tp, q, h * dh, dh);
        Tensor kh = slice_cols(tp, k, h * dh, dh);
        Tensor vh = slice_cols(tp, v, h * dh, dh);
        Tensor scores = scale(tp, matmul(tp, qh, transpose(tp, kh)), inv_sqrt);
        Tensor p = softmax_masked(tp, scores, mask);
        heads.push_back(matmul(tp, p, vh));
    }
    Tensor merged = n_heads == 1 ? heads[0] : concat_cols(tp, heads);
    return linear(tp, ps, prefix + ".wo", merged, lora);
}

void init_ffn(ParamStore& ps, const std::string& prefix, int d, int hidden, RngStream& rng) {
    init_linear(ps, prefix + ".w1", d, hidden, rng);
    init_linear(ps, prefix + ".w2", hidden, d, rng);
}

Tensor ffn(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& x, const LoraSet* lora) {
    return linear(tp, ps, prefix + ".w2", gelu(tp, linear(tp, ps, prefix + ".w1", x, lora)), lora);
}

Tensor sinusoid_table(int n_pos, int d) {
    Tensor t = Tensor::zeros({n_pos, d});
    for (int p = 0; p < n_pos; ++p) {
        for (int i = 0; i < d / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / d);
            t.at(p, 2 * i) = std::sin(p * freq);
            t.at(p, 2 * i + 1) = std::cos(p * freq);
        }
    }
    return t;
}

void lora_apply(ParamStore& ps, const std::string& layer, int rank, RngStream& rng) {
    const Tensor& w = ps.param(layer + ".w");
    const int in = w.shape[0], out = w.shape[1];
    if (rank < 1 || rank > std::min(in, out))
        throw std::invalid_argument("lora_apply: rank " + std::to_string(rank) + " exceeds layer " +
                                    layer + " of " + shape_str(w.shape));
    ps.create_normal("lora." + layer + ".a", {in, rank}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    ps.create_full("lora." + layer + ".b", {rank, out}, 0.0);
}

void lora_merge(ParamStore& ps, const std::string& layer, double scale) {
    Tensor& w = ps.param(layer + ".w");
    const Tensor& a = ps.param("lora." + layer + ".a");
    const Tensor& b = ps.param("lora." + layer + ".b");
    Tensor delta = matmul(nullptr, a, b);
    for (int i = 0; i < w.numel(); ++i) w.at(i) += scale * delta.at(i);
    ps.remove("lora." + layer + ".a");
    ps.remove("lora." + layer + ".b");
}

} // namespace unifusion::nn

#include "unifusion/diffuser.hpp"

#include <cmath>
#include <stdexcept>

namespace unifusion::diff {

namespace {
// brings latent elements to roughly unit variance so the noise-prediction
// objective carries a meaningful signal component at every timestep
constexpr double kLatentGain = 2.88;
} // namespace

double NoiseSchedule::ab(int t) const {
    if (t == 0) return 1.0;
    if (t < 1 || t > T) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return alpha_bar[t - 1];
}

NoiseSchedule make_schedule(int T, double beta_1, double beta_T) {
    if (T < 1 || beta_1 <= 0.0 || beta_T >= 1.0 || beta_1 > beta_T)
        throw std::invalid_argument("make_schedule: need 0 < beta_1 <= beta_T < 1 and T >= 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double running = 1.0;
    for (int t = 0; t < T; ++t) {
        s.beta[t] = T == 1 ? beta_1 : beta_1 + (beta_T - beta_1) * t / (T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        running *= s.alpha[t];
        s.alpha_bar[t] = running;
    }
    return s;
}

Latent forward_noise(const NoiseSchedule& s, const Latent& x0, int t, const Latent& eps) {
    if (t < 1 || t > s.T) throw std::out_of_range("forward_noise: t outside [1, T]");
    if (x0.shape != eps.shape) throw std::invalid_argument("forward_noise: shape mismatch");
    const double a = std::sqrt(s.ab(t)), b = std::sqrt(1.0 - s.ab(t));
    Latent out = Tensor::zeros(x0.shape);
    for (int i = 0; i < x0.numel(); ++i) out.at(i) = a * x0.at(i) + b * eps.at(i);
    return out;
}

Condition drop_condition(const Condition& cond, double p_uncond, RngStream& rng) {
    if (p_uncond < 0.0 || p_uncond >= 1.0)
        throw std::invalid_argument("drop_condition: p_uncond outside [0, 1)");
    const double u = rng.uniform(); // exactly one draw
    if (!cond.has_value()) return std::nullopt;
    return u < p_uncond ? Condition(std::nullopt) : cond;
}

Latent cfg_eps(const Latent& eps_cond, const Latent& eps_uncond, double s) {
    if (eps_cond.shape != eps_uncond.shape) throw std::invalid_argument("cfg_eps: shape mismatch");
    if (s == 1.0) return eps_cond;
    Latent out = Tensor::zeros(eps_cond.shape);
    for (int i = 0; i < out.numel(); ++i)
        out.at(i) = eps_uncond.at(i) + s * (eps_cond.at(i) - eps_uncond.at(i));
    return out;
}

// --- codec ---------------------------------------------------------------

LatentCodec::LatentCodec(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.image_size != cfg.lat_hw * 4)
        throw std::invalid_argument("latent codec expects 4x4 pooling from image to latent grid");
    // Gram-Schmidt on a seeded random [c_lat x 3] matrix, by columns
    RngStream rng = RngStream::keyed(seed, "latent_codec");
    Tensor m = Tensor::zeros({cfg.lat_ch, 3});
    for (int i = 0; i < m.numel(); ++i) m.at(i) = rng.normal();
    for (int c = 0; c < 3; ++c) {
        for (int prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (int r = 0; r < cfg.lat_ch; ++r) dot += m.at(r, c) * m.at(r, prev);
            for (int r = 0; r < cfg.lat_ch; ++r) m.at(r, c) -= dot * m.at(r, prev);
        }
        double nrm = 0.0;
        for (int r = 0; r < cfg.lat_ch; ++r) nrm += m.at(r, c) * m.at(r, c);
        nrm = std::sqrt(nrm);
        for (int r = 0; r < cfg.lat_ch; ++r) m.at(r, c) /= nrm;
    }
    channel_map_ = m;
}

Latent LatentCodec::encode(const synth::ImageF& img) const {
    const int n = cfg_.image_size;
    if (img.rgb.size() != static_cast<std::size_t>(n) * n * 3)
        throw std::invalid_argument("encode_latent: image dimensions do not match config");
    const int hw = cfg_.lat_hw;
    // pooled, centered to [-1, 1]: [3 x hw*hw]
    Tensor pooled = Tensor::zeros({3, hw * hw});
    for (int by = 0; by < hw; ++by)
        for (int bx = 0; bx < hw; ++bx)
            for (int ch = 0; ch < 3; ++ch) {
                double acc = 0.0;
                for (int dy = 0; dy < 4; ++dy)
                    for (int dx = 0; dx < 4; ++dx)
                        acc += img.rgb[((by * 4 + dy) * n + bx * 4 + dx) * 3 + ch];
                pooled.at(ch, by * hw + bx) = 2.0 * (acc / 16.0) - 1.0;
            }
    return scale(nullptr, matmul(nullptr, channel_map_, pooled), kLatentGain); // [c_lat x hw*hw]
}

synth::ImageF LatentCodec::decode(const Latent& z) const {
    const int hw = cfg_.lat_hw;
    if (z.shape != std::vector<int>{cfg_.lat_ch, hw * hw})
        throw std::invalid_argument("decode_latent: latent shape " + shape_str(z.shape));
    Tensor pooled = scale(nullptr, matmul(nullptr, transpose(nullptr, channel_map_), z),
                          1.0 / kLatentGain); // [3 x hw*hw]
    const int n = cfg_.image_size;
    synth::ImageF img;
    img.rgb.assign(static_cast<std::size_t>(n) * n * 3, 0.0);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const double v = (pooled.at(ch, (y / 4) * hw + x / 4) + 1.0) / 2.0;
                img.rgb[(y * n + x) * 3 + ch] = std::clamp(v, 0.0, 1.0);
            }
    return img;
}

// --- eps net ---------------------------------------------------------------

namespace {

// average-pool map from a g x g token grid to g/2 x g/2
Tensor pool_map(int g) {
    const int h = g / 2;
    Tensor p = Tensor::zeros({h * h, g * g});
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < h; ++c)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    p.at((r * h + c) * g * g + (2 * r + dy) * g + 2 * c + dx) = 0.25;
    return p;
}

// nearest-neighbor upsample map from g x g to 2g x 2g
Tensor up_map(int g) {
    const int G = g * 2;
    Tensor u = Tensor::zeros({G * G, g * g});
    for (int r = 0; r < G; ++r)
        for (int c = 0; c < G; ++c)
            u.at((r * G + c) * g * g + (r / 2) * g + c / 2) = 1.0;
    return u;
}

} // namespace

EpsNet::EpsNet(ParamStore& ps, const ModelConfig& cfg) : ps_(ps), cfg_(cfg) {
    pool1_ = pool_map(cfg.lat_hw);      // 64 -> 16 tokens
    pool2_ = pool_map(cfg.lat_hw / 2);  // 16 -> 4
}

void EpsNet::init_params(RngStream& rng) {
    const int ch = cfg_.eps_ch;
    const int tdim = 2 * ch;
    const int n_tok = cfg_.lat_tokens();
    nn::init_linear(ps_, "epsnet.in", cfg_.lat_ch, ch, rng);
    ps_.create_normal("epsnet.pos", {n_tok, ch}, 0.3, rng); // token grid positions
    nn::init_linear(ps_, "epsnet.temb1", tdim, ch, rng);
    nn::init_linear(ps_, "epsnet.enc2", ch, 2 * ch, rng);
    nn::init_linear(ps_, "epsnet.temb2", tdim, 2 * ch, rng);
    nn::init_layernorm(ps_, "epsnet.bn_ln1", 2 * ch);
    nn::init_attention(ps_, "epsnet.cross", 2 * ch, cfg_.d_cond, rng);
    nn::init_layernorm(ps_, "epsnet.bn_ln2", 2 * ch);
    nn::init_ffn(ps_, "epsnet.bn_ffn", 2 * ch, 4 * ch, rng);
    // learned token-mixing upsample maps, started at nearest-neighbor
    {
        Tensor u1 = up_map(cfg_.lat_hw / 4); // [16 x 4]
        Tensor& p1 = ps_.create("epsnet.up1", {n_tok / 16, n_tok / 4});
        // stored transposed for matmul(up^T): shape [4 x 16] -> tokens' = up * tokens
        (void)p1;
        ps_.param("epsnet.up1") = transpose(nullptr, u1);
        Tensor u2 = up_map(cfg_.lat_hw / 2); // [64 x 16]
        ps_.create("epsnet.up2", {n_tok / 4, n_tok});
        ps_.param("epsnet.up2") = transpose(nullptr, u2);
    }
    nn::init_linear(ps_, "epsnet.dec1", 2 * ch, ch, rng);
    nn::init_linear(ps_, "epsnet.temb3", tdim, ch, rng);
    nn::init_linear(ps_, "epsnet.out", ch, cfg_.lat_ch, rng);
    ps_.create_normal("epsnet.null_cond", {1, cfg_.d_cond}, 0.5, rng);
}

Latent EpsNet::forward(Tape* tp, const Latent& x_t, int t, const Condition& cond,
                       const NoiseSchedule& s) {
    if (t < 1 || t > s.T) throw std::out_of_range("eps_predict: t outside [1, T]");
    if (x_t.shape != std::vector<int>{cfg_.lat_ch, cfg_.lat_tokens()})
        throw std::invalid_argument("eps_predict: latent shape " + shape_str(x_t.shape));

    // timestep embedding shared across levels
    Tensor temb_raw = Tensor::zeros({1, 2 * cfg_.eps_ch});
    for (int i = 0; i < cfg_.eps_ch; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / (2 * cfg_.eps_ch));
        temb_raw.at(2 * i) = std::sin(t * freq);
        temb_raw.at(2 * i + 1) = std::cos(t * freq);
    }

    Tensor cond_rows = cond.has_value() ? *cond : ps_.use(tp, "epsnet.null_cond");

    Tensor tokens = transpose(tp, x_t); // [64 x c_lat]
    Tensor h1 = add(tp, nn::linear(tp, ps_, "epsnet.in", tokens), ps_.use(tp, "epsnet.pos"));
    h1 = gelu(tp, add_rowvec(tp, h1,
                             reshape(tp, nn::linear(tp, ps_, "epsnet.temb1", temb_raw), {cfg_.eps_ch})));
    Tensor h2 = matmul(tp, pool1_, h1); // [16 x ch]
    h2 = gelu(tp, add_rowvec(tp, nn::linear(tp, ps_, "epsnet.enc2", h2),
                             reshape(tp, nn::linear(tp, ps_, "epsnet.temb2", temb_raw), {2 * cfg_.eps_ch})));
    Tensor hb = matmul(tp, pool2_, h2); // [4 x 2ch]

    Tensor hn = nn::layer_norm(tp, ps_, "epsnet.bn_ln1", hb);
    hb = add(tp, hb, nn::attention(tp, ps_, "epsnet.cross", hn, cond_rows, nullptr, cfg_.eps_heads));
    Tensor hn2 = nn::layer_norm(tp, ps_, "epsnet.bn_ln2", hb);
    hb = add(tp, hb, nn::ffn(tp, ps_, "epsnet.bn_ffn", hn2));

    // learned token-mixing upsamples render condition structure at full
    // grid resolution; skips reinject the encoder activations
    Tensor u1 = add(tp, transpose(tp, matmul(tp, transpose(tp, hb), ps_.use(tp, "epsnet.up1"))), h2);
    Tensor d1 = gelu(tp, add_rowvec(tp, nn::linear(tp, ps_, "epsnet.dec1", u1),
                                    reshape(tp, nn::linear(tp, ps_, "epsnet.temb3", temb_raw), {cfg_.eps_ch})));
    Tensor u2 = add(tp, transpose(tp, matmul(tp, transpose(tp, d1), ps_.use(tp, "epsnet.up2"))), h1);
    Tensor out_tokens = nn::linear(tp, ps_, "epsnet.out", u2);
    return transpose(tp, out_tokens); // [c_lat x 64]
}

// --- samplers ---------------------------------------------------------------

namespace {

Latent gaussian_latent(const ModelConfig& cfg, RngStream& rng) {
    Tensor z = Tensor::zeros({cfg.lat_ch, cfg.lat_tokens()});
    for (int i = 0; i < z.numel(); ++i) z.at(i) = rng.normal();
    return z;
}

Latent guided_eps(EpsNet& net, const NoiseSchedule& s, const Latent& x, int t,
                  const Condition& cond, double guidance) {
    Latent ec = net.forward(nullptr, x, t, cond, s);
    if (guidance == 1.0 || !cond.has_value()) return ec;
    Latent eu = net.forward(nullptr, x, t, std::nullopt, s);
    return cfg_eps(ec, eu, guidance);
}

} // namespace

Latent ddpm_sample(EpsNet& net, const NoiseSchedule& s, const Condition& cond,
                   const SamplerOptions& opt, RngStream& rng) {
    Latent x = gaussian_latent(net.config(), rng);
    for (int t = s.T; t >= 1; --t) {
        Latent eh = guided_eps(net, s, x, t, cond, opt.guidance);
        const double a_t = s.alpha[t - 1];
        const double ab_t = s.ab(t);
        const double coef = s.beta[t - 1] / std::sqrt(1.0 - ab_t);
        Latent next = Tensor::zeros(x.shape);
        for (int i = 0; i < x.numel(); ++i)
            next.at(i) = (x.at(i) - coef * eh.at(i)) / std::sqrt(a_t);
        if (t > 1) {
            const double sigma = std::sqrt(s.beta[t - 1]);
            for (int i = 0; i < next.numel(); ++i) next.at(i) += sigma * rng.normal();
        }
        x = next;
    }
    return x;
}

Latent ddim_step(const NoiseSchedule& s, const Latent& x_t, int t, int t_prev, const Latent& eps_hat) {
    const double ab_t = s.ab(t), ab_p = s.ab(t_prev);
    Latent out = Tensor::zeros(x_t.shape);
    const double sa = std::sqrt(ab_t), sb = std::sqrt(1.0 - ab_t);
    const double pa = std::sqrt(ab_p), pb = std::sqrt(1.0 - ab_p);
    for (int i = 0; i < x_t.numel(); ++i) {
        const double x0 = (x_t.at(i) - sb * eps_hat.at(i)) / sa;
        out.at(i) = pa * x0 + pb * eps_hat.at(i);
    }
    return out;
}

Latent ddim_sample(EpsNet& net, const NoiseSchedule& s, const Condition& cond,
                   const SamplerOptions& opt, RngStream& rng) {
    const int n = opt.n_steps > 0 ? opt.n_steps : s.T;
    if (n > s.T) throw std::invalid_argument("ddim_sample: n_steps exceeds T");
    std::vector<int> taus(n);
    for (int i = 0; i < n; ++i) taus[i] = (i + 1) * s.T / n; // ascending, ends at T
    Latent x = gaussian_latent(net.config(), rng);
    for (int i = n - 1; i >= 0; --i) {
        const int t = taus[i];
        const int t_prev = i > 0 ? taus[i - 1] : 0;
        Latent eh = guided_eps(net, s, x, t, cond, opt.guidance);
        x = ddim_step(s, x, t, t_prev, eh);
    }
    return x;
}

} // namespace unifusion::diff

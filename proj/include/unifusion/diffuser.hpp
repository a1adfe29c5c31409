#pragma once

#include "unifusion/model_config.hpp"
#include "unifusion/nn.hpp"
#include "unifusion/param_store.hpp"
#include "unifusion/rng.hpp"
#include "unifusion/synthdata.hpp"

#include <optional>
#include <vector>

namespace unifusion::diff {

// Latents are [c_lat x (h*w)] tensors.
using Latent = Tensor;

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;        // 1-indexed via beta[t-1]
    std::vector<double> alpha;
    std::vector<double> alpha_bar;   // running product in f64
    double ab(int t) const;          // alpha_bar at t, with ab(0) = 1
};

NoiseSchedule make_schedule(int T, double beta_1, double beta_T);

// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps
Latent forward_noise(const NoiseSchedule& s, const Latent& x0, int t, const Latent& eps);

// Conditioning sequence: adapted query rows, or the learned null row.
// Null is a distinct learned embedding, not a zero vector.
using Condition = std::optional<Tensor>; // nullopt = null condition

Condition drop_condition(const Condition& cond, double p_uncond, RngStream& rng);

// eps_hat = eps_uncond + s (eps_cond - eps_uncond); s == 1 short-circuits to
// the conditional branch so guided and unguided paths agree bitwise.
Latent cfg_eps(const Latent& eps_cond, const Latent& eps_uncond, double s);

// Frozen linear codec: 4x4 average pooling per channel then a fixed seeded
// orthonormal channel map 3 -> c_lat; decode is the transpose map plus
// nearest-neighbor upsampling. Images stay in [0,1] doubles end to end.
class LatentCodec {
public:
    LatentCodec(const ModelConfig& cfg, std::uint64_t seed);
    Latent encode(const synth::ImageF& img) const;
    synth::ImageF decode(const Latent& z) const;

private:
    ModelConfig cfg_;
    Tensor channel_map_; // [c_lat x 3], orthonormal columns
};

// Small encoder-bottleneck-decoder over latent tokens with a timestep
// embedding added at every level and one cross-attention block at the
// bottleneck attending to the condition sequence.
class EpsNet {
public:
    EpsNet(ParamStore& ps, const ModelConfig& cfg);
    void init_params(RngStream& rng);
    Latent forward(Tape* tp, const Latent& x_t, int t, const Condition& cond, const NoiseSchedule& s);
    const ModelConfig& config() const { return cfg_; }

private:
    ParamStore& ps_;
    ModelConfig cfg_;
    Tensor pool1_, pool2_; // fixed pooling maps
};

struct SamplerOptions {
    double guidance = 1.0; // 1 = pure conditional
    int n_steps = 0;       // 0 = full T (DDPM); for DDIM, the step count
};

Latent ddpm_sample(EpsNet& net, const NoiseSchedule& s, const Condition& cond,
                   const SamplerOptions& opt, RngStream& rng);

// One deterministic DDIM update from t to t_prev given the predicted noise.
Latent ddim_step(const NoiseSchedule& s, const Latent& x_t, int t, int t_prev, const Latent& eps_hat);

Latent ddim_sample(EpsNet& net, const NoiseSchedule& s, const Condition& cond,
                   const SamplerOptions& opt, RngStream& rng);

} // namespace unifusion::diff

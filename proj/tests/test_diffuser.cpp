#include "doctest.h"
#include "gradcheck.hpp"

#include "unifusion/diffuser.hpp"
#include "unifusion/model.hpp"
#include "unifusion/objectives.hpp"

#include <cmath>

using namespace unifusion;
using namespace unifusion::diff;

namespace {

ModelConfig desk_config() {
    ModelConfig c;
    c.vocab_size = static_cast<int>(synth::grammar_words().size());
    return c;
}

Latent random_latent(const ModelConfig& c, RngStream& rng) {
    Tensor z = Tensor::zeros({c.lat_ch, c.lat_tokens()});
    for (int i = 0; i < z.numel(); ++i) z.at(i) = rng.normal();
    return z;
}

} // namespace

TEST_CASE("make_schedule arithmetic") {
    NoiseSchedule one = make_schedule(1, 0.1, 0.1);
    CHECK(one.ab(1) == doctest::Approx(0.9).epsilon(1e-15));

    NoiseSchedule two = make_schedule(2, 0.1, 0.2);
    CHECK(two.ab(2) == doctest::Approx(0.72).epsilon(1e-15));
    CHECK(two.ab(0) == 1.0);

    NoiseSchedule desk = make_schedule(50, 1e-4, 0.02);
    for (int t = 2; t <= 50; ++t) CHECK(desk.ab(t) < desk.ab(t - 1));
    CHECK(desk.ab(50) < desk.ab(1));

    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), std::invalid_argument);
}

TEST_CASE("forward_noise closed forms") {
    NoiseSchedule two = make_schedule(2, 0.1, 0.2);
    Latent x0 = Tensor::from({1, 1}, {1.0});
    Latent zero = Tensor::from({1, 1}, {0.0});
    Latent eps = Tensor::from({1, 1}, {1.0});

    Latent noiseless = forward_noise(two, x0, 2, zero);
    CHECK(noiseless.at(0) == doctest::Approx(std::sqrt(0.72)).epsilon(1e-15));

    Latent both = forward_noise(two, x0, 2, eps);
    CHECK(both.at(0) == doctest::Approx(std::sqrt(0.72) + std::sqrt(0.28)).epsilon(1e-15));
    CHECK(both.at(0) == doctest::Approx(1.37768).epsilon(1e-4));

    CHECK_THROWS_AS(forward_noise(two, x0, 3, eps), std::out_of_range);
    CHECK_THROWS_AS(forward_noise(two, x0, 0, eps), std::out_of_range);
}

TEST_CASE("forward_noise empirical variance tracks 1 - alpha_bar") {
    NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
    RngStream rng(21);
    Latent zero = Tensor::from({1, 1}, {0.0});
    for (int t : {5, 25, 50}) {
        double sum = 0.0, sq = 0.0;
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            Latent eps = Tensor::from({1, 1}, {rng.normal()});
            const double v = forward_noise(s, zero, t, eps).at(0);
            sum += v;
            sq += v * v;
        }
        const double var = sq / n - (sum / n) * (sum / n);
        const double expect = 1.0 - s.ab(t);
        CHECK(std::fabs(var - expect) / expect < 0.05);
    }
}

TEST_CASE("latent codec") {
    ModelConfig c = desk_config();
    LatentCodec codec(c, 999);

    // solid image maps to a per-channel constant latent and back
    synth::ImageF solid;
    solid.rgb.assign(32 * 32 * 3, 0.0);
    for (std::size_t i = 0; i < solid.rgb.size(); i += 3) {
        solid.rgb[i] = 0.8;
        solid.rgb[i + 1] = 0.2;
        solid.rgb[i + 2] = 0.4;
    }
    Latent z = codec.encode(solid);
    for (int ch = 0; ch < c.lat_ch; ++ch)
        for (int i = 1; i < c.lat_tokens(); ++i)
            CHECK(z.at(ch, i) == doctest::Approx(z.at(ch, 0)).epsilon(1e-12));
    synth::ImageF back = codec.decode(z);
    for (std::size_t i = 0; i < back.rgb.size(); ++i)
        CHECK(back.rgb[i] == doctest::Approx(solid.rgb[i]).epsilon(1e-9));

    // projection idempotence: encode(decode(encode(x))) == encode(x)
    synth::ImageF img = synth::to_float(synth::render(synth::GarmentSpec::from_id(123), 3));
    Latent z1 = codec.encode(img);
    Latent z2 = codec.encode(codec.decode(z1));
    for (int i = 0; i < z1.numel(); ++i) CHECK(std::fabs(z1.at(i) - z2.at(i)) < 1e-12);
}

TEST_CASE("codec preserves attribute information for 1000 sampled specs") {
    ModelConfig c = desk_config();
    LatentCodec codec(c, 999);
    RngStream rng(22);
    int checked = 0;
    // every spec once, then random (spec, texture seed) draws up to 1000
    for (int id = 0; id < synth::kNumSpecs; ++id) {
        const auto spec = synth::GarmentSpec::from_id(id);
        auto got = synth::attribute_decode(codec.decode(codec.encode(synth::to_float(synth::render(spec, 0)))));
        REQUIRE(got.has_value());
        CHECK(*got == spec);
        ++checked;
    }
    while (checked < 1000) {
        const auto spec = synth::GarmentSpec::from_id(rng.uniform_int(synth::kNumSpecs));
        const std::uint64_t seed = rng.next_u64() % 1000;
        auto got = synth::attribute_decode(codec.decode(codec.encode(synth::to_float(synth::render(spec, seed)))));
        REQUIRE(got.has_value());
        CHECK(*got == spec);
        ++checked;
    }
}

TEST_CASE("drop_condition") {
    RngStream rng(23);
    Condition cond = Tensor::from({1, 2}, {1.0, 2.0});

    RngStream r0(1);
    const auto c0 = r0.counter();
    Condition kept = drop_condition(cond, 0.0, r0);
    CHECK(kept.has_value());
    CHECK(r0.counter() == c0 + 1); // exactly one draw

    Condition null_in = drop_condition(std::nullopt, 0.5, rng);
    CHECK(!null_in.has_value());

    int nulls = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
        if (!drop_condition(cond, 0.1, rng).has_value()) ++nulls;
    const double frac = static_cast<double>(nulls) / n;
    CHECK(frac > 0.085);
    CHECK(frac < 0.115);
}

TEST_CASE("cfg_eps combination") {
    Latent ec = Tensor::from({1, 1}, {1.0});
    Latent eu = Tensor::from({1, 1}, {0.0});
    CHECK(cfg_eps(ec, eu, 1.0).at(0) == 1.0);
    CHECK(cfg_eps(ec, eu, 0.0).at(0) == 0.0);
    CHECK(cfg_eps(ec, eu, 2.0).at(0) == 2.0);

    // affine in s: cfg(a) + cfg(b) == 2 cfg((a+b)/2)
    RngStream rng(24);
    Latent c2 = Tensor::from({2, 2}, {rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    Latent u2 = Tensor::from({2, 2}, {rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    for (auto [a, b] : {std::pair{0.5, 2.5}, std::pair{1.0, 0.0}, std::pair{-1.0, 3.0}}) {
        Latent la = cfg_eps(c2, u2, a), lb = cfg_eps(c2, u2, b), lmid = cfg_eps(c2, u2, (a + b) / 2);
        for (int i = 0; i < 4; ++i) CHECK(std::fabs(la.at(i) + lb.at(i) - 2 * lmid.at(i)) < 1e-12);
    }
}

TEST_CASE("eps net shape, sensitivity and gradients") {
    ModelConfig c = desk_config();
    c.eps_ch = 4; // small for the finite-difference sweep
    ParamStore ps;
    EpsNet net(ps, c);
    RngStream rng(25);
    net.init_params(rng);
    NoiseSchedule s = make_schedule(c.T, c.beta_1, c.beta_T);

    Latent x = random_latent(c, rng);
    Tensor cond = gradcheck::random_tensor({c.n_q, c.d_cond}, rng);
    Latent out = net.forward(nullptr, x, 7, cond, s);
    CHECK(out.shape == x.shape);

    // changing the condition changes the output
    Tensor cond2 = cond;
    cond2.data = std::make_shared<std::vector<double>>(*cond.data);
    (*cond2.data)[3] += 0.5;
    Latent out2 = net.forward(nullptr, x, 7, cond2, s);
    CHECK(*out2.data != *out.data);

    // null condition uses the learned row and still has the right shape
    Latent outn = net.forward(nullptr, x, 7, std::nullopt, s);
    CHECK(outn.shape == x.shape);
    CHECK(*outn.data != *out.data);

    CHECK_THROWS_AS(net.forward(nullptr, x, 0, cond, s), std::out_of_range);
    CHECK_THROWS_AS(net.forward(nullptr, x, c.T + 1, cond, s), std::out_of_range);

    // gradient of a scalar loss w.r.t. every net parameter
    ps.set_trainable_prefixes({"epsnet"});
    Latent target = random_latent(c, rng);
    auto res = gradcheck::max_rel_error_params(ps, [&](Tape* tp) {
        return mse(tp, net.forward(tp, x, 7, cond, s), target);
    });
    INFO("worst " << res.worst_param);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("q2i loss oracle identities") {
    ModelConfig c = desk_config();
    NoiseSchedule s = make_schedule(c.T, c.beta_1, c.beta_T);
    RngStream rng(26);
    Latent x0 = random_latent(c, rng);
    Latent eps = random_latent(c, rng);

    // exact-noise oracle: loss is zero
    loss::EpsFn oracle = [&eps](Tape*, const Latent&, int, const Condition&) { return eps; };
    CHECK(loss::q2i_loss(nullptr, s, oracle, x0, std::nullopt, 13, eps).value() == 0.0);

    // zero predictor: loss is mean(eps^2)
    loss::EpsFn zero = [&eps](Tape*, const Latent&, int, const Condition&) {
        return Tensor::zeros(eps.shape);
    };
    double m2 = 0.0;
    for (int i = 0; i < eps.numel(); ++i) m2 += eps.at(i) * eps.at(i);
    m2 /= eps.numel();
    CHECK(loss::q2i_loss(nullptr, s, zero, x0, std::nullopt, 13, eps).value()
          == doctest::Approx(m2).epsilon(1e-15));

    // 4-element worked example
    NoiseSchedule s4 = make_schedule(4, 0.1, 0.2);
    Latent x4 = Tensor::from({1, 4}, {0.3, -0.2, 0.1, 0.5});
    Latent e4 = Tensor::from({1, 4}, {1.0, -1.0, 0.5, -0.5});
    loss::EpsFn zero4 = [](Tape*, const Latent& xt, int, const Condition&) {
        return Tensor::zeros(xt.shape);
    };
    CHECK(loss::q2i_loss(nullptr, s4, zero4, x4, std::nullopt, 2, e4).value()
          == doctest::Approx(0.625).epsilon(1e-15));
}

TEST_CASE("ddim determinism and one-step inversion") {
    ModelConfig c = desk_config();
    c.eps_ch = 4;
    ParamStore ps;
    EpsNet net(ps, c);
    RngStream rng(27);
    net.init_params(rng);
    NoiseSchedule s = make_schedule(c.T, c.beta_1, c.beta_T);
    Tensor cond = gradcheck::random_tensor({c.n_q, c.d_cond}, rng);

    SamplerOptions opt;
    opt.guidance = 2.0;
    opt.n_steps = 10;
    RngStream r1(5), r2(5);
    Latent a = ddim_sample(net, s, cond, opt, r1);
    Latent b = ddim_sample(net, s, cond, opt, r2);
    CHECK(*a.data == *b.data); // bitwise

    // ddpm with a fixed seed is reproducible too
    SamplerOptions dopt;
    RngStream r3(6), r4(6);
    Latent p1 = ddpm_sample(net, s, cond, dopt, r3);
    Latent p2 = ddpm_sample(net, s, cond, dopt, r4);
    CHECK(*p1.data == *p2.data);

    // exact-noise oracle inverts one forward step to 1e-10
    Latent x0 = random_latent(c, rng);
    Latent eps = random_latent(c, rng);
    Latent x1 = forward_noise(s, x0, 1, eps);
    Latent rec = ddim_step(s, x1, 1, 0, eps);
    for (int i = 0; i < x0.numel(); ++i) CHECK(std::fabs(rec.at(i) - x0.at(i)) < 1e-10);
}

TEST_CASE("guidance 1 equals the pure conditional path bitwise") {
    ModelConfig c = desk_config();
    c.eps_ch = 4;
    ParamStore ps;
    EpsNet net(ps, c);
    RngStream rng(28);
    net.init_params(rng);
    NoiseSchedule s = make_schedule(c.T, c.beta_1, c.beta_T);
    Tensor cond = gradcheck::random_tensor({c.n_q, c.d_cond}, rng);

    // manual pure-conditional DDIM with the same initial noise
    SamplerOptions opt;
    opt.guidance = 1.0;
    opt.n_steps = 8;
    RngStream r1(9);
    Latent guided = ddim_sample(net, s, cond, opt, r1);

    RngStream r2(9);
    Latent x = Tensor::zeros({c.lat_ch, c.lat_tokens()});
    for (int i = 0; i < x.numel(); ++i) x.at(i) = r2.normal();
    std::vector<int> taus(opt.n_steps);
    for (int i = 0; i < opt.n_steps; ++i) taus[i] = (i + 1) * s.T / opt.n_steps;
    for (int i = opt.n_steps - 1; i >= 0; --i) {
        Latent eh = net.forward(nullptr, x, taus[i], cond, s);
        x = ddim_step(s, x, taus[i], i > 0 ? taus[i - 1] : 0, eh);
    }
    CHECK(*guided.data == *x.data); // bitwise
}

#pragma once

#include "unifusion/captioner.hpp"
#include "unifusion/diffuser.hpp"
#include "unifusion/encoders.hpp"
#include "unifusion/model_config.hpp"
#include "unifusion/param_store.hpp"

#include <cstdint>

namespace unifusion {

// The full artifact: one parameter store shared by the multimodal encoder,
// the captioner and the diffusion stack. LoRA is applied at construction so
// adapters exist from step zero and live in every checkpoint.
struct Model {
    ModelConfig cfg;
    ParamStore store;
    enc::MultimodalEncoder encoder;
    lm::Captioner captioner;
    diff::LatentCodec codec;
    diff::EpsNet epsnet;
    diff::NoiseSchedule schedule;

    Model(ModelConfig config, std::uint64_t init_seed);

    // phase-2 warm start: the target-image bank starts from the phase-1 bank
    void init_bank_q_t_from_q();
};

} // namespace unifusion

#include "unifusion/model.hpp"

namespace unifusion {

namespace {
constexpr std::uint64_t kCodecSeed = 0xC0DEC; // frozen part of the artifact

ModelConfig with_vocab(ModelConfig cfg) {
    if (cfg.vocab_size == 0) cfg.vocab_size = static_cast<int>(synth::grammar_words().size());
    return cfg;
}
} // namespace

Model::Model(ModelConfig config, std::uint64_t init_seed)
    : cfg(with_vocab(std::move(config))),
      encoder(store, cfg),
      captioner(store, cfg, lm::Vocab::from_grammar()),
      codec(cfg, kCodecSeed),
      epsnet(store, cfg),
      schedule(diff::make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)) {
    RngStream rng = RngStream::keyed(init_seed, "model_init");
    encoder.init_params(rng);
    captioner.init_params(rng);
    epsnet.init_params(rng);
    lm::LoRAConfig lora;
    lora.rank = cfg.lora_rank;
    lora.alpha = cfg.lora_alpha;
    captioner.apply_lora(lora, rng);
}

void Model::init_bank_q_t_from_q() {
    Tensor& qt = store.param("queries.q_t");
    const Tensor& q = store.param("queries.q");
    *qt.data = *q.data;
}

} // namespace unifusion

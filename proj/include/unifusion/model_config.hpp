#pragma once

namespace unifusion {

// Desk-scale model dimensions. Larger values (the 32-query, 768-dim regime)
// are accepted config values; these defaults keep exhaustive oracles cheap.
struct ModelConfig {
    // multimodal encoder
    int n_q = 4;
    int d_model = 32;
    int n_blocks = 2;
    int n_heads = 2;
    int d_img = 32;
    int d_e = 16;
    int d_itm = 16;
    int image_size = 32;
    int patch = 4;
    int text_max_len = 32;
    int vocab_size = 0; // filled from the grammar

    // captioner
    int d_lm = 32;
    int lm_blocks = 2;
    int lm_heads = 2;
    int lm_max_len = 32;
    int lora_rank = 4;
    double lora_alpha = 8.0;

    // diffusion
    int d_cond = 16;
    int lat_ch = 4;
    int lat_hw = 8;
    int eps_ch = 16;
    int eps_heads = 1;
    int T = 50;
    double beta_1 = 0.02;
    double beta_T = 0.35;
    double p_uncond = 0.1;
    double guidance = 2.0;

    int n_patches() const { return (image_size / patch) * (image_size / patch); }
    int patch_dim() const { return patch * patch * 3; }
    int lat_tokens() const { return lat_hw * lat_hw; }
};

} // namespace unifusion

#pragma once

#include "unifusion/model_config.hpp"
#include "unifusion/nn.hpp"
#include "unifusion/param_store.hpp"
#include "unifusion/synthdata.hpp"

#include <map>
#include <string>
#include <vector>

namespace unifusion::lm {

// Closed vocabulary over the caption grammar. Index = line number in the
// vocabulary file written by the dataset generator.
class Vocab {
public:
    static Vocab from_grammar();
    static Vocab from_file(const std::string& path);

    int size() const { return static_cast<int>(words_.size()); }
    int id(const std::string& word) const; // unknown-token error
    const std::string& word(int id) const;

    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

    int pad() const { return pad_; }
    int bos() const { return bos_; }
    int eos() const { return eos_; }
    int img_open() const { return img_open_; }
    int img_close() const { return img_close_; }
    int user() const { return user_; }
    int assistant() const { return assistant_; }

private:
    explicit Vocab(std::vector<std::string> words);
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
    int pad_ = 0, bos_ = 0, eos_ = 0, img_open_ = 0, img_close_ = 0, user_ = 0, assistant_ = 0;
};

struct LoRAConfig {
    int rank = 4;
    double alpha = 8.0;
    std::vector<std::string> target_patterns = {"lm."}; // substring match on layer names
    double scale() const { return alpha / rank; }
};

// Prompt layout is fixed: USER, IMG_OPEN, <n_q soft rows>, IMG_CLOSE,
// instruction tokens, ASSISTANT, then the caption.
struct RenderedPrompt {
    std::vector<int> tokens; // token ids surrounding the soft block
    int soft_insert = 2;     // soft rows sit after tokens[0..soft_insert)
};

RenderedPrompt render_prompt(const Vocab& v, synth::CaptionStyle style);
const char* instruction_text(synth::CaptionStyle style);

struct GenerateResult {
    std::string text;
    bool truncated = false;
};

// Decoder-only transformer consuming adapted query embeddings as a soft
// prompt. Token positions attend causally over tokens and fully over the
// prompt block; prompt positions attend only within the prompt, so token
// logits never leak information backwards.
class Captioner {
public:
    Captioner(ParamStore& ps, const ModelConfig& cfg, Vocab vocab)
        : ps_(ps), cfg_(cfg), vocab_(std::move(vocab)) {}

    void init_params(RngStream& rng);

    // logits at token positions only, in token order; soft may be empty
    Tensor lm_forward(Tape* tp, const Tensor& soft_prompt, const std::vector<int>& tokens,
                      int soft_insert = 0);

    // Eq-style autoregressive caption loss: mean NLL over the caption tokens
    // plus the terminal EOS, prompt and instruction positions unscored.
    Tensor score_caption(Tape* tp, const Tensor& soft_prompt, synth::CaptionStyle style,
                         const std::vector<int>& caption_tokens);

    GenerateResult generate(const Tensor& soft_prompt, synth::CaptionStyle style, int max_len);

    void apply_lora(const LoRAConfig& cfg, RngStream& rng);
    void merge_lora();
    const nn::LoraSet& lora() const { return lora_; }
    std::vector<std::string> linear_layers() const;

    const Vocab& vocab() const { return vocab_; }

private:
    ParamStore& ps_;
    ModelConfig cfg_;
    Vocab vocab_;
    nn::LoraSet lora_;
};

} // namespace unifusion::lm

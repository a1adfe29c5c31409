#include "unifusion/captioner.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace unifusion::lm {

namespace {
const double kInf = std::numeric_limits<double>::infinity();
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (int i = 0; i < static_cast<int>(words_.size()); ++i) {
        if (!index_.emplace(words_[i], i).second)
            throw std::invalid_argument("duplicate vocabulary word: " + words_[i]);
    }
    pad_ = id("[pad]");
    bos_ = id("[bos]");
    eos_ = id("[eos]");
    img_open_ = id("[img]");
    img_close_ = id("[/img]");
    user_ = id("[user]");
    assistant_ = id("[assistant]");
}

Vocab Vocab::from_grammar() { return Vocab(synth::grammar_words()); }

Vocab Vocab::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) words.push_back(line);
    return Vocab(std::move(words));
}

int Vocab::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::out_of_range("unknown token: \"" + word + "\"");
    return it->second;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id outside vocabulary: " + std::to_string(id));
    return words_[id];
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t sp = text.find(' ', pos);
        if (sp == std::string::npos) sp = text.size();
        if (sp > pos) out.push_back(id(text.substr(pos, sp - pos)));
        pos = sp + 1;
    }
    return out;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

const char* instruction_text(synth::CaptionStyle style) {
    switch (style) {
    case synth::CaptionStyle::brief: return "short description";
    case synth::CaptionStyle::professional: return "write a detailed and professional description for the cloth";
    case synth::CaptionStyle::detailed: return "describe the cloth style color design and other key points";
    }
    return "";
}

RenderedPrompt render_prompt(const Vocab& v, synth::CaptionStyle style) {
    RenderedPrompt p;
    p.tokens = {v.user(), v.img_open()};
    p.soft_insert = 2;
    p.tokens.push_back(v.img_close());
    for (int t : v.tokenize(instruction_text(style))) p.tokens.push_back(t);
    p.tokens.push_back(v.assistant());
    return p;
}

void Captioner::init_params(RngStream& rng) {
    const auto& c = cfg_;
    ps_.create_normal("lm.tok_emb", {vocab_.size(), c.d_lm}, 0.1, rng);
    ps_.create_normal("lm.pos_emb", {c.lm_max_len + c.n_q, c.d_lm}, 0.1, rng);
    for (int b = 0; b < c.lm_blocks; ++b) {
        const std::string p = "lm.b" + std::to_string(b);
        nn::init_layernorm(ps_, p + ".ln1", c.d_lm);
        nn::init_attention(ps_, p + ".attn", c.d_lm, c.d_lm, rng);
        nn::init_layernorm(ps_, p + ".ln2", c.d_lm);
        nn::init_ffn(ps_, p + ".ffn", c.d_lm, 4 * c.d_lm, rng);
    }
    nn::init_layernorm(ps_, "lm.lnf", c.d_lm);
    nn::init_linear(ps_, "lm.head", c.d_lm, vocab_.size(), rng);
}

std::vector<std::string> Captioner::linear_layers() const {
    std::vector<std::string> out;
    for (int b = 0; b < cfg_.lm_blocks; ++b) {
        const std::string p = "lm.b" + std::to_string(b);
        for (const char* s : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".ffn.w1", ".ffn.w2"})
            out.push_back(p + s);
    }
    out.push_back("lm.head");
    return out;
}

void Captioner::apply_lora(const LoRAConfig& cfg, RngStream& rng) {
    lora_.rank = cfg.rank;
    lora_.scale = cfg.scale();
    for (const std::string& layer : linear_layers()) {
        bool hit = false;
        for (const auto& pat : cfg.target_patterns)
            if (layer.find(pat) != std::string::npos) hit = true;
        if (!hit) continue;
        nn::lora_apply(ps_, layer, cfg.rank, rng);
        lora_.layers.insert(layer);
    }
}

void Captioner::merge_lora() {
    for (const std::string& layer : lora_.layers) nn::lora_merge(ps_, layer, lora_.scale);
    lora_ = nn::LoraSet{};
}

Tensor Captioner::lm_forward(Tape* tp, const Tensor& soft_prompt, const std::vector<int>& tokens,
                             int soft_insert) {
    const auto& c = cfg_;
    const int n_tok = static_cast<int>(tokens.size());
    const int n_soft = soft_prompt.numel() > 0 ? soft_prompt.rows() : 0;
    if (n_tok > c.lm_max_len)
        throw std::invalid_argument("lm_forward: sequence of " + std::to_string(n_tok) +
                                    " tokens exceeds max_len " + std::to_string(c.lm_max_len));
    if (n_tok == 0) throw std::invalid_argument("lm_forward: no token positions");
    if (soft_insert < 0 || soft_insert > n_tok)
        throw std::invalid_argument("lm_forward: bad soft_insert");

    const int s = n_tok + n_soft;
    Tensor emb = embedding_lookup(tp, ps_.use(tp, "lm.tok_emb"), tokens);
    Tensor x;
    if (n_soft == 0) {
        x = emb;
    } else if (soft_insert == 0) {
        x = concat_rows(tp, {soft_prompt, emb});
    } else if (soft_insert == n_tok) {
        x = concat_rows(tp, {emb, soft_prompt});
    } else {
        x = concat_rows(tp, {slice_rows(tp, emb, 0, soft_insert), soft_prompt,
                             slice_rows(tp, emb, soft_insert, n_tok - soft_insert)});
    }
    x = add(tp, x, slice_rows(tp, ps_.use(tp, "lm.pos_emb"), 0, s));

    // causal over tokens, full over the prompt block; the prompt itself sees
    // only the prompt
    Tensor mask = Tensor::zeros({s, s});
    auto is_soft = [&](int i) { return i >= soft_insert && i < soft_insert + n_soft; };
    for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j) {
            bool allowed;
            if (is_soft(i)) {
                allowed = is_soft(j);
            } else if (is_soft(j)) {
                allowed = true;
            } else {
                allowed = j <= i;
            }
            if (!allowed) mask.at(i * s + j) = -kInf;
        }

    for (int b = 0; b < c.lm_blocks; ++b) {
        const std::string p = "lm.b" + std::to_string(b);
        Tensor h = nn::layer_norm(tp, ps_, p + ".ln1", x);
        x = add(tp, x, nn::attention(tp, ps_, p + ".attn", h, h, &mask, c.lm_heads, &lora_));
        Tensor h2 = nn::layer_norm(tp, ps_, p + ".ln2", x);
        x = add(tp, x, nn::ffn(tp, ps_, p + ".ffn", h2, &lora_));
    }

    Tensor tok_rows;
    if (n_soft == 0) {
        tok_rows = x;
    } else if (soft_insert == 0) {
        tok_rows = slice_rows(tp, x, n_soft, n_tok);
    } else if (soft_insert == n_tok) {
        tok_rows = slice_rows(tp, x, 0, n_tok);
    } else {
        tok_rows = concat_rows(tp, {slice_rows(tp, x, 0, soft_insert),
                                    slice_rows(tp, x, soft_insert + n_soft, n_tok - soft_insert)});
    }
    if (c.lm_blocks > 0) tok_rows = nn::layer_norm(tp, ps_, "lm.lnf", tok_rows);
    return nn::linear(tp, ps_, "lm.head", tok_rows, &lora_);
}

Tensor Captioner::score_caption(Tape* tp, const Tensor& soft_prompt, synth::CaptionStyle style,
                                const std::vector<int>& caption_tokens) {
    if (caption_tokens.empty()) throw std::invalid_argument("score_caption: empty caption");
    RenderedPrompt p = render_prompt(vocab_, style);
    const int prompt_len = static_cast<int>(p.tokens.size());
    std::vector<int> tokens = p.tokens;
    tokens.insert(tokens.end(), caption_tokens.begin(), caption_tokens.end());
    tokens.push_back(vocab_.eos());
    Tensor logits = lm_forward(tp, soft_prompt, tokens, p.soft_insert);
    // position prompt_len-1 (ASSISTANT) predicts w_1; ...; w_L predicts EOS
    const int n_scored = static_cast<int>(caption_tokens.size()) + 1;
    Tensor rows = slice_rows(tp, logits, prompt_len - 1, n_scored);
    std::vector<int> targets(caption_tokens);
    targets.push_back(vocab_.eos());
    return cross_entropy_logits(tp, rows, targets);
}

GenerateResult Captioner::generate(const Tensor& soft_prompt, synth::CaptionStyle style, int max_len) {
    RenderedPrompt p = render_prompt(vocab_, style);
    std::vector<int> tokens = p.tokens;
    std::vector<int> caption;
    GenerateResult res;
    while (static_cast<int>(caption.size()) < max_len) {
        if (static_cast<int>(tokens.size()) >= cfg_.lm_max_len) break;
        Tensor logits = lm_forward(nullptr, soft_prompt, tokens, p.soft_insert);
        const int last = logits.rows() - 1;
        int best = 0;
        double bv = logits.at(last, 0);
        for (int j = 1; j < logits.cols(); ++j)
            if (logits.at(last, j) > bv) {
                bv = logits.at(last, j);
                best = j;
            }
        if (best == vocab_.eos()) {
            res.text = vocab_.detokenize(caption);
            return res;
        }
        caption.push_back(best);
        tokens.push_back(best);
    }
    res.text = vocab_.detokenize(caption);
    res.truncated = true;
    return res;
}

} // namespace unifusion::lm

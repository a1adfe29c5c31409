#pragma once

#include "unifusion/rng.hpp"
#include "unifusion/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace unifusion {

// Named parameter registry. The trainable mask implements the freeze policy:
// freezing flips the mask, never the values. Names are dotted paths and
// prefix matching stops at segment boundaries, so "queries.q" does not
// capture "queries.q_r".
class ParamStore {
public:
    Tensor& create(const std::string& name, std::vector<int> shape);
    Tensor& create_normal(const std::string& name, std::vector<int> shape, double stddev, RngStream& rng);
    Tensor& create_full(const std::string& name, std::vector<int> shape, double value);

    bool has(const std::string& name) const { return params_.count(name) > 0; }
    void remove(const std::string& name);
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;

    // Places the parameter on the tape; the leaf is differentiable only
    // when the parameter is trainable. Repeated use within one tape
    // returns the same leaf so gradients pool correctly.
    Tensor use(Tape* tp, const std::string& name);
    void begin_tape(Tape* tp);

    void set_trainable_prefixes(const std::vector<std::string>& prefixes);
    bool trainable(const std::string& name) const;

    void zero_grads();
    bool has_grad(const std::string& name) const { return grads_.count(name) > 0; }
    void install_zero_grad(const std::string& name, std::size_t n) { grads_[name].assign(n, 0.0); }
    std::vector<double>& grad(const std::string& name);
    // Copies accumulated leaf gradients of the current tape into the store.
    void collect_grads(Tape& tape);

    const std::map<std::string, Tensor>& all() const { return params_; }
    std::map<std::string, Tensor>& all() { return params_; }
    std::vector<std::string> names() const;

    static bool prefix_matches(const std::string& prefix, const std::string& name);

private:
    std::map<std::string, Tensor> params_;
    std::vector<std::string> trainable_prefixes_;
    std::map<std::string, std::vector<double>> grads_;

    Tape* active_tape_ = nullptr;
    std::map<std::string, int> leaf_ids_;
};

// Convenience: backward through the tape and collect into the store.
void backward(Tape& tape, const Tensor& loss, ParamStore& store);

} // namespace unifusion

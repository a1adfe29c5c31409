#include "unifusion/param_store.hpp"

#include <stdexcept>

namespace unifusion {

Tensor& ParamStore::create(const std::string& name, std::vector<int> shape) {
    if (params_.count(name))
        throw std::invalid_argument("param already exists: " + name);
    params_[name] = Tensor::zeros(std::move(shape));
    return params_[name];
}

Tensor& ParamStore::create_normal(const std::string& name, std::vector<int> shape, double stddev, RngStream& rng) {
    Tensor& t = create(name, std::move(shape));
    for (int i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * stddev;
    return t;
}

Tensor& ParamStore::create_full(const std::string& name, std::vector<int> shape, double value) {
    Tensor& t = create(name, std::move(shape));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
}

void ParamStore::remove(const std::string& name) {
    params_.erase(name);
    grads_.erase(name);
    leaf_ids_.erase(name);
}

Tensor& ParamStore::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown param: " + name);
    return it->second;
}

const Tensor& ParamStore::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown param: " + name);
    return it->second;
}

void ParamStore::begin_tape(Tape* tp) {
    active_tape_ = tp;
    leaf_ids_.clear();
}

Tensor ParamStore::use(Tape* tp, const std::string& name) {
    Tensor& p = param(name);
    if (!tp || !trainable(name)) {
        Tensor t = p;
        t.requires_grad = false;
        t.node = -1;
        return t;
    }
    if (tp != active_tape_) begin_tape(tp);
    auto it = leaf_ids_.find(name);
    if (it != leaf_ids_.end()) {
        Tensor t = p;
        t.requires_grad = true;
        t.node = it->second;
        return t;
    }
    Tensor t = leaf(*tp, p);
    leaf_ids_[name] = t.node;
    return t;
}

void ParamStore::set_trainable_prefixes(const std::vector<std::string>& prefixes) {
    trainable_prefixes_ = prefixes;
}

bool ParamStore::prefix_matches(const std::string& prefix, const std::string& name) {
    if (name.size() < prefix.size()) return false;
    if (name.compare(0, prefix.size(), prefix) != 0) return false;
    return name.size() == prefix.size() || name[prefix.size()] == '.';
}

bool ParamStore::trainable(const std::string& name) const {
    for (const auto& p : trainable_prefixes_)
        if (prefix_matches(p, name)) return true;
    return false;
}

void ParamStore::zero_grads() { grads_.clear(); }

std::vector<double>& ParamStore::grad(const std::string& name) {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw std::out_of_range("no gradient for param: " + name);
    return it->second;
}

void ParamStore::collect_grads(Tape& tape) {
    for (const auto& [name, node_id] : leaf_ids_) {
        auto& g = tape.grad(node_id);
        auto it = grads_.find(name);
        if (it == grads_.end()) {
            grads_[name] = g;
        } else {
            auto& dst = it->second;
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
        g.assign(g.size(), 0.0);
    }
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
}

void backward(Tape& tape, const Tensor& loss, ParamStore& store) {
    backward(tape, loss);
    store.collect_grads(tape);
}

} // namespace unifusion

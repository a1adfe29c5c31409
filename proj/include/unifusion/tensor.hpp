#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace unifusion {

// Dense row-major f64 tensor. Data is shared; primitives always allocate a
// fresh output buffer, so tensors without a tape handle are immutable in
// practice and safe to share across threads.
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    int node = -1; // tape handle, -1 when constant

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> values);
    static Tensor scalar(double value);

    int numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    // rank-2 accessors; rank-1 tensors behave as a single row
    int rows() const;
    int cols() const;

    double value() const; // numel()==1 convenience
    double& at(int i) { return (*data)[i]; }
    double at(int i) const { return (*data)[i]; }
    double& at(int r, int c) { return (*data)[r * cols() + c]; }
    double at(int r, int c) const { return (*data)[r * cols() + c]; }
};

std::string shape_str(const std::vector<int>& shape);

// Reverse-mode tape. Nodes are appended in forward order and pulled in
// strictly decreasing index during backward, which is a valid topological
// order by construction.
class Tape {
public:
    struct Node {
        const char* op = "";
        std::vector<int> inputs;
        std::vector<double> grad;            // adjoint buffer, lazily sized
        int out_size = 0;
        std::function<void(Tape&)> pull;     // empty for leaves
    };

    int push(const char* op, int out_size, std::vector<int> inputs,
             std::function<void(Tape&)> pull);
    int leaf(int out_size);
    void set_pull(int id, std::function<void(Tape&)> pull);

    std::vector<double>& grad(int id);
    const Node& node(int id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss)=1 and pulls every node below it. Leaf gradients
    // accumulate across repeated calls; intermediate buffers are released.
    void backward_from(int loss_node);

private:
    std::vector<Node> nodes_;
};

// Registers `t` on the tape as a differentiable leaf and returns the handle.
Tensor leaf(Tape& tape, const Tensor& t);

// Scalar-loss entry point: rank error unless loss.numel()==1.
void backward(Tape& tape, const Tensor& loss);

// --- primitive catalog -------------------------------------------------
// The catalog below is closed: model code composes these and must not add
// differentiable primitives elsewhere. Every entry has its analytic
// gradient checked against central finite differences in the test suite.

Tensor add(Tape* tp, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tp, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tp, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tp, const Tensor& a, double c);
Tensor mul_scalar(Tape* tp, const Tensor& a, const Tensor& s); // s: 1 element
Tensor add_rowvec(Tape* tp, const Tensor& a, const Tensor& v); // broadcast over rows
Tensor matmul(Tape* tp, const Tensor& a, const Tensor& b);
Tensor transpose(Tape* tp, const Tensor& a);
Tensor reshape(Tape* tp, const Tensor& a, std::vector<int> shape);
Tensor gelu(Tape* tp, const Tensor& a); // tanh approximation, fixed
Tensor softmax_masked(Tape* tp, const Tensor& logits, const Tensor* mask);
Tensor layernorm(Tape* tp, const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor embedding_lookup(Tape* tp, const Tensor& table, const std::vector<int>& ids);
Tensor concat_rows(Tape* tp, const std::vector<Tensor>& parts);
Tensor slice_rows(Tape* tp, const Tensor& a, int r0, int nrows);
Tensor concat_cols(Tape* tp, const std::vector<Tensor>& parts);
Tensor slice_cols(Tape* tp, const Tensor& a, int c0, int ncols);
Tensor row_max(Tape* tp, const Tensor& a); // [m x n] -> [m], ties to lowest index
Tensor mean_all(Tape* tp, const Tensor& a);
Tensor sum_all(Tape* tp, const Tensor& a);
Tensor mse(Tape* tp, const Tensor& a, const Tensor& b);
Tensor cross_entropy_logits(Tape* tp, const Tensor& logits, const std::vector<int>& targets);
Tensor exp_elem(Tape* tp, const Tensor& a);
Tensor clamp_max(Tape* tp, const Tensor& a, double hi);
Tensor l2_normalize_rows(Tape* tp, const Tensor& a);

} // namespace unifusion

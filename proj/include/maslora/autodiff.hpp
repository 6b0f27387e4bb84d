#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "maslora/mat.hpp"

namespace maslora {

// Reverse-mode autodiff over Mat values. Graphs are built per forward
// pass and torn down when the last Node handle goes away; parameter
// nodes outlive graphs, so their grads accumulate across backward()
// calls until zero_grad().
struct NodeImpl {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeImpl>> parents;
    std::function<void(NodeImpl&)> backward_fn;
};

struct Node {
    std::shared_ptr<NodeImpl> impl;

    Node() = default;
    explicit Node(std::shared_ptr<NodeImpl> p) : impl(std::move(p)) {}

    static Node param(Mat m);     // trainable leaf
    static Node constant(Mat m);  // frozen leaf

    bool defined() const { return impl != nullptr; }
    const Mat& value() const { return impl->value; }
    Mat& value_mut() { return impl->value; }
    const Mat& grad() const { return impl->grad; }
    Mat& grad_mut() { return impl->grad; }
    bool requires_grad() const { return impl->requires_grad; }
    void zero_grad();
};

// While alive on this thread, ops produce detached nodes (no parents,
// no backward rule). Nestable.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool active();

private:
    bool prev_;
};

Node matmul(const Node& a, const Node& b);
Node add(const Node& a, const Node& b);
Node scale(const Node& a, double s);
Node transpose(const Node& a);
Node relu(const Node& a);
Node softmax_rows(const Node& a);
Node layer_norm(const Node& a, const Node& gain, const Node& bias, double eps);

// Row t of the result is row ids[t] of table; gradient scatters back
// into the gathered rows.
Node gather_rows(const Node& table, const std::vector<int>& ids);
Node slice_cols(const Node& a, int c0, int c1);
Node concat_cols(const std::vector<Node>& parts);

// 1x1 node: mean negative log-softmax over non-pad positions.
Node cross_entropy(const Node& logits, const std::vector<int>& targets, int pad_id);
Node sum_all(const Node& a);

// Reverse topological traversal from a scalar loss; accumulates into
// every reachable requires-grad node, leaves frozen nodes untouched.
void backward(const Node& loss);

}  // namespace maslora

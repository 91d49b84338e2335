#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "mmgen/core/error.hpp"
#include "mmgen/core/tensor.hpp"

namespace mmgen {

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

template <typename T>
class Graph;

// Handle into a Graph's tape.
template <typename T>
struct Var {
    Graph<T>* g = nullptr;
    int id = -1;

    const Tensor<T>& val() const;
    bool valid() const { return g != nullptr && id >= 0; }
};

// Reverse-mode tape. One Graph per forward pass; parameter leaves are
// referenced, not copied, so the underlying store must outlive the graph and
// stay unmodified until backward() has run.
template <typename T>
class Graph {
public:
    struct Node {
        Tensor<T> owned;                 // set for computed nodes
        const Tensor<T>* ext = nullptr;  // set for referenced leaves
        Tensor<T> grad;                  // lazily allocated
        std::function<void()> back;
        bool needs_grad = false;
    };

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    const Tensor<T>& v(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.ext ? *n.ext : n.owned;
    }

    Tensor<T>& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(v(id).shape);
        return n.grad;
    }

    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    Var<T> input(Tensor<T> t) { return make_owned(std::move(t), false); }

    // Leaf that participates in backward (for gradient tests on activations).
    Var<T> input_grad(Tensor<T> t) { return make_owned(std::move(t), true); }

    // Referenced leaf; `tensor` must outlive the graph. Named leaves show up
    // in for_each_param_grad().
    Var<T> leaf(const Tensor<T>* tensor, bool needs_grad, const std::string& name = "") {
        Node n;
        n.ext = tensor;
        n.needs_grad = grad_enabled_ && needs_grad;
        nodes_.push_back(std::move(n));
        const int id = static_cast<int>(nodes_.size()) - 1;
        if (!name.empty() && nodes_.back().needs_grad) bindings_.push_back({name, id});
        return {this, id};
    }

    Var<T> make_owned(Tensor<T> t, bool needs_grad) {
        Node n;
        n.owned = std::move(t);
        n.needs_grad = grad_enabled_ && needs_grad;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    // Adds a computed node. `make_back(y)` builds the backward closure once
    // the output handle exists; it is skipped entirely in no-grad graphs.
    template <typename MakeBack>
    Var<T> op(Tensor<T> out, bool needs_grad, MakeBack&& make_back) {
        Node n;
        n.owned = std::move(out);
        n.needs_grad = grad_enabled_ && needs_grad;
        nodes_.push_back(std::move(n));
        Var<T> y{this, static_cast<int>(nodes_.size()) - 1};
        if (nodes_.back().needs_grad) nodes_.back().back = make_back(y);
        return y;
    }

    void backward(Var<T> loss) {
        if (!grad_enabled_) throw Error("backward() on a no-grad graph");
        if (v(loss.id).numel() != 1) throw ShapeError("backward: loss must be scalar");
        grad_buf(loss.id).fill(T(1));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.needs_grad || n.grad.numel() == 0 || !n.back) continue;
            n.back();
        }
    }

    const Tensor<T>& grad(Var<T> x) { return grad_buf(x.id); }

    // Visits accumulated gradients of named leaves. A parameter bound several
    // times in one graph is visited once per binding; callers accumulate.
    template <typename F>
    void for_each_param_grad(F&& f) {
        for (const auto& b : bindings_) {
            Node& n = nodes_[static_cast<size_t>(b.node)];
            if (n.grad.numel() != 0) f(b.name, n.grad);
        }
    }

    size_t size() const { return nodes_.size(); }

    // When set, attention ops push their probability rows here (test probe).
    std::vector<Tensor<T>>* attn_probe = nullptr;

private:
    struct Binding {
        std::string name;
        int node;
    };

    std::deque<Node> nodes_;
    std::vector<Binding> bindings_;
    bool grad_enabled_;
};

template <typename T>
const Tensor<T>& Var<T>::val() const {
    return g->v(id);
}

template <typename T>
T scalar(Var<T> x) {
    return x.val().data[0];
}

}  // namespace mmgen

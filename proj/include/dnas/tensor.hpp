#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dnas {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {
inline bool& grad_disabled() {
    thread_local bool flag = false;
    return flag;
}
} // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
    ~NoGradGuard() { detail::grad_disabled() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return !detail::grad_disabled(); }

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the grads of `inputs`.
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{0});
        return grad;
    }
    bool is_leaf() const { return !backward; }
};

/// Dense row-major array handle. Copies share the underlying node; use
/// clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : node_(std::make_shared<Node<T>>()) {
        check_shape(shape);
        node_->data.assign(dnas::numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
        check_shape(shape);
        if (values.size() != dnas::numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + to_string(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

    static Tensor from_node(std::shared_ptr<Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }
    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        if (!node_->is_leaf() && !on) throw std::logic_error("cannot clear requires_grad on a non-leaf tensor");
        node_->requires_grad = on;
        return *this;
    }

    /// New leaf holding a copy of the data, outside any graph.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<Node<T>>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        return t;
    }
    Tensor clone() const {
        Tensor t = detach();
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dims must be positive, got " + to_string(shape));
        }
    }

    std::shared_ptr<Node<T>> node_;
};

/// Ordered record of the operations reachable from a root, inputs before
/// outputs. Running it visits each recorded operation once, in reverse.
template <class T>
class Tape {
public:
    static Tape record(const Tensor<T>& root) {
        Tape tape;
        if (!root.defined() || !root.node()->requires_grad) return tape;
        std::unordered_set<const Node<T>*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                Node<T>* child = node->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    std::span<Node<T>* const> operations() const { return order_; }
    std::size_t size() const { return order_.size(); }

    void run_backward() const {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node<T>* node = *it;
            if (node->backward && node->grad.size() == node->data.size()) node->backward(*node);
        }
    }

private:
    std::vector<Node<T>*> order_;
};

/// Seeds d(root)/d(root) with `seed` and propagates to every leaf that
/// requires grad. Leaf grads accumulate across calls.
template <class T>
void backward(const Tensor<T>& root, std::span<const T> seed) {
    if (seed.size() != root.numel()) throw ShapeError("backward seed size does not match root");
    if (!root.requires_grad()) return;
    auto tape = Tape<T>::record(root);
    // Intermediate grads from a previous pass over the same graph are stale.
    for (Node<T>* n : tape.operations()) {
        if (!n->is_leaf()) n->grad.clear();
    }
    auto& g = root.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    tape.run_backward();
}

template <class T>
void backward(const Tensor<T>& scalar_root) {
    if (scalar_root.numel() != 1) throw ShapeError("backward() without a seed needs a scalar root");
    const T one{1};
    backward(scalar_root, std::span<const T>(&one, 1));
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    for (auto* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

/// Wraps freshly computed data as an op output. The backward closure and the
/// input links are kept only when recording is on and some input needs grad.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& bw) {
    Tensor<T> out(std::move(shape), std::move(data));
    if (grad_enabled() && any_requires_grad<T>(inputs)) {
        auto& node = *out.node();
        node.requires_grad = true;
        node.op = op;
        for (auto* t : inputs) {
            if (t && t->defined()) node.inputs.push_back(t->node());
        }
        node.backward = std::forward<Backward>(bw);
    }
    return out;
}

/// Same, for ops with a runtime-sized input list.
template <class T, class Backward>
Tensor<T> make_result_n(Shape shape, std::vector<T> data, const char* op,
                        const std::vector<Tensor<T>>& inputs, Backward&& bw) {
    Tensor<T> out(std::move(shape), std::move(data));
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (grad_enabled() && any) {
        auto& node = *out.node();
        node.requires_grad = true;
        node.op = op;
        for (const auto& t : inputs) node.inputs.push_back(t.node());
        node.backward = std::forward<Backward>(bw);
    }
    return out;
}

template <class T>
void accumulate(Node<T>& target, std::span<const T> delta) {
    if (!target.requires_grad) return;
    auto& g = target.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

} // namespace detail

} // namespace dnas

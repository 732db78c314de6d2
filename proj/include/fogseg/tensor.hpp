#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "fogseg/common.hpp"

namespace fogseg {

// Shared storage behind a Tensor handle. Values are written once by the op
// that creates them; grad is filled in by backward passes.
template <typename T>
struct TensorData {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until a backward pass touches this tensor
    bool requires_grad = false;
};

// Dense N-d array with shared-buffer copy semantics (copies alias the same
// storage; use clone() for a deep copy). Canonical image layout is
// batch x channels x height x width, row-major.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, T fill = T(0)) {
        size_t n = 1;
        for (int d : shape) {
            check(d > 0, "tensor dimension must be positive, got ", d);
            n *= static_cast<size_t>(d);
        }
        d_ = std::make_shared<TensorData<T>>();
        d_->shape = std::move(shape);
        d_->values.assign(n, fill);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor full(std::vector<int> shape, T v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(T v) { return Tensor({1}, v); }

    static Tensor from_values(std::vector<int> shape, std::vector<T> values) {
        Tensor t;
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        check(n == values.size(), "from_values: shape product ", n,
              " != value count ", values.size());
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        return t;
    }

    bool defined() const { return d_ != nullptr; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    const std::vector<int>& shape() const { return d_->shape; }
    size_t numel() const { return d_->values.size(); }

    T* data() { return d_->values.data(); }
    const T* data() const { return d_->values.data(); }
    std::vector<T>& values() { return d_->values; }
    const std::vector<T>& values() const { return d_->values; }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }

    bool has_grad() const { return d_ && !d_->grad.empty(); }
    const std::vector<T>& grad() const { return d_->grad; }

    // Lazily allocated zero-filled gradient buffer.
    std::vector<T>& grad_buffer() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
        return d_->grad;
    }

    void zero_grad() { d_->grad.clear(); }

    Tensor clone() const {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = d_->shape;
        t.d_->values = d_->values;
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

    T item() const {
        check(numel() == 1, "item(): tensor has ", numel(), " elements, expected 1");
        return d_->values[0];
    }

    bool same_shape(const Tensor& o) const { return d_->shape == o.d_->shape; }

    std::shared_ptr<TensorData<T>>& ptr() { return d_; }
    const std::shared_ptr<TensorData<T>>& ptr() const { return d_; }

private:
    std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
std::string shape_str(const Tensor<T>& t) {
    if (!t.defined()) return "<undefined>";
    std::string s = "[";
    for (int i = 0; i < t.rank(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.dim(i));
    }
    return s + "]";
}

// Reverse-mode tape. Ops append nodes in execution order; backward() walks
// the tape once in reverse and accumulates (sums) gradients into shared
// inputs. The execution order is a topological order by construction.
template <typename T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* active() { return active_; }

    void record(const char* op, const Tensor<T>& out, std::function<void()> backward_fn) {
        nodes_.push_back(Node{op, out.ptr(), std::move(backward_fn)});
    }

    size_t size() const { return nodes_.size(); }

    void backward(const Tensor<T>& loss) {
        check(loss.defined() && loss.numel() == 1,
              "backward: loss must be a scalar tensor, got shape ", shape_str(loss));
        loss.ptr()->grad.assign(1, T(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->out->grad.empty()) it->backward_fn();
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        const char* op;
        std::shared_ptr<TensorData<T>> out;
        std::function<void()> backward_fn;
    };
    std::vector<Node> nodes_;

    inline static thread_local Graph* active_ = nullptr;

    template <typename U>
    friend class GraphScope;
};

// Installs a graph as the active recording target for the current thread.
template <typename T>
class GraphScope {
public:
    explicit GraphScope(Graph<T>& g) : prev_(Graph<T>::active_) { Graph<T>::active_ = &g; }
    ~GraphScope() { Graph<T>::active_ = prev_; }
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

private:
    Graph<T>* prev_;
};

namespace detail {

template <typename T>
std::vector<T>& grad_acc(const std::shared_ptr<TensorData<T>>& d) {
    if (d->grad.empty()) d->grad.assign(d->values.size(), T(0));
    return d->grad;
}

template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
    if (!finite_checks()) return;
    for (T v : t.values()) {
        if (!std::isfinite(static_cast<double>(v)))
            fail(op, ": produced non-finite value");
    }
}

// Records a node when a graph is active and any input carries gradient.
// Returns true if recorded, so ops can skip saving context otherwise.
template <typename T, typename F>
bool record_op(const char* op, std::initializer_list<const Tensor<T>*> inputs,
               Tensor<T>& out, F&& backward_fn) {
    auto* g = Graph<T>::active();
    if (!g) return false;
    bool needs = false;
    for (const Tensor<T>* in : inputs)
        if (in->defined() && in->requires_grad()) needs = true;
    if (!needs) return false;
    out.set_requires_grad(true);
    g->record(op, out, std::function<void()>(std::forward<F>(backward_fn)));
    return true;
}

}  // namespace detail
}  // namespace fogseg

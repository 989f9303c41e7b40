#include "capsgan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace capsgan {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + stream * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    }
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_node(Shape shape, std::vector<float> data) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape(shape);
    int64_t n = shape_numel(shape);
    Tensor t = make_node(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    check_shape(shape);
    int64_t n = shape_numel(shape);
    Tensor t = make_node(std::move(shape), std::vector<float>(static_cast<size_t>(n), value));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw ShapeError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    Tensor t = make_node(std::move(shape), std::move(values));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
    check_shape(shape);
    int64_t n = shape_numel(shape);
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = stddev * rng.normal();
    Tensor t = make_node(std::move(shape), std::move(v));
    t.set_requires_grad(requires_grad);
    return t;
}

float Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    if (!node_->parents.empty()) throw UsageError("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = v;
    node_->needs_grad = v;
    return *this;
}

const std::vector<float>& Tensor::grad() const {
    if (node_->grad.empty()) throw UsageError("gradient not populated");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Tensor::backward() const {
    if (numel() != 1) throw UsageError("backward() requires a scalar, got " + shape_str(shape()));
    if (!std::isfinite(node_->data[0])) throw NumericalError("backward() on non-finite scalar");

    // iterative post-order DFS; reversed it yields outputs-before-inputs
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (node_->needs_grad) {
        stack.push_back({node_.get(), 0});
        seen.insert(node_.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next_parent++].get();
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    // intermediate grads are scratch per sweep; only leaves accumulate
    for (TensorNode* n : order) {
        if (!n->parents.empty()) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), 0.0f);
        }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

Tensor Tensor::detach() const {
    return make_node(node_->shape, node_->data);
}

bool Tensor::all_finite() const {
    for (float v : node_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace capsgan

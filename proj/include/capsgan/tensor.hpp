#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace capsgan {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto process exit codes.
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataFormatError : std::runtime_error {
    enum class Kind { io, bad_magic, truncated, bad_dims, count_mismatch, bad_values };
    Kind kind;
    DataFormatError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct CheckpointError : std::runtime_error {
    enum class Kind { io, bad_magic, bad_version, size_mismatch, bad_layout };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct TrainingFloorError : std::runtime_error {
    float achieved;
    TrainingFloorError(float acc, const std::string& msg)
        : std::runtime_error(msg), achieved(acc) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All value mappings are done by hand so that the produced
// stream depends only on the seed, never on the standard library's
// distribution implementations.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1), exactly representable in fp32
    float uniform() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, pair cached
    float normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 1.0 - static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
        double u2 = static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = static_cast<float>(r * std::sin(a));
        has_cached_ = true;
        return static_cast<float>(r * std::cos(a));
    }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    float cached_ = 0.0f;
};

// splitmix64 finalizer; derives independent stream seeds
uint64_t mix_seed(uint64_t seed, uint64_t stream);

// ---------------------------------------------------------------------------
// Tensor: dense row-major fp32 array with reverse-mode autodiff. A Tensor is
// a cheap handle onto a graph node; ops allocate fresh nodes and record a
// backward closure when gradients are required.
// ---------------------------------------------------------------------------

struct TensorNode {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;     // empty until touched by backward
    bool requires_grad = false;  // trainable leaf
    bool needs_grad = false;     // lies on a path from a requires_grad leaf
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

bool grad_enabled();

// RAII switch disabling graph recording (forward-only evaluation)
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad = false);
    static Tensor scalar(float v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    const std::vector<float>& data() const { return node_->data; }
    std::vector<float>& data() { return node_->data; }
    float item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v);
    bool needs_grad() const { return node_->needs_grad; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<float>& grad() const;
    std::vector<float>& grad_buffer() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad();

    // Reverse sweep from a scalar. Visits each recorded node once, in
    // reverse topological order; leaf grads accumulate across calls.
    void backward() const;

    // Copies the values into a fresh constant leaf.
    Tensor detach() const;

    bool all_finite() const;

    std::shared_ptr<TensorNode>& node() { return node_; }
    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Ordered name -> tensor map; ordering is part of file formats.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Allocates a fresh constant node.
Tensor make_node(Shape shape, std::vector<float> data);

// Wires `out` into the graph when recording is on and any input needs
// gradients. `make_bw` receives the raw output node (safe: the closure is
// owned by that node) and returns the backward closure.
template <typename F>
void record_op(Tensor& out, std::initializer_list<Tensor> inputs, F&& make_bw) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& t : inputs) any = any || t.needs_grad();
    if (!any) return;
    TensorNode* on = out.node().get();
    on->needs_grad = true;
    for (const auto& t : inputs) on->parents.push_back(t.node());
    on->backward_fn = make_bw(on);
}

}  // namespace capsgan

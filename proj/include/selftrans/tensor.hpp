#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace st {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    std::vector<float> data;
    std::vector<float> grad;
    Shape shape;
    bool requires_grad = false;
    bool frozen = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    std::vector<float>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
        return grad;
    }
};

}  // namespace detail

/// Dense row-major f32 tensor with reverse-mode autodiff. Copies share
/// storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(int axis) const;
    int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    std::span<const float> data() const { return node_->data; }
    /// Throws FrozenTensorError for frozen tensors.
    std::span<float> mutable_data();
    const std::vector<float>& values() const { return node_->data; }
    float item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value);
    bool has_grad() const { return !node_->grad.empty(); }
    /// Zero-filled view when no gradient has been accumulated yet.
    std::span<const float> grad() const;
    void zero_grad();

    bool frozen() const { return node_->frozen; }
    /// Marks the tensor immutable and excludes it from gradient tracking.
    void freeze();

    /// Runs reverse-mode accumulation from this scalar. The graph behind it is
    /// released afterwards.
    void backward();

    Tensor detach() const;
    Tensor clone() const;
    /// Same storage semantics as clone(), different shape.
    Tensor reshape(Shape shape) const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    friend Tensor make_result(Shape, std::vector<float>, std::vector<Tensor>,
                              std::function<void(detail::Node&)>);

    std::shared_ptr<detail::Node> node_;
};

/// Gradient recording switch (thread-local). Teacher forwards and sampling
/// run with recording disabled.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Builds an op output. The backward closure is attached only when grad mode
/// is on and some input requires grad.
Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward);

void check_same_shape(const Tensor& a, const Tensor& b, const char* what);
void check_finite(const Tensor& t, const char* what);

}  // namespace st

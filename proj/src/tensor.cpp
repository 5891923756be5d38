#include "selftrans/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "selftrans/errors.hpp"

namespace st {

namespace {
thread_local bool g_grad_enabled = true;
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    for (auto d : shape)
        if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->data = std::move(values);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

int64_t Tensor::dim(int axis) const {
    const auto r = rank();
    const int64_t a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("axis out of range for shape " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
}

std::span<float> Tensor::mutable_data() {
    if (node_->frozen) throw FrozenTensorError("attempt to modify a frozen tensor");
    return node_->data;
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

void Tensor::set_requires_grad(bool value) {
    if (value && node_->frozen) throw FrozenTensorError("frozen tensors cannot require grad");
    node_->requires_grad = value;
}

std::span<const float> Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::freeze() {
    node_->frozen = true;
    node_->requires_grad = false;
    node_->grad.clear();
}

void Tensor::backward() {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    for (auto* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            if (n != node_.get()) n->grad.clear();
        }
    }
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<detail::Node>();
    node->data = node_->data;
    node->shape = node_->shape;
    return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad && !node_->frozen;
    return t;
}

Tensor Tensor::reshape(Shape shape) const {
    if (shape_numel(shape) != numel())
        throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    return make_result(std::move(shape), node_->data, {*this}, [src = node_](detail::Node& out) {
        if (!src->requires_grad) return;
        auto& g = src->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    if (g_grad_enabled) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || in.requires_grad();
        if (needs) {
            node->requires_grad = true;
            for (auto& in : inputs) node->parents.push_back(in.node_ptr());
            node->backward_fn = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void check_finite(const Tensor& t, const char* what) {
    for (float v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
}

}  // namespace st

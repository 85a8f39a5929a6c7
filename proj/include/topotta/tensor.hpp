#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace topotta {

// All numerics are double precision; shapes are row-major, NCHW for images.
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One record on the autodiff tape. Op outputs hold shared_ptr links to their
// parents, so a loss tensor keeps its whole graph alive; dropping the handles
// frees everything. backward_fn reads this node's grad and accumulates into
// the parents' grad buffers (only those with requires_grad set).
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until someone needs it
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // null for leaves
    const char* op = "leaf";
};

// Cheap handle. Ops never mutate their inputs; raw() exists for code that
// legitimately rewrites leaf values between graph builds (init, optimizer
// steps, checkpoint loading).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor wrap(std::shared_ptr<TensorNode> n) { Tensor t; t.n_ = std::move(n); return t; }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const;
    int dim(int i) const;
    std::size_t numel() const;

    const std::vector<double>& data() const;
    std::vector<double>& raw();
    double item() const;  // scalar tensors only

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    bool has_grad() const;
    const std::vector<double>& grad() const;  // throws if backward never reached this node
    std::vector<double>& grad_buffer();       // allocates (zeroed) if absent
    void zero_grad();

    Tensor detach() const;  // value copy, no graph, no grad

    const std::shared_ptr<TensorNode>& node() const;

private:
    std::shared_ptr<TensorNode> n_;
};

// Reverse-mode sweep from a scalar loss. Interior grad buffers are cleared at
// the start of every call, leaf buffers accumulate; callers zero leaves
// between optimization steps. Running it twice with leaf grads reset in
// between is bitwise reproducible. Throws if the loss is not scalar or any
// gradient comes out non-finite.
void backward(const Tensor& loss);

// Max discrepancy between analytic d(f)/d(point) and central differences,
// relative to max(1, |analytic|). f must return a scalar tensor.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h = 1e-5);

}  // namespace topotta

#include "topotta/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace topotta {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("shape with non-positive dim " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

static std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> data, bool rg) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = rg;
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<double>(n, v), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                    " values for shape " + shape_str(shape));
    return wrap(make_leaf(std::move(shape), std::move(data), requires_grad));
}

static TensorNode& deref(const std::shared_ptr<TensorNode>& n) {
    if (!n) throw std::runtime_error("use of undefined Tensor");
    return *n;
}

const Shape& Tensor::shape() const { return deref(n_).shape; }

int Tensor::dim(int i) const {
    const Shape& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        throw std::invalid_argument("dim index " + std::to_string(i) + " for shape " + shape_str(s));
    return s[i];
}

std::size_t Tensor::numel() const { return deref(n_).value.size(); }

const std::vector<double>& Tensor::data() const { return deref(n_).value; }

std::vector<double>& Tensor::raw() { return deref(n_).value; }

double Tensor::item() const {
    const auto& v = data();
    if (v.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return v[0];
}

bool Tensor::requires_grad() const { return deref(n_).requires_grad; }

void Tensor::set_requires_grad(bool rg) { deref(n_).requires_grad = rg; }

bool Tensor::has_grad() const { return !deref(n_).grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    const TensorNode& n = deref(n_);
    if (n.grad.empty()) throw std::runtime_error("grad requested but backward never reached this tensor");
    return n.grad;
}

std::vector<double>& Tensor::grad_buffer() {
    TensorNode& n = deref(n_);
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void Tensor::zero_grad() {
    TensorNode& n = deref(n_);
    if (!n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

Tensor Tensor::detach() const {
    const TensorNode& n = deref(n_);
    return from_data(n.shape, n.value, false);
}

const std::shared_ptr<TensorNode>& Tensor::node() const { return n_; }

// Post-order DFS over parents with an explicit stack; order is a pure
// function of graph construction order, which keeps repeated backward calls
// bitwise identical.
static std::vector<TensorNode*> topo_order(TensorNode* root) {
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame { TensorNode* n; std::size_t next; };
    std::vector<Frame> stack;
    if (seen.insert(root).second) stack.push_back({root, 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    return order;
}

void backward(const Tensor& loss) {
    TensorNode& root = *loss.node();
    if (root.value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(root.shape));
    if (!root.requires_grad) return;  // nothing on the tape wants gradients

    std::vector<TensorNode*> order = topo_order(&root);

    // Interior buffers start fresh every sweep; leaves accumulate.
    for (TensorNode* n : order) {
        if (!n->requires_grad) continue;
        if (n->backward_fn) {
            n->grad.assign(n->value.size(), 0.0);
        } else if (n->grad.empty()) {
            n->grad.assign(n->value.size(), 0.0);
        }
    }
    root.grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }

    for (TensorNode* n : order) {
        if (!n->requires_grad) continue;
        for (double g : n->grad)
            if (!std::isfinite(g))
                throw std::runtime_error(std::string("non-finite gradient out of op '") + n->op + "'");
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
    if (h <= 0) throw std::invalid_argument("grad_check: h must be positive");
    Tensor x = Tensor::from_data(point.shape(), point.data(), true);
    Tensor y = f(x);
    if (y.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    backward(y);
    std::vector<double> analytic = x.has_grad() ? x.grad() : std::vector<double>(x.numel(), 0.0);

    std::vector<double> base = point.data();
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        Tensor xp = Tensor::from_data(point.shape(), base, false);
        xp.raw()[i] = base[i] + h;
        double fp = f(xp).item();
        Tensor xm = Tensor::from_data(point.shape(), base, false);
        xm.raw()[i] = base[i] - h;
        double fm = f(xm).item();
        double numeric = (fp - fm) / (2.0 * h);
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        if (err > worst) worst = err;
    }
    return worst;
}

}  // namespace topotta

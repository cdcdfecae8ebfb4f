// Reverse-mode differentiation tape. Every differentiable op records one
// node: its output value, an op identifier, and a backward rule that maps
// the upstream gradient to gradients for each input. Gradient accumulation
// for fan-out is summation in node-creation order, so replays are bit-exact.
#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lim/tensor.hpp"

namespace lim {

template <typename S>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&)>;

    int leaf(Tensor4<S> v, bool needs_grad = true) {
        return push(std::move(v), "leaf", nullptr, needs_grad, {});
    }

    // Registers a differentiable op record: output value, op identifier,
    // input references and the backward rule (null for non-differentiable
    // outputs).
    int push(Tensor4<S> value, const char* op, BackwardFn backward, bool needs_grad,
             std::vector<int> parents) {
        nodes_.push_back(
            Node{std::move(value), std::move(backward), std::move(parents), op, needs_grad});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor4<S>& value(int id) const { return nodes_[check(id)].value; }
    const char* op_name(int id) const { return nodes_[check(id)].op; }
    const std::vector<int>& parents(int id) const { return nodes_[check(id)].parents; }
    bool needs_grad(int id) const { return nodes_[check(id)].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    bool grad_present(int id) const { return !grads_[check(id)].data.empty(); }

    // Gradient buffer, lazily zero-initialized to the node's shape.
    Tensor4<S>& grad_buf(int id) {
        auto& n = nodes_[check(id)];
        auto& g = grads_[id];
        if (g.data.empty()) g = Tensor4<S>::zeros(n.value.n, n.value.c, n.value.h, n.value.w);
        return g;
    }

    const Tensor4<S>& grad(int id) const {
        if (!grad_present(id)) {
            throw std::logic_error(std::string("graph: no gradient recorded for node of op ") +
                                   nodes_[check(id)].op);
        }
        return grads_[id];
    }

    void accumulate_grad(int id, const Tensor4<S>& g) {
        if (!nodes_[check(id)].needs_grad) return;
        detail::require_same_shape(nodes_[id].value, g, "accumulate_grad");
        add_inplace(grad_buf(id), g);
    }

    // Seeds d(root)/d(root) = 1 (root must be scalar-shaped) and walks the
    // tape in reverse creation order.
    void backward(int root) {
        const auto& v = value(root);
        if (v.size() != 1) {
            throw std::invalid_argument("backward: root must be scalar, got " + v.shape_str());
        }
        backward(root, Tensor4<S>(1, 1, 1, 1, S(1)));
    }

    void backward(int root, const Tensor4<S>& seed) {
        detail::require_same_shape(nodes_[check(root)].value, seed, "backward seed");
        add_inplace(grad_buf(root), seed);
        for (int i = root; i >= 0; --i) {
            if (nodes_[i].backward && grad_present(i)) nodes_[i].backward(*this);
        }
    }

    void clear() {
        nodes_.clear();
        grads_.clear();
    }

private:
    struct Node {
        Tensor4<S> value;
        BackwardFn backward;
        std::vector<int> parents;
        const char* op;
        bool needs_grad;
    };

    int check(int id) const {
        if (id < 0 || id >= static_cast<int>(nodes_.size())) {
            throw std::out_of_range("graph: bad node id");
        }
        return id;
    }

    std::vector<Node> nodes_;
    std::vector<Tensor4<S>> grads_;
};

// --- elementary tape ops ----------------------------------------------------

namespace detail {

// push with a backward that knows its own node id
template <typename S, typename F>
int push_op(Graph<S>& g, Tensor4<S> value, const char* op, std::vector<int> parents,
            F&& make_backward) {
    const int self = static_cast<int>(g.size());
    typename Graph<S>::BackwardFn fn = make_backward(self);
    return g.push(std::move(value), op, std::move(fn), true, std::move(parents));
}

}  // namespace detail

template <typename S>
int g_add(Graph<S>& g, int a, int b) {
    Tensor4<S> out = elementwise_add(g.value(a), g.value(b));
    return detail::push_op(g, std::move(out), "elementwise_add", {a, b}, [&](int self) {
        return [self, a, b](Graph<S>& gr) {
            const auto& up = gr.grad(self);
            gr.accumulate_grad(a, up);
            gr.accumulate_grad(b, up);
        };
    });
}

template <typename S>
int g_scale(Graph<S>& g, int a, S k) {
    Tensor4<S> out = g.value(a);
    for (auto& v : out.data) v *= k;
    return detail::push_op(g, std::move(out), "scale", {a}, [&](int self) {
        return [self, a, k](Graph<S>& gr) {
            const auto& up = gr.grad(self);
            Tensor4<S> da = up;
            for (auto& v : da.data) v *= k;
            gr.accumulate_grad(a, da);
        };
    });
}

template <typename S>
int g_sum(Graph<S>& g, int a) {
    Tensor4<S> out(1, 1, 1, 1, tensor_sum(g.value(a)));
    return detail::push_op(g, std::move(out), "sum", {a}, [&](int self) {
        return [self, a](Graph<S>& gr) {
            const S u = gr.grad(self).data[0];
            const auto& av = gr.value(a);
            Tensor4<S> da(av.n, av.c, av.h, av.w, u);
            gr.accumulate_grad(a, da);
        };
    });
}

// <weights, x> as a scalar; the gradcheck objective.
template <typename S>
int g_weighted_sum(Graph<S>& g, int a, const Tensor4<S>& weights) {
    detail::require_same_shape(g.value(a), weights, "weighted_sum");
    S acc = S(0);
    const auto& av = g.value(a);
    for (std::size_t i = 0; i < av.size(); ++i) acc += av.data[i] * weights.data[i];
    Tensor4<S> out(1, 1, 1, 1, acc);
    return detail::push_op(g, std::move(out), "weighted_sum", {a}, [&](int self) {
        return [self, a, weights](Graph<S>& gr) {
            const S u = gr.grad(self).data[0];
            Tensor4<S> da = weights;
            for (auto& v : da.data) v *= u;
            gr.accumulate_grad(a, da);
        };
    });
}

template <typename S>
int g_concat_channels(Graph<S>& g, const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const auto& first = g.value(parts[0]);
    int total_c = 0;
    for (int id : parts) {
        const auto& t = g.value(id);
        if (t.n != first.n || t.h != first.h || t.w != first.w) {
            throw std::invalid_argument("concat_channels: extent mismatch " + t.shape_str() +
                                        " vs " + first.shape_str());
        }
        total_c += t.c;
    }
    Tensor4<S> out(first.n, total_c, first.h, first.w);
    int coff = 0;
    for (int id : parts) {
        const auto& t = g.value(id);
        for (int b = 0; b < t.n; ++b)
            for (int ch = 0; ch < t.c; ++ch)
                std::copy(t.plane(b, ch), t.plane(b, ch) + t.h * t.w, out.plane(b, coff + ch));
        coff += t.c;
    }
    return detail::push_op(g, std::move(out), "concat_channels", parts, [&](int self) {
        return [self, parts](Graph<S>& gr) {
            const auto& up = gr.grad(self);
            int off = 0;
            for (int id : parts) {
                const auto& t = gr.value(id);
                Tensor4<S> da(t.n, t.c, t.h, t.w);
                for (int b = 0; b < t.n; ++b)
                    for (int ch = 0; ch < t.c; ++ch)
                        std::copy(up.plane(b, off + ch), up.plane(b, off + ch) + t.h * t.w,
                                  da.plane(b, ch));
                gr.accumulate_grad(id, da);
                off += t.c;
            }
        };
    });
}

// Element-wise max across several same-shaped inputs; ties route the
// gradient to the lowest input index.
template <typename S>
int g_elementwise_max(Graph<S>& g, const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("elementwise_max: no inputs");
    const auto& first = g.value(parts[0]);
    Tensor4<S> out = first;
    std::vector<std::uint8_t> arg(out.size(), 0);
    for (std::size_t p = 1; p < parts.size(); ++p) {
        const auto& t = g.value(parts[p]);
        detail::require_same_shape(first, t, "elementwise_max");
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (t.data[i] > out.data[i]) {
                out.data[i] = t.data[i];
                arg[i] = static_cast<std::uint8_t>(p);
            }
        }
    }
    return detail::push_op(g, std::move(out), "elementwise_max", parts, [&](int self) {
        return [self, parts, arg = std::move(arg)](Graph<S>& gr) {
            const auto& up = gr.grad(self);
            for (std::size_t p = 0; p < parts.size(); ++p) {
                const auto& t = gr.value(parts[p]);
                Tensor4<S> da = Tensor4<S>::zeros(t.n, t.c, t.h, t.w);
                for (std::size_t i = 0; i < up.size(); ++i) {
                    if (arg[i] == p) da.data[i] = up.data[i];
                }
                gr.accumulate_grad(parts[p], da);
            }
        };
    });
}

}  // namespace lim

// Finite-difference verification of every backward rule. The oracle is
// central differences in 64-bit mode; analytic gradients come from the
// tape. Instances whose forward pass runs within 1e-3 of a max-tie or a
// ReLU kink are redrawn, since no subgradient convention can match a
// two-sided difference there.
#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "lim/boundary_activation.hpp"
#include "lim/nn_ops.hpp"
#include "lim/rng.hpp"

namespace lim {

template <typename S>
struct FiniteDiffResult {
    Tensor4<S> grad;
    std::vector<std::uint8_t> valid;  // per element; 0 where f was non-finite
    bool all_valid = true;
};

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
template <typename S>
FiniteDiffResult<S> finite_diff_grad(const std::function<S(const Tensor4<S>&)>& f,
                                     const Tensor4<S>& x, S eps) {
    FiniteDiffResult<S> r;
    r.grad = Tensor4<S>::zeros(x.n, x.c, x.h, x.w);
    r.valid.assign(x.size(), 1);
    Tensor4<S> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const S orig = probe.data[i];
        probe.data[i] = orig + eps;
        const S hi = f(probe);
        probe.data[i] = orig - eps;
        const S lo = f(probe);
        probe.data[i] = orig;
        if (!std::isfinite(hi) || !std::isfinite(lo)) {
            r.valid[i] = 0;
            r.all_valid = false;
            continue;
        }
        r.grad.data[i] = (hi - lo) / (S(2) * eps);
    }
    return r;
}

// --- hazard detection --------------------------------------------------------

namespace detail {

template <typename S>
bool pool_window_near_tie(const Tensor4<S>& x, double tol) {
    for (int b = 0; b < x.n; ++b) {
        for (int ch = 0; ch < x.c; ++ch) {
            for (int y = 0; y + 1 < x.h; y += 2) {
                const S* r0 = x.row(b, ch, y);
                const S* r1 = x.row(b, ch, y + 1);
                for (int xx = 0; xx + 1 < x.w; xx += 2) {
                    S vals[4] = {r0[xx], r0[xx + 1], r1[xx], r1[xx + 1]};
                    S best = vals[0], second = -std::numeric_limits<S>::infinity();
                    for (int i = 1; i < 4; ++i) {
                        if (vals[i] > best) {
                            second = best;
                            best = vals[i];
                        } else if (vals[i] > second) {
                            second = vals[i];
                        }
                    }
                    if (static_cast<double>(best - second) < tol) return true;
                }
            }
        }
    }
    return false;
}

template <typename S>
bool scan_run_near_tie(const Tensor4<S>& x, ScanDirection d, double tol) {
    const auto near_run = [&](auto get, int len) {
        S cur = get(0);
        for (int i = 1; i < len; ++i) {
            const S v = get(i);
            if (std::abs(static_cast<double>(v - cur)) < tol) return true;
            if (v > cur) cur = v;
        }
        return false;
    };
    for (int b = 0; b < x.n; ++b) {
        for (int ch = 0; ch < x.c; ++ch) {
            if (is_horizontal(d)) {
                for (int y = 0; y < x.h; ++y) {
                    const S* row = x.row(b, ch, y);
                    const bool rev = d == ScanDirection::FromRight;
                    if (near_run([&](int i) { return rev ? row[x.w - 1 - i] : row[i]; }, x.w))
                        return true;
                }
            } else {
                for (int xx = 0; xx < x.w; ++xx) {
                    const bool rev = d == ScanDirection::FromBottom;
                    if (near_run(
                            [&](int i) { return x.at(b, ch, rev ? x.h - 1 - i : i, xx); }, x.h))
                        return true;
                }
            }
        }
    }
    return false;
}

}  // namespace detail

// True when any non-smooth op in the recorded graph ran within `tol` of a
// decision boundary (ReLU kink, pool or scan max-tie).
template <typename S>
bool graph_has_nonsmooth_hazard(const Graph<S>& g, double tol = 1e-3) {
    for (int id = 0; id < static_cast<int>(g.size()); ++id) {
        const std::string op = g.op_name(id);
        const auto& parents = g.parents(id);
        if (op == "relu") {
            for (S v : g.value(parents[0]).data) {
                if (std::abs(static_cast<double>(v)) < tol) return true;
            }
        } else if (op == "downsample_max") {
            if (detail::pool_window_near_tie(g.value(parents[0]), tol)) return true;
        } else if (auto d = scan_direction_from_op(op)) {
            if (detail::scan_run_near_tie(g.value(parents[0]), *d, tol)) return true;
        } else if (op == "elementwise_max") {
            const auto& first = g.value(parents[0]);
            for (std::size_t i = 0; i < first.size(); ++i) {
                S best = first.data[i], second = -std::numeric_limits<S>::infinity();
                for (std::size_t p = 1; p < parents.size(); ++p) {
                    const S v = g.value(parents[p]).data[i];
                    if (v > best) {
                        second = best;
                        best = v;
                    } else if (v > second) {
                        second = v;
                    }
                }
                if (parents.size() > 1 && static_cast<double>(best - second) < tol) return true;
            }
        }
    }
    return false;
}

// --- harness ------------------------------------------------------------------

// One op check: builds the graph via `build` (leaves for `inputs` first, in
// order, then the op; returns the output id), projects the output onto a
// fixed random functional, and compares tape gradients against central
// differences for every input element.
//
// Returns the max relative error across elements and inputs, with the
// denominator floored at 1e-3 so true zeros do not inflate the ratio.
struct GradCheckOptions {
    double eps = 1e-5;
    double hazard_tol = 1e-3;
    int max_redraws = 50;
};

template <typename BuildFn, typename DrawFn>
double gradcheck_instance(DrawFn draw, BuildFn build, Rng& rng, const GradCheckOptions& opt) {
    using S = double;
    std::vector<Tensor4<S>> inputs;
    Graph<S> g;
    int out = -1;
    for (int attempt = 0;; ++attempt) {
        inputs = draw(rng);
        g.clear();
        out = build(g, inputs);
        if (!graph_has_nonsmooth_hazard(g, opt.hazard_tol)) break;
        if (attempt >= opt.max_redraws) {
            throw std::runtime_error("gradcheck: could not draw a hazard-free instance");
        }
    }
    const auto& ov = g.value(out);
    Tensor4<S> proj(ov.n, ov.c, ov.h, ov.w);
    for (auto& v : proj.data) v = rng.uniform(-1.0, 1.0);

    const int objective = g_weighted_sum(g, out, proj);
    g.backward(objective);

    double max_rel = 0.0;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        const Tensor4<S>& analytic = g.grad(static_cast<int>(which));
        auto f = [&](const Tensor4<S>& probe) {
            std::vector<Tensor4<S>> probe_inputs = inputs;
            probe_inputs[which] = probe;
            Graph<S> pg;
            const int pout = build(pg, probe_inputs);
            S acc = S(0);
            const auto& pv = pg.value(pout);
            for (std::size_t i = 0; i < pv.size(); ++i) acc += pv.data[i] * proj.data[i];
            return acc;
        };
        FiniteDiffResult<S> fd = finite_diff_grad<S>(f, inputs[which], opt.eps);
        for (std::size_t i = 0; i < fd.grad.size(); ++i) {
            if (!fd.valid[i]) continue;
            const double a = analytic.data[i], n = fd.grad.data[i];
            const double denom = std::max({std::abs(a), std::abs(n), 1e-3});
            max_rel = std::max(max_rel, std::abs(a - n) / denom);
        }
    }
    return max_rel;
}

// --- random instance helpers --------------------------------------------------

inline Tensor4<double> rand_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0,
                                   double hi = 1.0) {
    Tensor4<double> t(n, c, h, w);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Values form a shuffled arithmetic progression with the given gap, so all
// pairwise distances are >= gap; used ahead of max-based ops.
inline Tensor4<double> rand_separated(Rng& rng, int n, int c, int h, int w, double gap = 0.05) {
    Tensor4<double> t(n, c, h, w);
    const std::size_t k = t.size();
    std::vector<double> vals(k);
    for (std::size_t i = 0; i < k; ++i) {
        vals[i] = (static_cast<double>(i) - static_cast<double>(k) / 2.0) * gap;
    }
    rng.shuffle(vals);
    t.data = std::move(vals);
    return t;
}

// Uniform magnitude in [margin, hi], random sign; keeps ReLU inputs away
// from the kink.
inline Tensor4<double> rand_away_from_zero(Rng& rng, int n, int c, int h, int w,
                                           double margin = 0.05, double hi = 1.0) {
    Tensor4<double> t(n, c, h, w);
    for (auto& v : t.data) {
        const double mag = rng.uniform(margin, hi);
        v = rng.next_double() < 0.5 ? -mag : mag;
    }
    return t;
}

struct GradCheckCase {
    std::string name;
    // returns max relative error over >= `instances` random instances
    std::function<double(std::uint64_t seed, int instances)> run;
};

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

inline std::vector<GradCheckReport> run_gradcheck_cases(const std::vector<GradCheckCase>& cases,
                                                        std::uint64_t seed, int instances,
                                                        double tolerance) {
    std::vector<GradCheckReport> out;
    for (const auto& c : cases) {
        GradCheckReport r;
        r.name = c.name;
        r.max_rel_err = c.run(seed, instances);
        r.pass = r.max_rel_err < tolerance;
        out.push_back(r);
    }
    return out;
}

}  // namespace lim

#include "ikd/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace ikd::ad {

namespace {

using RowMatrix = Tensor::RowMatrix;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::string describe(NodeId id, Op op) {
    return "node " + std::to_string(id) + " (" + op_name(op) + ")";
}

[[noreturn]] void fail(NodeId id, Op op, const std::string& what) {
    throw std::invalid_argument(describe(id, op) + ": " + what);
}

struct ConvGeometry {
    Index n, c, h, w, o, kh, kw, oh, ow, stride, pad;
};

ConvGeometry conv_geometry(NodeId id, Op op, const Tensor& x, const Tensor& w, const ConvParams& p,
                           bool depthwise) {
    if (x.rank() != 4) fail(id, op, "input must be rank 4, got " + to_string(x.shape()));
    if (w.rank() != 4) fail(id, op, "kernel must be rank 4, got " + to_string(w.shape()));
    if (p.stride < 1 || p.padding < 0) fail(id, op, "stride must be >= 1 and padding >= 0");
    ConvGeometry g{};
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.o = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.stride = p.stride;
    g.pad = p.padding;
    if (depthwise) {
        if (w.dim(0) != g.c || w.dim(1) != 1) {
            fail(id, op, "depthwise kernel " + to_string(w.shape()) + " does not match " +
                             std::to_string(g.c) + " input channels");
        }
    } else if (w.dim(1) != g.c) {
        fail(id, op, "kernel " + to_string(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                         " input channels, input has " + std::to_string(g.c));
    }
    const Index span_h = g.h + 2 * g.pad - g.kh;
    const Index span_w = g.w + 2 * g.pad - g.kw;
    if (span_h < 0 || span_w < 0) fail(id, op, "kernel larger than padded input");
    g.oh = span_h / g.stride + 1;
    g.ow = span_w / g.stride + 1;
    return g;
}

// Column matrix (C*kh*kw) x (OH*OW) for one batch item.
void im2col(const double* x, const ConvGeometry& g, RowMatrix& col) {
    col.resize(g.c * g.kh * g.kw, g.oh * g.ow);
    for (Index c = 0; c < g.c; ++c) {
        const double* plane = x + c * g.h * g.w;
        for (Index ki = 0; ki < g.kh; ++ki) {
            for (Index kj = 0; kj < g.kw; ++kj) {
                double* row = col.data() + ((c * g.kh + ki) * g.kw + kj) * g.oh * g.ow;
                for (Index oi = 0; oi < g.oh; ++oi) {
                    const Index ii = oi * g.stride - g.pad + ki;
                    for (Index oj = 0; oj < g.ow; ++oj) {
                        const Index jj = oj * g.stride - g.pad + kj;
                        row[oi * g.ow + oj] =
                            (ii >= 0 && ii < g.h && jj >= 0 && jj < g.w) ? plane[ii * g.w + jj] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const RowMatrix& col, const ConvGeometry& g, double* dx) {
    for (Index c = 0; c < g.c; ++c) {
        double* plane = dx + c * g.h * g.w;
        for (Index ki = 0; ki < g.kh; ++ki) {
            for (Index kj = 0; kj < g.kw; ++kj) {
                const double* row = col.data() + ((c * g.kh + ki) * g.kw + kj) * g.oh * g.ow;
                for (Index oi = 0; oi < g.oh; ++oi) {
                    const Index ii = oi * g.stride - g.pad + ki;
                    if (ii < 0 || ii >= g.h) continue;
                    for (Index oj = 0; oj < g.ow; ++oj) {
                        const Index jj = oj * g.stride - g.pad + kj;
                        if (jj >= 0 && jj < g.w) plane[ii * g.w + jj] += row[oi * g.ow + oj];
                    }
                }
            }
        }
    }
}

// Source index and interpolation weight per output coordinate
// (align-corners off, negative sources clamped to zero).
struct AxisWeights {
    std::vector<Index> lo;
    std::vector<Index> hi;
    std::vector<double> lambda;
};

AxisWeights axis_weights(Index in, Index out) {
    AxisWeights a;
    a.lo.resize(static_cast<std::size_t>(out));
    a.hi.resize(static_cast<std::size_t>(out));
    a.lambda.resize(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (Index d = 0; d < out; ++d) {
        const double src = std::max(0.0, scale * (static_cast<double>(d) + 0.5) - 0.5);
        Index lo = static_cast<Index>(src);
        lo = std::min(lo, in - 1);
        const std::size_t k = static_cast<std::size_t>(d);
        a.lo[k] = lo;
        a.hi[k] = lo < in - 1 ? lo + 1 : lo;
        a.lambda[k] = src - static_cast<double>(lo);
    }
    return a;
}

Shape trailing_replaced(const Shape& s, Index h, Index w) {
    Shape out = s;
    out[out.size() - 2] = h;
    out[out.size() - 1] = w;
    return out;
}

template <typename T>
const T& params(const Node& node) {
    return std::get<T>(node.payload);
}

class Executor {
public:
    Executor(const Graph& graph, const Bindings& bindings) : graph_(graph), bindings_(bindings) {
        if (!graph_.has_output()) throw std::invalid_argument("graph has no output node");
        const auto& nodes = graph_.nodes();
        live_.assign(nodes.size(), false);
        live_[graph_.output()] = true;
        for (std::size_t i = nodes.size(); i-- > 0;) {
            if (!live_[i]) continue;
            for (NodeId in : nodes[i].inputs) live_[in] = true;
        }
        values_.resize(nodes.size());
    }

    const Tensor& forward() {
        const auto& nodes = graph_.nodes();
        for (NodeId id = 0; id < nodes.size(); ++id) {
            if (!live_[id]) continue;
            values_[id] = compute(id, nodes[id]);
#ifndef NDEBUG
            check_finite(id, nodes[id]);
#endif
        }
        return values_[graph_.output()];
    }

    Gradients backward(const std::vector<std::string>& wrt) {
        const auto& nodes = graph_.nodes();
        const Tensor& out = values_[graph_.output()];
        if (out.size() != 1) {
            throw std::invalid_argument("gradient requested of non-scalar output with shape " +
                                        to_string(out.shape()));
        }
        std::map<std::string, NodeId, std::less<>> targets;
        for (const auto& name : wrt) {
            auto id = graph_.find_input(name);
            if (!id) throw std::invalid_argument("gradient requested for input '" + name + "' not in graph");
            targets.emplace(name, *id);
        }
        std::vector<bool> needs(nodes.size(), false);
        for (const auto& [name, id] : targets) needs[id] = true;
        for (NodeId id = 0; id < nodes.size(); ++id) {
            for (NodeId in : nodes[id].inputs) {
                if (needs[in]) needs[id] = true;
            }
        }

        adj_.assign(nodes.size(), std::nullopt);
        adj_[graph_.output()] = Tensor::full(out.shape(), 1.0);
        for (NodeId id = nodes.size(); id-- > 0;) {
            if (!live_[id] || !needs[id] || !adj_[id]) continue;
            propagate(id, nodes[id], *adj_[id], needs);
        }

        Gradients result;
        for (const auto& [name, id] : targets) {
            if (adj_[id]) {
                result.emplace(name, std::move(*adj_[id]));
            } else {
                result.emplace(name, Tensor(values_[id].shape()));
            }
        }
        return result;
    }

private:
    const Tensor& in(const Node& node, std::size_t k) const { return values_[node.inputs[k]]; }

    void accumulate(NodeId id, Tensor g) {
        if (!adj_[id]) {
            adj_[id] = std::move(g);
        } else {
            adj_[id]->data() += g.data();
        }
    }

#ifndef NDEBUG
    void check_finite(NodeId id, const Node& node) const {
        for (NodeId in : node.inputs) {
            if (!values_[in].all_finite()) return;
        }
        if (node.op != Op::Input && node.op != Op::Constant && values_[id].data().isNaN().any()) {
            fail(id, node.op, "produced NaN from finite inputs");
        }
    }
#endif

    Tensor compute(NodeId id, const Node& node) {
        switch (node.op) {
        case Op::Input: {
            const auto& name = params<InputParams>(node).name;
            auto it = bindings_.find(name);
            if (it == bindings_.end()) fail(id, node.op, "input '" + name + "' is not bound");
            return it->second;
        }
        case Op::Constant:
            return *params<ConstantParams>(node).value;
        case Op::MatMul: {
            const Tensor& a = in(node, 0);
            const Tensor& b = in(node, 1);
            if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
                fail(id, node.op, "cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
            }
            Tensor out({a.dim(0), b.dim(1)});
            out.matrix(a.dim(0), b.dim(1)).noalias() =
                a.matrix(a.dim(0), a.dim(1)) * b.matrix(b.dim(0), b.dim(1));
            return out;
        }
        case Op::Conv2d: {
            const Tensor& x = in(node, 0);
            const Tensor& w = in(node, 1);
            const auto g = conv_geometry(id, node.op, x, w, params<ConvParams>(node), false);
            Tensor out({g.n, g.o, g.oh, g.ow});
            const Index ckk = g.c * g.kh * g.kw;
            ConstMatMap wm(w.raw(), g.o, ckk);
            RowMatrix col;
            for (Index n = 0; n < g.n; ++n) {
                im2col(x.raw() + n * g.c * g.h * g.w, g, col);
                MatMap(out.raw() + n * g.o * g.oh * g.ow, g.o, g.oh * g.ow).noalias() = wm * col;
            }
            return out;
        }
        case Op::DepthwiseConv2d: {
            const Tensor& x = in(node, 0);
            const Tensor& w = in(node, 1);
            const auto g = conv_geometry(id, node.op, x, w, params<ConvParams>(node), true);
            Tensor out({g.n, g.c, g.oh, g.ow});
            for (Index n = 0; n < g.n; ++n) {
                for (Index c = 0; c < g.c; ++c) {
                    const double* plane = x.raw() + (n * g.c + c) * g.h * g.w;
                    const double* k = w.raw() + c * g.kh * g.kw;
                    double* o = out.raw() + (n * g.c + c) * g.oh * g.ow;
                    for (Index oi = 0; oi < g.oh; ++oi) {
                        for (Index oj = 0; oj < g.ow; ++oj) {
                            double acc = 0.0;
                            for (Index ki = 0; ki < g.kh; ++ki) {
                                const Index ii = oi * g.stride - g.pad + ki;
                                if (ii < 0 || ii >= g.h) continue;
                                for (Index kj = 0; kj < g.kw; ++kj) {
                                    const Index jj = oj * g.stride - g.pad + kj;
                                    if (jj < 0 || jj >= g.w) continue;
                                    acc += k[ki * g.kw + kj] * plane[ii * g.w + jj];
                                }
                            }
                            o[oi * g.ow + oj] = acc;
                        }
                    }
                }
            }
            return out;
        }
        case Op::Add: {
            const Tensor& a = in(node, 0);
            const Tensor& b = in(node, 1);
            if (a.shape() == b.shape()) return Tensor(a.shape(), a.data() + b.data());
            if (b.rank() == 1 && a.rank() >= 2 && b.dim(0) == a.dim(1)) {
                Tensor out = a;
                const Index channels = a.dim(1);
                const Index inner = a.size() / (a.dim(0) * channels);
                for (Index n = 0; n < a.dim(0); ++n) {
                    for (Index c = 0; c < channels; ++c) {
                        out.data().segment((n * channels + c) * inner, inner) += b[c];
                    }
                }
                return out;
            }
            fail(id, node.op, "cannot add " + to_string(a.shape()) + " and " + to_string(b.shape()));
        }
        case Op::Sub:
        case Op::Mul: {
            const Tensor& a = in(node, 0);
            const Tensor& b = in(node, 1);
            if (a.shape() != b.shape()) {
                fail(id, node.op, "shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
            }
            return node.op == Op::Sub ? Tensor(a.shape(), a.data() - b.data())
                                      : Tensor(a.shape(), a.data() * b.data());
        }
        case Op::Scale: {
            const Tensor& a = in(node, 0);
            return Tensor(a.shape(), a.data() * params<ScaleParams>(node).factor);
        }
        case Op::Relu: {
            const Tensor& a = in(node, 0);
            return Tensor(a.shape(), a.data().max(0.0));
        }
        case Op::AvgPool: {
            const Tensor& x = in(node, 0);
            const Index k = params<PoolParams>(node).kernel;
            if (x.rank() < 2) fail(id, node.op, "input must have rank >= 2");
            const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
            if (k < 1 || h < k || w < k) fail(id, node.op, "kernel " + std::to_string(k) + " does not fit " + to_string(x.shape()));
            const Index oh = h / k, ow = w / k, planes = x.size() / (h * w);
            Tensor out(trailing_replaced(x.shape(), oh, ow));
            const double inv = 1.0 / static_cast<double>(k * k);
            for (Index p = 0; p < planes; ++p) {
                const double* src = x.raw() + p * h * w;
                double* dst = out.raw() + p * oh * ow;
                for (Index oi = 0; oi < oh; ++oi) {
                    for (Index oj = 0; oj < ow; ++oj) {
                        double acc = 0.0;
                        for (Index a = 0; a < k; ++a) {
                            for (Index b = 0; b < k; ++b) acc += src[(oi * k + a) * w + oj * k + b];
                        }
                        dst[oi * ow + oj] = acc * inv;
                    }
                }
            }
            return out;
        }
        case Op::Flatten: {
            const Tensor& x = in(node, 0);
            if (x.rank() < 1) fail(id, node.op, "cannot flatten a scalar");
            return x.reshaped({x.dim(0), x.size() / x.dim(0)});
        }
        case Op::Softmax: {
            const Tensor& x = in(node, 0);
            if (x.rank() < 1) fail(id, node.op, "softmax of a scalar");
            const double floor = params<SoftmaxParams>(node).floor;
            const Index k = x.dim(x.rank() - 1);
            const Index rows = x.size() / k;
            Tensor out(x.shape());
            for (Index r = 0; r < rows; ++r) {
                auto src = x.data().segment(r * k, k);
                auto dst = out.data().segment(r * k, k);
                dst = (src - src.maxCoeff()).exp();
                dst /= dst.sum();
                if (floor > 0.0) {
                    dst = dst.max(floor);
                    dst /= dst.sum();
                }
            }
            return out;
        }
        case Op::Log: {
            const Tensor& a = in(node, 0);
            return Tensor(a.shape(), a.data().log());
        }
        case Op::Sum:
            return Tensor::scalar(in(node, 0).data().sum());
        case Op::Mean:
            return Tensor::scalar(in(node, 0).data().mean());
        case Op::Gather: {
            const Tensor& x = in(node, 0);
            const auto& idx = params<GatherParams>(node).indices;
            const Index n = static_cast<Index>(idx.size());
            if (n == 0) fail(id, node.op, "no indices");
            Index k = 0;
            if (x.rank() == 2 && x.dim(0) == n) {
                k = x.dim(1);
            } else if (x.rank() == 1) {
                k = x.dim(0);
            } else {
                fail(id, node.op, "cannot gather " + std::to_string(n) + " indices from " + to_string(x.shape()));
            }
            Tensor out({n});
            for (Index i = 0; i < n; ++i) {
                const Index j = idx[static_cast<std::size_t>(i)];
                if (j < 0 || j >= k) fail(id, node.op, "index " + std::to_string(j) + " out of range " + std::to_string(k));
                out[i] = x.rank() == 2 ? x[i * k + j] : x[j];
            }
            return out;
        }
        case Op::ResizeBilinear: {
            const Tensor& x = in(node, 0);
            const auto& p = params<ResizeParams>(node);
            if (x.rank() < 2) fail(id, node.op, "input must have rank >= 2");
            if (p.out_h < 1 || p.out_w < 1) fail(id, node.op, "zero-sized output");
            const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1), planes = x.size() / (h * w);
            const auto ah = axis_weights(h, p.out_h);
            const auto aw = axis_weights(w, p.out_w);
            Tensor out(trailing_replaced(x.shape(), p.out_h, p.out_w));
            for (Index pl = 0; pl < planes; ++pl) {
                const double* src = x.raw() + pl * h * w;
                double* dst = out.raw() + pl * p.out_h * p.out_w;
                for (Index i = 0; i < p.out_h; ++i) {
                    const auto si = static_cast<std::size_t>(i);
                    const double ly = ah.lambda[si];
                    const double* r0 = src + ah.lo[si] * w;
                    const double* r1 = src + ah.hi[si] * w;
                    for (Index j = 0; j < p.out_w; ++j) {
                        const auto sj = static_cast<std::size_t>(j);
                        const double lx = aw.lambda[sj];
                        const Index c0 = aw.lo[sj], c1 = aw.hi[sj];
                        dst[i * p.out_w + j] = (1.0 - ly) * ((1.0 - lx) * r0[c0] + lx * r0[c1]) +
                                               ly * ((1.0 - lx) * r1[c0] + lx * r1[c1]);
                    }
                }
            }
            return out;
        }
        case Op::ZeroPad: {
            const Tensor& x = in(node, 0);
            const auto& p = params<PadParams>(node);
            if (x.rank() < 2) fail(id, node.op, "input must have rank >= 2");
            const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1), planes = x.size() / (h * w);
            if (p.top < 0 || p.left < 0 || p.top + h > p.out_h || p.left + w > p.out_w) {
                fail(id, node.op, to_string(x.shape()) + " at (" + std::to_string(p.top) + "," +
                                      std::to_string(p.left) + ") overflows " + std::to_string(p.out_h) +
                                      "x" + std::to_string(p.out_w));
            }
            Tensor out(trailing_replaced(x.shape(), p.out_h, p.out_w));
            for (Index pl = 0; pl < planes; ++pl) {
                for (Index i = 0; i < h; ++i) {
                    std::copy_n(x.raw() + (pl * h + i) * w, w,
                                out.raw() + pl * p.out_h * p.out_w + (p.top + i) * p.out_w + p.left);
                }
            }
            return out;
        }
        }
        fail(id, node.op, "unknown op");
    }

    void propagate(NodeId id, const Node& node, const Tensor& dy, const std::vector<bool>& needs) {
        auto wants = [&](std::size_t k) { return needs[node.inputs[k]]; };
        switch (node.op) {
        case Op::Input:
        case Op::Constant:
            return;
        case Op::MatMul: {
            const Tensor& a = in(node, 0);
            const Tensor& b = in(node, 1);
            const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
            auto dym = dy.matrix(m, n);
            if (wants(0)) {
                Tensor da(a.shape());
                da.matrix(m, k).noalias() = dym * b.matrix(k, n).transpose();
                accumulate(node.inputs[0], std::move(da));
            }
            if (wants(1)) {
                Tensor db(b.shape());
                db.matrix(k, n).noalias() = a.matrix(m, k).transpose() * dym;
                accumulate(node.inputs[1], std::move(db));
            }
            return;
        }
        case Op::Conv2d: {
            const Tensor& x = in(node, 0);
            const Tensor& w = in(node, 1);
            const auto g = conv_geometry(id, node.op, x, w, params<ConvParams>(node), false);
            const Index ckk = g.c * g.kh * g.kw, spatial = g.oh * g.ow;
            ConstMatMap wm(w.raw(), g.o, ckk);
            Tensor dx(x.shape());
            Tensor dw(w.shape());
            RowMatrix col, dcol;
            for (Index n = 0; n < g.n; ++n) {
                ConstMatMap dyn(dy.raw() + n * g.o * spatial, g.o, spatial);
                if (wants(1)) {
                    im2col(x.raw() + n * g.c * g.h * g.w, g, col);
                    dw.matrix(g.o, ckk).noalias() += dyn * col.transpose();
                }
                if (wants(0)) {
                    dcol.noalias() = wm.transpose() * dyn;
                    col2im(dcol, g, dx.raw() + n * g.c * g.h * g.w);
                }
            }
            if (wants(0)) accumulate(node.inputs[0], std::move(dx));
            if (wants(1)) accumulate(node.inputs[1], std::move(dw));
            return;
        }
        case Op::DepthwiseConv2d: {
            const Tensor& x = in(node, 0);
            const Tensor& w = in(node, 1);
            const auto g = conv_geometry(id, node.op, x, w, params<ConvParams>(node), true);
            Tensor dx(x.shape());
            Tensor dw(w.shape());
            for (Index n = 0; n < g.n; ++n) {
                for (Index c = 0; c < g.c; ++c) {
                    const double* plane = x.raw() + (n * g.c + c) * g.h * g.w;
                    double* dplane = dx.raw() + (n * g.c + c) * g.h * g.w;
                    const double* k = w.raw() + c * g.kh * g.kw;
                    double* dk = dw.raw() + c * g.kh * g.kw;
                    const double* d = dy.raw() + (n * g.c + c) * g.oh * g.ow;
                    for (Index oi = 0; oi < g.oh; ++oi) {
                        for (Index oj = 0; oj < g.ow; ++oj) {
                            const double go = d[oi * g.ow + oj];
                            for (Index ki = 0; ki < g.kh; ++ki) {
                                const Index ii = oi * g.stride - g.pad + ki;
                                if (ii < 0 || ii >= g.h) continue;
                                for (Index kj = 0; kj < g.kw; ++kj) {
                                    const Index jj = oj * g.stride - g.pad + kj;
                                    if (jj < 0 || jj >= g.w) continue;
                                    dk[ki * g.kw + kj] += go * plane[ii * g.w + jj];
                                    dplane[ii * g.w + jj] += go * k[ki * g.kw + kj];
                                }
                            }
                        }
                    }
                }
            }
            if (wants(0)) accumulate(node.inputs[0], std::move(dx));
            if (wants(1)) accumulate(node.inputs[1], std::move(dw));
            return;
        }
        case Op::Add: {
            const Tensor& a = in(node, 0);
            const Tensor& b = in(node, 1);
            if (wants(0)) accumulate(node.inputs[0], dy);
            if (wants(1)) {
                if (a.shape() == b.shape()) {
                    accumulate(node.inputs[1], dy);
                } else {
                    Tensor db(b.shape());
                    const Index channels = a.dim(1);
                    const Index inner = a.size() / (a.dim(0) * channels);
                    for (Index n = 0; n < a.dim(0); ++n) {
                        for (Index c = 0; c < channels; ++c) {
                            db[c] += dy.data().segment((n * channels + c) * inner, inner).sum();
                        }
                    }
                    accumulate(node.inputs[1], std::move(db));
                }
            }
            return;
        }
        case Op::Sub:
            if (wants(0)) accumulate(node.inputs[0], dy);
            if (wants(1)) accumulate(node.inputs[1], Tensor(dy.shape(), -dy.data()));
            return;
        case Op::Mul:
            if (wants(0)) accumulate(node.inputs[0], Tensor(dy.shape(), dy.data() * in(node, 1).data()));
            if (wants(1)) accumulate(node.inputs[1], Tensor(dy.shape(), dy.data() * in(node, 0).data()));
            return;
        case Op::Scale:
            accumulate(node.inputs[0], Tensor(dy.shape(), dy.data() * params<ScaleParams>(node).factor));
            return;
        case Op::Relu: {
            const auto& a = in(node, 0).data();
            accumulate(node.inputs[0], Tensor(dy.shape(), (a > 0.0).select(dy.data(), 0.0)));
            return;
        }
        case Op::AvgPool: {
            const Tensor& x = in(node, 0);
            const Index k = params<PoolParams>(node).kernel;
            const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
            const Index oh = h / k, ow = w / k, planes = x.size() / (h * w);
            const double inv = 1.0 / static_cast<double>(k * k);
            Tensor dx(x.shape());
            for (Index p = 0; p < planes; ++p) {
                double* dst = dx.raw() + p * h * w;
                const double* src = dy.raw() + p * oh * ow;
                for (Index oi = 0; oi < oh; ++oi) {
                    for (Index oj = 0; oj < ow; ++oj) {
                        const double v = src[oi * ow + oj] * inv;
                        for (Index a = 0; a < k; ++a) {
                            for (Index b = 0; b < k; ++b) dst[(oi * k + a) * w + oj * k + b] = v;
                        }
                    }
                }
            }
            accumulate(node.inputs[0], std::move(dx));
            return;
        }
        case Op::Flatten:
            accumulate(node.inputs[0], dy.reshaped(in(node, 0).shape()));
            return;
        case Op::Softmax: {
            const Tensor& x = in(node, 0);
            const Tensor& y = values_[id];
            const double floor = params<SoftmaxParams>(node).floor;
            const Index k = x.dim(x.rank() - 1);
            const Index rows = x.size() / k;
            Tensor dx(x.shape());
            Eigen::ArrayXd s(k), ds(k);
            for (Index r = 0; r < rows; ++r) {
                auto xr = x.data().segment(r * k, k);
                auto yr = y.data().segment(r * k, k);
                auto gr = dy.data().segment(r * k, k);
                s = (xr - xr.maxCoeff()).exp();
                s /= s.sum();
                if (floor > 0.0) {
                    // y = c / sum(c), c = max(s, floor)
                    const double total = s.max(floor).sum();
                    ds = (gr - (gr * yr).sum()) / total;
                    ds = (s > floor).select(ds, 0.0);
                } else {
                    ds = gr;
                }
                dx.data().segment(r * k, k) = s * (ds - (s * ds).sum());
            }
            accumulate(node.inputs[0], std::move(dx));
            return;
        }
        case Op::Log:
            accumulate(node.inputs[0], Tensor(dy.shape(), dy.data() / in(node, 0).data()));
            return;
        case Op::Sum:
            accumulate(node.inputs[0], Tensor::full(in(node, 0).shape(), dy.item()));
            return;
        case Op::Mean: {
            const Tensor& x = in(node, 0);
            accumulate(node.inputs[0], Tensor::full(x.shape(), dy.item() / static_cast<double>(x.size())));
            return;
        }
        case Op::Gather: {
            const Tensor& x = in(node, 0);
            const auto& idx = params<GatherParams>(node).indices;
            Tensor dx(x.shape());
            const Index k = x.dim(x.rank() - 1);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const Index flat = x.rank() == 2 ? static_cast<Index>(i) * k + idx[i] : idx[i];
                dx[flat] += dy[static_cast<Index>(i)];
            }
            accumulate(node.inputs[0], std::move(dx));
            return;
        }
        case Op::ResizeBilinear: {
            const Tensor& x = in(node, 0);
            const auto& p = params<ResizeParams>(node);
            const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1), planes = x.size() / (h * w);
            const auto ah = axis_weights(h, p.out_h);
            const auto aw = axis_weights(w, p.out_w);
            Tensor dx(x.shape());
            for (Index pl = 0; pl < planes; ++pl) {
                double* dsrc = dx.raw() + pl * h * w;
                const double* g = dy.raw() + pl * p.out_h * p.out_w;
                for (Index i = 0; i < p.out_h; ++i) {
                    const auto si = static_cast<std::size_t>(i);
                    const double ly = ah.lambda[si];
                    double* r0 = dsrc + ah.lo[si] * w;
                    double* r1 = dsrc + ah.hi[si] * w;
                    for (Index j = 0; j < p.out_w; ++j) {
                        const auto sj = static_cast<std::size_t>(j);
                        const double lx = aw.lambda[sj];
                        const double v = g[i * p.out_w + j];
                        r0[aw.lo[sj]] += (1.0 - ly) * (1.0 - lx) * v;
                        r0[aw.hi[sj]] += (1.0 - ly) * lx * v;
                        r1[aw.lo[sj]] += ly * (1.0 - lx) * v;
                        r1[aw.hi[sj]] += ly * lx * v;
                    }
                }
            }
            accumulate(node.inputs[0], std::move(dx));
            return;
        }
        case Op::ZeroPad: {
            const Tensor& x = in(node, 0);
            const auto& p = params<PadParams>(node);
            const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1), planes = x.size() / (h * w);
            Tensor dx(x.shape());
            for (Index pl = 0; pl < planes; ++pl) {
                for (Index i = 0; i < h; ++i) {
                    std::copy_n(dy.raw() + pl * p.out_h * p.out_w + (p.top + i) * p.out_w + p.left, w,
                                dx.raw() + (pl * h + i) * w);
                }
            }
            accumulate(node.inputs[0], std::move(dx));
            return;
        }
        }
    }

    const Graph& graph_;
    const Bindings& bindings_;
    std::vector<bool> live_;
    std::vector<Tensor> values_;
    std::vector<std::optional<Tensor>> adj_;
};

}  // namespace

const char* op_name(Op op) {
    switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::DepthwiseConv2d: return "depthwise_conv2d";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Scale: return "scale";
    case Op::Mul: return "mul";
    case Op::Relu: return "relu";
    case Op::AvgPool: return "avg_pool";
    case Op::Flatten: return "flatten";
    case Op::Softmax: return "softmax";
    case Op::Log: return "log";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Gather: return "gather";
    case Op::ResizeBilinear: return "resize_bilinear";
    case Op::ZeroPad: return "zero_pad";
    }
    return "?";
}

NodeId Graph::push(Op op, std::vector<NodeId> inputs, Payload payload) {
    for (NodeId in : inputs) {
        if (in >= nodes_.size()) {
            throw std::invalid_argument(std::string(op_name(op)) + ": input node " + std::to_string(in) +
                                        " does not exist yet");
        }
    }
    nodes_.push_back(Node{op, std::move(inputs), std::move(payload)});
    return nodes_.size() - 1;
}

NodeId Graph::input(std::string name) {
    if (find_input(name)) throw std::invalid_argument("duplicate graph input '" + name + "'");
    return push(Op::Input, {}, InputParams{std::move(name)});
}

NodeId Graph::constant(Tensor value) {
    return constant(std::make_shared<const Tensor>(std::move(value)));
}

NodeId Graph::constant(std::shared_ptr<const Tensor> value) {
    if (!value) throw std::invalid_argument("null constant");
    return push(Op::Constant, {}, ConstantParams{std::move(value)});
}

NodeId Graph::matmul(NodeId a, NodeId b) { return push(Op::MatMul, {a, b}); }
NodeId Graph::conv2d(NodeId x, NodeId w, ConvParams p) { return push(Op::Conv2d, {x, w}, p); }
NodeId Graph::depthwise_conv2d(NodeId x, NodeId w, ConvParams p) {
    return push(Op::DepthwiseConv2d, {x, w}, p);
}
NodeId Graph::add(NodeId a, NodeId b) { return push(Op::Add, {a, b}); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(Op::Sub, {a, b}); }
NodeId Graph::scale(NodeId a, double factor) { return push(Op::Scale, {a}, ScaleParams{factor}); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(Op::Mul, {a, b}); }
NodeId Graph::relu(NodeId a) { return push(Op::Relu, {a}); }
NodeId Graph::avg_pool(NodeId x, Index kernel) { return push(Op::AvgPool, {x}, PoolParams{kernel}); }
NodeId Graph::flatten(NodeId x) { return push(Op::Flatten, {x}); }
NodeId Graph::softmax(NodeId x, double floor) {
    if (floor < 0.0) throw std::invalid_argument("softmax floor must be non-negative");
    return push(Op::Softmax, {x}, SoftmaxParams{floor});
}
NodeId Graph::log(NodeId x) { return push(Op::Log, {x}); }
NodeId Graph::sum(NodeId x) { return push(Op::Sum, {x}); }
NodeId Graph::mean(NodeId x) { return push(Op::Mean, {x}); }
NodeId Graph::gather(NodeId x, std::vector<Index> indices) {
    return push(Op::Gather, {x}, GatherParams{std::move(indices)});
}
NodeId Graph::resize_bilinear(NodeId x, Index out_h, Index out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: zero-sized output");
    return push(Op::ResizeBilinear, {x}, ResizeParams{out_h, out_w});
}
NodeId Graph::zero_pad(NodeId x, Index top, Index left, Index out_h, Index out_w) {
    return push(Op::ZeroPad, {x}, PadParams{top, left, out_h, out_w});
}

void Graph::set_output(NodeId id) {
    if (id >= nodes_.size()) throw std::invalid_argument("output node does not exist");
    output_ = id;
}

NodeId Graph::output() const {
    if (!output_) throw std::invalid_argument("graph has no output node");
    return *output_;
}

std::optional<NodeId> Graph::find_input(const std::string& name) const {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].op == Op::Input && std::get<InputParams>(nodes_[id].payload).name == name) return id;
    }
    return std::nullopt;
}

Tensor eval(const Graph& graph, const Bindings& bindings) {
    Executor ex(graph, bindings);
    return ex.forward();
}

Gradients grad(const Graph& graph, const Bindings& bindings, const std::vector<std::string>& wrt) {
    return value_and_grad(graph, bindings, wrt).grads;
}

ValueAndGrad value_and_grad(const Graph& graph, const Bindings& bindings,
                            const std::vector<std::string>& wrt) {
    Executor ex(graph, bindings);
    Tensor value = ex.forward();
    Gradients grads = ex.backward(wrt);
    return {std::move(value), std::move(grads)};
}

Tensor resize_bilinear(const Tensor& image, Index out_h, Index out_w) {
    Graph g;
    g.set_output(g.resize_bilinear(g.input("image"), out_h, out_w));
    return eval(g, {{"image", image}});
}

Tensor zero_pad(const Tensor& image, Index top, Index left, Index out_h, Index out_w) {
    Graph g;
    g.set_output(g.zero_pad(g.input("image"), top, left, out_h, out_w));
    return eval(g, {{"image", image}});
}

}  // namespace ikd::ad

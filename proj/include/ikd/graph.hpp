#pragma once

#include "ikd/tensor.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

/// Minimal reverse-mode automatic differentiation over dense tensors.
///
/// A Graph is an append-only, topologically ordered list of nodes. Free
/// inputs are named and bound at evaluation time; constants are held by
/// shared pointer so large weight tensors are never copied into a graph.
/// A built graph is immutable: eval() and grad() allocate private scratch
/// and may be called concurrently on the same graph.
namespace ikd::ad {

using NodeId = std::size_t;

enum class Op {
    Input,
    Constant,
    MatMul,
    Conv2d,
    DepthwiseConv2d,
    Add,
    Sub,
    Scale,
    Mul,
    Relu,
    AvgPool,
    Flatten,
    Softmax,
    Log,
    Sum,
    Mean,
    Gather,
    ResizeBilinear,
    ZeroPad,
};

const char* op_name(Op op);

struct InputParams {
    std::string name;
};
struct ConstantParams {
    std::shared_ptr<const Tensor> value;
};
struct ConvParams {
    Index stride = 1;
    Index padding = 0;
};
struct PoolParams {
    Index kernel = 2;
};
struct ScaleParams {
    double factor = 1.0;
};
/// floor == 0 is the plain softmax; floor > 0 clamps every probability at
/// floor and renormalizes.
struct SoftmaxParams {
    double floor = 0.0;
};
struct GatherParams {
    std::vector<Index> indices;
};
struct ResizeParams {
    Index out_h = 1;
    Index out_w = 1;
};
struct PadParams {
    Index top = 0;
    Index left = 0;
    Index out_h = 1;
    Index out_w = 1;
};

using Payload = std::variant<std::monostate, InputParams, ConstantParams, ConvParams, PoolParams,
                             ScaleParams, SoftmaxParams, GatherParams, ResizeParams, PadParams>;

struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Payload payload;
};

class Graph {
public:
    NodeId input(std::string name);
    NodeId constant(Tensor value);
    NodeId constant(std::shared_ptr<const Tensor> value);

    /// a [M,K] x b [K,N] -> [M,N]
    NodeId matmul(NodeId a, NodeId b);
    /// x [N,C,H,W], w [O,C,kh,kw] -> [N,O,OH,OW]
    NodeId conv2d(NodeId x, NodeId w, ConvParams params = {});
    /// x [N,C,H,W], w [C,1,kh,kw] -> [N,C,OH,OW]
    NodeId depthwise_conv2d(NodeId x, NodeId w, ConvParams params = {});
    /// Same-shape sum, or bias-add when b is rank 1 with b.size() == a.dim(1).
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    NodeId mul(NodeId a, NodeId b);
    NodeId relu(NodeId a);
    /// Non-overlapping average pooling over the trailing two axes.
    NodeId avg_pool(NodeId x, Index kernel);
    /// [N, ...] -> [N, prod(...)]
    NodeId flatten(NodeId x);
    /// Along the last axis.
    NodeId softmax(NodeId x, double floor = 0.0);
    NodeId log(NodeId x);
    NodeId sum(NodeId x);
    NodeId mean(NodeId x);
    /// x [N,K] -> [N] picking x[i, indices[i]]; x [K] -> [len(indices)].
    NodeId gather(NodeId x, std::vector<Index> indices);
    /// Bilinear, align-corners off, over the trailing two axes.
    NodeId resize_bilinear(NodeId x, Index out_h, Index out_w);
    /// Places x at (top, left) inside a zero canvas of out_h x out_w.
    NodeId zero_pad(NodeId x, Index top, Index left, Index out_h, Index out_w);

    void set_output(NodeId id);
    NodeId output() const;
    bool has_output() const { return output_.has_value(); }

    const std::vector<Node>& nodes() const { return nodes_; }
    std::optional<NodeId> find_input(const std::string& name) const;

private:
    NodeId push(Op op, std::vector<NodeId> inputs, Payload payload = {});

    std::vector<Node> nodes_;
    std::optional<NodeId> output_;
};

using Bindings = std::map<std::string, Tensor, std::less<>>;
using Gradients = std::map<std::string, Tensor, std::less<>>;

struct ValueAndGrad {
    Tensor value;
    Gradients grads;
};

/// Forward value of the graph output.
Tensor eval(const Graph& graph, const Bindings& bindings);

/// d(output)/d(input) for every requested input. The output must be a
/// single element.
Gradients grad(const Graph& graph, const Bindings& bindings, const std::vector<std::string>& wrt);

ValueAndGrad value_and_grad(const Graph& graph, const Bindings& bindings,
                            const std::vector<std::string>& wrt);

/// Convenience wrappers evaluating a single primitive on a CHW (or NCHW)
/// image.
Tensor resize_bilinear(const Tensor& image, Index out_h, Index out_w);
Tensor zero_pad(const Tensor& image, Index top, Index left, Index out_h, Index out_w);

}  // namespace ikd::ad

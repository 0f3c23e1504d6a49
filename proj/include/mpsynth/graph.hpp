#pragma once

#include "mpsynth/param_store.hpp"
#include "mpsynth/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mpsynth {

template <typename T>
class Graph;

/// Handle to a node recorded in a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
public:
    Var() = default;

    Graph<T>* graph() const noexcept { return graph_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return graph_ != nullptr; }

    const BasicTensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    friend class Graph<T>;
    Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Append-only record of a forward pass. Append order is a topological
/// order, so backward is a single reverse sweep that visits each node once.
///
/// Parameters are resolved by name against the bound ParamStores the first
/// time they are requested; repeated requests return the same node, so a
/// weight shared by two branches accumulates both gradients.
template <typename T>
class Graph {
public:
    /// Propagates the node's output gradient into its inputs' gradients.
    using BackwardFn = std::function<void(Graph&, const BasicTensor<T>& out_grad)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Makes `store` visible to `param()`. Parameters of a frozen store
    /// enter the graph as constants and receive no gradient.
    void bind(ParamStore<T>& store, bool trainable);
    bool is_bound(const ParamStore<T>& store) const;

    /// Missing parameters requested through the shaped `param()` overload are
    /// created He-normal (zero when fan_in == 0) in the first trainable store,
    /// each from its own named substream of `seed`.
    void enable_param_init(std::uint64_t seed) { init_seed_ = seed; }

    /// Records nothing for backward; every node is a constant.
    void disable_grad() { grad_enabled_ = false; }
    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var<T> input(BasicTensor<T> value);
    Var<T> leaf(BasicTensor<T> value, bool requires_grad, std::string name = {});
    Var<T> param(const std::string& name);
    Var<T> param(const std::string& name, const Shape& shape, std::size_t fan_in);

    /// Gradients of a scalar loss w.r.t. every trainable parameter and named
    /// leaf that the loss depends on. Consumes the graph.
    std::map<std::string, BasicTensor<T>> backward(Var<T> loss);

    bool consumed() const noexcept { return consumed_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Branch-decision fingerprint of piecewise ops (relu, max, clamp, ...).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    void track_kinks(bool on) { track_kinks_ = on; }
    bool tracking_kinks() const noexcept { return track_kinks_; }
    std::uint64_t kink_signature() const noexcept { return kink_hash_; }
    void note_kink(std::uint64_t decision);

    // Used by primitives.
    Var<T> record(std::string_view op, BasicTensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn);
    const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    /// Gradient buffer of node `id`, zero-allocated on first access.
    BasicTensor<T>& grad(std::size_t id);
    void check_owner(const Var<T>& v, std::string_view op) const;

private:
    struct Node {
        BasicTensor<T> value;
        BasicTensor<T> grad;
        BackwardFn backward;
        std::string name;
        bool requires_grad = false;
        bool leaf = false;
    };

    struct Binding {
        ParamStore<T>* store;
        bool trainable;
    };

    std::vector<Node> nodes_;
    std::vector<Binding> bindings_;
    std::unordered_map<std::string, std::size_t> param_nodes_;
    std::optional<std::uint64_t> init_seed_;
    std::uint64_t kink_hash_ = 0xCBF29CE484222325ULL;
    bool grad_enabled_ = true;
    bool track_kinks_ = false;
    bool consumed_ = false;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const
{
    if (!graph_)
        throw ContractError("use of an unbound Var");
    return graph_->value(id_);
}

enum class PoolKind { max, average };
enum class ActKind { sigmoid, relu, leaky_relu, log, neg, abs };
enum class BinaryKind { add, sub, mul, max };

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kLogFloor = 1e-7;

// Primitives. Every one validates its shapes (ContractError), rejects
// non-finite results (NonFiniteError) and records an analytic backward.

/// 2-D cross-correlation with zero padding. weight is C_out x C_in x k x k.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t pad);

/// Windowed pooling with a k x k window. Max ties go to the first element
/// in row-major window order.
template <typename T>
Var<T> pool(Var<T> input, PoolKind kind, std::size_t k, std::size_t stride);

/// Pools every channel to 1 x 1.
template <typename T>
Var<T> global_pool(Var<T> input, PoolKind kind);

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2x(Var<T> input);

/// Affine map of an N x C input by a C_out x C weight.
template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias);

template <typename T>
Var<T> activation(Var<T> input, ActKind kind);

/// Shapes must match, or b is N x C x 1 x 1 against an N x C x H x W a.
/// max routes the gradient to a on ties.
template <typename T>
Var<T> elementwise(Var<T> a, Var<T> b, BinaryKind kind);

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& inputs);

template <typename T>
Var<T> slice_channels(Var<T> input, std::size_t begin, std::size_t count);

template <typename T>
Var<T> reshape(Var<T> input, Shape shape);

/// scale * x + shift
template <typename T>
Var<T> affine(Var<T> input, double scale, double shift);

/// Gradient passes where lo <= x <= hi and is zero outside.
template <typename T>
Var<T> clamp(Var<T> input, double lo, double hi);

/// Scalar (shape {1}) reductions, accumulated in fixed row-major order.
template <typename T>
Var<T> sum(Var<T> input);
template <typename T>
Var<T> mean(Var<T> input);

// Conveniences over the primitives.
template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return elementwise(a, b, BinaryKind::add); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return elementwise(a, b, BinaryKind::sub); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return elementwise(a, b, BinaryKind::mul); }
template <typename T>
Var<T> relu(Var<T> x) { return activation(x, ActKind::relu); }
template <typename T>
Var<T> sigmoid(Var<T> x) { return activation(x, ActKind::sigmoid); }
template <typename T>
Var<T> scale(Var<T> x, double s) { return affine(x, s, 0.0); }

/// mean |a - b| over all elements.
template <typename T>
Var<T> mean_abs_diff(Var<T> a, Var<T> b) { return mean(activation(a - b, ActKind::abs)); }

} // namespace mpsynth

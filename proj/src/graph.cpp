#include "mpsynth/graph.hpp"

#include "mpsynth/rng.hpp"

#include <cmath>
#include <cstring>

namespace mpsynth {

std::string shape_string(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
std::uint64_t content_hash(const ParamStore<T>& store)
{
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& [name, t] : store) {
        mix(name.data(), name.size());
        for (auto d : t.shape())
            mix(&d, sizeof(d));
        mix(t.raw(), t.size() * sizeof(T));
    }
    return h;
}

template std::uint64_t content_hash(const ParamStore<float>&);
template std::uint64_t content_hash(const ParamStore<double>&);

template <typename T>
void Graph<T>::bind(ParamStore<T>& store, bool trainable)
{
    bindings_.push_back({&store, trainable});
}

template <typename T>
bool Graph<T>::is_bound(const ParamStore<T>& store) const
{
    for (const auto& b : bindings_)
        if (b.store == &store)
            return true;
    return false;
}

template <typename T>
Var<T> Graph<T>::input(BasicTensor<T> value)
{
    return leaf(std::move(value), false);
}

template <typename T>
Var<T> Graph<T>::leaf(BasicTensor<T> value, bool requires_grad, std::string name)
{
    if (consumed_)
        throw StateError("graph already consumed by backward");
    if (!value.all_finite())
        throw NonFiniteError("non-finite value in leaf '" + name + "'");
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad && grad_enabled_;
    node.name = std::move(name);
    node.leaf = true;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::param(const std::string& name)
{
    if (auto it = param_nodes_.find(name); it != param_nodes_.end())
        return Var<T>(this, it->second);
    for (const auto& b : bindings_) {
        if (b.store->contains(name)) {
            Var<T> v = leaf(b.store->get(name), b.trainable, name);
            param_nodes_.emplace(name, v.id());
            return v;
        }
    }
    throw ContractError("parameter '" + name + "' is not bound to the graph");
}

template <typename T>
Var<T> Graph<T>::param(const std::string& name, const Shape& shape, std::size_t fan_in)
{
    bool known = param_nodes_.count(name) != 0;
    for (const auto& b : bindings_)
        known = known || b.store->contains(name);
    if (!known && init_seed_) {
        ParamStore<T>* target = nullptr;
        for (const auto& b : bindings_)
            if (b.trainable) {
                target = b.store;
                break;
            }
        if (!target)
            throw ContractError("parameter init requested without a trainable store");
        BasicTensor<T> t(shape);
        if (fan_in > 0) {
            Rng rng(derive_seed(*init_seed_, name));
            const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (auto& v : t.data())
                v = static_cast<T>(stddev * rng.normal());
        }
        target->set(name, std::move(t));
    }
    Var<T> v = param(name);
    if (v.shape() != shape)
        throw ContractError("parameter '" + name + "' has shape " + shape_string(v.shape()) + ", expected " +
                            shape_string(shape));
    return v;
}

template <typename T>
void Graph<T>::note_kink(std::uint64_t decision)
{
    kink_hash_ ^= decision + 0x9E3779B97F4A7C15ULL + (kink_hash_ << 6) + (kink_hash_ >> 2);
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, BasicTensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn)
{
    if (consumed_)
        throw StateError("graph already consumed by backward");
    for (std::size_t i = 0; i < value.size(); ++i)
        if (!std::isfinite(value[i]))
            throw NonFiniteError(std::string(op) + " produced a non-finite value at node " +
                                 std::to_string(nodes_.size()) + " (shape " + shape_string(value.shape()) +
                                 ", flat index " + std::to_string(i) + ")");
    Node node;
    node.value = std::move(value);
    node.name = std::string(op);
    if (grad_enabled_)
        for (auto id : inputs)
            node.requires_grad = node.requires_grad || nodes_.at(id).requires_grad;
    if (node.requires_grad)
        node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
BasicTensor<T>& Graph<T>::grad(std::size_t id)
{
    Node& n = nodes_.at(id);
    if (n.grad.empty())
        n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
}

template <typename T>
void Graph<T>::check_owner(const Var<T>& v, std::string_view op) const
{
    if (v.graph() != this)
        throw ContractError(std::string(op) + ": operand belongs to a different graph");
}

template <typename T>
std::map<std::string, BasicTensor<T>> Graph<T>::backward(Var<T> loss)
{
    if (consumed_)
        throw StateError("backward on a consumed graph");
    check_owner(loss, "backward");
    if (loss.value().size() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
    consumed_ = true;

    std::map<std::string, BasicTensor<T>> out;
    if (!nodes_[loss.id()].requires_grad)
        return out;
    grad(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty())
            continue;
        if (n.backward) {
            n.backward(*this, n.grad);
            n.backward = nullptr; // release saved state
        }
    }
    for (auto& n : nodes_)
        if (n.leaf && n.requires_grad && !n.name.empty())
            out[n.name] = n.grad.empty() ? BasicTensor<T>(n.value.shape()) : std::move(n.grad);
    return out;
}

template class Graph<float>;
template class Graph<double>;

} // namespace mpsynth

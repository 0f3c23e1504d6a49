#pragma once

#include "mpsynth/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mpsynth {

/// Named trainable tensors. Iteration is in name order, which fixes the
/// order of every optimizer sweep and serialization.
template <typename T>
class ParamStore {
public:
    using Map = std::map<std::string, BasicTensor<T>>;

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const BasicTensor<T>& get(const std::string& name) const
    {
        auto it = params_.find(name);
        if (it == params_.end())
            throw ContractError("unknown parameter '" + name + "'");
        return it->second;
    }

    BasicTensor<T>& get(const std::string& name)
    {
        auto it = params_.find(name);
        if (it == params_.end())
            throw ContractError("unknown parameter '" + name + "'");
        return it->second;
    }

    void set(const std::string& name, BasicTensor<T> value) { params_[name] = std::move(value); }

    std::size_t size() const noexcept { return params_.size(); }
    bool empty() const noexcept { return params_.empty(); }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& [_, t] : params_)
            n += t.size();
        return n;
    }

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [name, _] : params_)
            out.push_back(name);
        return out;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    template <typename U>
    ParamStore<U> cast() const
    {
        ParamStore<U> out;
        for (const auto& [name, t] : params_)
            out.set(name, t.template cast<U>());
        return out;
    }

    bool operator==(const ParamStore& other) const = default;

private:
    Map params_;
};

/// FNV-1a over names, shapes and raw bytes; used to assert weights are untouched.
template <typename T>
std::uint64_t content_hash(const ParamStore<T>& store);

} // namespace mpsynth

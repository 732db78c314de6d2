#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fogseg/tensor.hpp"

namespace fogseg {

// Ordered map from canonical dotted names ("rgb_encoder.down0.conv.weight")
// to tensors. Parameters always carry requires_grad; buffers (batch-norm
// running statistics) are tracked separately and never receive gradients.
template <typename T>
class ParamRegistry {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        check(!index_.count(name) && !buffer_index_.count(name),
              "ParamRegistry: duplicate name '", name, "'");
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.emplace_back(name, std::move(t));
        return params_.back().second;
    }

    Tensor<T>& add_buffer(const std::string& name, Tensor<T> t) {
        check(!index_.count(name) && !buffer_index_.count(name),
              "ParamRegistry: duplicate name '", name, "'");
        buffer_index_[name] = buffers_.size();
        buffers_.emplace_back(name, std::move(t));
        return buffers_.back().second;
    }

    bool has(const std::string& name) const {
        return index_.count(name) > 0 || buffer_index_.count(name) > 0;
    }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it != index_.end()) return params_[it->second].second;
        auto bit = buffer_index_.find(name);
        check(bit != buffer_index_.end(), "ParamRegistry: unknown name '", name, "'");
        return buffers_[bit->second].second;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }

    std::vector<std::pair<std::string, Tensor<T>>> params_with_prefix(
        const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (const auto& [name, t] : params_)
            if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
        return out;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::vector<std::pair<std::string, Tensor<T>>> buffers_;
    std::unordered_map<std::string, size_t> index_;
    std::unordered_map<std::string, size_t> buffer_index_;
};

template <typename T>
size_t param_count(const ParamRegistry<T>& reg) {
    return reg.param_count();
}

}  // namespace fogseg

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "xqnet/tensor.hpp"

namespace xqnet {

/// One gradient tensor per ParamStore entry, shape-matched.
template <class T>
struct BasicGradStore {
    std::vector<BasicTensor<T>> grads;

    void zero() {
        for (auto& g : grads) g.fill(T(0));
    }
    std::size_t size() const noexcept { return grads.size(); }
    BasicTensor<T>& operator[](std::size_t i) { return grads[i]; }
    const BasicTensor<T>& operator[](std::size_t i) const { return grads[i]; }
};

/// Named, ordered parameters. Non-trainable entries hold buffers such as
/// batch-norm running statistics; they are persisted but never updated by
/// the optimizer and excluded from trainable counts.
template <class T>
class BasicParamStore {
public:
    struct Entry {
        std::string name;
        BasicTensor<T> value;
        bool trainable = true;
    };

    std::size_t add(std::string name, BasicTensor<T> value, bool trainable = true) {
        const Shape s = value.shape();
        entries_.push_back(Entry{std::move(name), std::move(value), trainable});
        grads_.grads.emplace_back(trainable ? s : Shape());
        return entries_.size() - 1;
    }

    std::size_t size() const noexcept { return entries_.size(); }
    Entry& operator[](std::size_t i) { return entries_[i]; }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }
    BasicTensor<T>& value(std::size_t i) { return entries_[i].value; }
    const BasicTensor<T>& value(std::size_t i) const { return entries_[i].value; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].name == name) return i;
        }
        return std::nullopt;
    }

    BasicGradStore<T>& grads() noexcept { return grads_; }
    const BasicGradStore<T>& grads() const noexcept { return grads_; }
    void zero_grad() { grads_.zero(); }

    /// Fresh zero gradients laid out like this store.
    BasicGradStore<T> make_grads() const {
        BasicGradStore<T> g;
        for (const auto& e : entries_) g.grads.emplace_back(e.trainable ? e.value.shape() : Shape());
        return g;
    }

    std::size_t trainable_count() const noexcept {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.trainable ? e.value.size() : 0;
        return n;
    }
    std::size_t buffer_count() const noexcept {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.trainable ? 0 : e.value.size();
        return n;
    }

    template <class U>
    BasicParamStore<U> cast() const {
        BasicParamStore<U> out;
        for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
        return out;
    }

    /// Bitwise equality of names, flags and values.
    bool identical(const BasicParamStore& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = other.entries_[i];
            if (a.name != b.name || a.trainable != b.trainable || !a.value.identical(b.value)) return false;
        }
        return true;
    }

private:
    std::vector<Entry> entries_;
    BasicGradStore<T> grads_;
};

using ParamStore = BasicParamStore<float>;
using GradStore = BasicGradStore<float>;

}  // namespace xqnet

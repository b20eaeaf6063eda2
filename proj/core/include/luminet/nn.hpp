/* SPDX-FileCopyrightText: 2026 The LumiNet Desk Authors
 * SPDX-License-Identifier: Apache-2.0 */
#pragma once

#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "luminet/graph.hpp"
#include "luminet/rng.hpp"
#include "luminet/tensor.hpp"

namespace luminet {

/// Trainability partition of a parameter. The diffusion fine-tune updates only
/// kControl / kCrossAttn / kAdaptor and leaves kBase untouched.
enum class Partition { kBase, kControl, kCrossAttn, kAdaptor };

inline const char* partition_name(Partition p) {
    switch (p) {
        case Partition::kBase: return "base";
        case Partition::kControl: return "control";
        case Partition::kCrossAttn: return "cross_attn";
        case Partition::kAdaptor: return "adaptor";
    }
    return "?";
}

inline Partition partition_from_name(const std::string& s) {
    if (s == "base") return Partition::kBase;
    if (s == "control") return Partition::kControl;
    if (s == "cross_attn") return Partition::kCrossAttn;
    if (s == "adaptor") return Partition::kAdaptor;
    throw Error("unknown partition: " + s);
}

template <class T>
struct ParamT {
    std::string name;
    Partition partition = Partition::kBase;
    TensorT<T> value;
    TensorT<T> grad;
    TensorT<T> adam_m, adam_v; // lazily sized by the optimizer
};

/// Owns every parameter of a model; the single source for optimizers,
/// checkpoints and partition snapshots.
template <class T>
class ParamRegistryT {
public:
    ParamT<T>& create(std::string name, Partition part, TensorT<T> init) {
        auto p = std::make_unique<ParamT<T>>();
        p->name = std::move(name);
        p->partition = part;
        p->value = std::move(init);
        params_.push_back(std::move(p));
        return *params_.back();
    }

    std::vector<ParamT<T>*> all() {
        std::vector<ParamT<T>*> v;
        for (auto& p : params_) v.push_back(p.get());
        return v;
    }
    std::vector<const ParamT<T>*> all() const {
        std::vector<const ParamT<T>*> v;
        for (auto& p : params_) v.push_back(p.get());
        return v;
    }

    std::vector<ParamT<T>*> partition(std::initializer_list<Partition> parts) {
        std::vector<ParamT<T>*> v;
        for (auto& p : params_)
            for (Partition q : parts)
                if (p->partition == q) { v.push_back(p.get()); break; }
        return v;
    }

    ParamT<T>* find(const std::string& name) {
        for (auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    void zero_grads() {
        for (auto& p : params_)
            if (!p->grad.empty()) p->grad.fill(T(0));
    }

    /// Zero every parameter value (tests use this for the linearity checks).
    void zero_values() {
        for (auto& p : params_) p->value.fill(T(0));
    }

    int64_t count() const {
        int64_t n = 0;
        for (auto& p : params_) n += p->value.numel();
        return n;
    }

    /// FNV-1a over raw parameter bytes, in registration order.
    uint64_t value_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (auto& p : params_) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
            const size_t nb = size_t(p->value.numel()) * sizeof(T);
            for (size_t i = 0; i < nb; ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        }
        return h;
    }

private:
    std::vector<std::unique_ptr<ParamT<T>>> params_;
};

// ---------------------------------------------------------------------------
// Layers. Each holds pointers into a registry and exposes a graph-forward.
// ---------------------------------------------------------------------------

template <class T>
struct LinearT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;
    LinearT() = default;
    LinearT(ParamRegistryT<T>& reg, const std::string& prefix, Partition part,
            int in, int out, Rng& rng, double init_scale = 1.0) {
        const T stddev = T(init_scale * std::sqrt(2.0 / double(in)));
        w = &reg.create(prefix + ".w", part, TensorT<T>::randn({in, out}, rng, stddev));
        b = &reg.create(prefix + ".b", part, TensorT<T>::zeros({out}));
    }
    VarT<T> operator()(GraphT<T>& g, VarT<T> x) const {
        return g.add_row(g.matmul(x, g.use(w->value, &w->grad)), g.use(b->value, &b->grad));
    }
    void zero_init() { w->value.fill(T(0)); b->value.fill(T(0)); }
};

template <class T>
struct Conv2dT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;
    int k = 3;
    int stride = 1;
    Conv2dT() = default;
    Conv2dT(ParamRegistryT<T>& reg, const std::string& prefix, Partition part,
            int cin, int cout, int kernel, int stride_, Rng& rng, double init_scale = 1.0)
        : k(kernel), stride(stride_) {
        const int fan_in = kernel * kernel * cin;
        const T stddev = T(init_scale * std::sqrt(2.0 / double(fan_in)));
        w = &reg.create(prefix + ".w", part, TensorT<T>::randn({fan_in, cout}, rng, stddev));
        b = &reg.create(prefix + ".b", part, TensorT<T>::zeros({cout}));
    }
    VarT<T> operator()(GraphT<T>& g, VarT<T> x) const {
        return g.conv2d(x, g.use(w->value, &w->grad), g.use(b->value, &b->grad), k, stride);
    }
    void zero_init() { w->value.fill(T(0)); b->value.fill(T(0)); }
    int out_channels() const { return w->value.dim(1); }
};

template <class T>
struct GroupNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta = nullptr;
    int groups = 8;
    GroupNormT() = default;
    GroupNormT(ParamRegistryT<T>& reg, const std::string& prefix, Partition part, int channels, int groups_)
        : groups(groups_) {
        gamma = &reg.create(prefix + ".gamma", part, TensorT<T>::full({channels}, T(1)));
        beta = &reg.create(prefix + ".beta", part, TensorT<T>::zeros({channels}));
    }
    VarT<T> operator()(GraphT<T>& g, VarT<T> x) const {
        return g.group_norm(x, g.use(gamma->value, &gamma->grad), g.use(beta->value, &beta->grad), groups);
    }
};

// ---------------------------------------------------------------------------
// AdamW: decoupled weight decay, bias-corrected moments.
// ---------------------------------------------------------------------------

template <class T>
class AdamWT {
public:
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    AdamWT() = default;
    AdamWT(double lr_, double weight_decay_ = 0.0) : lr(lr_), weight_decay(weight_decay_) {}

    void step(const std::vector<ParamT<T>*>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, double(t_));
        const double bc2 = 1.0 - std::pow(beta2, double(t_));
        for (ParamT<T>* p : params) {
            if (p->grad.empty()) continue;
            if (p->adam_m.empty()) {
                p->adam_m = TensorT<T>::zeros(p->value.shape());
                p->adam_v = TensorT<T>::zeros(p->value.shape());
            }
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad[i];
                const double m = beta1 * p->adam_m[i] + (1.0 - beta1) * g;
                const double v = beta2 * p->adam_v[i] + (1.0 - beta2) * g * g;
                p->adam_m[i] = T(m);
                p->adam_v[i] = T(v);
                const double mh = m / bc1;
                const double vh = v / bc2;
                double upd = lr * mh / (std::sqrt(vh) + eps);
                upd += lr * weight_decay * double(p->value[i]);
                p->value[i] = T(double(p->value[i]) - upd);
            }
        }
    }

    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }

private:
    long t_ = 0;
};

using Param = ParamT<float>;
using ParamRegistry = ParamRegistryT<float>;
using AdamW = AdamWT<float>;

} // namespace luminet

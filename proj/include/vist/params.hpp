#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "vist/tape.hpp"
#include "vist/tensor.hpp"

namespace vist {

// Named parameter tensors with paired gradient buffers and Adam moments.
// std::map keeps iteration order deterministic for the optimizer, the
// checkpoint format and the finite-difference sweep.
template <class T>
struct ParamStore {
    std::map<std::string, Tensor<T>> param;
    std::map<std::string, Tensor<T>> grad;
    std::map<std::string, Tensor<T>> adam_m;
    std::map<std::string, Tensor<T>> adam_v;
    std::set<std::string> frozen;  // excluded from optimizer updates
    std::int64_t adam_t = 0;
    std::uint64_t rng_seed = 0;

    bool has(const std::string& name) const { return param.count(name) != 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = param.find(name);
        if (it == param.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    template <class Init>
    Tensor<T>& init(const std::string& name, std::vector<int> shape, Init&& make) {
        auto it = param.find(name);
        if (it == param.end()) {
            Tensor<T> t = make();
            if (t.shape != shape) throw ConfigError("init shape mismatch for " + name);
            it = param.emplace(name, std::move(t)).first;
            grad.emplace(name, Tensor<T>(shape));
        }
        return it->second;
    }

    void zero_grad() {
        for (auto& [k, g] : grad) g.fill(T(0));
    }
};

// Per-forward-pass binding of store parameters onto tape leaves. harvest()
// copies the tape gradients back into the store after backward().
template <class T>
class TapeBind {
  public:
    TapeBind(Tape<T>& tape, ParamStore<T>& store) : tape_(tape), store_(store) {}

    typename Tape<T>::Id operator()(const std::string& name) {
        auto it = ids_.find(name);
        if (it != ids_.end()) return it->second;
        bool trainable = store_.frozen.count(name) == 0;
        auto id = tape_.leaf(store_.get(name), trainable);
        ids_.emplace(name, id);
        return id;
    }

    void harvest() {
        for (auto& [name, id] : ids_) {
            if (store_.frozen.count(name)) continue;
            const Tensor<T>& g = tape_.grad(id);
            Tensor<T>& dst = store_.grad.at(name);
            for (std::size_t i = 0; i < dst.size(); ++i) dst.v[i] += g.v[i];
        }
    }

  private:
    Tape<T>& tape_;
    ParamStore<T>& store_;
    std::map<std::string, typename Tape<T>::Id> ids_;
};

// Standard Adam with bias correction; moments persist in the store.
template <class T>
void adam_step(ParamStore<T>& store, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
               T eps = T(1e-8)) {
    store.adam_t += 1;
    double b1t = 1.0 - std::pow(double(beta1), double(store.adam_t));
    double b2t = 1.0 - std::pow(double(beta2), double(store.adam_t));
    for (auto& [name, p] : store.param) {
        if (store.frozen.count(name)) continue;
        const Tensor<T>& g = store.grad.at(name);
        Tensor<T>& m = store.adam_m.try_emplace(name, Tensor<T>(p.shape)).first->second;
        Tensor<T>& v = store.adam_v.try_emplace(name, Tensor<T>(p.shape)).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m.v[i] = beta1 * m.v[i] + (T(1) - beta1) * g.v[i];
            v.v[i] = beta2 * v.v[i] + (T(1) - beta2) * g.v[i] * g.v[i];
            T mhat = T(double(m.v[i]) / b1t);
            T vhat = T(double(v.v[i]) / b2t);
            p.v[i] -= lr * mhat / (T(std::sqrt(double(vhat))) + eps);
        }
    }
}

// Central finite differences against the analytic gradients the loss function
// leaves in store.grad. LossFn: T(ParamStore<T>&, bool with_grad).
// Step 1e-5, f64 mode; max_per_tensor limits the sweep on large stores.
template <class T, class LossFn>
T grad_check(LossFn&& loss, ParamStore<T>& store, T fd_step = T(1e-5),
             std::size_t max_per_tensor = std::size_t(-1)) {
    store.zero_grad();
    loss(store, true);
    T worst = T(0);
    Rng pick(store.rng_seed ^ 0x5eedULL);
    for (auto& [name, p] : store.param) {
        if (store.frozen.count(name)) continue;
        const Tensor<T>& g = store.grad.at(name);
        std::size_t n = p.size();
        std::vector<std::size_t> sel;
        if (n <= max_per_tensor) {
            for (std::size_t i = 0; i < n; ++i) sel.push_back(i);
        } else {
            sel = sample_without_replacement(n, max_per_tensor, pick);
        }
        for (std::size_t i : sel) {
            T keep = p.v[i];
            p.v[i] = keep + fd_step;
            T up = loss(store, false);
            p.v[i] = keep - fd_step;
            T down = loss(store, false);
            p.v[i] = keep;
            T numeric = (up - down) / (T(2) * fd_step);
            T analytic = g.v[i];
            T aa = std::abs(double(analytic)), nn = std::abs(double(numeric));
            if (aa < T(1e-7) && nn < T(1e-7)) continue;
            T rel = std::abs(double(analytic - numeric)) / std::max(aa, nn);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// ---- checkpoint file: named-tensor binary with shape headers ----
//
//   magic "VSTCK001" | dtype u8 (4=f32, 8=f64) | seed u64 | adam_t i64 |
//   n_sections u32 | sections: tag u8 (0 param, 1 adam_m, 2 adam_v, 3 frozen)
//   each tensor: name_len u32, name bytes, ndim u32, dims i32..., raw values.
// Round trips are bit-exact for the stored scalar type.

namespace detail {

template <class S>
void write_pod(std::ostream& os, const S& x) {
    os.write(reinterpret_cast<const char*>(&x), sizeof(S));
}

template <class S>
S read_pod(std::istream& is) {
    S x{};
    is.read(reinterpret_cast<char*>(&x), sizeof(S));
    if (!is) throw ParseError("checkpoint truncated");
    return x;
}

inline void write_str(std::ostream& os, const std::string& s) {
    write_pod(os, std::uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

inline std::string read_str(std::istream& is) {
    auto n = read_pod<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), std::streamsize(n));
    if (!is) throw ParseError("checkpoint truncated");
    return s;
}

template <class T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
    write_str(os, name);
    write_pod(os, std::uint32_t(t.shape.size()));
    for (int d : t.shape) write_pod(os, std::int32_t(d));
    os.write(reinterpret_cast<const char*>(t.v.data()), std::streamsize(t.v.size() * sizeof(T)));
}

template <class T>
std::pair<std::string, Tensor<T>> read_tensor(std::istream& is) {
    std::string name = read_str(is);
    auto nd = read_pod<std::uint32_t>(is);
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < nd; ++i) shape.push_back(int(read_pod<std::int32_t>(is)));
    Tensor<T> t(shape);
    is.read(reinterpret_cast<char*>(t.v.data()), std::streamsize(t.v.size() * sizeof(T)));
    if (!is) throw ParseError("checkpoint truncated");
    return {name, std::move(t)};
}

}  // namespace detail

template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path);
    os.write("VSTCK001", 8);
    detail::write_pod(os, std::uint8_t(sizeof(T)));
    detail::write_pod(os, store.rng_seed);
    detail::write_pod(os, store.adam_t);
    auto count_map = [](const std::map<std::string, Tensor<T>>& m) { return std::uint32_t(m.size()); };
    detail::write_pod(os, count_map(store.param));
    for (auto& [k, t] : store.param) detail::write_tensor(os, k, t);
    detail::write_pod(os, count_map(store.adam_m));
    for (auto& [k, t] : store.adam_m) detail::write_tensor(os, k, t);
    detail::write_pod(os, count_map(store.adam_v));
    for (auto& [k, t] : store.adam_v) detail::write_tensor(os, k, t);
    detail::write_pod(os, std::uint32_t(store.frozen.size()));
    for (auto& k : store.frozen) detail::write_str(os, k);
    if (!os) throw DataError("checkpoint write failed: " + path);
}

template <class T>
ParamStore<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "VSTCK001", 8) != 0)
        throw ParseError("bad checkpoint magic in " + path);
    auto dt = detail::read_pod<std::uint8_t>(is);
    if (dt != sizeof(T)) throw SchemaError("checkpoint scalar width mismatch in " + path);
    ParamStore<T> store;
    store.rng_seed = detail::read_pod<std::uint64_t>(is);
    store.adam_t = detail::read_pod<std::int64_t>(is);
    auto np = detail::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < np; ++i) {
        auto [k, t] = detail::read_tensor<T>(is);
        store.grad.emplace(k, Tensor<T>(t.shape));
        store.param.emplace(std::move(k), std::move(t));
    }
    auto nm = detail::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nm; ++i) {
        auto [k, t] = detail::read_tensor<T>(is);
        store.adam_m.emplace(std::move(k), std::move(t));
    }
    auto nv = detail::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nv; ++i) {
        auto [k, t] = detail::read_tensor<T>(is);
        store.adam_v.emplace(std::move(k), std::move(t));
    }
    auto nf = detail::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nf; ++i) store.frozen.insert(detail::read_str(is));
    return store;
}

}  // namespace vist

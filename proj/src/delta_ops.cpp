#include "crane/delta_ops.hpp"

#include <algorithm>
#include <cmath>

#include "crane/errors.hpp"
#include "crane/parallel.hpp"

namespace crane {

std::vector<double> tensor_delta(const std::string& name, const TensorView& inst,
                                 const TensorView& think) {
    if (inst.meta.shape != think.meta.shape)
        throw ValidationError("tensor \"" + name + "\": shape mismatch between checkpoints");
    auto a = load_f64(inst);
    const auto b = load_f64(think);
    for (size_t i = 0; i < a.size(); ++i) a[i] = b[i] - a[i];
    return a;
}

double median_magnitude(const std::vector<double>& values) {
    if (values.empty()) throw ValidationError("median of an empty tensor");
    std::vector<double> mags(values.size());
    for (size_t i = 0; i < values.size(); ++i) mags[i] = std::abs(values[i]);
    std::sort(mags.begin(), mags.end());
    const size_t n = mags.size();
    if (n % 2 == 1) return mags[n / 2];
    return 0.5 * (mags[n / 2 - 1] + mags[n / 2]);
}

std::vector<double> sparsify(const std::vector<double>& delta) {
    const double med = median_magnitude(delta);
    std::vector<double> out(delta.size(), 0.0);
    for (size_t i = 0; i < delta.size(); ++i)
        if (std::abs(delta[i]) > med) out[i] = 2.0 * delta[i];
    return out;
}

namespace {

// Run fn over the map's values in parallel, collecting results into a new map
// keyed identically. Slot order is the (sorted) map order, so the result is
// thread-count independent.
template <typename Fn>
TensorMap map_tensors(const TensorMap& in, int threads, Fn fn) {
    std::vector<const std::pair<const std::string, Tensor>*> items;
    items.reserve(in.size());
    for (const auto& kv : in) items.push_back(&kv);
    std::vector<Tensor> slots(items.size());
    parallel_for(items.size(), threads,
                 [&](size_t i) { slots[i] = fn(items[i]->first, items[i]->second); });
    TensorMap out;
    for (size_t i = 0; i < items.size(); ++i) out.emplace(items[i]->first, std::move(slots[i]));
    return out;
}

}  // namespace

TensorMap delta_archive(const TensorMap& inst, const TensorMap& think, int threads) {
    for (const auto& [name, t] : think)
        if (!inst.count(name))
            throw ValidationError("tensor \"" + name + "\" present only in the thinking checkpoint");
    for (const auto& [name, t] : inst)
        if (!think.count(name))
            throw ValidationError("tensor \"" + name + "\" present only in the instruct checkpoint");

    return map_tensors(inst, threads, [&](const std::string& name, const Tensor& ti) {
        const Tensor& tt = think.at(name);
        if (ti.shape != tt.shape)
            throw ValidationError("tensor \"" + name + "\": shape mismatch between checkpoints");
        auto vals = load_f64(tt);
        const auto base = load_f64(ti);
        for (size_t i = 0; i < vals.size(); ++i) vals[i] -= base[i];
        return Tensor::from_f64(Dtype::F64, ti.shape, vals);
    });
}

TensorMap sparsify_archive(const TensorMap& delta, int threads) {
    return map_tensors(delta, threads, [](const std::string&, const Tensor& t) {
        return Tensor::from_f64(Dtype::F64, t.shape, sparsify(load_f64(t)));
    });
}

}  // namespace crane

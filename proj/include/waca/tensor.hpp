#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace waca {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

template <class T>
struct Storage {
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() : storage_(std::make_shared<Storage<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), storage_(std::make_shared<Storage<T>>()) {
        storage_->value.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), storage_(std::make_shared<Storage<T>>()) {
        if (values.size() != shape_numel(shape_)) {
            throw DimensionError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                                 shape_str(shape_));
        }
        storage_->value = std::move(values);
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return storage_->value.size(); }
    bool empty() const { return storage_->value.empty(); }

    std::span<const T> data() const { return storage_->value; }
    std::span<T> mutable_data() { return storage_->value; }
    const T* ptr() const { return storage_->value.data(); }
    T* mutable_ptr() { return storage_->value.data(); }
    T operator[](std::size_t i) const { return storage_->value[i]; }

    T item() const {
        if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
        return storage_->value[0];
    }

    // Element access for 4-axis tensors; used by tests and data plumbing, not hot loops.
    T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return storage_->value[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    bool requires_grad() const { return storage_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        storage_->requires_grad = on;
        return *this;
    }

    std::span<const T> grad() const {
        storage_->ensure_grad();
        return storage_->grad;
    }
    std::span<T> mutable_grad() {
        storage_->ensure_grad();
        return storage_->grad;
    }
    void zero_grad() { storage_->grad.assign(storage_->value.size(), T(0)); }

    // Same storage, new shape.
    Tensor view(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw DimensionError("view: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
        }
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    // Deep copy of values, detached from any tape.
    Tensor clone() const { return Tensor(shape_, storage_->value); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(storage_->value.begin(), storage_->value.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
    Storage<T>& storage() const { return *storage_; }

private:
    Shape shape_;
    std::shared_ptr<Storage<T>> storage_;
};

// Ordered record of executed differentiable ops. Install with TapeGuard; ops on
// tensors that require grad append a backward closure while a tape is active.
template <class T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }
    std::size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    // Runs every recorded closure once, newest first, then frees the record.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad()) throw DimensionError("backward: loss is not on the tape");
        auto& s = loss.storage();
        s.ensure_grad();
        s.grad[0] += T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

private:
    std::vector<std::function<void()>> ops_;
};

template <class T>
class TapeGuard {
public:
    explicit TapeGuard(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::active() = &tape; }
    ~TapeGuard() { Tape<T>::active() = previous_; }
    TapeGuard(const TapeGuard&) = delete;
    TapeGuard& operator=(const TapeGuard&) = delete;

private:
    Tape<T>* previous_;
};

template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
    tape.backward(loss);
}

namespace detail {

// Returns the active tape when any input participates in autodiff, else nullptr.
template <class T, class... Ts>
Tape<T>* tape_for(const Tensor<T>& first, const Ts&... rest) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) return nullptr;
    bool any = first.requires_grad();
    ((any = any || rest.requires_grad()), ...);
    return any ? tape : nullptr;
}

// Gradient of the op output; empty span when nothing flowed back into it.
template <class T>
std::span<const T> out_grad(const Tensor<T>& y) {
    auto& s = y.storage();
    if (s.grad.size() != s.value.size()) return {};
    return s.grad;
}

// Accumulation target for an input gradient, or empty when the input is constant.
template <class T>
std::span<T> in_grad(const Tensor<T>& x) {
    auto& s = x.storage();
    if (!s.requires_grad) return {};
    s.ensure_grad();
    return s.grad;
}

}  // namespace detail

// Named parameter collection with lexicographic iteration order.
template <class T>
class ParamSet {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (params_.count(name)) throw ConfigError("param set: duplicate parameter name '" + name + "'");
        t.set_requires_grad(true);
        return params_.emplace(name, std::move(t)).first->second;
    }

    const Tensor<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("param set: no parameter named '" + name + "'");
        return it->second;
    }
    Tensor<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("param set: no parameter named '" + name + "'");
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.numel();
        return n;
    }
    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Tensor<T>> params_;
};

}  // namespace waca

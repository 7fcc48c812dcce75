#pragma once

// Dense double-precision tensors and a reverse-mode tape.
//
// A Tensor is a cheap handle onto shared storage: copying a Tensor aliases the
// same buffer, clone() deep-copies. Ops append one node per call to a Tape;
// backward() replays the nodes in reverse recording order, which is already a
// topological order because an op can only consume tensors that exist.
// Tensors and Tapes are single-threaded values; move them between threads,
// never share them mutably.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flexchill {

namespace detail {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor: shape dimensions must be positive");
        n *= d;
    }
    return n;
}

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until populated by backward()
    bool requires_grad = false;
};

}  // namespace detail

class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = {1};
        d_->data = {0.0};
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> values,
           bool requires_grad = false)
        : d_(std::make_shared<detail::TensorData>()) {
        const std::size_t n = detail::shape_numel(shape);
        if (n != values.size())
            throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                        " does not match shape product " + std::to_string(n));
        d_->shape = std::move(shape);
        d_->data = std::move(values);
        d_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        const std::size_t n = detail::shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->data.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

    std::vector<double>& data() { return d_->data; }
    const std::vector<double>& data() const { return d_->data; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad() {
        if (d_->grad.empty())
            throw std::logic_error("tensor: gradient not populated");
        return d_->grad;
    }
    const std::vector<double>& grad() const {
        if (d_->grad.empty())
            throw std::logic_error("tensor: gradient not populated");
        return d_->grad;
    }

    // Zero-filled gradient buffer, allocated on first use.
    std::vector<double>& grad_buffer() {
        if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0);
        return d_->grad;
    }
    void clear_grad() { d_->grad.clear(); }

    double value() const {
        if (numel() != 1)
            throw std::invalid_argument("tensor: value() requires a scalar");
        return d_->data[0];
    }

    Tensor clone() const {
        Tensor t(d_->shape, d_->data, d_->requires_grad);
        return t;
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    std::shared_ptr<detail::TensorData> d_;
};

// Recorded computation, replayed once in reverse for gradients.
class Tape {
public:
    void record(std::function<void()> backward_step) {
        nodes_.push_back(std::move(backward_step));
    }

    std::size_t size() const { return nodes_.size(); }
    bool spent() const { return spent_; }

    void reset() {
        nodes_.clear();
        spent_ = false;
    }

    friend void backward(Tape& tape, Tensor loss);

private:
    std::vector<std::function<void()>> nodes_;
    bool spent_ = false;
};

// Seeds d(loss)/d(loss) = 1 and walks the tape once, newest node first.
// Gradients accumulate into every tensor the recorded ops marked as needing
// them; leaves keep theirs until clear_grad() or an optimizer step. Takes the
// loss handle by value so expression results can feed it directly.
inline void backward(Tape& tape, Tensor loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar");
    if (tape.spent_)
        throw std::logic_error("backward: tape already consumed; call reset() first");
    tape.spent_ = true;
    loss.grad_buffer()[0] += 1.0;
    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
}

}  // namespace flexchill

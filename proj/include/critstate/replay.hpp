#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "critstate/rng.hpp"

namespace critstate {

struct Transition {
    std::vector<double> observation;
    std::size_t action = 0;
    double reward = 0.0;
    std::vector<double> next_observation;
    bool done = false;
};

/// Fixed-capacity FIFO replay memory backed by a ring buffer.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity_ == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
        data_.reserve(capacity_);
    }

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    void push(Transition t) {
        if (data_.size() < capacity_) {
            data_.push_back(std::move(t));
        } else {
            data_[head_] = std::move(t);
            head_ = (head_ + 1) % capacity_;
        }
    }

    /// i = 0 is the oldest stored transition.
    const Transition& at(std::size_t i) const {
        if (i >= data_.size()) throw std::out_of_range("ReplayBuffer::at");
        return data_[(head_ + i) % data_.size()];
    }

    /// Uniform sample with replacement.
    std::vector<std::size_t> sample(std::size_t batch, Rng& rng) const {
        if (data_.empty()) throw std::logic_error("ReplayBuffer::sample: empty buffer");
        std::vector<std::size_t> idx(batch);
        for (auto& i : idx) i = rng.index(data_.size());
        return idx;
    }

private:
    std::size_t capacity_;
    std::size_t head_ = 0;
    std::vector<Transition> data_;
};

}  // namespace critstate

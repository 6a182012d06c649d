#pragma once

#include <cstdint>
#include <vector>

#include "oft/errors.hpp"
#include "oft/rng.hpp"

namespace oft::train {

// Fixed-capacity ring with FIFO overwrite and uniform sampling over the
// occupied region. Physical slot order equals insertion order modulo the
// capacity, which sequence sampling relies on.
template <typename T>
class RingBuffer {
  public:
    explicit RingBuffer(std::int64_t capacity) : capacity_(capacity) {
        if (capacity < 1) throw ContractError("RingBuffer: capacity must be positive");
    }

    void push(T item) {
        if (static_cast<std::int64_t>(data_.size()) < capacity_) {
            data_.push_back(std::move(item));
        } else {
            data_[static_cast<std::size_t>(head_)] = std::move(item);
        }
        head_ = (head_ + 1) % capacity_;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t capacity() const { return capacity_; }
    bool full() const { return size() == capacity_; }
    // Physical slot of the next write (== oldest element once full).
    std::int64_t head() const { return head_; }

    const T& at(std::int64_t physical) const { return data_[static_cast<std::size_t>(physical)]; }

    std::int64_t sample_index(Rng& rng) const {
        if (data_.empty()) throw ContractError("RingBuffer: sampling from an empty buffer");
        return rng.uniform_int(0, size() - 1);
    }

    // Physical successor in insertion order, or -1 at the newest element.
    std::int64_t next_index(std::int64_t physical) const {
        const std::int64_t nxt = (physical + 1) % capacity_;
        if (nxt >= size()) return -1;
        if (full() && nxt == head_) return -1;
        if (!full() && nxt == head_) return -1;
        return nxt;
    }

    void restore(std::vector<T> data, std::int64_t head) {
        if (static_cast<std::int64_t>(data.size()) > capacity_)
            throw ContractError("RingBuffer: restored payload exceeds capacity");
        data_ = std::move(data);
        head_ = head;
    }
    const std::vector<T>& raw() const { return data_; }

  private:
    std::int64_t capacity_;
    std::int64_t head_ = 0;
    std::vector<T> data_;
};

}  // namespace oft::train

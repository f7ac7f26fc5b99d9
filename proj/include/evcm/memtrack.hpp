#pragma once
// Allocation instrumentation: a counting allocator feeding a global live-byte
// counter, plus nestable scopes that report the peak extra bytes allocated
// while they are open. Used by the benchmark harness to attribute peak memory
// to pipeline phases without platform-specific hooks.

#include <atomic>
#include <cstddef>
#include <memory>
#include <vector>

namespace evcm::mem {

inline std::atomic<std::size_t>& live_bytes() {
  static std::atomic<std::size_t> v{0};
  return v;
}

// Running high-water mark shared by the innermost open PhaseScope.
inline std::atomic<std::size_t>& scope_peak() {
  static std::atomic<std::size_t> v{0};
  return v;
}

inline void on_allocate(std::size_t n) {
  const std::size_t live = live_bytes().fetch_add(n, std::memory_order_relaxed) + n;
  auto& pk = scope_peak();
  std::size_t cur = pk.load(std::memory_order_relaxed);
  while (cur < live && !pk.compare_exchange_weak(cur, live, std::memory_order_relaxed)) {
  }
}

inline void on_deallocate(std::size_t n) {
  live_bytes().fetch_sub(n, std::memory_order_relaxed);
}

template <typename T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    on_allocate(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    std::allocator<T>{}.deallocate(p, n);
    on_deallocate(n * sizeof(T));
  }

  template <typename U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
  template <typename U>
  bool operator!=(const CountingAllocator<U>&) const noexcept {
    return false;
  }
};

template <typename T>
using TrackedVector = std::vector<T, CountingAllocator<T>>;

// Measures the peak of (live_bytes - baseline) between construction and
// stop()/destruction. Scopes may nest on one thread; allocations from any
// thread are observed. An inner scope folds its peak back into the outer one,
// so the outer scope still reports the true maximum over its whole lifetime.
class PhaseScope {
 public:
  PhaseScope()
      : baseline_(live_bytes().load(std::memory_order_relaxed)),
        saved_outer_peak_(scope_peak().exchange(baseline_, std::memory_order_relaxed)) {}
  PhaseScope(const PhaseScope&) = delete;
  PhaseScope& operator=(const PhaseScope&) = delete;
  ~PhaseScope() { stop(); }

  void stop() {
    if (stopped_) return;
    stopped_ = true;
    final_peak_ = scope_peak().load(std::memory_order_relaxed);
    const std::size_t restore =
        saved_outer_peak_ > final_peak_ ? saved_outer_peak_ : final_peak_;
    scope_peak().store(restore, std::memory_order_relaxed);
  }

  // Peak extra bytes allocated since construction (up to stop() if called).
  std::size_t peak_delta() const {
    const std::size_t pk =
        stopped_ ? final_peak_ : scope_peak().load(std::memory_order_relaxed);
    return pk > baseline_ ? pk - baseline_ : 0;
  }

 private:
  std::size_t baseline_;
  std::size_t saved_outer_peak_;
  std::size_t final_peak_ = 0;
  bool stopped_ = false;
};

}  // namespace evcm::mem

#pragma once

#include <algorithm>
#include <cstddef>
#include <malloc.h>
#include <new>

namespace prcn {

// Byte accounting for every tensor buffer allocated on this thread while an
// AllocScope is alive. Used by the pool-kernel benchmark to prove which
// intermediates a code path materializes.
struct AllocStats {
  std::size_t current = 0;
  std::size_t peak = 0;
  std::size_t total = 0;
  std::size_t largest = 0;
  std::size_t count = 0;
};

// Keeps large freed blocks in the heap instead of returning them to the OS.
// Training reallocates the same activation sizes every batch and fresh pages
// are expensive to fault in.
inline void retain_freed_memory() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

namespace detail {
inline thread_local AllocStats* active_stats = nullptr;
}

class AllocScope {
 public:
  AllocScope() : previous_(detail::active_stats) { detail::active_stats = &stats_; }
  ~AllocScope() { detail::active_stats = previous_; }
  AllocScope(const AllocScope&) = delete;
  AllocScope& operator=(const AllocScope&) = delete;

  const AllocStats& stats() const { return stats_; }

 private:
  AllocStats stats_;
  AllocStats* previous_;
};

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    if (auto* s = detail::active_stats) {
      s->current += bytes;
      s->total += bytes;
      s->count += 1;
      s->peak = std::max(s->peak, s->current);
      s->largest = std::max(s->largest, bytes);
    }
    return static_cast<T*>(::operator new(bytes));
  }

  void deallocate(T* p, std::size_t n) noexcept {
    const std::size_t bytes = n * sizeof(T);
    if (auto* s = detail::active_stats) {
      // Buffers allocated before the scope opened may be freed inside it.
      s->current = s->current >= bytes ? s->current - bytes : 0;
    }
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace prcn

#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mtalk {

// Training frees and reallocates the same multi-megabyte buffers every step.
// With glibc defaults those go back to the kernel each time and the page faults
// cost about a quarter of the CPU time. Call once at program start.
inline void keep_heap_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace mtalk

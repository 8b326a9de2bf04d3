#pragma once

namespace atomicl {

/// Keeps freed blocks in the heap instead of returning them to the OS.
/// Training frees and reallocates the same large buffers every step; with the
/// default glibc thresholds each round trip costs fresh page faults. No-op on
/// other C libraries. Call once, early in main().
void retain_heap_memory() noexcept;

}  // namespace atomicl

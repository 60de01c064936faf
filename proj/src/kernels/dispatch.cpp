#include <atomic>
#include <cstdlib>
#include <string_view>

#include "mta/kernels.hpp"

namespace mta::kernels {

#if defined(MTA_HAVE_AVX2)
const KernelTable& avx2_table_unchecked();
#endif

const KernelTable* avx2_table() {
#if defined(MTA_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2_table_unchecked() : nullptr;
#else
  return nullptr;
#endif
}

namespace {

const KernelTable* choose() {
  if (const char* env = std::getenv("MTA_KERNELS"); env && std::string_view(env) == "scalar") {
    return &scalar_table();
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{choose()};
  return current;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

void set_active(const KernelTable& table) { slot().store(&table, std::memory_order_release); }

}  // namespace mta::kernels

#include "pointseg/parallel.hpp"

#include <cstdlib>
#include <thread>

namespace pointseg::par {

namespace {
int resolve_default() {
  if (const char* env = std::getenv("POINTSEG_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}
int g_threads = resolve_default();
}  // namespace

int threads() { return g_threads; }
void set_threads(int n) { g_threads = n < 1 ? 1 : n; }

}  // namespace pointseg::par

#pragma once
// Worker-thread control. POINTSEG_THREADS caps parallelism; 1 disables
// OpenMP dispatch entirely (the serial reference paths run instead).

namespace pointseg::par {

// Threads used by parallel kernels. Resolved once from POINTSEG_THREADS
// (default: all hardware threads), adjustable programmatically.
int threads();
void set_threads(int n);

}  // namespace pointseg::par

#pragma once

namespace pointseg::cli {

// Batch command-line surface: phantom / train / eval / infer / ablate.
// Returns the process exit code; errors map to per-category codes and a
// single machine-parseable stderr line.
int run(int argc, char** argv);

}  // namespace pointseg::cli

#pragma once

namespace agar {

/**
 * Command-line entry point.
 *
 * Verbs: gen-data, train, eval, explain, grad-check. Every verb accepts
 * --config plus positional key=value overrides; outputs land under --out or
 * the --run directory. Exit status: 0 on success, 1 for validation problems
 * (bad keys, files, shapes), 2 for numeric failures (divergence, non-finite
 * values, failed gradient check).
 */
int run_cli(int argc, const char* const* argv);

}  // namespace agar

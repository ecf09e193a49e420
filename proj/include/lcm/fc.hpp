#pragma once

#include <string>

#include "lcm/tensor.hpp"

namespace lcm {

// A scan is an N x T tensor: one row of T timepoints per region.
// Its functional connectivity is the N x N Pearson correlation matrix.

// Pearson correlation of every region pair. The upper triangle is computed
// once and mirrored, the diagonal is exactly 1. A zero-variance region row
// raises DegenerateSignal naming the region; fewer than 3 timepoints raise
// ValidationError.
Tensor compute_fc(const Tensor& bold);

// Checks N x N shape, symmetry and [-1, 1] range within 1e-12, unit diagonal.
void validate_fc(const Tensor& fc);

// Scan CSV: header "t,region_0,...,region_{N-1}", one row per timepoint.
Tensor read_scan_csv(const std::string& path);
void write_scan_csv(const Tensor& bold, const std::string& path);

// FC CSV: no header, N rows of N values at 17 significant digits, so a
// write/read round-trip is bit-exact.
Tensor read_fc_csv(const std::string& path);
void write_fc_csv(const Tensor& fc, const std::string& path);

// Reads either format: scan files (detected by the "t," header) are reduced
// to FC, bare matrices are loaded as FC directly.
Tensor load_fc_any(const std::string& path);

}  // namespace lcm

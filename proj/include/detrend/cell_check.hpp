#pragma once

#include <cstdint>

#include "detrend/cells.hpp"
#include "detrend/gradcheck.hpp"

namespace detrend {

// Miniature recurrent instance for gradient checking: a dense GRU with 3
// inputs and 5 hidden units, or a ConvGRU with 1 input channel, 2 hidden
// channels and 3x3 frames. Batch of 6; for T > 1 the last sample is padded on
// the final step. Parameters are drawn with sigma 1.5 so that normalized
// terms stay well away from zero variance, where central differences with
// step 1e-4 lose accuracy.
struct CellCheckSpec {
  CellKind kind = CellKind::gru;
  NormMethod norm = NormMethod::none;
  Placement placement = Placement::hidden;
  std::size_t steps = 3;
  std::uint64_t seed = 1;
};

CellConfig cell_check_config(const CellCheckSpec& spec);
std::size_t cell_check_parameter_count(const CellCheckSpec& spec);

// Loss: fixed random projection of every upward output plus the final hidden
// state, under train-mode normalization.
GradReport cell_gradcheck(const CellCheckSpec& spec, double step = 1e-4,
                          double tolerance = 1e-4, bool corrupt_adjoints = false);

}  // namespace detrend

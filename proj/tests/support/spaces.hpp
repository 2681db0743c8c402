#pragma once

#include <vector>

#include "parawidth/loss_record.hpp"
#include "parawidth/search_space.hpp"

namespace testnets {

// Single-layer conv, 3 input channels, 1x1 spatial: flops(w) = 3 * w.
parawidth::SearchSpace one_layer_space(int max_channels, int groups);

// `layers` conv layers, each with `choices` width options and a random
// channel count and spatial size, so cost is dominated by a few layers.
parawidth::SearchSpace long_tail_space(parawidth::Rng& rng, int layers, int choices);

// Training-shaped records: per iteration one largest-subnet record plus
// `parts - 1` uniform draws; loss falls with training and with width.
std::vector<parawidth::LossRecord> synthetic_records(const parawidth::SearchSpace& space, parawidth::Rng& rng,
                                                     int iterations, int parts);

}  // namespace testnets

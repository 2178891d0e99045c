#pragma once

#include "neuraldrop/dataprep.hpp"
#include "neuraldrop/neural.hpp"

namespace nd {

/// Dataset -> network tensors. Samples become columns, in dataset order.
nn::TrainData contour_train_data(const Dataset& ds);
/// Gradient magnitudes are divided by `scale` on the way in.
nn::TrainData gradient_train_data(const Dataset& ds, double scale);
/// A single-step sequence of breakage_input with 0/1 targets.
nn::TrainData breakage_train_data(const Dataset& ds);

/// Largest gradient magnitude in the dataset (1 when there is none), used as the
/// gradient net's feature_scale.
double gradient_scale(const Dataset& ds);

}  // namespace nd

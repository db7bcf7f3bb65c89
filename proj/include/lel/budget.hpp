#pragma once

#include "error.hpp"

namespace lel {

/// Per-module Lipschitz constants. Defaults are the selected values of the
/// hyperparameter table; the search grid is {0.5, 1.0, 1.5}.
struct LipschitzBudget {
    double L_s = 1.0;       ///< band-extraction weight rescale (L_Lip)
    double L_att = 1.0;     ///< attention clamp, c = L_att * sqrt(d_h)
    double L_affine = 1.0;  ///< normalization gain
    double L_linear = 1.0;  ///< spectral-norm bound of constrained weights

    /// All four constants set to one value; used by the sensitivity sweep.
    static LipschitzBudget uniform(double K) { return {K, K, K, K}; }

    void validate() const
    {
        if (!(L_s > 0 && L_att > 0 && L_affine > 0 && L_linear > 0))
            throw ParameterError("Lipschitz budget constants must be positive");
    }
};

} // namespace lel

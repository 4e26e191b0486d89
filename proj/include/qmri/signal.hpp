#ifndef QMRI_SIGNAL_HPP
#define QMRI_SIGNAL_HPP

#include <cstdint>

#include "qmri/core.hpp"

// Closed-form MR signal models with analytic first derivatives.
//
//   MPRAGE:    s = G * PD * (1 - 2*exp(-TI/T1) / (1 + exp(-TR/T1)))
//   spin-echo: s = G * PD * (1 - exp(-TR/T1)) * exp(-TE/T2)
//   FLAIR:     s = G * PD * (1 - 2*exp(-TI/T1) + exp(-TR/T1)) * exp(-TE/T2)
//
// The scanner gain G is fixed to 1; any scanner-specific scaling is absorbed
// into the proton density map. The MPRAGE model has no T2 dependence.

namespace qmri::signal {

struct SignalOptions {
    double gain = 1.0;          // absorbed-gain convention; always 1 here
    bool magnitude_mode = false; // return |s| instead of the signed value
};

double mprage(double pd, double t1, const AcquisitionParams& params,
              const SignalOptions& opts = {});
double spin_echo(double pd, double t1, double t2, const AcquisitionParams& params,
                 const SignalOptions& opts = {});
double flair(double pd, double t1, double t2, const AcquisitionParams& params,
             const SignalOptions& opts = {});

/// Dispatch on params.sequence.
double evaluate(double pd, double t1, double t2, const AcquisitionParams& params,
                const SignalOptions& opts = {});

/// Analytic partial derivatives of the signed signal. d_t2 is exactly 0 for
/// MPRAGE. magnitude_mode does not apply here (derivatives are of the signed
/// model, which is what fitting needs).
struct Partials {
    double d_pd = 0.0;
    double d_t1 = 0.0;
    double d_t2 = 0.0;
};

Partials jacobian(double pd, double t1, double t2, const AcquisitionParams& params);

/// Voxel-wise application of the matching signal model. With
/// noise_sigma > 0, adds zero-mean Gaussian noise drawn from the
/// counter-based generator, one draw per voxel index, so the result is
/// identical for any thread count. noise_sigma = 0 is exactly noise-free.
Volume synthesize(const PropertyMap& props, const AcquisitionParams& params,
                  const SignalOptions& opts = {}, double noise_sigma = 0.0,
                  std::uint64_t seed = 0);

} // namespace qmri::signal

#endif

#ifndef QMRI_REFERENCE_HPP
#define QMRI_REFERENCE_HPP

#include <cstdint>
#include <span>

#include "qmri/diffusion.hpp"
#include "qmri/metrics.hpp"
#include "qmri/qmap.hpp"
#include "qmri/signal.hpp"

// Serial reference implementations of the OpenMP kernels. Plain loops, no
// pragmas. Tests assert the parallel kernels reproduce these bit-for-bit;
// the benchmark target times the two side by side.

namespace qmri::reference {

Volume synthesize(const PropertyMap& props, const AcquisitionParams& params,
                  const signal::SignalOptions& opts = {}, double noise_sigma = 0.0,
                  std::uint64_t seed = 0);

qmap::FitResult fit_volume(std::span<const qmap::ContrastImage> images,
                           const qmap::FitConfig& config = {});

double ms_ssim(const Volume& a, const Volume& b, const metrics::MsSsimConfig& config = {});

std::vector<std::vector<double>> ddpm_sample(const nn::MlpModel& denoiser,
                                             const diffusion::DiffusionSchedule& schedule,
                                             int dim, int count, std::uint64_t seed);

} // namespace qmri::reference

#endif

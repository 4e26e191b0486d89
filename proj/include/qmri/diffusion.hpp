#ifndef QMRI_DIFFUSION_HPP
#define QMRI_DIFFUSION_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qmri/nn.hpp"

// DDPM machinery at desk scale: linear beta schedule, forward noising,
// epsilon-prediction loss, ancestral sampling and a toy training loop over
// low-dimensional latents. The denoiser is an MLP taking the noisy latent
// concatenated with a 16-dim sinusoidal timestep embedding.

namespace qmri::diffusion {

inline constexpr int kTimeEmbedDim = 16;

struct DiffusionSchedule {
    int timesteps = 0;              // T
    std::vector<double> beta;       // beta[t-1] for t = 1..T
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running product of alpha
};

/// Linear beta interpolation over t = 1..T (T = 1 uses beta_start).
/// Requires T >= 1 and 0 < beta_start <= beta_end < 1.
DiffusionSchedule make_schedule(int timesteps, double beta_start = 1e-4,
                                double beta_end = 2e-2);

/// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps, 1 <= t <= T.
std::vector<double> q_sample(std::span<const double> z0, int t,
                             std::span<const double> eps,
                             const DiffusionSchedule& schedule);

std::vector<double> time_embedding(int t, int dim = kTimeEmbedDim);

/// The (t, eps) draws consumed by one loss evaluation, exposed so tests can
/// evaluate the loss against an oracle that reproduces eps exactly.
struct NoiseDraw {
    int t = 0;
    std::vector<double> eps;
};

std::vector<NoiseDraw> ldm_draws(const DiffusionSchedule& schedule, std::uint64_t seed,
                                 std::size_t batch, std::size_t dim);

using DenoiseFn = std::function<std::vector<double>(std::span<const double> z_t, int t,
                                                    std::size_t batch_index)>;

/// Loss only, for an arbitrary denoiser: mean over batch and dimension of
/// (eps - eps_hat)^2 with draws from ldm_draws(schedule, seed, ...).
double ldm_loss_value(const DenoiseFn& denoise,
                      const std::vector<std::vector<double>>& z0_batch,
                      const DiffusionSchedule& schedule, std::uint64_t seed);

struct LossResult {
    double loss = 0.0;
    nn::Gradients grads;
};

/// Loss and parameter gradients for the MLP denoiser; uses the identical
/// draws as ldm_loss_value for the same (schedule, seed, batch, dim).
/// Per-example gradients are reduced in batch-index order, so the result is
/// deterministic for any worker count.
LossResult ldm_loss(const nn::MlpModel& denoiser,
                    const std::vector<std::vector<double>>& z0_batch,
                    const DiffusionSchedule& schedule, std::uint64_t seed);

/// Ancestral sampling: z_T ~ N(0, I); for t = T..1
///   z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
///             + sqrt(btilde_t) * xi
/// with btilde_t = beta_t * (1 - abar_{t-1}) / (1 - abar_t) and btilde_1 = 0
/// (the final step is deterministic). Chains use independent derived seeds,
/// so sampling is reproducible and parallelizes without changing results.
std::vector<std::vector<double>> ddpm_sample(const nn::MlpModel& denoiser,
                                             const DiffusionSchedule& schedule, int dim,
                                             int count, std::uint64_t seed);

struct TrainConfig {
    int epochs = 100;
    int batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::vector<int> hidden = {64, 64};
};

struct TrainResult {
    nn::MlpModel model;
    std::vector<double> epoch_loss; // mean loss per epoch
};

/// Mini-batch epsilon-prediction training of a fresh MLP denoiser over the
/// dataset. Deterministic: shuffling and noise draws are all counter-seeded.
TrainResult train_toy(const std::vector<std::vector<double>>& dataset,
                      const DiffusionSchedule& schedule, const TrainConfig& config);

// ----------------------------------------------------------------------------
// .latn file: JSON header line {"magic":"LATN1","dim":d,"count":n,
// "dtype":"f32le"} followed by n*d little-endian f32 values.
// ----------------------------------------------------------------------------
void write_latents(const std::string& path, const std::vector<std::vector<double>>& data);
std::vector<std::vector<double>> read_latents(const std::string& path);

} // namespace qmri::diffusion

#endif

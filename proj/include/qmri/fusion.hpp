#ifndef QMRI_FUSION_HPP
#define QMRI_FUSION_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

// Product-of-experts fusion of diagonal Gaussians. Precisions add and means
// combine precision-weighted:
//
//   sigma^-2 = sum_i sigma_i^-2,   mu = sigma^2 * sum_i mu_i / sigma_i^2

namespace qmri::fusion {

/// Variances below this are clamped before inversion.
inline constexpr double kVarianceFloor = 1e-12;

/// Diagonal Gaussian factor. Every variance component is positive and finite.
struct GaussianFactor {
    std::vector<double> mean;
    std::vector<double> var;

    std::size_t dim() const { return mean.size(); }
    void validate() const; // throws std::invalid_argument
};

/// Product-of-experts fusion. Per-component sums run over value-sorted
/// contributions, so the result is bitwise identical under any reordering of
/// the expert list. No implicit prior expert is appended; pass
/// include_standard_prior = true to multiply in an explicit N(0, I) expert.
/// Throws on an empty list or mismatched dimensions.
GaussianFactor poe_fuse(std::span<const GaussianFactor> experts,
                        bool include_standard_prior = false);

/// Retained subset by mask. Throws if nothing is kept.
std::vector<GaussianFactor> drop_modalities(std::span<const GaussianFactor> experts,
                                            const std::vector<bool>& keep);

/// Each expert is dropped independently with probability drop_prob,
/// deterministically per seed. If the draw removes everything, the expert
/// with the lowest index is kept so the result stays usable.
std::vector<GaussianFactor> drop_modalities(std::span<const GaussianFactor> experts,
                                            double drop_prob, std::uint64_t seed);

/// KL(N(mu, diag sigma^2) || N(0, I)) = sum_d (sigma_d^2 + mu_d^2 - 1 - ln sigma_d^2) / 2.
double gaussian_kl_standard(const GaussianFactor& g);

/// Reparameterized draw z = mu + sigma * eps with eps from the counter-based
/// Box-Muller generator; reproducible per seed.
std::vector<double> sample_gaussian(const GaussianFactor& g, std::uint64_t seed);

// ----------------------------------------------------------------------------
// .gauss file: JSON header line {"magic":"GAUS1","dim":d,"dtype":"f32le"}
// followed by d means then d variances, little-endian f32.
// ----------------------------------------------------------------------------
void write_gauss(const std::string& path, const GaussianFactor& g);
GaussianFactor read_gauss(const std::string& path);

} // namespace qmri::fusion

#endif

#ifndef QMRI_QMAP_HPP
#define QMRI_QMAP_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qmri/core.hpp"

// Per-voxel MAP estimation of (PD, T1, T2) from multi-contrast observations.
// Properties are parameterized through the exponential map
//
//   PD = exp(o_pd),  T1 = m_T1 * exp(o_T1),  T2 = m_T2 * exp(o_T2)
//
// which keeps them positive by construction; m_T1/m_T2 are the log-normal
// prior medians (equivalently a log-space bias b = ln m). A light L2 penalty
// on (o_T1, o_T2) pulls under-determined voxels toward the medians; PD is
// unregularized. Minimization is Levenberg-Marquardt in o-space with the
// chain rule through the signal-model Jacobians.

namespace qmri::qmap {

struct FitConfig {
    // Log-normal prior medians in seconds; the log-space biases of the
    // exponential parameterization are ln(median).
    double prior_median_t1 = 1.0;
    double prior_median_t2 = 0.1;
    double prior_weight = 1e-2; // lambda; ignored by the PD coordinate
    int max_iterations = 50;
    double initial_damping = 1e-3;
    double convergence_tol = 1e-10; // on objective decrease
    double pd_floor = 0.0;

    void validate() const; // throws std::invalid_argument
};

struct Observation {
    double signal = 0.0;
    AcquisitionParams params;
};

/// Unconstrained optimization variables (log-space).
struct LogParams {
    double o_pd = 0.0;
    double o_t1 = 0.0;
    double o_t2 = 0.0;
};

struct TissueProps {
    double pd = 0.0;
    double t1 = 0.0;
    double t2 = 0.0;
};

/// Exponential parameterization; total on reals. Overflow clamps each
/// property to 1e6; pd is additionally floored at config.pd_floor.
TissueProps parameterize(const LogParams& theta, const FitConfig& config = {});

/// Sum of squared signal residuals plus prior_weight * (o_t1^2 + o_t2^2).
/// Throws "unidentifiable" when observations are empty and prior_weight == 0.
double map_objective(const LogParams& theta, std::span<const Observation> observations,
                     const FitConfig& config = {});

/// Exact gradient of map_objective w.r.t. (o_pd, o_t1, o_t2).
std::array<double, 3> map_objective_gradient(const LogParams& theta,
                                             std::span<const Observation> observations,
                                             const FitConfig& config = {});

struct VoxelDiag {
    double residual_norm = 0.0; // sqrt of the data term at the solution
    int iterations = 0;
    bool converged = false;
};

struct VoxelFit {
    TissueProps props;
    LogParams theta;
    VoxelDiag diag;
};

/// Levenberg-Marquardt MAP fit for one voxel. Deterministic given inputs.
/// Default initialization: o_t1 = o_t2 = 0 (the prior medians) and o_pd from
/// the mean absolute observed signal. Non-convergence is flagged and the
/// best iterate returned. Throws on non-finite observation values.
VoxelFit fit_voxel(std::span<const Observation> observations, const FitConfig& config = {},
                   std::optional<LogParams> init = {});

struct FitResult {
    PropertyMap props;
    std::vector<double> residual_norm; // per voxel
    std::vector<int> iterations;       // per voxel
    std::vector<std::uint8_t> converged;

    double convergence_rate() const;
    double median_residual() const;
};

struct ContrastImage {
    Volume image; // single-channel
    AcquisitionParams params;
};

/// Independent fit_voxel per voxel. Results are bitwise identical for any
/// worker count (each voxel is self-contained; there are no reductions).
/// num_threads <= 0 uses the OpenMP default.
FitResult fit_volume(std::span<const ContrastImage> images, const FitConfig& config = {},
                     int num_threads = 0);

// ============================================================================
// Synthetic phantoms
// ============================================================================

enum class ShapeKind { Ellipse, Rect };

/// Shape in fractional coordinates: center and radii (ellipse) or
/// half-extents (rect) are fractions of the volume dimensions, so a spec
/// scales with the rasterization grid. rz defaults to covering all of z.
struct PhantomShape {
    ShapeKind kind = ShapeKind::Ellipse;
    double cx = 0.5, cy = 0.5, cz = 0.5;
    double rx = 0.0, ry = 0.0, rz = 1e9;
    TissueProps props;
};

struct PhantomSpec {
    int nx = 0, ny = 0, nz = 1;
    TissueProps background{0.0, 1.0, 0.1}; // PD = 0 outside every shape
    std::vector<PhantomShape> shapes;      // later shapes overwrite earlier
};

// Literature-informed tissue presets (approximate brain values in seconds).
// These are configuration constants, not ground truth.
inline constexpr TissueProps kWhiteMatterPreset{0.70, 0.85, 0.075};
inline constexpr TissueProps kGreyMatterPreset{0.85, 1.35, 0.095};
inline constexpr TissueProps kFluidPreset{1.00, 4.00, 2.0};

/// Deterministic rasterization of the spec; a voxel takes the properties of
/// the topmost shape covering its center. Throws on empty spec or
/// non-positive dims.
PropertyMap make_phantom(const PhantomSpec& spec);

/// Four-region axial slice: background, grey-matter-like outer ellipse,
/// white-matter-like inner ellipse, fluid-like ventricles.
PhantomSpec brain2d_preset(int nx = 224, int ny = 160);

/// JSON file: {"dims":[nx,ny,nz]?, "background":{...}?, "shapes":[
///   {"kind":"ellipse"|"rect","center":[cx,cy(,cz)],"radii":[rx,ry(,rz)],
///    "pd":..,"t1":..,"t2":..}, ...]}
/// "extent" is accepted as a synonym for "radii" on rects.
PhantomSpec load_phantom_spec(const std::string& path);

// ============================================================================
// Property histograms
// ============================================================================

struct Histogram {
    std::vector<double> centers;
    std::vector<std::size_t> counts;
    double lo = 0.0, hi = 0.0;

    std::size_t total() const;
};

/// Histogram of one property channel over voxels with PD >= mask_pd_min.
/// With clip_percentile set, the upper range is the given quantile of the
/// masked values and larger values are counted in the last bin.
/// Throws on an empty mask or bins < 1.
Histogram property_histogram(const PropertyMap& props, int channel, int bins,
                             double mask_pd_min,
                             std::optional<double> clip_percentile = {});

} // namespace qmri::qmap

#endif

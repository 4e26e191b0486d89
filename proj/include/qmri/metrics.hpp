#ifndef QMRI_METRICS_HPP
#define QMRI_METRICS_HPP

#include <optional>
#include <string>
#include <vector>

#include "qmri/core.hpp"
#include "qmri/qmap.hpp"

namespace qmri::metrics {

/// Mean over all values of the squared / absolute difference.
double mse(const Volume& a, const Volume& b);
double mae(const Volume& a, const Volume& b);

/// 10*log10(peak^2 / mse). Default peak is the dynamic range max(a) - min(a)
/// of the reference a. Identical inputs return +infinity.
double psnr(const Volume& a, const Volume& b, std::optional<double> peak = {});

struct MsSsimConfig {
    int scales = 5; // 1..5; the canonical exponent weights are renormalized
    double k1 = 0.01;
    double k2 = 0.03;
    std::optional<double> dynamic_range; // default: max(a) - min(a)
};

/// Multi-scale SSIM on single-channel 2D slices: 11x11 Gaussian window
/// (sigma 1.5), valid-region convolution, 2x2 mean-pool downsampling,
/// contrast-structure terms per scale and the luminance term at the coarsest
/// scale, exponent weights (0.0448, 0.2856, 0.3001, 0.2363, 0.1333).
/// Per-scale means are clamped at 0 before exponentiation. Throws if the
/// image is smaller than 11 * 2^(scales-1) in either dimension.
double ms_ssim(const Volume& a, const Volume& b, const MsSsimConfig& config = {});

// ============================================================================
// Property-distribution validation
// ============================================================================

/// One literature reference value: which property channel of a tissue label
/// it constrains and its median in seconds.
struct ReferenceEntry {
    std::string label;
    int channel = kChannelT1; // kChannelT1 or kChannelT2
    double median = 0.0;
};

/// JSON asset: [{"label":"WM","channel":"T1","median":0.83}, ...]
std::vector<ReferenceEntry> load_reference_medians(const std::string& path);

struct ValidateConfig {
    double mask_pd_min = 1e-3;
    int hist_bins = 64;
    double clip_percentile = 0.95;
};

struct ReportRow {
    std::string label;
    std::string channel;
    double median_fit = 0.0;
    std::optional<double> median_ref; // absent on summary rows
    std::optional<double> abs_diff;
};

struct ValidationReport {
    std::vector<ReportRow> rows;            // one per reference entry + 2 summary
    qmap::Histogram hist_t1, hist_t2;       // clipped per config
    double median_t1 = 0.0, median_t2 = 0.0; // overall masked medians

    /// Header `label,channel,median_fit,median_ref,abs_diff`; summary fields
    /// that do not apply are left empty.
    std::string to_csv() const;
};

/// Masked (PD >= mask_pd_min) per-channel medians and histograms compared
/// against the reference medians. Throws on an empty reference list or an
/// empty mask.
ValidationReport validate_properties(const PropertyMap& props,
                                     const std::vector<ReferenceEntry>& reference,
                                     const ValidateConfig& config = {});

std::string histogram_csv(const qmap::Histogram& hist); // `bin_center,count`

} // namespace qmri::metrics

#endif

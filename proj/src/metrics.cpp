#include "qmri/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace qmri::metrics {

namespace {

void check_pair(const Volume& a, const Volume& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("volume shape mismatch");
}

} // namespace

double mse(const Volume& a, const Volume& b) {
    check_pair(a, b);
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - b.data()[i];
        sum += d * d;
    }
    return sum / static_cast<double>(a.size());
}

double mae(const Volume& a, const Volume& b) {
    check_pair(a, b);
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        sum += std::fabs(static_cast<double>(a.data()[i]) - b.data()[i]);
    return sum / static_cast<double>(a.size());
}

double psnr(const Volume& a, const Volume& b, std::optional<double> peak) {
    check_pair(a, b);
    double p;
    if (peak) {
        p = *peak;
        if (!(p > 0.0)) throw std::invalid_argument("peak must be > 0");
    } else {
        const auto [lo, hi] = std::minmax_element(a.data().begin(), a.data().end());
        p = static_cast<double>(*hi) - static_cast<double>(*lo);
        if (p <= 0.0) p = 1.0; // constant reference
    }
    const double err = mse(a, b);
    if (err == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(p * p / err);
}

// ============================================================================
// MS-SSIM
// ============================================================================

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kMsSsimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

struct Image {
    int w = 0, h = 0;
    std::vector<double> px; // row-major

    double& at(int x, int y) { return px[static_cast<std::size_t>(y) * w + x]; }
    double at(int x, int y) const { return px[static_cast<std::size_t>(y) * w + x]; }
};

std::vector<double> gaussian_kernel() {
    std::vector<double> k(kWindow);
    const int c = kWindow / 2;
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
        const double d = i - c;
        k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
        sum += k[static_cast<std::size_t>(i)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Valid-region separable Gaussian filter; output is (w-10) x (h-10).
Image filter_valid(const Image& src, const std::vector<double>& k) {
    Image tmp{src.w - kWindow + 1, src.h, {}};
    tmp.px.resize(static_cast<std::size_t>(tmp.w) * tmp.h);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < tmp.h; ++y)
        for (int x = 0; x < tmp.w; ++x) {
            double sum = 0.0;
            for (int i = 0; i < kWindow; ++i) sum += k[static_cast<std::size_t>(i)] * src.at(x + i, y);
            tmp.at(x, y) = sum;
        }
    Image out{tmp.w, tmp.h - kWindow + 1, {}};
    out.px.resize(static_cast<std::size_t>(out.w) * out.h);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            double sum = 0.0;
            for (int i = 0; i < kWindow; ++i) sum += k[static_cast<std::size_t>(i)] * tmp.at(x, y + i);
            out.at(x, y) = sum;
        }
    return out;
}

Image downsample2(const Image& src) {
    Image out{src.w / 2, src.h / 2, {}};
    out.px.resize(static_cast<std::size_t>(out.w) * out.h);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            out.at(x, y) = 0.25 * (src.at(2 * x, 2 * y) + src.at(2 * x + 1, 2 * y) +
                                   src.at(2 * x, 2 * y + 1) + src.at(2 * x + 1, 2 * y + 1));
    return out;
}

Image to_image(const Volume& v) {
    Image img{v.nx(), v.ny(), {}};
    img.px.assign(v.data().begin(), v.data().end());
    return img;
}

struct ScaleTerms {
    double cs = 0.0;
    double luminance = 0.0;
};

ScaleTerms scale_terms(const Image& a, const Image& b, const std::vector<double>& k,
                       double c1, double c2) {
    Image a2{a.w, a.h, {}}, b2{a.w, a.h, {}}, ab{a.w, a.h, {}};
    a2.px.resize(a.px.size());
    b2.px.resize(a.px.size());
    ab.px.resize(a.px.size());
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        a2.px[i] = a.px[i] * a.px[i];
        b2.px[i] = b.px[i] * b.px[i];
        ab.px[i] = a.px[i] * b.px[i];
    }
    const Image mu_a = filter_valid(a, k);
    const Image mu_b = filter_valid(b, k);
    const Image e_a2 = filter_valid(a2, k);
    const Image e_b2 = filter_valid(b2, k);
    const Image e_ab = filter_valid(ab, k);

    double cs_sum = 0.0, l_sum = 0.0;
    for (std::size_t i = 0; i < mu_a.px.size(); ++i) {
        const double ma = mu_a.px[i], mb = mu_b.px[i];
        const double va = e_a2.px[i] - ma * ma;
        const double vb = e_b2.px[i] - mb * mb;
        const double cov = e_ab.px[i] - ma * mb;
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
        l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    const double n = static_cast<double>(mu_a.px.size());
    return {cs_sum / n, l_sum / n};
}

} // namespace

double ms_ssim(const Volume& a, const Volume& b, const MsSsimConfig& config) {
    check_pair(a, b);
    if (a.channels() != 1 || a.nz() != 1)
        throw std::invalid_argument("ms_ssim expects single-channel 2D slices");
    if (config.scales < 1 || config.scales > 5)
        throw std::invalid_argument("scales must be in 1..5");
    const int min_dim = std::min(a.nx(), a.ny());
    const int required = kWindow << (config.scales - 1);
    if (min_dim < required)
        throw std::invalid_argument("image too small for " + std::to_string(config.scales) +
                                    " scales; minimum dimension is " + std::to_string(required));

    double range;
    if (config.dynamic_range) {
        range = *config.dynamic_range;
        if (!(range > 0.0)) throw std::invalid_argument("dynamic_range must be > 0");
    } else {
        const auto [lo, hi] = std::minmax_element(a.data().begin(), a.data().end());
        range = static_cast<double>(*hi) - static_cast<double>(*lo);
        if (range <= 0.0) range = 1.0;
    }
    const double c1 = (config.k1 * range) * (config.k1 * range);
    const double c2 = (config.k2 * range) * (config.k2 * range);

    double weights[5];
    double wsum = 0.0;
    for (int i = 0; i < config.scales; ++i) wsum += kMsSsimWeights[i];
    for (int i = 0; i < config.scales; ++i) weights[i] = kMsSsimWeights[i] / wsum;

    const std::vector<double> kernel = gaussian_kernel();
    Image ia = to_image(a);
    Image ib = to_image(b);
    double score = 1.0;
    for (int s = 0; s < config.scales; ++s) {
        const ScaleTerms terms = scale_terms(ia, ib, kernel, c1, c2);
        const bool last = s + 1 == config.scales;
        // anticorrelated structure can drive the mean negative; clamp before
        // exponentiation so the product stays real
        const double cs = std::max(terms.cs, 0.0);
        if (last) {
            const double lum = std::max(terms.luminance, 0.0);
            score *= std::pow(lum, weights[s]) * std::pow(cs, weights[s]);
        } else {
            score *= std::pow(cs, weights[s]);
            ia = downsample2(ia);
            ib = downsample2(ib);
        }
    }
    return score;
}

// ============================================================================
// Property-distribution validation
// ============================================================================

std::vector<ReferenceEntry> load_reference_medians(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_array())
        throw std::runtime_error("reference medians must be a JSON array: " + path);
    std::vector<ReferenceEntry> entries;
    for (const auto& je : j) {
        ReferenceEntry e;
        e.label = je.at("label").get<std::string>();
        const std::string ch = je.at("channel").get<std::string>();
        if (ch == "T1") e.channel = kChannelT1;
        else if (ch == "T2") e.channel = kChannelT2;
        else throw std::runtime_error("reference channel must be T1 or T2");
        e.median = je.at("median").get<double>();
        entries.push_back(e);
    }
    return entries;
}

std::string ValidationReport::to_csv() const {
    std::ostringstream os;
    os << "label,channel,median_fit,median_ref,abs_diff\n";
    os.precision(9);
    for (const ReportRow& r : rows) {
        os << r.label << ',' << r.channel << ',' << r.median_fit << ',';
        if (r.median_ref) os << *r.median_ref;
        os << ',';
        if (r.abs_diff) os << *r.abs_diff;
        os << '\n';
    }
    return os.str();
}

ValidationReport validate_properties(const PropertyMap& props,
                                     const std::vector<ReferenceEntry>& reference,
                                     const ValidateConfig& config) {
    if (reference.empty()) throw std::invalid_argument("empty reference list");
    const Volume& v = props.vol;
    const std::size_t n = v.voxel_count();
    std::vector<double> t1s, t2s;
    for (std::size_t i = 0; i < n; ++i) {
        if (v.data()[i] >= config.mask_pd_min) {
            t1s.push_back(v.data()[n + i]);
            t2s.push_back(v.data()[2 * n + i]);
        }
    }
    if (t1s.empty()) throw std::invalid_argument("empty mask");

    ValidationReport report;
    report.median_t1 = linear_quantile(t1s, 0.5);
    report.median_t2 = linear_quantile(t2s, 0.5);
    report.hist_t1 = qmap::property_histogram(props, kChannelT1, config.hist_bins,
                                              config.mask_pd_min, config.clip_percentile);
    report.hist_t2 = qmap::property_histogram(props, kChannelT2, config.hist_bins,
                                              config.mask_pd_min, config.clip_percentile);

    for (const ReferenceEntry& e : reference) {
        if (e.channel != kChannelT1 && e.channel != kChannelT2)
            throw std::invalid_argument("reference channel must be T1 or T2");
        const double fit = e.channel == kChannelT1 ? report.median_t1 : report.median_t2;
        report.rows.push_back({e.label, e.channel == kChannelT1 ? "T1" : "T2", fit, e.median,
                               std::fabs(fit - e.median)});
    }
    report.rows.push_back({"overall", "T1", report.median_t1, std::nullopt, std::nullopt});
    report.rows.push_back({"overall", "T2", report.median_t2, std::nullopt, std::nullopt});
    return report;
}

std::string histogram_csv(const qmap::Histogram& hist) {
    std::ostringstream os;
    os << "bin_center,count\n";
    os.precision(9);
    for (std::size_t i = 0; i < hist.centers.size(); ++i)
        os << hist.centers[i] << ',' << hist.counts[i] << '\n';
    return os.str();
}

} // namespace qmri::metrics

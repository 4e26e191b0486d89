#include "qmri/reference.hpp"

#include <algorithm>
#include <cmath>

#include "qmri/rng.hpp"

// Plain serial twins of the OpenMP kernels. synthesize / fit_volume /
// ddpm_sample must match the parallel versions bit-for-bit; ms_ssim uses a
// direct (non-separable) convolution, so agreement is to rounding only.

namespace qmri::reference {

Volume synthesize(const PropertyMap& props, const AcquisitionParams& params,
                  const signal::SignalOptions& opts, double noise_sigma, std::uint64_t seed) {
    params.validate();
    const Volume& v = props.vol;
    const std::size_t n = v.voxel_count();
    const float* pd = v.data().data();
    const float* t1 = pd + n;
    const float* t2 = t1 + n;

    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = signal::evaluate(pd[i], t1[i], t2[i], params, opts);
        if (noise_sigma > 0.0) s += noise_sigma * rng::normal(seed, i);
        out[i] = static_cast<float>(s);
    }
    return Volume(v.nx(), v.ny(), v.nz(), 1, std::move(out), {"signal"});
}

qmap::FitResult fit_volume(std::span<const qmap::ContrastImage> images,
                           const qmap::FitConfig& config) {
    config.validate();
    if (images.empty()) throw std::invalid_argument("no input images");
    const Volume& first = images.front().image;
    for (const qmap::ContrastImage& ci : images) {
        if (ci.image.channels() != 1)
            throw std::invalid_argument("fit inputs must be single-channel");
        if (!ci.image.same_shape(first)) throw std::invalid_argument("input dims mismatch");
    }

    const std::size_t n = first.voxel_count();
    std::vector<float> props(3 * n);
    qmap::FitResult result{PropertyMap{}, std::vector<double>(n), std::vector<int>(n),
                           std::vector<std::uint8_t>(n)};

    std::vector<qmap::Observation> obs(images.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < images.size(); ++j) {
            obs[j].signal = images[j].image.data()[i];
            obs[j].params = images[j].params;
        }
        const qmap::VoxelFit fit = qmap::fit_voxel(obs, config);
        props[i] = static_cast<float>(fit.props.pd);
        props[n + i] = static_cast<float>(fit.props.t1);
        props[2 * n + i] = static_cast<float>(fit.props.t2);
        result.residual_norm[i] = fit.diag.residual_norm;
        result.iterations[i] = fit.diag.iterations;
        result.converged[i] = fit.diag.converged ? 1 : 0;
    }

    Volume vol(first.nx(), first.ny(), first.nz(), 3, std::move(props), {"PD", "T1", "T2"});
    result.props = PropertyMap::from_volume(std::move(vol));
    return result;
}

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kMsSsimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

struct Plane {
    int w = 0, h = 0;
    std::vector<double> px;

    double at(int x, int y) const { return px[static_cast<std::size_t>(y) * w + x]; }
};

Plane downsample2(const Plane& src) {
    Plane out{src.w / 2, src.h / 2, {}};
    out.px.resize(static_cast<std::size_t>(out.w) * out.h);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            out.px[static_cast<std::size_t>(y) * out.w + x] =
                0.25 * (src.at(2 * x, 2 * y) + src.at(2 * x + 1, 2 * y) +
                        src.at(2 * x, 2 * y + 1) + src.at(2 * x + 1, 2 * y + 1));
    return out;
}

} // namespace

double ms_ssim(const Volume& a, const Volume& b, const metrics::MsSsimConfig& config) {
    if (!a.same_shape(b)) throw std::invalid_argument("volume shape mismatch");
    if (a.channels() != 1 || a.nz() != 1)
        throw std::invalid_argument("ms_ssim expects single-channel 2D slices");
    if (config.scales < 1 || config.scales > 5)
        throw std::invalid_argument("scales must be in 1..5");
    if (std::min(a.nx(), a.ny()) < (kWindow << (config.scales - 1)))
        throw std::invalid_argument("image too small for requested scales");

    double range;
    if (config.dynamic_range) {
        range = *config.dynamic_range;
    } else {
        const auto [lo, hi] = std::minmax_element(a.data().begin(), a.data().end());
        range = static_cast<double>(*hi) - static_cast<double>(*lo);
        if (range <= 0.0) range = 1.0;
    }
    const double c1 = (config.k1 * range) * (config.k1 * range);
    const double c2 = (config.k2 * range) * (config.k2 * range);

    // 2D window, direct convolution
    double window[kWindow][kWindow];
    double wsum = 0.0;
    for (int i = 0; i < kWindow; ++i)
        for (int j = 0; j < kWindow; ++j) {
            const double di = i - kWindow / 2, dj = j - kWindow / 2;
            window[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * kWindowSigma * kWindowSigma));
            wsum += window[i][j];
        }
    for (auto& row : window)
        for (double& v : row) v /= wsum;

    double weights[5];
    double sumw = 0.0;
    for (int i = 0; i < config.scales; ++i) sumw += kMsSsimWeights[i];
    for (int i = 0; i < config.scales; ++i) weights[i] = kMsSsimWeights[i] / sumw;

    Plane pa{a.nx(), a.ny(), std::vector<double>(a.data().begin(), a.data().end())};
    Plane pb{b.nx(), b.ny(), std::vector<double>(b.data().begin(), b.data().end())};

    double score = 1.0;
    for (int s = 0; s < config.scales; ++s) {
        double cs_sum = 0.0, l_sum = 0.0;
        std::size_t count = 0;
        for (int y = 0; y + kWindow <= pa.h; ++y)
            for (int x = 0; x + kWindow <= pa.w; ++x) {
                double ma = 0.0, mb = 0.0, ea2 = 0.0, eb2 = 0.0, eab = 0.0;
                for (int i = 0; i < kWindow; ++i)
                    for (int j = 0; j < kWindow; ++j) {
                        const double wa = pa.at(x + j, y + i);
                        const double wb = pb.at(x + j, y + i);
                        ma += window[i][j] * wa;
                        mb += window[i][j] * wb;
                        ea2 += window[i][j] * wa * wa;
                        eb2 += window[i][j] * wb * wb;
                        eab += window[i][j] * wa * wb;
                    }
                const double va = ea2 - ma * ma;
                const double vb = eb2 - mb * mb;
                const double cov = eab - ma * mb;
                cs_sum += (2.0 * cov + c2) / (va + vb + c2);
                l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                ++count;
            }
        const double cs = std::max(cs_sum / static_cast<double>(count), 0.0);
        if (s + 1 == config.scales) {
            const double lum = std::max(l_sum / static_cast<double>(count), 0.0);
            score *= std::pow(lum, weights[s]) * std::pow(cs, weights[s]);
        } else {
            score *= std::pow(cs, weights[s]);
            pa = downsample2(pa);
            pb = downsample2(pb);
        }
    }
    return score;
}

std::vector<std::vector<double>> ddpm_sample(const nn::MlpModel& denoiser,
                                             const diffusion::DiffusionSchedule& schedule,
                                             int dim, int count, std::uint64_t seed) {
    // Re-runs each chain exactly as the parallel sampler does, one at a time.
    std::vector<std::vector<double>> samples(static_cast<std::size_t>(count));
    for (int c = 0; c < count; ++c) {
        std::vector<double> z(static_cast<std::size_t>(dim));
        const std::uint64_t chain_seed = rng::derive_seed(seed, static_cast<std::uint64_t>(c));
        std::uint64_t draw = 0;
        for (int d = 0; d < dim; ++d) z[static_cast<std::size_t>(d)] = rng::normal(chain_seed, draw++);
        for (int t = schedule.timesteps; t >= 1; --t) {
            const double beta = schedule.beta[static_cast<std::size_t>(t - 1)];
            const double alpha = schedule.alpha[static_cast<std::size_t>(t - 1)];
            const double abar = schedule.alpha_bar[static_cast<std::size_t>(t - 1)];
            std::vector<double> in(z.begin(), z.end());
            const std::vector<double> emb = diffusion::time_embedding(t);
            in.insert(in.end(), emb.begin(), emb.end());
            const std::vector<double> eps_hat = nn::mlp_forward(denoiser, in);
            const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
            const double coef = beta / std::sqrt(1.0 - abar);
            for (int d = 0; d < dim; ++d)
                z[static_cast<std::size_t>(d)] =
                    inv_sqrt_alpha *
                    (z[static_cast<std::size_t>(d)] - coef * eps_hat[static_cast<std::size_t>(d)]);
            if (t > 1) {
                const double abar_prev = schedule.alpha_bar[static_cast<std::size_t>(t - 2)];
                const double btilde = beta * (1.0 - abar_prev) / (1.0 - abar);
                const double sd = std::sqrt(btilde);
                for (int d = 0; d < dim; ++d)
                    z[static_cast<std::size_t>(d)] += sd * rng::normal(chain_seed, draw++);
            }
        }
        samples[static_cast<std::size_t>(c)] = std::move(z);
    }
    return samples;
}

} // namespace qmri::reference

// Acceptance suite: one pass/fail line per criterion, exit 1 on any failure.
// Each criterion pins its tolerance in code next to the check.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "qmri/core.hpp"
#include "qmri/diffusion.hpp"
#include "qmri/fusion.hpp"
#include "qmri/metrics.hpp"
#include "qmri/qmap.hpp"
#include "qmri/rng.hpp"
#include "qmri/signal.hpp"
#include "oracles.hpp"

using namespace qmri;
namespace fs = std::filesystem;

namespace {

struct Criterion {
    std::string name;
    std::function<bool(std::string&)> run;
};

struct RandomPoint {
    double pd, t1, t2;
    AcquisitionParams params;
};

RandomPoint random_point(std::uint64_t seed, std::uint64_t i, SequenceKind kind) {
    rng::UniformStream u{rng::derive_seed(seed, i), 0};
    RandomPoint p;
    p.pd = 2.0 * u();
    p.t1 = 0.2 + 4.8 * u();
    p.t2 = 0.02 + 2.48 * u();
    const double tr = 0.5 + 9.5 * u();
    p.params.sequence = kind;
    p.params.te = tr * (0.01 + 0.5 * u());
    p.params.tr = tr;
    if (kind != SequenceKind::SpinEcho) p.params.ti = tr * (0.05 + 0.9 * u());
    return p;
}

// ---------------------------------------------------------------------------
// 1. Signal-model correctness
// ---------------------------------------------------------------------------
bool signal_correctness(std::string& detail) {
    double worst_value = 0.0, worst_jac = 0.0;
    for (SequenceKind kind :
         {SequenceKind::MPRAGE, SequenceKind::SpinEcho, SequenceKind::Flair}) {
        for (std::uint64_t i = 0; i < 10000; ++i) {
            const RandomPoint p = random_point(1001, i, kind);
            const double got = signal::evaluate(p.pd, p.t1, p.t2, p.params);
            const double want =
                static_cast<double>(oracles::signal_ld(p.pd, p.t1, p.t2, p.params));
            worst_value = std::max(worst_value, oracles::rel_err(got, want, 1e-8));
        }
        for (std::uint64_t i = 0; i < 2000; ++i) {
            const RandomPoint p = random_point(1002, i, kind);
            const auto d = signal::jacobian(p.pd, p.t1, p.t2, p.params);
            const auto eval_at = [&](double pd, double t1, double t2) {
                return signal::evaluate(pd, t1, t2, p.params);
            };
            const double h_pd = 1e-6 * std::max(1.0, std::fabs(p.pd));
            const double h_t1 = 1e-6 * std::max(1.0, std::fabs(p.t1));
            const double h_t2 = 1e-6 * std::max(1.0, std::fabs(p.t2));
            const double fd_pd =
                (eval_at(p.pd + h_pd, p.t1, p.t2) - eval_at(p.pd - h_pd, p.t1, p.t2)) /
                (2 * h_pd);
            const double fd_t1 =
                (eval_at(p.pd, p.t1 + h_t1, p.t2) - eval_at(p.pd, p.t1 - h_t1, p.t2)) /
                (2 * h_t1);
            const double fd_t2 =
                (eval_at(p.pd, p.t1, p.t2 + h_t2) - eval_at(p.pd, p.t1, p.t2 - h_t2)) /
                (2 * h_t2);
            // 1e-4 magnitude floor absorbs finite-difference roundoff near
            // derivative zero crossings
            worst_jac = std::max(worst_jac, oracles::rel_err(d.d_pd, fd_pd, 1e-4));
            worst_jac = std::max(worst_jac, oracles::rel_err(d.d_t1, fd_t1, 1e-4));
            worst_jac = std::max(worst_jac, oracles::rel_err(d.d_t2, fd_t2, 1e-4));
        }
    }
    std::ostringstream os;
    os << "max rel err: values " << worst_value << ", jacobians " << worst_jac;
    detail = os.str();
    return worst_value < 1e-6 && worst_jac < 1e-6;
}

// ---------------------------------------------------------------------------
// 2. FLAIR nulling
// ---------------------------------------------------------------------------
bool flair_nulling(std::string& detail) {
    double worst = 0.0;
    for (int i = 0; i <= 48; ++i) {
        const double t1 = 0.2 + (5.0 - 0.2) * i / 48.0;
        const double tr = 20.0 * t1;
        const double ti = t1 * std::log(2.0);
        const auto params = AcquisitionParams::flair(0.05, tr, ti);
        for (double t2 : {0.05, 0.5, 2.0})
            worst = std::max(worst, std::fabs(signal::flair(1.0, t1, t2, params)));
    }
    std::ostringstream os;
    os << "max |s|/PD over the T1 grid: " << worst;
    detail = os.str();
    return worst < 1e-6;
}

// ---------------------------------------------------------------------------
// 3. PoE algebra
// ---------------------------------------------------------------------------
bool poe_algebra(std::string& detail) {
    using fusion::GaussianFactor;

    std::vector<GaussianFactor> experts;
    for (std::uint64_t e = 0; e < 5; ++e) {
        rng::UniformStream u{rng::derive_seed(33, e), 0};
        GaussianFactor g;
        for (int d = 0; d < 16; ++d) {
            g.mean.push_back(4.0 * u() - 2.0);
            g.var.push_back(0.05 + 3.0 * u());
        }
        experts.push_back(g);
    }
    const GaussianFactor base = fusion::poe_fuse(experts);

    bool permutation_ok = true;
    std::vector<GaussianFactor> shuffled = experts;
    for (std::uint64_t round = 0; round < 10; ++round) {
        for (std::size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[rng::mix64(round, i) % i]);
        const GaussianFactor again = fusion::poe_fuse(shuffled);
        permutation_ok = permutation_ok && again.mean == base.mean && again.var == base.var;
    }

    double additivity = 0.0;
    for (std::size_t d = 0; d < base.dim(); ++d) {
        double prec = 0.0;
        for (const auto& e : experts) prec += 1.0 / e.var[d];
        additivity = std::max(additivity, oracles::rel_err(1.0 / base.var[d], prec, 0.0));
    }

    double sup = 0.0;
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
        std::vector<GaussianFactor> one_d;
        for (std::uint64_t e = 0; e < 3; ++e) {
            rng::UniformStream u{rng::derive_seed(44 + trial, e), 0};
            one_d.push_back(GaussianFactor{{3.0 * u() - 1.5}, {0.1 + 2.0 * u()}});
        }
        const GaussianFactor fused = fusion::poe_fuse(one_d);
        const double lo = fused.mean[0] - 8.0 * std::sqrt(fused.var[0]);
        const double hi = fused.mean[0] + 8.0 * std::sqrt(fused.var[0]);
        const int n = 160001;
        const double h = (hi - lo) / (n - 1);
        std::vector<double> prod(static_cast<std::size_t>(n));
        double integral = 0.0;
        for (int i = 0; i < n; ++i) {
            const double x = lo + i * h;
            double p = 1.0;
            for (const auto& e : one_d) p *= oracles::gauss_pdf(x, e.mean[0], e.var[0]);
            prod[static_cast<std::size_t>(i)] = p;
            integral += (i == 0 || i == n - 1) ? 0.5 * p : p;
        }
        integral *= h;
        for (int i = 0; i < n; ++i) {
            const double grid = prod[static_cast<std::size_t>(i)] / integral;
            const double analytic =
                oracles::gauss_pdf(lo + i * h, fused.mean[0], fused.var[0]);
            sup = std::max(sup, std::fabs(grid - analytic));
        }
    }

    std::ostringstream os;
    os << "permutation " << (permutation_ok ? "bitwise" : "BROKEN") << ", additivity "
       << additivity << ", density sup err " << sup;
    detail = os.str();
    return permutation_ok && additivity < 1e-12 && sup < 1e-6;
}

// ---------------------------------------------------------------------------
// 4. MAP round trip on the brain2d phantom
// ---------------------------------------------------------------------------
struct RoundTripStats {
    double fraction_within_1pct = 0.0;
    double median_rel_err = 1e300;
};

RoundTripStats round_trip(const PropertyMap& truth, double noise_frac, std::uint64_t seed) {
    const std::array<AcquisitionParams, 3> acq = {
        AcquisitionParams::mprage(0.01, 2.3, 0.9),
        AcquisitionParams::spin_echo(0.08, 4.0),
        AcquisitionParams::flair(0.1, 9.0, 2.4),
    };
    std::vector<qmap::ContrastImage> images;
    for (const auto& p : acq) {
        if (noise_frac == 0.0) {
            images.push_back({signal::synthesize(truth, p), p});
        } else {
            const Volume clean = signal::synthesize(truth, p);
            const auto [lo, hi] = std::minmax_element(clean.data().begin(), clean.data().end());
            const double sigma = noise_frac * (static_cast<double>(*hi) - *lo);
            images.push_back({signal::synthesize(truth, p, {}, sigma, seed++), p});
        }
    }
    qmap::FitConfig config;
    config.prior_weight = 1e-4;
    const qmap::FitResult result = qmap::fit_volume(images, config);

    const std::size_t n = truth.vol.voxel_count();
    std::vector<double> errors;
    std::size_t good = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (truth.vol.data()[i] <= 0.0f) continue;
        double err = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double want = truth.vol.data()[static_cast<std::size_t>(c) * n + i];
            const double got = result.props.vol.data()[static_cast<std::size_t>(c) * n + i];
            err = std::max(err, std::fabs(got - want) / want);
        }
        errors.push_back(err);
        if (err <= 0.01) ++good;
    }
    RoundTripStats st;
    st.fraction_within_1pct = static_cast<double>(good) / static_cast<double>(errors.size());
    st.median_rel_err = linear_quantile(errors, 0.5);
    return st;
}

bool map_round_trip(std::string& detail) {
    const PropertyMap truth = qmap::make_phantom(qmap::brain2d_preset(224, 160));
    const RoundTripStats clean = round_trip(truth, 0.0, 0);
    const RoundTripStats noisy = round_trip(truth, 0.01, 4000);
    std::ostringstream os;
    os << "noiseless within 1%: " << clean.fraction_within_1pct * 100.0
       << "%, noisy median err: " << noisy.median_rel_err * 100.0 << "%";
    detail = os.str();
    return clean.fraction_within_1pct >= 0.99 && noisy.median_rel_err <= 0.05;
}

// ---------------------------------------------------------------------------
// 5. Prior behavior
// ---------------------------------------------------------------------------
bool prior_behavior(std::string& detail) {
    qmap::FitConfig config;
    config.prior_weight = 1e-2;
    const qmap::VoxelFit empty = qmap::fit_voxel({}, config);
    const bool exact = empty.props.t1 == 1.0 && empty.props.t2 == 0.1;

    // fixed under-determined problem: a single spin-echo contrast
    const PropertyMap truth = qmap::make_phantom(qmap::brain2d_preset(32, 24));
    const auto params = AcquisitionParams::spin_echo(0.08, 4.0);
    const std::vector<qmap::ContrastImage> images = {{signal::synthesize(truth, params), params}};

    bool monotone = true;
    double prev_d1 = 1e300, prev_d2 = 1e300;
    std::ostringstream trace;
    for (double lambda : {1e-4, 1e-2, 1.0, 100.0}) {
        qmap::FitConfig c;
        c.prior_weight = lambda;
        const qmap::FitResult fit = qmap::fit_volume(images, c);
        const std::size_t n = truth.vol.voxel_count();
        std::vector<double> t1s, t2s;
        for (std::size_t i = 0; i < n; ++i) {
            if (truth.vol.data()[i] <= 0.0f) continue;
            t1s.push_back(fit.props.vol.data()[n + i]);
            t2s.push_back(fit.props.vol.data()[2 * n + i]);
        }
        const double d1 = std::fabs(linear_quantile(t1s, 0.5) - 1.0);
        const double d2 = std::fabs(linear_quantile(t2s, 0.5) - 0.1);
        monotone = monotone && d1 <= prev_d1 + 1e-12 && d2 <= prev_d2 + 1e-12;
        prev_d1 = d1;
        prev_d2 = d2;
        trace << " " << d1;
    }
    std::ostringstream os;
    os << "zero-obs exact (" << empty.props.t1 << ", " << empty.props.t2
       << "), |median T1 - 1| over lambda:" << trace.str();
    detail = os.str();
    return exact && monotone;
}

// ---------------------------------------------------------------------------
// 6. Unseen-contrast synthesis
// ---------------------------------------------------------------------------
bool unseen_contrast(std::string& detail) {
    const PropertyMap truth = qmap::make_phantom(qmap::brain2d_preset(224, 160));

    // fit from MPRAGE and spin-echo acquisitions only
    const std::array<AcquisitionParams, 4> acq = {
        AcquisitionParams::mprage(0.01, 2.3, 0.9),
        AcquisitionParams::mprage(0.01, 2.3, 1.4),
        AcquisitionParams::spin_echo(0.08, 4.0),
        AcquisitionParams::spin_echo(0.12, 3.0),
    };
    std::vector<qmap::ContrastImage> images;
    for (const auto& p : acq) images.push_back({signal::synthesize(truth, p), p});
    qmap::FitConfig config;
    config.prior_weight = 1e-4;
    const qmap::FitResult fit = qmap::fit_volume(images, config);

    // held-out FLAIR parameters, never seen by the fit
    const auto flair = AcquisitionParams::flair(0.1, 9.0, 2.4);
    const Volume ground_truth = signal::synthesize(truth, flair);
    const Volume predicted = signal::synthesize(fit.props, flair);

    // 160 rows support at most 4 dyadic scales with the 11x11 window
    metrics::MsSsimConfig ms;
    ms.scales = 4;
    const double oracle_score = metrics::ms_ssim(ground_truth, ground_truth, ms);
    const double score = metrics::ms_ssim(ground_truth, predicted, ms);
    std::ostringstream os;
    os << "MS-SSIM " << score << " (self-oracle " << oracle_score << ")";
    detail = os.str();
    return oracle_score == 1.0 && score >= 0.95;
}

// ---------------------------------------------------------------------------
// 7. Diffusion
// ---------------------------------------------------------------------------
bool diffusion_suite(std::string& detail) {
    using namespace qmri::diffusion;

    // oracle denoiser: loss is exactly zero
    const DiffusionSchedule s = make_schedule(200, 1e-4, 2e-2);
    std::vector<std::vector<double>> batch;
    for (std::uint64_t i = 0; i < 16; ++i) {
        rng::NormalStream ns{rng::derive_seed(600, i), 0};
        batch.push_back({ns(), ns()});
    }
    const auto draws = ldm_draws(s, 607, batch.size(), 2);
    const DenoiseFn oracle = [&](std::span<const double>, int, std::size_t i) {
        return draws[i].eps;
    };
    const bool oracle_zero = ldm_loss_value(oracle, batch, s, 607) == 0.0;

    // q_sample Monte Carlo moments at a fixed t
    const int t = 123;
    const double abar = s.alpha_bar[static_cast<std::size_t>(t - 1)];
    const int n = 100000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const std::vector<double> eps{rng::normal(611, static_cast<std::uint64_t>(i))};
        const double zt = q_sample(std::vector<double>{0.8}, t, eps, s)[0];
        sum += zt;
        sum2 += zt * zt;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    const double want_mean = std::sqrt(abar) * 0.8;
    const double want_var = 1.0 - abar;
    const bool moments_ok =
        std::fabs(mean - want_mean) < 3.0 * std::sqrt(want_var / n) &&
        std::fabs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / n);

    // toy training on a two-mode mixture at +/-2 in 2-D
    std::vector<std::vector<double>> dataset;
    for (std::uint64_t i = 0; i < 2048; ++i) {
        rng::NormalStream ns{rng::derive_seed(613, i), 0};
        const double sign = rng::uniform_open(617, i) < 0.5 ? -1.0 : 1.0;
        dataset.push_back({sign * 2.0 + 0.2 * ns(), sign * 2.0 + 0.2 * ns()});
    }
    TrainConfig config;
    config.epochs = 150;
    config.batch_size = 16;
    config.lr = 1e-3;
    config.seed = 29;
    config.hidden = {64, 64};
    const TrainResult trained = train_toy(dataset, s, config);

    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
        head += trained.epoch_loss[static_cast<std::size_t>(i)];
        tail += trained.epoch_loss[trained.epoch_loss.size() - 1 - static_cast<std::size_t>(i)];
    }
    const bool descending = tail < head;

    const auto samples = ddpm_sample(trained.model, s, 2, 10000, 4001);
    std::size_t near_pos = 0, near_neg = 0;
    for (const auto& z : samples) {
        const double dp = std::hypot(z[0] - 2.0, z[1] - 2.0);
        const double dn = std::hypot(z[0] + 2.0, z[1] + 2.0);
        if (dp <= 1.0) ++near_pos;
        if (dn <= 1.0) ++near_neg;
    }
    const double frac_pos = static_cast<double>(near_pos) / static_cast<double>(samples.size());
    const double frac_neg = static_cast<double>(near_neg) / static_cast<double>(samples.size());
    const bool coverage = frac_pos >= 0.30 && frac_neg >= 0.30;

    std::ostringstream os;
    os << "oracle loss exact-zero " << (oracle_zero ? "yes" : "NO") << ", moments-3sigma "
       << (moments_ok ? "yes" : "NO") << ", loss " << trained.epoch_loss.front() << " -> "
       << trained.epoch_loss.back() << ", mode mass " << frac_pos << "/" << frac_neg;
    detail = os.str();
    return oracle_zero && moments_ok && descending && coverage;
}

// ---------------------------------------------------------------------------
// 8. nn gradients
// ---------------------------------------------------------------------------
bool nn_gradients(std::string& detail) {
    double worst = 0.0;
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        rng::UniformStream u{rng::derive_seed(800, trial), 0};
        nn::MlpConfig config;
        const int depth = 1 + static_cast<int>(u() * 3.0);
        config.widths.push_back(2 + static_cast<int>(u() * 6.0));
        for (int l = 0; l < depth; ++l) config.widths.push_back(4 * (1 + static_cast<int>(u() * 3.0)));
        config.widths.push_back(1 + static_cast<int>(u() * 4.0));
        const bool conditioned = u() < 0.5;
        if (conditioned) {
            config.cond_dim = 3;
            config.groups = (u() < 0.5) ? 1 : 2;
        }
        config.seed = trial;
        nn::MlpModel model = nn::MlpModel::init(config);

        std::vector<double> input(static_cast<std::size_t>(config.widths.front()));
        for (double& v : input) v = 2.0 * u() - 1.0;
        std::vector<double> proj(static_cast<std::size_t>(config.widths.back()));
        for (double& v : proj) v = 2.0 * u() - 1.0;
        std::optional<AcquisitionParams> cond;
        if (conditioned) cond = AcquisitionParams::flair(0.1, 9.0, 2.5);

        const auto scalar = [&](const nn::MlpModel& m) {
            const auto out = nn::mlp_forward(m, input, cond);
            double s = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * proj[i];
            return s;
        };
        const auto grad = nn::flatten_grads(nn::mlp_backward(model, input, cond, proj).grads);
        const std::vector<double> params = nn::flatten_params(model);

        // full-model directional derivative vs <grad, d>
        for (int rep = 0; rep < 3; ++rep) {
            std::vector<double> dir(params.size());
            for (double& v : dir) v = 2.0 * u() - 1.0;
            double dot = 0.0;
            for (std::size_t i = 0; i < dir.size(); ++i) dot += grad[i] * dir[i];
            const double eps = 1e-6;
            nn::MlpModel probe = model;
            std::vector<double> p(params.size());
            for (std::size_t i = 0; i < p.size(); ++i) p[i] = params[i] + eps * dir[i];
            nn::set_params(probe, p);
            const double fp = scalar(probe);
            for (std::size_t i = 0; i < p.size(); ++i) p[i] = params[i] - eps * dir[i];
            nn::set_params(probe, p);
            const double fm = scalar(probe);
            worst = std::max(worst, oracles::rel_err((fp - fm) / (2 * eps), dot, 1e-6));
        }
    }
    std::ostringstream os;
    os << "max directional-derivative rel err " << worst;
    detail = os.str();
    return worst < 1e-4;
}

// ---------------------------------------------------------------------------
// 9. Metrics
// ---------------------------------------------------------------------------
bool metrics_suite(std::string& detail) {
    std::vector<float> data(200 * 192);
    for (int y = 0; y < 192; ++y)
        for (int x = 0; x < 200; ++x)
            data[static_cast<std::size_t>(y) * 200 + x] =
                static_cast<float>(50.0 + 40.0 * std::sin(x * 0.11) * std::cos(y * 0.07));
    const Volume a(200, 192, 1, 1, data);
    const bool self_one = metrics::ms_ssim(a, a) == 1.0;

    std::vector<float> noisy = data;
    for (std::size_t i = 0; i < noisy.size(); ++i)
        noisy[i] += static_cast<float>(2.0 * rng::normal(900, i));
    const Volume b(200, 192, 1, 1, noisy);
    const double rel_mse = oracles::rel_err(metrics::mse(a, b), oracles::naive_mse(a, b), 0.0);
    const double rel_mae = oracles::rel_err(metrics::mae(a, b), oracles::naive_mae(a, b), 0.0);
    const auto [lo, hi] = std::minmax_element(a.data().begin(), a.data().end());
    const double peak = static_cast<double>(*hi) - *lo;
    const double rel_psnr =
        oracles::rel_err(metrics::psnr(a, b), oracles::naive_psnr(a, b, peak), 0.0);

    bool monotone = true;
    double prev = 1.1;
    for (double frac : {0.0, 0.01, 0.05, 0.10}) {
        std::vector<float> d2 = data;
        for (std::size_t i = 0; i < d2.size(); ++i)
            d2[i] += static_cast<float>(frac * peak * rng::normal(901, i));
        const double score = metrics::ms_ssim(a, Volume(200, 192, 1, 1, d2));
        monotone = monotone && score < prev;
        prev = score;
    }

    std::ostringstream os;
    os << "self MS-SSIM exact-one " << (self_one ? "yes" : "NO") << ", naive rel errs mse "
       << rel_mse << " mae " << rel_mae << " psnr " << rel_psnr;
    detail = os.str();
    return self_one && rel_mse < 1e-6 && rel_mae < 1e-6 && rel_psnr < 1e-6 && monotone;
}

// ---------------------------------------------------------------------------
// 10. CLI determinism
// ---------------------------------------------------------------------------
struct CliWorkspace {
    fs::path dir;
    CliWorkspace() {
        dir = fs::temp_directory_path() /
              ("qmri_acceptance_" + std::to_string(::getpid()));
        fs::create_directories(dir);
    }
    ~CliWorkspace() {
        std::error_code ec;
        fs::remove_all(dir, ec);
    }
    std::string operator()(const std::string& name) const { return (dir / name).string(); }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(QMRI_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool cli_determinism(std::string& detail) {
    CliWorkspace ws;
    bool ok = true;
    std::ostringstream os;

    const auto twice_identical = [&](const std::string& what, const std::string& args_a,
                                     const std::string& out_a, const std::string& args_b,
                                     const std::string& out_b) {
        const int ra = run_cli(args_a);
        const int rb = run_cli(args_b);
        const bool same = ra == 0 && rb == 0 && slurp(out_a) == slurp(out_b) &&
                          !slurp(out_a).empty();
        if (!same) {
            os << " [" << what << " differs]";
            ok = false;
        }
    };

    twice_identical("phantom",
                    "phantom --preset brain2d --dims 224x160 --out " + ws("p1.pvol"), ws("p1.pvol"),
                    "phantom --preset brain2d --dims 224x160 --out " + ws("p2.pvol"), ws("p2.pvol"));

    const std::string synth_args = "synth --props " + ws("p1.pvol") +
                                   " --seq flair --te 0.1 --tr 9 --ti 2.4"
                                   " --noise-sigma 0.01 --seed 11 --out ";
    twice_identical("synth", synth_args + ws("s1.pvol"), ws("s1.pvol"),
                    synth_args + ws("s2.pvol"), ws("s2.pvol"));

    run_cli("synth --props " + ws("p1.pvol") + " --seq mprage --te 0.01 --tr 2.3 --ti 0.9 --out " +
            ws("m.pvol"));
    run_cli("synth --props " + ws("p1.pvol") + " --seq se --te 0.08 --tr 4 --out " + ws("e.pvol"));
    const std::string fit_args = "fit --inputs " + ws("m.pvol") + ":mprage,0.01,2.3,0.9" +
                                 " --inputs " + ws("e.pvol") + ":se,0.08,4 --lambda 1e-4";
    twice_identical("fit threads 1 vs 8",
                    fit_args + " --threads 1 --out " + ws("f1.pvol"), ws("f1.pvol"),
                    fit_args + " --threads 8 --out " + ws("f8.pvol"), ws("f8.pvol"));

    fusion::write_gauss(ws("a.gauss"), {{0.0, 1.0}, {1.0, 0.5}});
    fusion::write_gauss(ws("b.gauss"), {{2.0, -1.0}, {1.0, 2.0}});
    const std::string fuse_args = "fuse " + ws("a.gauss") + " " + ws("b.gauss") + " --out ";
    twice_identical("fuse", fuse_args + ws("fz1.gauss"), ws("fz1.gauss"),
                    fuse_args + ws("fz2.gauss"), ws("fz2.gauss"));

    std::vector<std::vector<double>> latents;
    for (std::uint64_t i = 0; i < 128; ++i) {
        rng::NormalStream ns{rng::derive_seed(1000, i), 0};
        latents.push_back({ns(), ns()});
    }
    diffusion::write_latents(ws("d.latn"), latents);
    const std::string train_args = "diffuse train --data " + ws("d.latn") +
                                   " --epochs 5 --batch 16 --timesteps 30 --hidden 16 --seed 3"
                                   " --out ";
    twice_identical("diffuse train", train_args + ws("md1.mlp"), ws("md1.mlp"),
                    train_args + ws("md2.mlp"), ws("md2.mlp"));

    const std::string sample_args = "diffuse sample --model " + ws("md1.mlp") +
                                    " --n 8 --timesteps 30 --seed 5 --out ";
    twice_identical("diffuse sample", sample_args + ws("sa1.latn"), ws("sa1.latn"),
                    sample_args + ws("sa2.latn"), ws("sa2.latn"));

    std::ofstream ref(ws("ref.json"));
    ref << R"([{"label":"WM","channel":"T1","median":0.85}])";
    ref.close();
    const std::string validate_args = "validate --props " + ws("f1.pvol") + " --reference " +
                                      ws("ref.json") + " --out ";
    twice_identical("validate", validate_args + ws("r1.csv"), ws("r1.csv"),
                    validate_args + ws("r2.csv"), ws("r2.csv"));

    const std::string metrics_args =
        "metrics --a " + ws("s1.pvol") + " --b " + ws("s2.pvol") + " --scales 4 --out ";
    twice_identical("metrics", metrics_args + ws("mt1.csv"), ws("mt1.csv"),
                    metrics_args + ws("mt2.csv"), ws("mt2.csv"));

    detail = ok ? "all command re-runs byte-identical" : ("mismatch:" + os.str());
    return ok;
}

} // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"signal-model correctness vs high-precision oracle (1e-6)", signal_correctness},
        {"FLAIR nulling at TI = T1 ln2, TR >= 20 T1 (1e-6)", flair_nulling},
        {"PoE algebra: permutation/additivity/density (1e-12, 1e-6)", poe_algebra},
        {"MAP round trip on brain2d (99% @ 1%, noisy median 5%)", map_round_trip},
        {"prior behavior: exact medians and monotone pull", prior_behavior},
        {"unseen-contrast synthesis (MS-SSIM >= 0.95)", unseen_contrast},
        {"diffusion: oracle loss, q_sample moments, mode coverage", diffusion_suite},
        {"nn gradients vs finite differences (1e-4)", nn_gradients},
        {"metrics: exact self-identity and naive agreement (1e-6)", metrics_suite},
        {"CLI determinism: byte-identical re-runs", cli_determinism},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            ok = criteria[i].run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("[%s] %zu. %s — %s (%.1fs)\n", ok ? "PASS" : "FAIL", i + 1,
                    criteria[i].name.c_str(), detail.c_str(), secs);
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    if (failures > 0) {
        std::printf("%d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("all %zu criteria passed\n", criteria.size());
    return 0;
}

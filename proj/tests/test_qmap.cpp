#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "qmri/qmap.hpp"
#include "qmri/rng.hpp"
#include "qmri/signal.hpp"
#include "oracles.hpp"

using namespace qmri;
using namespace qmri::qmap;

namespace {

std::vector<Observation> three_contrast_obs(const TissueProps& truth) {
    const std::array<AcquisitionParams, 3> acq = {
        AcquisitionParams::mprage(0.01, 2.3, 0.9),
        AcquisitionParams::spin_echo(0.08, 4.0),
        AcquisitionParams::flair(0.1, 9.0, 2.4),
    };
    std::vector<Observation> obs;
    for (const auto& p : acq)
        obs.push_back({signal::evaluate(truth.pd, truth.t1, truth.t2, p), p});
    return obs;
}

} // namespace

TEST_SUITE("qmap") {

TEST_CASE("parameterize returns the prior medians at zero") {
    const FitConfig config;
    const TissueProps p = parameterize({0.0, 0.0, 0.0}, config);
    CHECK(p.pd == 1.0);
    CHECK(p.t1 == 1.0);
    CHECK(p.t2 == 0.1); // exact, by the factored median * exp(o) form

    // exponential shift
    const TissueProps q = parameterize({0.0, std::log(2.0), 0.0}, config);
    CHECK(q.t1 == doctest::Approx(2.0 * config.prior_median_t1).epsilon(1e-12));

    // log/exp round trip
    const LogParams theta{0.31, -0.7, 1.2};
    const TissueProps r = parameterize(theta, config);
    CHECK(std::log(r.pd) == doctest::Approx(theta.o_pd).epsilon(1e-12));
    CHECK(std::log(r.t1 / config.prior_median_t1) == doctest::Approx(theta.o_t1).epsilon(1e-12));
    CHECK(std::log(r.t2 / config.prior_median_t2) == doctest::Approx(theta.o_t2).epsilon(1e-12));

    // overflow clamps
    CHECK(parameterize({1000.0, 0.0, 0.0}, config).pd == 1e6);
    CHECK(parameterize({0.0, 1000.0, 0.0}, config).t1 == 1e6);
}

TEST_CASE("map_objective values and errors") {
    FitConfig config;
    config.prior_weight = 0.0;
    const TissueProps truth{0.8, 1.2, 0.09};
    const auto obs = three_contrast_obs(truth);

    // objective is zero at the generating truth with no prior
    const LogParams at_truth{std::log(truth.pd), std::log(truth.t1 / config.prior_median_t1),
                             std::log(truth.t2 / config.prior_median_t2)};
    CHECK(map_objective(at_truth, obs, config) < 1e-20);

    CHECK_THROWS_WITH_AS(map_objective({0, 0, 0}, {}, config),
                         doctest::Contains("unidentifiable"), std::invalid_argument);

    // pure prior is minimized exactly at the medians
    FitConfig prior_only;
    prior_only.prior_weight = 0.5;
    CHECK(map_objective({0.4, 0, 0}, {}, prior_only) == 0.0);
    CHECK(map_objective({0.4, 0.1, 0}, {}, prior_only) > 0.0);
    CHECK(map_objective({0.4, 0, -0.1}, {}, prior_only) > 0.0);
}

TEST_CASE("map_objective equals naive recomputation") {
    FitConfig config;
    config.prior_weight = 3e-2;
    const auto obs = three_contrast_obs({0.8, 1.2, 0.09});
    for (std::uint64_t i = 0; i < 200; ++i) {
        rng::UniformStream u{rng::derive_seed(3, i), 0};
        const LogParams theta{2.0 * u() - 1.0, 2.0 * u() - 1.0, 2.0 * u() - 1.0};
        const double got = map_objective(theta, obs, config);

        // independent recomputation through the long-double signal oracle
        const double pd = std::exp(theta.o_pd);
        const double t1 = config.prior_median_t1 * std::exp(theta.o_t1);
        const double t2 = config.prior_median_t2 * std::exp(theta.o_t2);
        long double want = 0.0L;
        for (const Observation& o : obs) {
            const long double r = oracles::signal_ld(pd, t1, t2, o.params) - o.signal;
            want += r * r;
        }
        want += config.prior_weight * (theta.o_t1 * theta.o_t1 + theta.o_t2 * theta.o_t2);
        CHECK(oracles::rel_err(got, static_cast<double>(want), 1e-12) < 1e-10);
    }
}

TEST_CASE("map_objective gradient matches finite differences") {
    FitConfig config;
    config.prior_weight = 1e-2;
    const auto obs = three_contrast_obs({0.8, 1.2, 0.09});
    double worst = 0.0;
    for (std::uint64_t i = 0; i < 200; ++i) {
        rng::UniformStream u{rng::derive_seed(5, i), 0};
        const LogParams theta{u() - 0.5, u() - 0.5, u() - 0.5};
        const auto grad = map_objective_gradient(theta, obs, config);
        const double h = 1e-6;
        const std::array<double, 3> fd = {
            oracles::central_diff(
                [&](double x) { return map_objective({x, theta.o_t1, theta.o_t2}, obs, config); },
                theta.o_pd, h),
            oracles::central_diff(
                [&](double x) { return map_objective({theta.o_pd, x, theta.o_t2}, obs, config); },
                theta.o_t1, h),
            oracles::central_diff(
                [&](double x) { return map_objective({theta.o_pd, theta.o_t1, x}, obs, config); },
                theta.o_t2, h),
        };
        for (int k = 0; k < 3; ++k)
            worst = std::max(worst, oracles::rel_err(grad[static_cast<std::size_t>(k)],
                                                     fd[static_cast<std::size_t>(k)], 1e-3));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("fit_voxel recovers a three-contrast voxel") {
    const TissueProps truth{0.8, 1.2, 0.09};
    const auto obs = three_contrast_obs(truth);
    FitConfig config;
    config.prior_weight = 1e-4;
    const VoxelFit fit = fit_voxel(obs, config);
    CHECK(fit.props.pd == doctest::Approx(truth.pd).epsilon(0.01));
    CHECK(fit.props.t1 == doctest::Approx(truth.t1).epsilon(0.01));
    CHECK(fit.props.t2 == doctest::Approx(truth.t2).epsilon(0.01));
    CHECK(fit.diag.converged);
    CHECK(fit.diag.residual_norm < 1e-4);
}

TEST_CASE("fit_voxel with no observations returns the prior medians exactly") {
    FitConfig config;
    config.prior_weight = 1e-2;
    const VoxelFit fit = fit_voxel({}, config);
    CHECK(fit.props.pd == 1.0); // PD stays at its initialization
    CHECK(fit.props.t1 == 1.0);
    CHECK(fit.props.t2 == 0.1);

    FitConfig no_prior;
    no_prior.prior_weight = 0.0;
    CHECK_THROWS_AS(fit_voxel({}, no_prior), std::invalid_argument);
}

TEST_CASE("fit_voxel single spin-echo observation leans on the prior") {
    const TissueProps truth{0.9, 0.7, 0.05};
    const auto params = AcquisitionParams::spin_echo(0.08, 4.0);
    const std::vector<Observation> obs = {
        {signal::evaluate(truth.pd, truth.t1, truth.t2, params), params}};
    FitConfig config;
    config.prior_weight = 1e-2;
    const VoxelFit fit = fit_voxel(obs, config);

    // under-determined: T1/T2 sit between the truth and the medians
    CHECK(std::fabs(std::log(fit.props.t1 / config.prior_median_t1)) <=
          std::fabs(std::log(truth.t1 / config.prior_median_t1)) + 1e-9);
    CHECK(std::fabs(std::log(fit.props.t2 / config.prior_median_t2)) <=
          std::fabs(std::log(truth.t2 / config.prior_median_t2)) + 1e-9);

    // descent: no worse than the default (prior-median) initialization
    LogParams init;
    init.o_pd = std::log(std::fabs(obs[0].signal));
    CHECK(map_objective(fit.theta, obs, config) <= map_objective(init, obs, config) + 1e-15);

    const std::vector<Observation> bad_obs = {
        {std::numeric_limits<double>::quiet_NaN(), params}};
    CHECK_THROWS_AS(fit_voxel(bad_obs, config), std::invalid_argument);
}

TEST_CASE("fit_voxel objective trace is non-increasing in the iteration budget") {
    const TissueProps truth{0.8, 1.2, 0.09};
    const auto obs = three_contrast_obs(truth);
    FitConfig config;
    config.prior_weight = 1e-4;
    config.convergence_tol = 0.0; // run the full budget
    double prev = 1e300;
    for (int budget = 1; budget <= 12; ++budget) {
        config.max_iterations = budget;
        const VoxelFit fit = fit_voxel(obs, config);
        const double obj = map_objective(fit.theta, obs, config);
        CHECK(obj <= prev + 1e-15);
        prev = obj;
    }
}

TEST_CASE("prior pull: fits approach the medians monotonically in lambda") {
    const TissueProps truth{0.9, 0.7, 0.05};
    const auto params = AcquisitionParams::spin_echo(0.08, 4.0);
    const std::vector<Observation> obs = {
        {signal::evaluate(truth.pd, truth.t1, truth.t2, params), params}};
    double prev_t1 = 1e300, prev_t2 = 1e300;
    for (double lambda : {1e-4, 1e-2, 1.0, 100.0}) {
        FitConfig config;
        config.prior_weight = lambda;
        const VoxelFit fit = fit_voxel(obs, config);
        const double d1 = std::fabs(fit.props.t1 - 1.0);
        const double d2 = std::fabs(fit.props.t2 - 0.1);
        CHECK(d1 <= prev_t1 + 1e-12);
        CHECK(d2 <= prev_t2 + 1e-12);
        prev_t1 = d1;
        prev_t2 = d2;
    }
}

TEST_CASE("fit_volume round trips the brain2d phantom") {
    const PropertyMap truth = make_phantom(brain2d_preset(48, 32));
    const std::array<AcquisitionParams, 3> acq = {
        AcquisitionParams::mprage(0.01, 2.3, 0.9),
        AcquisitionParams::spin_echo(0.08, 4.0),
        AcquisitionParams::flair(0.1, 9.0, 2.4),
    };
    std::vector<ContrastImage> images;
    for (const auto& p : acq) images.push_back({signal::synthesize(truth, p), p});

    FitConfig config;
    config.prior_weight = 1e-4;
    const FitResult result = fit_volume(images, config);

    const std::size_t n = truth.vol.voxel_count();
    std::size_t foreground = 0, good = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (truth.vol.data()[i] <= 0.0f) continue; // background PD = 0
        ++foreground;
        double err = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double want = truth.vol.data()[static_cast<std::size_t>(c) * n + i];
            const double got = result.props.vol.data()[static_cast<std::size_t>(c) * n + i];
            err = std::max(err, std::fabs(got - want) / want);
        }
        if (err <= 0.01) ++good;
    }
    CHECK(foreground > 500);
    CHECK(static_cast<double>(good) >= 0.99 * static_cast<double>(foreground));
    CHECK(result.convergence_rate() > 0.9);

    // single-voxel volume equals fit_voxel exactly
    std::vector<ContrastImage> one;
    std::vector<Observation> one_obs;
    for (const auto& ci : images) {
        one.push_back({Volume(1, 1, 1, 1, {ci.image.at(5, 7, 0)}), ci.params});
        one_obs.push_back({ci.image.at(5, 7, 0), ci.params});
    }
    const FitResult single = fit_volume(one, config);
    const VoxelFit direct = fit_voxel(one_obs, config);
    CHECK(single.props.vol.at(0, 0, 0, 0) == static_cast<float>(direct.props.pd));
    CHECK(single.props.vol.at(0, 0, 0, 1) == static_cast<float>(direct.props.t1));
    CHECK(single.props.vol.at(0, 0, 0, 2) == static_cast<float>(direct.props.t2));

    // dims mismatch
    std::vector<ContrastImage> bad = {images[0],
                                      {Volume::zeros(4, 4, 1, 1), acq[1]}};
    CHECK_THROWS_AS(fit_volume(bad, config), std::invalid_argument);
    CHECK_THROWS_AS(fit_volume({}, config), std::invalid_argument);
}

TEST_CASE("fit_volume with 1% noise keeps the median error under 5%") {
    const PropertyMap truth = make_phantom(brain2d_preset(48, 32));
    const std::array<AcquisitionParams, 3> acq = {
        AcquisitionParams::mprage(0.01, 2.3, 0.9),
        AcquisitionParams::spin_echo(0.08, 4.0),
        AcquisitionParams::flair(0.1, 9.0, 2.4),
    };
    std::vector<ContrastImage> images;
    std::uint64_t seed = 100;
    for (const auto& p : acq) {
        const Volume clean = signal::synthesize(truth, p);
        const auto [lo, hi] = std::minmax_element(clean.data().begin(), clean.data().end());
        const double sigma = 0.01 * (static_cast<double>(*hi) - *lo);
        images.push_back({signal::synthesize(truth, p, {}, sigma, seed++), p});
    }

    FitConfig config;
    config.prior_weight = 1e-4;
    const FitResult result = fit_volume(images, config);

    const std::size_t n = truth.vol.voxel_count();
    std::vector<double> errors;
    for (std::size_t i = 0; i < n; ++i) {
        if (truth.vol.data()[i] <= 0.0f) continue;
        double err = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double want = truth.vol.data()[static_cast<std::size_t>(c) * n + i];
            const double got = result.props.vol.data()[static_cast<std::size_t>(c) * n + i];
            err = std::max(err, std::fabs(got - want) / want);
        }
        errors.push_back(err);
    }
    CHECK(linear_quantile(errors, 0.5) <= 0.05);
}

TEST_CASE("make_phantom geometry") {
    PhantomSpec uniform;
    uniform.nx = 5;
    uniform.ny = 4;
    uniform.shapes = {{ShapeKind::Rect, 0.5, 0.5, 0.5, 1.0, 1.0, 1e9, {0.8, 1.2, 0.09}}};
    const PropertyMap u = make_phantom(uniform);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
            CHECK(u.pd(x, y) == 0.8f);
            CHECK(u.t1(x, y) == 1.2f);
            CHECK(u.t2(x, y) == 0.09f);
        }

    // point-in-shape re-evaluation against the phantom rasterization
    const PhantomSpec spec = brain2d_preset(40, 28);
    const PropertyMap p = make_phantom(spec);
    for (int y = 0; y < spec.ny; ++y)
        for (int x = 0; x < spec.nx; ++x) {
            const double fx = (x + 0.5) / spec.nx;
            const double fy = (y + 0.5) / spec.ny;
            TissueProps want = spec.background;
            for (const PhantomShape& s : spec.shapes) {
                const double dx = (fx - s.cx) / s.rx;
                const double dy = (fy - s.cy) / s.ry;
                if (dx * dx + dy * dy <= 1.0) want = s.props; // all preset shapes are ellipses
            }
            CHECK(p.pd(x, y) == static_cast<float>(want.pd));
            CHECK(p.t1(x, y) == static_cast<float>(want.t1));
            CHECK(p.t2(x, y) == static_cast<float>(want.t2));
        }
    // background voxels have PD = 0 exactly
    CHECK(p.pd(0, 0) == 0.0f);

    CHECK_THROWS_AS(make_phantom(PhantomSpec{}), std::invalid_argument);
    PhantomSpec bad = uniform;
    bad.nx = 0;
    CHECK_THROWS_AS(make_phantom(bad), std::invalid_argument);
}

TEST_CASE("property_histogram") {
    PhantomSpec uniform;
    uniform.nx = 8;
    uniform.ny = 8;
    uniform.shapes = {{ShapeKind::Rect, 0.5, 0.5, 0.5, 1.0, 1.0, 1e9, {0.8, 1.2, 0.09}}};
    const Histogram h = property_histogram(make_phantom(uniform), kChannelT1, 16, 0.1);
    std::size_t occupied = 0;
    for (std::size_t c : h.counts) occupied += c > 0 ? 1 : 0;
    CHECK(occupied == 1);
    CHECK(h.total() == 64);

    // two-region phantom: bimodal with modes at the preset values
    PhantomSpec two;
    two.nx = 16;
    two.ny = 16;
    two.shapes = {
        {ShapeKind::Rect, 0.25, 0.5, 0.5, 0.25, 0.5, 1e9, kWhiteMatterPreset},
        {ShapeKind::Rect, 0.75, 0.5, 0.5, 0.25, 0.5, 1e9, kFluidPreset},
    };
    const PropertyMap p = make_phantom(two);
    const Histogram h2 = property_histogram(p, kChannelT1, 32, 0.1);
    CHECK(h2.total() == 256);
    std::size_t modes = 0;
    for (std::size_t i = 0; i < h2.counts.size(); ++i) {
        if (h2.counts[i] == 0) continue;
        ++modes;
        const bool near_wm = std::fabs(h2.centers[i] - kWhiteMatterPreset.t1) <
                             (h2.hi - h2.lo) / 32;
        const bool near_fluid = std::fabs(h2.centers[i] - kFluidPreset.t1) <
                                (h2.hi - h2.lo) / 32;
        CHECK((near_wm || near_fluid));
    }
    CHECK(modes == 2);

    CHECK_THROWS_AS(property_histogram(p, kChannelT1, 0, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(property_histogram(p, kChannelT1, 8, 100.0), std::invalid_argument);
}

} // TEST_SUITE

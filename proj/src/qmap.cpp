#include "qmri/qmap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "qmri/signal.hpp"

namespace qmri::qmap {

void FitConfig::validate() const {
    if (!(prior_median_t1 > 0.0) || !(prior_median_t2 > 0.0))
        throw std::invalid_argument("prior medians must be > 0");
    if (prior_weight < 0.0) throw std::invalid_argument("prior_weight must be >= 0");
    if (max_iterations < 1) throw std::invalid_argument("max_iterations must be >= 1");
    if (!(initial_damping > 0.0)) throw std::invalid_argument("initial_damping must be > 0");
    if (pd_floor < 0.0) throw std::invalid_argument("pd_floor must be >= 0");
}

namespace {

constexpr double kPropertyMax = 1e6;

double exp_clamped(double x) {
    const double v = std::exp(x);
    return v < kPropertyMax ? v : kPropertyMax;
}

} // namespace

TissueProps parameterize(const LogParams& theta, const FitConfig& config) {
    // Factored form median * exp(o): theta = 0 returns the medians exactly.
    TissueProps p;
    p.pd = std::max(exp_clamped(theta.o_pd), config.pd_floor);
    p.t1 = std::min(config.prior_median_t1 * exp_clamped(theta.o_t1), kPropertyMax);
    p.t2 = std::min(config.prior_median_t2 * exp_clamped(theta.o_t2), kPropertyMax);
    return p;
}

double map_objective(const LogParams& theta, std::span<const Observation> observations,
                     const FitConfig& config) {
    if (observations.empty() && config.prior_weight == 0.0)
        throw std::invalid_argument("unidentifiable: no observations and no prior");
    const TissueProps p = parameterize(theta, config);
    double obj = 0.0;
    for (const Observation& obs : observations) {
        const double r = signal::evaluate(p.pd, p.t1, p.t2, obs.params) - obs.signal;
        obj += r * r;
    }
    obj += config.prior_weight * (theta.o_t1 * theta.o_t1 + theta.o_t2 * theta.o_t2);
    return obj;
}

std::array<double, 3> map_objective_gradient(const LogParams& theta,
                                             std::span<const Observation> observations,
                                             const FitConfig& config) {
    const TissueProps p = parameterize(theta, config);
    std::array<double, 3> g{0.0, 0.0, 0.0};
    for (const Observation& obs : observations) {
        const double r = signal::evaluate(p.pd, p.t1, p.t2, obs.params) - obs.signal;
        const signal::Partials d = signal::jacobian(p.pd, p.t1, p.t2, obs.params);
        // chain rule through the exponential map: dprop/do = prop
        g[0] += 2.0 * r * d.d_pd * p.pd;
        g[1] += 2.0 * r * d.d_t1 * p.t1;
        g[2] += 2.0 * r * d.d_t2 * p.t2;
    }
    g[1] += 2.0 * config.prior_weight * theta.o_t1;
    g[2] += 2.0 * config.prior_weight * theta.o_t2;
    return g;
}

namespace {

// Solve the 3x3 SPD system (JtJ + damping*I) delta = -g by Cholesky.
// Returns false if the factorization breaks down.
bool solve_damped(const double jtj[3][3], const double g[3], double damping, double delta[3]) {
    double a[3][3];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) a[i][j] = jtj[i][j] + (i == j ? damping : 0.0);

    double l[3][3] = {};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = a[i][j];
            for (int k = 0; k < j; ++k) sum -= l[i][k] * l[j][k];
            if (i == j) {
                if (sum <= 0.0) return false;
                l[i][i] = std::sqrt(sum);
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // forward/back substitution for L L^T delta = -g
    double y[3];
    for (int i = 0; i < 3; ++i) {
        double sum = -g[i];
        for (int k = 0; k < i; ++k) sum -= l[i][k] * y[k];
        y[i] = sum / l[i][i];
    }
    for (int i = 2; i >= 0; --i) {
        double sum = y[i];
        for (int k = i + 1; k < 3; ++k) sum -= l[k][i] * delta[k];
        delta[i] = sum / l[i][i];
    }
    return true;
}

struct NormalEquations {
    double jtj[3][3] = {};
    double g[3] = {};       // gradient = 2 J^T r, stored without the factor 2
    double data_term = 0.0; // sum of squared signal residuals
};

NormalEquations build_normal_equations(const LogParams& theta,
                                       std::span<const Observation> observations,
                                       const FitConfig& config) {
    NormalEquations ne;
    const TissueProps p = parameterize(theta, config);
    for (const Observation& obs : observations) {
        const double r = signal::evaluate(p.pd, p.t1, p.t2, obs.params) - obs.signal;
        const signal::Partials d = signal::jacobian(p.pd, p.t1, p.t2, obs.params);
        const double j[3] = {d.d_pd * p.pd, d.d_t1 * p.t1, d.d_t2 * p.t2};
        for (int i = 0; i < 3; ++i) {
            ne.g[i] += j[i] * r;
            for (int k = i; k < 3; ++k) ne.jtj[i][k] += j[i] * j[k];
        }
        ne.data_term += r * r;
    }
    // prior residuals sqrt(lambda) * o_t1, sqrt(lambda) * o_t2
    const double lam = config.prior_weight;
    ne.jtj[1][1] += lam;
    ne.jtj[2][2] += lam;
    ne.g[1] += lam * theta.o_t1;
    ne.g[2] += lam * theta.o_t2;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < i; ++k) ne.jtj[i][k] = ne.jtj[k][i];
    return ne;
}

} // namespace

VoxelFit fit_voxel(std::span<const Observation> observations, const FitConfig& config,
                   std::optional<LogParams> init) {
    config.validate();
    if (observations.empty() && config.prior_weight == 0.0)
        throw std::invalid_argument("unidentifiable: no observations and no prior");
    double mean_abs = 0.0;
    for (const Observation& obs : observations) {
        if (!std::isfinite(obs.signal)) throw std::invalid_argument("non-finite observation");
        obs.params.validate();
        mean_abs += std::fabs(obs.signal);
    }

    LogParams theta;
    if (init) {
        theta = *init;
    } else if (!observations.empty()) {
        mean_abs /= static_cast<double>(observations.size());
        theta.o_pd = std::log(std::clamp(mean_abs, 1e-6, kPropertyMax));
    }

    double objective = map_objective(theta, observations, config);
    double damping = config.initial_damping;
    VoxelFit fit;
    fit.theta = theta;
    fit.diag.converged = objective <= config.convergence_tol;

    int iter = 0;
    while (iter < config.max_iterations && !fit.diag.converged) {
        ++iter;
        const NormalEquations ne = build_normal_equations(theta, observations, config);

        bool accepted = false;
        while (damping <= 1e12) {
            double delta[3];
            if (solve_damped(ne.jtj, ne.g, damping, delta)) {
                const LogParams trial{theta.o_pd + delta[0], theta.o_t1 + delta[1],
                                      theta.o_t2 + delta[2]};
                const double trial_obj = map_objective(trial, observations, config);
                if (trial_obj < objective) {
                    const double decrease = objective - trial_obj;
                    theta = trial;
                    objective = trial_obj;
                    damping = std::max(damping / 10.0, 1e-15);
                    accepted = true;
                    if (decrease < config.convergence_tol) fit.diag.converged = true;
                    break;
                }
            }
            damping *= 10.0;
        }
        if (!accepted) break; // damping exhausted; keep the best iterate
    }

    fit.theta = theta;
    fit.props = parameterize(theta, config);
    fit.diag.iterations = iter;
    double data_term = 0.0;
    for (const Observation& obs : observations) {
        const double r =
            signal::evaluate(fit.props.pd, fit.props.t1, fit.props.t2, obs.params) - obs.signal;
        data_term += r * r;
    }
    fit.diag.residual_norm = std::sqrt(data_term);
    return fit;
}

double FitResult::convergence_rate() const {
    if (converged.empty()) return 0.0;
    std::size_t ok = 0;
    for (auto c : converged) ok += c ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(converged.size());
}

double FitResult::median_residual() const {
    if (residual_norm.empty()) return 0.0;
    return linear_quantile(residual_norm, 0.5);
}

FitResult fit_volume(std::span<const ContrastImage> images, const FitConfig& config,
                     int num_threads) {
    config.validate();
    if (images.empty()) throw std::invalid_argument("no input images");
    const Volume& first = images.front().image;
    for (const ContrastImage& ci : images) {
        if (ci.image.channels() != 1)
            throw std::invalid_argument("fit inputs must be single-channel");
        if (!ci.image.same_shape(first)) throw std::invalid_argument("input dims mismatch");
        ci.params.validate();
    }

    const std::size_t n = first.voxel_count();
    const std::size_t m = images.size();
    std::vector<float> props(3 * n);
    FitResult result{PropertyMap{}, std::vector<double>(n), std::vector<int>(n),
                     std::vector<std::uint8_t>(n)};

    const std::int64_t count = static_cast<std::int64_t>(n);
#ifdef _OPENMP
    const int threads = num_threads > 0 ? num_threads : 0;
#else
    (void)num_threads;
#endif
#ifdef _OPENMP
#pragma omp parallel if (threads != 1) num_threads(threads > 0 ? threads : omp_get_max_threads())
#endif
    {
        std::vector<Observation> obs(m);
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
        for (std::int64_t i = 0; i < count; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                obs[j].signal = images[j].image.data()[static_cast<std::size_t>(i)];
                obs[j].params = images[j].params;
            }
            const VoxelFit fit = fit_voxel(obs, config);
            props[static_cast<std::size_t>(i)] = static_cast<float>(fit.props.pd);
            props[n + static_cast<std::size_t>(i)] = static_cast<float>(fit.props.t1);
            props[2 * n + static_cast<std::size_t>(i)] = static_cast<float>(fit.props.t2);
            result.residual_norm[static_cast<std::size_t>(i)] = fit.diag.residual_norm;
            result.iterations[static_cast<std::size_t>(i)] = fit.diag.iterations;
            result.converged[static_cast<std::size_t>(i)] = fit.diag.converged ? 1 : 0;
        }
    }

    Volume vol(first.nx(), first.ny(), first.nz(), 3, std::move(props), {"PD", "T1", "T2"});
    result.props = PropertyMap::from_volume(std::move(vol));
    return result;
}

// ============================================================================
// Phantoms
// ============================================================================

namespace {

bool shape_contains(const PhantomShape& s, double fx, double fy, double fz) {
    if (s.kind == ShapeKind::Ellipse) {
        if (s.rx <= 0.0 || s.ry <= 0.0) return false;
        const double dx = (fx - s.cx) / s.rx;
        const double dy = (fy - s.cy) / s.ry;
        const double dz = s.rz > 0.0 ? (fz - s.cz) / s.rz : 0.0;
        return dx * dx + dy * dy + dz * dz <= 1.0;
    }
    return std::fabs(fx - s.cx) <= s.rx && std::fabs(fy - s.cy) <= s.ry &&
           std::fabs(fz - s.cz) <= s.rz;
}

void check_props(const TissueProps& p, const char* what) {
    if (p.pd < 0.0) throw std::invalid_argument(std::string(what) + ": pd must be >= 0");
    if (!(p.t1 > 0.0) || !(p.t2 > 0.0))
        throw std::invalid_argument(std::string(what) + ": t1/t2 must be > 0");
}

} // namespace

PropertyMap make_phantom(const PhantomSpec& spec) {
    if (spec.nx <= 0 || spec.ny <= 0 || spec.nz <= 0)
        throw std::invalid_argument("phantom dims must be positive");
    if (spec.shapes.empty()) throw std::invalid_argument("phantom spec has no shapes");
    check_props(spec.background, "background");
    for (const PhantomShape& s : spec.shapes) check_props(s.props, "shape");

    const std::size_t n =
        static_cast<std::size_t>(spec.nx) * spec.ny * spec.nz;
    std::vector<float> data(3 * n);
    std::size_t i = 0;
    for (int z = 0; z < spec.nz; ++z) {
        const double fz = (z + 0.5) / spec.nz;
        for (int y = 0; y < spec.ny; ++y) {
            const double fy = (y + 0.5) / spec.ny;
            for (int x = 0; x < spec.nx; ++x, ++i) {
                const double fx = (x + 0.5) / spec.nx;
                TissueProps p = spec.background;
                // later shapes overwrite earlier ones
                for (const PhantomShape& s : spec.shapes)
                    if (shape_contains(s, fx, fy, fz)) p = s.props;
                data[i] = static_cast<float>(p.pd);
                data[n + i] = static_cast<float>(p.t1);
                data[2 * n + i] = static_cast<float>(p.t2);
            }
        }
    }
    Volume vol(spec.nx, spec.ny, spec.nz, 3, std::move(data), {"PD", "T1", "T2"});
    return PropertyMap::from_volume(std::move(vol));
}

PhantomSpec brain2d_preset(int nx, int ny) {
    PhantomSpec spec;
    spec.nx = nx;
    spec.ny = ny;
    spec.nz = 1;
    spec.shapes = {
        {ShapeKind::Ellipse, 0.5, 0.5, 0.5, 0.44, 0.42, 1e9, kGreyMatterPreset},
        {ShapeKind::Ellipse, 0.5, 0.5, 0.5, 0.35, 0.33, 1e9, kWhiteMatterPreset},
        {ShapeKind::Ellipse, 0.42, 0.5, 0.5, 0.055, 0.14, 1e9, kFluidPreset},
        {ShapeKind::Ellipse, 0.58, 0.5, 0.5, 0.055, 0.14, 1e9, kFluidPreset},
    };
    return spec;
}

PhantomSpec load_phantom_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error("malformed phantom spec: " + path);

    PhantomSpec spec;
    if (j.contains("dims")) {
        const auto dims = j.at("dims").get<std::vector<int>>();
        if (dims.size() < 2 || dims.size() > 3)
            throw std::runtime_error("phantom dims must have 2 or 3 entries");
        spec.nx = dims[0];
        spec.ny = dims[1];
        spec.nz = dims.size() == 3 ? dims[2] : 1;
    }
    if (j.contains("background")) {
        const auto& bg = j.at("background");
        spec.background = {bg.value("pd", 0.0), bg.value("t1", 1.0), bg.value("t2", 0.1)};
    }
    for (const auto& js : j.at("shapes")) {
        PhantomShape s;
        const std::string kind = js.value("kind", "ellipse");
        if (kind == "ellipse") s.kind = ShapeKind::Ellipse;
        else if (kind == "rect") s.kind = ShapeKind::Rect;
        else throw std::runtime_error("unknown shape kind: " + kind);
        const auto center = js.at("center").get<std::vector<double>>();
        const auto radii = js.contains("radii")
                               ? js.at("radii").get<std::vector<double>>()
                               : js.at("extent").get<std::vector<double>>();
        if (center.size() < 2 || radii.size() < 2)
            throw std::runtime_error("shape center/radii need at least 2 entries");
        s.cx = center[0];
        s.cy = center[1];
        s.cz = center.size() > 2 ? center[2] : 0.5;
        s.rx = radii[0];
        s.ry = radii[1];
        s.rz = radii.size() > 2 ? radii[2] : 1e9;
        s.props = {js.at("pd").get<double>(), js.at("t1").get<double>(),
                   js.at("t2").get<double>()};
        spec.shapes.push_back(s);
    }
    return spec;
}

// ============================================================================
// Histograms
// ============================================================================

std::size_t Histogram::total() const {
    std::size_t t = 0;
    for (std::size_t c : counts) t += c;
    return t;
}

Histogram property_histogram(const PropertyMap& props, int channel, int bins,
                             double mask_pd_min, std::optional<double> clip_percentile) {
    if (bins < 1) throw std::invalid_argument("bins must be >= 1");
    if (channel < 0 || channel > 2) throw std::invalid_argument("channel must be 0..2");
    const Volume& v = props.vol;
    const std::size_t n = v.voxel_count();
    std::vector<double> values;
    values.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        if (v.data()[i] >= mask_pd_min)
            values.push_back(v.data()[static_cast<std::size_t>(channel) * n + i]);
    if (values.empty()) throw std::invalid_argument("empty mask");

    Histogram h;
    h.lo = *std::min_element(values.begin(), values.end());
    h.hi = clip_percentile ? linear_quantile(values, *clip_percentile)
                           : *std::max_element(values.begin(), values.end());
    if (h.hi <= h.lo) h.hi = h.lo + 1e-12; // degenerate range: single occupied bin
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    const double width = (h.hi - h.lo) / bins;
    for (double x : values) {
        int idx = static_cast<int>((x - h.lo) / width);
        idx = std::clamp(idx, 0, bins - 1); // clipped values land in the last bin
        ++h.counts[static_cast<std::size_t>(idx)];
    }
    h.centers.resize(static_cast<std::size_t>(bins));
    for (int i = 0; i < bins; ++i) h.centers[static_cast<std::size_t>(i)] = h.lo + (i + 0.5) * width;
    return h;
}

} // namespace qmri::qmap

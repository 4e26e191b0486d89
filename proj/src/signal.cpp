#include "qmri/signal.hpp"

#include <cmath>
#include <stdexcept>

#include "qmri/rng.hpp"

namespace qmri::signal {

namespace {

void check_t1(double t1) {
    if (!(t1 > 0.0)) throw std::invalid_argument("t1 must be > 0");
}

void check_t2(double t2) {
    if (!(t2 > 0.0)) throw std::invalid_argument("t2 must be > 0");
}

double require_ti(const AcquisitionParams& params) {
    if (!params.ti) throw std::invalid_argument("sequence requires ti");
    return *params.ti;
}

void check_sequence(const AcquisitionParams& params, SequenceKind expected) {
    if (params.sequence != expected)
        throw std::invalid_argument("acquisition parameters are for a different sequence");
}

double finish(double s, const SignalOptions& opts) {
    return opts.magnitude_mode ? std::fabs(s) : s;
}

} // namespace

double mprage(double pd, double t1, const AcquisitionParams& params, const SignalOptions& opts) {
    check_sequence(params, SequenceKind::MPRAGE);
    check_t1(t1);
    const double ti = require_ti(params);
    const double s =
        opts.gain * pd * (1.0 - 2.0 * std::exp(-ti / t1) / (1.0 + std::exp(-params.tr / t1)));
    return finish(s, opts);
}

double spin_echo(double pd, double t1, double t2, const AcquisitionParams& params,
                 const SignalOptions& opts) {
    check_sequence(params, SequenceKind::SpinEcho);
    check_t1(t1);
    check_t2(t2);
    const double s =
        opts.gain * pd * (1.0 - std::exp(-params.tr / t1)) * std::exp(-params.te / t2);
    return finish(s, opts);
}

double flair(double pd, double t1, double t2, const AcquisitionParams& params,
             const SignalOptions& opts) {
    check_sequence(params, SequenceKind::Flair);
    check_t1(t1);
    check_t2(t2);
    const double ti = require_ti(params);
    const double s = opts.gain * pd *
                     (1.0 - 2.0 * std::exp(-ti / t1) + std::exp(-params.tr / t1)) *
                     std::exp(-params.te / t2);
    return finish(s, opts);
}

double evaluate(double pd, double t1, double t2, const AcquisitionParams& params,
                const SignalOptions& opts) {
    switch (params.sequence) {
    case SequenceKind::MPRAGE: return mprage(pd, t1, params, opts);
    case SequenceKind::SpinEcho: return spin_echo(pd, t1, t2, params, opts);
    case SequenceKind::Flair: return flair(pd, t1, t2, params, opts);
    }
    throw std::logic_error("unreachable sequence kind");
}

Partials jacobian(double pd, double t1, double t2, const AcquisitionParams& params) {
    check_t1(t1);
    const double g = 1.0;
    Partials out;
    switch (params.sequence) {
    case SequenceKind::MPRAGE: {
        const double ti = require_ti(params);
        const double a = std::exp(-ti / t1);
        const double b = std::exp(-params.tr / t1);
        const double denom = 1.0 + b;
        out.d_pd = g * (1.0 - 2.0 * a / denom);
        // d/dT1 exp(-x/T1) = exp(-x/T1) * x / T1^2
        out.d_t1 = g * pd *
                   (-2.0 * (a * ti / (t1 * t1) * denom - a * b * params.tr / (t1 * t1)) /
                    (denom * denom));
        out.d_t2 = 0.0; // no T2 term in the MPRAGE model
        break;
    }
    case SequenceKind::SpinEcho: {
        check_t2(t2);
        const double b = std::exp(-params.tr / t1);
        const double e2 = std::exp(-params.te / t2);
        out.d_pd = g * (1.0 - b) * e2;
        out.d_t1 = -g * pd * e2 * b * params.tr / (t1 * t1);
        out.d_t2 = g * pd * (1.0 - b) * e2 * params.te / (t2 * t2);
        break;
    }
    case SequenceKind::Flair: {
        check_t2(t2);
        const double ti = require_ti(params);
        const double a = std::exp(-ti / t1);
        const double b = std::exp(-params.tr / t1);
        const double e2 = std::exp(-params.te / t2);
        const double bracket = 1.0 - 2.0 * a + b;
        out.d_pd = g * bracket * e2;
        out.d_t1 = g * pd * e2 * (-2.0 * a * ti + b * params.tr) / (t1 * t1);
        out.d_t2 = g * pd * bracket * e2 * params.te / (t2 * t2);
        break;
    }
    }
    return out;
}

Volume synthesize(const PropertyMap& props, const AcquisitionParams& params,
                  const SignalOptions& opts, double noise_sigma, std::uint64_t seed) {
    params.validate();
    if (noise_sigma < 0.0) throw std::invalid_argument("noise_sigma must be >= 0");

    const Volume& v = props.vol;
    const std::size_t n = v.voxel_count();
    const float* pd = v.data().data();
    const float* t1 = pd + n;
    const float* t2 = t1 + n;

    std::vector<float> out(n);
    const std::int64_t count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < count; ++i) {
        double s = evaluate(pd[i], t1[i], t2[i], params, opts);
        if (noise_sigma > 0.0)
            s += noise_sigma * rng::normal(seed, static_cast<std::uint64_t>(i));
        out[i] = static_cast<float>(s);
    }
    return Volume(v.nx(), v.ny(), v.nz(), 1, std::move(out), {"signal"});
}

} // namespace qmri::signal

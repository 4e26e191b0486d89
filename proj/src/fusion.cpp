#include "qmri/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "qmri/rng.hpp"

namespace qmri::fusion {

void GaussianFactor::validate() const {
    if (mean.size() != var.size())
        throw std::invalid_argument("mean/variance length mismatch");
    if (mean.empty()) throw std::invalid_argument("empty factor");
    for (double m : mean)
        if (!std::isfinite(m)) throw std::invalid_argument("non-finite mean");
    for (double v : var)
        if (!std::isfinite(v) || v <= 0.0)
            throw std::invalid_argument("variances must be positive and finite");
}

GaussianFactor poe_fuse(std::span<const GaussianFactor> experts, bool include_standard_prior) {
    if (experts.empty()) throw std::invalid_argument("no experts");
    for (const GaussianFactor& g : experts) g.validate();
    const std::size_t dim = experts.front().dim();
    for (const GaussianFactor& g : experts)
        if (g.dim() != dim) throw std::invalid_argument("expert dimension mismatch");

    const std::size_t n = experts.size() + (include_standard_prior ? 1 : 0);
    std::vector<double> precisions(n), weighted(n);

    GaussianFactor fused;
    fused.mean.resize(dim);
    fused.var.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) {
        for (std::size_t i = 0; i < experts.size(); ++i) {
            const double v = std::max(experts[i].var[d], kVarianceFloor);
            precisions[i] = 1.0 / v;
            weighted[i] = experts[i].mean[d] / v;
        }
        if (include_standard_prior) {
            precisions[experts.size()] = 1.0;
            weighted[experts.size()] = 0.0;
        }
        // Value-sorted summation: the result is bitwise identical under any
        // permutation of the expert list.
        std::sort(precisions.begin(), precisions.end());
        std::sort(weighted.begin(), weighted.end());
        double prec_sum = 0.0, w_sum = 0.0;
        for (double p : precisions) prec_sum += p;
        for (double w : weighted) w_sum += w;
        fused.var[d] = 1.0 / prec_sum;
        fused.mean[d] = fused.var[d] * w_sum;
    }
    return fused;
}

std::vector<GaussianFactor> drop_modalities(std::span<const GaussianFactor> experts,
                                            const std::vector<bool>& keep) {
    if (keep.size() != experts.size())
        throw std::invalid_argument("keep mask length mismatch");
    std::vector<GaussianFactor> kept;
    for (std::size_t i = 0; i < experts.size(); ++i)
        if (keep[i]) kept.push_back(experts[i]);
    if (kept.empty()) throw std::invalid_argument("all experts dropped");
    return kept;
}

std::vector<GaussianFactor> drop_modalities(std::span<const GaussianFactor> experts,
                                            double drop_prob, std::uint64_t seed) {
    if (experts.empty()) throw std::invalid_argument("no experts");
    if (drop_prob < 0.0 || drop_prob > 1.0)
        throw std::invalid_argument("drop probability must be in [0, 1]");
    std::vector<bool> keep(experts.size());
    for (std::size_t i = 0; i < experts.size(); ++i)
        keep[i] = rng::uniform_open(seed, i) > drop_prob;
    return drop_modalities(experts, keep);
}

double gaussian_kl_standard(const GaussianFactor& g) {
    g.validate();
    double kl = 0.0;
    for (std::size_t d = 0; d < g.dim(); ++d) {
        const double v = g.var[d];
        kl += 0.5 * (v + g.mean[d] * g.mean[d] - 1.0 - std::log(v));
    }
    return kl;
}

std::vector<double> sample_gaussian(const GaussianFactor& g, std::uint64_t seed) {
    g.validate();
    std::vector<double> z(g.dim());
    for (std::size_t d = 0; d < g.dim(); ++d) {
        const double sigma = std::sqrt(std::max(g.var[d], kVarianceFloor));
        z[d] = g.mean[d] + sigma * rng::normal(seed, d);
    }
    return z;
}

void write_gauss(const std::string& path, const GaussianFactor& g) {
    g.validate();
    nlohmann::ordered_json header;
    header["magic"] = "GAUS1";
    header["dim"] = g.dim();
    header["dtype"] = "f32le";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << header.dump() << '\n';
    std::vector<float> buf;
    buf.reserve(2 * g.dim());
    for (double m : g.mean) buf.push_back(static_cast<float>(m));
    for (double v : g.var) buf.push_back(static_cast<float>(v));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

GaussianFactor read_gauss(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("missing header: " + path);
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("malformed header: " + path);
    if (header.value("magic", "") != std::string("GAUS1"))
        throw std::runtime_error("unknown magic in " + path);
    if (header.value("dtype", "") != std::string("f32le"))
        throw std::runtime_error("unknown dtype in " + path);
    const std::size_t dim = header.at("dim").get<std::size_t>();
    std::vector<float> buf(2 * dim);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
        throw std::runtime_error("truncated payload in " + path);
    GaussianFactor g;
    g.mean.assign(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(dim));
    g.var.assign(buf.begin() + static_cast<std::ptrdiff_t>(dim), buf.end());
    g.validate();
    return g;
}

} // namespace qmri::fusion

#include "qmri/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace qmri {

const char* to_string(SequenceKind kind) {
    switch (kind) {
    case SequenceKind::MPRAGE: return "mprage";
    case SequenceKind::SpinEcho: return "se";
    case SequenceKind::Flair: return "flair";
    }
    return "?";
}

SequenceKind sequence_from_string(const std::string& name) {
    std::string s;
    s.reserve(name.size());
    for (char c : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (s == "mprage") return SequenceKind::MPRAGE;
    if (s == "se" || s == "spin_echo" || s == "spinecho") return SequenceKind::SpinEcho;
    if (s == "flair") return SequenceKind::Flair;
    throw std::invalid_argument("unknown sequence kind: " + name);
}

AcquisitionParams AcquisitionParams::mprage(double te, double tr, double ti) {
    AcquisitionParams p{SequenceKind::MPRAGE, te, tr, ti};
    p.validate();
    return p;
}

AcquisitionParams AcquisitionParams::spin_echo(double te, double tr) {
    AcquisitionParams p{SequenceKind::SpinEcho, te, tr, std::nullopt};
    p.validate();
    return p;
}

AcquisitionParams AcquisitionParams::flair(double te, double tr, double ti) {
    AcquisitionParams p{SequenceKind::Flair, te, tr, ti};
    p.validate();
    return p;
}

void AcquisitionParams::validate() const {
    if (!std::isfinite(te) || !std::isfinite(tr)) throw std::invalid_argument("te/tr must be finite");
    if (te <= 0.0) throw std::invalid_argument("te must be > 0");
    if (tr <= 0.0) throw std::invalid_argument("tr must be > 0");
    if (te >= tr) throw std::invalid_argument("te must be < tr");
    const bool uses_inversion = sequence != SequenceKind::SpinEcho;
    if (uses_inversion) {
        if (!ti) throw std::invalid_argument("sequence requires ti");
        if (!std::isfinite(*ti) || *ti <= 0.0 || *ti >= tr)
            throw std::invalid_argument("ti must satisfy 0 < ti < tr");
    } else if (ti) {
        throw std::invalid_argument("spin-echo sequences do not use inversion recovery");
    }
}

// ============================================================================
// Volume
// ============================================================================

Volume::Volume(int nx, int ny, int nz, int channels, std::vector<float> data,
               std::vector<std::string> channel_names)
    : nx_(nx), ny_(ny), nz_(nz), channels_(channels), names_(std::move(channel_names)),
      data_(std::move(data)) {
    if (nx_ <= 0 || ny_ <= 0 || nz_ <= 0) throw std::invalid_argument("dims must be positive");
    if (channels_ <= 0) throw std::invalid_argument("channels must be positive");
    const std::size_t expected = voxel_count() * channels_;
    if (data_.size() != expected)
        throw std::invalid_argument("data length does not match dims x channels");
    if (names_.empty()) {
        for (int c = 0; c < channels_; ++c) names_.push_back("c" + std::to_string(c));
    } else if (static_cast<int>(names_.size()) != channels_) {
        throw std::invalid_argument("channel_names length does not match channels");
    }
    check_finite();
}

Volume Volume::zeros(int nx, int ny, int nz, int channels,
                     std::vector<std::string> channel_names) {
    const std::size_t n = static_cast<std::size_t>(nx) * ny * nz * channels;
    return Volume(nx, ny, nz, channels, std::vector<float>(n, 0.0f),
                  std::move(channel_names));
}

void Volume::check_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) throw std::invalid_argument("volume contains non-finite values");
}

PropertyMap PropertyMap::from_volume(Volume v) {
    if (v.channels() != 3) throw std::invalid_argument("property map needs 3 channels");
    const auto& names = v.channel_names();
    if (names[0] != "PD" || names[1] != "T1" || names[2] != "T2")
        throw std::invalid_argument("property map channels must be named PD, T1, T2");
    const std::size_t n = v.voxel_count();
    const auto& d = v.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (d[i] < 0.0f) throw std::invalid_argument("PD must be >= 0");
        if (d[n + i] <= 0.0f) throw std::invalid_argument("T1 must be > 0");
        if (d[2 * n + i] <= 0.0f) throw std::invalid_argument("T2 must be > 0");
    }
    return PropertyMap{std::move(v)};
}

// ============================================================================
// Intensity scaling
// ============================================================================

double linear_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile of empty sample");
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("quantile fraction out of range");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

std::pair<Volume, ScaleRecord> scale_to_unit(const Volume& image, double percentile) {
    if (image.channels() != 1) throw std::invalid_argument("scale_to_unit expects a single channel");
    if (percentile <= 0.0 || percentile > 1.0)
        throw std::invalid_argument("percentile must be in (0, 1]");

    std::vector<double> sample(image.data().begin(), image.data().end());
    const double cutoff = linear_quantile(std::move(sample), percentile);
    if (cutoff <= 0.0) throw std::invalid_argument("degenerate intensity range");

    std::vector<float> out(image.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = std::clamp(static_cast<double>(image.data()[i]), 0.0, cutoff);
        out[i] = static_cast<float>(2.0 * v / cutoff - 1.0);
    }
    Volume scaled(image.nx(), image.ny(), image.nz(), 1, std::move(out), image.channel_names());
    return {std::move(scaled), ScaleRecord{percentile, cutoff}};
}

Volume unscale(const Volume& image, const ScaleRecord& record) {
    if (image.channels() != 1) throw std::invalid_argument("unscale expects a single channel");
    if (!std::isfinite(record.cutoff) || record.cutoff <= 0.0)
        throw std::invalid_argument("invalid scale record");
    std::vector<float> out(image.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = image.data()[i];
        if (v < -1.0 - 1e-6 || v > 1.0 + 1e-6)
            throw std::invalid_argument("unscale input must lie in [-1, 1]");
        out[i] = static_cast<float>((v + 1.0) * 0.5 * record.cutoff);
    }
    return Volume(image.nx(), image.ny(), image.nz(), 1, std::move(out), image.channel_names());
}

// ============================================================================
// .pvol I/O
// ============================================================================

void write_pvol(const std::string& path, const Volume& vol) {
    nlohmann::ordered_json header;
    header["magic"] = "PVOL1";
    header["dims"] = {vol.nx(), vol.ny(), vol.nz()};
    header["channels"] = vol.channels();
    header["channel_names"] = vol.channel_names();
    header["dtype"] = "f32le";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(vol.data().data()),
              static_cast<std::streamsize>(vol.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

Volume read_pvol(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("missing header: " + path);

    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("malformed header: " + path);
    if (header.value("magic", "") != std::string("PVOL1"))
        throw std::runtime_error("unknown magic in " + path);
    if (header.value("dtype", "") != std::string("f32le"))
        throw std::runtime_error("unknown dtype in " + path);

    const auto dims = header.at("dims").get<std::vector<int>>();
    if (dims.size() != 3) throw std::runtime_error("bad dims in " + path);
    const int channels = header.at("channels").get<int>();
    std::vector<std::string> names;
    if (header.contains("channel_names"))
        names = header.at("channel_names").get<std::vector<std::string>>();

    const std::size_t count =
        static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] * channels;
    std::vector<float> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float))
        throw std::runtime_error("truncated payload in " + path);
    return Volume(dims[0], dims[1], dims[2], channels, std::move(data), std::move(names));
}

} // namespace qmri

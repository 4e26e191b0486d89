#ifndef QMRI_CORE_HPP
#define QMRI_CORE_HPP

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace qmri {

// ============================================================================
// Acquisition parameters
// ============================================================================

enum class SequenceKind { MPRAGE, SpinEcho, Flair };

const char* to_string(SequenceKind kind);

/// Accepts "mprage", "se", "spin_echo", "flair" (case-insensitive).
SequenceKind sequence_from_string(const std::string& name);

/// Scanner acquisition parameters. All times in seconds.
/// TI is present iff the sequence uses inversion recovery (MPRAGE, FLAIR);
/// spin-echo carries no TI.
struct AcquisitionParams {
    SequenceKind sequence = SequenceKind::SpinEcho;
    double te = 0.0;
    double tr = 0.0;
    std::optional<double> ti;

    static AcquisitionParams mprage(double te, double tr, double ti);
    static AcquisitionParams spin_echo(double te, double tr);
    static AcquisitionParams flair(double te, double tr, double ti);

    /// Throws std::invalid_argument on any violated constraint
    /// (te > 0, tr > 0, te < tr, TI presence rules, 0 < ti < tr).
    void validate() const;
};

// ============================================================================
// Volume container
// ============================================================================

/// Dense multi-channel volume. Storage is channel-planar: all of channel 0,
/// then channel 1, ...; within a channel row-major with x fastest.
/// 2D slices use nz = 1. All values are finite after construction.
class Volume {
public:
    Volume() = default;
    Volume(int nx, int ny, int nz, int channels, std::vector<float> data,
           std::vector<std::string> channel_names = {});

    static Volume zeros(int nx, int ny, int nz, int channels = 1,
                        std::vector<std::string> channel_names = {});

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    int nz() const { return nz_; }
    int channels() const { return channels_; }
    std::size_t voxel_count() const { return static_cast<std::size_t>(nx_) * ny_ * nz_; }
    std::size_t size() const { return data_.size(); }
    const std::vector<std::string>& channel_names() const { return names_; }

    std::size_t index(int x, int y, int z, int c = 0) const {
        return ((static_cast<std::size_t>(c) * nz_ + z) * ny_ + y) * nx_ + x;
    }
    float at(int x, int y, int z, int c = 0) const { return data_[index(x, y, z, c)]; }
    float& at(int x, int y, int z, int c = 0) { return data_[index(x, y, z, c)]; }

    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    bool same_shape(const Volume& other) const {
        return nx_ == other.nx_ && ny_ == other.ny_ && nz_ == other.nz_ &&
               channels_ == other.channels_;
    }

    /// Throws std::invalid_argument if any value is NaN/Inf.
    void check_finite() const;

private:
    int nx_ = 0, ny_ = 0, nz_ = 0, channels_ = 0;
    std::vector<std::string> names_;
    std::vector<float> data_;
};

// ============================================================================
// Tissue property map
// ============================================================================

/// Channel indices of a property map.
enum PropertyChannel : int { kChannelPD = 0, kChannelT1 = 1, kChannelT2 = 2 };

/// A 3-channel Volume holding per-voxel (PD, T1, T2). PD is dimensionless
/// (it absorbs the scanner gain), T1/T2 are in seconds. PD >= 0 and
/// T1, T2 > 0 at every voxel.
struct PropertyMap {
    Volume vol;

    /// Validates channel count, channel names and positivity.
    static PropertyMap from_volume(Volume v);

    float pd(int x, int y, int z = 0) const { return vol.at(x, y, z, kChannelPD); }
    float t1(int x, int y, int z = 0) const { return vol.at(x, y, z, kChannelT1); }
    float t2(int x, int y, int z = 0) const { return vol.at(x, y, z, kChannelT2); }
};

// ============================================================================
// Intensity preprocessing
// ============================================================================

/// Inversion data for scale_to_unit. Statistics are computed per input
/// volume (not per slice); `cutoff` is the intensity mapped to +1.
struct ScaleRecord {
    double percentile = 0.995;
    double cutoff = 0.0;
};

/// Maps a single-channel image into [-1, 1]: v' = 2*clamp(v, 0, p)/p - 1
/// where p is the given percentile of the voxel intensities (linear
/// interpolation quantile). Throws on a degenerate intensity range (p <= 0).
std::pair<Volume, ScaleRecord> scale_to_unit(const Volume& image, double percentile = 0.995);

/// Exact inverse of the affine part of scale_to_unit; identity for voxels
/// that were not clipped. Input values must lie in [-1, 1].
Volume unscale(const Volume& image, const ScaleRecord& record);

/// Linear-interpolation quantile of an unsorted sample, q in [0, 1].
double linear_quantile(std::vector<double> values, double q);

// ============================================================================
// Volume file format (.pvol)
// ============================================================================

/// One UTF-8 JSON header line
///   {"magic":"PVOL1","dims":[nx,ny,nz],"channels":k,"channel_names":[...],"dtype":"f32le"}
/// terminated by '\n', followed by nx*ny*nz*k little-endian f32 in
/// channel-planar row-major order.
void write_pvol(const std::string& path, const Volume& vol);

/// Rejects unknown magic or dtype.
Volume read_pvol(const std::string& path);

} // namespace qmri

#endif

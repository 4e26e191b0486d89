#ifndef QMRI_NN_HPP
#define QMRI_NN_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qmri/core.hpp"

// Minimal trainable-network toolkit with exact manual gradients: group
// normalization, adaptive group-norm conditioning, a small SiLU MLP and an
// Adam optimizer. Used standalone and by the diffusion trainer.

namespace qmri::nn {

inline constexpr double kGroupNormEps = 1e-5;

/// Per-group standardization of h laid out channel-major as [channels x n]:
/// h[c*n + j]. Each group of channels/groups consecutive channels is
/// normalized to mean 0, variance 1 (up to eps) over its channels x positions.
/// Throws if channels is not divisible by groups.
std::vector<double> group_norm(std::span<const double> h, int channels, int positions,
                               int groups, double eps = kGroupNormEps);

/// adagn(h, s, b) = s * group_norm(h) + b. scale/shift have size 1 (broadcast
/// over all channels) or size channels.
std::vector<double> adagn(std::span<const double> h, std::span<const double> scale,
                          std::span<const double> shift, int channels, int positions,
                          int groups, double eps = kGroupNormEps);

// ============================================================================
// MLP
// ============================================================================

struct Linear {
    int in = 0, out = 0;
    std::vector<double> w; // out x in, row-major
    std::vector<double> b; // out
};

struct MlpConfig {
    std::vector<int> widths; // [in, hidden..., out]
    int cond_dim = 0;        // 0 disables the conditioning head
    int groups = 1;          // group count for the conditioned norm
    std::uint64_t seed = 0;
};

/// Fully connected net with SiLU hidden activations. With a conditioning
/// head, each hidden layer output u is replaced by
/// silu(s * group_norm(u) + b) where the scalar (s, b) pair for that layer
/// comes from a linear head over the conditioning vector (TE, TR, TI).
struct MlpModel {
    std::vector<int> widths;
    std::vector<Linear> layers;
    int cond_dim = 0;
    int groups = 1;
    Linear cond_head; // cond_dim -> 2 * hidden_layer_count
    std::uint64_t seed = 0;

    static MlpModel init(const MlpConfig& config);

    int input_width() const { return widths.front(); }
    int output_width() const { return widths.back(); }
    int hidden_layer_count() const { return static_cast<int>(widths.size()) - 2; }
    std::size_t param_count() const;
};

struct LayerGrads {
    std::vector<double> w, b;
};

struct Gradients {
    std::vector<LayerGrads> layers;
    LayerGrads cond_head;

    static Gradients zeros_like(const MlpModel& model);
    void accumulate(const Gradients& other);
    void scale(double factor);
};

/// Flat parameter vector in serialization order (per layer: weights then
/// bias; conditioning head last). set_params is the inverse.
std::vector<double> flatten_params(const MlpModel& model);
void set_params(MlpModel& model, std::span<const double> flat);
std::vector<double> flatten_grads(const Gradients& grads);

std::vector<double> cond_vector(const AcquisitionParams& params); // (te, tr, ti-or-0)

/// Deterministic forward pass.
std::vector<double> mlp_forward(const MlpModel& model, std::span<const double> input,
                                const std::optional<AcquisitionParams>& condition = {});

struct BackwardResult {
    Gradients grads;
    std::vector<double> input_grad;
};

/// Exact reverse-mode gradients of the forward map, including through the
/// group-norm statistics and the conditioning head.
BackwardResult mlp_backward(const MlpModel& model, std::span<const double> input,
                            const std::optional<AcquisitionParams>& condition,
                            std::span<const double> output_gradient);

// ============================================================================
// Adam optimizer
// ============================================================================

struct OptimizerState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    std::vector<double> m, v; // sized to the parameter vector on first step
};

/// Standard bias-corrected adaptive-moment update, in place.
void optimizer_step(OptimizerState& state, std::vector<double>& params,
                    std::span<const double> grads);

// ----------------------------------------------------------------------------
// .mlp file: JSON header line
//   {"magic":"MLP1","widths":[...],"activation":"silu","cond_dim":k,
//    "groups":g,"seed":s}
// followed by f32le parameters in flatten_params order.
// ----------------------------------------------------------------------------
void save_mlp(const std::string& path, const MlpModel& model);
MlpModel load_mlp(const std::string& path);

} // namespace qmri::nn

#endif

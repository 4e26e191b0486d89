#include "qmri/nn.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "qmri/rng.hpp"

namespace qmri::nn {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu(double x) { return x * sigmoid(x); }
double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

void check_group_args(std::size_t size, int channels, int positions, int groups) {
    if (channels <= 0 || positions <= 0) throw std::invalid_argument("bad tensor shape");
    if (groups <= 0 || channels % groups != 0)
        throw std::invalid_argument("channels must be divisible by groups");
    if (size != static_cast<std::size_t>(channels) * positions)
        throw std::invalid_argument("tensor size does not match channels x positions");
}

struct GroupStats {
    std::vector<double> mean, inv_std; // per group
};

GroupStats group_stats(std::span<const double> h, int channels, int positions, int groups,
                       double eps) {
    GroupStats st;
    st.mean.resize(static_cast<std::size_t>(groups));
    st.inv_std.resize(static_cast<std::size_t>(groups));
    const int per_group = channels / groups;
    const std::size_t count = static_cast<std::size_t>(per_group) * positions;
    for (int g = 0; g < groups; ++g) {
        double sum = 0.0, sum2 = 0.0;
        for (int c = g * per_group; c < (g + 1) * per_group; ++c)
            for (int j = 0; j < positions; ++j) {
                const double x = h[static_cast<std::size_t>(c) * positions + j];
                sum += x;
                sum2 += x * x;
            }
        const double mean = sum / static_cast<double>(count);
        const double var = std::max(sum2 / static_cast<double>(count) - mean * mean, 0.0);
        st.mean[static_cast<std::size_t>(g)] = mean;
        st.inv_std[static_cast<std::size_t>(g)] = 1.0 / std::sqrt(var + eps);
    }
    return st;
}

} // namespace

std::vector<double> group_norm(std::span<const double> h, int channels, int positions,
                               int groups, double eps) {
    check_group_args(h.size(), channels, positions, groups);
    const GroupStats st = group_stats(h, channels, positions, groups, eps);
    const int per_group = channels / groups;
    std::vector<double> out(h.size());
    for (int c = 0; c < channels; ++c) {
        const int g = c / per_group;
        for (int j = 0; j < positions; ++j) {
            const std::size_t i = static_cast<std::size_t>(c) * positions + j;
            out[i] = (h[i] - st.mean[static_cast<std::size_t>(g)]) *
                     st.inv_std[static_cast<std::size_t>(g)];
        }
    }
    return out;
}

std::vector<double> adagn(std::span<const double> h, std::span<const double> scale,
                          std::span<const double> shift, int channels, int positions,
                          int groups, double eps) {
    if (scale.size() != 1 && scale.size() != static_cast<std::size_t>(channels))
        throw std::invalid_argument("scale must broadcast over channels");
    if (shift.size() != 1 && shift.size() != static_cast<std::size_t>(channels))
        throw std::invalid_argument("shift must broadcast over channels");
    std::vector<double> out = group_norm(h, channels, positions, groups, eps);
    for (int c = 0; c < channels; ++c) {
        const double s = scale[scale.size() == 1 ? 0 : static_cast<std::size_t>(c)];
        const double b = shift[shift.size() == 1 ? 0 : static_cast<std::size_t>(c)];
        for (int j = 0; j < positions; ++j) {
            const std::size_t i = static_cast<std::size_t>(c) * positions + j;
            out[i] = s * out[i] + b;
        }
    }
    return out;
}

// ============================================================================
// MLP
// ============================================================================

namespace {

Linear init_linear(int in, int out, std::uint64_t seed, std::uint64_t& counter) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w.resize(static_cast<std::size_t>(in) * out);
    l.b.assign(static_cast<std::size_t>(out), 0.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& w : l.w)
        w = (2.0 * rng::uniform_open(seed, counter++) - 1.0) * bound;
    return l;
}

std::vector<double> linear_forward(const Linear& l, std::span<const double> x) {
    std::vector<double> y(static_cast<std::size_t>(l.out));
    for (int o = 0; o < l.out; ++o) {
        double sum = l.b[static_cast<std::size_t>(o)];
        const double* row = l.w.data() + static_cast<std::size_t>(o) * l.in;
        for (int i = 0; i < l.in; ++i) sum += row[i] * x[static_cast<std::size_t>(i)];
        y[static_cast<std::size_t>(o)] = sum;
    }
    return y;
}

} // namespace

MlpModel MlpModel::init(const MlpConfig& config) {
    if (config.widths.size() < 2) throw std::invalid_argument("need at least two widths");
    for (int w : config.widths)
        if (w <= 0) throw std::invalid_argument("widths must be positive");
    if (config.cond_dim < 0) throw std::invalid_argument("cond_dim must be >= 0");
    if (config.groups <= 0) throw std::invalid_argument("groups must be >= 1");

    MlpModel m;
    m.widths = config.widths;
    m.cond_dim = config.cond_dim;
    m.groups = config.groups;
    m.seed = config.seed;
    std::uint64_t counter = 0;
    for (std::size_t l = 0; l + 1 < config.widths.size(); ++l)
        m.layers.push_back(
            init_linear(config.widths[l], config.widths[l + 1], config.seed, counter));
    if (config.cond_dim > 0) {
        const int hidden = m.hidden_layer_count();
        for (int l = 0; l < hidden; ++l)
            if (config.widths[static_cast<std::size_t>(l) + 1] % config.groups != 0)
                throw std::invalid_argument("hidden widths must be divisible by groups");
        m.cond_head = init_linear(config.cond_dim, 2 * hidden, config.seed, counter);
    }
    return m;
}

std::size_t MlpModel::param_count() const {
    std::size_t n = 0;
    for (const Linear& l : layers) n += l.w.size() + l.b.size();
    n += cond_head.w.size() + cond_head.b.size();
    return n;
}

Gradients Gradients::zeros_like(const MlpModel& model) {
    Gradients g;
    for (const Linear& l : model.layers)
        g.layers.push_back({std::vector<double>(l.w.size(), 0.0),
                            std::vector<double>(l.b.size(), 0.0)});
    g.cond_head = {std::vector<double>(model.cond_head.w.size(), 0.0),
                   std::vector<double>(model.cond_head.b.size(), 0.0)};
    return g;
}

void Gradients::accumulate(const Gradients& other) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        for (std::size_t i = 0; i < layers[l].w.size(); ++i)
            layers[l].w[i] += other.layers[l].w[i];
        for (std::size_t i = 0; i < layers[l].b.size(); ++i)
            layers[l].b[i] += other.layers[l].b[i];
    }
    for (std::size_t i = 0; i < cond_head.w.size(); ++i) cond_head.w[i] += other.cond_head.w[i];
    for (std::size_t i = 0; i < cond_head.b.size(); ++i) cond_head.b[i] += other.cond_head.b[i];
}

void Gradients::scale(double factor) {
    for (LayerGrads& l : layers) {
        for (double& x : l.w) x *= factor;
        for (double& x : l.b) x *= factor;
    }
    for (double& x : cond_head.w) x *= factor;
    for (double& x : cond_head.b) x *= factor;
}

std::vector<double> flatten_params(const MlpModel& model) {
    std::vector<double> flat;
    flat.reserve(model.param_count());
    for (const Linear& l : model.layers) {
        flat.insert(flat.end(), l.w.begin(), l.w.end());
        flat.insert(flat.end(), l.b.begin(), l.b.end());
    }
    flat.insert(flat.end(), model.cond_head.w.begin(), model.cond_head.w.end());
    flat.insert(flat.end(), model.cond_head.b.begin(), model.cond_head.b.end());
    return flat;
}

void set_params(MlpModel& model, std::span<const double> flat) {
    if (flat.size() != model.param_count())
        throw std::invalid_argument("parameter vector size mismatch");
    std::size_t k = 0;
    for (Linear& l : model.layers) {
        for (double& w : l.w) w = flat[k++];
        for (double& b : l.b) b = flat[k++];
    }
    for (double& w : model.cond_head.w) w = flat[k++];
    for (double& b : model.cond_head.b) b = flat[k++];
}

std::vector<double> flatten_grads(const Gradients& grads) {
    std::vector<double> flat;
    for (const LayerGrads& l : grads.layers) {
        flat.insert(flat.end(), l.w.begin(), l.w.end());
        flat.insert(flat.end(), l.b.begin(), l.b.end());
    }
    flat.insert(flat.end(), grads.cond_head.w.begin(), grads.cond_head.w.end());
    flat.insert(flat.end(), grads.cond_head.b.begin(), grads.cond_head.b.end());
    return flat;
}

std::vector<double> cond_vector(const AcquisitionParams& params) {
    return {params.te, params.tr, params.ti.value_or(0.0)};
}

namespace {

// Everything the backward pass needs from one forward evaluation.
struct ForwardTrace {
    std::vector<std::vector<double>> inputs;   // input to each linear layer
    std::vector<std::vector<double>> pre_norm; // linear output u, hidden layers
    std::vector<std::vector<double>> norm;     // group_norm(u)
    std::vector<std::vector<double>> pre_act;  // s*gn+b (or u when unconditioned)
    std::vector<double> head_out;              // conditioning head output
    std::vector<double> cond_in;
    std::vector<double> output;
};

ForwardTrace run_forward(const MlpModel& model, std::span<const double> input,
                         const std::optional<AcquisitionParams>& condition) {
    if (input.size() != static_cast<std::size_t>(model.input_width()))
        throw std::invalid_argument("input width mismatch");
    const bool conditioned = condition.has_value();
    if (conditioned && model.cond_dim == 0)
        throw std::invalid_argument("model has no conditioning head");

    ForwardTrace tr;
    if (conditioned) {
        tr.cond_in = cond_vector(*condition);
        if (tr.cond_in.size() != static_cast<std::size_t>(model.cond_dim))
            throw std::invalid_argument("condition width mismatch");
        tr.head_out = linear_forward(model.cond_head, tr.cond_in);
    }

    std::vector<double> x(input.begin(), input.end());
    const int layer_count = static_cast<int>(model.layers.size());
    for (int l = 0; l < layer_count; ++l) {
        tr.inputs.push_back(x);
        std::vector<double> u = linear_forward(model.layers[static_cast<std::size_t>(l)], x);
        const bool hidden = l + 1 < layer_count;
        if (!hidden) {
            tr.output = std::move(u);
            break;
        }
        const int width = model.widths[static_cast<std::size_t>(l) + 1];
        std::vector<double> a;
        if (conditioned) {
            tr.pre_norm.push_back(u);
            const double s = tr.head_out[static_cast<std::size_t>(2 * l)];
            const double b = tr.head_out[static_cast<std::size_t>(2 * l) + 1];
            std::vector<double> gn = group_norm(u, width, 1, model.groups);
            tr.norm.push_back(gn);
            a.resize(gn.size());
            for (std::size_t i = 0; i < gn.size(); ++i) a[i] = s * gn[i] + b;
        } else {
            tr.pre_norm.emplace_back();
            tr.norm.emplace_back();
            a = std::move(u);
        }
        tr.pre_act.push_back(a);
        x.resize(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) x[i] = silu(a[i]);
    }
    return tr;
}

// Gradient of group_norm for one [channels x 1] vector.
std::vector<double> group_norm_backward(std::span<const double> u,
                                        std::span<const double> gn,
                                        std::span<const double> dgn, int channels,
                                        int groups, double eps) {
    const GroupStats st = group_stats(u, channels, 1, groups, eps);
    const int per_group = channels / groups;
    std::vector<double> du(u.size());
    for (int g = 0; g < groups; ++g) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (int c = g * per_group; c < (g + 1) * per_group; ++c) {
            sum_d += dgn[static_cast<std::size_t>(c)];
            sum_dx += dgn[static_cast<std::size_t>(c)] * gn[static_cast<std::size_t>(c)];
        }
        const double inv_n = 1.0 / static_cast<double>(per_group);
        for (int c = g * per_group; c < (g + 1) * per_group; ++c) {
            const std::size_t i = static_cast<std::size_t>(c);
            du[i] = st.inv_std[static_cast<std::size_t>(g)] *
                    (dgn[i] - sum_d * inv_n - gn[i] * sum_dx * inv_n);
        }
    }
    return du;
}

} // namespace

std::vector<double> mlp_forward(const MlpModel& model, std::span<const double> input,
                                const std::optional<AcquisitionParams>& condition) {
    return run_forward(model, input, condition).output;
}

BackwardResult mlp_backward(const MlpModel& model, std::span<const double> input,
                            const std::optional<AcquisitionParams>& condition,
                            std::span<const double> output_gradient) {
    if (output_gradient.size() != static_cast<std::size_t>(model.output_width()))
        throw std::invalid_argument("output gradient width mismatch");
    const ForwardTrace tr = run_forward(model, input, condition);
    const bool conditioned = condition.has_value();

    BackwardResult res;
    res.grads = Gradients::zeros_like(model);
    std::vector<double> head_grad(tr.head_out.size(), 0.0);

    std::vector<double> dy(output_gradient.begin(), output_gradient.end());
    const int layer_count = static_cast<int>(model.layers.size());
    for (int l = layer_count - 1; l >= 0; --l) {
        const Linear& lin = model.layers[static_cast<std::size_t>(l)];
        const std::vector<double>& x = tr.inputs[static_cast<std::size_t>(l)];
        const bool hidden = l + 1 < layer_count;

        std::vector<double> du;
        if (hidden) {
            const std::vector<double>& a = tr.pre_act[static_cast<std::size_t>(l)];
            std::vector<double> da(dy.size());
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] = dy[i] * silu_grad(a[i]);
            if (conditioned) {
                const double s = tr.head_out[static_cast<std::size_t>(2 * l)];
                const std::vector<double>& gn = tr.norm[static_cast<std::size_t>(l)];
                double ds = 0.0, db = 0.0;
                std::vector<double> dgn(da.size());
                for (std::size_t i = 0; i < da.size(); ++i) {
                    ds += da[i] * gn[i];
                    db += da[i];
                    dgn[i] = da[i] * s;
                }
                head_grad[static_cast<std::size_t>(2 * l)] += ds;
                head_grad[static_cast<std::size_t>(2 * l) + 1] += db;
                du = group_norm_backward(tr.pre_norm[static_cast<std::size_t>(l)], gn, dgn,
                                         lin.out, model.groups, kGroupNormEps);
            } else {
                du = std::move(da);
            }
        } else {
            du = std::move(dy);
        }

        LayerGrads& lg = res.grads.layers[static_cast<std::size_t>(l)];
        std::vector<double> dx(static_cast<std::size_t>(lin.in), 0.0);
        for (int o = 0; o < lin.out; ++o) {
            const double g = du[static_cast<std::size_t>(o)];
            lg.b[static_cast<std::size_t>(o)] += g;
            double* wrow = lg.w.data() + static_cast<std::size_t>(o) * lin.in;
            const double* row = lin.w.data() + static_cast<std::size_t>(o) * lin.in;
            for (int i = 0; i < lin.in; ++i) {
                wrow[i] += g * x[static_cast<std::size_t>(i)];
                dx[static_cast<std::size_t>(i)] += g * row[i];
            }
        }
        dy = std::move(dx);
    }
    res.input_grad = std::move(dy);

    if (conditioned) {
        // head_grad -> conditioning head parameters
        for (int o = 0; o < model.cond_head.out; ++o) {
            const double g = head_grad[static_cast<std::size_t>(o)];
            res.grads.cond_head.b[static_cast<std::size_t>(o)] += g;
            for (int i = 0; i < model.cond_head.in; ++i)
                res.grads.cond_head.w[static_cast<std::size_t>(o) * model.cond_head.in + i] +=
                    g * tr.cond_in[static_cast<std::size_t>(i)];
        }
    }
    return res;
}

void optimizer_step(OptimizerState& state, std::vector<double>& params,
                    std::span<const double> grads) {
    if (params.size() != grads.size())
        throw std::invalid_argument("params/grads size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("optimizer state size mismatch");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

// ============================================================================
// .mlp serialization
// ============================================================================

void save_mlp(const std::string& path, const MlpModel& model) {
    nlohmann::ordered_json header;
    header["magic"] = "MLP1";
    header["widths"] = model.widths;
    header["activation"] = "silu";
    header["cond_dim"] = model.cond_dim;
    header["groups"] = model.groups;
    header["seed"] = model.seed;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << header.dump() << '\n';
    const std::vector<double> flat = flatten_params(model);
    std::vector<float> buf(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) buf[i] = static_cast<float>(flat[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

MlpModel load_mlp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("missing header: " + path);
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("malformed header: " + path);
    if (header.value("magic", "") != std::string("MLP1"))
        throw std::runtime_error("unknown magic in " + path);
    if (header.value("activation", "") != std::string("silu"))
        throw std::runtime_error("unknown activation in " + path);

    MlpConfig config;
    config.widths = header.at("widths").get<std::vector<int>>();
    config.cond_dim = header.value("cond_dim", 0);
    config.groups = header.value("groups", 1);
    config.seed = header.value("seed", static_cast<std::uint64_t>(0));
    MlpModel model = MlpModel::init(config);

    std::vector<float> buf(model.param_count());
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
        throw std::runtime_error("truncated payload in " + path);
    std::vector<double> flat(buf.begin(), buf.end());
    set_params(model, flat);
    return model;
}

} // namespace qmri::nn

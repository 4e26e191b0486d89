#include "qmri/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "qmri/rng.hpp"

namespace qmri::diffusion {

DiffusionSchedule make_schedule(int timesteps, double beta_start, double beta_end) {
    if (timesteps < 1) throw std::invalid_argument("timesteps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");

    DiffusionSchedule s;
    s.timesteps = timesteps;
    s.beta.resize(static_cast<std::size_t>(timesteps));
    s.alpha.resize(static_cast<std::size_t>(timesteps));
    s.alpha_bar.resize(static_cast<std::size_t>(timesteps));
    double prod = 1.0;
    for (int t = 0; t < timesteps; ++t) {
        const double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / (timesteps - 1);
        const double beta = beta_start + frac * (beta_end - beta_start);
        s.beta[static_cast<std::size_t>(t)] = beta;
        s.alpha[static_cast<std::size_t>(t)] = 1.0 - beta;
        prod *= 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
    return s;
}

std::vector<double> q_sample(std::span<const double> z0, int t, std::span<const double> eps,
                             const DiffusionSchedule& schedule) {
    if (t < 1 || t > schedule.timesteps) throw std::invalid_argument("t out of range");
    if (z0.size() != eps.size()) throw std::invalid_argument("z0/eps size mismatch");
    const double abar = schedule.alpha_bar[static_cast<std::size_t>(t - 1)];
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    std::vector<double> zt(z0.size());
    for (std::size_t i = 0; i < z0.size(); ++i) zt[i] = a * z0[i] + b * eps[i];
    return zt;
}

std::vector<double> time_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("embedding dim must be even");
    const int half = dim / 2;
    std::vector<double> emb(static_cast<std::size_t>(dim));
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / std::max(half - 1, 1));
        emb[static_cast<std::size_t>(2 * k)] = std::sin(t * freq);
        emb[static_cast<std::size_t>(2 * k) + 1] = std::cos(t * freq);
    }
    return emb;
}

std::vector<NoiseDraw> ldm_draws(const DiffusionSchedule& schedule, std::uint64_t seed,
                                 std::size_t batch, std::size_t dim) {
    std::vector<NoiseDraw> draws(batch);
    const std::uint64_t t_seed = rng::derive_seed(seed, 1);
    const std::uint64_t eps_seed = rng::derive_seed(seed, 2);
    for (std::size_t i = 0; i < batch; ++i) {
        const double u = rng::uniform_open(t_seed, i);
        int t = 1 + static_cast<int>(u * schedule.timesteps);
        draws[i].t = std::min(t, schedule.timesteps);
        draws[i].eps.resize(dim);
        for (std::size_t d = 0; d < dim; ++d)
            draws[i].eps[d] = rng::normal(eps_seed, i * dim + d);
    }
    return draws;
}

namespace {

std::vector<double> denoiser_input(std::span<const double> z_t, int t) {
    std::vector<double> in(z_t.begin(), z_t.end());
    const std::vector<double> emb = time_embedding(t);
    in.insert(in.end(), emb.begin(), emb.end());
    return in;
}

} // namespace

double ldm_loss_value(const DenoiseFn& denoise,
                      const std::vector<std::vector<double>>& z0_batch,
                      const DiffusionSchedule& schedule, std::uint64_t seed) {
    if (z0_batch.empty()) throw std::invalid_argument("empty batch");
    const std::size_t dim = z0_batch.front().size();
    const std::vector<NoiseDraw> draws = ldm_draws(schedule, seed, z0_batch.size(), dim);
    double loss = 0.0;
    for (std::size_t i = 0; i < z0_batch.size(); ++i) {
        if (z0_batch[i].size() != dim) throw std::invalid_argument("ragged batch");
        const std::vector<double> zt = q_sample(z0_batch[i], draws[i].t, draws[i].eps, schedule);
        const std::vector<double> pred = denoise(zt, draws[i].t, i);
        if (pred.size() != dim) throw std::invalid_argument("denoiser output size mismatch");
        for (std::size_t d = 0; d < dim; ++d) {
            const double r = draws[i].eps[d] - pred[d];
            loss += r * r;
        }
    }
    return loss / (static_cast<double>(z0_batch.size()) * static_cast<double>(dim));
}

LossResult ldm_loss(const nn::MlpModel& denoiser,
                    const std::vector<std::vector<double>>& z0_batch,
                    const DiffusionSchedule& schedule, std::uint64_t seed) {
    if (z0_batch.empty()) throw std::invalid_argument("empty batch");
    const std::size_t dim = z0_batch.front().size();
    if (denoiser.input_width() != static_cast<int>(dim) + kTimeEmbedDim)
        throw std::invalid_argument("denoiser input width mismatch");
    if (denoiser.output_width() != static_cast<int>(dim))
        throw std::invalid_argument("denoiser output width mismatch");

    const std::vector<NoiseDraw> draws = ldm_draws(schedule, seed, z0_batch.size(), dim);
    const std::size_t batch = z0_batch.size();
    const double norm = 1.0 / (static_cast<double>(batch) * static_cast<double>(dim));

    std::vector<double> losses(batch);
    std::vector<nn::Gradients> grads(batch);
    const std::int64_t count = static_cast<std::int64_t>(batch);
#pragma omp parallel for schedule(static)
    for (std::int64_t ii = 0; ii < count; ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        const std::vector<double> zt = q_sample(z0_batch[i], draws[i].t, draws[i].eps, schedule);
        const std::vector<double> in = denoiser_input(zt, draws[i].t);
        const std::vector<double> pred = nn::mlp_forward(denoiser, in);
        double loss_i = 0.0;
        std::vector<double> dout(dim);
        for (std::size_t d = 0; d < dim; ++d) {
            const double r = draws[i].eps[d] - pred[d];
            loss_i += r * r;
            dout[d] = -2.0 * r * norm;
        }
        losses[i] = loss_i;
        grads[i] = nn::mlp_backward(denoiser, in, {}, dout).grads;
    }

    // fixed batch-index reduction order keeps the result thread-count independent
    LossResult res;
    res.grads = nn::Gradients::zeros_like(denoiser);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        loss += losses[i];
        res.grads.accumulate(grads[i]);
    }
    res.loss = loss * norm;
    return res;
}

namespace {

std::vector<double> sample_one_chain(const nn::MlpModel& denoiser,
                                     const DiffusionSchedule& schedule, int dim,
                                     std::uint64_t chain_seed) {
    std::vector<double> z(static_cast<std::size_t>(dim));
    std::uint64_t draw = 0;
    for (int d = 0; d < dim; ++d) z[static_cast<std::size_t>(d)] = rng::normal(chain_seed, draw++);

    for (int t = schedule.timesteps; t >= 1; --t) {
        const double beta = schedule.beta[static_cast<std::size_t>(t - 1)];
        const double alpha = schedule.alpha[static_cast<std::size_t>(t - 1)];
        const double abar = schedule.alpha_bar[static_cast<std::size_t>(t - 1)];
        const std::vector<double> in = denoiser_input(z, t);
        const std::vector<double> eps_hat = nn::mlp_forward(denoiser, in);

        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
        const double coef = beta / std::sqrt(1.0 - abar);
        for (int d = 0; d < dim; ++d)
            z[static_cast<std::size_t>(d)] =
                inv_sqrt_alpha * (z[static_cast<std::size_t>(d)] -
                                  coef * eps_hat[static_cast<std::size_t>(d)]);
        if (t > 1) {
            const double abar_prev = schedule.alpha_bar[static_cast<std::size_t>(t - 2)];
            const double btilde = beta * (1.0 - abar_prev) / (1.0 - abar);
            const double sd = std::sqrt(btilde);
            for (int d = 0; d < dim; ++d)
                z[static_cast<std::size_t>(d)] += sd * rng::normal(chain_seed, draw++);
        }
    }
    return z;
}

} // namespace

std::vector<std::vector<double>> ddpm_sample(const nn::MlpModel& denoiser,
                                             const DiffusionSchedule& schedule, int dim,
                                             int count, std::uint64_t seed) {
    if (dim < 1 || count < 0) throw std::invalid_argument("bad sample request");
    if (denoiser.input_width() != dim + kTimeEmbedDim)
        throw std::invalid_argument("denoiser input width mismatch");
    if (denoiser.output_width() != dim)
        throw std::invalid_argument("denoiser output width mismatch");

    std::vector<std::vector<double>> samples(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < count; ++c)
        samples[static_cast<std::size_t>(c)] = sample_one_chain(
            denoiser, schedule, dim, rng::derive_seed(seed, static_cast<std::uint64_t>(c)));
    return samples;
}

TrainResult train_toy(const std::vector<std::vector<double>>& dataset,
                      const DiffusionSchedule& schedule, const TrainConfig& config) {
    if (dataset.empty()) throw std::invalid_argument("empty dataset");
    if (config.epochs < 1 || config.batch_size < 1)
        throw std::invalid_argument("bad training config");
    const std::size_t dim = dataset.front().size();
    for (const auto& z : dataset)
        if (z.size() != dim) throw std::invalid_argument("ragged dataset");

    nn::MlpConfig mc;
    mc.widths.push_back(static_cast<int>(dim) + kTimeEmbedDim);
    for (int w : config.hidden) mc.widths.push_back(w);
    mc.widths.push_back(static_cast<int>(dim));
    mc.seed = rng::derive_seed(config.seed, 0xC0DE);

    TrainResult result;
    result.model = nn::MlpModel::init(mc);
    std::vector<double> params = nn::flatten_params(result.model);
    nn::OptimizerState opt;
    opt.lr = config.lr;

    const std::uint64_t shuffle_seed = rng::derive_seed(config.seed, 0x5F);
    const std::uint64_t noise_seed = rng::derive_seed(config.seed, 0xA0);
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::uint64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        // deterministic Fisher-Yates per epoch
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::uint64_t r = rng::mix64(
                shuffle_seed, static_cast<std::uint64_t>(epoch) * order.size() + i);
            std::swap(order[i - 1], order[r % i]);
        }

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < dataset.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t stop =
                std::min(dataset.size(), start + static_cast<std::size_t>(config.batch_size));
            std::vector<std::vector<double>> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) batch.push_back(dataset[order[i]]);

            const LossResult lr = ldm_loss(result.model, batch, schedule,
                                           rng::derive_seed(noise_seed, step++));
            nn::optimizer_step(opt, params, nn::flatten_grads(lr.grads));
            nn::set_params(result.model, params);
            epoch_loss += lr.loss;
            ++batches;
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    }
    return result;
}

// ============================================================================
// .latn I/O
// ============================================================================

void write_latents(const std::string& path, const std::vector<std::vector<double>>& data) {
    if (data.empty()) throw std::invalid_argument("no latents to write");
    const std::size_t dim = data.front().size();
    for (const auto& z : data)
        if (z.size() != dim) throw std::invalid_argument("ragged latents");

    nlohmann::ordered_json header;
    header["magic"] = "LATN1";
    header["dim"] = dim;
    header["count"] = data.size();
    header["dtype"] = "f32le";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << header.dump() << '\n';
    std::vector<float> buf;
    buf.reserve(dim * data.size());
    for (const auto& z : data)
        for (double v : z) buf.push_back(static_cast<float>(v));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::vector<double>> read_latents(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("missing header: " + path);
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("malformed header: " + path);
    if (header.value("magic", "") != std::string("LATN1"))
        throw std::runtime_error("unknown magic in " + path);
    if (header.value("dtype", "") != std::string("f32le"))
        throw std::runtime_error("unknown dtype in " + path);
    const std::size_t dim = header.at("dim").get<std::size_t>();
    const std::size_t count = header.at("count").get<std::size_t>();

    std::vector<float> buf(dim * count);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
        throw std::runtime_error("truncated payload in " + path);
    std::vector<std::vector<double>> data(count, std::vector<double>(dim));
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t d = 0; d < dim; ++d) data[i][d] = buf[i * dim + d];
    return data;
}

} // namespace qmri::diffusion

// qmri: tissue-property phantoms, contrast synthesis, MAP fitting,
// product-of-experts fusion, toy latent diffusion and image metrics.
//
// Exit codes: 0 success, 2 usage/validation error, 3 runtime failure
// (non-convergence with --strict).

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qmri/core.hpp"
#include "qmri/diffusion.hpp"
#include "qmri/fusion.hpp"
#include "qmri/metrics.hpp"
#include "qmri/qmap.hpp"
#include "qmri/signal.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::pair<int, int> parse_dims2(const std::string& text) {
    int nx = 0, ny = 0, nz = 1;
    const int n = std::sscanf(text.c_str(), "%dx%dx%d", &nx, &ny, &nz);
    if (n < 2 || nx <= 0 || ny <= 0 || nz != 1)
        throw UsageError("bad --dims (expected NXxNY): " + text);
    return {nx, ny};
}

qmri::AcquisitionParams make_params(const std::string& seq, double te, double tr,
                                    std::optional<double> ti) {
    const qmri::SequenceKind kind = qmri::sequence_from_string(seq);
    if (kind == qmri::SequenceKind::SpinEcho) {
        if (ti) throw UsageError("spin-echo sequences do not use inversion recovery (--ti)");
        return qmri::AcquisitionParams::spin_echo(te, tr);
    }
    if (!ti) throw UsageError(seq + " requires --ti");
    qmri::AcquisitionParams p;
    p.sequence = kind;
    p.te = te;
    p.tr = tr;
    p.ti = *ti;
    p.validate();
    return p;
}

// Input binding `path:seq,te,tr[,ti]`, times in seconds.
qmri::qmap::ContrastImage parse_binding(const std::string& text) {
    const std::size_t colon = text.rfind(':');
    if (colon == std::string::npos || colon == 0)
        throw UsageError("bad --inputs binding (expected path:seq,te,tr[,ti]): " + text);
    const std::string path = text.substr(0, colon);
    std::stringstream fields(text.substr(colon + 1));
    std::string seq, item;
    std::vector<double> times;
    if (!std::getline(fields, seq, ',')) throw UsageError("missing sequence in: " + text);
    while (std::getline(fields, item, ',')) {
        try {
            times.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw UsageError("bad time value '" + item + "' in: " + text);
        }
    }
    if (times.size() < 2 || times.size() > 3)
        throw UsageError("expected te,tr[,ti] in: " + text);
    std::optional<double> ti;
    if (times.size() == 3) ti = times[2];
    return {qmri::read_pvol(path), make_params(seq, times[0], times[1], ti)};
}

std::vector<qmri::qmap::ContrastImage> load_meta(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open --meta file: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_array()) throw UsageError("--meta must be a JSON array");
    std::vector<qmri::qmap::ContrastImage> images;
    for (const auto& je : j) {
        std::optional<double> ti;
        if (je.contains("ti")) ti = je.at("ti").get<double>();
        images.push_back({qmri::read_pvol(je.at("path").get<std::string>()),
                          make_params(je.at("seq").get<std::string>(),
                                      je.at("te").get<double>(), je.at("tr").get<double>(), ti)});
    }
    return images;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot open for writing: " + path);
    out << text;
}

// ----------------------------------------------------------------------------

int cmd_phantom(const std::string& preset, const std::string& spec_path,
                const std::string& dims, const std::string& out) {
    qmri::qmap::PhantomSpec spec;
    if (!spec_path.empty()) {
        spec = qmri::qmap::load_phantom_spec(spec_path);
        if (!dims.empty()) {
            auto [nx, ny] = parse_dims2(dims);
            spec.nx = nx;
            spec.ny = ny;
            spec.nz = 1;
        }
        if (spec.nx <= 0) throw UsageError("phantom spec has no dims; pass --dims");
    } else if (preset == "brain2d") {
        auto [nx, ny] = parse_dims2(dims.empty() ? "224x160" : dims);
        spec = qmri::qmap::brain2d_preset(nx, ny);
    } else {
        throw UsageError("unknown preset: " + preset);
    }
    const qmri::PropertyMap props = qmri::qmap::make_phantom(spec);
    qmri::write_pvol(out, props.vol);
    std::cout << "wrote " << out << " dims " << props.vol.nx() << "x" << props.vol.ny() << "x"
              << props.vol.nz() << " channels 3\n";
    return 0;
}

int cmd_synth(const std::string& props_path, const std::string& seq, double te, double tr,
              std::optional<double> ti, double noise_sigma, std::uint64_t seed,
              bool magnitude, const std::string& out) {
    const qmri::PropertyMap props = qmri::PropertyMap::from_volume(qmri::read_pvol(props_path));
    const qmri::AcquisitionParams params = make_params(seq, te, tr, ti);
    qmri::signal::SignalOptions opts;
    opts.magnitude_mode = magnitude;
    const qmri::Volume image = qmri::signal::synthesize(props, params, opts, noise_sigma, seed);
    qmri::write_pvol(out, image);
    std::cout << "wrote " << out << " (" << qmri::to_string(params.sequence) << " te=" << te
              << " tr=" << tr;
    if (ti) std::cout << " ti=" << *ti;
    std::cout << ")\n";
    return 0;
}

int cmd_fit(const std::vector<std::string>& bindings, const std::string& meta, double lambda,
            int threads, bool strict, const std::string& out) {
    std::vector<qmri::qmap::ContrastImage> images;
    for (const std::string& b : bindings) images.push_back(parse_binding(b));
    if (!meta.empty()) {
        auto extra = load_meta(meta);
        for (auto& ci : extra) images.push_back(std::move(ci));
    }
    if (images.empty()) throw UsageError("no inputs (use --inputs or --meta)");

    qmri::qmap::FitConfig config;
    config.prior_weight = lambda;
    const qmri::qmap::FitResult result = qmri::qmap::fit_volume(images, config, threads);
    qmri::write_pvol(out, result.props.vol);

    double iter_sum = 0.0;
    for (int it : result.iterations) iter_sum += it;
    nlohmann::ordered_json diag;
    diag["voxels"] = result.converged.size();
    diag["convergence_rate"] = result.convergence_rate();
    diag["median_residual"] = result.median_residual();
    diag["mean_iterations"] = iter_sum / static_cast<double>(result.iterations.size());
    diag["lambda"] = lambda;
    write_text(out + ".json", diag.dump(2) + "\n");

    std::cout << "wrote " << out << "; convergence " << result.convergence_rate() * 100.0
              << "%, median residual " << result.median_residual() << "\n";
    if (strict && result.convergence_rate() < 1.0)
        throw RuntimeFailure("fit did not converge on every voxel (--strict)");
    return 0;
}

int cmd_fuse(const std::vector<std::string>& inputs, const std::string& keep,
             std::optional<double> drop_prob, std::uint64_t seed, bool with_prior,
             const std::string& out) {
    std::vector<qmri::fusion::GaussianFactor> experts;
    for (const std::string& path : inputs) experts.push_back(qmri::fusion::read_gauss(path));

    if (!keep.empty() && drop_prob) throw UsageError("--keep and --drop-prob are exclusive");
    if (!keep.empty()) {
        std::vector<bool> mask;
        std::stringstream ss(keep);
        std::string item;
        while (std::getline(ss, item, ',')) mask.push_back(item == "1" || item == "true");
        experts = qmri::fusion::drop_modalities(experts, mask);
    } else if (drop_prob) {
        experts = qmri::fusion::drop_modalities(experts, *drop_prob, seed);
    }

    const qmri::fusion::GaussianFactor fused = qmri::fusion::poe_fuse(experts, with_prior);
    qmri::fusion::write_gauss(out, fused);
    std::cout << "fused " << experts.size() << " experts, dim " << fused.dim()
              << ", KL(fused || N(0,I)) = " << qmri::fusion::gaussian_kl_standard(fused) << "\n";
    return 0;
}

int cmd_diffuse_train(const std::string& data_path, int epochs, int batch, double lr,
                      int timesteps, double beta_start, double beta_end,
                      const std::string& hidden, std::uint64_t seed, const std::string& out) {
    const auto dataset = qmri::diffusion::read_latents(data_path);
    const auto schedule = qmri::diffusion::make_schedule(timesteps, beta_start, beta_end);

    qmri::diffusion::TrainConfig config;
    config.epochs = epochs;
    config.batch_size = batch;
    config.lr = lr;
    config.seed = seed;
    config.hidden.clear();
    std::stringstream ss(hidden);
    std::string item;
    while (std::getline(ss, item, ',')) config.hidden.push_back(std::stoi(item));
    if (config.hidden.empty()) throw UsageError("--hidden must list at least one width");

    const auto result = qmri::diffusion::train_toy(dataset, schedule, config);
    qmri::nn::save_mlp(out, result.model);
    std::cout << "trained " << epochs << " epochs on " << dataset.size() << " latents; loss "
              << result.epoch_loss.front() << " -> " << result.epoch_loss.back() << "; wrote "
              << out << "\n";
    return 0;
}

int cmd_diffuse_sample(const std::string& model_path, int count, int timesteps,
                       double beta_start, double beta_end, std::uint64_t seed,
                       const std::string& out) {
    const qmri::nn::MlpModel model = qmri::nn::load_mlp(model_path);
    const int dim = model.output_width();
    const auto schedule = qmri::diffusion::make_schedule(timesteps, beta_start, beta_end);
    const auto samples = qmri::diffusion::ddpm_sample(model, schedule, dim, count, seed);
    qmri::diffusion::write_latents(out, samples);
    std::cout << "sampled " << count << " latents of dim " << dim << " into " << out << "\n";
    return 0;
}

int cmd_metrics(const std::string& a_path, const std::string& b_path,
                std::optional<double> peak, std::optional<double> range, int scales,
                const std::string& out) {
    const qmri::Volume a = qmri::read_pvol(a_path);
    const qmri::Volume b = qmri::read_pvol(b_path);
    const double v_mse = qmri::metrics::mse(a, b);
    const double v_mae = qmri::metrics::mae(a, b);
    const double v_psnr = qmri::metrics::psnr(a, b, peak);

    std::optional<double> v_msssim;
    if (a.channels() == 1 && a.nz() == 1) {
        qmri::metrics::MsSsimConfig config;
        config.scales = scales;
        config.dynamic_range = range;
        v_msssim = qmri::metrics::ms_ssim(a, b, config);
    }

    std::ostringstream report;
    report.precision(9);
    report << "MSE=" << v_mse << "\nMAE=" << v_mae << "\nPSNR=" << v_psnr << "\n";
    if (v_msssim) report << "MS-SSIM=" << *v_msssim << "\n";
    std::cout << report.str();
    if (!out.empty()) {
        std::ostringstream csv;
        csv.precision(9);
        csv << "metric,value\nmse," << v_mse << "\nmae," << v_mae << "\npsnr," << v_psnr << "\n";
        if (v_msssim) csv << "ms_ssim," << *v_msssim << "\n";
        write_text(out, csv.str());
    }
    return 0;
}

int cmd_validate(const std::string& props_path, const std::string& ref_path,
                 const std::string& out, const std::string& hist_prefix, int bins,
                 double mask_pd_min, double clip) {
    const qmri::PropertyMap props = qmri::PropertyMap::from_volume(qmri::read_pvol(props_path));
    const auto reference = qmri::metrics::load_reference_medians(ref_path);

    qmri::metrics::ValidateConfig config;
    config.hist_bins = bins;
    config.mask_pd_min = mask_pd_min;
    config.clip_percentile = clip;
    const auto report = qmri::metrics::validate_properties(props, reference, config);

    write_text(out, report.to_csv());
    if (!hist_prefix.empty()) {
        write_text(hist_prefix + "_t1.csv", qmri::metrics::histogram_csv(report.hist_t1));
        write_text(hist_prefix + "_t2.csv", qmri::metrics::histogram_csv(report.hist_t2));
    }
    std::cout << "median T1 = " << report.median_t1 << " s, median T2 = " << report.median_t2
              << " s; wrote " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Physics-based MRI synthesis and quantitative property mapping"};
    app.require_subcommand(1);

    // phantom
    auto* phantom = app.add_subcommand("phantom", "Rasterize a tissue-property phantom");
    std::string ph_preset = "brain2d", ph_spec, ph_dims, ph_out;
    phantom->add_option("--preset", ph_preset, "Built-in preset (brain2d)");
    phantom->add_option("--spec", ph_spec, "Phantom spec JSON file");
    phantom->add_option("--dims", ph_dims, "Grid dims NXxNY (default 224x160)");
    phantom->add_option("--out", ph_out, "Output .pvol")->required();

    // synth
    auto* synth = app.add_subcommand("synth", "Synthesize a contrast from a property map");
    std::string sy_props, sy_seq, sy_out;
    double sy_te = 0, sy_tr = 0, sy_noise = 0.0;
    std::optional<double> sy_ti;
    std::uint64_t sy_seed = 0;
    bool sy_mag = false;
    synth->add_option("--props", sy_props, "Input property map .pvol")->required();
    synth->add_option("--seq", sy_seq, "mprage|se|flair")->required();
    synth->add_option("--te", sy_te, "Echo time, seconds")->required();
    synth->add_option("--tr", sy_tr, "Repetition time, seconds")->required();
    synth->add_option("--ti", sy_ti, "Inversion time, seconds (mprage/flair)");
    synth->add_option("--noise-sigma", sy_noise, "Additive Gaussian noise sigma");
    synth->add_option("--seed", sy_seed, "Noise seed");
    synth->add_flag("--magnitude", sy_mag, "Return |signal|");
    synth->add_option("--out", sy_out, "Output .pvol")->required();

    // fit
    auto* fit = app.add_subcommand("fit", "MAP-fit (PD, T1, T2) from contrasts");
    std::vector<std::string> ft_inputs;
    std::string ft_meta, ft_out;
    double ft_lambda = 1e-2;
    int ft_threads = 0;
    bool ft_strict = false;
    fit->add_option("--inputs", ft_inputs, "Bindings path:seq,te,tr[,ti] (seconds)");
    fit->add_option("--meta", ft_meta, "JSON list of {path,seq,te,tr[,ti]}");
    fit->add_option("--lambda", ft_lambda, "Prior weight on (o_T1, o_T2)");
    fit->add_option("--threads", ft_threads, "Worker count (0 = all)");
    fit->add_flag("--strict", ft_strict, "Exit 3 unless every voxel converged");
    fit->add_option("--out", ft_out, "Output property map .pvol")->required();

    // fuse
    auto* fuse = app.add_subcommand("fuse", "Product-of-experts fusion of .gauss factors");
    std::vector<std::string> fu_inputs;
    std::string fu_keep, fu_out;
    std::optional<double> fu_drop;
    std::uint64_t fu_seed = 0;
    bool fu_prior = false;
    fuse->add_option("inputs", fu_inputs, "Input .gauss files")->required();
    fuse->add_option("--keep", fu_keep, "Comma mask, e.g. 1,0,1");
    fuse->add_option("--drop-prob", fu_drop, "Random drop probability");
    fuse->add_option("--seed", fu_seed, "Drop seed");
    fuse->add_flag("--with-prior-expert", fu_prior, "Multiply in a standard-normal expert");
    fuse->add_option("--out", fu_out, "Output .gauss")->required();

    // diffuse train | sample
    auto* diffuse = app.add_subcommand("diffuse", "Latent diffusion at desk scale");
    diffuse->require_subcommand(1);
    auto* train = diffuse->add_subcommand("train", "Train an eps-prediction denoiser");
    std::string dt_data, dt_hidden = "64,64", dt_out;
    int dt_epochs = 100, dt_batch = 16, dt_T = 1000;
    double dt_lr = 1e-3, dt_b0 = 1e-4, dt_b1 = 2e-2;
    std::uint64_t dt_seed = 0;
    train->add_option("--data", dt_data, "Latent dataset .latn")->required();
    train->add_option("--epochs", dt_epochs, "Training epochs");
    train->add_option("--batch", dt_batch, "Batch size");
    train->add_option("--lr", dt_lr, "Learning rate");
    train->add_option("--timesteps", dt_T, "Diffusion timesteps T");
    train->add_option("--beta-start", dt_b0, "Schedule beta_1");
    train->add_option("--beta-end", dt_b1, "Schedule beta_T");
    train->add_option("--hidden", dt_hidden, "Hidden widths, e.g. 64,64");
    train->add_option("--seed", dt_seed, "Training seed");
    train->add_option("--out", dt_out, "Output model .mlp")->required();

    auto* sample = diffuse->add_subcommand("sample", "Ancestral sampling from a model");
    std::string ds_model, ds_out;
    int ds_n = 16, ds_T = 1000;
    double ds_b0 = 1e-4, ds_b1 = 2e-2;
    std::uint64_t ds_seed = 0;
    sample->add_option("--model", ds_model, "Model .mlp")->required();
    sample->add_option("--n", ds_n, "Sample count");
    sample->add_option("--timesteps", ds_T, "Diffusion timesteps T");
    sample->add_option("--beta-start", ds_b0, "Schedule beta_1");
    sample->add_option("--beta-end", ds_b1, "Schedule beta_T");
    sample->add_option("--seed", ds_seed, "Sampling seed");
    sample->add_option("--out", ds_out, "Output .latn")->required();

    // metrics
    auto* metrics_cmd = app.add_subcommand("metrics", "MSE/MAE/PSNR/MS-SSIM between volumes");
    std::string mt_a, mt_b, mt_out;
    std::optional<double> mt_peak, mt_range;
    int mt_scales = 5;
    metrics_cmd->add_option("--a", mt_a, "Reference .pvol")->required();
    metrics_cmd->add_option("--b", mt_b, "Test .pvol")->required();
    metrics_cmd->add_option("--peak", mt_peak, "PSNR peak override");
    metrics_cmd->add_option("--range", mt_range, "MS-SSIM dynamic range override");
    metrics_cmd->add_option("--scales", mt_scales, "MS-SSIM scales (1..5)");
    metrics_cmd->add_option("--out", mt_out, "Optional CSV output");

    // validate
    auto* validate = app.add_subcommand("validate", "Check property medians vs references");
    std::string vd_props, vd_ref, vd_out, vd_hist;
    int vd_bins = 64;
    double vd_mask = 1e-3, vd_clip = 0.95;
    validate->add_option("--props", vd_props, "Property map .pvol")->required();
    validate->add_option("--reference", vd_ref, "Reference medians JSON")->required();
    validate->add_option("--out", vd_out, "Report CSV")->required();
    validate->add_option("--hist-prefix", vd_hist, "Histogram CSV prefix");
    validate->add_option("--bins", vd_bins, "Histogram bins");
    validate->add_option("--mask-pd-min", vd_mask, "Background mask threshold on PD");
    validate->add_option("--clip", vd_clip, "Histogram clip percentile");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (phantom->parsed()) return cmd_phantom(ph_preset, ph_spec, ph_dims, ph_out);
        if (synth->parsed())
            return cmd_synth(sy_props, sy_seq, sy_te, sy_tr, sy_ti, sy_noise, sy_seed, sy_mag,
                             sy_out);
        if (fit->parsed()) return cmd_fit(ft_inputs, ft_meta, ft_lambda, ft_threads, ft_strict, ft_out);
        if (fuse->parsed()) return cmd_fuse(fu_inputs, fu_keep, fu_drop, fu_seed, fu_prior, fu_out);
        if (diffuse->parsed()) {
            if (train->parsed())
                return cmd_diffuse_train(dt_data, dt_epochs, dt_batch, dt_lr, dt_T, dt_b0, dt_b1,
                                         dt_hidden, dt_seed, dt_out);
            return cmd_diffuse_sample(ds_model, ds_n, ds_T, ds_b0, ds_b1, ds_seed, ds_out);
        }
        if (metrics_cmd->parsed())
            return cmd_metrics(mt_a, mt_b, mt_peak, mt_range, mt_scales, mt_out);
        if (validate->parsed())
            return cmd_validate(vd_props, vd_ref, vd_out, vd_hist, vd_bins, vd_mask, vd_clip);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const RuntimeFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return 0;
}

// Times the OpenMP kernels against their serial reference twins.
//
//   ./bench_kernels [--repeat N]

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "qmri/reference.hpp"

using namespace qmri;

namespace {

double time_best(const std::function<void()>& fn, int repeat) {
    double best = 1e300;
    for (int i = 0; i < repeat; ++i) {
        const auto start = std::chrono::steady_clock::now();
        fn();
        const double s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        best = std::min(best, s);
    }
    return best;
}

void report(const char* name, double serial, double parallel) {
    std::printf("%-22s serial %8.3f ms   parallel %8.3f ms   speedup %.2fx\n", name,
                serial * 1e3, parallel * 1e3, serial / parallel);
}

} // namespace

int main(int argc, char** argv) {
    int repeat = 3;
    for (int i = 1; i < argc; ++i)
        if (std::strcmp(argv[i], "--repeat") == 0 && i + 1 < argc) repeat = std::atoi(argv[++i]);

#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP; both columns run serially\n");
#endif

    const PropertyMap props = qmap::make_phantom(qmap::brain2d_preset(224, 160));
    const auto flair = AcquisitionParams::flair(0.1, 9.0, 2.4);

    report("synthesize 224x160",
           time_best([&] { reference::synthesize(props, flair); }, repeat),
           time_best([&] { signal::synthesize(props, flair); }, repeat));

    std::vector<qmap::ContrastImage> images;
    for (const auto& p :
         {AcquisitionParams::mprage(0.01, 2.3, 0.9), AcquisitionParams::spin_echo(0.08, 4.0),
          flair})
        images.push_back({signal::synthesize(props, p), p});
    qmap::FitConfig config;
    config.prior_weight = 1e-4;
    report("fit_volume 224x160",
           time_best([&] { reference::fit_volume(images, config); }, repeat),
           time_best([&] { qmap::fit_volume(images, config); }, repeat));

    const Volume a = signal::synthesize(props, flair);
    const Volume b = signal::synthesize(props, flair, {}, 0.01, 3);
    metrics::MsSsimConfig ms;
    ms.scales = 4;
    report("ms_ssim 224x160",
           time_best([&] { reference::ms_ssim(a, b, ms); }, repeat),
           time_best([&] { metrics::ms_ssim(a, b, ms); }, repeat));

    nn::MlpConfig mc;
    mc.widths = {2 + diffusion::kTimeEmbedDim, 64, 64, 2};
    mc.seed = 1;
    const nn::MlpModel model = nn::MlpModel::init(mc);
    const auto schedule = diffusion::make_schedule(100, 1e-4, 2e-2);
    report("ddpm_sample 256x100",
           time_best([&] { reference::ddpm_sample(model, schedule, 2, 256, 9); }, repeat),
           time_best([&] { diffusion::ddpm_sample(model, schedule, 2, 256, 9); }, repeat));

    return 0;
}

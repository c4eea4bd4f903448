#include "sphir/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "sphir/png_io.hpp"
#include "sphir/rng.hpp"

namespace sphir {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_rgb(const char* op, const Tensor& img) {
    if (img.ndim() != 3 || img.dim(2) != 3)
        throw TensorError(std::string(op) + ": expected H x W x 3 image, got " +
                          shape_str(img.shape()));
}

std::vector<double> clamped(std::vector<double> v) {
    for (auto& x : v)
        x = std::clamp(x, 0.0, 1.0);
    return v;
}

// symmetric (mirror) reflection: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
int reflect(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0)
            i = -i - 1;
        if (i >= n)
            i = 2 * n - 1 - i;
    }
    return i;
}

Tensor blur_with_kernel(const Tensor& img, const std::vector<double>& kernel, int ksize) {
    const int h = img.dim(0), w = img.dim(1);
    const int r = ksize / 2;
    const double* p = img.data().data();
    std::vector<double> out(img.numel(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc[3] = {0, 0, 0};
            for (int ky = 0; ky < ksize; ++ky) {
                const int sy = reflect(y + ky - r, h);
                for (int kx = 0; kx < ksize; ++kx) {
                    const int sx = reflect(x + kx - r, w);
                    const double kv = kernel[ky * ksize + kx];
                    const double* src = p + (static_cast<int64_t>(sy) * w + sx) * 3;
                    acc[0] += kv * src[0];
                    acc[1] += kv * src[1];
                    acc[2] += kv * src[2];
                }
            }
            double* dst = out.data() + (static_cast<int64_t>(y) * w + x) * 3;
            dst[0] = acc[0];
            dst[1] = acc[1];
            dst[2] = acc[2];
        }
    return Tensor::from_data(img.shape(), clamped(std::move(out)));
}

}  // namespace

const char* family_name(Family f) {
    switch (f) {
        case Family::Noise: return "noise";
        case Family::Rain: return "rain";
        case Family::Haze: return "haze";
        case Family::Blur: return "blur";
        case Family::Lowlight: return "lowlight";
    }
    return "?";
}

Family family_from_name(const std::string& name) {
    for (int i = 0; i < kFamilyCount; ++i)
        if (name == family_name(static_cast<Family>(i)))
            return static_cast<Family>(i);
    throw TensorError("unknown degradation family: " + name);
}

// ---------------------------------------------------------------------------
// Clean image synthesis: smooth gradients + a few geometric shapes + value
// noise texture, enough structure for edges and flat regions.

Tensor make_clean_image(int h, int w, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> img(static_cast<size_t>(h) * w * 3);

    double base[3], gx[3], gy[3], rad[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.2, 0.8);
        gx[c] = rng.uniform(-0.4, 0.4);
        gy[c] = rng.uniform(-0.4, 0.4);
        rad[c] = rng.uniform(-0.3, 0.3);
    }
    const double cx = rng.uniform(0.3, 0.7), cy = rng.uniform(0.3, 0.7);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x) / w;
            const double fy = static_cast<double>(y) / h;
            const double dr = std::hypot(fx - cx, fy - cy);
            double* px = img.data() + (static_cast<int64_t>(y) * w + x) * 3;
            for (int c = 0; c < 3; ++c)
                px[c] = base[c] + gx[c] * fx + gy[c] * fy + rad[c] * dr;
        }

    const int shapes = rng.uniform_int(2, 5);
    for (int s = 0; s < shapes; ++s) {
        const int kind = rng.uniform_int(0, 2);
        double color[3];
        for (int c = 0; c < 3; ++c)
            color[c] = rng.uniform(0.0, 1.0);
        const double alpha = rng.uniform(0.5, 1.0);
        if (kind == 0) {  // rectangle
            int x0 = rng.uniform_int(0, w - 2), y0 = rng.uniform_int(0, h - 2);
            int x1 = rng.uniform_int(x0 + 1, w - 1), y1 = rng.uniform_int(y0 + 1, h - 1);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    double* px = img.data() + (static_cast<int64_t>(y) * w + x) * 3;
                    for (int c = 0; c < 3; ++c)
                        px[c] = (1 - alpha) * px[c] + alpha * color[c];
                }
        } else if (kind == 1) {  // disc
            const double ccx = rng.uniform(0.1, 0.9) * w, ccy = rng.uniform(0.1, 0.9) * h;
            const double rr = rng.uniform(0.08, 0.3) * std::min(h, w);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (std::hypot(x - ccx, y - ccy) <= rr) {
                        double* px = img.data() + (static_cast<int64_t>(y) * w + x) * 3;
                        for (int c = 0; c < 3; ++c)
                            px[c] = (1 - alpha) * px[c] + alpha * color[c];
                    }
        } else {  // diagonal stripe
            const double offset = rng.uniform(-1.0, 1.0) * (h + w);
            const double width = rng.uniform(0.05, 0.15) * std::min(h, w);
            const double slope = rng.uniform(-1.5, 1.5);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (std::fabs(y - slope * x - offset) <= width) {
                        double* px = img.data() + (static_cast<int64_t>(y) * w + x) * 3;
                        for (int c = 0; c < 3; ++c)
                            px[c] = (1 - alpha) * px[c] + alpha * color[c];
                    }
        }
    }

    // low-amplitude value-noise texture from a coarse grid
    const int gn = 8;
    std::vector<double> grid(static_cast<size_t>(gn) * gn);
    const double amp = rng.uniform(0.02, 0.06);
    for (auto& g : grid)
        g = rng.uniform(-amp, amp);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double sy = static_cast<double>(y) * (gn - 1) / std::max(h - 1, 1);
            const double sx = static_cast<double>(x) * (gn - 1) / std::max(w - 1, 1);
            const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
            const int y1 = std::min(y0 + 1, gn - 1), x1 = std::min(x0 + 1, gn - 1);
            const double fy = sy - y0, fx = sx - x0;
            const double v = (1 - fy) * ((1 - fx) * grid[y0 * gn + x0] + fx * grid[y0 * gn + x1]) +
                             fy * ((1 - fx) * grid[y1 * gn + x0] + fx * grid[y1 * gn + x1]);
            double* px = img.data() + (static_cast<int64_t>(y) * w + x) * 3;
            for (int c = 0; c < 3; ++c)
                px[c] += v;
        }

    return Tensor::from_data({h, w, 3}, clamped(std::move(img)));
}

Tensor make_noise_field(int h, int w, int c, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(h) * w * c);
    for (auto& x : v)
        x = rng.normal();
    return Tensor::from_data({h, w, c}, std::move(v));
}

// ---------------------------------------------------------------------------
// Generators

Tensor add_gaussian_noise(const Tensor& img, double sigma8, uint64_t seed) {
    check_rgb("add_gaussian_noise", img);
    if (sigma8 < 0.0)
        throw TensorError("add_gaussian_noise: sigma must be non-negative, got " +
                          std::to_string(sigma8));
    if (sigma8 == 0.0)
        return img.clone();
    const double sigma = sigma8 / 255.0;
    Tensor field = make_noise_field(img.dim(0), img.dim(1), 3, seed);
    std::vector<double> out(img.numel());
    const double* p = img.data().data();
    const double* n = field.data().data();
    for (int64_t i = 0; i < img.numel(); ++i)
        out[i] = p[i] + sigma * n[i];
    return Tensor::from_data(img.shape(), clamped(std::move(out)));
}

Tensor add_rain_streaks(const Tensor& img, int count, double length, double angle_deg,
                        double intensity, uint64_t seed) {
    check_rgb("add_rain_streaks", img);
    if (count < 0)
        throw TensorError("add_rain_streaks: count must be >= 0");
    if (count == 0)
        return img.clone();
    const int h = img.dim(0), w = img.dim(1);
    Rng rng(seed);
    std::vector<double> mask(static_cast<size_t>(h) * w, 0.0);
    const double rad = angle_deg * kPi / 180.0;
    const double dx = std::sin(rad), dy = std::cos(rad);  // angle from vertical
    const double cross_sigma = 0.7;
    for (int s = 0; s < count; ++s) {
        const double x0 = rng.uniform(0.0, w);
        const double y0 = rng.uniform(0.0, h);
        const double len = length * rng.uniform(0.7, 1.3);
        const double gain = intensity * rng.uniform(0.6, 1.0);
        const int steps = std::max(2, static_cast<int>(len * 2));
        for (int t = 0; t <= steps; ++t) {
            const double px = x0 + dx * len * t / steps;
            const double py = y0 + dy * len * t / steps;
            const int ix0 = static_cast<int>(std::floor(px)) - 1;
            const int iy0 = static_cast<int>(std::floor(py)) - 1;
            for (int iy = iy0; iy <= iy0 + 2; ++iy) {
                if (iy < 0 || iy >= h)
                    continue;
                for (int ix = ix0; ix <= ix0 + 2; ++ix) {
                    if (ix < 0 || ix >= w)
                        continue;
                    const double d2 = (ix - px) * (ix - px) + (iy - py) * (iy - py);
                    const double v = gain * std::exp(-d2 / (2 * cross_sigma * cross_sigma)) / steps * 4.0;
                    mask[static_cast<size_t>(iy) * w + ix] += v;
                }
            }
        }
    }
    std::vector<double> out(img.numel());
    const double* p = img.data().data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double m = std::min(mask[static_cast<size_t>(y) * w + x], 1.0);
            double* dst = out.data() + (static_cast<int64_t>(y) * w + x) * 3;
            const double* src = p + (static_cast<int64_t>(y) * w + x) * 3;
            for (int c = 0; c < 3; ++c)
                dst[c] = src[c] + m;
        }
    return Tensor::from_data(img.shape(), clamped(std::move(out)));
}

Tensor apply_haze(const Tensor& img, double transmission, double airlight, bool depth_ramp) {
    check_rgb("apply_haze", img);
    if (transmission <= 0.0 || transmission > 1.0)
        throw TensorError("apply_haze: transmission must lie in (0,1], got " +
                          std::to_string(transmission));
    if (airlight < 0.0 || airlight > 1.0)
        throw TensorError("apply_haze: airlight must lie in [0,1]");
    const int h = img.dim(0), w = img.dim(1);
    std::vector<double> out(img.numel());
    const double* p = img.data().data();
    for (int y = 0; y < h; ++y) {
        // optional vertical ramp: clear at the bottom, haziest at the top
        double t = transmission;
        if (depth_ramp && h > 1)
            t = transmission + (1.0 - transmission) * (static_cast<double>(y) / (h - 1));
        for (int x = 0; x < w; ++x) {
            double* dst = out.data() + (static_cast<int64_t>(y) * w + x) * 3;
            const double* src = p + (static_cast<int64_t>(y) * w + x) * 3;
            for (int c = 0; c < 3; ++c)
                dst[c] = t * src[c] + (1.0 - t) * airlight;
        }
    }
    return Tensor::from_data(img.shape(), clamped(std::move(out)));
}

Tensor apply_blur(const Tensor& img, int kernel_size, double gauss_sigma) {
    check_rgb("apply_blur", img);
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw TensorError("apply_blur: kernel size must be odd and positive, got " +
                          std::to_string(kernel_size));
    if (kernel_size == 1)
        return img.clone();
    const int r = kernel_size / 2;
    std::vector<double> kernel(static_cast<size_t>(kernel_size) * kernel_size);
    double sum = 0.0;
    for (int y = 0; y < kernel_size; ++y)
        for (int x = 0; x < kernel_size; ++x) {
            const double d2 = (y - r) * (y - r) + (x - r) * (x - r);
            const double v = std::exp(-d2 / (2 * gauss_sigma * gauss_sigma));
            kernel[y * kernel_size + x] = v;
            sum += v;
        }
    for (auto& k : kernel)
        k /= sum;
    return blur_with_kernel(img, kernel, kernel_size);
}

Tensor apply_blur_motion(const Tensor& img, int kernel_size, double angle_deg) {
    check_rgb("apply_blur_motion", img);
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw TensorError("apply_blur_motion: kernel size must be odd and positive, got " +
                          std::to_string(kernel_size));
    if (kernel_size == 1)
        return img.clone();
    const int r = kernel_size / 2;
    const double rad = angle_deg * kPi / 180.0;
    const double dx = std::cos(rad), dy = std::sin(rad);
    std::vector<double> kernel(static_cast<size_t>(kernel_size) * kernel_size, 0.0);
    double sum = 0.0;
    const int steps = kernel_size * 4;
    for (int t = -steps; t <= steps; ++t) {
        const double px = r + dx * r * t / steps;
        const double py = r + dy * r * t / steps;
        const int ix = static_cast<int>(std::lround(px));
        const int iy = static_cast<int>(std::lround(py));
        if (ix >= 0 && ix < kernel_size && iy >= 0 && iy < kernel_size) {
            kernel[iy * kernel_size + ix] += 1.0;
            sum += 1.0;
        }
    }
    for (auto& k : kernel)
        k /= sum;
    return blur_with_kernel(img, kernel, kernel_size);
}

Tensor darken(const Tensor& img, double gamma, double gain, double read_noise_sigma8,
              uint64_t seed) {
    check_rgb("darken", img);
    if (gamma < 1.0)
        throw TensorError("darken: gamma must be >= 1");
    if (gain <= 0.0 || gain > 1.0)
        throw TensorError("darken: gain must lie in (0,1]");
    std::vector<double> out(img.numel());
    const double* p = img.data().data();
    for (int64_t i = 0; i < img.numel(); ++i)
        out[i] = gain * std::pow(p[i], gamma);
    if (read_noise_sigma8 > 0.0) {
        Tensor field = make_noise_field(img.dim(0), img.dim(1), 3, seed);
        const double sigma = read_noise_sigma8 / 255.0;
        const double* n = field.data().data();
        for (int64_t i = 0; i < img.numel(); ++i)
            out[i] += sigma * n[i];
    }
    return Tensor::from_data(img.shape(), clamped(std::move(out)));
}

Tensor apply_degradation(const Tensor& img, Family f, const nlohmann::json& params,
                         uint64_t seed) {
    switch (f) {
        case Family::Noise:
            return add_gaussian_noise(img, params.at("sigma").get<double>(), seed);
        case Family::Rain:
            return add_rain_streaks(img, params.at("count").get<int>(),
                                    params.at("length").get<double>(),
                                    params.at("angle").get<double>(),
                                    params.at("intensity").get<double>(), seed);
        case Family::Haze:
            return apply_haze(img, params.at("t").get<double>(), params.at("airlight").get<double>(),
                              params.value("depth_ramp", false));
        case Family::Blur:
            if (params.value("motion", false))
                return apply_blur_motion(img, params.at("kernel").get<int>(),
                                         params.at("angle").get<double>());
            return apply_blur(img, params.at("kernel").get<int>(), params.at("sigma").get<double>());
        case Family::Lowlight:
            return darken(img, params.at("gamma").get<double>(), params.at("gain").get<double>(),
                          params.value("read_noise", 0.0), seed);
    }
    throw TensorError("apply_degradation: bad family");
}

Tensor apply_composite(const Tensor& img,
                       const std::vector<std::pair<Family, nlohmann::json>>& stages,
                       uint64_t seed) {
    Tensor out = img.clone();
    uint64_t stage_idx = 0;
    for (const auto& [family, params] : stages)
        out = apply_degradation(out, family, params,
                                Rng::stream(seed, "composite", stage_idx++).next_u64());
    return out;
}

// ---------------------------------------------------------------------------
// Dataset

nlohmann::json SynthConfig::to_json() const {
    nlohmann::json j;
    j["image_size"] = image_size;
    j["patch_size"] = patch_size;
    j["train_per_family"] = train_per_family;
    j["test_per_family"] = test_per_family;
    j["seed"] = seed;
    std::vector<std::string> fams;
    for (Family f : families)
        fams.push_back(family_name(f));
    j["families"] = fams;
    j["noise_sigmas"] = noise_sigmas;
    j["rain"] = {{"count_min", rain_count_min}, {"count_max", rain_count_max},
                 {"length_min", rain_length_min}, {"length_max", rain_length_max},
                 {"angle_max_deg", rain_angle_max_deg},
                 {"intensity_min", rain_intensity_min}, {"intensity_max", rain_intensity_max}};
    j["haze"] = {{"t_min", haze_t_min}, {"t_max", haze_t_max},
                 {"airlight_min", haze_airlight_min}, {"airlight_max", haze_airlight_max}};
    j["blur"] = {{"kernel", blur_kernel}, {"sigma_min", blur_sigma_min}, {"sigma_max", blur_sigma_max}};
    j["lowlight"] = {{"gamma_min", low_gamma_min}, {"gamma_max", low_gamma_max},
                     {"gain_min", low_gain_min}, {"gain_max", low_gain_max},
                     {"read_noise", low_read_noise}};
    if (!clean_dir.empty())
        j["clean_dir"] = clean_dir;
    return j;
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.train_per_family = j.value("train_per_family", c.train_per_family);
    c.test_per_family = j.value("test_per_family", c.test_per_family);
    c.seed = j.value("seed", c.seed);
    if (j.contains("families")) {
        c.families.clear();
        for (const auto& name : j["families"])
            c.families.push_back(family_from_name(name.get<std::string>()));
    }
    if (j.contains("noise_sigmas"))
        c.noise_sigmas = j["noise_sigmas"].get<std::vector<double>>();
    if (j.contains("rain")) {
        const auto& r = j["rain"];
        c.rain_count_min = r.value("count_min", c.rain_count_min);
        c.rain_count_max = r.value("count_max", c.rain_count_max);
        c.rain_length_min = r.value("length_min", c.rain_length_min);
        c.rain_length_max = r.value("length_max", c.rain_length_max);
        c.rain_angle_max_deg = r.value("angle_max_deg", c.rain_angle_max_deg);
        c.rain_intensity_min = r.value("intensity_min", c.rain_intensity_min);
        c.rain_intensity_max = r.value("intensity_max", c.rain_intensity_max);
    }
    if (j.contains("haze")) {
        const auto& hz = j["haze"];
        c.haze_t_min = hz.value("t_min", c.haze_t_min);
        c.haze_t_max = hz.value("t_max", c.haze_t_max);
        c.haze_airlight_min = hz.value("airlight_min", c.haze_airlight_min);
        c.haze_airlight_max = hz.value("airlight_max", c.haze_airlight_max);
    }
    if (j.contains("blur")) {
        const auto& b = j["blur"];
        c.blur_kernel = b.value("kernel", c.blur_kernel);
        c.blur_sigma_min = b.value("sigma_min", c.blur_sigma_min);
        c.blur_sigma_max = b.value("sigma_max", c.blur_sigma_max);
    }
    if (j.contains("lowlight")) {
        const auto& l = j["lowlight"];
        c.low_gamma_min = l.value("gamma_min", c.low_gamma_min);
        c.low_gamma_max = l.value("gamma_max", c.low_gamma_max);
        c.low_gain_min = l.value("gain_min", c.low_gain_min);
        c.low_gain_max = l.value("gain_max", c.low_gain_max);
        c.low_read_noise = l.value("read_noise", c.low_read_noise);
    }
    c.clean_dir = j.value("clean_dir", std::string());
    return c;
}

namespace {

nlohmann::json draw_params(const SynthConfig& cfg, Family f, Rng& rng) {
    nlohmann::json p;
    switch (f) {
        case Family::Noise: {
            const size_t k = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(cfg.noise_sigmas.size()) - 1));
            p["sigma"] = cfg.noise_sigmas[k];
            break;
        }
        case Family::Rain:
            p["count"] = rng.uniform_int(cfg.rain_count_min, cfg.rain_count_max);
            p["length"] = rng.uniform(cfg.rain_length_min, cfg.rain_length_max);
            p["angle"] = rng.uniform(-cfg.rain_angle_max_deg, cfg.rain_angle_max_deg);
            p["intensity"] = rng.uniform(cfg.rain_intensity_min, cfg.rain_intensity_max);
            break;
        case Family::Haze:
            p["t"] = rng.uniform(cfg.haze_t_min, cfg.haze_t_max);
            p["airlight"] = rng.uniform(cfg.haze_airlight_min, cfg.haze_airlight_max);
            p["depth_ramp"] = false;
            break;
        case Family::Blur:
            p["kernel"] = cfg.blur_kernel;
            p["sigma"] = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
            p["motion"] = false;
            break;
        case Family::Lowlight:
            p["gamma"] = rng.uniform(cfg.low_gamma_min, cfg.low_gamma_max);
            p["gain"] = rng.uniform(cfg.low_gain_min, cfg.low_gain_max);
            p["read_noise"] = cfg.low_read_noise;
            break;
    }
    return p;
}

std::vector<std::string> list_pngs(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace

Dataset Dataset::build(const SynthConfig& cfg) {
    if (cfg.families.empty())
        throw TensorError("Dataset::build: no degradation families configured");
    if (cfg.patch_size > cfg.image_size)
        throw TensorError("Dataset::build: patch size exceeds image size");
    Dataset ds;
    ds.cfg_ = cfg;
    for (Family f : cfg.families) {
        for (int split = 0; split < 2; ++split) {
            const bool test = split == 1;
            const int n = test ? cfg.test_per_family : cfg.train_per_family;
            for (int i = 0; i < n; ++i) {
                SampleMeta meta;
                meta.label = f;
                meta.test = test;
                meta.id = std::string(family_name(f)) + "-" + (test ? "test" : "train") + "-" +
                          std::to_string(i);
                Rng prng = Rng::stream(cfg.seed, meta.id + "/params");
                meta.params = draw_params(cfg, f, prng);
                (test ? ds.test_ : ds.train_).push_back(std::move(meta));
            }
        }
    }
    return ds;
}

ImageSample Dataset::materialize(const SampleMeta& meta) const {
    Tensor clean;
    if (!cfg_.clean_dir.empty()) {
        static thread_local std::vector<std::string> pool;
        static thread_local std::string pool_dir;
        if (pool_dir != cfg_.clean_dir) {
            pool = list_pngs(cfg_.clean_dir);
            pool_dir = cfg_.clean_dir;
        }
        if (!pool.empty()) {
            Rng rng = Rng::stream(cfg_.seed, meta.id + "/pick");
            const auto& path = pool[rng.next_u64() % pool.size()];
            Tensor full = read_png(path);
            if (full.dim(0) < cfg_.image_size || full.dim(1) < cfg_.image_size)
                throw TensorError("clean image " + path + " smaller than configured image size");
            const int oy = (full.dim(0) - cfg_.image_size) / 2;
            const int ox = (full.dim(1) - cfg_.image_size) / 2;
            clean = slice(slice(full, 0, oy, cfg_.image_size), 1, ox, cfg_.image_size);
        }
    }
    if (!clean.defined()) {
        Rng rng = Rng::stream(cfg_.seed, meta.id + "/clean");
        clean = make_clean_image(cfg_.image_size, cfg_.image_size, rng.next_u64());
    }
    Rng drng = Rng::stream(cfg_.seed, meta.id + "/degrade");
    Tensor degraded = apply_degradation(clean, meta.label, meta.params, drng.next_u64());

    ImageSample s;
    s.clean = std::move(clean);
    s.degraded = std::move(degraded);
    s.label = meta.label;
    s.params = meta.params;
    s.id = meta.id;
    return s;
}

nlohmann::json Dataset::manifest() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["config"] = cfg_.to_json();
    nlohmann::json samples = nlohmann::json::array();
    auto push = [&](const SampleMeta& m) {
        samples.push_back({{"id", m.id},
                           {"label", family_name(m.label)},
                           {"split", m.test ? "test" : "train"},
                           {"params", m.params}});
    };
    for (const auto& m : train_)
        push(m);
    for (const auto& m : test_)
        push(m);
    j["samples"] = std::move(samples);
    return j;
}

std::vector<BatchItem> sample_batch(const Dataset& data, bool test_split, int batch_size,
                                    int patch_size, uint64_t seed) {
    const auto& metas = test_split ? data.test() : data.train();
    if (metas.empty())
        throw TensorError("sample_batch: requested split is empty");
    if (patch_size > data.config().image_size)
        throw TensorError("sample_batch: patch size exceeds image size");

    // index metas per family once per call
    const auto& families = data.config().families;
    std::vector<std::vector<size_t>> by_family(kFamilyCount);
    for (size_t i = 0; i < metas.size(); ++i)
        by_family[static_cast<int>(metas[i].label)].push_back(i);

    // stratified family slots: every family appears floor(B/F) or ceil(B/F)
    // times, the remainder assignment shuffled by the batch seed
    Rng rng(seed);
    std::vector<Family> slots;
    size_t fi = 0;
    while (slots.size() < static_cast<size_t>(batch_size)) {
        slots.push_back(families[fi % families.size()]);
        ++fi;
    }
    for (size_t i = slots.size(); i > 1; --i)
        std::swap(slots[i - 1], slots[rng.uniform_int(0, static_cast<int>(i) - 1)]);

    const int img = data.config().image_size;
    std::vector<BatchItem> batch;
    batch.reserve(batch_size);
    for (int b = 0; b < batch_size; ++b) {
        const auto& pool = by_family[static_cast<int>(slots[b])];
        if (pool.empty())
            throw TensorError(std::string("sample_batch: family ") + family_name(slots[b]) +
                              " missing from split");
        const auto& meta = metas[pool[rng.next_u64() % pool.size()]];
        ImageSample s = data.materialize(meta);

        const int oy = rng.uniform_int(0, img - patch_size);
        const int ox = rng.uniform_int(0, img - patch_size);
        const bool flip = rng.uniform() < 0.5;
        auto crop = [&](const Tensor& t) {
            Tensor c = slice(slice(t, 0, oy, patch_size), 1, ox, patch_size);
            if (!flip)
                return c;
            std::vector<double> v(c.numel());
            const double* p = c.data().data();
            for (int y = 0; y < patch_size; ++y)
                for (int x = 0; x < patch_size; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        v[(static_cast<int64_t>(y) * patch_size + x) * 3 + ch] =
                            p[(static_cast<int64_t>(y) * patch_size + (patch_size - 1 - x)) * 3 + ch];
            return Tensor::from_data(c.shape(), std::move(v));
        };
        BatchItem item;
        item.clean = crop(s.clean);
        item.degraded = crop(s.degraded);
        item.label = s.label;
        item.id = s.id;
        batch.push_back(std::move(item));
    }
    return batch;
}

}  // namespace sphir

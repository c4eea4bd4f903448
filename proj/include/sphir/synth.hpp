#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sphir/tensor.hpp"

namespace sphir {

enum class Family { Noise = 0, Rain, Haze, Blur, Lowlight };

const char* family_name(Family f);
Family family_from_name(const std::string& name);
constexpr int kFamilyCount = 5;

// ---------------------------------------------------------------------------
// Degradation generators. All of them clamp to [0,1], are bit-deterministic
// under a fixed seed, and reduce to the identity at their neutral parameters.

Tensor make_clean_image(int h, int w, uint64_t seed);

/// Unit-variance gaussian field, one draw per pixel and channel. Shared by
/// noise/darken and by tests that need pre-clamp statistics.
Tensor make_noise_field(int h, int w, int c, uint64_t seed);

Tensor add_gaussian_noise(const Tensor& img, double sigma8, uint64_t seed);
Tensor add_rain_streaks(const Tensor& img, int count, double length, double angle_deg,
                        double intensity, uint64_t seed);
Tensor apply_haze(const Tensor& img, double transmission, double airlight,
                  bool depth_ramp = false);
Tensor apply_blur(const Tensor& img, int kernel_size, double gauss_sigma);
Tensor apply_blur_motion(const Tensor& img, int kernel_size, double angle_deg);
Tensor darken(const Tensor& img, double gamma, double gain, double read_noise_sigma8,
              uint64_t seed);

/// Chained generators for composite-degradation evaluation. Each entry is a
/// serialized parameter record of the same shape stored in sample metadata.
Tensor apply_degradation(const Tensor& img, Family f, const nlohmann::json& params,
                         uint64_t seed);
Tensor apply_composite(const Tensor& img, const std::vector<std::pair<Family, nlohmann::json>>& stages,
                       uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset

struct SynthConfig {
    int image_size = 64;
    int patch_size = 48;
    int train_per_family = 200;
    int test_per_family = 50;
    uint64_t seed = 1234;
    std::vector<Family> families{Family::Noise, Family::Rain, Family::Haze, Family::Blur,
                                 Family::Lowlight};
    std::vector<double> noise_sigmas{15.0, 25.0, 50.0};
    int rain_count_min = 20, rain_count_max = 60;
    double rain_length_min = 8.0, rain_length_max = 16.0;
    double rain_angle_max_deg = 30.0;
    double rain_intensity_min = 0.2, rain_intensity_max = 0.5;
    double haze_t_min = 0.4, haze_t_max = 0.8;
    double haze_airlight_min = 0.7, haze_airlight_max = 1.0;
    int blur_kernel = 9;
    double blur_sigma_min = 1.0, blur_sigma_max = 2.5;
    double low_gamma_min = 1.8, low_gamma_max = 2.6;
    double low_gain_min = 0.4, low_gain_max = 0.7;
    double low_read_noise = 2.0;
    std::string clean_dir;  // optional user-supplied PNG pool

    nlohmann::json to_json() const;
    static SynthConfig from_json(const nlohmann::json& j);
};

struct SampleMeta {
    std::string id;
    Family label = Family::Noise;
    bool test = false;
    nlohmann::json params;
};

struct ImageSample {
    Tensor clean;
    Tensor degraded;
    Family label = Family::Noise;
    nlohmann::json params;
    std::string id;
};

class Dataset {
public:
    static Dataset build(const SynthConfig& cfg);

    const SynthConfig& config() const { return cfg_; }
    const std::vector<SampleMeta>& train() const { return train_; }
    const std::vector<SampleMeta>& test() const { return test_; }

    /// Regenerates the sample from its metadata; bit-exact for a fixed
    /// (id, seed) regardless of when or how often it is called.
    ImageSample materialize(const SampleMeta& meta) const;

    nlohmann::json manifest() const;

private:
    SynthConfig cfg_;
    std::vector<SampleMeta> train_;
    std::vector<SampleMeta> test_;
};

struct BatchItem {
    Tensor clean;
    Tensor degraded;
    Family label = Family::Noise;
    std::string id;
};

/// Uniform-over-families batch with synchronized random crop + horizontal
/// flip on the clean/degraded pair. Batch composition and augmentation depend
/// only on (dataset seed, batch seed).
std::vector<BatchItem> sample_batch(const Dataset& data, bool test_split, int batch_size,
                                    int patch_size, uint64_t seed);

}  // namespace sphir

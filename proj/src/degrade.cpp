// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/degrade.hpp"

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include <jpeglib.h>

#include <opencv2/imgproc.hpp>

#include "cv_convert.hpp"
#include "rass/errors.hpp"
#include "rass/rng.hpp"

namespace rass::degrade {

NLOHMANN_JSON_SERIALIZE_ENUM(StageKind, {{StageKind::Blur, "blur"},
                                         {StageKind::Resize, "resize"},
                                         {StageKind::Noise, "noise"},
                                         {StageKind::Jpeg, "jpeg"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Interp, {{Interp::Nearest, "nearest"},
                                      {Interp::Bilinear, "bilinear"},
                                      {Interp::Bicubic, "bicubic"}})

void to_json(nlohmann::json& j, const StageParams& s) {
  j = nlohmann::json{{"kind", s.kind}};
  switch (s.kind) {
    case StageKind::Blur: j["sigma"] = s.sigma; break;
    case StageKind::Noise: j["sigma"] = s.sigma; break;
    case StageKind::Resize:
      j["scale"] = s.scale;
      j["interp"] = s.interp;
      j["final"] = s.final_resize;
      break;
    case StageKind::Jpeg: j["quality"] = s.quality; break;
  }
}

void from_json(const nlohmann::json& j, StageParams& s) {
  s = StageParams{};
  j.at("kind").get_to(s.kind);
  s.sigma = j.value("sigma", 0.0);
  s.scale = j.value("scale", 1.0);
  s.interp = j.value("interp", Interp::Bilinear);
  s.quality = j.value("quality", 95);
  s.final_resize = j.value("final", false);
}

void to_json(nlohmann::json& j, const DegradationRecipe& r) {
  j = nlohmann::json{{"seed", r.seed}, {"stages", r.stages}};
}

void from_json(const nlohmann::json& j, DegradationRecipe& r) {
  j.at("seed").get_to(r.seed);
  j.at("stages").get_to(r.stages);
}

void to_json(nlohmann::json& j, const DegradeConfig& c) {
  j = nlohmann::json{{"blur_sigma", {c.blur_sigma.min, c.blur_sigma.max}},
                     {"resize_scale", {c.resize_scale.min, c.resize_scale.max}},
                     {"noise_sigma", {c.noise_sigma.min, c.noise_sigma.max}},
                     {"jpeg_quality", {c.jpeg_quality.min, c.jpeg_quality.max}},
                     {"rounds", c.rounds},
                     {"scale", c.scale}};
}

void from_json(const nlohmann::json& j, DegradeConfig& c) {
  auto range = [&](const char* key, Range& r) {
    if (j.contains(key)) {
      const auto& v = j.at(key);
      r.min = v.at(0).get<double>();
      r.max = v.at(1).get<double>();
    }
  };
  range("blur_sigma", c.blur_sigma);
  range("resize_scale", c.resize_scale);
  range("noise_sigma", c.noise_sigma);
  range("jpeg_quality", c.jpeg_quality);
  c.rounds = j.value("rounds", c.rounds);
  c.scale = j.value("scale", c.scale);
}

void DegradeConfig::validate() const {
  auto check = [](const char* name, const Range& r) {
    if (!(r.min <= r.max)) {
      throw ConfigError(std::string("degrade.") + name,
                        "empty range [" + std::to_string(r.min) + ", " + std::to_string(r.max) + "]");
    }
  };
  check("blur_sigma", blur_sigma);
  check("resize_scale", resize_scale);
  check("noise_sigma", noise_sigma);
  check("jpeg_quality", jpeg_quality);
  if (blur_sigma.min <= 0.0) throw ConfigError("degrade.blur_sigma", "σ must be positive");
  if (resize_scale.min <= 0.0) throw ConfigError("degrade.resize_scale", "scale must be positive");
  if (noise_sigma.min < 0.0) throw ConfigError("degrade.noise_sigma", "σ must be non-negative");
  if (jpeg_quality.min < 1 || jpeg_quality.max > 100) throw ConfigError("degrade.jpeg_quality", "outside [1, 100]");
  if (rounds < 1) throw ConfigError("degrade.rounds", "at least one round required");
  if (scale < 1) throw ConfigError("degrade.scale", "scale must be >= 1");
}

DegradationRecipe sample_recipe(const DegradeConfig& config, std::mt19937_64& rng) {
  config.validate();
  auto uniform = [&rng](const Range& r) { return std::uniform_real_distribution<double>(r.min, r.max)(rng); };
  auto interp = [&rng] { return static_cast<Interp>(std::uniform_int_distribution<int>(0, 2)(rng)); };

  DegradationRecipe recipe;
  recipe.seed = rng();
  for (int round = 0; round < config.rounds; ++round) {
    StageParams blur{.kind = StageKind::Blur, .sigma = uniform(config.blur_sigma)};
    StageParams resize{.kind = StageKind::Resize, .scale = uniform(config.resize_scale)};
    resize.interp = interp();
    StageParams noise{.kind = StageKind::Noise, .sigma = uniform(config.noise_sigma)};
    StageParams jpeg{.kind = StageKind::Jpeg};
    jpeg.quality = std::uniform_int_distribution<int>(static_cast<int>(std::lround(config.jpeg_quality.min)),
                                                      static_cast<int>(std::lround(config.jpeg_quality.max)))(rng);
    recipe.stages.insert(recipe.stages.end(), {blur, resize, noise, jpeg});
  }
  StageParams last{.kind = StageKind::Resize, .scale = 1.0 / config.scale, .final_resize = true};
  last.interp = interp();
  recipe.stages.push_back(last);
  return recipe;
}

DegradationRecipe fixed_recipe(int rounds, double blur_sigma, double resize_scale, double noise_sigma,
                               int jpeg_quality, int scale, std::uint64_t seed) {
  DegradationRecipe recipe;
  recipe.seed = seed;
  for (int round = 0; round < rounds; ++round) {
    recipe.stages.push_back({.kind = StageKind::Blur, .sigma = blur_sigma});
    recipe.stages.push_back({.kind = StageKind::Resize, .scale = resize_scale, .interp = Interp::Bicubic});
    recipe.stages.push_back({.kind = StageKind::Noise, .sigma = noise_sigma});
    recipe.stages.push_back({.kind = StageKind::Jpeg, .quality = jpeg_quality});
  }
  recipe.stages.push_back(
      {.kind = StageKind::Resize, .scale = 1.0 / scale, .interp = Interp::Bicubic, .final_resize = true});
  return recipe;
}

namespace {

int cv_interp(Interp i) {
  switch (i) {
    case Interp::Nearest: return cv::INTER_NEAREST;
    case Interp::Bilinear: return cv::INTER_LINEAR;
    case Interp::Bicubic: return cv::INTER_CUBIC;
  }
  return cv::INTER_LINEAR;
}

void clip01(cv::Mat& m) {
  cv::min(m, 1.0, m);
  cv::max(m, 0.0, m);
}

cv::Mat resize_to(const cv::Mat& m, int h, int w, Interp interp) {
  if (h < 1 || w < 1) {
    throw ValidationError("degradation recipe shrinks image below one pixel (" + std::to_string(h) + "x" +
                          std::to_string(w) + ")");
  }
  cv::Mat out;
  cv::resize(m, out, cv::Size(w, h), 0, 0, cv_interp(interp));
  clip01(out);
  return out;
}

// libjpeg with 4:4:4 sampling; OpenCV's encoder always subsamples chroma.
cv::Mat jpeg_roundtrip(const cv::Mat& rgb, int quality) {
  cv::Mat u8;
  rgb.convertTo(u8, CV_8UC3, 255.0);
  const auto width = static_cast<JDIMENSION>(u8.cols), height = static_cast<JDIMENSION>(u8.rows);

  unsigned char* buf = nullptr;
  unsigned long size = 0;
  jpeg_compress_struct enc{};
  jpeg_error_mgr err{};
  enc.err = jpeg_std_error(&err);
  jpeg_create_compress(&enc);
  jpeg_mem_dest(&enc, &buf, &size);
  enc.image_width = width;
  enc.image_height = height;
  enc.input_components = 3;
  enc.in_color_space = JCS_RGB;
  jpeg_set_defaults(&enc);
  jpeg_set_quality(&enc, quality, TRUE);
  for (int c = 0; c < 3; ++c) enc.comp_info[c].h_samp_factor = enc.comp_info[c].v_samp_factor = 1;
  jpeg_start_compress(&enc, TRUE);
  while (enc.next_scanline < height) {
    JSAMPROW row = u8.ptr<unsigned char>(static_cast<int>(enc.next_scanline));
    jpeg_write_scanlines(&enc, &row, 1);
  }
  jpeg_finish_compress(&enc);
  jpeg_destroy_compress(&enc);

  jpeg_decompress_struct dec{};
  dec.err = jpeg_std_error(&err);
  jpeg_create_decompress(&dec);
  jpeg_mem_src(&dec, buf, size);
  jpeg_read_header(&dec, TRUE);
  dec.out_color_space = JCS_RGB;
  jpeg_start_decompress(&dec);
  cv::Mat decoded(static_cast<int>(dec.output_height), static_cast<int>(dec.output_width), CV_8UC3);
  while (dec.output_scanline < dec.output_height) {
    JSAMPROW row = decoded.ptr<unsigned char>(static_cast<int>(dec.output_scanline));
    jpeg_read_scanlines(&dec, &row, 1);
  }
  jpeg_finish_decompress(&dec);
  jpeg_destroy_decompress(&dec);
  std::free(buf);

  cv::Mat out;
  decoded.convertTo(out, CV_32FC3, 1.0 / 255.0);
  return out;
}

}  // namespace

torch::Tensor apply_recipe(const torch::Tensor& hq, const DegradationRecipe& recipe) {
  if (hq.dim() != 3 || hq.size(0) != 3) throw ValidationError("apply_recipe expects a 3xHxW image");
  cv::Mat img = detail::to_mat(hq);
  clip01(img);
  const int h0 = img.rows, w0 = img.cols;

  for (std::size_t i = 0; i < recipe.stages.size(); ++i) {
    const auto& st = recipe.stages[i];
    switch (st.kind) {
      case StageKind::Blur: {
        const int radius = static_cast<int>(std::ceil(3.0 * st.sigma));
        const int k = 2 * std::max(radius, 1) + 1;
        cv::GaussianBlur(img, img, cv::Size(k, k), st.sigma, st.sigma, cv::BORDER_REFLECT_101);
        break;
      }
      case StageKind::Resize: {
        if (st.final_resize) {
          const double inv = 1.0 / st.scale;
          const int factor = static_cast<int>(std::lround(inv));
          if (std::abs(inv - factor) > 1e-9 || h0 % factor != 0 || w0 % factor != 0) {
            throw ValidationError("HQ size " + std::to_string(h0) + "x" + std::to_string(w0) +
                                  " is not divisible by the target scale");
          }
          img = resize_to(img, h0 / factor, w0 / factor, st.interp);
        } else {
          img = resize_to(img, static_cast<int>(std::lround(img.rows * st.scale)),
                          static_cast<int>(std::lround(img.cols * st.scale)), st.interp);
        }
        break;
      }
      case StageKind::Noise: {
        std::mt19937_64 gen(mix_seed(recipe.seed, i));
        std::normal_distribution<double> normal(0.0, st.sigma);
        auto* p = img.ptr<float>();
        const auto n = static_cast<std::size_t>(img.total() * img.channels());
        for (std::size_t k = 0; k < n; ++k) p[k] = static_cast<float>(p[k] + normal(gen));
        clip01(img);
        break;
      }
      case StageKind::Jpeg: {
        clip01(img);
        img = jpeg_roundtrip(img, st.quality);
        break;
      }
    }
  }
  clip01(img);
  auto out = detail::to_tensor(img);
  return torch::round(out * 255.0f) / 255.0f;
}

torch::Tensor upsample_bicubic(const torch::Tensor& image, int64_t out_h, int64_t out_w) {
  const bool batched = image.dim() == 4;
  auto x = batched ? image : image.unsqueeze(0);
  if (x.size(2) == out_h && x.size(3) == out_w) return image.clone();
  namespace F = torch::nn::functional;
  auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{out_h, out_w})
                                 .mode(torch::kBicubic)
                                 .align_corners(false))
               .clamp(0.0, 1.0);
  return batched ? y : y.squeeze(0);
}

}  // namespace rass::degrade

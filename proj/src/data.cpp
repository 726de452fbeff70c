#include "maos/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <png.h>

#include "maos/errors.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace maos {

namespace {

constexpr int kSupersample = 4;
constexpr double kPi = 3.14159265358979323846;

bool valid_image_size(std::int64_t s) { return s == 32 || s == 64 || s == 128; }

void check_image_size(std::int64_t h, std::int64_t w, const std::string& where) {
  if (h != w) {
    throw IoError(where + ": image " + std::to_string(w) + "x" + std::to_string(h) +
                  " is not square");
  }
  if (!valid_image_size(h)) {
    throw IoError(where + ": side " + std::to_string(h) + " unsupported (expected 32, 64 or 128)");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Cropping
// ---------------------------------------------------------------------------

CropResult random_part_crop(Tape* tape, const Tensor& img, CropSpec& spec) {
  if (img.shape().size() != 4) {
    throw std::invalid_argument("random_part_crop: input must be [N,C,H,W], got " +
                                shape_str(img.shape()));
  }
  const std::int64_t N = img.shape()[0];
  const std::int64_t C = img.shape()[1];
  const std::int64_t H = img.shape()[2];
  const std::int64_t W = img.shape()[3];
  const std::int64_t p = spec.part_size;
  if (p < 1 || p > H || p > W) {
    throw std::invalid_argument("random_part_crop: part size " + std::to_string(p) +
                                " exceeds image " + std::to_string(H) + "x" + std::to_string(W));
  }
  CropResult res;
  res.offsets.reserve(static_cast<std::size_t>(N));
  for (std::int64_t n = 0; n < N; ++n) {
    const std::int64_t r = spec.rng.uniform_int(H - p + 1);
    const std::int64_t c = spec.rng.uniform_int(W - p + 1);
    res.offsets.emplace_back(r, c);
  }
  Tensor out = Tensor::zeros({N, C, p, p});
  for (std::int64_t n = 0; n < N; ++n) {
    const auto [r0, c0] = res.offsets[static_cast<std::size_t>(n)];
    for (std::int64_t c = 0; c < C; ++c) {
      const double* src = img.data() + ((n * C + c) * H + r0) * W + c0;
      double* dst = out.data() + (n * C + c) * p * p;
      for (std::int64_t i = 0; i < p; ++i) {
        std::memcpy(dst + i * p, src + i * W, static_cast<std::size_t>(p) * sizeof(double));
      }
    }
  }
  if (tape && wants_grad(img, tape)) {
    auto id = img.impl();
    auto od = out.impl();
    auto offsets = res.offsets;
    tape->record({img.node()}, out, [id, od, offsets, N, C, H, W, p]() {
      if (id->grad.size() != id->values.size()) id->grad.assign(id->values.size(), 0.0);
      for (std::int64_t n = 0; n < N; ++n) {
        const auto [r0, c0] = offsets[static_cast<std::size_t>(n)];
        for (std::int64_t c = 0; c < C; ++c) {
          double* dst = id->grad.data() + ((n * C + c) * H + r0) * W + c0;
          const double* src = od->grad.data() + (n * C + c) * p * p;
          for (std::int64_t i = 0; i < p; ++i) {
            for (std::int64_t j = 0; j < p; ++j) dst[i * W + j] += src[i * p + j];
          }
        }
      }
    });
  }
  res.crops = out;
  return res;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace {

double sample_replicate(const double* plane, std::int64_t H, std::int64_t W, double y, double x) {
  x = std::min(std::max(x, 0.0), static_cast<double>(W - 1));
  y = std::min(std::max(y, 0.0), static_cast<double>(H - 1));
  const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
  const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
  const std::int64_t x1 = std::min(x0 + 1, W - 1);
  const std::int64_t y1 = std::min(y0 + 1, H - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double a = plane[y0 * W + x0] * (1 - fx) + plane[y0 * W + x1] * fx;
  const double b = plane[y1 * W + x0] * (1 - fx) + plane[y1 * W + x1] * fx;
  return a * (1 - fy) + b * fy;
}

Tensor flip_horizontal(const Tensor& px) {
  const std::int64_t C = px.shape()[0], H = px.shape()[1], W = px.shape()[2];
  Tensor out = Tensor::zeros(px.shape());
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t i = 0; i < H; ++i) {
      const double* src = px.data() + (c * H + i) * W;
      double* dst = out.data() + (c * H + i) * W;
      for (std::int64_t j = 0; j < W; ++j) dst[j] = src[W - 1 - j];
    }
  }
  return out;
}

Tensor rotate_replicate(const Tensor& px, double theta) {
  const std::int64_t C = px.shape()[0], H = px.shape()[1], W = px.shape()[2];
  Tensor out = Tensor::zeros(px.shape());
  const double cy = static_cast<double>(H - 1) / 2.0;
  const double cx = static_cast<double>(W - 1) / 2.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::int64_t c = 0; c < C; ++c) {
    const double* plane = px.data() + c * H * W;
    double* dst = out.data() + c * H * W;
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t j = 0; j < W; ++j) {
        const double dy = static_cast<double>(i) - cy;
        const double dx = static_cast<double>(j) - cx;
        const double sx = cx + ct * dx + st * dy;
        const double sy = cy - st * dx + ct * dy;
        dst[i * W + j] = sample_replicate(plane, H, W, sy, sx);
      }
    }
  }
  return out;
}

Tensor resize_bilinear(const Tensor& px, std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t C = px.shape()[0], H = px.shape()[1], W = px.shape()[2];
  Tensor out = Tensor::zeros({C, out_h, out_w});
  const double sy = out_h > 1 ? static_cast<double>(H - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(W - 1) / static_cast<double>(out_w - 1) : 0.0;
  for (std::int64_t c = 0; c < C; ++c) {
    const double* plane = px.data() + c * H * W;
    double* dst = out.data() + c * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      for (std::int64_t j = 0; j < out_w; ++j) {
        dst[i * out_w + j] = sample_replicate(plane, H, W, sy * static_cast<double>(i),
                                              sx * static_cast<double>(j));
      }
    }
  }
  return out;
}

Tensor center_crop_resize(const Tensor& px, double fraction) {
  const std::int64_t C = px.shape()[0], H = px.shape()[1], W = px.shape()[2];
  const std::int64_t m = static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(H)));
  const std::int64_t r0 = (H - m) / 2;
  const std::int64_t c0 = (W - m) / 2;
  Tensor crop = Tensor::zeros({C, m, m});
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t i = 0; i < m; ++i) {
      std::memcpy(crop.data() + (c * m + i) * m, px.data() + ((c * H + r0 + i) * W + c0),
                  static_cast<std::size_t>(m) * sizeof(double));
    }
  }
  return resize_bilinear(crop, H, W);
}

}  // namespace

ImageSample augment(const ImageSample& img, const AugmentFlags& flags, Rng& rng) {
  Tensor px = img.pixels.detach();
  if (flags.flip && rng.bernoulli(0.5)) px = flip_horizontal(px);
  if (flags.rotate) {
    const double theta = rng.uniform(-10.0, 10.0) * kPi / 180.0;
    px = rotate_replicate(px, theta);
  }
  if (flags.center_crop) px = center_crop_resize(px, 7.0 / 8.0);
  return ImageSample{px, img.domain, img.id};
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

void BatchSampler::restore(std::vector<std::int64_t> perm, std::int64_t pos) {
  perm_ = std::move(perm);
  pos_ = pos;
}

BatchSampler::Batch BatchSampler::next(const OneShotDataset& ds, std::int64_t batch_size,
                                       Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("one_shot_batch: batch_size must be >= 1");
  if (ds.source_images.empty()) throw std::invalid_argument("one_shot_batch: no source images");
  const std::int64_t n = static_cast<std::int64_t>(ds.source_images.size());
  const std::int64_t H = ds.source_images[0].pixels.shape()[1];
  const std::int64_t W = ds.source_images[0].pixels.shape()[2];

  Batch b;
  b.source = Tensor::zeros({batch_size, 3, H, W});
  b.target = Tensor::zeros({batch_size, 3, H, W});
  for (std::int64_t s = 0; s < batch_size; ++s) {
    if (pos_ >= static_cast<std::int64_t>(perm_.size())) {
      perm_.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = i;
      for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = rng.uniform_int(i + 1);
        std::swap(perm_[static_cast<std::size_t>(i)], perm_[static_cast<std::size_t>(j)]);
      }
      pos_ = 0;
    }
    const auto& sample = ds.source_images[static_cast<std::size_t>(perm_[static_cast<std::size_t>(pos_++)])];
    std::memcpy(b.source.data() + s * 3 * H * W, sample.pixels.data(),
                static_cast<std::size_t>(3 * H * W) * sizeof(double));
    b.source_ids.push_back(sample.id);
    const ImageSample t = augment(ds.target_image, ds.augmentation, rng);
    std::memcpy(b.target.data() + s * 3 * H * W, t.pixels.data(),
                static_cast<std::size_t>(3 * H * W) * sizeof(double));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace {

struct BgParams {
  double base[3];
  double amp, fx, fy, phase;
  double noise_amp;
  std::uint64_t noise_seed;
};

double hash_noise(std::uint64_t seed, std::uint64_t idx) {
  const std::uint64_t h = Rng::mix(seed ^ Rng::mix(idx));
  return (static_cast<double>(h >> 11) * 0x1.0p-53) * 2.0 - 1.0;
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (i) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

void hue180(const double* c, double* out) {
  const double s = (2.0 / 3.0) * (c[0] + c[1] + c[2]);
  out[0] = s - c[0];
  out[1] = s - c[1];
  out[2] = s - c[2];
}

// Fill color whose 180-degree hue rotation stays inside [0.02, 0.98].
void sample_shape_color(Rng& rng, double* rgb) {
  for (int attempt = 0; attempt < 256; ++attempt) {
    const double h = rng.uniform();
    const double s = rng.uniform(0.55, 0.95);
    const double v = rng.uniform(0.55, 0.9);
    hsv_to_rgb(h, s, v, rgb);
    double rot[3];
    hue180(rgb, rot);
    bool ok = true;
    for (int k = 0; k < 3; ++k) {
      ok = ok && rgb[k] > 0.02 && rgb[k] < 0.98 && rot[k] > 0.02 && rot[k] < 0.98;
    }
    if (ok) return;
  }
  rgb[0] = rgb[1] = rgb[2] = 0.5;
}

ShapeGeom sample_geometry(Rng& rng, std::int64_t S) {
  ShapeGeom g;
  g.kind = static_cast<int>(rng.uniform_int(3));
  g.cx = rng.uniform(0.32, 0.68) * static_cast<double>(S);
  g.cy = rng.uniform(0.32, 0.68) * static_cast<double>(S);
  g.rx = rng.uniform(0.18, 0.34) * static_cast<double>(S);
  g.ry = rng.uniform(0.18, 0.34) * static_cast<double>(S);
  g.angle = rng.uniform(0.0, kPi);
  double rgb[3];
  sample_shape_color(rng, rgb);
  g.r = rgb[0];
  g.g = rgb[1];
  g.b = rgb[2];
  return g;
}

BgParams sample_background(Rng& rng) {
  BgParams bg;
  const double g0 = rng.uniform(0.35, 0.6);
  for (double& b : bg.base) b = g0 + rng.uniform(-0.04, 0.04);
  bg.amp = rng.uniform(0.02, 0.05);
  bg.fx = rng.uniform(0.5, 2.0);
  bg.fy = rng.uniform(0.5, 2.0);
  bg.phase = rng.uniform(0.0, 2.0 * kPi);
  bg.noise_amp = 0.015;
  bg.noise_seed = rng.next_u64();
  return bg;
}

bool inside_shape(const ShapeGeom& g, double x, double y, double shrink) {
  const double rx = std::max(g.rx - shrink, 0.0);
  const double ry = std::max(g.ry - shrink, 0.0);
  if (rx <= 0.0 || ry <= 0.0) return false;
  const double ct = std::cos(g.angle), st = std::sin(g.angle);
  const double dx = x - g.cx, dy = y - g.cy;
  const double u = ct * dx + st * dy;
  const double v = -st * dx + ct * dy;
  switch (g.kind) {
    case 0:
      return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    case 1:
      return std::fabs(u) <= rx && std::fabs(v) <= ry;
    default: {
      // isoceles triangle inscribed in the (rx, ry) ellipse frame
      const double ax = 0.0, ay = -ry;
      const double bx = rx * 0.8660254037844386, by = ry * 0.5;
      const double cx2 = -bx, cy2 = by;
      auto side = [](double x1, double y1, double x2, double y2, double px, double py) {
        return (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
      };
      const double s1 = side(ax, ay, bx, by, u, v);
      const double s2 = side(bx, by, cx2, cy2, u, v);
      const double s3 = side(cx2, cy2, ax, ay, u, v);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
  }
}

// Rendered at kSupersample x the output resolution, box downsampled, [0,1].
std::vector<double> render_plane(const ShapeGeom& geom, const BgParams& bg, std::int64_t S,
                                 bool with_stroke, const OracleParams& oracle) {
  const std::int64_t R = S * kSupersample;
  std::vector<double> hi(static_cast<std::size_t>(3 * R * R));
  for (std::int64_t i = 0; i < R; ++i) {
    for (std::int64_t j = 0; j < R; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / kSupersample;
      const double y = (static_cast<double>(i) + 0.5) / kSupersample;
      double c[3];
      const double wave =
          bg.amp * std::sin(2.0 * kPi * (bg.fx * x + bg.fy * y) / static_cast<double>(S) + bg.phase);
      for (int k = 0; k < 3; ++k) {
        c[k] = bg.base[k] + wave +
               bg.noise_amp * hash_noise(bg.noise_seed, static_cast<std::uint64_t>(3 * (i * R + j) + k));
      }
      if (inside_shape(geom, x, y, 0.0)) {
        c[0] = geom.r;
        c[1] = geom.g;
        c[2] = geom.b;
      }
      if (with_stroke && inside_shape(geom, x, y, 0.0) &&
          !inside_shape(geom, x, y, oracle.stroke_width)) {
        c[0] = oracle.stroke_color[0];
        c[1] = oracle.stroke_color[1];
        c[2] = oracle.stroke_color[2];
      }
      for (int k = 0; k < 3; ++k) {
        hi[static_cast<std::size_t>((k * R + i) * R + j)] = std::min(std::max(c[k], 0.0), 1.0);
      }
    }
  }
  std::vector<double> lo(static_cast<std::size_t>(3 * S * S));
  const double inv = 1.0 / static_cast<double>(kSupersample * kSupersample);
  for (int k = 0; k < 3; ++k) {
    for (std::int64_t i = 0; i < S; ++i) {
      for (std::int64_t j = 0; j < S; ++j) {
        double acc = 0.0;
        for (int a = 0; a < kSupersample; ++a) {
          for (int b = 0; b < kSupersample; ++b) {
            acc += hi[static_cast<std::size_t>((k * R + i * kSupersample + a) * R +
                                               j * kSupersample + b)];
          }
        }
        lo[static_cast<std::size_t>((k * S + i) * S + j)] = acc * inv;
      }
    }
  }
  return lo;
}

Tensor plane_to_tensor(const std::vector<double>& plane01, std::int64_t S) {
  std::vector<double> v(plane01.size());
  for (std::size_t i = 0; i < plane01.size(); ++i) v[i] = plane01[i] * 2.0 - 1.0;
  return Tensor::from({3, S, S}, std::move(v));
}

// Fraction of each output pixel covered by the stroke band.
std::vector<double> stroke_mask(const ShapeGeom& geom, std::int64_t S, double width) {
  const std::int64_t R = S * kSupersample;
  std::vector<double> mask(static_cast<std::size_t>(S * S), 0.0);
  const double inv = 1.0 / static_cast<double>(kSupersample * kSupersample);
  for (std::int64_t i = 0; i < R; ++i) {
    for (std::int64_t j = 0; j < R; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / kSupersample;
      const double y = (static_cast<double>(i) + 0.5) / kSupersample;
      if (inside_shape(geom, x, y, 0.0) && !inside_shape(geom, x, y, width)) {
        mask[static_cast<std::size_t>((i / kSupersample) * S + j / kSupersample)] += inv;
      }
    }
  }
  return mask;
}

}  // namespace

Tensor hue_rotate_180(const Tensor& pixels) {
  if (pixels.shape().size() != 3 || pixels.shape()[0] != 3) {
    throw std::invalid_argument("hue_rotate_180: expected [3,H,W], got " +
                                shape_str(pixels.shape()));
  }
  const std::int64_t HW = pixels.shape()[1] * pixels.shape()[2];
  Tensor out = Tensor::zeros(pixels.shape());
  for (std::int64_t i = 0; i < HW; ++i) {
    double c[3], rot[3];
    for (int k = 0; k < 3; ++k) c[k] = (pixels.data()[k * HW + i] + 1.0) / 2.0;
    hue180(c, rot);
    for (int k = 0; k < 3; ++k) out.data()[k * HW + i] = rot[k] * 2.0 - 1.0;
  }
  return out;
}

ImageSample SynthCorpus::oracle_translate(const ImageSample& src) const {
  const auto it = geometry.find(src.id);
  if (it == geometry.end()) {
    throw std::invalid_argument("oracle: unknown image id '" + src.id + "'");
  }
  Tensor rotated = hue_rotate_180(src.pixels);
  const std::vector<double> mask = stroke_mask(it->second, image_size, oracle.stroke_width);
  const std::int64_t HW = image_size * image_size;
  for (int k = 0; k < 3; ++k) {
    const double stroke = oracle.stroke_color[k] * 2.0 - 1.0;
    for (std::int64_t i = 0; i < HW; ++i) {
      const double m = mask[static_cast<std::size_t>(i)];
      rotated.data()[k * HW + i] = (1.0 - m) * rotated.data()[k * HW + i] + m * stroke;
    }
  }
  return ImageSample{rotated, Domain::Target, src.id};
}

SynthCorpus synth_corpus(std::int64_t n_source, std::int64_t image_size, std::uint64_t seed) {
  if (n_source < 2) {
    throw std::invalid_argument("synth_corpus: need >= 2 source images, got " +
                                std::to_string(n_source));
  }
  if (!valid_image_size(image_size)) {
    throw std::invalid_argument("synth_corpus: image size " + std::to_string(image_size) +
                                " not in {32, 64, 128}");
  }
  SynthCorpus corpus;
  corpus.image_size = image_size;
  corpus.seed = seed;
  corpus.oracle.stroke_width = 1.5 * static_cast<double>(image_size) / 32.0;
  Rng root(seed);

  auto make_sample = [&](const std::string& id, std::uint64_t salt) {
    Rng r = root.derive(salt);
    const ShapeGeom geom = sample_geometry(r, image_size);
    const BgParams bg = sample_background(r);
    corpus.geometry[id] = geom;
    return ImageSample{plane_to_tensor(render_plane(geom, bg, image_size, false, corpus.oracle),
                                       image_size),
                       Domain::Source, id};
  };

  for (std::int64_t i = 0; i < n_source; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "src_%03lld", static_cast<long long>(i));
    corpus.train.source_images.push_back(make_sample(buf, 1000 + static_cast<std::uint64_t>(i)));
  }
  for (std::int64_t i = 0; i < n_source; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "test_%03lld", static_cast<long long>(i));
    corpus.test_sources.push_back(make_sample(buf, 2000000 + static_cast<std::uint64_t>(i)));
    corpus.test_oracle.push_back(corpus.oracle_translate(corpus.test_sources.back()));
  }
  // The held-out shape image behind the one-shot target.
  ImageSample held_out = make_sample("target", 3000000);
  ImageSample target = corpus.oracle_translate(held_out);
  target.domain = Domain::Target;
  corpus.train.target_image = target;
  corpus.train.image_size = image_size;
  return corpus;
}

// ---------------------------------------------------------------------------
// Image I/O
// ---------------------------------------------------------------------------

namespace {

unsigned char to_byte(double v) {
  const double b = std::llround((v + 1.0) * 127.5);
  return static_cast<unsigned char>(std::min(std::max(b, 0.0), 255.0));
}

double from_byte(unsigned char b) { return static_cast<double>(b) * 2.0 / 255.0 - 1.0; }

ImageSample image_from_rgb8(const std::vector<unsigned char>& rgb, std::int64_t h, std::int64_t w,
                            bool center_crop_to_square, const std::string& path) {
  std::int64_t side = std::min(h, w);
  std::int64_t r0 = 0, c0 = 0;
  if (h != w) {
    if (!center_crop_to_square) {
      throw IoError(path + ": image " + std::to_string(w) + "x" + std::to_string(h) +
                    " is not square (enable center crop to ingest)");
    }
    r0 = (h - side) / 2;
    c0 = (w - side) / 2;
  }
  check_image_size(side, side, path);
  Tensor px = Tensor::zeros({3, side, side});
  for (std::int64_t i = 0; i < side; ++i) {
    for (std::int64_t j = 0; j < side; ++j) {
      const std::size_t src = static_cast<std::size_t>(((r0 + i) * w + (c0 + j)) * 3);
      for (int k = 0; k < 3; ++k) {
        px.data()[(k * side + i) * side + j] = from_byte(rgb[src + static_cast<std::size_t>(k)]);
      }
    }
  }
  ImageSample s;
  s.pixels = px;
  s.id = fs::path(path).stem().string();
  return s;
}

ImageSample load_ppm(const std::string& path, bool center_crop) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError(path + ": unsupported PPM variant '" + magic + "'");
  auto next_int = [&](const char* what) {
    // skip whitespace and '#' comments
    int ch = in.get();
    while (ch == '#' || std::isspace(ch)) {
      if (ch == '#') {
        while (ch != '\n' && ch != EOF) ch = in.get();
      }
      ch = in.get();
    }
    std::int64_t v = 0;
    bool any = false;
    while (ch >= '0' && ch <= '9') {
      v = v * 10 + (ch - '0');
      any = true;
      ch = in.get();
    }
    if (!any) throw IoError(path + std::string(": truncated header reading ") + what);
    return v;
  };
  const std::int64_t w = next_int("width");
  const std::int64_t h = next_int("height");
  const std::int64_t maxval = next_int("maxval");
  if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
  std::vector<unsigned char> rgb(static_cast<std::size_t>(w * h * 3));
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(rgb.size())) {
    throw IoError(path + ": truncated file (expected " + std::to_string(rgb.size()) +
                  " pixel bytes, got " + std::to_string(in.gcount()) + ")");
  }
  return image_from_rgb8(rgb, h, w, center_crop, path);
}

ImageSample load_png(const std::string& path, bool center_crop) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError(path + ": PNG read failed: " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError(path + ": PNG decode failed: " + msg);
  }
  return image_from_rgb8(rgb, img.height, img.width, center_crop, path);
}

}  // namespace

ImageSample load_image(const std::string& path, bool center_crop_to_square) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError(path + ": cannot open");
  unsigned char head[8] = {0};
  probe.read(reinterpret_cast<char*>(head), 8);
  const auto got = probe.gcount();
  probe.close();
  if (got == 0) throw IoError(path + ": truncated file (empty)");
  if (got >= 2 && head[0] == 'P' && head[1] == '6') return load_ppm(path, center_crop_to_square);
  if (got >= 8 && head[0] == 0x89 && head[1] == 'P' && head[2] == 'N' && head[3] == 'G') {
    return load_png(path, center_crop_to_square);
  }
  throw IoError(path + ": unsupported format (expected PPM P6 or PNG)");
}

void save_image(const ImageSample& img, const std::string& path) {
  if (fs::path(path).extension() != ".ppm") {
    throw IoError(path + ": only PPM output is supported");
  }
  const std::int64_t H = img.pixels.shape()[1];
  const std::int64_t W = img.pixels.shape()[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> rgb(static_cast<std::size_t>(W * H * 3));
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      for (int k = 0; k < 3; ++k) {
        rgb[static_cast<std::size_t>((i * W + j) * 3 + k)] =
            to_byte(img.pixels.data()[(k * H + i) * W + j]);
      }
    }
  }
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Corpus persistence
// ---------------------------------------------------------------------------

namespace {

json geom_to_json(const ShapeGeom& g) {
  return json{{"kind", g.kind}, {"cx", g.cx},       {"cy", g.cy},
              {"rx", g.rx},     {"ry", g.ry},       {"angle", g.angle},
              {"color", json::array({g.r, g.g, g.b})}};
}

ShapeGeom geom_from_json(const json& j) {
  ShapeGeom g;
  g.kind = j.at("kind").get<int>();
  g.cx = j.at("cx").get<double>();
  g.cy = j.at("cy").get<double>();
  g.rx = j.at("rx").get<double>();
  g.ry = j.at("ry").get<double>();
  g.angle = j.at("angle").get<double>();
  g.r = j.at("color")[0].get<double>();
  g.g = j.at("color")[1].get<double>();
  g.b = j.at("color")[2].get<double>();
  return g;
}

}  // namespace

void write_corpus(const SynthCorpus& corpus, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "source", ec);
  fs::create_directories(fs::path(dir) / "target", ec);
  fs::create_directories(fs::path(dir) / "test", ec);
  fs::create_directories(fs::path(dir) / "test_oracle", ec);
  if (ec) throw IoError(dir + ": cannot create corpus directories: " + ec.message());

  json manifest;
  manifest["schema"] = "maos-corpus-v1";
  manifest["image_size"] = corpus.image_size;
  manifest["seed"] = corpus.seed;
  manifest["oracle"] = {
      {"hue_rotation_degrees", corpus.oracle.hue_rotation_degrees},
      {"stroke_color", json::array({corpus.oracle.stroke_color[0], corpus.oracle.stroke_color[1],
                                    corpus.oracle.stroke_color[2]})},
      {"stroke_width", corpus.oracle.stroke_width}};

  json sources = json::array();
  for (const auto& s : corpus.train.source_images) {
    const std::string rel = "source/" + s.id + ".ppm";
    save_image(s, (fs::path(dir) / rel).string());
    sources.push_back({{"id", s.id}, {"path", rel}, {"domain", "source"}});
  }
  manifest["sources"] = sources;
  save_image(corpus.train.target_image, (fs::path(dir) / "target" / "target.ppm").string());
  manifest["target"] = {{"id", "target"}, {"path", "target/target.ppm"}, {"domain", "target"}};

  json tests = json::array();
  for (std::size_t i = 0; i < corpus.test_sources.size(); ++i) {
    const auto& t = corpus.test_sources[i];
    const std::string rel_in = "test/" + t.id + ".ppm";
    const std::string rel_gt = "test_oracle/" + t.id + ".ppm";
    save_image(t, (fs::path(dir) / rel_in).string());
    save_image(corpus.test_oracle[i], (fs::path(dir) / rel_gt).string());
    tests.push_back({{"id", t.id}, {"input", rel_in}, {"oracle", rel_gt}});
  }
  manifest["test"] = tests;

  json geom;
  for (const auto& [id, g] : corpus.geometry) geom[id] = geom_to_json(g);
  manifest["geometry"] = geom;

  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError(dir + ": cannot write manifest.json");
  out << manifest.dump(2) << "\n";
}

SynthCorpus load_corpus(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError(dir + ": missing manifest.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError(dir + ": malformed manifest.json: " + e.what());
  }
  if (manifest.value("schema", "") != "maos-corpus-v1") {
    throw IoError(dir + ": unknown corpus schema '" + manifest.value("schema", "") + "'");
  }
  SynthCorpus corpus;
  corpus.image_size = manifest.at("image_size").get<std::int64_t>();
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  const auto& oracle = manifest.at("oracle");
  corpus.oracle.hue_rotation_degrees = oracle.at("hue_rotation_degrees").get<double>();
  for (int k = 0; k < 3; ++k) {
    corpus.oracle.stroke_color[k] = oracle.at("stroke_color")[static_cast<std::size_t>(k)].get<double>();
  }
  corpus.oracle.stroke_width = oracle.at("stroke_width").get<double>();

  for (const auto& s : manifest.at("sources")) {
    ImageSample img = load_image((fs::path(dir) / s.at("path").get<std::string>()).string());
    img.id = s.at("id").get<std::string>();
    img.domain = Domain::Source;
    corpus.train.source_images.push_back(std::move(img));
  }
  {
    const auto& t = manifest.at("target");
    ImageSample img = load_image((fs::path(dir) / t.at("path").get<std::string>()).string());
    img.id = t.at("id").get<std::string>();
    img.domain = Domain::Target;
    corpus.train.target_image = std::move(img);
  }
  corpus.train.image_size = corpus.image_size;
  if (manifest.contains("test")) {
    for (const auto& t : manifest.at("test")) {
      ImageSample in_img = load_image((fs::path(dir) / t.at("input").get<std::string>()).string());
      in_img.id = t.at("id").get<std::string>();
      corpus.test_sources.push_back(std::move(in_img));
      ImageSample gt = load_image((fs::path(dir) / t.at("oracle").get<std::string>()).string());
      gt.id = t.at("id").get<std::string>();
      gt.domain = Domain::Target;
      corpus.test_oracle.push_back(std::move(gt));
    }
  }
  if (manifest.contains("geometry")) {
    for (const auto& [id, g] : manifest.at("geometry").items()) {
      corpus.geometry[id] = geom_from_json(g);
    }
  }
  return corpus;
}

}  // namespace maos

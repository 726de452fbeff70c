#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "maos/rng.hpp"
#include "maos/tensor.hpp"

namespace maos {

enum class Domain { Source, Target };

// A single image in [-1,1] channel-major layout.
struct ImageSample {
  Tensor pixels;  // [3,H,W]
  Domain domain = Domain::Source;
  std::string id;
};

struct AugmentFlags {
  bool flip = true;
  bool rotate = true;
  bool center_crop = true;
};

struct CropSpec {
  std::int64_t part_size = 0;
  Rng rng{0};
};

// Abundant source images plus exactly one target image.
struct OneShotDataset {
  std::vector<ImageSample> source_images;
  ImageSample target_image;
  AugmentFlags augmentation;
  std::int64_t image_size = 0;
};

// Random p x p window per batch element, uniform over valid offsets. The crop
// is a differentiable slice: gradient flows back into the window only.
struct CropResult {
  Tensor crops;  // [N,3,p,p]
  std::vector<std::pair<std::int64_t, std::int64_t>> offsets;
};
CropResult random_part_crop(Tape* tape, const Tensor& img, CropSpec& spec);

// flip(p=0.5) -> rotation uniform in [-10,10] degrees with border replication
// -> center crop to 7/8 side, resized back. Pixel range is preserved.
ImageSample augment(const ImageSample& img, const AugmentFlags& flags, Rng& rng);

// Epoch-wise without-replacement sampler over the source list. The target
// batch is the single target image, independently augmented per slot.
class BatchSampler {
 public:
  struct Batch {
    Tensor source;  // [B,3,H,W]
    Tensor target;  // [B,3,H,W]
    std::vector<std::string> source_ids;
  };
  Batch next(const OneShotDataset& ds, std::int64_t batch_size, Rng& rng);

  const std::vector<std::int64_t>& permutation() const { return perm_; }
  std::int64_t cursor() const { return pos_; }
  void restore(std::vector<std::int64_t> perm, std::int64_t pos);

 private:
  std::vector<std::int64_t> perm_;
  std::int64_t pos_ = 0;
};

// --- synthetic two-domain corpus -------------------------------------------

struct ShapeGeom {
  int kind = 0;  // 0 ellipse, 1 rectangle, 2 triangle
  double cx = 0, cy = 0;     // center, pixel units
  double rx = 0, ry = 0;     // half extents, pixel units
  double angle = 0;          // radians
  double r = 0, g = 0, b = 0;  // fill color in [0,1]
};

struct OracleParams {
  double hue_rotation_degrees = 180.0;
  double stroke_color[3] = {0.05, 0.05, 0.05};
  double stroke_width = 1.5;  // pixels at the output resolution
};

// 180-degree rotation about the gray axis in RGB; a linear involution.
Tensor hue_rotate_180(const Tensor& pixels);

struct SynthCorpus {
  OneShotDataset train;
  std::vector<ImageSample> test_sources;
  std::vector<ImageSample> test_oracle;  // paired ground-truth translations
  std::map<std::string, ShapeGeom> geometry;
  OracleParams oracle;
  std::int64_t image_size = 0;
  std::uint64_t seed = 0;

  // Exact target-domain counterpart of a corpus image (by id).
  ImageSample oracle_translate(const ImageSample& src) const;
};

// Deterministic corpus: colored geometric shapes on a textured background;
// the target domain applies a 180-degree hue rotation plus a fixed stroke
// outline. Shape colors are sampled rotation-safe so the hue map stays within
// gamut and remains an exact involution.
SynthCorpus synth_corpus(std::int64_t n_source, std::int64_t image_size, std::uint64_t seed);

// --- image I/O ---------------------------------------------------------------

// PPM (P6, 8-bit) with bit-exact round trip; PNG ingest via libpng.
ImageSample load_image(const std::string& path, bool center_crop_to_square = false);
void save_image(const ImageSample& img, const std::string& path);

void write_corpus(const SynthCorpus& corpus, const std::string& dir);
SynthCorpus load_corpus(const std::string& dir);

}  // namespace maos

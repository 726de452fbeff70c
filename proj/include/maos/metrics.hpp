#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maos/tensor.hpp"

namespace maos {

struct GaussianStats {
  std::vector<double> mean;        // d
  std::vector<double> covariance;  // d x d row-major, symmetric
  std::int64_t n_samples = 0;

  std::int64_t dim() const { return static_cast<std::int64_t>(mean.size()); }
};

// Pluggable image embedding. The classic formulation uses a pretrained
// network; at this scale the default is 8x8 average-pooled pixels, with a
// seeded random projection and externally computed features as alternatives.
struct Embedding {
  enum class Kind { DownsamplePixels, RandomProjection, ExternalFeatures };
  Kind kind = Kind::DownsamplePixels;
  std::int64_t param = 8;   // pooling grid k, or projection dim
  std::uint64_t seed = 0;   // projection seed
  std::string file_a;       // external feature files (generated / reference)
  std::string file_b;

  std::int64_t output_dim() const;
  std::string descriptor() const;
  // "downsample:K" | "proj:D:SEED" | "external:FILE_A:FILE_B"
  static Embedding parse(const std::string& spec);
};

// Sample mean and covariance (n-1 normalization).
GaussianStats fit_gaussian(const std::vector<std::vector<double>>& points);

// ||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2)), the matrix square root
// evaluated through the symmetric form sqrt(Ca) Cb sqrt(Ca) with tiny negative
// eigenvalues clamped.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

std::vector<std::vector<double>> embed_set(const std::vector<Tensor>& images,
                                           const Embedding& emb);

std::vector<std::vector<double>> read_external_features(const std::string& path);

// Embeds both sets, fits Gaussians with +1e-6 I regularization, and returns
// their Frechet distance. Each set must have at least output_dim + 1 images.
double fid_between_sets(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b,
                        const Embedding& emb);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1 on inputs mapped to [0,1], averaged over channels and valid
// window positions.
double ssim(const Tensor& a, const Tensor& b);

// Mean pairwise mean-absolute-distance over all unordered pairs.
double diversity_score(const std::vector<Tensor>& outputs);

}  // namespace maos

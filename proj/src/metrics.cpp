#include "maos/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <sstream>

#include "maos/errors.hpp"
#include "maos/rng.hpp"
#include "nlohmann/json.hpp"

namespace maos {

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

std::int64_t Embedding::output_dim() const {
  switch (kind) {
    case Kind::DownsamplePixels:
      return 3 * param * param;
    case Kind::RandomProjection:
      return param;
    case Kind::ExternalFeatures: {
      const auto feats = read_external_features(file_a);
      return feats.empty() ? 0 : static_cast<std::int64_t>(feats[0].size());
    }
  }
  return 0;
}

std::string Embedding::descriptor() const {
  switch (kind) {
    case Kind::DownsamplePixels:
      return "downsample:" + std::to_string(param);
    case Kind::RandomProjection:
      return "proj:" + std::to_string(param) + ":" + std::to_string(seed);
    case Kind::ExternalFeatures:
      return "external:" + file_a + ":" + file_b;
  }
  return "?";
}

Embedding Embedding::parse(const std::string& spec) {
  Embedding e;
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.empty()) throw ConfigError("embedding: empty spec");
  try {
    if (parts[0] == "downsample" && parts.size() == 2) {
      e.kind = Kind::DownsamplePixels;
      e.param = std::stoll(parts[1]);
      if (e.param < 1) throw ConfigError("embedding: downsample grid must be >= 1");
      if (e.output_dim() > 256) {
        throw ConfigError("embedding: output dim " + std::to_string(e.output_dim()) +
                          " exceeds 256");
      }
      return e;
    }
    if (parts[0] == "proj" && parts.size() == 3) {
      e.kind = Kind::RandomProjection;
      e.param = std::stoll(parts[1]);
      e.seed = std::stoull(parts[2]);
      if (e.param < 1 || e.param > 256) {
        throw ConfigError("embedding: projection dim must be in [1,256]");
      }
      return e;
    }
    if (parts[0] == "external" && parts.size() == 3) {
      e.kind = Kind::ExternalFeatures;
      e.file_a = parts[1];
      e.file_b = parts[2];
      return e;
    }
  } catch (const std::invalid_argument&) {
    throw ConfigError("embedding: malformed number in spec '" + spec + "'");
  }
  throw ConfigError("embedding: unrecognized spec '" + spec +
                    "' (expected downsample:K | proj:D:SEED | external:GEN:REF)");
}

namespace {

void check_image(const Tensor& t, const char* where) {
  if (t.shape().size() != 3 || t.shape()[0] != 3) {
    throw std::invalid_argument(std::string(where) + ": expected [3,H,W], got " +
                                shape_str(t.shape()));
  }
}

std::vector<double> downsample_embed(const Tensor& img, std::int64_t k) {
  const std::int64_t H = img.shape()[1], W = img.shape()[2];
  if (k > H || k > W) {
    throw std::invalid_argument("embedding: downsample grid " + std::to_string(k) +
                                " exceeds image " + std::to_string(H) + "x" + std::to_string(W));
  }
  std::vector<double> out(static_cast<std::size_t>(3 * k * k), 0.0);
  for (std::int64_t c = 0; c < 3; ++c) {
    const double* plane = img.data() + c * H * W;
    for (std::int64_t bi = 0; bi < k; ++bi) {
      const std::int64_t r0 = bi * H / k, r1 = (bi + 1) * H / k;
      for (std::int64_t bj = 0; bj < k; ++bj) {
        const std::int64_t c0 = bj * W / k, c1 = (bj + 1) * W / k;
        double acc = 0.0;
        for (std::int64_t i = r0; i < r1; ++i) {
          for (std::int64_t j = c0; j < c1; ++j) acc += plane[i * W + j];
        }
        out[static_cast<std::size_t>((c * k + bi) * k + bj)] =
            acc / static_cast<double>((r1 - r0) * (c1 - c0));
      }
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> embed_set(const std::vector<Tensor>& images,
                                           const Embedding& emb) {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  switch (emb.kind) {
    case Embedding::Kind::DownsamplePixels:
      for (const Tensor& t : images) {
        check_image(t, "embed_set");
        out.push_back(downsample_embed(t, emb.param));
      }
      return out;
    case Embedding::Kind::RandomProjection: {
      if (images.empty()) return out;
      check_image(images[0], "embed_set");
      const std::int64_t in_dim = images[0].size();
      Rng rng(Rng::mix(emb.seed));
      std::vector<double> proj(static_cast<std::size_t>(emb.param * in_dim));
      for (double& v : proj) v = rng.normal();
      const double norm = 1.0 / std::sqrt(static_cast<double>(in_dim));
      for (const Tensor& t : images) {
        check_image(t, "embed_set");
        if (t.size() != in_dim) {
          throw std::invalid_argument("embed_set: inconsistent image sizes in set");
        }
        std::vector<double> y(static_cast<std::size_t>(emb.param), 0.0);
        for (std::int64_t r = 0; r < emb.param; ++r) {
          const double* row = proj.data() + r * in_dim;
          double acc = 0.0;
          for (std::int64_t i = 0; i < in_dim; ++i) acc += row[i] * t.data()[i];
          y[static_cast<std::size_t>(r)] = acc * norm;
        }
        out.push_back(std::move(y));
      }
      return out;
    }
    case Embedding::Kind::ExternalFeatures:
      throw std::invalid_argument("embed_set: external features carry their own embeddings");
  }
  return out;
}

std::vector<std::vector<double>> read_external_features(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw IoError(path + ".json: missing feature sidecar");
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ".json: malformed sidecar: " + e.what());
  }
  const std::int64_t count = meta.at("count").get<std::int64_t>();
  const std::int64_t dim = meta.at("dim").get<std::int64_t>();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open feature file");
  std::vector<float> raw(static_cast<std::size_t>(count * dim));
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(raw.size() * sizeof(float))) {
    throw IoError(path + ": truncated feature file (expected " +
                  std::to_string(raw.size() * sizeof(float)) + " bytes)");
  }
  std::vector<std::vector<double>> out(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    out[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(dim));
    for (std::int64_t j = 0; j < dim; ++j) {
      out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          static_cast<double>(raw[static_cast<std::size_t>(i * dim + j)]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian stats and Frechet distance
// ---------------------------------------------------------------------------

GaussianStats fit_gaussian(const std::vector<std::vector<double>>& points) {
  if (points.size() < 2) {
    throw std::invalid_argument("fit_gaussian: need >= 2 samples, got " +
                                std::to_string(points.size()));
  }
  const std::int64_t n = static_cast<std::int64_t>(points.size());
  const std::int64_t d = static_cast<std::int64_t>(points[0].size());
  GaussianStats s;
  s.n_samples = n;
  s.mean.assign(static_cast<std::size_t>(d), 0.0);
  for (const auto& p : points) {
    if (static_cast<std::int64_t>(p.size()) != d) {
      throw std::invalid_argument("fit_gaussian: inconsistent dimensions");
    }
    for (std::int64_t j = 0; j < d; ++j) s.mean[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(j)];
  }
  for (double& m : s.mean) m /= static_cast<double>(n);
  s.covariance.assign(static_cast<std::size_t>(d * d), 0.0);
  for (const auto& p : points) {
    for (std::int64_t i = 0; i < d; ++i) {
      const double di = p[static_cast<std::size_t>(i)] - s.mean[static_cast<std::size_t>(i)];
      for (std::int64_t j = i; j < d; ++j) {
        s.covariance[static_cast<std::size_t>(i * d + j)] +=
            di * (p[static_cast<std::size_t>(j)] - s.mean[static_cast<std::size_t>(j)]);
      }
    }
  }
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = i; j < d; ++j) {
      const double v = s.covariance[static_cast<std::size_t>(i * d + j)] / static_cast<double>(n - 1);
      s.covariance[static_cast<std::size_t>(i * d + j)] = v;
      s.covariance[static_cast<std::size_t>(j * d + i)] = v;
    }
  }
  return s;
}

namespace {

Eigen::MatrixXd to_symmetric_matrix(const GaussianStats& s, const char* name) {
  const std::int64_t d = s.dim();
  if (static_cast<std::int64_t>(s.covariance.size()) != d * d) {
    throw std::invalid_argument(std::string("frechet_distance: ") + name + " covariance size " +
                                std::to_string(s.covariance.size()) + " != d^2");
  }
  Eigen::Map<const Eigen::MatrixXd> m(s.covariance.data(), d, d);
  double scale = 1.0;
  for (const double v : s.covariance) scale = std::max(scale, std::fabs(v));
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * scale) {
    throw std::invalid_argument(std::string("frechet_distance: ") + name +
                                " covariance asymmetric by " + std::to_string(asym));
  }
  return 0.5 * (m + m.transpose());
}

void check_psd(const Eigen::VectorXd& eigs, const char* name) {
  if (eigs.minCoeff() < -1e-6) {
    throw NumericError(std::string("frechet_distance: ") + name +
                       " covariance has eigenvalue " + std::to_string(eigs.minCoeff()) +
                       " < -1e-6");
  }
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim()) {
    throw std::invalid_argument("frechet_distance: dimension mismatch " +
                                std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  }
  const std::int64_t d = a.dim();
  const Eigen::MatrixXd ca = to_symmetric_matrix(a, "first");
  const Eigen::MatrixXd cb = to_symmetric_matrix(b, "second");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(ca);
  check_psd(es_a.eigenvalues(), "first");
  Eigen::VectorXd la = es_a.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd sqrt_a =
      es_a.eigenvectors() * la.cwiseSqrt().asDiagonal() * es_a.eigenvectors().transpose();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_b_check(cb);
  check_psd(es_b_check.eigenvalues(), "second");

  Eigen::MatrixXd m = sqrt_a * cb * sqrt_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(m);
  const double m_scale = std::max(1.0, es_m.eigenvalues().cwiseAbs().maxCoeff());
  if (es_m.eigenvalues().minCoeff() < -1e-6 * m_scale) {
    throw NumericError("frechet_distance: covariance product has eigenvalue " +
                       std::to_string(es_m.eigenvalues().minCoeff()) + " beyond clamp tolerance");
  }
  double trace_sqrt = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    trace_sqrt += std::sqrt(std::max(es_m.eigenvalues()[i], 0.0));
  }

  double mu2 = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    const double dm = a.mean[static_cast<std::size_t>(i)] - b.mean[static_cast<std::size_t>(i)];
    mu2 += dm * dm;
  }
  const double result = mu2 + ca.trace() + cb.trace() - 2.0 * trace_sqrt;
  return std::max(result, 0.0);
}

double fid_between_sets(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b,
                        const Embedding& emb) {
  std::vector<std::vector<double>> ea, eb;
  if (emb.kind == Embedding::Kind::ExternalFeatures) {
    ea = read_external_features(emb.file_a);
    eb = read_external_features(emb.file_b);
  } else {
    ea = embed_set(set_a, emb);
    eb = embed_set(set_b, emb);
  }
  if (ea.empty() || eb.empty()) throw std::invalid_argument("fid_between_sets: empty set");
  const std::int64_t d = static_cast<std::int64_t>(ea[0].size());
  for (const auto* e : {&ea, &eb}) {
    if (static_cast<std::int64_t>(e->size()) < d + 1) {
      throw std::invalid_argument("fid_between_sets: set of " + std::to_string(e->size()) +
                                  " images too small for embedding dim " + std::to_string(d) +
                                  " (need >= dim + 1)");
    }
  }
  GaussianStats sa = fit_gaussian(ea);
  GaussianStats sb = fit_gaussian(eb);
  for (std::int64_t i = 0; i < d; ++i) {
    sa.covariance[static_cast<std::size_t>(i * d + i)] += 1e-6;
    sb.covariance[static_cast<std::size_t>(i * d + i)] += 1e-6;
  }
  return frechet_distance(sa, sb);
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

double ssim(const Tensor& a, const Tensor& b) {
  check_image(a, "ssim");
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::int64_t H = a.shape()[1], W = a.shape()[2];
  constexpr std::int64_t kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;  // (K1 L)^2, L = 1
  constexpr double kC2 = 0.03 * 0.03;
  if (H < kWin || W < kWin) {
    throw std::invalid_argument("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                                " smaller than the 11x11 window");
  }

  double win[kWin * kWin];
  double wsum = 0.0;
  for (std::int64_t i = 0; i < kWin; ++i) {
    for (std::int64_t j = 0; j < kWin; ++j) {
      const double dy = static_cast<double>(i) - 5.0;
      const double dx = static_cast<double>(j) - 5.0;
      win[i * kWin + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
      wsum += win[i * kWin + j];
    }
  }
  for (double& w : win) w /= wsum;

  double total = 0.0;
  for (std::int64_t c = 0; c < 3; ++c) {
    const double* pa = a.data() + c * H * W;
    const double* pb = b.data() + c * H * W;
    double acc = 0.0;
    std::int64_t count = 0;
    for (std::int64_t y = 0; y + kWin <= H; ++y) {
      for (std::int64_t x = 0; x + kWin <= W; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::int64_t i = 0; i < kWin; ++i) {
          for (std::int64_t j = 0; j < kWin; ++j) {
            const double w = win[i * kWin + j];
            const double va = (pa[(y + i) * W + (x + j)] + 1.0) / 2.0;
            const double vb = (pb[(y + i) * W + (x + j)] + 1.0) / 2.0;
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        }
        const double var_a = saa - ma * ma;
        const double var_b = sbb - mb * mb;
        const double cov = sab - ma * mb;
        const double val = ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
                           ((ma * ma + mb * mb + kC1) * (var_a + var_b + kC2));
        acc += val;
        ++count;
      }
    }
    total += acc / static_cast<double>(count);
  }
  return total / 3.0;
}

// ---------------------------------------------------------------------------
// Diversity
// ---------------------------------------------------------------------------

double diversity_score(const std::vector<Tensor>& outputs) {
  if (outputs.size() < 2) {
    throw std::invalid_argument("diversity_score: need >= 2 images, got " +
                                std::to_string(outputs.size()));
  }
  double acc = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    for (std::size_t j = i + 1; j < outputs.size(); ++j) {
      if (outputs[i].shape() != outputs[j].shape()) {
        throw std::invalid_argument("diversity_score: shape mismatch within set");
      }
      const std::int64_t n = outputs[i].size();
      double d = 0.0;
      for (std::int64_t k = 0; k < n; ++k) {
        d += std::fabs(outputs[i].data()[k] - outputs[j].data()[k]);
      }
      acc += d / static_cast<double>(n);
      ++pairs;
    }
  }
  return acc / static_cast<double>(pairs);
}

}  // namespace maos

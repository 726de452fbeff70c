#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "maos/tensor.hpp"

namespace maos {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kInitStddev = 0.02;

enum class Activation { None, ReLU, LeakyReLU, Tanh };

struct ConvSpec {
  std::string name;
  std::int64_t in_ch = 0;
  std::int64_t out_ch = 0;
  std::int64_t kernel = 0;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t groups = 1;
  bool transposed = false;
  bool norm = false;
  Activation act = Activation::None;
};

struct ResBlockSpec {
  std::string name;
  std::int64_t channels = 0;
};

using GenLayer = std::variant<ConvSpec, ResBlockSpec>;

// Resolution-preserving translator: 2 stride-2 down-convolutions, a residual
// trunk, 2 up-convolutions, tanh output in [-1,1].
struct GeneratorNet {
  std::vector<GenLayer> layers;
  std::map<std::string, Tensor> params;
  std::int64_t base_width = 0;
  std::int64_t n_res_blocks = 0;
};

enum class DiscKind { Global, Part, Source };

// Strided patch-score stack. The stem is shared; every later convolution is
// grouped n_threads ways and the head emits one score map per thread, so the
// threads behave as independently parameterized weak learners.
struct DiscriminatorNet {
  DiscKind kind = DiscKind::Global;
  std::int64_t n_threads = 1;
  std::int64_t depth = 0;  // strided conv blocks, stem included
  std::int64_t base_width = 0;
  std::vector<ConvSpec> layers;
  std::map<std::string, Tensor> params;
};

std::int64_t default_disc_depth(DiscKind kind);

GeneratorNet build_generator(std::int64_t base_width, std::int64_t n_res_blocks,
                             std::uint64_t seed);
DiscriminatorNet build_discriminator(DiscKind kind, std::int64_t n_threads,
                                     std::int64_t base_width, std::int64_t depth,
                                     std::uint64_t seed);

Tensor forward_generator(Tape* tape, const GeneratorNet& net, const Tensor& x);

// Exactly n_threads raw-logit score maps, one per weak learner.
std::vector<Tensor> forward_threads(Tape* tape, const DiscriminatorNet& d, const Tensor& batch);

std::int64_t parameter_count(const std::map<std::string, Tensor>& params);

// Flat element range of one parameter tensor owned by a single thread.
struct ThreadSlice {
  std::string param;
  std::int64_t begin = 0;
  std::int64_t end = 0;
};
// The grouped-row and head slices owned by `thread`; the shared stem is not
// owned by any thread.
std::vector<ThreadSlice> thread_param_slices(const DiscriminatorNet& d, std::int64_t thread);

void set_params_requires_grad(std::map<std::string, Tensor>& params, bool value);

const char* disc_kind_name(DiscKind kind);

}  // namespace maos

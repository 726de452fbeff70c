#include "maos/tensor.hpp"
#include "maos/models.hpp"
#include "maos/losses.hpp"
#include <cstdio>
using namespace maos;
int main() {
  Rng rng(7);
  Tensor x0 = Tensor::gaussian({1,3,8,8}, rng, 1.0);
  // conv2d wrt input
  Tensor w = Tensor::gaussian({4,3,3,3}, rng, 0.5);
  Tensor b = Tensor::gaussian({4}, rng, 0.5);
  double e1 = grad_check([&](Tape* t, const Tensor& x){ return mean(t, maos::tanh(t, conv2d(t, x, w, b, 2, 1, 1))); }, x0, 1e-4);
  std::printf("conv2d/input   %.3e\n", e1);
  // conv2d wrt weight
  double e2 = grad_check([&](Tape* t, const Tensor& ww){ return mean(t, maos::tanh(t, conv2d(t, x0, ww, b, 1, 1, 1))); },
                         Tensor::gaussian({4,3,3,3}, rng, 0.5), 1e-4);
  std::printf("conv2d/weight  %.3e\n", e2);
  // grouped conv wrt weight
  Tensor xg = Tensor::gaussian({2,4,6,6}, rng, 1.0);
  Tensor bg = Tensor::gaussian({6}, rng, 0.5);
  double e3 = grad_check([&](Tape* t, const Tensor& ww){ return mean(t, maos::tanh(t, conv2d(t, xg, ww, bg, 2, 1, 2))); },
                         Tensor::gaussian({6,2,3,3}, rng, 0.5), 1e-4);
  std::printf("groupconv/w    %.3e\n", e3);
  // conv_transpose2d wrt input and weight
  Tensor wt = Tensor::gaussian({3,2,4,4}, rng, 0.5);
  Tensor bt = Tensor::gaussian({2}, rng, 0.5);
  double e4 = grad_check([&](Tape* t, const Tensor& x){ return mean(t, maos::tanh(t, conv_transpose2d(t, x, wt, bt, 2, 1))); },
                         Tensor::gaussian({1,3,5,5}, rng, 1.0), 1e-4);
  std::printf("convT/input    %.3e\n", e4);
  double e5 = grad_check([&](Tape* t, const Tensor& ww){ return mean(t, maos::tanh(t, conv_transpose2d(t, x0, ww, bt, 2, 1))); },
                         Tensor::gaussian({3,2,4,4}, rng, 0.5), 1e-4);
  std::printf("convT/weight   %.3e\n", e5);
  // instance_norm
  double e6 = grad_check([&](Tape* t, const Tensor& x){ return mean(t, mul(t, instance_norm(t, x, 1e-5), instance_norm(t, x, 1e-5))); },
                         Tensor::gaussian({1,2,4,4}, rng, 1.0), 1e-4);
  std::printf("instnorm       %.3e\n", e6);
  // crop + slice
  double e7 = grad_check([&](Tape* t, const Tensor& x){ return mean(t, maos::abs(t, crop2d(t, x, 1, 2, 3, 3))); },
                         Tensor::gaussian({1,3,6,6}, rng, 1.0), 1e-4);
  std::printf("crop2d         %.3e\n", e7);
  // generator end to end
  GeneratorNet gnet = build_generator(4, 1, 11);
  double e8 = grad_check([&](Tape* t, const Tensor& x){ return mean(t, forward_generator(t, gnet, x)); },
                         Tensor::gaussian({1,3,8,8}, rng, 0.5), 1e-4);
  std::printf("generator/x    %.3e\n", e8);
  return 0;
}

#include <functional>
#include <map>

#include "effnet/blocks.hpp"
#include "effnet/errors.hpp"
#include "effnet/gradcheck.hpp"
#include "effnet/ops.hpp"

namespace effnet {

namespace {

// Values in +-[0.1, 1]: keeps relu away from its kink.
Tensor random_tensor(Shape shape, CounterRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double mag = rng.uniform(0.1, 1.0);
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor::from(std::move(shape), std::move(v));
}

std::size_t pick(CounterRng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(lo),
                                              static_cast<std::int64_t>(hi)));
}

// Reduces an op output to a scalar through fixed random weights so that
// every output element gets a distinct upstream gradient.
GraphBuilder weighted(std::function<Tensor(const std::vector<Tensor>&)> op, Shape out_shape,
                      CounterRng& rng) {
  Tensor w = random_tensor(std::move(out_shape), rng);
  return [op = std::move(op), w](const std::vector<Tensor>& in) {
    Tensor y = op(in);
    return sum(mul(y.reshape(w.shape()), w));
  };
}

using Instance = std::function<double(CounterRng&)>;

double conv_case(CounterRng& rng, bool depthwise) {
  const std::size_t n = pick(rng, 1, 2);
  const std::size_t groups = depthwise ? pick(rng, 1, 4) : pick(rng, 1, 2);
  const std::size_t cin = depthwise ? groups : groups * pick(rng, 1, 2);
  const std::size_t cout = depthwise ? groups : groups * pick(rng, 1, 2);
  const std::size_t k = 1 + 2 * pick(rng, 0, 1) + (depthwise ? 0 : pick(rng, 0, 1));
  const int stride = static_cast<int>(pick(rng, 1, 2));
  const int pad = static_cast<int>(pick(rng, 0, k / 2));
  const std::size_t h = pick(rng, k, 7), w = pick(rng, k, 7);
  Conv2dParams p{stride, pad, static_cast<int>(groups)};
  Tensor x = random_tensor({n, cin, h, w}, rng);
  Tensor kern = random_tensor({cout, cin / groups, k, k}, rng);
  Shape out{n, cout, conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)};
  auto f = weighted([p](const auto& in) { return conv2d(in[0], in[1], p); }, out, rng);
  return grad_check(f, {x, kern});
}

double unary_case(CounterRng& rng, Tensor (*op)(const Tensor&)) {
  Shape s{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
  Tensor x = random_tensor(s, rng);
  return grad_check(weighted([op](const auto& in) { return op(in[0]); }, s, rng), {x});
}

std::map<std::string, Instance> registry() {
  std::map<std::string, Instance> r;
  r["conv2d"] = [](CounterRng& rng) { return conv_case(rng, false); };
  r["conv2d_depthwise"] = [](CounterRng& rng) { return conv_case(rng, true); };
  r["relu"] = [](CounterRng& rng) { return unary_case(rng, relu); };
  r["sigmoid"] = [](CounterRng& rng) { return unary_case(rng, sigmoid); };
  r["silu"] = [](CounterRng& rng) { return unary_case(rng, silu); };
  r["reduce_mean_spatial"] = [](CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4);
    Tensor x = random_tensor({n, c, pick(rng, 1, 5), pick(rng, 1, 5)}, rng);
    return grad_check(
        weighted([](const auto& in) { return reduce_mean_spatial(in[0]); }, {n, c, 1, 1}, rng),
        {x});
  };
  r["dense"] = [](CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 4), din = pick(rng, 1, 6), dout = pick(rng, 1, 5);
    Tensor x = random_tensor({n, din}, rng), w = random_tensor({dout, din}, rng),
           b = random_tensor({dout}, rng);
    return grad_check(
        weighted([](const auto& in) { return dense(in[0], in[1], in[2]); }, {n, dout}, rng),
        {x, w, b});
  };
  r["add"] = [](CounterRng& rng) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 5)};
    return grad_check(weighted([](const auto& in) { return add(in[0], in[1]); }, s, rng),
                      {random_tensor(s, rng), random_tensor(s, rng)});
  };
  r["mul"] = [](CounterRng& rng) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 5)};
    return grad_check(weighted([](const auto& in) { return mul(in[0], in[1]); }, s, rng),
                      {random_tensor(s, rng), random_tensor(s, rng)});
  };
  r["scale"] = [](CounterRng& rng) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 5)};
    const double f = rng.uniform(-2.0, 2.0);
    return grad_check(weighted([f](const auto& in) { return scale(in[0], f); }, s, rng),
                      {random_tensor(s, rng)});
  };
  r["sum"] = [](CounterRng& rng) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 5)};
    return grad_check(weighted([](const auto& in) { return sum(in[0]); }, {1}, rng),
                      {random_tensor(s, rng)});
  };
  r["mean"] = [](CounterRng& rng) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 5)};
    return grad_check(weighted([](const auto& in) { return mean(in[0]); }, {1}, rng),
                      {random_tensor(s, rng)});
  };
  r["reshape"] = [](CounterRng& rng) {
    const std::size_t a = pick(rng, 1, 3), b = pick(rng, 1, 4);
    return grad_check(
        weighted([a, b](const auto& in) { return in[0].reshape({b, a}); }, {b, a}, rng),
        {random_tensor({a, b}, rng)});
  };
  auto affine = [](CounterRng& rng, bool with_silu) {
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 4);
    Shape s{n, c, pick(rng, 1, 4), pick(rng, 1, 4)};
    auto op = [with_silu](const std::vector<Tensor>& in) {
      return with_silu ? channel_affine_silu(in[0], in[1], in[2])
                       : channel_affine(in[0], in[1], in[2]);
    };
    return grad_check(weighted(op, s, rng),
                      {random_tensor(s, rng), random_tensor({c}, rng), random_tensor({c}, rng)});
  };
  r["channel_affine"] = [affine](CounterRng& rng) { return affine(rng, false); };
  r["channel_affine_silu"] = [affine](CounterRng& rng) { return affine(rng, true); };
  r["channel_scale"] = [](CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4);
    Shape s{n, c, pick(rng, 1, 4), pick(rng, 1, 4)};
    return grad_check(
        weighted([](const auto& in) { return channel_scale(in[0], in[1]); }, s, rng),
        {random_tensor(s, rng), random_tensor({n, c}, rng)});
  };
  r["concat_features"] = [](CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 3), parts = pick(rng, 1, 3);
    std::vector<Tensor> in;
    std::size_t total = 0;
    for (std::size_t i = 0; i < parts; ++i) {
      const std::size_t d = pick(rng, 1, 4);
      total += d;
      in.push_back(random_tensor({n, d}, rng));
    }
    return grad_check(weighted([](const auto& x) { return concat_features(x); }, {n, total}, rng),
                      in);
  };
  r["bce_with_logits"] = [](CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 6);
    std::vector<double> t(n);
    for (double& v : t) v = static_cast<double>(rng.bernoulli(0.5));
    Tensor z = random_tensor({n, 1}, rng);
    for (double& v : z.mutable_data()) v *= 3.0;
    return grad_check([t](const auto& in) { return bce_with_logits(in[0], t); }, {z});
  };
  r["se_block"] = [](CounterRng& rng) {
    const std::size_t reduction = pick(rng, 1, 2);
    const std::size_t c = reduction * pick(rng, 1, 3), n = pick(rng, 1, 2);
    Shape s{n, c, pick(rng, 1, 4), pick(rng, 1, 4)};
    Tensor w1 = random_tensor({c / reduction, c}, rng), w2 = random_tensor({c, c / reduction}, rng);
    auto op = [c, reduction](const std::vector<Tensor>& in) {
      SEBlock se;
      se.channels = c;
      se.reduced = c / reduction;
      se.w1 = in[1];
      se.w2 = in[2];
      return se_forward(in[0], se);
    };
    return grad_check(weighted(op, s, rng), {random_tensor(s, rng), w1, w2});
  };
  return r;
}

}  // namespace

std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> names;
  for (const auto& [name, _] : registry()) names.push_back(name);
  return names;
}

GradCheckResult run_gradcheck(const std::string& op, std::size_t instances, std::uint64_t seed,
                              double tolerance) {
  const auto reg = registry();
  const auto it = reg.find(op);
  if (it == reg.end()) throw UsageError("gradcheck: unknown op '" + op + "'");
  GradCheckResult res;
  res.name = op;
  res.instances = instances;
  CounterRng root(seed);
  std::uint64_t id = 0xCBF29CE484222325ULL;  // FNV-1a of the name
  for (unsigned char ch : op) id = (id ^ ch) * 0x100000001B3ULL;
  CounterRng stream = root.split(id);
  for (std::size_t i = 0; i < instances; ++i) {
    CounterRng rng = stream.split(i);
    res.max_error = std::max(res.max_error, it->second(rng));
  }
  res.passed = res.max_error < tolerance;
  return res;
}

}  // namespace effnet

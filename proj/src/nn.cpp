#include "mvh/nn.hpp"

#include <cmath>

namespace mvh {

Array xavier_uniform(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-bound, bound);
  Array w(Shape{in, out});
  for (auto& v : w.values()) v = u(rng);
  return w;
}

Linear::Linear(ParamStore& store, std::string name, std::size_t in, std::size_t out, Rng& rng, Init init)
    : name_(std::move(name)), in_(in), out_(out) {
  store.add(weight(), init == Init::Zero ? Array(Shape{in, out}, 0.0) : xavier_uniform(in, out, rng));
  store.add(bias(), Array(Shape{out}, 0.0));
}

Var Linear::operator()(const Ctx& ctx, Var x) const {
  return add(matmul(x, ctx.p(weight())), ctx.p(bias()));
}

Mlp2::Mlp2(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
           Rng& rng, Act act, Init last)
    : l1_(store, name + ".l1", in, hidden, rng), l2_(store, name + ".l2", hidden, out, rng, last), act_(act) {}

Var Mlp2::operator()(const Ctx& ctx, Var x) const {
  Var h = l1_(ctx, x);
  h = act_ == Act::Relu ? relu(h) : tanh(h);
  return l2_(ctx, h);
}

}  // namespace mvh

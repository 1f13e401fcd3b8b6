#include "mvh/diagnostics.hpp"

#include <algorithm>
#include <random>

#include "mvh/synth.hpp"
#include "mvh/trainer.hpp"

namespace mvh {

const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"hmap", "hm2d", "nll", "proj2d", "total"};
  return names;
}

GradCheckReport check_model_gradient(const std::string& term, std::uint64_t seed, std::size_t entries_per_param) {
  const auto& names = loss_term_names();
  if (std::find(names.begin(), names.end(), term) == names.end())
    throw ContractError("unknown loss term '" + term + "'");
  GenerateConfig gc;
  gc.sequences = 1;
  gc.frames = 8;
  gc.seed = seed;
  const Dataset data = generate_dataset(gc);
  const auto views = first_views(2);
  const Rig rig = data.rig.subset(views);
  Rng jitter(derive_seed(seed, 100, 0));
  const FrameBlock block = sequence_block(data.sequences[0], views, 3, 5, 3, 1.5, &jitter);

  ParamStore store;
  ModelConfig mc;
  mc.hypotheses = 2;
  mc.stpt.blocks = 2;
  const HandModel model(store, mc, seed);
  std::mt19937_64 rng(derive_seed(seed, 104, 0));
  std::normal_distribution<double> n(0.0, 0.03);
  for (const auto& name : store.names())
    for (double& x : store.value(name).values()) x += n(rng);

  GradCheckOptions opt;
  opt.max_entries_per_param = entries_per_param;
  opt.seed = seed;
  if (term == "hmap" || term == "hm2d") opt.prefixes = {"refiner"};
  if (term == "nll") opt.prefixes = {"refiner", "graph", "flow"};
  DetachCache cache;
  return grad_check(
      [&](Tape& t) {
        cache.rewind();
        t.set_detach_cache(&cache);
        Rng draws(derive_seed(seed, 101, 0));
        const ForwardResult r = model.forward(Ctx{&t, &store}, block, rig, draws);
        if (term == "hmap") return r.terms.hmap;
        if (term == "hm2d") return r.terms.hm2d;
        if (term == "nll") return r.terms.nll;
        if (term == "proj2d") return r.terms.proj2d;
        return r.total;
      },
      store, opt);
}

}  // namespace mvh

#include "mvh/pipeline.hpp"

#include <algorithm>

namespace mvh {

void ModelConfig::validate() const {
  if (graph.joints != kJoints || flow.dim != 2 * kJoints)
    throw ContractError("model config: graph joints and flow dim must match the 21-joint hand");
  if (flow.cond_dim != graph.fused_dim) throw ContractError("model config: flow condition width must equal fused width");
  if (point.dim != stpt.dim || skeleton.feature_dim != stpt.dim)
    throw ContractError("model config: point, transformer and skeleton feature widths differ");
  if (!(residual_scale > 0.0) || hypotheses < 1 || refiner_rank < 1)
    throw ContractError("model config: residual scale, hypotheses and refiner rank must be positive");
  weights.validate();
}

Array render_confidence_maps(const Array& labels, const Array& conf, const HeatmapGrid& grid, double frame_size) {
  if (labels.rank() != 2 || labels.cols() != 2 || conf.size() != labels.rows())
    throw ContractError("render_confidence_maps: labels " + shape_str(labels.shape()) + ", conf " +
                        shape_str(conf.shape()));
  const std::size_t n = labels.rows(), cells = grid.cells();
  Array maps(Shape{n, cells});
  for (std::size_t i = 0; i < n; ++i) {
    const double u = std::clamp(labels.at(i, 0), 0.0, frame_size - 1.0);
    const double v = std::clamp(labels.at(i, 1), 0.0, frame_size - 1.0);
    double* m = maps.data() + i * cells;
    render_one(u, v, grid, m);
    for (std::size_t k = 0; k < cells; ++k) m[k] *= conf[i];
  }
  return maps;
}

HandModel::HandModel(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  refiner_ = HeatmapRefiner(store, "refiner", cfg_.grid, cfg_.refiner_rank, rng);
  graph_ = GraphInteraction(store, "graph", cfg_.graph, rng);
  flow_ = ConditionalFlow(store, "flow", cfg_.flow, rng);
  points_ = PointFeatureNet(store, "points", cfg_.point, rng);
  stpt_ = Stpt(store, "stpt", cfg_.stpt, rng);
  head_ = SkeletonHead(store, "skeleton", cfg_.skeleton, rng);
}

ForwardResult HandModel::forward(const Ctx& ctx, const FrameBlock& block, const Rig& rig, Rng& rng) const {
  const Shape is = block.input.shape();
  if (is.size() != 4 || is[2] != kJoints || is[3] != 2)
    throw ContractError("model input must be [F, V, 21, 2], got " + shape_str(is));
  const std::size_t nf = is[0], nv = is[1], nj = kJoints, nw = block.windows.size();
  if (block.pseudo.shape() != is || block.conf.shape() != Shape{nf, nv, nj})
    throw ContractError("model block: pseudo/conf shapes do not match the input");
  if (nv != rig.size())
    throw ContractError("model block has " + std::to_string(nv) + " views, rig has " + std::to_string(rig.size()));
  if (nw == 0) throw ContractError("model block has no windows");
  const std::size_t nt = block.windows[0].size();
  if (nt % 2 == 0) throw ContractError("window length must be odd");
  for (const auto& w : block.windows) {
    if (w.size() != nt) throw ContractError("windows differ in length");
    for (std::size_t f : w)
      if (f >= nf) throw ContractError("window frame index out of range");
  }
  Tape& tape = *ctx.tape;
  const std::size_t nfv = nf * nv, n = nfv * nj, tc = nt / 2;
  const double s = cfg_.residual_scale;
  const double frame = cfg_.point.frame_size;

  ForwardResult r;
  for (const auto& w : block.windows) r.centres.push_back(w[tc]);

  // Rows of the centre frames in (w, v) order and in (w, v, j) order.
  std::vector<std::size_t> centre_fv, centre_n;
  for (std::size_t f : r.centres)
    for (std::size_t v = 0; v < nv; ++v) {
      centre_fv.push_back(f * nv + v);
      for (std::size_t j = 0; j < nj; ++j) centre_n.push_back((f * nv + v) * nj + j);
    }
  Array pseudo_c(Shape{nw * nv * nj, 2}), conf_c(Shape{nw * nv * nj});
  for (std::size_t i = 0; i < centre_n.size(); ++i) {
    pseudo_c[2 * i] = block.pseudo[2 * centre_n[i]];
    pseudo_c[2 * i + 1] = block.pseudo[2 * centre_n[i] + 1];
    conf_c[i] = block.conf[centre_n[i]];
  }

  // Heatmap frontend.
  const Array maps = render_confidence_maps(block.input.reshaped({n, 2}), block.conf.reshaped({n}), cfg_.grid, frame);
  Var refined_maps = refiner_(ctx, ctx.c(maps));
  Var decoded = soft_argmax_px(refined_maps, cfg_.grid);
  Var confidence = tape.detach(heatmap_confidence(refined_maps));
  r.terms.hmap = loss_hmap(gather_rows(refined_maps, centre_n),
                           ctx.c(render_confidence_maps(pseudo_c, conf_c, cfg_.grid, frame)));
  r.terms.hm2d = loss_hm2d(gather_rows(decoded, centre_n), ctx.c(pseudo_c));
  r.confidence = confidence.value().reshaped({nf, nv, nj});
  r.decoded = decoded.value().reshaped({nf, nv, nj, 2});
  const Array& conf_a = r.confidence;

  // Cross-view joint graph.
  const GraphOut g = graph_.forward(ctx, reshape(decoded, {nf, nv, nj, 2}), conf_a);
  Var cond = reshape(g.fused, {nfv, cfg_.graph.fused_dim});

  // Flow over the label residual around the decoded joints.
  Var base = tape.detach(reshape(decoded, {nfv, 2 * nj}));
  Var residual = scale(sub(ctx.c(block.pseudo.reshaped({nfv, 2 * nj})), base), 1.0 / s);
  r.terms.nll = mean(flow_.nll(ctx, gather_rows(residual, centre_fv), gather_rows(cond, centre_fv)));

  const std::size_t m = cfg_.hypotheses;
  const Hypotheses h = sample_hypotheses(ctx, flow_, cond, m, rng);
  Var key = reshape(add(base, scale(h.key, s)), {nf, nv, nj, 2});
  Array random = tape.detach(h.random).value();
  const Array& base_v = base.value();
  for (std::size_t row = 0; row < nfv; ++row)
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t d = 0; d < 2 * nj; ++d) {
        double& x = random[(row * m + k) * 2 * nj + d];
        x = base_v[row * 2 * nj + d] + s * x;
      }

  // Lift to query and anchor clouds with their point features.
  const PointCloud pc = lift_hypotheses(key, random.reshaped({nf, nv, m, nj, 2}), conf_a, rig);
  r.dropped = pc.dropped;
  const Array decoded_a = base_v.reshaped({nf, nv, nj, 2});
  const std::size_t d = cfg_.stpt.dim, na = pc.anchors.dim(1);
  const PointFeatures qf = points_(ctx, pc.query, decoded_a, conf_a, rig);
  const PointFeatures af = points_(ctx, ctx.c(pc.anchors), decoded_a, conf_a, rig);

  // Per window: gather frames and refine the queries.
  std::vector<std::size_t> rows;
  for (const auto& w : block.windows) rows.insert(rows.end(), w.begin(), w.end());
  const std::size_t nwt = rows.size();
  Var coords0 = reshape(gather_rows(reshape(pc.query, {nf, nj * 3}), rows), {nw, nt, nj, 3});
  Var feats0 = reshape(gather_rows(reshape(qf.feat, {nf, nj * d}), rows), {nw, nt, nj, d});
  Array anchors(Shape{nwt, na, 3});
  std::vector<bool> valid(nwt * na);
  for (std::size_t i = 0; i < nwt; ++i) {
    std::copy_n(pc.anchors.data() + rows[i] * na * 3, na * 3, anchors.data() + i * na * 3);
    for (std::size_t a = 0; a < na; ++a) valid[i * na + a] = pc.anchor_valid[rows[i] * na + a];
  }
  Var anchor_feats = reshape(gather_rows(reshape(af.feat, {nf, na * d}), rows), {nwt, na, d});
  r.initial = coords0.value();
  const StptOutput so = stpt_.forward(ctx, coords0, feats0, anchors, anchor_feats, valid);
  r.refined = so.coords;

  // Skeleton on the centre frame, from detached features.
  Var query_c = reshape(slice(so.coords, 1, tc, tc + 1), {nw, nj, 3});
  Var feat_c = tape.detach(reshape(slice(so.features, 1, tc, tc + 1), {nw, nj, d}));
  const SkeletonOut sk = head_(ctx, feat_c, tape.detach(query_c), tmpl_);
  r.skeleton = sk.joints.value();

  Array weight_c(Shape{nw, nv, nj});
  for (std::size_t i = 0; i < centre_n.size(); ++i)
    weight_c[i] = block.detector_confidence ? conf_c[i] : conf_a[centre_n[i]];
  const Proj2dLoss p2 = loss_proj2d(query_c, sk.joints, pseudo_c.reshaped({nw, nv, nj, 2}), weight_c, rig);
  r.terms.proj2d = p2.value;
  r.excluded = p2.excluded;
  r.total = total_loss(r.terms, cfg_.weights);
  return r;
}

}  // namespace mvh

#include "mvh/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mvh {

namespace {

constexpr double kMaskedScore = -1e30;

// conf [F, V, J] -> [F*J, V]
Array per_point_conf(const Array& conf) {
  const std::size_t f = conf.dim(0), v = conf.dim(1), j = conf.dim(2);
  Array out(Shape{f * j, v});
  for (std::size_t a = 0; a < f; ++a)
    for (std::size_t b = 0; b < v; ++b)
      for (std::size_t c = 0; c < j; ++c) out.at(a * j + c, b) = conf[(a * v + b) * j + c];
  return out;
}

}  // namespace

PointCloud lift_hypotheses(Var key, const Array& random, const Array& conf, const Rig& rig) {
  const Shape ks = key.shape();
  if (ks.size() != 4 || ks[3] != 2 || ks[1] != rig.size())
    throw ContractError("lift_hypotheses: key hypotheses must be [F, " + std::to_string(rig.size()) + ", J, 2], got " +
                        shape_str(ks));
  const std::size_t nf = ks[0], nv = ks[1], nj = ks[2];
  if (random.rank() != 5 || random.dim(0) != nf || random.dim(1) != nv || random.dim(3) != nj || random.dim(4) != 2)
    throw ContractError("lift_hypotheses: random hypotheses " + shape_str(random.shape()) + " vs key " + shape_str(ks));
  if (conf.shape() != Shape{nf, nv, nj})
    throw ContractError("lift_hypotheses: confidence " + shape_str(conf.shape()) + " vs key " + shape_str(ks));
  const std::size_t m = random.dim(2);

  PointCloud cloud;
  const Array pconf = per_point_conf(conf);
  Var obs = reshape(permute(key, {0, 2, 1, 3}), {nf * nj, nv, 2});
  cloud.query = reshape(triangulate_points(obs, pconf, rig), {nf, nj, 3});

  // Anchors: rows ordered (frame, draw, joint).
  const std::size_t na = m * nj;
  Array aobs(Shape{nf * na, nv, 2});
  Array aconf(Shape{nf * na, nv});
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < nj; ++j) {
        const std::size_t row = (f * m + r) * nj + j;
        for (std::size_t v = 0; v < nv; ++v) {
          const std::size_t src = ((((f * nv + v) * m + r) * nj) + j) * 2;
          aobs[(row * nv + v) * 2] = random[src];
          aobs[(row * nv + v) * 2 + 1] = random[src + 1];
          aconf.at(row, v) = pconf.at(f * nj + j, v);
        }
      }
  std::vector<bool> ok;
  const auto pts = triangulate_batch(aobs, aconf, rig, ok);
  cloud.anchors = Array(Shape{nf, na, 3}, 0.0);
  cloud.anchor_valid = ok;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!ok[i]) {
      ++cloud.dropped;
      continue;
    }
    for (int k = 0; k < 3; ++k) cloud.anchors[i * 3 + static_cast<std::size_t>(k)] = pts[i](k);
  }
  return cloud;
}

PointFeatureNet::PointFeatureNet(ParamStore& store, const std::string& name, const PointFeatureConfig& cfg, Rng& rng)
    : cfg_(cfg), mlp_(store, name, 4 * cfg.pe_freqs + 1, cfg.hidden, cfg.dim, rng, Act::Tanh) {}

Var PointFeatureNet::view_encoding(const Ctx& ctx, Var points, const Array& joints2d, const Array& conf,
                                   const Camera& cam, std::size_t view, std::vector<bool>& valid) const {
  const Shape ps = points.shape();
  const std::size_t nf = ps[0], nn = ps[1];
  const std::size_t nv = joints2d.dim(1), nj = joints2d.dim(2);
  ProjectedPoints proj = project_points(reshape(points, {nf * nn, 3}), cam);
  valid = proj.valid;
  const Array uv = proj.uv.value();

  const auto nearest = ctx.tape->cached_indices([&] {
    std::vector<std::size_t> idx(nf * nn, 0);
    for (std::size_t f = 0; f < nf; ++f)
      for (std::size_t i = 0; i < nn; ++i) {
        const std::size_t p = f * nn + i;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < nj; ++j) {
          const std::size_t o = ((f * nv + view) * nj + j) * 2;
          const double du = uv.at(p, 0) - joints2d[o], dv = uv.at(p, 1) - joints2d[o + 1];
          const double d = du * du + dv * dv;
          if (d < best) best = d, idx[p] = j;
        }
      }
    return idx;
  });
  Array c(Shape{nf * nn, 1});
  for (std::size_t p = 0; p < nf * nn; ++p) c[p] = conf[((p / nn) * nv + view) * nj + nearest[p]];

  const double half = cfg_.frame_size / 2.0;
  Var pos = scale(add_scalar(proj.uv, -half), 1.0 / half);
  return concat({sinusoidal_encoding(pos, cfg_.pe_freqs), ctx.c(std::move(c))}, -1);
}

PointFeatures PointFeatureNet::operator()(const Ctx& ctx, Var points, const Array& joints2d, const Array& conf,
                                          const Rig& rig) const {
  const Shape ps = points.shape();
  if (ps.size() != 3 || ps[2] != 3) throw ContractError("point features expect [F, N, 3], got " + shape_str(ps));
  const std::size_t nf = ps[0], nn = ps[1], np = nf * nn, d = cfg_.dim;
  if (joints2d.rank() != 4 || joints2d.dim(0) != nf || joints2d.dim(1) != rig.size() || joints2d.dim(3) != 2)
    throw ContractError("point features: joints " + shape_str(joints2d.shape()) + " for " + std::to_string(nf) +
                        " frames and " + std::to_string(rig.size()) + " views");
  std::vector<double> count(np, 0.0);
  Var acc;
  for (std::size_t v = 0; v < rig.size(); ++v) {
    std::vector<bool> valid;
    Var enc = view_encoding(ctx, points, joints2d, conf, rig.cameras[v], v, valid);
    Array mask(Shape{np, d}, 0.0);
    for (std::size_t p = 0; p < np; ++p)
      if (valid[p]) {
        count[p] += 1.0;
        std::fill_n(mask.data() + p * d, d, 1.0);
      }
    Var f = mul(mlp_(ctx, enc), ctx.c(std::move(mask)));
    acc = v == 0 ? f : add(acc, f);
  }
  PointFeatures out;
  out.hidden.assign(np, false);
  Array inv(Shape{np, d}, 0.0);
  for (std::size_t p = 0; p < np; ++p) {
    out.hidden[p] = count[p] == 0.0;
    if (count[p] > 0.0) std::fill_n(inv.data() + p * d, d, 1.0 / count[p]);
  }
  out.feat = reshape(mul(acc, ctx.c(std::move(inv))), {nf, nn, d});
  return out;
}

Neighbours knn(const Array& queries, const Array& keys, std::size_t k, const std::vector<bool>* key_valid) {
  if (queries.rank() != 3 || keys.rank() != 3 || queries.dim(0) != keys.dim(0) || queries.dim(2) != 3 ||
      keys.dim(2) != 3)
    throw ContractError("knn: bad shapes " + shape_str(queries.shape()) + " / " + shape_str(keys.shape()));
  if (k == 0) throw ContractError("knn: k must be positive");
  const std::size_t nf = queries.dim(0), nq = queries.dim(1), nk = keys.dim(1);
  Neighbours nb;
  nb.k = k;
  nb.index.assign(nf * nq * k, 0);
  nb.bias = Array(Shape{nf * nq, 1, k}, 0.0);
  nb.empty.assign(nf * nq, false);
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t i = 0; i < nq; ++i) {
      const double* q = queries.data() + (f * nq + i) * 3;
      cand.clear();
      for (std::size_t j = 0; j < nk; ++j) {
        const std::size_t row = f * nk + j;
        if (key_valid && !(*key_valid)[row]) continue;
        const double* p = keys.data() + row * 3;
        const double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
        cand.emplace_back(dx * dx + dy * dy + dz * dz, row);
      }
      const std::size_t take = std::min(k, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
      const std::size_t base = (f * nq + i) * k;
      for (std::size_t s = 0; s < k; ++s) {
        if (s < take) {
          nb.index[base + s] = cand[s].second;
        } else {
          nb.index[base + s] = take > 0 ? cand[0].second : 0;
          nb.bias[base + s] = kMaskedScore;
        }
      }
      nb.empty[f * nq + i] = take == 0;
    }
  return nb;
}

Neighbours knn_cached(Tape& tape, const Array& queries, const Array& keys, std::size_t k,
                      const std::vector<bool>* key_valid) {
  Neighbours nb;
  // The cache stores indices only; slots past the usable keys are encoded with an offset.
  const std::size_t masked = keys.size() / 3;
  const auto idx = tape.cached_indices([&] {
    Neighbours fresh = knn(queries, keys, k, key_valid);
    std::vector<std::size_t> enc = fresh.index;
    for (std::size_t i = 0; i < enc.size(); ++i)
      if (fresh.bias[i] != 0.0) enc[i] += masked;
    return enc;
  });
  const std::size_t np = idx.size() / k;
  nb.k = k;
  nb.index = idx;
  nb.bias = Array(Shape{np, 1, k}, 0.0);
  nb.empty.assign(np, false);
  for (std::size_t p = 0; p < np; ++p) {
    bool any = false;
    for (std::size_t s = 0; s < k; ++s) {
      std::size_t& r = nb.index[p * k + s];
      if (r >= masked) {
        r -= masked;
        nb.bias[p * k + s] = kMaskedScore;
      } else {
        any = true;
      }
    }
    nb.empty[p] = !any;
  }
  return nb;
}

AttentionOut neighbour_attention(Var q, Var keys, Var values, Var delta, const Neighbours& nb) {
  const Shape qs = q.shape();
  if (qs.size() != 2) throw ContractError("neighbour_attention: q must be [P, D], got " + shape_str(qs));
  const std::size_t np = qs[0], d = qs[1], k = nb.k;
  if (nb.index.size() != np * k || delta.shape() != Shape{np, k, d})
    throw ContractError("neighbour_attention: " + std::to_string(nb.index.size()) + " indices and delta " +
                        shape_str(delta.shape()) + " for q " + shape_str(qs));
  Tape& t = *q.tape;
  Var kd = add(reshape(gather_rows(keys, nb.index), {np, k, d}), delta);
  Var vd = add(reshape(gather_rows(values, nb.index), {np, k, d}), delta);
  Var scores = scale(matmul(reshape(q, {np, 1, d}), transpose(kd)), 1.0 / std::sqrt(static_cast<double>(d)));
  Var w = softmax(add(scores, t.constant(nb.bias)));
  return {reshape(matmul(w, vd), {np, d}), w};
}

AttentionOut temporal_attention(Var q, Var k, Var v) {
  const Shape s = q.shape();
  if (s.size() != 4) throw ContractError("temporal_attention expects [B, T, J, d], got " + shape_str(s));
  const std::size_t b = s[0], t = s[1], j = s[2];
  const auto by_joint = [&](Var x) {
    const std::size_t d = x.shape()[3];
    return reshape(permute(x, {0, 2, 1, 3}), {b * j, t, d});
  };
  AttentionOut att = scaled_dot_attention(by_joint(q), by_joint(k), by_joint(v));
  const std::size_t dv = v.shape()[3];
  return {permute(reshape(att.out, {b, j, t, dv}), {0, 2, 1, 3}), att.weights};
}

Stpt::Stpt(ParamStore& store, const std::string& name, const StptConfig& cfg, Rng& rng) : name_(name), cfg_(cfg) {
  const std::size_t d = cfg.dim;
  const std::size_t coord_in = 3 + 6 * cfg.coord_freqs;
  std::normal_distribution<double> small(0.0, 0.02);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = block(b);
    Block blk;
    blk.embed = Linear(store, p + ".embed", coord_in, d, rng);
    for (const char* ln : {"ln_s", "ln_t", "ln_c", "ln_a", "ln_f"}) {
      store.add(p + "." + ln + ".g", Array(Shape{d}, 1.0));
      store.add(p + "." + ln + ".b", Array(Shape{d}, 0.0));
    }
    blk.sq = Linear(store, p + ".sq", d, d, rng);
    blk.sk = Linear(store, p + ".sk", d, d, rng);
    blk.sv = Linear(store, p + ".sv", d, d, rng);
    blk.spos = Mlp2(store, p + ".spos", 3, d, d, rng, Act::Tanh);
    Array fr(Shape{cfg.max_frames, d});
    for (auto& x : fr.values()) x = small(rng);
    store.add(frames(b), std::move(fr));
    blk.tq = Linear(store, p + ".tq", d, d, rng);
    blk.tk = Linear(store, p + ".tk", d, d, rng);
    blk.tv = Linear(store, p + ".tv", d, d, rng);
    blk.cq = Linear(store, p + ".cq", d, d, rng);
    blk.ck = Linear(store, p + ".ck", d, d, rng);
    blk.cv = Linear(store, p + ".cv", d, d, rng);
    blk.cpos = Mlp2(store, p + ".cpos", 3, d, d, rng, Act::Tanh);
    blk.ffn = Mlp2(store, ffn(b), d, cfg.hidden, 3, rng, Act::Tanh, Init::Zero);
    blocks_.push_back(std::move(blk));
  }
}

Var Stpt::norm(const Ctx& ctx, std::size_t b, const char* which, Var x) const {
  const std::string p = block(b) + "." + which;
  return layer_norm(x, ctx.p(p + ".g"), ctx.p(p + ".b"));
}

Var Stpt::relative_encoding(const Ctx& ctx, const Mlp2& net, Var rel) const {
  return net(ctx, scale(rel, 1.0 / cfg_.coord_scale));
}

StptOutput Stpt::forward(const Ctx& ctx, Var coords, Var feats, const Array& anchors, Var anchor_feats,
                         const std::vector<bool>& anchor_valid) const {
  const Shape cs = coords.shape();
  if (cs.size() != 4 || cs[3] != 3) throw ContractError("stpt expects coords [B, T, J, 3], got " + shape_str(cs));
  const std::size_t nb = cs[0], nt = cs[1], nj = cs[2], d = cfg_.dim;
  const std::size_t nf = nb * nt, np = nf * nj;
  if (feats.shape() != Shape{nb, nt, nj, d})
    throw ContractError("stpt: features " + shape_str(feats.shape()) + " vs coords " + shape_str(cs));
  if (nt > cfg_.max_frames)
    throw ContractError("stpt: window of " + std::to_string(nt) + " frames exceeds " + std::to_string(cfg_.max_frames));
  if (anchors.rank() != 3 || anchors.dim(0) != nf || anchors.dim(2) != 3)
    throw ContractError("stpt: anchors " + shape_str(anchors.shape()) + " for " + std::to_string(nf) + " frames");
  const std::size_t na = anchors.dim(1);
  if (anchor_feats.shape() != Shape{nf, na, d} || anchor_valid.size() != nf * na)
    throw ContractError("stpt: anchor features " + shape_str(anchor_feats.shape()) + " vs anchors " +
                        shape_str(anchors.shape()));
  if (cfg_.knn > nj) throw ContractError("stpt: knn exceeds the number of query points");
  Tape& tape = *ctx.tape;

  // Centroid of the centre frame, per sequence, fixed for the whole forward pass.
  Array centre(Shape{nb, nt, nj, 3}, 0.0);
  {
    const Array& c0 = coords.value();
    const std::size_t tc = nt / 2;
    for (std::size_t b = 0; b < nb; ++b) {
      double m[3] = {0, 0, 0};
      for (std::size_t j = 0; j < nj; ++j)
        for (std::size_t k = 0; k < 3; ++k) m[k] += c0[((b * nt + tc) * nj + j) * 3 + k];
      for (std::size_t i = 0; i < nt * nj; ++i)
        for (std::size_t k = 0; k < 3; ++k) centre[(b * nt * nj + i) * 3 + k] = m[k] / static_cast<double>(nj);
    }
  }
  Var centre_v = tape.detach(ctx.c(std::move(centre)));

  const std::size_t off = (cfg_.max_frames - nt) / 2;
  std::vector<std::size_t> self_rows(np * cfg_.knn);
  for (std::size_t i = 0; i < self_rows.size(); ++i) self_rows[i] = i / cfg_.knn;
  const std::size_t kc = std::min(cfg_.knn, na);
  std::vector<std::size_t> self_rows_c(np * kc);
  for (std::size_t i = 0; i < self_rows_c.size(); ++i) self_rows_c[i] = i / kc;
  Var anchors_v = ctx.c(anchors.reshaped({nf * na, 3}));
  Var anchor_flat = reshape(anchor_feats, {nf * na, d});

  StptOutput out;
  Var c = coords;
  Var h = feats;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    Var rel = scale(sub(c, centre_v), 1.0 / cfg_.coord_scale);
    h = add(h, blk.embed(ctx, concat({rel, sinusoidal_encoding(rel, cfg_.coord_freqs)}, -1)));

    const Array cval = c.value().reshaped({nf, nj, 3});
    Var cflat = reshape(c, {np, 3});

    // Spatial attention among the query points of each frame.
    {
      const Neighbours nbq = knn_cached(tape, cval, cval, cfg_.knn);
      Var x = reshape(norm(ctx, b, "ln_s", h), {np, d});
      Var relc = sub(gather_rows(cflat, self_rows), gather_rows(cflat, nbq.index));
      Var delta = reshape(relative_encoding(ctx, blk.spos, relc), {np, cfg_.knn, d});
      AttentionOut att = neighbour_attention(blk.sq(ctx, x), blk.sk(ctx, x), blk.sv(ctx, x), delta, nbq);
      h = add(h, reshape(att.out, {nb, nt, nj, d}));
      out.attention.push_back(att.weights.value());
    }
    // Temporal attention per joint, frame embeddings added first.
    {
      Var x = norm(ctx, b, "ln_t", h);
      Var emb = slice(ctx.p(frames(b)), 0, off, off + nt);                          // [T, D]
      x = permute(add(permute(x, {0, 2, 1, 3}), emb), {0, 2, 1, 3});
      AttentionOut att = temporal_attention(blk.tq(ctx, x), blk.tk(ctx, x), blk.tv(ctx, x));
      h = add(h, att.out);
      out.attention.push_back(att.weights.value());
    }
    // Cross-attention to the fixed anchors of the same frame.
    if (kc > 0) {
      const Neighbours nba = knn_cached(tape, cval, anchors, kc, &anchor_valid);
      Var x = reshape(norm(ctx, b, "ln_c", h), {np, d});
      Var a = norm(ctx, b, "ln_a", anchor_flat);
      Var relc = sub(gather_rows(cflat, self_rows_c), gather_rows(anchors_v, nba.index));
      Var delta = reshape(relative_encoding(ctx, blk.cpos, relc), {np, kc, d});
      AttentionOut att = neighbour_attention(blk.cq(ctx, x), blk.ck(ctx, a), blk.cv(ctx, a), delta, nba);
      Var upd = att.out;
      if (std::any_of(nba.empty.begin(), nba.empty.end(), [](bool e) { return e; })) {
        Array keep(Shape{np, d}, 1.0);
        for (std::size_t p = 0; p < np; ++p)
          if (nba.empty[p]) std::fill_n(keep.data() + p * d, d, 0.0);
        upd = mul(upd, ctx.c(std::move(keep)));
      }
      h = add(h, reshape(upd, {nb, nt, nj, d}));
      out.attention.push_back(att.weights.value());
    }
    c = add(c, scale(blk.ffn(ctx, norm(ctx, b, "ln_f", h)), cfg_.coord_scale));
    out.block_coords.push_back(c.value());
  }
  out.coords = c;
  out.features = h;
  return out;
}

}  // namespace mvh

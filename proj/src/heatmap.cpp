#include "mvh/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace mvh {

bool render_one(double u_px, double v_px, const HeatmapGrid& grid, double* out) {
  const double cu = grid.to_cell(u_px), cv = grid.to_cell(v_px);
  const double pad = 3.0 * grid.sigma;
  const double w = static_cast<double>(grid.width), h = static_cast<double>(grid.height);
  if (!(cu >= -pad && cu <= w - 1.0 + pad && cv >= -pad && cv <= h - 1.0 + pad)) {
    std::fill(out, out + grid.cells(), 0.0);
    return false;
  }
  // Separable: exp(-(dx^2 + dy^2) / 2s^2) = gx * gy.
  const double inv = 1.0 / (2.0 * grid.sigma * grid.sigma);
  std::vector<double> gx(grid.width), gy(grid.height);
  for (std::size_t x = 0; x < grid.width; ++x) {
    const double d = static_cast<double>(x) - cu;
    gx[x] = std::exp(-d * d * inv);
  }
  for (std::size_t y = 0; y < grid.height; ++y) {
    const double d = static_cast<double>(y) - cv;
    gy[y] = std::exp(-d * d * inv);
  }
  for (std::size_t y = 0; y < grid.height; ++y)
    for (std::size_t x = 0; x < grid.width; ++x) out[y * grid.width + x] = gy[y] * gx[x];
  return true;
}

RenderedHeatmaps render_heatmaps(const Array& joints_px, const HeatmapGrid& grid) {
  if (joints_px.rank() != 2 || joints_px.cols() != 2)
    throw ContractError("render_heatmaps expects [J, 2] pixels, got " + shape_str(joints_px.shape()));
  if (!(grid.sigma > 0.0)) throw ContractError("heatmap sigma must be positive");
  const std::size_t nj = joints_px.rows();
  RenderedHeatmaps out{Array(Shape{nj, grid.cells()}), std::vector<bool>(nj, false)};
  for (std::size_t j = 0; j < nj; ++j)
    out.out_of_frame[j] = !render_one(joints_px.at(j, 0), joints_px.at(j, 1), grid, out.maps.data() + j * grid.cells());
  return out;
}

Eigen::Vector2d soft_argmax(std::span<const double> map, std::size_t height, std::size_t width) {
  if (map.size() != height * width) throw ContractError("soft_argmax: map size does not match grid");
  double total = 0.0, ex = 0.0, ey = 0.0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double h = map[y * width + x];
      total += h;
      ex += h * static_cast<double>(x);
      ey += h * static_cast<double>(y);
    }
  if (!(total > 0.0)) throw UndefinedLocation("soft_argmax of a heatmap with no positive mass");
  return {ex / total, ey / total};
}

double joint_confidence(std::span<const double> map) {
  double m = 0.0;
  for (double h : map) m = std::max(m, h);
  return std::clamp(m, kMinConfidence, 1.0);
}

Var soft_argmax_px(Var maps, const HeatmapGrid& grid) {
  const Array& H = maps.value();
  if (H.rank() != 2 || H.cols() != grid.cells())
    throw ContractError("soft_argmax_px expects [N, " + std::to_string(grid.cells()) + "], got " +
                        shape_str(H.shape()));
  const std::size_t n = H.rows(), w = grid.width;
  Array out(Shape{n, 2});
  Array totals(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const double* h = H.data() + i * grid.cells();
    double total = 0.0, ex = 0.0, ey = 0.0;
    for (std::size_t c = 0; c < grid.cells(); ++c) {
      total += h[c];
      ex += h[c] * static_cast<double>(c % w);
      ey += h[c] * static_cast<double>(c / w);
    }
    if (!(total > 0.0)) throw UndefinedLocation("soft_argmax of a heatmap with no positive mass");
    totals[i] = total;
    out.at(i, 0) = grid.to_px(ex / total);
    out.at(i, 1) = grid.to_px(ey / total);
  }
  const std::size_t ih = maps.id;
  const double res = grid.resolution;
  return maps.tape->record(std::move(out), {maps}, [ih, w, res, totals](Tape& tp, std::size_t self) {
    const Array& Y = tp.value(self);
    const Array& G = tp.grad(self);
    Array& GH = tp.grad(ih);
    const std::size_t cells = GH.cols();
    for (std::size_t i = 0; i < totals.size(); ++i) {
      // px = (E[c] + 0.5) * res - 0.5, dE[c]/dh_k = (c_k - E[c]) / total
      const double ex = (Y.at(i, 0) + 0.5) / res - 0.5;
      const double ey = (Y.at(i, 1) + 0.5) / res - 0.5;
      const double gx = G.at(i, 0) * res / totals[i], gy = G.at(i, 1) * res / totals[i];
      double* g = GH.data() + i * cells;
      for (std::size_t c = 0; c < cells; ++c)
        g[c] += gx * (static_cast<double>(c % w) - ex) + gy * (static_cast<double>(c / w) - ey);
    }
  });
}

Var heatmap_confidence(Var maps) { return clamp(max_axis(maps, -1), kMinConfidence, 1.0); }

Var loss_hmap(Var pred, Var target) {
  if (pred.shape() != target.shape())
    throw ContractError("loss_hmap: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()));
  // Equal cell counts per joint, so the mean of per-joint means is the overall mean.
  return mean(square(sub(pred, target)));
}

Var loss_hm2d(Var decoded, Var pseudo) {
  if (decoded.shape() != pseudo.shape() || decoded.value().cols() != 2)
    throw ContractError("loss_hm2d: shapes " + shape_str(decoded.shape()) + " and " + shape_str(pseudo.shape()));
  return scale(sum(square(sub(decoded, pseudo))), 1.0 / static_cast<double>(decoded.value().rows()));
}

HeatmapRefiner::HeatmapRefiner(ParamStore& store, const std::string& name, const HeatmapGrid& grid,
                               std::size_t rank, Rng& rng)
    : down_(store, name + ".down", grid.cells(), rank, rng), up_(store, name + ".up", rank, grid.cells(), rng, Init::Zero) {}

// y = x * exp(g), g = 3 tanh((tanh(x Wd + bd) Wu + bu) / 3). Fused into one node:
// the [N, cells] intermediates dominate the cost of the unfused graph.
Var HeatmapRefiner::operator()(const Ctx& ctx, Var maps) const {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  Var wd = ctx.p(down_.weight()), bd = ctx.p(down_.bias()), wu = ctx.p(up_.weight()), bu = ctx.p(up_.bias());
  const Array& x = maps.value();  // after the parameter nodes: appending may move node storage
  const std::size_t n = x.rows(), c = x.cols(), r = down_.out();
  if (x.rank() != 2 || c != down_.in()) throw ContractError("refiner expects [N, cells], got " + shape_str(x.shape()));

  auto hidden = std::make_shared<Mat>(CMap(x.data(), n, c) * CMap(wd.value().data(), c, r));
  hidden->rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bd.value().data(), static_cast<Eigen::Index>(r));
  *hidden = hidden->array().tanh().matrix();
  auto gain = std::make_shared<Mat>(*hidden * CMap(wu.value().data(), r, c));
  gain->rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bu.value().data(), static_cast<Eigen::Index>(c));
  auto gate = std::make_shared<Mat>(n, c);  // 1 - tanh^2 of the inner bound
  Array y(x.shape());
  for (Eigen::Index i = 0; i < gain->size(); ++i) {
    const double t = std::tanh(gain->data()[i] / 3.0);
    gate->data()[i] = 1.0 - t * t;
    gain->data()[i] = std::exp(3.0 * t);
    y[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] * gain->data()[i];
  }
  const std::size_t ix = maps.id, iwd = wd.id, ibd = bd.id, iwu = wu.id, ibu = bu.id;
  return ctx.tape->record(std::move(y), {maps, wd, bd, wu, bu},
                          [=](Tape& tp, std::size_t self) {
                            const Array& gy = tp.grad(self);
                            const Array& yv = tp.value(self);
                            // dL/du = gy * y * (1 - tanh^2)
                            Mat gu(n, c);
                            for (Eigen::Index i = 0; i < gu.size(); ++i) {
                              const auto k = static_cast<std::size_t>(i);
                              gu.data()[i] = gy[k] * yv[k] * gate->data()[i];
                            }
                            if (tp.requires_grad(ix)) {
                              Array& gx = tp.grad(ix);
                              for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += gy[k] * gain->data()[k];
                            }
                            // column sums in a fixed order: Eigen's vectorised reduction
                            // depends on buffer alignment, which breaks bit-reproducibility
                            const auto colsum = [](const Mat& m, double* out) {
                              for (Eigen::Index i = 0; i < m.rows(); ++i)
                                for (Eigen::Index j = 0; j < m.cols(); ++j) out[j] += m(i, j);
                            };
                            if (tp.requires_grad(ibu)) colsum(gu, tp.grad(ibu).data());
                            if (tp.requires_grad(iwu)) Map(tp.grad(iwu).data(), r, c).noalias() += hidden->transpose() * gu;
                            Mat ga = (gu * CMap(tp.value(iwu).data(), r, c).transpose()).cwiseProduct(
                                (1.0 - hidden->array().square()).matrix());
                            if (tp.requires_grad(ibd)) colsum(ga, tp.grad(ibd).data());
                            if (tp.requires_grad(iwd))
                              Map(tp.grad(iwd).data(), c, r).noalias() +=
                                  CMap(tp.value(ix).data(), n, c).transpose() * ga;
                            if (tp.requires_grad(ix))
                              Map(tp.grad(ix).data(), n, c).noalias() += ga * CMap(tp.value(iwd).data(), c, r).transpose();
                          });
}

}  // namespace mvh

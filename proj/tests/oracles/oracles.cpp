#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace quantkit::oracles {

void OracleReport::record(double expected, double actual, bool ok, const std::string& payload) {
  ++cases;
  const double abs_err = std::fabs(expected - actual);
  max_abs = std::max(max_abs, abs_err);
  if (expected != 0.0) max_rel = std::max(max_rel, abs_err / std::fabs(expected));
  if (!ok && first_failure.empty()) first_failure = payload;
}

Tensor oracle_conv(const Tensor& a, const Tensor& w, int stride, int pad, int groups) {
  const auto& as = a.shape();
  const auto& ws = w.shape();
  const int n = static_cast<int>(as[0]), c = static_cast<int>(as[1]), h = static_cast<int>(as[2]),
            wd = static_cast<int>(as[3]);
  const int oc = static_cast<int>(ws[0]), icg = static_cast<int>(ws[1]), kh = static_cast<int>(ws[2]),
            kw = static_cast<int>(ws[3]);
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  const int ocg = oc / groups;
  std::vector<float> out(static_cast<std::size_t>(n * oc * oh * ow));
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < oc; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double s = 0.0;
          for (int ci = 0; ci < icg; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = y * stride + ky - pad, ix = x * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                const int cin = (o / ocg) * icg + ci;
                s += a.value_at(static_cast<std::size_t>(((b * c + cin) * h + iy) * wd + ix)) *
                     w.value_at(static_cast<std::size_t>(((o * icg + ci) * kh + ky) * kw + kx));
              }
          out[static_cast<std::size_t>(((b * oc + o) * oh + y) * ow + x)] = static_cast<float>(s);
        }
  return Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(oc), static_cast<std::size_t>(oh),
                 static_cast<std::size_t>(ow)},
                std::move(out));
}

KlSweepOracle oracle_kl_sweep(const std::vector<std::uint64_t>& bins, double bin_width, double tolerance,
                              std::size_t levels) {
  const std::size_t nbins = bins.size();
  double total = 0.0;
  for (auto b : bins) total += static_cast<double>(b);

  KlSweepOracle r;
  for (std::size_t j = levels; j <= nbins; ++j) {
    // reference: first j bins, everything beyond folded into the last kept bin
    std::vector<double> p(j, 0.0);
    for (std::size_t i = 0; i < nbins; ++i) {
      if (i < j) p[i] += static_cast<double>(bins[i]);
      else p[j - 1] += static_cast<double>(bins[i]);
    }
    // merge the in-range bins into `levels` coarse bins of width j / levels
    const double width = static_cast<double>(j) / static_cast<double>(levels);
    auto lo = [&](std::size_t k) { return static_cast<double>(k) * width; };
    auto hi = [&](std::size_t k) { return k == levels - 1 ? static_cast<double>(j) : static_cast<double>(k + 1) * width; };
    auto overlap = [&](std::size_t i, std::size_t k) {
      const double a = std::max(static_cast<double>(i), lo(k));
      const double b = std::min(static_cast<double>(i + 1), hi(k));
      return b > a ? b - a : 0.0;
    };
    std::vector<double> merged(levels, 0.0), support(levels, 0.0);
    for (std::size_t k = 0; k < levels; ++k) {
      const auto first = static_cast<std::size_t>(std::floor(lo(k)));
      const auto last = std::min(j, static_cast<std::size_t>(std::ceil(hi(k))));
      for (std::size_t i = first; i < last; ++i) {
        const double ov = overlap(i, k);
        merged[k] += static_cast<double>(bins[i]) * ov;
        if (p[i] > 0.0) support[k] += ov;
      }
    }
    // expand back over the bins where the reference is nonzero
    std::vector<double> q(j, 0.0);
    for (std::size_t k = 0; k < levels; ++k) {
      if (support[k] == 0.0) continue;
      const auto first = static_cast<std::size_t>(std::floor(lo(k)));
      const auto last = std::min(j, static_cast<std::size_t>(std::ceil(hi(k))));
      for (std::size_t i = first; i < last; ++i)
        if (p[i] > 0.0) q[i] += merged[k] * overlap(i, k) / support[k];
    }
    double qsum = 0.0;
    for (std::size_t i = 0; i < j; ++i) {
      p[i] /= total;
      q[i] /= total;
      if (p[i] > 0.0 && q[i] == 0.0) q[i] = 1e-9;
      qsum += q[i];
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < j; ++i)
      if (p[i] > 0.0) kl += p[i] * std::log(p[i] / (q[i] / qsum));
    r.kl.push_back(std::max(0.0, kl));
  }

  double kl_min = std::numeric_limits<double>::infinity();
  for (std::size_t j = levels; j <= nbins; ++j)
    if (r.kl[j - levels] < kl_min) {
      kl_min = r.kl[j - levels];
      r.id_min = j;
    }
  r.id_opt = r.id_min;
  for (std::size_t j = levels; j <= nbins; ++j)
    if (r.kl[j - levels] <= tolerance * kl_min && j > r.id_opt) r.id_opt = j;
  r.scale = (static_cast<double>(r.id_opt) + 0.5) * bin_width / static_cast<double>(levels);
  return r;
}

double oracle_finite_diff(ModelGraph& g, const std::string& param, std::size_t index,
                          const std::function<double(const ModelGraph&)>& loss, double step) {
  auto values = g.params.at(param).f32();
  const float original = values[index];
  const auto up = static_cast<float>(original + step);
  const auto down = static_cast<float>(original - step);
  values[index] = up;
  const double l_up = loss(g);
  values[index] = down;
  const double l_down = loss(g);
  values[index] = original;
  return (l_up - l_down) / (static_cast<double>(up) - static_cast<double>(down));
}

PruneRecount oracle_prune_recount(const ModelGraph& before, const ModelGraph& after,
                                  const std::vector<std::string>& names) {
  PruneRecount r;
  std::vector<float> pruned, kept;
  for (const auto& name : names) {
    const auto& b = before.params.at(name);
    const auto& a = after.params.at(name);
    for (std::size_t i = 0; i < b.numel(); ++i) {
      ++r.total;
      const float orig = std::fabs(static_cast<float>(b.value_at(i)));
      if (a.value_at(i) == 0.0) {
        ++r.zeros;
        pruned.push_back(orig);
      } else {
        kept.push_back(orig);
      }
    }
  }
  std::sort(pruned.begin(), pruned.end());
  std::sort(kept.begin(), kept.end());
  r.max_pruned = pruned.empty() ? 0.0f : pruned.back();
  r.min_kept = kept.empty() ? std::numeric_limits<float>::infinity() : kept.front();
  return r;
}

}  // namespace quantkit::oracles

#include "puda/ssl.hpp"

#include <algorithm>
#include <cmath>

namespace puda::ssl {

std::size_t region_size(double fraction, std::size_t n) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw RangeError("region fraction must lie in (0,1]");
  }
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<SslBatchItem> build_ssl_batch(ad::Tape& tape, nn::Model& model,
                                          std::span<const PointCloud> clouds,
                                          const SslOptions& opts, Rng& rng, ad::Mode mode,
                                          Domain domain) {
  if (opts.variants < 1) throw RangeError("need at least one destroyed variant");
  if (clouds.empty()) throw std::invalid_argument("build_ssl_batch: no clouds");
  std::vector<SslBatchItem> items(clouds.size());
  std::vector<std::vector<RegionMask>> masks(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const auto& c = clouds[i];
    const std::size_t k = region_size(opts.region_fraction, c.size());
    if (c.size() < opts.variants) {
      throw RangeError("cloud of " + std::to_string(c.size()) + " points cannot host " +
                       std::to_string(opts.variants) + " distinct regions");
    }
    std::vector<std::size_t> seeds;
    while (seeds.size() < opts.variants) {
      const std::size_t s = rng.index(c.size());
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
    }
    for (auto s : seeds) masks[i].push_back(region_from_seed(c.points, s, k));
  }

  const auto batch = nn::CloudBatch::from(clouds);
  auto points = tape.constant(batch.points);
  auto disp = model.transform.forward(tape, points, batch.offsets, mode);

  for (std::size_t i = 0; i < clouds.size(); ++i) {
    auto& item = items[i];
    item.original = clouds[i];
    item.domain = domain;
    const auto lo = batch.offsets[i], hi = batch.offsets[i + 1];
    item.original_var = tape.constant(to_tensor(clouds[i]));
    auto d = ad::slice_rows(disp, lo, hi);
    for (auto& mask : masks[i]) {
      Variant v;
      v.cloud = nn::apply_destruction(item.original_var, mask, d, opts.alpha);
      v.encoder_input =
          opts.detach_recon_from_transform ? tape.constant(v.cloud.value()) : v.cloud;
      v.mask = std::move(mask);
      item.variants.push_back(std::move(v));
    }
  }
  return items;
}

SslLossParts ssl_loss(ad::Tape& tape, nn::Model& model, std::span<const SslBatchItem> items,
                      const SslOptions& opts, ad::Mode mode) {
  if (items.empty()) throw std::invalid_argument("ssl_loss: empty batch");
  std::vector<ad::Var> inputs;
  std::vector<std::size_t> offsets{0};
  for (const auto& item : items) {
    if (item.variants.empty()) throw ContractError("ssl item without variants");
    for (const auto& v : item.variants) {
      if (v.cloud.tape() != &tape || v.encoder_input.tape() != &tape ||
          item.original_var.tape() != &tape) {
        throw ContractError("ssl item was not built on this tape");
      }
      inputs.push_back(v.encoder_input);
      offsets.push_back(offsets.back() + v.encoder_input.value().rows());
    }
  }
  auto stacked = ad::concat_rows(inputs);
  auto features = model.encoder.forward(tape, stacked, offsets, mode);
  auto recon = nn::recon_head(model, tape, features, mode);

  std::vector<ad::Var> recon_terms, adv_terms;
  std::size_t row = 0;
  for (const auto& item : items) {
    std::vector<ad::Var> rc, adv;
    for (const auto& v : item.variants) {
      rc.push_back(chamfer_distance(nn::recon_cloud(recon, row++), item.original_var));
      adv.push_back(chamfer_distance(v.cloud, item.original_var));
    }
    const double inv_m = 1.0 / static_cast<double>(item.variants.size());
    recon_terms.push_back(ad::scale(ad::add_n(rc), inv_m));
    adv_terms.push_back(ad::scale(ad::add_n(adv), inv_m));
  }
  const double inv_b = 1.0 / static_cast<double>(items.size());
  SslLossParts parts;
  parts.recon_term = ad::scale(ad::add_n(recon_terms), opts.lambda1 * inv_b);
  parts.adv_term = ad::scale(ad::add_n(adv_terms), opts.lambda2 * inv_b);
  parts.total = ad::sub(parts.recon_term, parts.adv_term);
  return parts;
}

PointCloud rotate_x_quarter(const PointCloud& cloud, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  static constexpr int kCos[4] = {1, 0, -1, 0};
  static constexpr int kSin[4] = {0, 1, 0, -1};
  const double c = kCos[q], s = kSin[q];
  PointCloud out = cloud;
  if (q == 0) return out;
  for (auto& p : out.points) {
    const double y = p[1], z = p[2];
    p[1] = c * y - s * z;
    p[2] = s * y + c * z;
  }
  return out;
}

std::pair<PointCloud, int> rotation_task(const PointCloud& cloud, Rng& rng) {
  const int label = static_cast<int>(rng.index(4));
  return {rotate_x_quarter(cloud, label), label};
}

ad::Var rotation_loss(ad::Var logits, std::span<const int> labels) {
  if (logits.value().rank() != 2 || logits.value().dim(1) != 4) {
    throw DimensionError("rotation loss expects [b,4] logits, got " +
                         ad::shape_str(logits.value().shape()));
  }
  return ad::softmax_cross_entropy(logits, labels);
}

}  // namespace puda::ssl

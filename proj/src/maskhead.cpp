#include "pcan/maskhead.hpp"

#include <stdexcept>

namespace pcan::maskhead {

using namespace pcan::nn;

MaskHead::MaskHead(ParamStore& ps, const MaskHeadConfig& cfg, pcan::Rng& rng)
    : cfg_(cfg),
      fuse_proj_(ps, "maskhead.fuse_proj", cfg.channels, cfg.mask_channels, rng),
      box_mlp_(ps, "maskhead.box_mlp", {cfg.channels, cfg.channels, cfg.channels, 4}, rng,
               /*zero_init_last=*/true),
      class_head_(ps, "maskhead.class_head", cfg.channels, 1, rng),
      embed_head_(ps, "maskhead.embed_head", cfg.channels, cfg.embed_dim, rng),
      kernel_mlp_(ps, "maskhead.kernel_mlp", {cfg.channels, cfg.channels, 3 * 3 * cfg.mask_channels + 1},
                  rng) {}

FusedMap MaskHead::fuse_fpn(const transformer::MemoryFeatures& mem) const {
  if (mem.level_dims.empty()) throw std::invalid_argument("fuse_fpn: empty memory");
  // Split the flattened memory rows back into [C,H,W] maps per level.
  std::vector<Var> maps;
  int offset = 0;
  for (const auto& [h, w] : mem.level_dims) {
    maps.push_back(rows_to_chw(slice_rows(mem.rows, offset, offset + h * w), mem.channels, h, w));
    offset += h * w;
  }
  if (offset != mem.rows.value().rows())
    throw std::invalid_argument("fuse_fpn: memory rows do not match level dims");
  // Top-down: coarsest upsampled and summed into finer levels.
  Var x = maps.back();
  for (int i = int(maps.size()) - 2; i >= 0; --i) {
    const auto& [h, w] = mem.level_dims[size_t(i)];
    Var up = upsample2x_nearest(x);
    if (up.value().dim(1) != h || up.value().dim(2) != w)
      throw std::invalid_argument("fuse_fpn: level shapes are not dyadic");
    x = add(up, maps[size_t(i)]);
  }
  FusedMap out;
  out.height = mem.level_dims[0].first;
  out.width = mem.level_dims[0].second;
  out.chw = rows_to_chw(fuse_proj_(chw_to_rows(x)), cfg_.mask_channels, out.height, out.width);
  return out;
}

Var MaskHead::dynamic_mask(const Var& kernel_params_row, const FusedMap& fused) const {
  const int n_params = kernel_params_per_query();
  if (kernel_params_row.value().ndim() != 2 || kernel_params_row.value().rows() != 1 ||
      kernel_params_row.value().cols() != n_params)
    throw std::invalid_argument("dynamic_mask: expected 1 x " + std::to_string(n_params) +
                                " kernel parameters");
  const Var w = reshape(slice_cols(kernel_params_row, 0, n_params - 1), {1, cfg_.mask_channels, 3, 3});
  const Var b = reshape(slice_cols(kernel_params_row, n_params - 1, n_params), {1});
  return reshape(conv2d(fused.chw, w, b, 1, 1), {1, fused.height * fused.width});
}

PredictionSet MaskHead::predict(const transformer::DecoderOutput& dec, const FusedMap& fused) const {
  PredictionSet out;
  out.boxes = sigmoid(add(logit(dec.anchors), box_mlp_(dec.queries)));
  out.class_logits = class_head_(dec.queries);
  out.embeddings = embed(dec.queries);
  const Var kernels = kernel_mlp_(dec.queries);
  const int n = dec.queries.value().rows();
  std::vector<Var> masks;
  masks.reserve(size_t(n));
  for (int i = 0; i < n; ++i) masks.push_back(dynamic_mask(slice_rows(kernels, i, i + 1), fused));
  out.mask_logits = concat_rows(masks);
  out.mask_h = fused.height;
  out.mask_w = fused.width;
  return out;
}

Var MaskHead::embed(const Var& queries) const {
  const Var e = embed_head_(queries);
  return cfg_.normalize_embeddings ? l2_normalize_rows(e) : e;
}

}  // namespace pcan::maskhead

#include "cubevit/vit3d.hpp"

#include <algorithm>

#include "cubevit/errors.hpp"

namespace cubevit {

namespace {

std::size_t padded(std::size_t extent, std::size_t cube) { return (extent + cube - 1) / cube * cube; }

}  // namespace

std::array<std::size_t, 3> CubeSpec::grid() const {
  validate();
  std::array<std::size_t, 3> g{};
  for (int a = 0; a < 3; ++a) g[a] = padded(volume[a], cube[a]) / cube[a];
  return g;
}

void CubeSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (cube[a] == 0 || volume[a] == 0) throw UsageError("cube and volume extents must be positive");
    if (!pad_to_multiple && volume[a] % cube[a] != 0) {
      throw UsageError("volume extent " + std::to_string(volume[a]) + " on axis " + std::to_string(a) +
                       " is not a multiple of cube extent " + std::to_string(cube[a]));
    }
  }
}

std::size_t sequence_length(const CubeSpec& spec) {
  auto g = spec.grid();
  return g[0] * g[1] * g[2];
}

std::size_t token_index(const std::array<std::size_t, 3>& grid, std::size_t iz, std::size_t ih,
                        std::size_t iw) {
  return (iz * grid[1] + ih) * grid[2] + iw;
}

std::array<std::size_t, 3> token_position(const std::array<std::size_t, 3>& grid, std::size_t index) {
  const std::size_t iw = index % grid[2];
  const std::size_t ih = (index / grid[2]) % grid[1];
  const std::size_t iz = index / (grid[1] * grid[2]);
  return {iz, ih, iw};
}

namespace {

void patchify_into(const Volume& vol, const CubeSpec& spec, double* out) {
  if (vol.depth != spec.volume[0] || vol.height != spec.volume[1] || vol.width != spec.volume[2]) {
    throw ShapeError("volume " + shape_str({vol.depth, vol.height, vol.width}) +
                     " does not match cube spec volume " +
                     shape_str({spec.volume[0], spec.volume[1], spec.volume[2]}));
  }
  const auto g = spec.grid();
  const auto [cz, ch, cw] = spec.cube;
  const std::size_t per = cz * ch * cw;
  for (std::size_t iz = 0; iz < g[0]; ++iz)
    for (std::size_t ih = 0; ih < g[1]; ++ih)
      for (std::size_t iw = 0; iw < g[2]; ++iw) {
        double* row = out + token_index(g, iz, ih, iw) * per;
        std::size_t c = 0;
        for (std::size_t dz = 0; dz < cz; ++dz)
          for (std::size_t dh = 0; dh < ch; ++dh)
            for (std::size_t dw = 0; dw < cw; ++dw, ++c) {
              const std::size_t z = iz * cz + dz, h = ih * ch + dh, w = iw * cw + dw;
              row[c] = (z < vol.depth && h < vol.height && w < vol.width) ? vol.at(z, h, w) : 0.0;
            }
      }
}

}  // namespace

Tensor patchify(const Volume& volume, const CubeSpec& spec) {
  const Volume* one[] = {&volume};
  return patchify(one, spec);
}

Tensor patchify(std::span<const Volume* const> volumes, const CubeSpec& spec) {
  if (volumes.empty()) throw UsageError("patchify of an empty batch");
  const std::size_t L = sequence_length(spec), per = spec.voxels_per_cube();
  Tensor out({volumes.size() * L, per});
  for (std::size_t b = 0; b < volumes.size(); ++b) {
    patchify_into(*volumes[b], spec, out.data().data() + b * L * per);
  }
  return out;
}

Volume unpatchify(const Tensor& patches, const CubeSpec& spec) {
  const auto g = spec.grid();
  const auto [cz, ch, cw] = spec.cube;
  if (patches.rows() != g[0] * g[1] * g[2] || patches.cols() != cz * ch * cw) {
    throw ShapeError("unpatchify: patch table " + shape_str(patches.shape()) + " does not match spec");
  }
  Volume vol(spec.volume[0], spec.volume[1], spec.volume[2]);
  for (std::size_t t = 0; t < patches.rows(); ++t) {
    const auto [iz, ih, iw] = token_position(g, t);
    std::size_t c = 0;
    for (std::size_t dz = 0; dz < cz; ++dz)
      for (std::size_t dh = 0; dh < ch; ++dh)
        for (std::size_t dw = 0; dw < cw; ++dw, ++c) {
          const std::size_t z = iz * cz + dz, h = ih * ch + dh, w = iw * cw + dw;
          if (z < vol.depth && h < vol.height && w < vol.width) vol.at(z, h, w) = patches.at(t, c);
        }
  }
  return vol;
}

ad::Var cube_embed(const Volume& volume, const CubeSpec& spec, const ad::Var& weight, const ad::Var& bias) {
  return ad::linear(ad::Var::constant(patchify(volume, spec)), weight, bias);
}

ad::Var positional_encode(const ad::Var& tokens, const ad::Var& planar, const ad::Var& depth) {
  const std::size_t L = planar.value().rows() * depth.value().rows();
  if (tokens.value().rows() % L != 0) {
    throw ShapeError("positional_encode: " + std::to_string(tokens.value().rows()) +
                     " tokens do not tile a grid of " + std::to_string(L));
  }
  return ad::add_tiled(tokens, ad::factored_position(planar, depth));
}

void ViTConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw UsageError("embedding width " + std::to_string(dim) + " must be divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (mlp_ratio == 0) throw UsageError("mlp_ratio must be positive");
  if (tile == 0) throw UsageError("attention tile must be positive");
}

namespace {

std::string block_prefix(const std::string& prefix, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02zu", i);
  return prefix + ".blocks." + buf;
}

}  // namespace

void init_transformer(ParamStore& store, const std::string& prefix, const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.dim, hidden = cfg.dim * cfg.mlp_ratio;
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = block_prefix(prefix, i);
    store.add(p + ".ln1.g", Tensor({d}, 1.0));
    store.add(p + ".ln1.b", Tensor({d}, 0.0));
    init_attention_params(store, p + ".attn", d, rng);
    store.add(p + ".ln2.g", Tensor({d}, 1.0));
    store.add(p + ".ln2.b", Tensor({d}, 0.0));
    store.add(p + ".fc1.w", xavier_uniform(d, hidden, rng));
    store.add(p + ".fc1.b", Tensor({hidden}, 0.0));
    store.add(p + ".fc2.w", xavier_uniform(hidden, d, rng));
    store.add(p + ".fc2.b", Tensor({d}, 0.0));
  }
  store.add(prefix + ".norm.g", Tensor({d}, 1.0));
  store.add(prefix + ".norm.b", Tensor({d}, 0.0));
}

ad::Var transformer_block(const ad::Var& x, const ParamStore& store, const std::string& prefix,
                          std::size_t block, const ViTConfig& cfg, std::size_t seq_len) {
  const std::string p = block_prefix(prefix, block);
  ad::Var h = ad::layer_norm(x, store.get(p + ".ln1.g"), store.get(p + ".ln1.b"));
  h = multi_head_attention(h, attention_weights(store, p + ".attn", cfg.heads), seq_len, cfg.tile);
  ad::Var r = ad::add(x, h);
  h = ad::layer_norm(r, store.get(p + ".ln2.g"), store.get(p + ".ln2.b"));
  h = ad::gelu(ad::linear(h, store.get(p + ".fc1.w"), store.get(p + ".fc1.b")));
  h = ad::linear(h, store.get(p + ".fc2.w"), store.get(p + ".fc2.b"));
  return ad::add(r, h);
}

ad::Var run_blocks(const ad::Var& x, const ParamStore& store, const std::string& prefix,
                   const ViTConfig& cfg, std::size_t seq_len, std::size_t first, std::size_t last) {
  ad::Var h = x;
  for (std::size_t i = first; i < last; ++i) {
    h = transformer_block(h, store, prefix, i, cfg, seq_len);
    if (!h.value().all_finite()) {
      throw NumericError("non-finite activation after transformer block " + std::to_string(i),
                         static_cast<std::int64_t>(i));
    }
  }
  return h;
}

ad::Var final_norm(const ad::Var& x, const ParamStore& store, const std::string& prefix) {
  return ad::layer_norm(x, store.get(prefix + ".norm.g"), store.get(prefix + ".norm.b"));
}

ad::Var encode(const ad::Var& tokens, const ViTConfig& cfg, const ParamStore& store,
               const std::string& prefix, std::size_t seq_len) {
  cfg.validate();
  return final_norm(run_blocks(tokens, store, prefix, cfg, seq_len, 0, cfg.depth), store, prefix);
}

void CubeVit::init(ParamStore& store, Rng& rng) const {
  const auto g = cube.grid();
  const std::size_t per = cube.voxels_per_cube();
  store.add(prefix + ".embed.w", xavier_uniform(per, config.dim, rng));
  store.add(prefix + ".embed.b", Tensor({config.dim}, 0.0));
  store.add(prefix + ".pos_planar", normal_init({g[1] * g[2], config.dim}, 0.02, rng));
  store.add(prefix + ".pos_depth", normal_init({g[0], config.dim}, 0.02, rng));
  init_transformer(store, prefix, config, rng);
}

ad::Var CubeVit::embed(const ParamStore& store, std::span<const Volume* const> volumes) const {
  ad::Var patches = ad::Var::constant(patchify(volumes, cube));
  ad::Var tokens = ad::linear(patches, store.get(prefix + ".embed.w"), store.get(prefix + ".embed.b"));
  return positional_encode(tokens, store.get(prefix + ".pos_planar"), store.get(prefix + ".pos_depth"));
}

ad::Var CubeVit::forward(const ParamStore& store, std::span<const Volume* const> volumes) const {
  return encode(embed(store, volumes), config, store, prefix, seq_len());
}

ad::Var CubeVit::pooled(const ParamStore& store, std::span<const Volume* const> volumes) const {
  return ad::segment_mean(forward(store, volumes), seq_len());
}

}  // namespace cubevit

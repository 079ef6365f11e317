#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>

#include "cubevit/attention.hpp"
#include "cubevit/autodiff.hpp"
#include "cubevit/params.hpp"
#include "cubevit/volume.hpp"

namespace cubevit {

/// Cube extents (z, h, w) tiling a volume of extents (Z, H, W).
struct CubeSpec {
  std::array<std::size_t, 3> cube{3, 16, 16};
  std::array<std::size_t, 3> volume{60, 256, 256};
  // Zero-pad non-divisible volumes up to the next multiple instead of rejecting them.
  bool pad_to_multiple = false;

  std::array<std::size_t, 3> grid() const;
  std::size_t voxels_per_cube() const { return cube[0] * cube[1] * cube[2]; }
  void validate() const;
};

/// (Z*H*W) / (z*h*w), with extents rounded up when padding is enabled.
std::size_t sequence_length(const CubeSpec& spec);

// Tokens are ordered (iz, ih, iw) lexicographically.
std::size_t token_index(const std::array<std::size_t, 3>& grid, std::size_t iz, std::size_t ih,
                        std::size_t iw);
std::array<std::size_t, 3> token_position(const std::array<std::size_t, 3>& grid, std::size_t index);

/// Rows are cubes in token order; columns are the cube's voxels in (dz, dh, dw) order.
Tensor patchify(const Volume& volume, const CubeSpec& spec);
Tensor patchify(std::span<const Volume* const> volumes, const CubeSpec& spec);
// Inverse of patchify for a single volume (padding is dropped).
Volume unpatchify(const Tensor& patches, const CubeSpec& spec);

/// Affine map of each cube's voxels: patchify(volume) * weight + bias.
ad::Var cube_embed(const Volume& volume, const CubeSpec& spec, const ad::Var& weight, const ad::Var& bias);

/// tokens (B*L x D) get planar[ih*Wg + iw] + depth[iz] added to token (iz, ih, iw).
ad::Var positional_encode(const ad::Var& tokens, const ad::Var& planar, const ad::Var& depth);

enum class VitRole { kEncoder, kDecoder };

struct ViTConfig {
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t dim = 32;
  std::size_t mlp_ratio = 4;
  VitRole role = VitRole::kEncoder;
  std::size_t tile = kDefaultAttentionTile;

  void validate() const;

  static ViTConfig large_encoder() { return {24, 16, 1024, 4, VitRole::kEncoder}; }
  static ViTConfig small_decoder() { return {8, 16, 512, 4, VitRole::kDecoder}; }
};

/// Adds the pre-norm blocks and final norm of a transformer stack under `prefix`.
void init_transformer(ParamStore& store, const std::string& prefix, const ViTConfig& cfg, Rng& rng);

/// One pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)) with a GELU in between.
ad::Var transformer_block(const ad::Var& x, const ParamStore& store, const std::string& prefix,
                          std::size_t block, const ViTConfig& cfg, std::size_t seq_len);

/// Blocks [first, last) without the final norm. Throws NumericError naming the
/// first block whose output is non-finite.
ad::Var run_blocks(const ad::Var& x, const ParamStore& store, const std::string& prefix,
                   const ViTConfig& cfg, std::size_t seq_len, std::size_t first, std::size_t last);

/// Full stack: every block, then the final layer norm.
ad::Var encode(const ad::Var& tokens, const ViTConfig& cfg, const ParamStore& store,
               const std::string& prefix, std::size_t seq_len);

ad::Var final_norm(const ad::Var& x, const ParamStore& store, const std::string& prefix);

/// A cube-token ViT bound to a parameter prefix: cube embedding, factored
/// positional tables, and a transformer stack.
struct CubeVit {
  CubeSpec cube;
  ViTConfig config;
  std::string prefix = "enc";

  std::size_t seq_len() const { return sequence_length(cube); }
  void init(ParamStore& store, Rng& rng) const;

  // Embedded + position-encoded tokens for a batch, (B*L) x D.
  ad::Var embed(const ParamStore& store, std::span<const Volume* const> volumes) const;
  // Final-norm token embeddings, (B*L) x D.
  ad::Var forward(const ParamStore& store, std::span<const Volume* const> volumes) const;
  // Mean-pooled representation, B x D.
  ad::Var pooled(const ParamStore& store, std::span<const Volume* const> volumes) const;
};

}  // namespace cubevit

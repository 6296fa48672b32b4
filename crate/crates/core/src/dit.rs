//! Cross-attention diffusion transformer over patchified latents.
//!
//! Each block runs gated self-attention, gated cross-attention against the
//! text sequence, and a gated feed-forward. Per-block shift/scale/gate come
//! from the timestep embedding through a zero-initialized projection, so a
//! fresh model is the identity and the zero-initialized output head makes
//! the predicted noise exactly zero.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::nn::{plain_layer_norm, Linear, ParamInit};
use crate::tensor::{LayerParams, Tensor};
use crate::text::{key_padding_mask, merge_heads, split_heads, split_qkv};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: (usize, usize, usize),
    pub text_width: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig { hidden: 128, blocks: 4, heads: 4, patch: (1, 2, 2), text_width: 64 }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "dit hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("dit needs at least one block".into()));
        }
        Ok(())
    }
}

/// Latent grid the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGeometry {
    pub channels: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentGeometry {
    pub fn token_grid(&self, patch: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (pt, ph, pw) = patch;
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(Error::Config("patch extents must be positive".into()));
        }
        if self.t % pt != 0 || self.h % ph != 0 || self.w % pw != 0 {
            return Err(Error::Config(format!(
                "patch {patch:?} does not divide latent grid ({}, {}, {})",
                self.t, self.h, self.w
            )));
        }
        Ok((self.t / pt, self.h / ph, self.w / pw))
    }
}

/// Sinusoidal timestep features: half sine, half cosine over geometric
/// frequencies from 1 down to 1e-4.
pub fn timestep_embedding(t: usize, dim: usize, t_train: usize) -> Result<Vec<f32>> {
    if dim % 2 != 0 {
        return Err(Error::invalid(format!("timestep embedding dim {dim} must be even")));
    }
    if t >= t_train {
        return Err(Error::invalid(format!("timestep {t} out of range 0..{t_train}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (10_000f64).powf(-exponent);
        let arg = (t as f64 * freq) as f32;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

struct DitBlock {
    adaln: Linear,
    qkv: Linear,
    attn_proj: Linear,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

pub struct Dit {
    pub cfg: DitConfig,
    pub geometry: LatentGeometry,
    pub params: LayerParams,
    patch_embed: Linear,
    pos_path: String,
    t_fc1: Linear,
    t_fc2: Linear,
    blocks: Vec<DitBlock>,
    final_adaln: Linear,
    head: Linear,
    token_count: usize,
    patch_dim: usize,
}

impl Dit {
    pub fn new(cfg: DitConfig, geometry: LatentGeometry, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (gt, gh, gw) = geometry.token_grid(cfg.patch)?;
        let token_count = gt * gh * gw;
        let patch_dim = geometry.channels * cfg.patch.0 * cfg.patch.1 * cfg.patch.2;
        let d = cfg.hidden;

        let mut params = LayerParams::new();
        let mut init = ParamInit::new(&mut params, rng);
        let patch_embed = Linear::init(&mut init, "dit.patch_embed", patch_dim, d)?;
        init.params.insert(
            "dit.position_embedding",
            Tensor::randn_scaled(&[token_count, d], 0.02, init.rng),
        )?;
        let t_fc1 = Linear::init(&mut init, "dit.timestep.fc1", d, d)?;
        let t_fc2 = Linear::init(&mut init, "dit.timestep.fc2", d, d)?;
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            let p = format!("dit.block{b}");
            blocks.push(DitBlock {
                adaln: Linear::init_zeroed(&mut init, &format!("{p}.adaln"), d, 9 * d)?,
                qkv: Linear::init(&mut init, &format!("{p}.qkv"), d, 3 * d)?,
                attn_proj: Linear::init(&mut init, &format!("{p}.attn_proj"), d, d)?,
                cross_q: Linear::init(&mut init, &format!("{p}.cross_q"), d, d)?,
                cross_k: Linear::init(&mut init, &format!("{p}.cross_k"), cfg.text_width, d)?,
                cross_v: Linear::init(&mut init, &format!("{p}.cross_v"), cfg.text_width, d)?,
                cross_proj: Linear::init(&mut init, &format!("{p}.cross_proj"), d, d)?,
                fc1: Linear::init(&mut init, &format!("{p}.fc1"), d, 4 * d)?,
                fc2: Linear::init(&mut init, &format!("{p}.fc2"), 4 * d, d)?,
            });
        }
        let final_adaln = Linear::init_zeroed(&mut init, "dit.final.adaln", d, 2 * d)?;
        let head = Linear::init_zeroed(&mut init, "dit.final.head", d, patch_dim)?;
        Ok(Dit {
            cfg,
            geometry,
            params,
            patch_embed,
            pos_path: "dit.position_embedding".into(),
            t_fc1,
            t_fc2,
            blocks,
            final_adaln,
            head,
            token_count,
            patch_dim,
        })
    }

    fn patchify_map(&self, b: usize) -> (Arc<Vec<u32>>, [usize; 3]) {
        let g = &self.geometry;
        let (pt, ph, pw) = self.cfg.patch;
        let (gt, gh, gw) = (g.t / pt, g.h / ph, g.w / pw);
        let mut map = Vec::with_capacity(b * self.token_count * self.patch_dim);
        for bi in 0..b {
            for tp in 0..gt {
                for hp in 0..gh {
                    for wp in 0..gw {
                        for c in 0..g.channels {
                            for dt in 0..pt {
                                for dh in 0..ph {
                                    for dw in 0..pw {
                                        let src = ((((bi * g.channels + c) * g.t
                                            + (tp * pt + dt))
                                            * g.h
                                            + (hp * ph + dh))
                                            * g.w)
                                            + (wp * pw + dw);
                                        map.push(src as u32);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (Arc::new(map), [b, self.token_count, self.patch_dim])
    }

    fn unpatchify_map(&self, b: usize) -> (Arc<Vec<u32>>, [usize; 5]) {
        let g = &self.geometry;
        let (pt, ph, pw) = self.cfg.patch;
        let (gt, gh, gw) = (g.t / pt, g.h / ph, g.w / pw);
        let mut map = vec![0u32; b * g.channels * g.t * g.h * g.w];
        for bi in 0..b {
            for tp in 0..gt {
                for hp in 0..gh {
                    for wp in 0..gw {
                        let token = (tp * gh + hp) * gw + wp;
                        for c in 0..g.channels {
                            for dt in 0..pt {
                                for dh in 0..ph {
                                    for dw in 0..pw {
                                        let feat = ((c * pt + dt) * ph + dh) * pw + dw;
                                        let src = (bi * self.token_count + token) * self.patch_dim
                                            + feat;
                                        let dst = ((((bi * g.channels + c) * g.t
                                            + (tp * pt + dt))
                                            * g.h
                                            + (hp * ph + dh))
                                            * g.w)
                                            + (wp * pw + dw);
                                        map[dst] = src as u32;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (Arc::new(map), [b, g.channels, g.t, g.h, g.w])
    }

    /// Slice the [B, 9d] adaptive-norm projection into chunk `c` as [B, 1, d].
    fn adaln_chunk(
        &self,
        g: &mut Graph,
        packed: NodeId,
        b: usize,
        chunks: usize,
        c: usize,
    ) -> Result<NodeId> {
        let d = self.cfg.hidden;
        let mut map = Vec::with_capacity(b * d);
        for bi in 0..b {
            for i in 0..d {
                map.push((bi * chunks * d + c * d + i) as u32);
            }
        }
        g.index_map(packed, Arc::new(map), &[b, 1, d])
    }

    /// modulate(x) = LN(x) * (1 + scale) + shift, broadcasting [B,1,d].
    fn modulate(
        &self,
        g: &mut Graph,
        x: NodeId,
        shift: NodeId,
        scale: NodeId,
    ) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let ln = plain_layer_norm(g, x)?;
        let scale1 = g.add_scalar(scale, 1.0);
        let scale1 = g.expand(scale1, &shape)?;
        let shift = g.expand(shift, &shape)?;
        let scaled = g.mul(ln, scale1)?;
        g.add(scaled, shift)
    }

    fn gated_residual(
        &self,
        g: &mut Graph,
        x: NodeId,
        branch: NodeId,
        gate: NodeId,
    ) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let gate = g.expand(gate, &shape)?;
        let gated = g.mul(branch, gate)?;
        g.add(x, gated)
    }

    /// Predicted noise for a batch: `z_t` [B, Cz, Tz, Hz, Wz], per-sample
    /// timesteps, conditioning sequence [B, Lt, text_width] with key mask.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        params: &LayerParams,
        z_t: NodeId,
        timesteps: &[usize],
        t_train: usize,
        cond: NodeId,
        cond_mask: &[bool],
    ) -> Result<NodeId> {
        let zs = g.shape(z_t).to_vec();
        let geo = &self.geometry;
        if zs != [timesteps.len(), geo.channels, geo.t, geo.h, geo.w] {
            return Err(Error::shape(format!(
                "latent shape {zs:?} does not match geometry {geo:?} with batch {}",
                timesteps.len()
            )));
        }
        let b = timesteps.len();
        let d = self.cfg.hidden;
        let cs = g.shape(cond).to_vec();
        if cs.len() != 3 || cs[0] != b || cs[2] != self.cfg.text_width {
            return Err(Error::shape(format!(
                "conditioning shape {cs:?} must be [{b}, L, {}]",
                self.cfg.text_width
            )));
        }
        let lt = cs[1];
        if cond_mask.len() != b * lt {
            return Err(Error::shape(format!(
                "conditioning mask length {} != {b}x{lt}",
                cond_mask.len()
            )));
        }

        // Tokens
        let (pmap, pshape) = self.patchify_map(b);
        let patches = g.index_map(z_t, pmap, &pshape)?;
        let mut x = self.patch_embed.forward(g, params, patches)?;
        let pos = g.param(&self.pos_path, params.get(&self.pos_path)?);
        let pos = g.reshape(pos, &[1, self.token_count, d])?;
        let pos = g.expand(pos, &[b, self.token_count, d])?;
        x = g.add(x, pos)?;

        // Timestep conditioning
        let mut tfeat = Vec::with_capacity(b * d);
        for &t in timesteps {
            tfeat.extend(timestep_embedding(t, d, t_train)?);
        }
        let tnode = g.input(&[b, d], tfeat)?;
        let temb = self.t_fc1.forward(g, params, tnode)?;
        let temb = g.gelu(temb);
        let temb = self.t_fc2.forward(g, params, temb)?;

        let l = self.token_count;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let cross_mask = key_padding_mask(b, heads, l, lt, cond_mask);

        for blk in &self.blocks {
            let packed = blk.adaln.forward(g, params, temb)?;
            let sh_sa = self.adaln_chunk(g, packed, b, 9, 0)?;
            let sc_sa = self.adaln_chunk(g, packed, b, 9, 1)?;
            let gt_sa = self.adaln_chunk(g, packed, b, 9, 2)?;
            let sh_ca = self.adaln_chunk(g, packed, b, 9, 3)?;
            let sc_ca = self.adaln_chunk(g, packed, b, 9, 4)?;
            let gt_ca = self.adaln_chunk(g, packed, b, 9, 5)?;
            let sh_ff = self.adaln_chunk(g, packed, b, 9, 6)?;
            let sc_ff = self.adaln_chunk(g, packed, b, 9, 7)?;
            let gt_ff = self.adaln_chunk(g, packed, b, 9, 8)?;

            // Gated self-attention
            let y = self.modulate(g, x, sh_sa, sc_sa)?;
            let qkv = blk.qkv.forward(g, params, y)?;
            let (q, k, v) = split_qkv(g, qkv, b, l, d)?;
            let qh = split_heads(g, q, b, l, heads, dh)?;
            let kh = split_heads(g, k, b, l, heads, dh)?;
            let vh = split_heads(g, v, b, l, heads, dh)?;
            let att = g.attention(qh, kh, vh)?;
            let att = merge_heads(g, att, b, l, heads, dh)?;
            let att = blk.attn_proj.forward(g, params, att)?;
            x = self.gated_residual(g, x, att, gt_sa)?;

            // Gated cross-attention: queries are latent tokens, keys/values
            // come from the conditioning sequence.
            let y = self.modulate(g, x, sh_ca, sc_ca)?;
            let q = blk.cross_q.forward(g, params, y)?;
            let k = blk.cross_k.forward(g, params, cond)?;
            let v = blk.cross_v.forward(g, params, cond)?;
            let qh = split_heads(g, q, b, l, heads, dh)?;
            let kh = split_heads(g, k, b, lt, heads, dh)?;
            let vh = split_heads(g, v, b, lt, heads, dh)?;
            let (att, _) = g.attention_masked(qh, kh, vh, Some(cross_mask.clone()))?;
            let att = merge_heads(g, att, b, l, heads, dh)?;
            let att = blk.cross_proj.forward(g, params, att)?;
            x = self.gated_residual(g, x, att, gt_ca)?;

            // Gated feed-forward
            let y = self.modulate(g, x, sh_ff, sc_ff)?;
            let h = blk.fc1.forward(g, params, y)?;
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, params, h)?;
            x = self.gated_residual(g, x, h, gt_ff)?;
        }

        // Output head with final modulation
        let packed = self.final_adaln.forward(g, params, temb)?;
        let sh = self.adaln_chunk(g, packed, b, 2, 0)?;
        let sc = self.adaln_chunk(g, packed, b, 2, 1)?;
        let y = self.modulate(g, x, sh, sc)?;
        let out_tokens = self.head.forward(g, params, y)?;
        let (umap, ushape) = self.unpatchify_map(b);
        g.index_map(out_tokens, umap, &ushape)
    }

    /// Single-clip denoise on plain tensors.
    pub fn denoise(
        &self,
        z_t: &Tensor,
        t: usize,
        t_train: usize,
        cond: &crate::text::Conditioning,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let geo = &self.geometry;
        let want = [geo.channels, geo.t, geo.h, geo.w];
        if z_t.shape() != want {
            return Err(Error::shape(format!(
                "latent shape {:?} does not match geometry {want:?}",
                z_t.shape()
            )));
        }
        let mut shape = vec![1usize];
        shape.extend_from_slice(z_t.shape());
        let zn = g.input(&shape, z_t.data().to_vec())?;
        let cshape = cond.seq.shape().to_vec();
        let cn = g.input(&cshape, cond.seq.data().to_vec())?;
        let eps = self.denoise_graph(&mut g, &self.params, zn, &[t], t_train, cn, &cond.mask)?;
        let out = g.tensor(eps).reshaped(z_t.shape().to_vec())?;
        out.check_finite("dit_denoise")?;
        Ok(out)
    }
}

//! Wavelet-flow video VAE: causal 3-D convolutional encoder/decoder with a
//! low-frequency shortcut around the backbone.
//!
//! The shortcut ("energy flow") carries the Haar low-pass chain of the input:
//! at every stage whose resolution has a matching low-pass band, the band is
//! projected by a 1x1x1 convolution and added to the backbone activation. The
//! decoder mirrors this with low-pass synthesis from a latent projection.
//! On the temporal axis the chain uses replicate-front pairing for odd
//! extents, which keeps the band extents equal to the causal stride rule
//! `ceil(T/2)` at every level and never reads future frames.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::nn::{Adam, Conv3dLayer, NormLayer, ParamInit};
use crate::tensor::{LayerParams, Tensor, VideoClip};
use crate::{Error, Result};

pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;

/// Gaussian posterior parameters over the latent grid.
#[derive(Debug, Clone)]
pub struct LatentStats {
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub temporal_compression: usize,
    pub spatial_compression: usize,
    pub base_width: usize,
    pub wavelet_levels: usize,
    pub kl_weight: f32,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            in_channels: 1,
            latent_channels: 4,
            temporal_compression: 2,
            spatial_compression: 4,
            base_width: 16,
            wavelet_levels: 2,
            kl_weight: 1e-4,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::Config("vae.latent_channels must be >= 1".into()));
        }
        if !self.temporal_compression.is_power_of_two()
            || !self.spatial_compression.is_power_of_two()
        {
            return Err(Error::Config(
                "vae compression factors must be powers of two".into(),
            ));
        }
        if self.base_width < 2 {
            return Err(Error::Config("vae.base_width must be >= 2".into()));
        }
        let stages = self.stage_count();
        if self.wavelet_levels > stages {
            return Err(Error::Config(format!(
                "vae.wavelet_levels {} exceeds stage count {stages}",
                self.wavelet_levels
            )));
        }
        Ok(())
    }

    fn n_t(&self) -> usize {
        self.temporal_compression.trailing_zeros() as usize
    }

    fn n_s(&self) -> usize {
        self.spatial_compression.trailing_zeros() as usize
    }

    pub fn stage_count(&self) -> usize {
        self.n_t().max(self.n_s())
    }

    /// Per-stage resampled axes (t, h, w) for stage k in 1..=stage_count.
    fn stage_axes(&self, k: usize) -> [bool; 3] {
        [k <= self.n_t(), k <= self.n_s(), k <= self.n_s()]
    }

    fn stage_stride(&self, k: usize) -> (usize, usize, usize) {
        let a = self.stage_axes(k);
        (if a[0] { 2 } else { 1 }, if a[1] { 2 } else { 1 }, if a[2] { 2 } else { 1 })
    }

    fn enc_width(&self, k: usize) -> usize {
        self.base_width << k
    }

    fn dec_width(&self, k: usize) -> usize {
        (self.enc_width(k) / 2).max(4)
    }

    /// Latent extents for a (T, H, W) input.
    pub fn latent_dims(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (ct, cs) = (self.temporal_compression, self.spatial_compression);
        if (t - 1) % ct != 0 {
            return Err(Error::shape(format!(
                "temporal extent {t} incompatible with compression {ct}: (T-1) must be divisible by {ct}"
            )));
        }
        if h % cs != 0 || w % cs != 0 {
            return Err(Error::shape(format!(
                "spatial extents ({h},{w}) must be divisible by compression {cs}"
            )));
        }
        Ok(((t - 1) / ct + 1, h / cs, w / cs))
    }

    /// Video extents reconstructed from latent extents.
    pub fn video_dims(&self, tz: usize, hz: usize, wz: usize) -> (usize, usize, usize) {
        ((tz - 1) * self.temporal_compression + 1, hz * self.spatial_compression, wz * self.spatial_compression)
    }

    /// Resolution chain from full-rate (index 0) down to the latent grid
    /// (index stage_count) for a given input geometry.
    fn dims_chain(&self, t: usize, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let mut dims = vec![(t, h, w)];
        let (mut ct, mut ch, mut cw) = (t, h, w);
        for k in 1..=self.stage_count() {
            let a = self.stage_axes(k);
            if a[0] {
                ct = ct.div_ceil(2);
            }
            if a[1] {
                ch /= 2;
            }
            if a[2] {
                cw /= 2;
            }
            dims.push((ct, ch, cw));
        }
        dims
    }
}

struct EncStage {
    conv: Conv3dLayer,
    norm: NormLayer,
    inject: Option<Conv3dLayer>,
}

struct DecStage {
    conv: Conv3dLayer,
    norm: NormLayer,
    inject: Option<Conv3dLayer>,
    factors: (usize, usize, usize),
    axes: [bool; 3],
}

pub struct WfVae {
    pub cfg: VaeConfig,
    pub params: LayerParams,
    enc_stem: Conv3dLayer,
    enc_stem_norm: NormLayer,
    enc_stages: Vec<EncStage>,
    enc_head: Conv3dLayer,
    dec_latent_proj: Conv3dLayer,
    dec_stem: Conv3dLayer,
    dec_stem_norm: NormLayer,
    dec_stem_inject: Conv3dLayer,
    dec_stages: Vec<DecStage>,
    dec_out: Conv3dLayer,
}

impl WfVae {
    pub fn new(cfg: VaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = LayerParams::new();
        let mut init = ParamInit::new(&mut params, rng);
        let s = cfg.stage_count();
        let cin = cfg.in_channels;

        let enc_stem =
            Conv3dLayer::init(&mut init, "enc.stem.conv", cin, cfg.enc_width(0), (3, 3, 3), (1, 1, 1))?;
        let enc_stem_norm = NormLayer::init(&mut init, "enc.stem.norm", cfg.enc_width(0))?;
        let mut enc_stages = Vec::new();
        for k in 1..=s {
            let conv = Conv3dLayer::init(
                &mut init,
                &format!("enc.stage{k}.conv"),
                cfg.enc_width(k - 1),
                cfg.enc_width(k),
                (3, 3, 3),
                cfg.stage_stride(k),
            )?;
            let norm = NormLayer::init(&mut init, &format!("enc.stage{k}.norm"), cfg.enc_width(k))?;
            let inject = if k <= cfg.wavelet_levels {
                Some(Conv3dLayer::init(
                    &mut init,
                    &format!("enc.stage{k}.inject"),
                    cin,
                    cfg.enc_width(k),
                    (1, 1, 1),
                    (1, 1, 1),
                )?)
            } else {
                None
            };
            enc_stages.push(EncStage { conv, norm, inject });
        }
        let enc_head = Conv3dLayer::init(
            &mut init,
            "enc.head.conv",
            cfg.enc_width(s),
            2 * cfg.latent_channels,
            (3, 3, 3),
            (1, 1, 1),
        )?;

        let dec_latent_proj = Conv3dLayer::init(
            &mut init,
            "dec.energy.from_latent",
            cfg.latent_channels,
            cin,
            (1, 1, 1),
            (1, 1, 1),
        )?;
        let dec_stem = Conv3dLayer::init(
            &mut init,
            "dec.stem.conv",
            cfg.latent_channels,
            cfg.dec_width(s),
            (3, 3, 3),
            (1, 1, 1),
        )?;
        let dec_stem_norm = NormLayer::init(&mut init, "dec.stem.norm", cfg.dec_width(s))?;
        let dec_stem_inject = Conv3dLayer::init(
            &mut init,
            "dec.stem.inject",
            cin,
            cfg.dec_width(s),
            (1, 1, 1),
            (1, 1, 1),
        )?;
        let mut dec_stages = Vec::new();
        for k in (1..=s).rev() {
            let conv = Conv3dLayer::init(
                &mut init,
                &format!("dec.stage{k}.conv"),
                cfg.dec_width(k),
                cfg.dec_width(k - 1),
                (3, 3, 3),
                (1, 1, 1),
            )?;
            let norm =
                NormLayer::init(&mut init, &format!("dec.stage{k}.norm"), cfg.dec_width(k - 1))?;
            let inject = if k - 1 < cfg.wavelet_levels || k - 1 == 0 {
                Some(Conv3dLayer::init(
                    &mut init,
                    &format!("dec.stage{k}.inject"),
                    cin,
                    cfg.dec_width(k - 1),
                    (1, 1, 1),
                    (1, 1, 1),
                )?)
            } else {
                None
            };
            dec_stages.push(DecStage {
                conv,
                norm,
                inject,
                factors: cfg.stage_stride(k),
                axes: cfg.stage_axes(k),
            });
        }
        let dec_out = Conv3dLayer::init(
            &mut init,
            "dec.out.conv",
            cfg.dec_width(0),
            cin,
            (3, 3, 3),
            (1, 1, 1),
        )?;

        Ok(WfVae {
            cfg,
            params,
            enc_stem,
            enc_stem_norm,
            enc_stages,
            enc_head,
            dec_latent_proj,
            dec_stem,
            dec_stem_norm,
            dec_stem_inject,
            dec_stages,
            dec_out,
        })
    }

    /// Encoder as graph ops; returns (mu, logvar) nodes.
    pub fn encode_graph(&self, g: &mut Graph, video: NodeId) -> Result<(NodeId, NodeId)> {
        let s = g.shape(video).to_vec();
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "encode expects N x {} x T x H x W, got {s:?}",
                self.cfg.in_channels
            )));
        }
        let (n, t, h, w) = (s[0], s[2], s[3], s[4]);
        self.cfg.latent_dims(t, h, w)?;

        let mut x = self.enc_stem.forward(g, &self.params, video)?;
        x = self.enc_stem_norm.channel_norm(g, &self.params, x)?;
        x = g.gelu(x);

        // Low-frequency chain alongside the backbone; the projected band is
        // added after each stage's norm+activation so it bypasses both.
        let mut band = video;
        for (k, stage) in self.enc_stages.iter().enumerate() {
            let axes = self.cfg.stage_axes(k + 1);
            x = stage.conv.forward(g, &self.params, x)?;
            x = stage.norm.channel_norm(g, &self.params, x)?;
            x = g.gelu(x);
            band = g.lowpass_down(band, axes)?;
            if let Some(inject) = &stage.inject {
                let shortcut = inject.forward(g, &self.params, band)?;
                x = g.add(x, shortcut)?;
            }
        }

        let moments = self.enc_head.forward(g, &self.params, x)?;
        let ms = g.shape(moments).to_vec();
        let cz = self.cfg.latent_channels;
        let (tz, hz, wz) = (ms[2], ms[3], ms[4]);
        let vol = tz * hz * wz;
        // Split channels into mu / logvar.
        let mut mu_map = Vec::with_capacity(n * cz * vol);
        let mut lv_map = Vec::with_capacity(n * cz * vol);
        for ni in 0..n {
            let base = ni * 2 * cz * vol;
            for c in 0..cz {
                for i in 0..vol {
                    mu_map.push((base + c * vol + i) as u32);
                }
            }
            for c in cz..2 * cz {
                for i in 0..vol {
                    lv_map.push((base + c * vol + i) as u32);
                }
            }
        }
        let out_shape = [n, cz, tz, hz, wz];
        let mu = g.index_map(moments, std::sync::Arc::new(mu_map), &out_shape)?;
        let logvar_raw = g.index_map(moments, std::sync::Arc::new(lv_map), &out_shape)?;
        let logvar = g.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, logvar))
    }

    /// Decoder as graph ops; `z` is [N, Cz, Tz, Hz, Wz].
    pub fn decode_graph(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let s = g.shape(z).to_vec();
        if s.len() != 5 || s[1] != self.cfg.latent_channels {
            return Err(Error::shape(format!(
                "decode expects N x {} x Tz x Hz x Wz, got {s:?}",
                self.cfg.latent_channels
            )));
        }
        let (tz, hz, wz) = (s[2], s[3], s[4]);
        let (t, h, w) = self.cfg.video_dims(tz, hz, wz);
        let dims = self.cfg.dims_chain(t, h, w);
        let stages = self.cfg.stage_count();

        let mut x = self.dec_stem.forward(g, &self.params, z)?;
        x = self.dec_stem_norm.channel_norm(g, &self.params, x)?;
        x = g.gelu(x);
        let mut band = self.dec_latent_proj.forward(g, &self.params, z)?;
        let shortcut = self.dec_stem_inject.forward(g, &self.params, band)?;
        x = g.add(x, shortcut)?;

        for (i, stage) in self.dec_stages.iter().enumerate() {
            let k = stages - i; // decoding stage k -> resolution k-1
            let target = dims[k - 1];
            x = g.upsample3d(x, stage.factors)?;
            x = stage.conv.forward(g, &self.params, x)?;
            x = stage.norm.channel_norm(g, &self.params, x)?;
            x = g.gelu(x);
            band = g.lowpass_up(band, stage.axes, target)?;
            if let Some(inject) = &stage.inject {
                let shortcut = inject.forward(g, &self.params, band)?;
                x = g.add(x, shortcut)?;
            }
        }

        let out = self.dec_out.forward(g, &self.params, x)?;
        Ok(g.sigmoid(out))
    }

    /// Encode one clip into posterior stats.
    pub fn encode(&self, clip: &VideoClip) -> Result<LatentStats> {
        let mut g = Graph::new();
        let mut shape = vec![1usize];
        shape.extend_from_slice(clip.data.shape());
        let x = g.input(&shape, clip.data.data().to_vec())?;
        let (mu, logvar) = self.encode_graph(&mut g, x)?;
        let stats = LatentStats { mu: g.tensor(mu), logvar: g.tensor(logvar) };
        stats.mu.check_finite("encode.mu")?;
        stats.logvar.check_finite("encode.logvar")?;
        Ok(stats)
    }

    /// Decode one latent (accepts [Cz,...] or [1,Cz,...]) into a clip.
    pub fn decode(&self, z: &Tensor) -> Result<VideoClip> {
        let mut g = Graph::new();
        let z5 = normalize_latent_shape(z, self.cfg.latent_channels)?;
        let zn = g.input(&z5, z.data().to_vec())?;
        let out = self.decode_graph(&mut g, zn)?;
        let shape = g.shape(out).to_vec();
        let t = g
            .tensor(out)
            .reshaped(shape[1..].to_vec())?;
        t.check_finite("decode")?;
        VideoClip::new(t)
    }

    /// Spatial receptive-field radius of the decoder in latent cells.
    pub fn decoder_receptive_radius(&self) -> usize {
        let mut r = 1.0f64; // stem conv
        let mut scale = 1.0f64;
        for stage in &self.dec_stages {
            scale *= stage.factors.1 as f64;
            r += 1.0 / scale;
        }
        r += 1.0 / scale; // output conv
        r.ceil() as usize
    }

    /// Decode spatial tiles of `tile` latent cells with `overlap` margins,
    /// stitching margin-cropped interiors. Matches [`WfVae::decode`] wherever
    /// the overlap covers the decoder receptive field.
    pub fn decode_tiled(
        &self,
        z: &Tensor,
        tile: (usize, usize),
        overlap: usize,
    ) -> Result<VideoClip> {
        let radius = self.decoder_receptive_radius();
        if overlap < radius {
            return Err(Error::invalid(format!(
                "tile overlap {overlap} is below the decoder receptive-field radius {radius}; stitched output would diverge from the untiled decode"
            )));
        }
        if tile.0 < radius || tile.1 < radius {
            return Err(Error::invalid(format!(
                "tile extents {tile:?} must be at least the receptive-field radius {radius}"
            )));
        }
        let z5 = normalize_latent_shape(z, self.cfg.latent_channels)?;
        let (n, cz, tz, hz, wz) = (z5[0], z5[1], z5[2], z5[3], z5[4]);
        if n != 1 {
            return Err(Error::shape("decode_tiled expects a single latent"));
        }
        let (t, h, w) = self.cfg.video_dims(tz, hz, wz);
        let cs = self.cfg.spatial_compression;
        let cin = self.cfg.in_channels;
        let mut out = vec![0.0f32; cin * t * h * w];

        let zd = z.data();
        let mut hy = 0;
        while hy < hz {
            let h_core_end = (hy + tile.0).min(hz);
            let h_lo = hy.saturating_sub(overlap);
            let h_hi = (h_core_end + overlap).min(hz);
            let mut wx = 0;
            while wx < wz {
                let w_core_end = (wx + tile.1).min(wz);
                let w_lo = wx.saturating_sub(overlap);
                let w_hi = (w_core_end + overlap).min(wz);

                // Extract the extended latent tile.
                let (th_ext, tw_ext) = (h_hi - h_lo, w_hi - w_lo);
                let mut sub = vec![0.0f32; cz * tz * th_ext * tw_ext];
                for c in 0..cz {
                    for tt in 0..tz {
                        for hh in 0..th_ext {
                            let src = ((c * tz + tt) * hz + (h_lo + hh)) * wz + w_lo;
                            let dst = ((c * tz + tt) * th_ext + hh) * tw_ext;
                            sub[dst..dst + tw_ext].copy_from_slice(&zd[src..src + tw_ext]);
                        }
                    }
                }
                let mut g = Graph::new();
                let zn = g.input(&[1, cz, tz, th_ext, tw_ext], sub)?;
                let dec = self.decode_graph(&mut g, zn)?;
                let dv = g.value(dec);
                let (ph, pw) = ((th_ext) * cs, (tw_ext) * cs);

                // Crop the core region (in pixels) and paste.
                let crop_h0 = (hy - h_lo) * cs;
                let crop_w0 = (wx - w_lo) * cs;
                let core_h = (h_core_end - hy) * cs;
                let core_w = (w_core_end - wx) * cs;
                for c in 0..cin {
                    for tt in 0..t {
                        for hh in 0..core_h {
                            let src = ((c * t + tt) * ph + crop_h0 + hh) * pw + crop_w0;
                            let dst = ((c * t + tt) * h + hy * cs + hh) * w + wx * cs;
                            out[dst..dst + core_w].copy_from_slice(&dv[src..src + core_w]);
                        }
                    }
                }
                wx = w_core_end;
            }
            hy = h_core_end;
        }
        VideoClip::new(Tensor::new(vec![cin, t, h, w], out)?)
    }
}

fn normalize_latent_shape(z: &Tensor, cz: usize) -> Result<Vec<usize>> {
    let s = z.shape();
    match s.len() {
        4 if s[0] == cz => Ok(vec![1, s[0], s[1], s[2], s[3]]),
        5 if s[1] == cz => Ok(s.to_vec()),
        _ => Err(Error::shape(format!(
            "latent must be [Cz,Tz,Hz,Wz] or [N,Cz,Tz,Hz,Wz] with Cz={cz}, got {s:?}"
        ))),
    }
}

/// z = mu + exp(logvar/2) * eps with eps ~ N(0,1) from the seeded generator.
pub fn reparameterize(stats: &LatentStats, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if stats.mu.shape() != stats.logvar.shape() {
        return Err(Error::shape(format!(
            "mu shape {:?} != logvar shape {:?}",
            stats.mu.shape(),
            stats.logvar.shape()
        )));
    }
    let eps = Tensor::randn(stats.mu.shape(), rng);
    let data: Vec<f32> = stats
        .mu
        .data()
        .iter()
        .zip(stats.logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(stats.mu.shape().to_vec(), data)
}

/// Mean squared reconstruction error plus beta * mean KL(N(mu, sigma^2) || N(0,1)).
pub fn vae_loss(video: &VideoClip, recon: &VideoClip, stats: &LatentStats, beta: f32) -> Result<f32> {
    if video.data.shape() != recon.data.shape() {
        return Err(Error::shape(format!(
            "video shape {:?} != reconstruction shape {:?}",
            video.data.shape(),
            recon.data.shape()
        )));
    }
    if beta < 0.0 {
        return Err(Error::invalid("beta must be >= 0"));
    }
    let mut mse = 0.0f64;
    for (a, b) in video.data.data().iter().zip(recon.data.data()) {
        let d = f64::from(a - b);
        mse += d * d;
    }
    mse /= video.data.len() as f64;
    let mut kl = 0.0f64;
    for (m, lv) in stats.mu.data().iter().zip(stats.logvar.data()) {
        kl += 0.5 * (f64::from(m * m) + f64::from(lv.exp()) - f64::from(*lv) - 1.0);
    }
    kl /= stats.mu.len() as f64;
    Ok((mse + f64::from(beta) * kl) as f32)
}

/// KL term per element; must be >= 0 everywhere.
pub fn kl_elementwise(stats: &LatentStats) -> Vec<f32> {
    stats
        .mu
        .data()
        .iter()
        .zip(stats.logvar.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .collect()
}

/// One optimizer step over a batch of clips; returns the scalar loss.
pub fn train_step(
    vae: &mut WfVae,
    opt: &mut Adam,
    batch: &[&VideoClip],
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let shape = batch[0].data.shape().to_vec();
    for clip in batch {
        if clip.data.shape() != shape {
            return Err(Error::shape("batch clips must share one geometry"));
        }
    }
    let n = batch.len();
    let mut data = Vec::with_capacity(n * batch[0].data.len());
    for clip in batch {
        data.extend_from_slice(clip.data.data());
    }
    let mut full = vec![n];
    full.extend_from_slice(&shape);

    let mut g = Graph::new();
    let video = g.input(&full, data)?;
    let (mu, logvar) = vae.encode_graph(&mut g, video)?;
    let eps = Tensor::randn(g.shape(mu), rng);
    let eps_node = g.input_tensor(&eps);
    let half_lv = g.scale(logvar, 0.5);
    let std = g.exp(half_lv);
    let noise = g.mul(std, eps_node)?;
    let z = g.add(mu, noise)?;
    let recon = vae.decode_graph(&mut g, z)?;

    let mse = g.mse(recon, video)?;
    let mu2 = g.mul(mu, mu)?;
    let ev = g.exp(logvar);
    let a = g.add(mu2, ev)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let kl_mean = g.mean_all(c);
    let kl = g.scale(kl_mean, 0.5 * vae.cfg.kl_weight);
    let loss = g.add(mse, kl)?;

    let loss_val = g.value(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("vae train_step loss".into()));
    }
    let grads = g.backward(loss)?;
    let by_name = g.param_grads(&grads, &vae.params);
    drop(g);
    opt.step(&mut vae.params, &by_name)?;
    Ok(loss_val)
}

/// Latents (sampled posteriors) for a set of clips, plus the global std used
/// to scale them to roughly unit variance for diffusion training.
pub fn encode_dataset(
    vae: &WfVae,
    clips: &[VideoClip],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, f32)> {
    let mut latents = Vec::with_capacity(clips.len());
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for clip in clips {
        let stats = vae.encode(clip)?;
        let z = reparameterize(&stats, rng)?;
        for v in z.data() {
            acc += f64::from(*v) * f64::from(*v);
        }
        count += z.len();
        let shape = z.shape()[1..].to_vec();
        latents.push(z.reshaped(shape)?);
    }
    let std = (acc / count.max(1) as f64).sqrt().max(1e-6) as f32;
    Ok((latents, std))
}

/// Per-parameter gradient map type alias used by training loops.
pub type GradMap = BTreeMap<String, Vec<f32>>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn toy_cfg() -> VaeConfig {
        VaeConfig {
            in_channels: 1,
            latent_channels: 2,
            temporal_compression: 2,
            spatial_compression: 4,
            base_width: 4,
            wavelet_levels: 2,
            kl_weight: 1e-4,
        }
    }

    fn clip(shape: &[usize], rng: &mut ChaCha8Rng) -> VideoClip {
        let mut t = Tensor::randn(shape, rng);
        for v in t.data_mut() {
            *v = (*v * 0.2 + 0.5).clamp(0.0, 1.0);
        }
        VideoClip::new(t).unwrap()
    }

    #[test]
    fn encode_shape_follows_compression_rule() {
        let mut rng = rng_for(21, "vae-shape");
        let cfg = VaeConfig { latent_channels: 4, base_width: 4, ..VaeConfig::default() };
        let vae = WfVae::new(cfg, &mut rng).unwrap();
        let c = clip(&[1, 9, 32, 32], &mut rng);
        let stats = vae.encode(&c).unwrap();
        assert_eq!(stats.mu.shape(), &[1, 4, 5, 8, 8]);
        assert_eq!(stats.logvar.shape(), &[1, 4, 5, 8, 8]);
    }

    #[test]
    fn decode_shape_inverts_encode_shape() {
        let mut rng = rng_for(22, "vae-decode-shape");
        let cfg = VaeConfig { latent_channels: 4, base_width: 4, ..VaeConfig::default() };
        let vae = WfVae::new(cfg, &mut rng).unwrap();
        let z = Tensor::randn(&[4, 5, 8, 8], &mut rng);
        let v = vae.decode(&z).unwrap();
        assert_eq!(v.data.shape(), &[1, 9, 32, 32]);
    }

    #[test]
    fn decode_outputs_stay_in_unit_range() {
        let mut rng = rng_for(23, "vae-range");
        let vae = WfVae::new(toy_cfg(), &mut rng).unwrap();
        let z = Tensor::randn_scaled(&[2, 3, 4, 4], 5.0, &mut rng);
        let v = vae.decode(&z).unwrap();
        assert!(v.data.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn encode_rejects_incompatible_extents() {
        let mut rng = rng_for(24, "vae-reject");
        let vae = WfVae::new(toy_cfg(), &mut rng).unwrap();
        let c = clip(&[1, 8, 32, 32], &mut rng); // (8-1) % 2 != 0
        assert!(vae.encode(&c).is_err());
        let c = clip(&[1, 9, 30, 32], &mut rng); // 30 % 4 != 0
        assert!(vae.encode(&c).is_err());
    }

    #[test]
    fn encoder_is_temporally_causal() {
        let mut rng = rng_for(25, "vae-causal");
        let vae = WfVae::new(toy_cfg(), &mut rng).unwrap();
        let base = clip(&[1, 9, 16, 16], &mut rng);
        let stats = vae.encode(&base).unwrap();
        // Perturb only the final frame; latent frames covering earlier input
        // frames (tau' with 2*tau' < 8) must be bit-identical.
        let mut edited = base.clone();
        let hw = 16 * 16;
        for v in &mut edited.data.data_mut()[8 * hw..9 * hw] {
            *v = (*v + 0.37).min(1.0);
        }
        let stats2 = vae.encode(&edited).unwrap();
        let (mu, mu2) = (stats.mu.data(), stats2.mu.data());
        let (tz, hz, wz) = (5, 4, 4);
        let plane = hz * wz;
        for c in 0..2 {
            for tau in 0..4 {
                // 2*tau <= 6 < 8
                let off = (c * tz + tau) * plane;
                assert_eq!(
                    &mu[off..off + plane],
                    &mu2[off..off + plane],
                    "latent frame {tau} changed under future perturbation"
                );
            }
        }
        // The final latent frame covers frame 8 and should differ.
        let off = (0 * tz + 4) * plane;
        assert_ne!(&mu[off..off + plane], &mu2[off..off + plane]);
    }

    #[test]
    fn shortcut_is_sole_signal_path_when_backbone_is_zeroed() {
        let mut rng = rng_for(26, "vae-shortcut");
        let mut vae = WfVae::new(toy_cfg(), &mut rng).unwrap();
        // Zero the encoder backbone convs; give injections distinct
        // per-channel taps; make the head pass channel activity through.
        for name in ["enc.stem.conv", "enc.stage1.conv", "enc.stage2.conv"] {
            for suffix in ["weight", "bias"] {
                let t = vae.params.get_mut(&format!("{name}.{suffix}")).unwrap();
                t.data_mut().fill(0.0);
            }
        }
        for name in ["enc.stage1.inject", "enc.stage2.inject"] {
            let t = vae.params.get_mut(&format!("{name}.weight")).unwrap();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.5 + i as f32; // distinct taps so channel norm keeps signal
            }
            vae.params.get_mut(&format!("{name}.bias")).unwrap().data_mut().fill(0.0);
        }
        {
            let head = vae.params.get_mut("enc.head.conv.weight").unwrap();
            let shape = head.shape().to_vec(); // [2Cz, w2, 3,3,3]
            let (kt, kh, kw) = (shape[2], shape[3], shape[4]);
            let kvol = kt * kh * kw;
            let center = (kt - 1) * kh * kw + (kh / 2) * kw + kw / 2;
            let data = head.data_mut();
            data.fill(0.0);
            for oc in 0..shape[0] {
                data[(oc * shape[1]) * kvol + center] = 1.0; // read channel 0
            }
        }

        let mut base = clip(&[1, 9, 16, 16], &mut rng);
        // Dyadic grid keeps the +delta/-delta arithmetic below exact in f32.
        for v in base.data.data_mut() {
            *v = (*v * 256.0).round() / 256.0;
        }
        // High-frequency perturbation invisible to every low-pass level:
        // +delta/-delta on adjacent w pairs cancels in the Haar low band.
        let mut hf = base.clone();
        {
            let d = hf.data.data_mut();
            let (t, h, w) = (9, 16, 16);
            let delta = 4.0 / 256.0;
            for tt in 0..t {
                for hh in 0..h {
                    for ww in (0..w).step_by(2) {
                        let idx = (tt * h + hh) * w + ww;
                        d[idx] += delta;
                        d[idx + 1] -= delta;
                    }
                }
            }
        }
        let mu_a = vae.encode(&base).unwrap().mu;
        let mu_b = vae.encode(&hf).unwrap().mu;
        assert_eq!(mu_a.data(), mu_b.data(), "high-frequency change leaked into mu");

        // A low-frequency change must reach mu.
        let mut lf = base.clone();
        for v in lf.data.data_mut() {
            *v = (*v + 0.1).min(1.0);
        }
        let mu_c = vae.encode(&lf).unwrap().mu;
        assert_ne!(mu_a.data(), mu_c.data(), "low-frequency change did not reach mu");
    }

    #[test]
    fn reparameterize_floor_logvar_returns_mu() {
        let mut rng = rng_for(27, "vae-reparam");
        let mu = Tensor::randn(&[1, 2, 3, 4, 4], &mut rng);
        let stats = LatentStats { mu: mu.clone(), logvar: Tensor::full(&[1, 2, 3, 4, 4], -30.0) };
        let z = reparameterize(&stats, &mut rng).unwrap();
        for (a, b) in z.data().iter().zip(mu.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reparameterize_is_deterministic_per_seed() {
        let mu = Tensor::zeros(&[1, 2, 3, 4, 4]);
        let stats = LatentStats { mu: mu.clone(), logvar: Tensor::zeros(&[1, 2, 3, 4, 4]) };
        let z1 = reparameterize(&stats, &mut rng_for(5, "reparam")).unwrap();
        let z2 = reparameterize(&stats, &mut rng_for(5, "reparam")).unwrap();
        assert_eq!(z1.data(), z2.data());
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let n = 100_000usize;
        let stats = LatentStats { mu: Tensor::zeros(&[n]), logvar: Tensor::zeros(&[n]) };
        let z = reparameterize(&stats, &mut rng_for(6, "reparam-mc")).unwrap();
        let mean: f64 = z.data().iter().map(|v| f64::from(*v)).sum::<f64>() / n as f64;
        let var: f64 =
            z.data().iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>() / n as f64
                - mean * mean;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn vae_loss_trivial_and_analytic_cases() {
        let v = VideoClip::new(Tensor::full(&[1, 3, 4, 4], 0.25)).unwrap();
        let stats0 = LatentStats {
            mu: Tensor::zeros(&[1, 2, 2, 2, 2]),
            logvar: Tensor::zeros(&[1, 2, 2, 2, 2]),
        };
        assert_eq!(vae_loss(&v, &v, &stats0, 1.0).unwrap(), 0.0);
        let stats1 = LatentStats {
            mu: Tensor::full(&[1, 2, 2, 2, 2], 1.0),
            logvar: Tensor::zeros(&[1, 2, 2, 2, 2]),
        };
        let l = vae_loss(&v, &v, &stats1, 1.0).unwrap();
        assert!((l - 0.5).abs() < 1e-6, "KL of unit-mean standard gaussian is 0.5, got {l}");
    }

    #[test]
    fn vae_loss_matches_scalar_loop_oracle() {
        let mut rng = rng_for(28, "vae-loss-oracle");
        let video = clip(&[1, 3, 4, 4], &mut rng);
        let recon = clip(&[1, 3, 4, 4], &mut rng);
        let stats = LatentStats {
            mu: Tensor::randn(&[1, 2, 2, 2, 2], &mut rng),
            logvar: Tensor::randn_scaled(&[1, 2, 2, 2, 2], 0.5, &mut rng),
        };
        let beta = 0.37;
        // Independent scalar loop.
        let mut mse = 0.0f64;
        for (a, b) in video.data.data().iter().zip(recon.data.data()) {
            mse += (f64::from(*a) - f64::from(*b)).powi(2);
        }
        mse /= video.data.len() as f64;
        let mut kl = 0.0f64;
        for (m, lv) in stats.mu.data().iter().zip(stats.logvar.data()) {
            kl += 0.5
                * (f64::from(*m) * f64::from(*m) + f64::from(*lv).exp() - f64::from(*lv) - 1.0);
        }
        kl /= stats.mu.len() as f64;
        let expect = (mse + f64::from(beta) * kl) as f32;
        let got = vae_loss(&video, &recon, &stats, beta).unwrap();
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn kl_elementwise_is_nonnegative() {
        let mut rng = rng_for(29, "vae-kl");
        let stats = LatentStats {
            mu: Tensor::randn(&[64], &mut rng),
            logvar: Tensor::randn_scaled(&[64], 2.0, &mut rng),
        };
        assert!(kl_elementwise(&stats).iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn training_reduces_loss_on_toy_videos() {
        let mut rng = rng_for(30, "vae-train");
        let cfg = VaeConfig {
            base_width: 4,
            latent_channels: 2,
            spatial_compression: 4,
            ..VaeConfig::default()
        };
        let mut vae = WfVae::new(cfg, &mut rng).unwrap();
        // 8 constant-plus-noise clips.
        let clips: Vec<VideoClip> = (0..8)
            .map(|i| {
                let mut t = Tensor::full(&[1, 5, 16, 16], 0.2 + 0.08 * i as f32);
                let noise = Tensor::randn_scaled(&[1, 5, 16, 16], 0.02, &mut rng);
                for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                    *v = (*v + n).clamp(0.0, 1.0);
                }
                VideoClip::new(t).unwrap()
            })
            .collect();
        let mut opt = Adam::new(1e-3);
        let refs: Vec<&VideoClip> = clips.iter().collect();
        let first = train_step(&mut vae, &mut opt, &refs[..4], &mut rng).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&mut vae, &mut opt, &refs[..4], &mut rng).unwrap();
        }
        assert!(
            last < 0.5 * first,
            "loss should halve over 60 steps: first {first}, last {last}"
        );
    }

    #[test]
    fn full_frame_tile_is_bit_identical_to_decode() {
        let mut rng = rng_for(31, "vae-tile-full");
        let vae = WfVae::new(toy_cfg(), &mut rng).unwrap();
        let z = Tensor::randn(&[2, 3, 8, 8], &mut rng);
        let full = vae.decode(&z).unwrap();
        let tiled = vae.decode_tiled(&z, (8, 8), vae.decoder_receptive_radius()).unwrap();
        assert_eq!(full.data.data(), tiled.data.data());
    }

    #[test]
    fn tiled_decode_matches_untiled_within_tolerance() {
        let mut rng = rng_for(32, "vae-tile");
        let vae = WfVae::new(toy_cfg(), &mut rng).unwrap();
        let z = Tensor::randn(&[2, 3, 8, 8], &mut rng);
        let full = vae.decode(&z).unwrap();
        let tiled = vae.decode_tiled(&z, (4, 4), 2).unwrap();
        let max_abs = full
            .data
            .data()
            .iter()
            .zip(tiled.data.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_abs < 1e-3, "tiled decode deviates by {max_abs}");
    }

    #[test]
    fn insufficient_overlap_is_rejected() {
        let mut rng = rng_for(33, "vae-tile-reject");
        let vae = WfVae::new(toy_cfg(), &mut rng).unwrap();
        let z = Tensor::randn(&[2, 3, 8, 8], &mut rng);
        let radius = vae.decoder_receptive_radius();
        assert!(vae.decode_tiled(&z, (4, 4), radius - 1).is_err());
    }

    #[test]
    fn vae_loss_gradcheck_at_toy_shape() {
        let mut rng = rng_for(34, "vae-gradcheck");
        let cfg = VaeConfig {
            base_width: 2,
            latent_channels: 2,
            temporal_compression: 2,
            spatial_compression: 2,
            wavelet_levels: 1,
            kl_weight: 0.1,
            ..VaeConfig::default()
        };
        let vae = WfVae::new(cfg, &mut rng).unwrap();
        let video = clip(&[1, 3, 4, 4], &mut rng);
        let eps = Tensor::randn(&[1, 2, 2, 2, 2], &mut rng);
        let beta = vae.cfg.kl_weight;
        let rep = crate::nn::finite_diff_check(&vae.params, 1e-3, |g, p| {
            let probe = WfVae { params: p.clone(), ..WfVae::new(vae.cfg.clone(), &mut rng_for(34, "vae-gradcheck")).unwrap() };
            let mut shape = vec![1usize];
            shape.extend_from_slice(video.data.shape());
            let x = g.input(&shape, video.data.data().to_vec())?;
            let (mu, logvar) = probe.encode_graph(g, x)?;
            let e = g.input_tensor(&eps);
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, e)?;
            let z = g.add(mu, noise)?;
            let recon = probe.decode_graph(g, z)?;
            let mse = g.mse(recon, x)?;
            let mu2 = g.mul(mu, mu)?;
            let ev = g.exp(logvar);
            let s1 = g.add(mu2, ev)?;
            let s2 = g.sub(s1, logvar)?;
            let s3 = g.add_scalar(s2, -1.0);
            let klm = g.mean_all(s3);
            let kl = g.scale(klm, 0.5 * beta);
            g.add(mse, kl)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "vae loss grad check failed: {rep:?}");
    }
}

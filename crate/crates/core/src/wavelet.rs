//! Multi-level 3-D Haar wavelet analysis and synthesis.
//!
//! Orthonormal filters (1/sqrt2, 1/sqrt2) and (1/sqrt2, -1/sqrt2) applied
//! separably along w, h, then t. Sub-band letters follow (t, h, w) order:
//! `LLH` is low-pass in t and h, high-pass in w.

use crate::kernels::INV_SQRT2;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The eight octants of one decomposition level.
#[derive(Debug, Clone)]
pub struct LevelBands {
    pub lll: Tensor,
    pub llh: Tensor,
    pub lhl: Tensor,
    pub lhh: Tensor,
    pub hll: Tensor,
    pub hlh: Tensor,
    pub hhl: Tensor,
    pub hhh: Tensor,
}

impl LevelBands {
    pub fn details(&self) -> [&Tensor; 7] {
        [&self.llh, &self.lhl, &self.lhh, &self.hll, &self.hlh, &self.hhl, &self.hhh]
    }

    fn shape(&self) -> &[usize] {
        self.lll.shape()
    }

    fn check_consistent(&self) -> Result<()> {
        let s = self.shape();
        for d in self.details() {
            if d.shape() != s {
                return Err(Error::shape(format!(
                    "sub-band shapes differ within a level: {s:?} vs {:?}",
                    d.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Critically sampled pyramid: the 7 detail octants per level plus the final
/// LLL. Each level's stored `lll` is the input to the next level and is kept
/// for inspection; only details + top count toward the coefficient budget.
#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub levels: usize,
    /// Finest level first.
    pub subbands: Vec<LevelBands>,
    /// Final LLL (same tensor as `subbands.last().lll`).
    pub top: Tensor,
}

impl WaveletPyramid {
    /// Detail coefficients plus the top band; equals the input element count.
    pub fn coefficient_count(&self) -> usize {
        let details: usize = self
            .subbands
            .iter()
            .map(|l| l.details().iter().map(|t| t.len()).sum::<usize>())
            .sum();
        details + self.top.len()
    }

    /// Sum of squares over details + top (for Parseval checks).
    pub fn energy(&self) -> f64 {
        let mut acc = 0.0f64;
        for level in &self.subbands {
            for d in level.details() {
                for v in d.data() {
                    acc += f64::from(*v) * f64::from(*v);
                }
            }
        }
        for v in self.top.data() {
            acc += f64::from(*v) * f64::from(*v);
        }
        acc
    }
}

fn split_axis(x: &[f32], outer: usize, len: usize, inner: usize) -> (Vec<f32>, Vec<f32>) {
    debug_assert_eq!(len % 2, 0);
    let half = len / 2;
    let mut lo = vec![0.0f32; outer * half * inner];
    let mut hi = vec![0.0f32; outer * half * inner];
    for o in 0..outer {
        let xb = &x[o * len * inner..(o + 1) * len * inner];
        for i in 0..half {
            let a = &xb[2 * i * inner..(2 * i + 1) * inner];
            let b = &xb[(2 * i + 1) * inner..(2 * i + 2) * inner];
            let lo_row = &mut lo[(o * half + i) * inner..(o * half + i + 1) * inner];
            let hi_row = &mut hi[(o * half + i) * inner..(o * half + i + 1) * inner];
            for j in 0..inner {
                lo_row[j] = (a[j] + b[j]) * INV_SQRT2;
                hi_row[j] = (a[j] - b[j]) * INV_SQRT2;
            }
        }
    }
    (lo, hi)
}

fn merge_axis(lo: &[f32], hi: &[f32], outer: usize, out_len: usize, inner: usize) -> Vec<f32> {
    debug_assert_eq!(out_len % 2, 0);
    let half = out_len / 2;
    let mut out = vec![0.0f32; outer * out_len * inner];
    for o in 0..outer {
        let ob = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
        for i in 0..half {
            let l = &lo[(o * half + i) * inner..(o * half + i + 1) * inner];
            let h = &hi[(o * half + i) * inner..(o * half + i + 1) * inner];
            for j in 0..inner {
                ob[2 * i * inner + j] = (l[j] + h[j]) * INV_SQRT2;
                ob[(2 * i + 1) * inner + j] = (l[j] - h[j]) * INV_SQRT2;
            }
        }
    }
    out
}

/// One analysis level over (c, t, h, w) data; returns the 8 octants.
fn analyze_level(x: &[f32], c: usize, t: usize, h: usize, w: usize) -> LevelBands {
    let (ht, hh2, hw) = (t / 2, h / 2, w / 2);
    // w axis
    let (w_lo, w_hi) = split_axis(x, c * t * h, w, 1);
    // h axis on each: (h filter, w filter)
    let (hl_wl, hh_wl) = split_axis(&w_lo, c * t, h, hw); // (L,L) and (H,L)
    let (hl_wh, hh_wh) = split_axis(&w_hi, c * t, h, hw); // (L,H) and (H,H)
    // t axis last; octant letters follow (t, h, w) order.
    let mk =
        |data: Vec<f32>| Tensor::new(vec![c, ht, hh2, hw], data).expect("octant extents agree");
    let (lll, hll) = split_axis(&hl_wl, c, t, hh2 * hw);
    let (llh, hlh) = split_axis(&hl_wh, c, t, hh2 * hw);
    let (lhl, hhl) = split_axis(&hh_wl, c, t, hh2 * hw);
    let (lhh, hhh) = split_axis(&hh_wh, c, t, hh2 * hw);
    LevelBands {
        lll: mk(lll),
        llh: mk(llh),
        lhl: mk(lhl),
        lhh: mk(lhh),
        hll: mk(hll),
        hlh: mk(hlh),
        hhl: mk(hhl),
        hhh: mk(hhh),
    }
}

fn synthesize_level(bands: &LevelBands, lll_override: &[f32]) -> Vec<f32> {
    let s = bands.shape();
    let (c, ht, hh2, hw) = (s[0], s[1], s[2], s[3]);
    let (t, h, w) = (2 * ht, 2 * hh2, 2 * hw);
    // t axis first (inverse of analysis order)
    let hl_wl = merge_axis(lll_override, bands.hll.data(), c, t, hh2 * hw);
    let hl_wh = merge_axis(bands.llh.data(), bands.hlh.data(), c, t, hh2 * hw);
    let hh_wl = merge_axis(bands.lhl.data(), bands.hhl.data(), c, t, hh2 * hw);
    let hh_wh = merge_axis(bands.lhh.data(), bands.hhh.data(), c, t, hh2 * hw);
    // h axis
    let w_lo = merge_axis(&hl_wl, &hh_wl, c * t, h, hw);
    let w_hi = merge_axis(&hl_wh, &hh_wh, c * t, h, hw);
    // w axis
    merge_axis(&w_lo, &w_hi, c * t * h, w, 1)
}

/// Multi-level 3-D Haar analysis of a CxTxHxW tensor.
pub fn dwt3d(video: &Tensor, levels: usize) -> Result<WaveletPyramid> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("dwt3d expects CxTxHxW, got {s:?}")));
    }
    if levels == 0 {
        return Err(Error::invalid("dwt3d requires at least one level"));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let need = 1usize << levels;
    for (name, ext) in [("t", t), ("h", h), ("w", w)] {
        if ext % need != 0 {
            return Err(Error::shape(format!(
                "dwt3d with {levels} levels requires {name} divisible by {need}, got {ext}"
            )));
        }
    }
    let mut subbands = Vec::with_capacity(levels);
    let mut cur = video.data().to_vec();
    let (mut ct, mut ch, mut cw) = (t, h, w);
    for _ in 0..levels {
        let bands = analyze_level(&cur, c, ct, ch, cw);
        cur = bands.lll.data().to_vec();
        ct /= 2;
        ch /= 2;
        cw /= 2;
        subbands.push(bands);
    }
    let top = subbands.last().expect("levels >= 1").lll.clone();
    Ok(WaveletPyramid { levels, subbands, top })
}

/// Exact inverse of [`dwt3d`] up to floating-point error.
pub fn idwt3d(pyramid: &WaveletPyramid) -> Result<Tensor> {
    if pyramid.subbands.len() != pyramid.levels || pyramid.levels == 0 {
        return Err(Error::shape(format!(
            "pyramid stores {} levels but declares {}",
            pyramid.subbands.len(),
            pyramid.levels
        )));
    }
    for level in &pyramid.subbands {
        level.check_consistent()?;
    }
    if pyramid.top.shape() != pyramid.subbands[pyramid.levels - 1].shape() {
        return Err(Error::shape(format!(
            "top band shape {:?} does not match coarsest level {:?}",
            pyramid.top.shape(),
            pyramid.subbands[pyramid.levels - 1].shape()
        )));
    }
    // Check the 2x chain between consecutive levels.
    for i in 1..pyramid.levels {
        let fine = pyramid.subbands[i - 1].shape();
        let coarse = pyramid.subbands[i].shape();
        let ok = fine[0] == coarse[0] && (1..4).all(|ax| fine[ax] == 2 * coarse[ax]);
        if !ok {
            return Err(Error::shape(format!(
                "level {i} extents {coarse:?} are not half of level {} extents {fine:?}",
                i - 1
            )));
        }
    }

    let mut cur = pyramid.top.data().to_vec();
    for level in pyramid.subbands.iter().rev() {
        cur = synthesize_level(level, &cur);
    }
    let s0 = pyramid.subbands[0].shape();
    Tensor::new(vec![s0[0], 2 * s0[1], 2 * s0[2], 2 * s0[3]], cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use proptest::prelude::*;

    #[test]
    fn haar_pair_matches_analytic_values() {
        // (3, 1): approx 4/sqrt2 = 2*sqrt2, detail 2/sqrt2 = sqrt2.
        let (lo, hi) = split_axis(&[3.0, 1.0], 1, 2, 1);
        assert!((lo[0] - 2.0 * std::f32::consts::SQRT_2).abs() < 1e-6);
        assert!((hi[0] - std::f32::consts::SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn constant_video_concentrates_in_top_band() {
        let c = 0.6f32;
        let video = Tensor::full(&[1, 4, 4, 4], c);
        let pyr = dwt3d(&video, 2).unwrap();
        for level in &pyr.subbands {
            for d in level.details() {
                assert!(d.data().iter().all(|v| *v == 0.0), "detail band not exactly zero");
            }
        }
        let expect = c * 2.0f32.sqrt().powi(6); // (sqrt2)^(3*levels)
        for v in pyr.top.data() {
            assert!((v - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn round_trip_recovers_random_video() {
        let mut rng = rng_for(3, "wavelet-roundtrip");
        let video = Tensor::randn(&[1, 8, 8, 8], &mut rng);
        let pyr = dwt3d(&video, 2).unwrap();
        assert_eq!(pyr.coefficient_count(), video.len());
        let back = idwt3d(&pyr).unwrap();
        let max_abs = video
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_abs <= 1e-5, "round trip max abs {max_abs}");
    }

    #[test]
    fn parseval_energy_is_preserved() {
        let mut rng = rng_for(4, "wavelet-parseval");
        let video = Tensor::randn(&[2, 8, 8, 8], &mut rng);
        let pyr = dwt3d(&video, 3).unwrap();
        let ex: f64 = video.data().iter().map(|v| f64::from(*v) * f64::from(*v)).sum();
        let ec = pyr.energy();
        assert!(((ex - ec) / ex).abs() <= 1e-4, "energy mismatch {ex} vs {ec}");
    }

    #[test]
    fn rejects_non_divisible_extents() {
        let video = Tensor::zeros(&[1, 6, 8, 8]);
        let err = dwt3d(&video, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("divisible by 4"), "diagnostic should name the divisor: {msg}");
    }

    #[test]
    fn zero_pyramid_synthesizes_zero_video() {
        let video = Tensor::zeros(&[1, 4, 4, 4]);
        let pyr = dwt3d(&video, 1).unwrap();
        let back = idwt3d(&pyr).unwrap();
        assert!(back.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_top_coefficient_spreads_into_scaled_block() {
        let video = Tensor::zeros(&[1, 4, 4, 4]);
        let mut pyr = dwt3d(&video, 2).unwrap();
        let mut top = Tensor::zeros(&[1, 1, 1, 1]);
        top.data_mut()[0] = 1.0;
        pyr.top = top;
        let back = idwt3d(&pyr).unwrap();
        // One unit in the coarsest LLL spreads over a 4x4x4 block scaled by
        // (1/sqrt2)^(3*2) = 1/8.
        for v in back.data() {
            assert!((v - 0.125).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_inconsistent_subband_shapes() {
        let video = Tensor::zeros(&[1, 4, 4, 4]);
        let mut pyr = dwt3d(&video, 1).unwrap();
        pyr.subbands[0].hhh = Tensor::zeros(&[1, 2, 2, 1]);
        assert!(idwt3d(&pyr).is_err());
    }

    #[test]
    fn lowpass_chain_matches_dwt_lll_for_even_extents() {
        // The graph-side energy-flow primitive equals the strict LLL band
        // when every extent is even.
        let mut rng = rng_for(5, "wavelet-lowpass-cross");
        let video = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let pyr = dwt3d(&video, 1).unwrap();
        let mut g = crate::graph::Graph::new();
        let mut shape = vec![1usize];
        shape.extend_from_slice(video.shape());
        let x = g.input(&shape, video.data().to_vec()).unwrap();
        let low = g.lowpass_down(x, [true, true, true]).unwrap();
        let max_abs = g
            .value(low)
            .iter()
            .zip(pyr.subbands[0].lll.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_abs <= 1e-5, "lowpass chain deviates from LLL band by {max_abs}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn prop_round_trip_and_linearity(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = rng_for(seed, "wavelet-prop");
            let x = Tensor::randn(&[1, 4, 4, 4], &mut rng);
            let y = Tensor::randn(&[1, 4, 4, 4], &mut rng);

            // Perfect reconstruction.
            let px = dwt3d(&x, 2).unwrap();
            let back = idwt3d(&px).unwrap();
            for (u, v) in x.data().iter().zip(back.data()) {
                prop_assert!((u - v).abs() <= 1e-5);
            }

            // Linearity: dwt(a x + b y) == a dwt(x) + b dwt(y).
            let mixed: Vec<f32> = x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect();
            let pm = dwt3d(&Tensor::new(vec![1, 4, 4, 4], mixed).unwrap(), 2).unwrap();
            let py = dwt3d(&y, 2).unwrap();
            for (m, (xx, yy)) in pm.top.data().iter().zip(px.top.data().iter().zip(py.top.data())) {
                prop_assert!((m - (a * xx + b * yy)).abs() <= 1e-4);
            }
        }
    }
}

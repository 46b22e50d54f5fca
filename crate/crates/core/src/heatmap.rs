//! Activation heatmaps: where a block's response concentrates, per input
//! frame, at input resolution.

use crate::error::{Error, Result};
use crate::image_io::Gray;
use crate::model::{lta_taped, ModelConfig, ModelParams};
use crate::preprocess::{Mask, NormalizeMode, NormalizePlan};
use crate::synth::{REGION_BAG, REGION_LEGS};
use crate::tape::GradTape;
use crate::tensor::{Scalar, Tensor};

/// Bilinear resize of an `h x w` map (pixel centres aligned, edges clamped).
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, out_h, h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, out_w, w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out[r * out_w + c] = top * (1.0 - fr) + bot * fr;
        }
    }
    out
}

/// Rescale to [0, 1]; a constant map becomes all zeros.
pub fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Channel-mean absolute activation of block `layer`, per input frame.
///
/// The block runs at a third of the input frame rate; input frame `t` shows
/// block frame `min(t / 3, T' - 1)`. Each map is bilinearly upsampled to
/// the input size and min-max normalized. Returns `T` maps of `H * W`.
pub fn activation_heatmap<T: Scalar>(
    seq: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    if layer >= cfg.num_blocks() {
        return Err(Error::InvalidBlock {
            index: layer,
            blocks: cfg.num_blocks(),
        });
    }
    let [_, t_in, h_in, w_in] = seq.dims4()?;
    let mut tape = GradTape::new();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(seq.clone());
    let mut cur = lta_taped(&mut tape, &pv, cfg, x)?;
    for b in 0..=layer {
        let tr = crate::model::dam_taped(&mut tape, &pv.blocks[b], cfg, cfg.mode, cur)?;
        cur = tr.output;
        if b < layer && cfg.pool_after.contains(&b) {
            cur = tape.maxpool_spatial(cur, (2, 2))?;
        }
    }
    let act = tape.value(cur);
    let [c, tb, h, w] = act.dims4()?;
    let hw = h * w;
    let block_maps: Vec<Vec<f64>> = (0..tb)
        .map(|t| {
            let mut m = vec![0.0; hw];
            for ch in 0..c {
                let off = (ch * tb + t) * hw;
                for (mi, v) in m.iter_mut().zip(&act.data()[off..off + hw]) {
                    *mi += v.as_f64().abs();
                }
            }
            m.iter_mut().for_each(|v| *v /= c as f64);
            let mut up = bilinear_upsample(&m, h, w, h_in, w_in);
            min_max_normalize(&mut up);
            up
        })
        .collect();
    Ok((0..t_in)
        .map(|t| block_maps[(t / 3).min(tb - 1)].clone())
        .collect())
}

/// Mean heat over the pixels where `mask` holds, across all frames;
/// `None` if the mask is empty everywhere.
pub fn region_heat(maps: &[Vec<f64>], masks: &[Vec<bool>]) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (m, k) in maps.iter().zip(masks) {
        for (v, &on) in m.iter().zip(k) {
            if on {
                s += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Leg and bag masks at model resolution, one pair per frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionSet {
    pub legs: Vec<Vec<bool>>,
    pub bag: Vec<Vec<bool>>,
}

/// Normalize raw frames and their label images together: each frame's
/// [`NormalizePlan`] is replayed on a per-region binary mask, so a region
/// covers an output cell whenever it touches that cell's footprint.
/// Frames with no foreground are dropped from both outputs.
pub fn normalize_with_regions(
    frames: &[Gray],
    labels: &[Gray],
    out_h: usize,
    out_w: usize,
    mode: NormalizeMode,
) -> Result<(Vec<Mask>, RegionSet)> {
    if frames.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} frames but {} label images",
            frames.len(),
            labels.len()
        )));
    }
    let mut masks = Vec::new();
    let mut set = RegionSet::default();
    for (f, l) in frames.iter().zip(labels) {
        if (f.height, f.width) != (l.height, l.width) {
            return Err(Error::shape(
                "region labels",
                &[l.height, l.width],
                &[f.height, f.width],
            ));
        }
        let fg = f.clone().map_values(|v| (v > 0) as u8);
        let Some(plan) = NormalizePlan::new(&fg, out_h, out_w, mode) else {
            continue;
        };
        masks.push(plan.apply(&fg));
        let region = |r: u8| -> Vec<bool> {
            let m = l.clone().map_values(|v| (v == r) as u8);
            plan.apply(&m).data.iter().map(|&v| v > 0).collect()
        };
        set.legs.push(region(REGION_LEGS));
        set.bag.push(region(REGION_BAG));
    }
    Ok((masks, set))
}

/// `(heat_legs, heat_bag)` of one sequence; either is `None` when that
/// region never appears.
pub fn region_heats<T: Scalar>(
    seq: &Tensor<T>,
    regions: &RegionSet,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let maps = activation_heatmap(seq, params, cfg, layer)?;
    Ok((
        region_heat(&maps, &regions.legs),
        region_heat(&maps, &regions.bag),
    ))
}

/// 8-bit rendering of a [0, 1] map.
pub fn to_gray(map: &[f64], h: usize, w: usize) -> Gray {
    let data = map
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Gray::from_vec(h, w, data).expect("map size")
}

//! The recognition network: a local temporal aggregation stem, a stack of
//! dynamic augmentation blocks with interleaved spatial pooling, temporal
//! max aggregation and horizontal strip mapping.
//!
//! Each block computes
//!
//! ```text
//! X_d   = X - mean_t(X)                       dynamic difference
//! Y_dfe = conv3x3x3(X_d)                      dynamic branch
//! Y_gfe = conv1x3x3(X)                        global branch
//! Y_dam = lrelu(Y_gfe + Y_dfe)
//! out   = lrelu(conv3x3x3(X)) + Y_dam
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{ConvGeom, TemporalPadding};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

/// Which branches feed the block's activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DamMode {
    GfeOnly,
    DfeOnly,
    #[default]
    Both,
}

impl DamMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gfe_only" => Some(DamMode::GfeOnly),
            "dfe_only" => Some(DamMode::DfeOnly),
            "both" => Some(DamMode::Both),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DamMode::GfeOnly => "gfe_only",
            DamMode::DfeOnly => "dfe_only",
            DamMode::Both => "both",
        }
    }
}

impl fmt::Display for DamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output width of each block; the stem uses `stage_channels[0]`.
    pub stage_channels: Vec<usize>,
    /// Block indices followed by a 2x2 spatial max-pool.
    pub pool_after: Vec<usize>,
    pub strips: usize,
    pub embed_dim: usize,
    pub leaky_slope: f64,
    /// `(H, W)` of every input frame.
    pub input_size: (usize, usize),
    pub temporal_padding: TemporalPadding,
    pub mode: DamMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::three_block()
    }
}

impl ModelConfig {
    /// Three blocks on 64x44 silhouettes, widths 32/64/128.
    pub fn three_block() -> Self {
        ModelConfig {
            in_channels: 1,
            stage_channels: vec![32, 64, 128],
            pool_after: vec![0, 1],
            strips: 16,
            embed_dim: 128,
            leaky_slope: 0.01,
            input_size: (64, 44),
            temporal_padding: TemporalPadding::Circular,
            mode: DamMode::Both,
        }
    }

    /// Five blocks, widths 32/64/128/256/256.
    pub fn five_block(input_size: (usize, usize)) -> Self {
        ModelConfig {
            stage_channels: vec![32, 64, 128, 256, 256],
            input_size,
            ..ModelConfig::three_block()
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.stage_channels.len()
    }

    /// `(C_in, C_out)` of block `b`.
    pub fn block_channels(&self, b: usize) -> (usize, usize) {
        let cin = if b == 0 {
            self.stage_channels[0]
        } else {
            self.stage_channels[b - 1]
        };
        (cin, self.stage_channels[b])
    }

    /// Spatial size after the backbone.
    pub fn backbone_hw(&self) -> (usize, usize) {
        let pools = self.pool_after.len() as u32;
        (self.input_size.0 >> pools, self.input_size.1 >> pools)
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated config")
    }

    pub fn slope<T: Scalar>(&self) -> T {
        T::from_f64_lossy(self.leaky_slope)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.embed_dim == 0 || self.strips == 0 {
            return bad("strips and embed_dim must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        let mut sorted = self.pool_after.clone();
        sorted.dedup();
        if sorted.windows(2).any(|w| w[0] >= w[1]) || sorted.len() != self.pool_after.len() {
            return bad("pool_after must be strictly increasing".into());
        }
        if self.pool_after.iter().any(|&b| b >= self.num_blocks()) {
            return bad("pool_after refers to a missing block".into());
        }
        let (mut h, mut w) = self.input_size;
        for _ in &self.pool_after {
            if h < 2 || w < 2 {
                return bad(format!(
                    "{}x{} input cannot be pooled {} times",
                    self.input_size.0,
                    self.input_size.1,
                    self.pool_after.len()
                ));
            }
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 || h % self.strips != 0 {
            return bad(format!(
                "{} strips do not divide backbone height {}",
                self.strips, h
            ));
        }
        Ok(())
    }

    /// Copy with the block stack truncated or extended to `n` blocks
    /// (extension repeats the last width; pools beyond `n` are dropped).
    pub fn with_blocks(&self, n: usize) -> Self {
        let mut c = self.clone();
        let last = *c.stage_channels.last().unwrap_or(&32);
        c.stage_channels.resize(n, last);
        c.pool_after.retain(|&b| b < n);
        c
    }

    /// Every `(name, shape)` the forward pass produces for a clip of `t`
    /// frames.
    pub fn layer_shapes(&self, t: usize) -> Vec<(String, Vec<usize>)> {
        let (h0, w0) = self.input_size;
        let c0 = self.stage_channels[0];
        let mut out = vec![
            ("lta.conv1".to_string(), vec![c0, t, h0, w0]),
            ("lta".to_string(), vec![c0, t / 3, h0, w0]),
        ];
        let (mut h, mut w) = (h0, w0);
        for b in 0..self.num_blocks() {
            let (_, co) = self.block_channels(b);
            out.push((format!("block{b}"), vec![co, t / 3, h, w]));
            if self.pool_after.contains(&b) {
                h /= 2;
                w /= 2;
                out.push((format!("pool{b}"), vec![co, t / 3, h, w]));
            }
        }
        let c = self.feature_channels();
        out.push(("ta".into(), vec![c, 1, h, w]));
        out.push(("hm.pool".into(), vec![self.strips, c]));
        out.push(("embedding".into(), vec![self.strips, self.embed_dim]));
        out
    }
}

pub(crate) fn geom_3x3x3(tp: TemporalPadding) -> ConvGeom {
    ConvGeom::new(1, [1, 1, 1], tp)
}

pub(crate) fn geom_1x3x3(tp: TemporalPadding) -> ConvGeom {
    ConvGeom::new(1, [0, 1, 1], tp)
}

pub(crate) fn geom_lta_temporal(tp: TemporalPadding) -> ConvGeom {
    ConvGeom::new(3, [0, 0, 0], tp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DamParams<T> {
    /// 3x3x3 kernel of the residual path.
    pub afm: Tensor<T>,
    /// 3x3x3 kernel applied to the dynamic difference.
    pub dfe: Tensor<T>,
    /// 1x3x3 kernel applied to the raw block input.
    pub gfe: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub lta_conv1: Tensor<T>,
    pub lta_conv2: Tensor<T>,
    pub blocks: Vec<DamParams<T>>,
    /// Per-strip mapping matrices, `(S, d, C)`.
    pub hm: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// `(name, shape)` of every parameter tensor, in canonical order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let c0 = cfg.stage_channels[0];
        let mut v = vec![
            ("lta.conv1".to_string(), vec![c0, cfg.in_channels, 3, 3, 3]),
            ("lta.conv2".to_string(), vec![c0, c0, 3, 1, 1]),
        ];
        for b in 0..cfg.num_blocks() {
            let (ci, co) = cfg.block_channels(b);
            v.push((format!("block{b}.afm"), vec![co, ci, 3, 3, 3]));
            v.push((format!("block{b}.dfe"), vec![co, ci, 3, 3, 3]));
            v.push((format!("block{b}.gfe"), vec![co, ci, 1, 3, 3]));
        }
        v.push((
            "hm".into(),
            vec![cfg.strips, cfg.embed_dim, cfg.feature_channels()],
        ));
        v
    }

    /// Build from tensors given in [`ModelParams::layout`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let layout = Self::layout(cfg);
        if tensors.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let lta_conv1 = it.next().unwrap();
        let lta_conv2 = it.next().unwrap();
        let blocks = (0..cfg.num_blocks())
            .map(|_| DamParams {
                afm: it.next().unwrap(),
                dfe: it.next().unwrap(),
                gfe: it.next().unwrap(),
            })
            .collect();
        let hm = it.next().unwrap();
        Ok(ModelParams {
            lta_conv1,
            lta_conv2,
            blocks,
            hm,
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let ts = Self::layout(cfg)
            .iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect();
        Self::from_tensors(cfg, ts).expect("layout is self-consistent")
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.lta_conv1, &self.lta_conv2];
        for b in &self.blocks {
            v.extend([&b.afm, &b.dfe, &b.gfe]);
        }
        v.push(&self.hm);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.lta_conv1, &mut self.lta_conv2];
        for b in &mut self.blocks {
            v.extend([&mut b.afm, &mut b.dfe, &mut b.gfe]);
        }
        v.push(&mut self.hm);
        v
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            lta_conv1: self.lta_conv1.cast(),
            lta_conv2: self.lta_conv2.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DamParams {
                    afm: b.afm.cast(),
                    dfe: b.dfe.cast(),
                    gfe: b.gfe.cast(),
                })
                .collect(),
            hm: self.hm.cast(),
        }
    }

    /// Put every tensor on `tape`, as trainable leaves or constants.
    pub fn register(&self, tape: &mut GradTape<T>, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            lta_conv1: put(&self.lta_conv1),
            lta_conv2: put(&self.lta_conv2),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    afm: put(&b.afm),
                    dfe: put(&b.dfe),
                    gfe: put(&b.gfe),
                })
                .collect(),
            hm: put(&self.hm),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub afm: Var,
    pub dfe: Var,
    pub gfe: Var,
}

/// Tape handles of every parameter, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub lta_conv1: Var,
    pub lta_conv2: Var,
    pub blocks: Vec<BlockVars>,
    pub hm: Var,
}

impl ParamVars {
    /// Inverse of [`ParamVars::vars`].
    pub fn from_vars(cfg: &ModelConfig, v: &[Var]) -> Result<Self> {
        let n = cfg.num_blocks();
        if v.len() != 3 * n + 3 {
            return Err(Error::Config(format!(
                "expected {} parameter handles, got {}",
                3 * n + 3,
                v.len()
            )));
        }
        Ok(ParamVars {
            lta_conv1: v[0],
            lta_conv2: v[1],
            blocks: (0..n)
                .map(|b| BlockVars {
                    afm: v[2 + 3 * b],
                    dfe: v[3 + 3 * b],
                    gfe: v[4 + 3 * b],
                })
                .collect(),
            hm: v[2 + 3 * n],
        })
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.lta_conv1, self.lta_conv2];
        for b in &self.blocks {
            v.extend([b.afm, b.dfe, b.gfe]);
        }
        v.push(self.hm);
        v
    }
}

/// Intermediate values of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub input: Var,
    /// Dynamic difference `X_d`; absent in `gfe_only` mode.
    pub dynamic: Option<Var>,
    pub y_dfe: Option<Var>,
    pub y_gfe: Option<Var>,
    pub y_dam: Var,
    pub output: Var,
}

/// Intermediate values of one network pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub lta: Var,
    pub blocks: Vec<BlockTrace>,
    pub backbone: Var,
    pub ta: Var,
    pub pooled: Var,
    pub embedding: Var,
}

pub fn lta_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let [c, t, _, _] = tape.value(x).dims4()?;
    if c != cfg.in_channels {
        return Err(Error::shape(
            "lta (input channels)",
            tape.value(x).shape(),
            &[cfg.in_channels],
        ));
    }
    if t < 3 {
        return Err(Error::SequenceTooShort { need: 3, got: t });
    }
    let slope = cfg.slope::<T>();
    let tp = cfg.temporal_padding;
    let a = tape.conv3d(x, pv.lta_conv1, geom_3x3x3(tp))?;
    let a = tape.leaky_relu(a, slope);
    let b = tape.conv3d(a, pv.lta_conv2, geom_lta_temporal(tp))?;
    Ok(tape.leaky_relu(b, slope))
}

pub fn dam_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    bv: &BlockVars,
    cfg: &ModelConfig,
    mode: DamMode,
    x: Var,
) -> Result<BlockTrace> {
    let slope = cfg.slope::<T>();
    let tp = cfg.temporal_padding;
    let (dynamic, y_dfe) = if mode == DamMode::GfeOnly {
        (None, None)
    } else {
        let m = tape.mean_over_time(x)?;
        let d = tape.subtract_broadcast(x, m)?;
        (Some(d), Some(tape.conv3d(d, bv.dfe, geom_3x3x3(tp))?))
    };
    let y_gfe = if mode == DamMode::DfeOnly {
        None
    } else {
        Some(tape.conv3d(x, bv.gfe, geom_1x3x3(tp))?)
    };
    let pre = match (y_gfe, y_dfe) {
        (Some(g), Some(d)) => tape.add(g, d)?,
        (Some(g), None) => g,
        (None, Some(d)) => d,
        (None, None) => unreachable!("at least one branch is active"),
    };
    let y_dam = tape.leaky_relu(pre, slope);
    let residual = tape.conv3d(x, bv.afm, geom_3x3x3(tp))?;
    let residual = tape.leaky_relu(residual, slope);
    let output = tape.add(residual, y_dam)?;
    Ok(BlockTrace {
        input: x,
        dynamic,
        y_dfe,
        y_gfe,
        y_dam,
        output,
    })
}

/// All blocks plus the configured pooling, starting from the stem output.
pub fn backbone_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
) -> Result<(Var, Vec<BlockTrace>)> {
    let mut cur = x;
    let mut traces = Vec::with_capacity(cfg.num_blocks());
    for (b, bv) in pv.blocks.iter().enumerate() {
        let tr = dam_taped(tape, bv, cfg, cfg.mode, cur)?;
        cur = tr.output;
        traces.push(tr);
        if cfg.pool_after.contains(&b) {
            cur = tape.maxpool_spatial(cur, (2, 2))?;
        }
    }
    Ok((cur, traces))
}

pub fn network_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
) -> Result<ForwardTrace> {
    let [_, _, h, w] = tape.value(x).dims4()?;
    if (h, w) != cfg.input_size {
        return Err(Error::shape(
            "network input size",
            tape.value(x).shape(),
            &[cfg.in_channels, 0, cfg.input_size.0, cfg.input_size.1],
        ));
    }
    let lta = lta_taped(tape, pv, cfg, x)?;
    let (backbone, blocks) = backbone_taped(tape, pv, cfg, lta)?;
    let ta = tape.max_over_time(backbone)?;
    let pooled = tape.strip_pool(ta, cfg.strips)?;
    let embedding = tape.strip_linear(pooled, pv.hm)?;
    Ok(ForwardTrace {
        lta,
        blocks,
        backbone,
        ta,
        pooled,
        embedding,
    })
}

fn block_vars<T: Scalar>(tape: &mut GradTape<T>, p: &DamParams<T>) -> BlockVars {
    BlockVars {
        afm: tape.constant(p.afm.clone()),
        dfe: tape.constant(p.dfe.clone()),
        gfe: tape.constant(p.gfe.clone()),
    }
}

/// Stem: two convolutions, the second with temporal stride 3 (T -> T/3).
pub fn lta_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let pv = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = lta_taped(&mut tape, &pv, cfg, xv)?;
    Ok(tape.value(y).clone())
}

/// Temporal mean template of a feature map.
pub fn gait_template<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    crate::ops::mean_over_time(x)
}

/// Per-frame deviation from the temporal mean.
pub fn dynamic_difference<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    crate::ops::subtract_broadcast(x, &gait_template(x)?)
}

pub fn dam_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &DamParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    dam_forward_ablated(x, block, cfg, DamMode::Both)
}

pub fn dam_forward_ablated<T: Scalar>(
    x: &Tensor<T>,
    block: &DamParams<T>,
    cfg: &ModelConfig,
    mode: DamMode,
) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let bv = block_vars(&mut tape, block);
    let xv = tape.constant(x.clone());
    let tr = dam_taped(&mut tape, &bv, cfg, mode, xv)?;
    Ok(tape.value(tr.output).clone())
}

/// Blocks and pooling applied to a stem output.
pub fn backbone_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let pv = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (y, _) = backbone_taped(&mut tape, &pv, cfg, xv)?;
    Ok(tape.value(y).clone())
}

/// Elementwise maximum over frames.
pub fn temporal_aggregation<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(crate::ops::max_over_time(x)?.0)
}

/// Strip pooling plus per-strip linear maps; `x` must have `T = 1`.
/// Returns `(S, d)`.
pub fn horizontal_mapping<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let (pooled, _) = crate::ops::strip_pool(x, cfg.strips)?;
    crate::ops::strip_linear_batch(&pooled, &params.hm)
}

/// Full pass over a `(C_in, T, H, W)` sequence; returns the `(S, d)` embedding.
pub fn network_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let pv = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let tr = network_taped(&mut tape, &pv, cfg, xv)?;
    Ok(tape.value(tr.embedding).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            stage_channels: vec![3, 4],
            pool_after: vec![0],
            strips: 2,
            embed_dim: 5,
            input_size: (8, 6),
            ..ModelConfig::three_block()
        }
    }

    fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts = ModelParams::<f64>::layout(cfg)
            .iter()
            .map(|(_, s)| random(s, &mut rng).map(|v| v * 0.5))
            .collect();
        ModelParams::from_tensors(cfg, ts).unwrap()
    }

    fn constant_in_time(
        c: usize,
        t: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Tensor<f64> {
        let frame = random(&[c, 1, h, w], rng);
        let hw = h * w;
        Tensor::from_fn(&[c, t, h, w], |i| {
            let ci = i / (t * hw);
            frame.data()[ci * hw + i % hw]
        })
    }

    #[test]
    fn lta_reduces_thirty_frames_to_ten() {
        let cfg = ModelConfig {
            stage_channels: vec![2],
            pool_after: vec![],
            strips: 1,
            input_size: (4, 4),
            ..small_cfg()
        };
        let p = random_params(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = lta_forward(&random(&[1, 30, 4, 4], &mut rng), &p, &cfg).unwrap();
        assert_eq!(y.shape(), &[2, 10, 4, 4]);
        let z = lta_forward(&Tensor::zeros(&[1, 30, 4, 4]), &p, &cfg).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            lta_forward(&Tensor::zeros(&[1, 2, 4, 4]), &p, &cfg),
            Err(Error::SequenceTooShort { need: 3, got: 2 })
        ));
    }

    #[test]
    fn template_and_difference_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = constant_in_time(2, 5, 3, 3, &mut rng);
        assert_eq!(
            gait_template(&c).unwrap().data(),
            &c.data()[..9]
                .iter()
                .chain(&c.data()[45..54])
                .copied()
                .collect::<Vec<_>>()[..]
        );
        assert!(dynamic_difference(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let a = random(&[2, 1, 3, 3], &mut rng);
        let mut pair = Tensor::zeros(&[2, 2, 3, 3]);
        for ci in 0..2 {
            for p in 0..9 {
                pair.data_mut()[(ci * 2) * 9 + p] = a.data()[ci * 9 + p];
                pair.data_mut()[(ci * 2 + 1) * 9 + p] = -a.data()[ci * 9 + p];
            }
        }
        assert!(gait_template(&pair)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v.abs() < 1e-15));

        let one = random(&[2, 1, 3, 3], &mut rng);
        assert!(dynamic_difference(&one)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn dam_matches_composed_reference() {
        // Glue the numeric-core ops together in block order, independently
        // of the tape.
        let cfg = small_cfg();
        let p = random_params(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4, 8, 6], &mut rng);
        let b = &p.blocks[0];
        let tp = cfg.temporal_padding;
        let s = cfg.leaky_slope;
        let xd = ops::subtract_broadcast(&x, &ops::mean_over_time(&x).unwrap()).unwrap();
        let dfe = ops::conv3d_raw(&xd, &b.dfe, &geom_3x3x3(tp)).unwrap();
        let gfe = ops::conv3d_raw(&x, &b.gfe, &geom_1x3x3(tp)).unwrap();
        let mut sum = gfe.clone();
        sum.add_assign(&dfe).unwrap();
        let dam = ops::leaky_relu(&sum, s);
        let mut want = ops::leaky_relu(&ops::conv3d_raw(&x, &b.afm, &geom_3x3x3(tp)).unwrap(), s);
        want.add_assign(&dam).unwrap();
        assert_eq!(dam_forward(&x, b, &cfg).unwrap(), want);

        let z = Tensor::zeros(&[3, 4, 8, 6]);
        assert!(dam_forward(&z, b, &cfg)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(dam_forward_ablated(&z, b, &cfg, DamMode::DfeOnly)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(dam_forward(&random(&[2, 4, 8, 6], &mut rng), b, &cfg).is_err());
    }

    #[test]
    fn constant_input_makes_dynamic_branch_vanish() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = constant_in_time(3, 5, 8, 6, &mut rng);
        let b = &p.blocks[0];
        let both = dam_forward(&x, b, &cfg).unwrap();
        let gfe = dam_forward_ablated(&x, b, &cfg, DamMode::GfeOnly).unwrap();
        assert_eq!(both, gfe);

        let s = cfg.leaky_slope;
        let tp = cfg.temporal_padding;
        let mut want = ops::leaky_relu(&ops::conv3d_raw(&x, &b.afm, &geom_3x3x3(tp)).unwrap(), s);
        want.add_assign(&ops::leaky_relu(
            &ops::conv3d_raw(&x, &b.gfe, &geom_1x3x3(tp)).unwrap(),
            s,
        ))
        .unwrap();
        assert_eq!(both, want);
    }

    #[test]
    fn ablation_both_equals_full_block() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 4, 8, 6], &mut rng);
        assert_eq!(
            dam_forward_ablated(&x, &p.blocks[0], &cfg, DamMode::Both).unwrap(),
            dam_forward(&x, &p.blocks[0], &cfg).unwrap()
        );
    }

    #[test]
    fn horizontal_mapping_cases() {
        let cfg = ModelConfig {
            strips: 1,
            embed_dim: 3,
            stage_channels: vec![2],
            pool_after: vec![],
            input_size: (4, 2),
            ..small_cfg()
        };
        let mut p = random_params(&cfg, 10);
        p.hm = Tensor::from_fn(&[1, 3, 2], |i| (i as f64) * 0.1);
        let x = Tensor::full(&[2, 1, 4, 2], 0.25);
        let e = horizontal_mapping(&x, &p, &cfg).unwrap();
        for j in 0..3 {
            let want = p.hm.data()[j * 2] * 0.5 + p.hm.data()[j * 2 + 1] * 0.5;
            assert!((e.data()[j] - want).abs() < 1e-15);
        }

        // loop oracle for random input and several strips
        let cfg = ModelConfig { strips: 2, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        p.hm = random(&[2, 3, 2], &mut rng);
        let x = random(&[2, 1, 4, 2], &mut rng);
        let e = horizontal_mapping(&x, &p, &cfg).unwrap();
        for s in 0..2 {
            let mut pooled = [0.0; 2];
            for (c, pc) in pooled.iter_mut().enumerate() {
                let cells: Vec<f64> = (0..4).map(|k| x.data()[c * 8 + s * 4 + k]).collect();
                *pc = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    + cells.iter().sum::<f64>() / 4.0;
            }
            for j in 0..3 {
                let want: f64 = (0..2)
                    .map(|c| p.hm.data()[(s * 3 + j) * 2 + c] * pooled[c])
                    .sum();
                assert!((e.data()[s * 3 + j] - want).abs() < 1e-12);
            }
        }
        assert!(horizontal_mapping(&random(&[2, 1, 3, 2], &mut rng), &p, &cfg).is_err());
    }

    #[test]
    fn network_is_deterministic_and_shaped() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for t in [3, 7, 12] {
            let x = random(&[1, t, 8, 6], &mut rng);
            let a = network_forward(&x, &p, &cfg).unwrap();
            let b = network_forward(&x, &p, &cfg).unwrap();
            assert_eq!(a.shape(), &[2, 5]);
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::three_block().validate().is_ok());
        assert!(ModelConfig::five_block((64, 44)).validate().is_ok());
        assert!(ModelConfig::five_block((128, 88)).validate().is_ok());
        let bad = ModelConfig {
            strips: 5,
            ..ModelConfig::three_block()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            stage_channels: vec![],
            ..ModelConfig::three_block()
        };
        assert!(bad.validate().is_err());
        let one = ModelConfig::three_block().with_blocks(1);
        assert_eq!(one.stage_channels, vec![32]);
        assert_eq!(one.pool_after, vec![0]);
    }
}

//! Identity-balanced batch sampling, parameter initialization, optimizers
//! and the training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::loss::{combined_loss_taped, Classifier, LossReport};
use crate::model::{network_taped, ModelConfig, ModelParams};
use crate::preprocess::{
    load_partition, sample_clip, DatasetManifest, NormalizeMode, Partition, SilhouetteSequence,
};
use crate::tape::GradTape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub p: usize,
    pub k: usize,
    pub clip_len: usize,
    pub iterations: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub adam_betas: (f64, f64),
    pub margin: f64,
    pub seed: u64,
    /// Save every this many iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 4,
            k: 4,
            clip_len: 30,
            iterations: 1000,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            adam_betas: (0.9, 0.999),
            margin: 0.2,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.p < 2 || self.k < 2 {
            return bad("P and K must both be at least 2");
        }
        if self.clip_len < 3 {
            return bad("clip_len must be at least 3");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_betas.0) || !(0.0..1.0).contains(&self.adam_betas.1) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Pick `p` distinct subjects, then `k` sequences of each. `by_subject[i]`
/// lists the sequence indices of subject `i`; subjects with fewer than `k`
/// sequences are sampled with replacement. Returns `(subject, sequence)`.
pub fn pk_sample<R: Rng>(
    by_subject: &[Vec<usize>],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = (0..by_subject.len())
        .filter(|&i| !by_subject[i].is_empty())
        .collect();
    if eligible.len() < p {
        return Err(Error::DatasetTooSmall(format!(
            "{} subjects with training sequences, P = {p}",
            eligible.len()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for pick in sample(rng, eligible.len(), p).into_iter() {
        let s = eligible[pick];
        let seqs = &by_subject[s];
        if seqs.len() >= k {
            out.extend(sample(rng, seqs.len(), k).into_iter().map(|i| (s, seqs[i])));
        } else {
            out.extend((0..k).map(|_| (s, seqs[rng.gen_range(0..seqs.len())])));
        }
    }
    Ok(out)
}

fn uniform_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-b..b)))
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

/// Every weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let tensors = ModelParams::<T>::layout(cfg)
        .iter()
        .map(|(name, shape)| {
            // hm is (S, d, C): fan-in is C
            let fi = if name == "hm" {
                shape[2]
            } else {
                fan_in(shape)
            };
            uniform_tensor(shape, fi, &mut rng)
        })
        .collect();
    ModelParams::from_tensors(cfg, tensors).expect("layout shapes")
}

/// Per-strip class projections with fan-in `d` and zero bias.
pub fn init_classifier<T: Scalar>(cfg: &ModelConfig, classes: usize, seed: u64) -> Classifier<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    Classifier {
        weight: uniform_tensor(
            &[cfg.strips, classes, cfg.embed_dim],
            cfg.embed_dim,
            &mut rng,
        ),
        bias: Tensor::zeros(&[cfg.strips, classes]),
    }
}

/// Optimizer with its per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<T> {
    Sgd {
        momentum: f64,
        velocity: Vec<Tensor<T>>,
    },
    Adam {
        betas: (f64, f64),
        eps: f64,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum: cfg.momentum,
                velocity: zeros(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                betas: cfg.adam_betas,
                eps: 1e-8,
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// Apply one update. `params` and `grads` are index-aligned.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                let mu = T::from_f64_lossy(*momentum);
                let lr = T::from_f64_lossy(lr);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = mu * *vi - lr * gi;
                        *pi += *vi;
                    }
                }
            }
            Optimizer::Adam {
                betas,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let (b1, b2) = (T::from_f64_lossy(betas.0), T::from_f64_lossy(betas.1));
                let c1 = T::from_f64_lossy(1.0 - betas.0.powi(*step as i32));
                let c2 = T::from_f64_lossy(1.0 - betas.1.powi(*step as i32));
                let lr = T::from_f64_lossy(lr);
                let eps = T::from_f64_lossy(*eps);
                let one = T::one();
                for (((p, g), mt), vt) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mt.data_mut())
                        .zip(vt.data_mut());
                    for (((pi, &gi), mi), vi) in it {
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }

    fn named_state(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Optimizer::Sgd { velocity, .. } => velocity
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("opt.v.{i}"), t))
                .collect(),
            Optimizer::Adam { m, v, .. } => m
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("opt.m.{i}"), t))
                .chain(v.iter().enumerate().map(|(i, t)| (format!("opt.v.{i}"), t)))
                .collect(),
        }
    }
}

/// Normalized training sequences grouped by subject.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub sequences: Vec<SilhouetteSequence>,
    /// Class index of each sequence.
    pub labels: Vec<usize>,
    pub by_subject: Vec<Vec<usize>>,
    pub subjects: Vec<String>,
}

impl TrainingData {
    pub fn new(sequences: Vec<SilhouetteSequence>) -> Self {
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        for s in &sequences {
            let n = ids.len();
            ids.entry(s.subject.clone()).or_insert(n);
        }
        // class indices follow sorted subject order
        let subjects: Vec<String> = ids.keys().cloned().collect();
        let index: BTreeMap<&str, usize> = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let labels: Vec<usize> = sequences
            .iter()
            .map(|s| index[s.subject.as_str()])
            .collect();
        let mut by_subject = vec![Vec::new(); subjects.len()];
        for (i, &l) in labels.iter().enumerate() {
            by_subject[l].push(i);
        }
        TrainingData {
            sequences,
            labels,
            by_subject,
            subjects,
        }
    }

    /// Load the training partition of a manifest at the model's input size.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        cfg: &ModelConfig,
        mode: NormalizeMode,
    ) -> Result<Self> {
        let seqs = load_partition(manifest, Partition::Train, cfg.input_size, mode)?;
        if seqs.is_empty() {
            return Err(Error::DatasetTooSmall(
                "manifest has no training sequences".into(),
            ));
        }
        Ok(Self::new(seqs))
    }

    pub fn classes(&self) -> usize {
        self.subjects.len()
    }
}

/// Model parameters stored in `ckpt` under their layout names.
pub fn params_from_checkpoint(ckpt: &Checkpoint, model: &ModelConfig) -> Result<ModelParams<f32>> {
    ModelParams::from_tensors(
        model,
        ModelParams::<f32>::layout(model)
            .iter()
            .map(|(name, _)| ckpt.get(name)?.to_tensor())
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub classifier: Classifier<f32>,
    pub optimizer: Optimizer<f32>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: ModelConfig, train: TrainConfig, classes: usize) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = init_params(&model, train.seed);
        let classifier = init_classifier(&model, classes, train.seed);
        let shapes: Vec<Vec<usize>> = params
            .tensors()
            .into_iter()
            .chain([&classifier.weight, &classifier.bias])
            .map(|t| t.shape().to_vec())
            .collect();
        let optimizer = Optimizer::new(&train, &shapes);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(3);
        Ok(TrainState {
            model,
            train,
            params,
            classifier,
            optimizer,
            iteration: 0,
            rng,
        })
    }

    /// Draw the next P x K batch of clips.
    pub fn next_batch(&mut self, data: &TrainingData) -> Result<Vec<(Tensor<f32>, usize)>> {
        let picks = pk_sample(&data.by_subject, self.train.p, self.train.k, &mut self.rng)?;
        picks
            .into_iter()
            .map(|(subject, seq)| {
                let clip = sample_clip(&data.sequences[seq], self.train.clip_len, &mut self.rng);
                Ok((clip.to_tensor()?, subject))
            })
            .collect()
    }

    /// One forward/backward/update on `batch`. On a non-finite loss or
    /// gradient nothing is modified and a divergence error is returned.
    pub fn train_step(&mut self, batch: &[(Tensor<f32>, usize)]) -> Result<LossReport> {
        let step = self.iteration + 1;
        let mut tape = GradTape::<f32>::new();
        let pv = self.params.register(&mut tape, true);
        let cv = self.classifier.register(&mut tape, true);
        let mut embeddings = Vec::with_capacity(batch.len());
        for (x, _) in batch {
            let xv = tape.constant(x.clone());
            embeddings.push(network_taped(&mut tape, &pv, &self.model, xv)?.embedding);
        }
        let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
        let (root, report) =
            combined_loss_taped(&mut tape, &embeddings, cv, &labels, self.train.margin)?;
        if !report.loss_all.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = tape.backward(root)?;
        let vars: Vec<_> = pv.vars().into_iter().chain([cv.weight, cv.bias]).collect();
        let mut g = Vec::with_capacity(vars.len());
        for v in vars {
            let t = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            if !t.all_finite() {
                return Err(Error::Divergence { step });
            }
            g.push(t);
        }
        let mut params: Vec<&mut Tensor<f32>> = self.params.tensors_mut();
        params.push(&mut self.classifier.weight);
        params.push(&mut self.classifier.bias);
        self.optimizer.step(&mut params, &g, self.train.lr);
        self.iteration = step;
        Ok(report)
    }

    /// Train until `until` iterations, writing one CSV row per step to `log`
    /// and calling `on_checkpoint` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        data: &TrainingData,
        until: u64,
        log: &mut dyn Write,
        on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while self.iteration < until {
            let batch = self.next_batch(data)?;
            let r = self.train_step(&batch)?;
            writeln!(log, "{}", r.csv_row(self.iteration))
                .map_err(|e| Error::io("training log", e))?;
            reports.push(r);
            let every = self.train.checkpoint_every;
            if every > 0 && self.iteration % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(reports)
    }

    fn rng_bytes(&self) -> Vec<u8> {
        let mut b = self.rng.get_seed().to_vec();
        b.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        b
    }

    fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
        if b.len() != 32 + 8 + 16 {
            return Err(Error::Checkpoint("bad rng state".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
        rng.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
        rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
        Ok(rng)
    }

    pub fn to_checkpoint(&self, config_blob: String) -> Checkpoint {
        let mut tensors: Vec<NamedTensor> = ModelParams::<f32>::layout(&self.model)
            .iter()
            .zip(self.params.tensors())
            .map(|((name, _), t)| NamedTensor::from_tensor(name.clone(), t))
            .collect();
        tensors.push(NamedTensor::from_tensor(
            "cls.weight",
            &self.classifier.weight,
        ));
        tensors.push(NamedTensor::from_tensor("cls.bias", &self.classifier.bias));
        for (name, t) in self.optimizer.named_state() {
            tensors.push(NamedTensor::from_tensor(name, t));
        }
        if let Optimizer::Adam { step, .. } = &self.optimizer {
            tensors.push(NamedTensor::bytes("opt.step", step.to_le_bytes().to_vec()));
        }
        tensors.push(NamedTensor::bytes("rng", self.rng_bytes()));
        Checkpoint {
            iteration: self.iteration,
            config: config_blob,
            tensors,
        }
    }

    /// Rebuild a state from a checkpoint written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        model: ModelConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        let params = params_from_checkpoint(ckpt, &model)?;
        let classifier = Classifier {
            weight: ckpt.get("cls.weight")?.to_tensor()?,
            bias: ckpt.get("cls.bias")?.to_tensor()?,
        };
        let n = params.tensors().len() + 2;
        let load = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            (0..n)
                .map(|i| ckpt.get(&format!("{prefix}.{i}"))?.to_tensor())
                .collect()
        };
        let optimizer = match train.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum: train.momentum,
                velocity: load("opt.v")?,
            },
            OptimizerKind::Adam => {
                let step = match &ckpt.get("opt.step")?.data {
                    crate::checkpoint::TensorData::U8(b) if b.len() == 8 => {
                        u64::from_le_bytes(b[..].try_into().unwrap())
                    }
                    _ => return Err(Error::Checkpoint("bad optimizer step".into())),
                };
                Optimizer::Adam {
                    betas: train.adam_betas,
                    eps: 1e-8,
                    step,
                    m: load("opt.m")?,
                    v: load("opt.v")?,
                }
            }
        };
        let rng = match &ckpt.get("rng")?.data {
            crate::checkpoint::TensorData::U8(b) => Self::rng_from_bytes(b)?,
            _ => return Err(Error::Checkpoint("bad rng state".into())),
        };
        Ok(TrainState {
            model,
            train,
            params,
            classifier,
            optimizer,
            iteration: ckpt.iteration,
            rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pk_sample_cases() {
        let subjects: Vec<Vec<usize>> = (0..5).map(|s| (s * 10..s * 10 + 6).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = pk_sample(&subjects, 5, 2, &mut rng).unwrap();
        let mut seen: Vec<usize> = b.iter().map(|x| x.0).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);

        let single = vec![vec![7], vec![8, 9]];
        let b = pk_sample(&single, 2, 4, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|x| x.1 == 7).count(), 4);

        let a = pk_sample(&subjects, 3, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = pk_sample(&subjects, 3, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, c);

        assert!(matches!(
            pk_sample(&subjects, 6, 2, &mut rng),
            Err(Error::DatasetTooSmall(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::three_block();
        let a: ModelParams<f32> = init_params(&cfg, 1);
        assert_eq!(a, init_params(&cfg, 1));
        assert_ne!(a, init_params(&cfg, 2));
        for (t, (name, shape)) in a.tensors().iter().zip(ModelParams::<f32>::layout(&cfg)) {
            let fi = if name == "hm" {
                shape[2]
            } else {
                shape[1..].iter().product()
            };
            let b = 1.0 / (fi as f64).sqrt();
            assert!(t.data().iter().all(|v| (v.abs() as f64) < b));
            // U(-b, b) has variance b^2/3
            let n = t.len() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            assert!(mean.abs() < 3.0 * b / (3.0 * n).sqrt(), "{name}");
        }
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::<f64>::new(&cfg, &[vec![1]]);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        opt.step(&mut [&mut p], &[g], 0.1);
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = 0.5 * a * (p - c)^2
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let (a, c) = (3.0, -1.5);
        let mut opt = Optimizer::<f64>::new(&cfg, &[vec![1]]);
        let mut p = Tensor::scalar(4.0);
        for _ in 0..500 {
            let g = Tensor::scalar(a * (p.data()[0] - c));
            opt.step(&mut [&mut p], &[g], 0.05);
        }
        assert!((p.data()[0] - c).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_loop_oracle() {
        let cfg = TrainConfig::default();
        let mut opt = Optimizer::<f64>::new(&cfg, &[vec![3]]);
        let mut p = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let (mut m, mut v, mut q) = ([0.0f64; 3], [0.0f64; 3], [0.5, -1.0, 2.0]);
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.01, 1e-8);
        for t in 1..=20 {
            let g: Vec<f64> = q.iter().map(|x| 2.0 * x + (t as f64).sin()).collect();
            opt.step(
                &mut [&mut p],
                &[Tensor::from_vec(&[3], g.clone()).unwrap()],
                lr,
            );
            for i in 0..3 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                q[i] -= lr * mh / (vh.sqrt() + eps);
                assert!((p.data()[i] - q[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                optimizer: kind,
                ..TrainConfig::default()
            };
            let mut opt = Optimizer::<f32>::new(&cfg, &[vec![4]]);
            let orig = Tensor::from_vec(&[4], vec![0.1f32, -3.0, 7.5, 0.0]).unwrap();
            let mut p = orig.clone();
            for _ in 0..3 {
                opt.step(&mut [&mut p], &[Tensor::full(&[4], 0.7)], 0.0);
            }
            assert_eq!(
                p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                orig.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            p: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            clip_len: 2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

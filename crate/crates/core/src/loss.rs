//! Training objective: Batch-All triplet loss over strip embeddings plus
//! per-strip softmax cross-entropy, summed with unit weights.
//!
//! Both terms are computed in f64 regardless of the tape scalar, and enter
//! the tape as custom scalar nodes carrying their analytic local gradients.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub loss_all: f64,
    pub loss_tri: f64,
    pub loss_cse: f64,
    pub active_fraction: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,loss_all,loss_tri,loss_cse,active_frac";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{}",
            self.loss_all, self.loss_tri, self.loss_cse, self.active_fraction
        )
    }
}

/// Per-strip class projections: `weight` is `(S, n, d)`, `bias` is `(S, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn zeros(strips: usize, classes: usize, dim: usize) -> Self {
        Classifier {
            weight: Tensor::zeros(&[strips, classes, dim]),
            bias: Tensor::zeros(&[strips, classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    /// Logits `(S, N, n)` for embeddings of shape `(S, d)`.
    pub fn logits(&self, embeddings: &[&Tensor<T>]) -> Result<Tensor<f64>> {
        let (s, n, d) = self.dims();
        let mut out = Tensor::zeros(&[s, embeddings.len(), n]);
        for (e, emb) in embeddings.iter().enumerate() {
            if emb.shape() != [s, d] {
                return Err(Error::shape("classifier logits", emb.shape(), &[s, d]));
            }
            for si in 0..s {
                for c in 0..n {
                    let row = &self.weight.data()[(si * n + c) * d..(si * n + c + 1) * d];
                    let z: f64 = row
                        .iter()
                        .zip(&emb.data()[si * d..(si + 1) * d])
                        .map(|(&w, &x)| w.as_f64() * x.as_f64())
                        .sum::<f64>()
                        + self.bias.data()[si * n + c].as_f64();
                    out.data_mut()[(si * embeddings.len() + e) * n + c] = z;
                }
            }
        }
        Ok(out)
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }
}

/// Tape handles of a [`Classifier`].
#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Classifier<T> {
    pub fn register(&self, tape: &mut GradTape<T>, trainable: bool) -> ClassifierVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ClassifierVars {
            weight: put(&self.weight),
            bias: put(&self.bias),
        }
    }
}

fn strip_dims<T: Scalar>(embeddings: &[&Tensor<T>]) -> Result<(usize, usize)> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::DegenerateBatch("empty batch".into()))?;
    let (s, d) = match first.shape() {
        [s, d] => (*s, *d),
        other => return Err(Error::shape("embedding", other, &[0, 0])),
    };
    for e in embeddings {
        if e.shape() != [s, d] {
            return Err(Error::shape("embedding", e.shape(), &[s, d]));
        }
    }
    Ok((s, d))
}

struct TripletOut {
    loss: f64,
    active_fraction: f64,
    grads: Vec<Vec<f64>>,
}

fn triplet_core<T: Scalar>(
    embeddings: &[&Tensor<T>],
    labels: &[usize],
    margin: f64,
) -> Result<TripletOut> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(
            "triplet labels",
            &[embeddings.len()],
            &[labels.len()],
        ));
    }
    let (s, d) = strip_dims(embeddings)?;
    let n = embeddings.len();
    let data: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.data().iter().map(|v| v.as_f64()).collect())
        .collect();

    let mut triplets = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            triplets += labels.iter().filter(|&&l| l != labels[a]).count();
        }
    }
    if triplets == 0 {
        return Err(Error::DegenerateBatch(
            "no (anchor, positive, negative) triplet in batch".into(),
        ));
    }

    let mut grads = vec![vec![0.0; s * d]; n];
    let mut loss = 0.0;
    let mut active_total = 0usize;
    let mut dist = vec![0.0; n * n];
    let mut gs = vec![0.0; n * s * d];
    for si in 0..s {
        let v = |i: usize| &data[i][si * d..(si + 1) * d];
        for i in 0..n {
            for j in 0..i {
                let dd: f64 = v(i)
                    .iter()
                    .zip(v(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                dist[i * n + j] = dd;
                dist[j * n + i] = dd;
            }
        }
        // Unit direction (x_i - x_j) / D, zero when D = 0.
        let unit = |i: usize, j: usize, k: usize| {
            let dd = dist[i * n + j];
            if dd > 0.0 {
                (v(i)[k] - v(j)[k]) / dd
            } else {
                0.0
            }
        };
        let mut sum = 0.0;
        let mut active = 0usize;
        gs.iter_mut().for_each(|g| *g = 0.0);
        for a in 0..n {
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for ng in 0..n {
                    if labels[ng] == labels[a] {
                        continue;
                    }
                    let h = dist[a * n + p] - dist[a * n + ng] + margin;
                    if h <= 0.0 {
                        continue;
                    }
                    sum += h;
                    active += 1;
                    for k in 0..d {
                        let up = unit(a, p, k);
                        let un = unit(a, ng, k);
                        gs[a * s * d + si * d + k] += up - un;
                        gs[p * s * d + si * d + k] -= up;
                        gs[ng * s * d + si * d + k] += un;
                    }
                }
            }
        }
        active_total += active;
        if active > 0 {
            loss += sum / active as f64;
            let scale = 1.0 / (active as f64 * s as f64);
            for (e, g) in grads.iter_mut().enumerate() {
                for k in 0..d {
                    g[si * d + k] += gs[e * s * d + si * d + k] * scale;
                }
            }
        }
    }
    Ok(TripletOut {
        loss: loss / s as f64,
        active_fraction: active_total as f64 / (triplets * s) as f64,
        grads,
    })
}

/// Batch-All triplet loss over `(S, d)` embeddings. Returns
/// `(loss, active_fraction)`.
///
/// Per strip, each triplet contributes `[D(a,p) - D(a,n) + margin]_+` and
/// the strip loss is the mean over strictly positive hinges; strip losses
/// are averaged.
pub fn triplet_ba<T: Scalar>(
    embeddings: &[&Tensor<T>],
    labels: &[usize],
    margin: f64,
) -> Result<(f64, f64)> {
    let out = triplet_core(embeddings, labels, margin)?;
    Ok((out.loss, out.active_fraction))
}

struct CeOut {
    loss: f64,
    /// d loss / d logits, `(S, N, n)`.
    dlogits: Vec<f64>,
}

fn ce_core(logits: &Tensor<f64>, labels: &[usize]) -> Result<CeOut> {
    let (s, n, c) = match logits.shape() {
        [s, n, c] => (*s, *n, *c),
        other => {
            return Err(Error::shape(
                "cross_entropy logits",
                other,
                &[0, labels.len(), 0],
            ))
        }
    };
    if n != labels.len() {
        return Err(Error::shape(
            "cross_entropy labels",
            logits.shape(),
            &[s, labels.len(), c],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label {
            label: bad,
            classes: c,
        });
    }
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; s * n * c];
    let norm = 1.0 / (s * n) as f64;
    for si in 0..s {
        for e in 0..n {
            let off = (si * n + e) * c;
            let z = &logits.data()[off..off + c];
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            loss += lse - z[labels[e]];
            for k in 0..c {
                let p = (z[k] - lse).exp();
                dlogits[off + k] = (p - if k == labels[e] { 1.0 } else { 0.0 }) * norm;
            }
        }
    }
    Ok(CeOut {
        loss: loss * norm,
        dlogits,
    })
}

/// Mean softmax cross-entropy over strips and elements of `(S, N, n)` logits.
pub fn cross_entropy_strips(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    Ok(ce_core(logits, labels)?.loss)
}

/// Triplet term plus classifier cross-entropy, with no tape.
pub fn combined_loss<T: Scalar>(
    embeddings: &[&Tensor<T>],
    labels: &[usize],
    classifier: &Classifier<T>,
    margin: f64,
) -> Result<LossReport> {
    let (loss_tri, active_fraction) = triplet_ba(embeddings, labels, margin)?;
    let loss_cse = cross_entropy_strips(&classifier.logits(embeddings)?, labels)?;
    Ok(LossReport {
        loss_all: loss_tri + loss_cse,
        loss_tri,
        loss_cse,
        active_fraction,
    })
}

fn to_tensor<T: Scalar>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::from_f64_lossy(v[i]))
}

pub fn triplet_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    embeddings: &[Var],
    labels: &[usize],
    margin: f64,
) -> Result<(Var, f64, f64)> {
    let vals: Vec<&Tensor<T>> = embeddings.iter().map(|&v| tape.value(v)).collect();
    let shape = vals.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    let out = triplet_core(&vals, labels, margin)?;
    if tape.is_tracking_branches() {
        // Active hinges and zero-distance pairs are the kinks of this term.
        let sig = out
            .grads
            .iter()
            .flatten()
            .fold(0u64, |h, &g| h.rotate_left(1) ^ (g == 0.0) as u64);
        tape.note_branch(sig);
    }
    let inputs = embeddings
        .iter()
        .zip(&out.grads)
        .map(|(&v, g)| (v, to_tensor(&shape, g)))
        .collect();
    let var = tape.custom_scalar("triplet", T::from_f64_lossy(out.loss), inputs)?;
    Ok((var, out.loss, out.active_fraction))
}

pub fn cross_entropy_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    embeddings: &[Var],
    classifier: ClassifierVars,
    labels: &[usize],
) -> Result<(Var, f64)> {
    let cls = Classifier {
        weight: tape.value(classifier.weight).clone(),
        bias: tape.value(classifier.bias).clone(),
    };
    let (s, c, d) = cls.dims();
    let vals: Vec<&Tensor<T>> = embeddings.iter().map(|&v| tape.value(v)).collect();
    let n = vals.len();
    let out = ce_core(&cls.logits(&vals)?, labels)?;

    let mut gw = vec![0.0; s * c * d];
    let mut gb = vec![0.0; s * c];
    let mut ge = vec![vec![0.0; s * d]; n];
    for si in 0..s {
        for (e, emb) in vals.iter().enumerate() {
            let x = &emb.data()[si * d..(si + 1) * d];
            for k in 0..c {
                let g = out.dlogits[(si * n + e) * c + k];
                gb[si * c + k] += g;
                let wrow = &cls.weight.data()[(si * c + k) * d..(si * c + k + 1) * d];
                for j in 0..d {
                    gw[(si * c + k) * d + j] += g * x[j].as_f64();
                    ge[e][si * d + j] += g * wrow[j].as_f64();
                }
            }
        }
    }
    let mut inputs: Vec<(Var, Tensor<T>)> = embeddings
        .iter()
        .zip(&ge)
        .map(|(&v, g)| (v, to_tensor(&[s, d], g)))
        .collect();
    inputs.push((classifier.weight, to_tensor(&[s, c, d], &gw)));
    inputs.push((classifier.bias, to_tensor(&[s, c], &gb)));
    let var = tape.custom_scalar("cross_entropy", T::from_f64_lossy(out.loss), inputs)?;
    Ok((var, out.loss))
}

/// Records both terms on `tape` and returns the scalar root plus the report.
pub fn combined_loss_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    embeddings: &[Var],
    classifier: ClassifierVars,
    labels: &[usize],
    margin: f64,
) -> Result<(Var, LossReport)> {
    let (tri, loss_tri, active_fraction) = triplet_taped(tape, embeddings, labels, margin)?;
    let (ce, loss_cse) = cross_entropy_taped(tape, embeddings, classifier, labels)?;
    let root = tape.add(tri, ce)?;
    Ok((
        root,
        LossReport {
            loss_all: loss_tri + loss_cse,
            loss_tri,
            loss_cse,
            active_fraction,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(
        p: usize,
        k: usize,
        s: usize,
        d: usize,
        seed: u64,
    ) -> (Vec<Tensor<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embs = (0..p * k)
            .map(|_| Tensor::from_fn(&[s, d], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let labels = (0..p * k).map(|i| i / k).collect();
        (embs, labels)
    }

    fn refs(v: &[Tensor<f64>]) -> Vec<&Tensor<f64>> {
        v.iter().collect()
    }

    /// Triple nested loop over (a, p, n), one strip at a time.
    fn triplet_oracle(embs: &[Tensor<f64>], labels: &[usize], m: f64) -> f64 {
        let [s, d] = [embs[0].shape()[0], embs[0].shape()[1]];
        let dist = |i: usize, j: usize, si: usize| -> f64 {
            (0..d)
                .map(|k| (embs[i].data()[si * d + k] - embs[j].data()[si * d + k]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut total = 0.0;
        for si in 0..s {
            let mut hinges = Vec::new();
            for a in 0..embs.len() {
                for p in 0..embs.len() {
                    for n in 0..embs.len() {
                        if a != p && labels[a] == labels[p] && labels[n] != labels[a] {
                            let h = dist(a, p, si) - dist(a, n, si) + m;
                            if h > 0.0 {
                                hinges.push(h);
                            }
                        }
                    }
                }
            }
            if !hinges.is_empty() {
                total += hinges.iter().sum::<f64>() / hinges.len() as f64;
            }
        }
        total / s as f64
    }

    #[test]
    fn closed_hinge_gives_zero() {
        // class 0 at the origin, class 1 far away
        let a = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![5.0, 0.0]).unwrap();
        let embs = [a.clone(), a, b.clone(), b];
        let (l, f) = triplet_ba(&refs(&embs), &[0, 0, 1, 1], 0.2).unwrap();
        assert_eq!((l, f), (0.0, 0.0));
    }

    /// Two classes of two points each: same-class pairs 1.0 apart, every
    /// cross-class pair 0.9 apart.
    pub(crate) fn hinge_example() -> Vec<Tensor<f64>> {
        let c = 0.31f64.sqrt();
        [
            [-0.5, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            [0.0, c, -0.5],
            [0.0, c, 0.5],
        ]
        .iter()
        .map(|v| Tensor::from_vec(&[1, 3], v.to_vec()).unwrap())
        .collect()
    }

    #[test]
    fn hinge_arithmetic_example() {
        let embs = hinge_example();
        let (l, f) = triplet_ba(&refs(&embs), &[0, 0, 1, 1], 0.2).unwrap();
        assert!((l - 0.3).abs() < 1e-12, "{l}");
        assert_eq!(f, 1.0);
    }

    #[test]
    fn triplet_matches_loop_oracle() {
        let (embs, labels) = random_batch(8, 4, 3, 5, 1);
        let (l, _) = triplet_ba(&refs(&embs), &labels, 0.2).unwrap();
        assert!((l - triplet_oracle(&embs, &labels, 0.2)).abs() < 1e-10);
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let (embs, _) = random_batch(2, 2, 1, 2, 2);
        assert!(matches!(
            triplet_ba(&refs(&embs), &[0, 0, 0, 0], 0.2),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            triplet_ba(&refs(&embs), &[0, 1, 2, 3], 0.2),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let n = 7;
        let logits = Tensor::full(&[2, 3, n], 0.4);
        let l = cross_entropy_strips(&logits, &[0, 3, 6]).unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-10);

        let mut onehot = Tensor::zeros(&[1, 1, 4]);
        onehot.data_mut()[2] = 100.0;
        assert!(cross_entropy_strips(&onehot, &[2]).unwrap() < 1e-8);

        assert!(matches!(
            cross_entropy_strips(&onehot, &[4]),
            Err(Error::Label {
                label: 4,
                classes: 4
            })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::from_fn(&[3, 4, 5], |_| rng.gen_range(-3.0..3.0));
        let labels = [1, 0, 4, 2];
        let mut want = 0.0;
        for s in 0..3 {
            for e in 0..4 {
                let row = &z.data()[(s * 4 + e) * 5..(s * 4 + e + 1) * 5];
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                want += -((row[labels[e]] - mx).exp() / denom).ln();
            }
        }
        want /= 12.0;
        assert!((cross_entropy_strips(&z, &labels).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn combined_is_unweighted_sum() {
        let (embs, labels) = random_batch(3, 2, 2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cls = Classifier {
            weight: Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0)),
            bias: Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0)),
        };
        let r = combined_loss(&refs(&embs), &labels, &cls, 0.2).unwrap();
        assert_eq!(r.loss_all, r.loss_tri + r.loss_cse);
        assert!(r.loss_tri >= 0.0 && r.loss_cse >= 0.0);
        let row = r.csv_row(7);
        assert!(row.starts_with("7,"));
        assert_eq!(
            row.split(',').count(),
            LossReport::CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn taped_losses_pass_gradient_check() {
        let (embs, labels) = random_batch(3, 2, 2, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
        let mut inputs = embs.clone();
        inputs.push(w);
        inputs.push(b);
        let n = embs.len();
        let lab = labels.clone();
        let r = grad_check(
            move |tape, v| {
                let cls = ClassifierVars {
                    weight: v[n],
                    bias: v[n + 1],
                };
                Ok(combined_loss_taped(tape, &v[..n], cls, &lab, 0.5)?.0)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn combined_gradient_is_sum_of_parts() {
        let (embs, labels) = random_batch(3, 2, 2, 4, 8);
        let cls = Classifier {
            weight: Tensor::full(&[2, 3, 4], 0.1),
            bias: Tensor::zeros(&[2, 3]),
        };
        let grads_of = |which: u8| {
            let mut tape = GradTape::<f64>::new();
            let vars: Vec<Var> = embs.iter().map(|e| tape.param(e.clone())).collect();
            let cv = cls.register(&mut tape, true);
            let root = match which {
                0 => triplet_taped(&mut tape, &vars, &labels, 0.5).unwrap().0,
                1 => {
                    cross_entropy_taped(&mut tape, &vars, cv, &labels)
                        .unwrap()
                        .0
                }
                _ => {
                    combined_loss_taped(&mut tape, &vars, cv, &labels, 0.5)
                        .unwrap()
                        .0
                }
            };
            let g = tape.backward(root).unwrap();
            vars.iter()
                .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&[2, 4])))
                .collect::<Vec<_>>()
        };
        let (t, c, all) = (grads_of(0), grads_of(1), grads_of(2));
        for i in 0..t.len() {
            for j in 0..8 {
                let want = t[i].data()[j] + c[i].data()[j];
                assert!((all[i].data()[j] - want).abs() < 1e-14);
            }
        }
    }
}

//! Central finite-difference verification of tape gradients (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{GradTape, OpKind, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-4]`.
    pub eps: f64,
    /// Fraction of scalars probed per input tensor; `1.0` probes all.
    pub fraction: f64,
    /// Lower bound on probes per tensor when sampling.
    pub min_per_tensor: usize,
    pub seed: u64,
    /// Forwarded to [`GradTape::inject_fault`] for the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            fraction: 1.0,
            min_per_tensor: 4,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8)` over probed scalars.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose +/- eps evaluation changed a piecewise branch.
    pub skipped_kinks: usize,
    /// `(input, flat index)` of the worst probe.
    pub worst: Option<(usize, usize)>,
}

fn eval<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::shape("grad_check (scalar output)", v.shape(), &[1]));
    }
    Ok((v.data()[0], tape.branch_signature().unwrap_or(0)))
}

/// Compare tape gradients of the scalar built by `build` against central
/// differences, for every input (or a random sample of each input).
///
/// A probe whose perturbed evaluations land on a different piecewise branch
/// than the base point is not scored; in sampling mode another scalar of
/// the same tensor is drawn in its place.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "grad_check eps {} outside [1e-7, 1e-4]",
            opts.eps
        )));
    }
    let mut tape = GradTape::with_branch_tracking();
    tape.inject_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let base_sig = tape.branch_signature().unwrap_or(0);
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();

    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let order: Vec<usize> = if opts.fraction >= 1.0 {
            (0..n).collect()
        } else {
            sample(&mut rng, n, n).into_vec()
        };
        let want = if opts.fraction >= 1.0 {
            n
        } else {
            ((opts.fraction * n as f64).ceil() as usize)
                .max(opts.min_per_tensor)
                .min(n)
        };
        let mut scored = 0;
        for &i in &order {
            if scored == want {
                break;
            }
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let (fp, sp) = eval(&build, &work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let (fm, sm) = eval(&build, &work)?;
            work[k].data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * opts.eps);
            let g = grads.get(vars[k]).map_or(0.0, |g| g.data()[i]);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, i));
            }
            report.checked += 1;
            scored += 1;
        }
    }
    Ok(report)
}

/// One row of the gradient suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    /// Operation whose backward rule the case exercises.
    pub op: OpKind,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < self.tolerance
    }
}

/// Per-operation relative-error bound.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Bound for the full network plus loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks every differentiable operation in isolation, then the network
/// with the combined loss on a small configuration (sampling 1% of each
/// parameter tensor). `fault` perturbs one backward rule.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    use crate::loss::{combined_loss_taped, ClassifierVars};
    use crate::model::{network_taped, ModelConfig, ModelParams, ParamVars};
    use crate::ops::{ConvGeom, TemporalPadding};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        fault,
        ..Default::default()
    };
    let mut out = Vec::new();
    let mut case = |name: &str,
                    op: OpKind,
                    inputs: Vec<Tensor<f64>>,
                    build: &dyn Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = grad_check(build, &inputs, &opts)?;
        out.push(SuiteEntry {
            name: name.to_string(),
            op,
            tolerance: OP_TOLERANCE,
            report,
        });
        Ok(())
    };

    let x = uniform(&[2, 6, 4, 3], &mut rng);
    let wsum = uniform(&[3, 6, 4, 3], &mut rng);
    for (name, kernel, geom) in [
        (
            "conv3d 3x3x3 zeros",
            [3, 3, 3],
            ConvGeom::new(1, [1, 1, 1], TemporalPadding::Zeros),
        ),
        (
            "conv3d 3x3x3 circular",
            [3, 3, 3],
            ConvGeom::new(1, [1, 1, 1], TemporalPadding::Circular),
        ),
        (
            "conv3d 3x3x3 replicate",
            [3, 3, 3],
            ConvGeom::new(1, [1, 1, 1], TemporalPadding::Replicate),
        ),
        (
            "conv3d 1x3x3",
            [1, 3, 3],
            ConvGeom::new(1, [0, 1, 1], TemporalPadding::Circular),
        ),
    ] {
        let w = uniform(&[3, 2, kernel[0], kernel[1], kernel[2]], &mut rng);
        let ws = wsum.clone();
        case(name, OpKind::Conv3d, vec![x.clone(), w], &move |t, v| {
            let y = t.conv3d(v[0], v[1], geom)?;
            t.weighted_sum(y, ws.clone())
        })?;
    }
    let w = uniform(&[3, 2, 3, 1, 1], &mut rng);
    let ws = uniform(&[3, 2, 4, 3], &mut rng);
    case(
        "conv3d temporal stride 3",
        OpKind::Conv3d,
        vec![x.clone(), w],
        &move |t, v| {
            let y = t.conv3d(
                v[0],
                v[1],
                ConvGeom::new(3, [0, 0, 0], TemporalPadding::Circular),
            )?;
            t.weighted_sum(y, ws.clone())
        },
    )?;

    let ws = uniform(&[2, 6, 4, 3], &mut rng);
    let w2 = ws.clone();
    case(
        "leaky_relu",
        OpKind::LeakyRelu,
        vec![x.clone()],
        &move |t, v| {
            let y = t.leaky_relu(v[0], 0.01);
            t.weighted_sum(y, w2.clone())
        },
    )?;
    let w2 = ws.clone();
    case(
        "add",
        OpKind::Add,
        vec![x.clone(), uniform(&[2, 6, 4, 3], &mut rng)],
        &move |t, v| {
            let y = t.add(v[0], v[1])?;
            t.weighted_sum(y, w2.clone())
        },
    )?;
    let wm = uniform(&[2, 1, 4, 3], &mut rng);
    case(
        "mean_over_time",
        OpKind::MeanOverTime,
        vec![x.clone()],
        &move |t, v| {
            let m = t.mean_over_time(v[0])?;
            t.weighted_sum(m, wm.clone())
        },
    )?;
    let w2 = ws.clone();
    case(
        "subtract_broadcast",
        OpKind::SubtractBroadcast,
        vec![x.clone(), uniform(&[2, 1, 4, 3], &mut rng)],
        &move |t, v| {
            let y = t.subtract_broadcast(v[0], v[1])?;
            t.weighted_sum(y, w2.clone())
        },
    )?;
    let wm = uniform(&[2, 1, 4, 3], &mut rng);
    case(
        "max_over_time",
        OpKind::MaxOverTime,
        vec![x.clone()],
        &move |t, v| {
            let m = t.max_over_time(v[0])?;
            t.weighted_sum(m, wm.clone())
        },
    )?;
    let wp = uniform(&[2, 3, 2, 2], &mut rng);
    case(
        "maxpool_spatial",
        OpKind::MaxPool,
        vec![uniform(&[2, 3, 5, 5], &mut rng)],
        &move |t, v| {
            let y = t.maxpool_spatial(v[0], (2, 2))?;
            t.weighted_sum(y, wp.clone())
        },
    )?;
    let wp = uniform(&[2, 3], &mut rng);
    case(
        "strip_pool",
        OpKind::StripPool,
        vec![uniform(&[3, 1, 4, 3], &mut rng)],
        &move |t, v| {
            let y = t.strip_pool(v[0], 2)?;
            t.weighted_sum(y, wp.clone())
        },
    )?;
    let wp = uniform(&[2, 4], &mut rng);
    case(
        "strip_linear",
        OpKind::StripLinear,
        vec![uniform(&[2, 3], &mut rng), uniform(&[2, 4, 3], &mut rng)],
        &move |t, v| {
            let y = t.strip_linear(v[0], v[1])?;
            t.weighted_sum(y, wp.clone())
        },
    )?;
    let w2 = ws.clone();
    case(
        "weighted_sum",
        OpKind::WeightedSum,
        vec![x.clone()],
        &move |t, v| t.weighted_sum(v[0], w2.clone()),
    )?;

    let labels = vec![0usize, 0, 1, 1, 2, 2];
    let embs: Vec<Tensor<f64>> = (0..6).map(|_| uniform(&[2, 3], &mut rng)).collect();
    let l2 = labels.clone();
    case(
        "triplet",
        OpKind::Custom("triplet"),
        embs.clone(),
        &move |t, v| Ok(crate::loss::triplet_taped(t, v, &l2, 0.2)?.0),
    )?;
    let mut ce_inputs = embs;
    ce_inputs.push(uniform(&[2, 3, 3], &mut rng));
    ce_inputs.push(uniform(&[2, 3], &mut rng));
    let l2 = labels.clone();
    case(
        "cross_entropy",
        OpKind::Custom("cross_entropy"),
        ce_inputs,
        &move |t, v| {
            let cv = ClassifierVars {
                weight: v[6],
                bias: v[7],
            };
            Ok(crate::loss::cross_entropy_taped(t, &v[..6], cv, &l2)?.0)
        },
    )?;

    // Whole network and loss.
    let cfg = ModelConfig {
        stage_channels: vec![2, 3, 4],
        pool_after: vec![0, 1],
        strips: 2,
        embed_dim: 3,
        input_size: (8, 6),
        ..ModelConfig::three_block()
    };
    let params: ModelParams<f64> = crate::train::init_params(&cfg, seed);
    let classes = 2;
    let cls = crate::train::init_classifier::<f64>(&cfg, classes, seed);
    let clips: Vec<Tensor<f64>> = (0..4)
        .map(|_| {
            use rand::Rng;
            Tensor::from_fn(&[1, 6, 8, 6], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
        })
        .collect();
    let batch_labels = vec![0usize, 0, 1, 1];
    let mut inputs: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let np = inputs.len();
    inputs.push(cls.weight.clone());
    inputs.push(cls.bias.clone());
    let e2e_opts = GradCheckOptions {
        fraction: 0.01,
        ..opts.clone()
    };
    let build = |t: &mut GradTape<f64>, v: &[Var]| -> Result<Var> {
        let pv = ParamVars::from_vars(&cfg, &v[..np])?;
        let mut embs = Vec::new();
        for c in &clips {
            let xv = t.constant(c.clone());
            embs.push(network_taped(t, &pv, &cfg, xv)?.embedding);
        }
        let cv = ClassifierVars {
            weight: v[np],
            bias: v[np + 1],
        };
        Ok(combined_loss_taped(t, &embs, cv, &batch_labels, 0.2)?.0)
    };
    out.push(SuiteEntry {
        name: "network + loss".into(),
        op: OpKind::Leaf,
        tolerance: END_TO_END_TOLERANCE,
        report: grad_check(build, &inputs, &e2e_opts)?,
    });
    Ok(out)
}

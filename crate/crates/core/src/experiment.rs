//! In-memory synthetic experiments: generate, normalize, train, evaluate.
//! Shared by the acceptance suite, the benchmarks and the browser demo.

use crate::error::Result;
use crate::eval::{embed_all, evaluate, DistanceMode, RankingReport};
use crate::heatmap::{normalize_with_regions, region_heats, RegionSet};
use crate::loss::LossReport;
use crate::model::ModelConfig;
use crate::preprocess::{NormalizeMode, Partition, SilhouetteSequence};
use crate::synth::{generate_sequences, SynthConfig};
use crate::train::{TrainConfig, TrainState, TrainingData};

/// A normalized test sequence with its ground-truth regions.
#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub sequence: SilhouetteSequence,
    pub regions: RegionSet,
    pub has_bag: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub train: TrainingData,
    pub gallery: Vec<LabeledSequence>,
    pub probe: Vec<LabeledSequence>,
}

impl SyntheticSplit {
    pub fn generate(
        synth: &SynthConfig,
        size: (usize, usize),
        mode: NormalizeMode,
    ) -> Result<Self> {
        let (h, w) = size;
        let mut train = Vec::new();
        let mut gallery = Vec::new();
        let mut probe = Vec::new();
        for s in generate_sequences(synth)? {
            let (frames, regions) =
                normalize_with_regions(&s.sequence.frames, &s.regions.labels, h, w, mode)?;
            let sequence = SilhouetteSequence {
                frames,
                ..s.sequence
            };
            let item = LabeledSequence {
                sequence,
                regions,
                has_bag: s.spec.bag.is_some(),
            };
            match s.entry.partition {
                Partition::Train => train.push(item.sequence),
                Partition::Gallery => gallery.push(item),
                Partition::Probe => probe.push(item),
            }
        }
        Ok(SyntheticSplit {
            train: TrainingData::new(train),
            gallery,
            probe,
        })
    }

    /// Gallery then probe.
    pub fn test_sequences(&self) -> impl Iterator<Item = &LabeledSequence> {
        self.gallery.iter().chain(&self.probe)
    }
}

fn sequences(v: &[LabeledSequence]) -> Vec<SilhouetteSequence> {
    v.iter().map(|l| l.sequence.clone()).collect()
}

/// Embed gallery and probe with the current parameters and rank.
pub fn evaluate_split(
    state: &TrainState,
    split: &SyntheticSplit,
    distance: DistanceMode,
) -> Result<RankingReport> {
    let (g, _) = embed_all(&sequences(&split.gallery), &state.params, &state.model)?;
    let (p, _) = embed_all(&sequences(&split.probe), &state.params, &state.model)?;
    evaluate(&p, &g, distance)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub losses: Vec<LossReport>,
    pub report: RankingReport,
}

/// Train from scratch for `train.iterations` steps, then evaluate.
pub fn train_and_evaluate(
    split: &SyntheticSplit,
    model: &ModelConfig,
    train: &TrainConfig,
    distance: DistanceMode,
) -> Result<RunOutcome> {
    let mut state = TrainState::new(model.clone(), train.clone(), split.train.classes())?;
    let losses = state.run(
        &split.train,
        train.iterations,
        &mut std::io::sink(),
        &mut |_| Ok(()),
    )?;
    let report = evaluate_split(&state, split, distance)?;
    Ok(RunOutcome {
        state,
        losses,
        report,
    })
}

/// Leg-versus-bag heat of every test sequence that carries a bag.
pub fn heat_comparison(
    state: &TrainState,
    split: &SyntheticSplit,
    layer: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for l in split.test_sequences().filter(|l| l.has_bag) {
        let x = l.sequence.to_tensor::<f32>()?;
        if let (Some(legs), Some(bag)) =
            region_heats(&x, &l.regions, &state.params, &state.model, layer)?
        {
            out.push((legs, bag));
        }
    }
    Ok(out)
}

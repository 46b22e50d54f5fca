use std::collections::HashMap;

use gait_dynamics::preprocess::{DatasetManifest, Partition, MANIFEST_FILE};
use gait_dynamics::synth::{generate_dataset, generate_sequences, ConfounderPolicy, SynthConfig};

fn pack(frame: &gait_dynamics::image_io::Gray) -> Vec<u64> {
    let mut bits = vec![0u64; frame.data.len().div_ceil(64)];
    for (i, &v) in frame.data.iter().enumerate() {
        if v != 0 {
            bits[i / 64] |= 1 << (i % 64);
        }
    }
    bits
}

fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// 1-NN over single raw frames: train frames are the references, every
/// other held-out frame is a query.
fn static_frame_nn_accuracy(cfg: &SynthConfig) -> f64 {
    let seqs = generate_sequences(cfg).unwrap();
    let mut refs = Vec::new();
    let mut queries = Vec::new();
    for s in &seqs {
        let id = s.spec.identity;
        for (t, f) in s.sequence.frames.iter().enumerate() {
            match s.entry.partition {
                Partition::Train => refs.push((id, pack(f))),
                _ if t % 2 == 0 => queries.push((id, pack(f))),
                _ => {}
            }
        }
    }
    let correct = queries
        .iter()
        .filter(|(id, q)| {
            let best = refs.iter().min_by_key(|(_, r)| hamming(q, r)).unwrap();
            best.0 == *id
        })
        .count();
    correct as f64 / queries.len() as f64
}

#[test]
fn single_frames_do_not_reveal_identity() {
    for seed in [1, 2] {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let acc = static_frame_nn_accuracy(&cfg);
        let chance = 1.0 / cfg.identities as f64;
        assert!(
            acc <= chance + 0.10,
            "seed {seed}: per-frame 1-NN accuracy {acc:.3}, chance {chance:.3}"
        );
    }
}

fn entropy(counts: &HashMap<impl std::hash::Hash + Eq, usize>, n: usize) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Empirical I(bag; identity) in nats over manifest rows.
fn mutual_information(rows: &[(String, bool)]) -> f64 {
    let n = rows.len();
    let mut a: HashMap<&str, usize> = HashMap::new();
    let mut b: HashMap<bool, usize> = HashMap::new();
    let mut ab: HashMap<(&str, bool), usize> = HashMap::new();
    for (s, bag) in rows {
        *a.entry(s).or_default() += 1;
        *b.entry(*bag).or_default() += 1;
        *ab.entry((s, *bag)).or_default() += 1;
    }
    entropy(&a, n) + entropy(&b, n) - entropy(&ab, n)
}

#[test]
fn dataset_on_disk_has_one_row_per_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        seed: 4,
        ..SynthConfig::default()
    };
    generate_dataset(dir.path(), &cfg).unwrap();
    let m = DatasetManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.entries.len(), 128);
    for e in &m.entries {
        let n = std::fs::read_dir(m.sequence_dir(e)).unwrap().count();
        assert_eq!(n, 40, "{}", e.path);
    }
    assert!(dir.path().join("specs.csv").exists());
}

#[test]
fn adversarial_bags_correlate_in_training_and_flip_in_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        seed: 5,
        confounder: ConfounderPolicy::Adversarial,
        ..SynthConfig::default()
    };
    generate_dataset(dir.path(), &cfg).unwrap();
    let m = DatasetManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    let rows = |p: Partition| -> Vec<(String, bool)> {
        m.partition(p)
            .map(|e| (e.subject.clone(), e.condition.starts_with("BG")))
            .collect()
    };
    let train = rows(Partition::Train);
    assert!(mutual_information(&train) > 0.5);
    let train_bag: HashMap<String, bool> = train.into_iter().collect();
    for (s, bag) in rows(Partition::Probe) {
        assert_eq!(bag, !train_bag[&s], "probe bag of {s} should be flipped");
    }
    // under the random policy the training association is weak
    let rdir = tempfile::tempdir().unwrap();
    generate_dataset(
        rdir.path(),
        &SynthConfig {
            seed: 5,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let rm = DatasetManifest::read(&rdir.path().join(MANIFEST_FILE)).unwrap();
    let rrows: Vec<(String, bool)> = rm
        .partition(Partition::Train)
        .map(|e| (e.subject.clone(), e.condition.starts_with("BG")))
        .collect();
    assert!(mutual_information(&rrows) < mutual_information(&rows(Partition::Train)));
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = SynthConfig {
        identities: 3,
        seqs_per_id: 2,
        frames: 6,
        seed: 11,
        ..SynthConfig::default()
    };
    let a = generate_sequences(&cfg).unwrap();
    let b = generate_sequences(&cfg).unwrap();
    assert!(a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.sequence == y.sequence && x.regions.labels == y.regions.labels));
    let c = generate_sequences(&SynthConfig { seed: 12, ..cfg }).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x.sequence != y.sequence));
}

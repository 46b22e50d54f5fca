//! Brute-force retrieval oracles shared by the metric tests and the
//! acceptance run. They count instead of sorting.
#![allow(dead_code)]

use gait_dynamics::eval::{EmbeddingRecord, EmbeddingSet, ViewProtocol};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STRIPS: usize = 2;
pub const DIM: usize = 3;

pub fn record(subject: usize, view: usize, values: Vec<f32>) -> EmbeddingRecord {
    EmbeddingRecord {
        subject: format!("{subject:03}"),
        condition: if subject % 2 == 0 {
            "nm".into()
        } else {
            "bg".into()
        },
        view: format!("{:03}", view * 30),
        strips: STRIPS,
        dim: DIM,
        values,
    }
}

/// Values on a coarse integer grid so exact distance ties are common, plus
/// explicit duplicates of earlier entries under a different subject.
pub fn random_set(n: usize, subjects: usize, views: usize, rng: &mut ChaCha8Rng) -> EmbeddingSet {
    let mut entries: Vec<EmbeddingRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let subject = rng.gen_range(0..subjects);
        let view = rng.gen_range(0..views);
        let values = if i > 0 && rng.gen_bool(0.2) {
            entries[rng.gen_range(0..i)].values.clone()
        } else {
            (0..STRIPS * DIM)
                .map(|_| rng.gen_range(-2i32..=2) as f32)
                .collect()
        };
        entries.push(record(subject, view, values));
    }
    EmbeddingSet { entries }
}

pub fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 1-based rank of gallery item `j` among the admissible items for probe `p`,
/// ties broken by gallery index. Counting only, no sort.
pub fn oracle_rank(
    p: &EmbeddingRecord,
    g: &EmbeddingSet,
    j: usize,
    admissible: &dyn Fn(usize) -> bool,
) -> usize {
    let dj = dist(&p.values, &g.entries[j].values);
    1 + (0..g.len())
        .filter(|&i| admissible(i) && i != j)
        .filter(|&i| {
            let di = dist(&p.values, &g.entries[i].values);
            di < dj || (di == dj && i < j)
        })
        .count()
}

pub struct Oracle {
    pub rank: [f64; 4],
    pub map: f64,
    pub minp: f64,
}

pub fn oracle(probe: &EmbeddingSet, gallery: &EmbeddingSet) -> Oracle {
    let mut hits = [0usize; 4];
    let (mut ap_sum, mut inp_sum, mut with_pos) = (0.0, 0.0, 0usize);
    for p in &probe.entries {
        let pos: Vec<usize> = (0..gallery.len())
            .filter(|&j| gallery.entries[j].subject == p.subject)
            .collect();
        let ranks: Vec<usize> = pos
            .iter()
            .map(|&j| oracle_rank(p, gallery, j, &|_| true))
            .collect();
        let best = ranks.iter().copied().min();
        for (h, k) in hits.iter_mut().zip([1, 5, 10, 20]) {
            if best.is_some_and(|b| b <= k) {
                *h += 1;
            }
        }
        if ranks.is_empty() {
            continue;
        }
        with_pos += 1;
        let m = ranks.len() as f64;
        let ap: f64 = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&q| q <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / m;
        ap_sum += ap;
        inp_sum += m / *ranks.iter().max().unwrap() as f64;
    }
    let n = probe.len() as f64;
    Oracle {
        rank: hits.map(|h| h as f64 / n),
        map: ap_sum / with_pos as f64,
        minp: inp_sum / with_pos as f64,
    }
}

pub fn view_name(v: usize) -> String {
    format!("{:03}", v * 30)
}

/// Rank-1 of one (probe view, gallery view) cell; `None` when the cell is
/// excluded or has no probes or no gallery entries.
pub fn cross_view_cell(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    pv: usize,
    gv: usize,
    protocol: ViewProtocol,
) -> Option<f64> {
    if protocol == ViewProtocol::ExcludeIdenticalView && pv == gv {
        return None;
    }
    let in_view = |j: usize| gallery.entries[j].view == view_name(gv);
    let probes: Vec<&EmbeddingRecord> = probe
        .entries
        .iter()
        .filter(|p| p.view == view_name(pv))
        .collect();
    if probes.is_empty() || !(0..gallery.len()).any(in_view) {
        return None;
    }
    let hits = probes
        .iter()
        .filter(|p| {
            (0..gallery.len()).any(|j| {
                in_view(j)
                    && gallery.entries[j].subject == p.subject
                    && oracle_rank(p, gallery, j, &in_view) == 1
            })
        })
        .count();
    Some(hits as f64 / probes.len() as f64)
}

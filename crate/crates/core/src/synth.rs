//! Procedural walkers whose identity lives only in leg dynamics.
//!
//! Every identity shares the same head and torso. Legs swing as
//! `A sin(2 pi f (t + t0) + phi)` with identity-specific `(f, phi, A)`; the
//! per-sequence offset `t0` makes the starting pose uninformative. An
//! optional static bag is drawn per sequence, independently of identity
//! unless the adversarial policy is selected.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::{write_pgm, Gray};
use crate::preprocess::{
    DatasetManifest, ManifestEntry, Partition, SilhouetteSequence, MANIFEST_FILE,
};

pub const REGION_BACKGROUND: u8 = 0;
pub const REGION_TORSO: u8 = 1;
pub const REGION_LEGS: u8 = 2;
pub const REGION_BAG: u8 = 3;
pub const REGION_ARM: u8 = 4;

/// Body layout shared by every identity, in pixels of a 64x44 frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyGeometry {
    pub torso_center: (f64, f64),
    /// Vertical and horizontal semi-axes.
    pub torso_axes: (f64, f64),
    pub head_center: (f64, f64),
    pub head_radius: f64,
    pub hip: (f64, f64),
    pub hip_spacing: f64,
    pub leg_length: f64,
    pub leg_width: f64,
    pub shoulder: (f64, f64),
    pub arm_length: f64,
    pub arm_width: f64,
}

impl Default for BodyGeometry {
    fn default() -> Self {
        BodyGeometry {
            torso_center: (24.0, 22.0),
            torso_axes: (9.0, 5.0),
            head_center: (10.5, 22.0),
            head_radius: 4.0,
            hip: (32.0, 22.0),
            hip_spacing: 2.0,
            leg_length: 20.0,
            leg_width: 3.0,
            shoulder: (17.0, 22.0),
            arm_length: 13.0,
            arm_width: 2.0,
        }
    }
}

impl BodyGeometry {
    /// Geometry scaled from the 64x44 reference to `(h, w)`.
    pub fn scaled(h: usize, w: usize) -> Self {
        let (sy, sx) = (h as f64 / 64.0, w as f64 / 44.0);
        let s = sy.min(sx);
        let d = BodyGeometry::default();
        let p = |(r, c): (f64, f64)| (r * sy, c * sx);
        BodyGeometry {
            torso_center: p(d.torso_center),
            torso_axes: (d.torso_axes.0 * sy, d.torso_axes.1 * sx),
            head_center: p(d.head_center),
            head_radius: d.head_radius * s,
            hip: p(d.hip),
            hip_spacing: d.hip_spacing * sx,
            leg_length: d.leg_length * sy,
            leg_width: (d.leg_width * s).max(1.0),
            shoulder: p(d.shoulder),
            arm_length: d.arm_length * sy,
            arm_width: (d.arm_width * s).max(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bag {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkerSpec {
    pub identity: usize,
    /// Cycles per frame.
    pub leg_freq: f64,
    pub leg_phase: f64,
    /// Peak leg angle from vertical, radians.
    pub leg_amplitude: f64,
    pub arm_amplitude: f64,
    pub bag: Option<Bag>,
    pub height: usize,
    pub width: usize,
    /// Per-pixel flip probability.
    pub noise: f64,
    /// Frames added to `t` before evaluating the gait cycle.
    pub time_offset: f64,
    pub geometry: BodyGeometry,
}

impl WalkerSpec {
    pub fn new(identity: usize, leg_freq: f64, leg_phase: f64, leg_amplitude: f64) -> Self {
        WalkerSpec {
            identity,
            leg_freq,
            leg_phase,
            leg_amplitude,
            arm_amplitude: 0.0,
            bag: None,
            height: 64,
            width: 44,
            noise: 0.0,
            time_offset: 0.0,
            geometry: BodyGeometry::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let (h, w) = (self.height as f64, self.width as f64);
        let g = &self.geometry;
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        if !(self.leg_freq.is_finite() && self.leg_freq >= 0.0) {
            return bad(format!("leg frequency {}", self.leg_freq));
        }
        let inside = |r: f64, c: f64| r >= 0.0 && c >= 0.0 && r <= h && c <= w;
        let (tr, tc) = g.torso_center;
        if !inside(tr - g.torso_axes.0, tc - g.torso_axes.1)
            || !inside(tr + g.torso_axes.0, tc + g.torso_axes.1)
        {
            return bad("torso exceeds frame".into());
        }
        let (hr, hc) = g.head_center;
        if !inside(hr - g.head_radius, hc - g.head_radius)
            || !inside(hr + g.head_radius, hc + g.head_radius)
        {
            return bad("head exceeds frame".into());
        }
        let reach = |len: f64, amp: f64, width: f64, (r, c): (f64, f64), spread: f64| {
            let a = amp.abs().min(PI / 2.0);
            inside(
                r + len + width / 2.0,
                c - spread - len * a.sin() - width / 2.0,
            ) && inside(r, c + spread + len * a.sin() + width / 2.0)
        };
        if !reach(
            g.leg_length,
            self.leg_amplitude,
            g.leg_width,
            g.hip,
            g.hip_spacing / 2.0,
        ) {
            return bad(format!(
                "legs with amplitude {} exceed frame",
                self.leg_amplitude
            ));
        }
        if self.arm_amplitude != 0.0
            && !reach(
                g.arm_length,
                self.arm_amplitude,
                g.arm_width,
                g.shoulder,
                0.0,
            )
        {
            return bad("arm exceeds frame".into());
        }
        if let Some(b) = self.bag {
            if b.top + b.height > self.height
                || b.left + b.width > self.width
                || b.height == 0
                || b.width == 0
            {
                return bad(format!("bag {b:?} exceeds frame"));
            }
        }
        Ok(())
    }

    pub fn leg_angle(&self, t: usize) -> f64 {
        self.leg_amplitude
            * (2.0 * PI * self.leg_freq * (t as f64 + self.time_offset) + self.leg_phase).sin()
    }
}

/// Per-frame ground-truth region labels (see the `REGION_*` constants).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub labels: Vec<Gray>,
}

impl RegionMasks {
    pub fn mask(&self, t: usize, region: u8) -> Vec<bool> {
        self.labels[t].data.iter().map(|&v| v == region).collect()
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + u * dx - p.0, a.1 + u * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Render `frames` frames. Returns a binary sequence (values 0/1) and the
/// region labels of the noise-free geometry.
pub fn render_walker<R: Rng>(
    spec: &WalkerSpec,
    frames: usize,
    rng: &mut R,
) -> Result<(SilhouetteSequence, RegionMasks)> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::InvalidSpec("at least one frame is required".into()));
    }
    let g = &spec.geometry;
    let (h, w) = (spec.height, spec.width);
    let mut out = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    for t in 0..frames {
        let theta = spec.leg_angle(t);
        let arm = spec.arm_amplitude
            * (2.0 * PI * spec.leg_freq * (t as f64 + spec.time_offset) + spec.leg_phase + PI)
                .sin();
        let half = g.hip_spacing / 2.0;
        let hips = [(g.hip.0, g.hip.1 - half), (g.hip.0, g.hip.1 + half)];
        let feet = [
            (
                hips[0].0 + g.leg_length * theta.cos(),
                hips[0].1 + g.leg_length * theta.sin(),
            ),
            (
                hips[1].0 + g.leg_length * theta.cos(),
                hips[1].1 - g.leg_length * theta.sin(),
            ),
        ];
        let hand = (
            g.shoulder.0 + g.arm_length * arm.cos(),
            g.shoulder.1 + g.arm_length * arm.sin(),
        );
        let mut label = Gray::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let p = (r as f64 + 0.5, c as f64 + 0.5);
                let in_bag = spec.bag.is_some_and(|b| {
                    (b.top..b.top + b.height).contains(&r)
                        && (b.left..b.left + b.width).contains(&c)
                });
                let in_leg =
                    (0..2).any(|i| dist_to_segment(p, hips[i], feet[i]) <= g.leg_width / 2.0);
                let in_arm = spec.arm_amplitude != 0.0
                    && dist_to_segment(p, g.shoulder, hand) <= g.arm_width / 2.0;
                let (er, ec) = (
                    (p.0 - g.torso_center.0) / g.torso_axes.0,
                    (p.1 - g.torso_center.1) / g.torso_axes.1,
                );
                let (hr, hc) = (p.0 - g.head_center.0, p.1 - g.head_center.1);
                let in_torso =
                    er * er + ec * ec <= 1.0 || hr * hr + hc * hc <= g.head_radius * g.head_radius;
                let v = if in_bag {
                    REGION_BAG
                } else if in_leg {
                    REGION_LEGS
                } else if in_arm {
                    REGION_ARM
                } else if in_torso {
                    REGION_TORSO
                } else {
                    REGION_BACKGROUND
                };
                label.set(r, c, v);
            }
        }
        let mut frame = label.clone().map_values(|v| (v != REGION_BACKGROUND) as u8);
        if spec.noise > 0.0 {
            for v in frame.data.iter_mut() {
                if rng.gen::<f64>() < spec.noise {
                    *v ^= 1;
                }
            }
        }
        out.push(frame);
        labels.push(label);
    }
    let seq = SilhouetteSequence {
        subject: format!("{:03}", spec.identity),
        condition: String::new(),
        view: "090".into(),
        frames: out,
    };
    Ok((seq, RegionMasks { labels }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConfounderPolicy {
    /// No bags anywhere.
    None,
    /// Each sequence carries a bag with probability 1/2, independent of identity.
    #[default]
    Random,
    /// Even identities carry bags in training and gallery, odd identities
    /// carry them in the probe set.
    Adversarial,
}

impl ConfounderPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ConfounderPolicy::None),
            "random" => Some(ConfounderPolicy::Random),
            "adversarial" => Some(ConfounderPolicy::Adversarial),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConfounderPolicy::None => "none",
            ConfounderPolicy::Random => "random",
            ConfounderPolicy::Adversarial => "adversarial",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub seqs_per_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub confounder: ConfounderPolicy,
    pub seed: u64,
    /// Lowest leg frequency, cycles per frame.
    pub freq_min: f64,
    /// Minimum frequency gap between any two identities.
    pub freq_separation: f64,
    pub amplitude_range: (f64, f64),
    pub arm_amplitude: f64,
    pub bag_size: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 16,
            seqs_per_id: 8,
            frames: 40,
            height: 64,
            width: 44,
            noise: 0.005,
            confounder: ConfounderPolicy::Random,
            seed: 0,
            freq_min: 0.03,
            freq_separation: 0.01,
            amplitude_range: (0.35, 0.5),
            arm_amplitude: 0.3,
            bag_size: (8, 6),
        }
    }
}

/// One generated sequence with its manifest row and ground truth.
#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub entry: ManifestEntry,
    pub spec: WalkerSpec,
    pub sequence: SilhouetteSequence,
    pub regions: RegionMasks,
}

/// Partition of the `k`-th of `n` sequences of an identity: the first half
/// trains, the next quarter is gallery, the rest probe.
pub fn partition_of(k: usize, n: usize) -> Partition {
    let train = n / 2;
    let gallery = train + (n - train).div_ceil(2);
    if k < train {
        Partition::Train
    } else if k < gallery {
        Partition::Gallery
    } else {
        Partition::Probe
    }
}

/// Identity-level dynamic parameters: `(freq, phase, amplitude)` per identity.
pub fn identity_params(cfg: &SynthConfig) -> Result<Vec<(f64, f64, f64)>> {
    if cfg.identities < 2 {
        return Err(Error::Config(format!(
            "need at least 2 identities, got {}",
            cfg.identities
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slots = cfg.identities + cfg.identities / 2;
    let picks = sample(&mut rng, slots, cfg.identities).into_vec();
    Ok(picks
        .into_iter()
        .map(|slot| {
            let f = cfg.freq_min + cfg.freq_separation * slot as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(cfg.amplitude_range.0..=cfg.amplitude_range.1);
            (f, phase, amp)
        })
        .collect())
}

fn bag_for<R: Rng>(cfg: &SynthConfig, g: &BodyGeometry, rng: &mut R) -> Bag {
    let (bh, bw) = cfg.bag_size;
    let front = rng.gen_bool(0.5);
    let gap = 1.0;
    let left = if front {
        g.torso_center.1 + g.torso_axes.1 + gap
    } else {
        g.torso_center.1 - g.torso_axes.1 - gap - bw as f64
    };
    let jitter = rng.gen_range(-3i64..=3);
    let top = (g.torso_center.0 as i64 + jitter).clamp(0, (cfg.height - bh) as i64) as usize;
    Bag {
        top,
        left: (left.round().max(0.0) as usize).min(cfg.width - bw),
        height: bh,
        width: bw,
    }
}

/// Render the whole dataset in memory.
pub fn generate_sequences(cfg: &SynthConfig) -> Result<Vec<SynthSequence>> {
    if cfg.seqs_per_id == 0 || cfg.frames == 0 {
        return Err(Error::Config(
            "seqs_per_id and frames must be positive".into(),
        ));
    }
    let params = identity_params(cfg)?;
    let geometry = BodyGeometry::scaled(cfg.height, cfg.width);
    let mut out = Vec::with_capacity(cfg.identities * cfg.seqs_per_id);
    for (id, &(f, phase, amp)) in params.iter().enumerate() {
        for k in 0..cfg.seqs_per_id {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + (id * cfg.seqs_per_id + k) as u64);
            let partition = partition_of(k, cfg.seqs_per_id);
            let has_bag = match cfg.confounder {
                ConfounderPolicy::None => false,
                ConfounderPolicy::Random => rng.gen_bool(0.5),
                ConfounderPolicy::Adversarial => (id % 2 == 0) != (partition == Partition::Probe),
            };
            let bag = bag_for(cfg, &geometry, &mut rng);
            let spec = WalkerSpec {
                identity: id,
                leg_freq: f,
                leg_phase: phase,
                leg_amplitude: amp,
                arm_amplitude: cfg.arm_amplitude,
                bag: has_bag.then_some(bag),
                height: cfg.height,
                width: cfg.width,
                noise: cfg.noise,
                time_offset: rng.gen_range(0.0..1.0 / f),
                geometry: geometry.clone(),
            };
            let (mut sequence, regions) = render_walker(&spec, cfg.frames, &mut rng)?;
            let condition = format!("{}-{:02}", if has_bag { "BG" } else { "NM" }, k + 1);
            sequence.condition = condition.clone();
            let entry = ManifestEntry {
                subject: sequence.subject.clone(),
                condition: condition.clone(),
                view: sequence.view.clone(),
                path: format!("{}/{}/{}", sequence.subject, condition, sequence.view),
                frames: cfg.frames,
                partition,
            };
            out.push(SynthSequence {
                entry,
                spec,
                sequence,
                regions,
            });
        }
    }
    Ok(out)
}

/// Write the dataset under `root`: frames, `regions/` labels, `specs.csv`,
/// `sequences.csv` and the manifest.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let seqs = generate_sequences(cfg)?;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let mut spec_rows = String::from("identity,leg_freq,leg_phase,leg_amplitude,arm_amplitude\n");
    for (id, (f, phase, amp)) in identity_params(cfg)?.into_iter().enumerate() {
        spec_rows.push_str(&format!(
            "{id:03},{f},{phase},{amp},{}\n",
            cfg.arm_amplitude
        ));
    }
    let mut seq_rows =
        String::from("subject,condition,view,partition,bag,bag_top,bag_left,time_offset\n");
    for s in &seqs {
        let dir = root.join(&s.entry.path);
        let rdir = root.join("regions").join(&s.entry.path);
        mkdir(&dir)?;
        mkdir(&rdir)?;
        for (t, (f, l)) in s.sequence.frames.iter().zip(&s.regions.labels).enumerate() {
            write_pgm(
                &dir.join(format!("{t:04}.pgm")),
                &f.clone().map_values(|v| v * 255),
                255,
            )?;
            write_pgm(&rdir.join(format!("{t:04}.pgm")), l, REGION_ARM)?;
        }
        let (bag, top, left) = match s.spec.bag {
            Some(b) => (1, b.top, b.left),
            None => (0, 0, 0),
        };
        seq_rows.push_str(&format!(
            "{},{},{},{},{bag},{top},{left},{}\n",
            s.entry.subject, s.entry.condition, s.entry.view, s.entry.partition, s.spec.time_offset
        ));
    }
    let write = |name: &str, body: &str| {
        let p = root.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("specs.csv", &spec_rows)?;
    write("sequences.csv", &seq_rows)?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries: seqs.into_iter().map(|s| s.entry).collect(),
    };
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn still_walker_is_constant() {
        let spec = WalkerSpec::new(0, 0.05, 0.3, 0.0);
        let (s, _) = render_walker(&spec, 12, &mut rng()).unwrap();
        assert!(s.frames.iter().all(|f| *f == s.frames[0]));
    }

    #[test]
    fn deterministic_per_seed() {
        let mut spec = WalkerSpec::new(0, 0.05, 0.3, 0.4);
        spec.noise = 0.01;
        let a = render_walker(&spec, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = render_walker(&spec, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    fn iou(a: &Gray, b: &Gray) -> f64 {
        let inter = a
            .data
            .iter()
            .zip(&b.data)
            .filter(|(x, y)| **x > 0 && **y > 0)
            .count();
        let union = a
            .data
            .iter()
            .zip(&b.data)
            .filter(|(x, y)| **x > 0 || **y > 0)
            .count();
        inter as f64 / union as f64
    }

    #[test]
    fn frequency_only_difference_diverges_after_start() {
        let a = WalkerSpec::new(0, 0.04, 0.5, 0.5);
        let b = WalkerSpec::new(1, 0.07, 0.5, 0.5);
        let (sa, _) = render_walker(&a, 10, &mut rng()).unwrap();
        let (sb, _) = render_walker(&b, 10, &mut rng()).unwrap();
        assert_eq!(iou(&sa.frames[0], &sb.frames[0]), 1.0);
        assert!((1..10).all(|t| iou(&sa.frames[t], &sb.frames[t]) < 1.0));
    }

    #[test]
    fn geometry_outside_frame_is_rejected() {
        let mut spec = WalkerSpec::new(0, 0.05, 0.0, 1.4);
        assert!(matches!(
            render_walker(&spec, 3, &mut rng()),
            Err(Error::InvalidSpec(_))
        ));
        spec.leg_amplitude = 0.3;
        spec.bag = Some(Bag {
            top: 60,
            left: 0,
            height: 8,
            width: 6,
        });
        assert!(render_walker(&spec, 3, &mut rng()).is_err());
    }

    #[test]
    fn regions_cover_foreground_without_noise() {
        let mut spec = WalkerSpec::new(0, 0.05, 0.0, 0.4);
        spec.arm_amplitude = 0.3;
        spec.bag = Some(Bag {
            top: 24,
            left: 28,
            height: 8,
            width: 6,
        });
        let (s, r) = render_walker(&spec, 5, &mut rng()).unwrap();
        for (f, l) in s.frames.iter().zip(&r.labels) {
            for (&v, &lab) in f.data.iter().zip(&l.data) {
                assert_eq!(v == 1, lab != REGION_BACKGROUND);
            }
        }
        assert_eq!(r.mask(0, REGION_BAG).iter().filter(|&&b| b).count(), 48);
    }

    #[test]
    fn identities_are_separated() {
        let p = identity_params(&SynthConfig::default()).unwrap();
        for i in 0..p.len() {
            for j in 0..i {
                assert!((p[i].0 - p[j].0).abs() >= 0.01 - 1e-12);
            }
        }
        let one = SynthConfig {
            identities: 1,
            ..SynthConfig::default()
        };
        assert!(identity_params(&one).is_err());
    }

    #[test]
    fn partition_split() {
        let parts: Vec<Partition> = (0..8).map(|k| partition_of(k, 8)).collect();
        use Partition::*;
        assert_eq!(
            parts,
            vec![Train, Train, Train, Train, Gallery, Gallery, Probe, Probe]
        );
    }

    #[test]
    fn no_confounder_means_no_bag_pixels() {
        let cfg = SynthConfig {
            identities: 3,
            seqs_per_id: 2,
            frames: 4,
            confounder: ConfounderPolicy::None,
            ..SynthConfig::default()
        };
        for s in generate_sequences(&cfg).unwrap() {
            assert!(s
                .regions
                .labels
                .iter()
                .all(|l| !l.data.contains(&REGION_BAG)));
        }
    }
}

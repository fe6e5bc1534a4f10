//! Synthetic corpus generation, non-IID Dirichlet partitioning, and the
//! c-validation upload.
//!
//! Each sample plants an invertible signal: features are a fixed seeded
//! linear map of the ground-truth (start, end) pair plus Gaussian noise, so a
//! small model can learn the inverse mapping in seconds. The planted map is
//! corpus metadata; its digest goes into the serialized header so experiment
//! artifacts are traceable to their generator.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::temporal::{
    assign_temporal_class, is_feasible_class, ClassCounts, TemporalDistribution, NUM_CLASSES,
};
use crate::textfmt::{g9, Fnv1a};

/// Standard deviation of the feature noise around the planted linear map.
pub const NOISE_STD: f64 = 0.05;

/// Number of synthetic scene labels (the secondary partition label).
pub const NUM_SCENES: usize = 16;

/// Below this, the Dirichlet concentration is treated as the degenerate
/// one-class-per-client limit.
pub const ALPHA_DEGENERATE: f64 = 1e-9;

/// One synthetic "video + query" item with its ground-truth moment.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSample {
    pub sample_id: u64,
    pub video_features: Vec<f64>,
    pub query_features: Vec<f64>,
    pub gt_start: f64,
    pub gt_end: f64,
    pub temporal_class: usize,
    /// Secondary categorical label, independent of the moment position.
    pub scene_class: usize,
}

impl MomentSample {
    pub fn interval(&self) -> (f64, f64) {
        (self.gt_start, self.gt_end)
    }

    fn check(&self) -> Result<()> {
        let class = assign_temporal_class(self.gt_start, self.gt_end)?;
        if class != self.temporal_class {
            return Err(Error::InvalidConfig(format!(
                "sample {}: temporal_class {} does not match timepoints (expected {class})",
                self.sample_id, self.temporal_class
            )));
        }
        Ok(())
    }
}

/// A client's local shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<MomentSample>,
}

impl ClientDataset {
    pub fn n_k(&self) -> usize {
        self.samples.len()
    }

    /// Ground-truth temporal class counts of this shard.
    pub fn class_counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for s in &self.samples {
            counts.increment(s.temporal_class);
        }
        counts
    }
}

/// Which sample label drives the non-IID partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    TemporalClass,
    SyntheticScene,
}

#[derive(Debug, Clone)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::InvalidConfig("num_clients must be >= 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be a nonnegative real, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// The fixed linear map that features are generated from: for coefficient row
/// `[a, b, c]`, the clean feature value is `a * start + b * end + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedMap {
    pub video_coeffs: Vec<[f64; 3]>,
    pub query_coeffs: Vec<[f64; 3]>,
}

impl PlantedMap {
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for row in self.video_coeffs.iter().chain(self.query_coeffs.iter()) {
            for &c in row {
                h.write_f64(c);
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMeta {
    pub d_v: usize,
    pub d_q: usize,
    pub seed: u64,
    pub map: PlantedMap,
}

/// The generated corpus plus the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub samples: Vec<MomentSample>,
}

impl Corpus {
    /// FNV digest of the canonical serialized form.
    pub fn digest(&self) -> u64 {
        let mut buf = Vec::new();
        write_corpus(self, &mut buf).expect("writing to a Vec cannot fail");
        let mut h = Fnv1a::new();
        h.write(&buf);
        h.finish()
    }
}

/// Draws a class index from the mix via inverse-CDF walk.
fn draw_class(mix: &TemporalDistribution, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (class, &m) in mix.mass().iter().enumerate() {
        acc += m;
        if u < acc {
            return class;
        }
    }
    // Rounding in the cumulative sum; fall back to the last positive class.
    mix.mass()
        .iter()
        .rposition(|&m| m > 0.0)
        .unwrap_or(NUM_CLASSES - 1)
}

/// Draws (start, end) uniformly within the class's quarter-cell.
fn draw_timepoints(class: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let sq = class / 4;
    let eq = class % 4;
    let cell = |q: usize, rng: &mut ChaCha8Rng| rng.gen_range(q as f64 / 4.0..(q + 1) as f64 / 4.0);
    if sq == eq {
        let a = cell(sq, rng);
        let b = cell(sq, rng);
        (a.min(b), a.max(b))
    } else {
        (cell(sq, rng), cell(eq, rng))
    }
}

/// Generates `n_total` samples with temporal classes drawn from `class_mix`.
///
/// Positive mass on an infeasible class (one whose cell violates
/// `start <= end`) is rejected: no sample could carry that label.
pub fn generate_corpus(
    n_total: usize,
    d_v: usize,
    d_q: usize,
    seed: u64,
    class_mix: &TemporalDistribution,
) -> Result<Corpus> {
    if n_total < 1 {
        return Err(Error::InvalidConfig("n_total must be >= 1".into()));
    }
    if d_v < 1 || d_q < 1 {
        return Err(Error::InvalidConfig(
            "feature dimensions must be >= 1".into(),
        ));
    }
    for (class, &mass) in class_mix.mass().iter().enumerate() {
        if mass > 0.0 && !is_feasible_class(class) {
            return Err(Error::InfeasibleClassMass { class, mass });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeff_row = |rng: &mut ChaCha8Rng| {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    };
    let map = PlantedMap {
        video_coeffs: (0..d_v).map(|_| coeff_row(&mut rng)).collect(),
        query_coeffs: (0..d_q).map(|_| coeff_row(&mut rng)).collect(),
    };

    let noise = Normal::new(0.0, NOISE_STD).expect("valid noise std");
    let features = |coeffs: &[[f64; 3]], s: f64, e: f64, rng: &mut ChaCha8Rng| {
        coeffs
            .iter()
            .map(|&[a, b, c]| a * s + b * e + c + noise.sample(rng))
            .collect::<Vec<f64>>()
    };

    let mut samples = Vec::with_capacity(n_total);
    for sample_id in 0..n_total as u64 {
        let class = draw_class(class_mix, &mut rng);
        let (gt_start, gt_end) = draw_timepoints(class, &mut rng);
        let scene_class = rng.gen_range(0..NUM_SCENES);
        let video_features = features(&map.video_coeffs, gt_start, gt_end, &mut rng);
        let query_features = features(&map.query_coeffs, gt_start, gt_end, &mut rng);
        debug_assert_eq!(assign_temporal_class(gt_start, gt_end)?, class);
        samples.push(MomentSample {
            sample_id,
            video_features,
            query_features,
            gt_start,
            gt_end,
            temporal_class: class,
            scene_class,
        });
    }

    Ok(Corpus {
        meta: CorpusMeta {
            d_v,
            d_q,
            seed,
            map,
        },
        samples,
    })
}

fn label_of(sample: &MomentSample, mode: LabelMode) -> usize {
    match mode {
        LabelMode::TemporalClass => sample.temporal_class,
        LabelMode::SyntheticScene => sample.scene_class,
    }
}

/// Partitions samples across clients non-IID.
///
/// For `alpha` above [`ALPHA_DEGENERATE`]: per label class, client
/// proportions are drawn from `Dirichlet(alpha, ..., alpha)` and the class's
/// shuffled sample list is split at the cumulative-proportion cut points.
/// At or below it (the `alpha -> 0` limit): each label class goes wholly to
/// one client, round-robin in label order. Clients left empty are repaired by
/// moving one sample from the largest client.
pub fn partition_dirichlet(
    samples: &[MomentSample],
    cfg: &PartitionConfig,
) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput {
            context: "partition_dirichlet",
        });
    }
    let num_clients = cfg.num_clients;
    if num_clients > samples.len() {
        return Err(Error::TooManyClients {
            num_clients,
            n_samples: samples.len(),
        });
    }

    let num_labels = match cfg.label_mode {
        LabelMode::TemporalClass => NUM_CLASSES,
        LabelMode::SyntheticScene => NUM_SCENES,
    };
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for (idx, sample) in samples.iter().enumerate() {
        by_label[label_of(sample, cfg.label_mode)].push(idx);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    if cfg.alpha <= ALPHA_DEGENERATE {
        for (label, members) in by_label.iter().enumerate() {
            assignment[label % num_clients].extend_from_slice(members);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gamma = Gamma::new(cfg.alpha, 1.0)
            .map_err(|e| Error::InvalidConfig(format!("alpha {}: {e}", cfg.alpha)))?;
        for members in by_label.iter().filter(|m| !m.is_empty()) {
            let mut draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if total <= 0.0 || !total.is_finite() {
                // Tiny alpha underflows every gamma draw; the limit is a
                // one-hot assignment to a uniformly drawn client.
                draws.iter_mut().for_each(|d| *d = 0.0);
                draws[rng.gen_range(0..num_clients)] = 1.0;
            } else {
                draws.iter_mut().for_each(|d| *d /= total);
            }
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let n_c = shuffled.len();
            let mut cum = 0.0;
            let mut start = 0usize;
            for (client, &share) in draws.iter().enumerate() {
                cum += share;
                let end = if client + 1 == num_clients {
                    n_c
                } else {
                    ((cum * n_c as f64).floor() as usize).min(n_c)
                };
                assignment[client].extend_from_slice(&shuffled[start..end.max(start)]);
                start = end.max(start);
            }
        }
    }

    // Repair empty clients from the largest one; total >= num_clients
    // guarantees progress.
    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by_key(|&c| assignment[c].len())
            .expect("at least one client");
        let moved = assignment[largest].pop().expect("largest is nonempty");
        assignment[empty].push(moved);
    }

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idxs)| {
            idxs.sort_unstable();
            ClientDataset {
                client_id,
                samples: idxs.into_iter().map(|i| samples[i].clone()).collect(),
            }
        })
        .collect())
}

/// `ceil(fraction * n)` in exact arithmetic, tolerant of binary rounding,
/// clamped into `[1, n]`.
fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Uniformly samples `ceil(fraction * n_k)` items from every client and
/// returns the union as copies, ordered by (client_id, sample_id). Clients
/// retain their originals.
pub fn build_c_validation(
    clients: &[ClientDataset],
    fraction: f64,
    seed: u64,
) -> Result<Vec<MomentSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "c-validation fraction {fraction} must lie in (0, 1]"
        )));
    }
    let mut order: Vec<&ClientDataset> = clients.iter().collect();
    order.sort_by_key(|c| c.client_id);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uploaded = Vec::new();
    for client in order {
        let take = ceil_fraction(fraction, client.n_k());
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, client.n_k(), take).into_vec();
        chosen.sort_unstable();
        let mut picks: Vec<MomentSample> = chosen
            .into_iter()
            .map(|i| client.samples[i].clone())
            .collect();
        picks.sort_by_key(|s| s.sample_id);
        uploaded.extend(picks);
    }
    Ok(uploaded)
}

fn sample_fields(sample: &MomentSample) -> String {
    let mut fields = vec![
        sample.sample_id.to_string(),
        sample.temporal_class.to_string(),
        sample.scene_class.to_string(),
        g9(sample.gt_start),
        g9(sample.gt_end),
    ];
    fields.extend(sample.video_features.iter().map(|&v| g9(v)));
    fields.extend(sample.query_features.iter().map(|&v| g9(v)));
    fields.join(",")
}

/// Writes the corpus in the line-oriented text form: one header line with
/// the generation parameters, then one comma-separated sample per line.
pub fn write_corpus(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "# d_v={} d_q={} seed={} map_digest={:016x}",
        corpus.meta.d_v,
        corpus.meta.d_q,
        corpus.meta.seed,
        corpus.meta.map.digest()
    )?;
    for sample in &corpus.samples {
        writeln!(w, "{}", sample_fields(sample))?;
    }
    Ok(())
}

/// Writes a partition: as the corpus form, with each sample line prefixed by
/// its owning client id.
pub fn write_partition(
    clients: &[ClientDataset],
    meta: &CorpusMeta,
    mut w: impl Write,
) -> Result<()> {
    writeln!(
        w,
        "# num_clients={} d_v={} d_q={} seed={} map_digest={:016x}",
        clients.len(),
        meta.d_v,
        meta.d_q,
        meta.seed,
        meta.map.digest()
    )?;
    for client in clients {
        for sample in &client.samples {
            writeln!(w, "{},{}", client.client_id, sample_fields(sample))?;
        }
    }
    Ok(())
}

/// Header values recovered when reading a serialized corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusHeader {
    pub d_v: usize,
    pub d_q: usize,
    pub seed: u64,
    pub map_digest: u64,
}

fn parse_header(line: &str, line_no: usize) -> Result<CorpusHeader> {
    let mut d_v = None;
    let mut d_q = None;
    let mut seed = None;
    let mut map_digest = None;
    for token in line.trim_start_matches('#').split_whitespace() {
        let Some((key, value)) = token.split_once('=') else {
            continue;
        };
        let bad = |e: String| Error::MalformedInput {
            line: line_no,
            message: format!("header field {key}: {e}"),
        };
        match key {
            "d_v" => d_v = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "d_q" => d_q = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "seed" => seed = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "map_digest" => {
                map_digest = Some(u64::from_str_radix(value, 16).map_err(|e| bad(format!("{e}")))?)
            }
            _ => {}
        }
    }
    match (d_v, d_q, seed, map_digest) {
        (Some(d_v), Some(d_q), Some(seed), Some(map_digest)) => Ok(CorpusHeader {
            d_v,
            d_q,
            seed,
            map_digest,
        }),
        _ => Err(Error::MalformedInput {
            line: line_no,
            message: "header must record d_v, d_q, seed, map_digest".into(),
        }),
    }
}

fn parse_sample(fields: &[&str], d_v: usize, d_q: usize, line_no: usize) -> Result<MomentSample> {
    let expected = 5 + d_v + d_q;
    if fields.len() != expected {
        return Err(Error::MalformedInput {
            line: line_no,
            message: format!("expected {expected} fields, found {}", fields.len()),
        });
    }
    let bad = |what: &str, e: String| Error::MalformedInput {
        line: line_no,
        message: format!("{what}: {e}"),
    };
    let parse_f64 =
        |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|e| bad(what, format!("{e}"))) };
    let sample = MomentSample {
        sample_id: fields[0]
            .parse()
            .map_err(|e| bad("sample_id", format!("{e}")))?,
        temporal_class: fields[1]
            .parse()
            .map_err(|e| bad("temporal_class", format!("{e}")))?,
        scene_class: fields[2]
            .parse()
            .map_err(|e| bad("scene_class", format!("{e}")))?,
        gt_start: parse_f64(fields[3], "gt_start")?,
        gt_end: parse_f64(fields[4], "gt_end")?,
        video_features: fields[5..5 + d_v]
            .iter()
            .map(|s| parse_f64(s, "video feature"))
            .collect::<Result<_>>()?,
        query_features: fields[5 + d_v..]
            .iter()
            .map(|s| parse_f64(s, "query feature"))
            .collect::<Result<_>>()?,
    };
    sample.check().map_err(|e| Error::MalformedInput {
        line: line_no,
        message: e.to_string(),
    })?;
    Ok(sample)
}

/// Reads the corpus text form back; features round-trip at 9 significant
/// digits, so values are near-equal, not bit-equal, to the originals.
pub fn read_corpus(r: impl BufRead) -> Result<(CorpusHeader, Vec<MomentSample>)> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::EmptyInput {
        context: "read_corpus",
    })?;
    let header = parse_header(&first?, 1)?;
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        samples.push(parse_sample(&fields, header.d_v, header.d_q, idx + 1)?);
    }
    Ok((header, samples))
}

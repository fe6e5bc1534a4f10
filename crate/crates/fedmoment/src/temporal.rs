//! Temporal class grid, per-client and population class distributions, and
//! the distribution-gap loss.
//!
//! A moment's normalized start and end timepoints each fall into one of four
//! quarters of the video; the pair of quarters indexes one of 16 temporal
//! classes (row-major: `class = 4 * start_quarter + end_quarter`). Since
//! `start <= end`, only the 10 classes with `end_quarter >= start_quarter`
//! are reachable; the rest stay as representable but empty bins.

use crate::error::{Error, Result};
use crate::textfmt::g9;

/// Number of temporal classes (4 start quarters x 4 end quarters).
pub const NUM_CLASSES: usize = 16;

/// Tolerance for "sums to 1" checks on distributions.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Probability mass over the 16 temporal classes.
///
/// Entries are nonnegative and sum to 1 within [`MASS_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalDistribution {
    mass: [f64; NUM_CLASSES],
}

impl TemporalDistribution {
    pub fn new(mass: [f64; NUM_CLASSES]) -> Result<Self> {
        for (index, &value) in mass.iter().enumerate() {
            if value < 0.0 || !value.is_finite() {
                return Err(Error::NegativeMass { index, value });
            }
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::MassNotNormalized {
                sum,
                tolerance: MASS_TOLERANCE,
            });
        }
        Ok(TemporalDistribution { mass })
    }

    /// Uniform mass over all 16 classes.
    pub fn uniform() -> Self {
        TemporalDistribution {
            mass: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }

    /// Uniform mass over the 10 reachable classes, zero elsewhere.
    pub fn uniform_feasible() -> Self {
        let mut mass = [0.0; NUM_CLASSES];
        let share = 1.0 / feasible_classes().len() as f64;
        for class in feasible_classes() {
            mass[class] = share;
        }
        TemporalDistribution { mass }
    }

    pub fn mass(&self) -> &[f64; NUM_CLASSES] {
        &self.mass
    }

    pub fn get(&self, class: usize) -> f64 {
        self.mass[class]
    }

    /// True when every entry is strictly positive (required by the gap loss).
    pub fn is_strictly_positive(&self) -> bool {
        self.mass.iter().all(|&m| m > 0.0)
    }

    /// 16 comma-separated reals, 9 significant digits.
    pub fn to_csv_line(&self) -> String {
        self.mass
            .iter()
            .map(|&m| g9(m))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let mut mass = [0.0; NUM_CLASSES];
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != NUM_CLASSES {
            return Err(Error::MalformedInput {
                line: 1,
                message: format!("expected {NUM_CLASSES} fields, found {}", fields.len()),
            });
        }
        for (i, field) in fields.iter().enumerate() {
            mass[i] = field.trim().parse().map_err(|e| Error::MalformedInput {
                line: 1,
                message: format!("field {i}: {e}"),
            })?;
        }
        TemporalDistribution::new(mass)
    }
}

/// Raw per-class sample counts, the pre-smoothing form of a distribution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassCounts {
    counts: [u64; NUM_CLASSES],
}

impl ClassCounts {
    pub fn new(counts: [u64; NUM_CLASSES]) -> Self {
        ClassCounts { counts }
    }

    pub fn increment(&mut self, class: usize) {
        self.counts[class] += 1;
    }

    pub fn counts(&self) -> &[u64; NUM_CLASSES] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// The start/end quarter of a timepoint; exact 1.0 clamps into quarter 3 so
/// the map stays total on [0, 1].
fn quarter(t: f64) -> usize {
    ((4.0 * t).floor() as usize).min(3)
}

/// Classes reachable under the `start <= end` precondition, ascending.
pub fn feasible_classes() -> Vec<usize> {
    (0..4)
        .flat_map(|sq| (sq..4).map(move |eq| 4 * sq + eq))
        .collect()
}

/// True when the class's cell satisfies `end_quarter >= start_quarter`.
pub fn is_feasible_class(class: usize) -> bool {
    class % 4 >= class / 4
}

/// Maps normalized (start, end) timepoints to a temporal class.
pub fn assign_temporal_class(start: f64, end: f64) -> Result<usize> {
    for t in [start, end] {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::TimepointOutOfRange { value: t });
        }
    }
    if start > end {
        return Err(Error::InvertedInterval { start, end });
    }
    Ok(4 * quarter(start) + quarter(end))
}

/// Normalizes counts into a distribution; `smooth` adds one to every entry
/// first and renormalizes, guaranteeing strict positivity.
pub fn counts_to_distribution(counts: &ClassCounts, smooth: bool) -> Result<TemporalDistribution> {
    let add = if smooth { 1 } else { 0 };
    let total = counts.total() + add * NUM_CLASSES as u64;
    if total == 0 {
        return Err(Error::ZeroTotalCount);
    }
    let mut mass = [0.0; NUM_CLASSES];
    for (m, &c) in mass.iter_mut().zip(counts.counts().iter()) {
        *m = (c + add) as f64 / total as f64;
    }
    Ok(TemporalDistribution { mass })
}

/// Population distribution: the size-weighted average of client distributions.
pub fn population_distribution(
    clients: &[(usize, TemporalDistribution)],
) -> Result<TemporalDistribution> {
    if clients.is_empty() {
        return Err(Error::EmptyInput {
            context: "population_distribution",
        });
    }
    let n: usize = clients.iter().map(|(n_k, _)| n_k).sum();
    if n == 0 {
        return Err(Error::EmptyInput {
            context: "population_distribution (all clients empty)",
        });
    }
    let mut mass = [0.0; NUM_CLASSES];
    for (n_k, q_k) in clients {
        let weight = *n_k as f64 / n as f64;
        for (acc, &q) in mass.iter_mut().zip(q_k.mass().iter()) {
            *acc += weight * q;
        }
    }
    // Weighted average of unit-mass vectors; rounding keeps the sum well
    // inside MASS_TOLERANCE.
    Ok(TemporalDistribution { mass })
}

/// KL divergence sum over raw slices: `sum_x q(x) * ln(q(x) / p(x))`.
///
/// Assumes strictly positive entries and equal lengths; inputs need not be
/// normalized, which is what lets finite-difference checks perturb single
/// coordinates.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(q.len(), p.len());
    q.iter()
        .zip(p.iter())
        .map(|(&qx, &px)| qx * (qx / px).ln())
        .sum()
}

/// Entrywise partial derivatives of [`kl_divergence`] with respect to `q`.
pub fn kl_gradient(q: &[f64], p: &[f64]) -> Vec<f64> {
    debug_assert_eq!(q.len(), p.len());
    q.iter()
        .zip(p.iter())
        .map(|(&qx, &px)| (qx / px).ln() + 1.0)
        .collect()
}

fn require_strictly_positive(dist: &TemporalDistribution) -> Result<()> {
    for (index, &value) in dist.mass().iter().enumerate() {
        if value <= 0.0 {
            return Err(Error::NonPositiveMass { index, value });
        }
    }
    Ok(())
}

/// Temporal-distribution-gap loss: `KL(q_pred || p)` in nats, nonnegative.
///
/// Both inputs must be strictly positive in every class (smoothed counts and
/// softmax heads always are).
pub fn temporal_gap_loss(q_pred: &TemporalDistribution, p: &TemporalDistribution) -> Result<f64> {
    require_strictly_positive(q_pred)?;
    require_strictly_positive(p)?;
    Ok(kl_divergence(q_pred.mass(), p.mass()))
}

/// Gradient of [`temporal_gap_loss`] with respect to each `q_pred` entry:
/// `ln(q_pred(x) / p(x)) + 1`.
pub fn gap_loss_gradient(
    q_pred: &TemporalDistribution,
    p: &TemporalDistribution,
) -> Result<[f64; NUM_CLASSES]> {
    require_strictly_positive(q_pred)?;
    require_strictly_positive(p)?;
    let mut grad = [0.0; NUM_CLASSES];
    for (g, (&qx, &px)) in grad
        .iter_mut()
        .zip(q_pred.mass().iter().zip(p.mass().iter()))
    {
        *g = (qx / px).ln() + 1.0;
    }
    Ok(grad)
}

//! Server-side orchestration: grouping, grouped sequential scheduling,
//! validation-weighted aggregation, the simulated cost model, and the
//! federated-averaging degenerate mode.
//!
//! Within a round, groups are independent units of work that may run
//! concurrently; clients inside a group run serially, each initializing from
//! its predecessor's output (chain heads start from the global model). Every
//! client's post-training snapshot is scored on the c-validation set at its
//! turn, and all snapshots are merged in ascending client-id order, so the
//! result is byte-identical whether groups execute serially or in parallel.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{build_c_validation, ClientDataset, MomentSample};
use crate::error::{Error, Result};
use crate::localizer::{client_update, forward, ParameterVector, TrainConfig};
use crate::metrics::{attention_weights, raw_c_score, recall_at_1, ClientScore, ScoringConfig};
use crate::seeds;
use crate::temporal::{counts_to_distribution, population_distribution, TemporalDistribution};

/// Recall thresholds recorded in every round report.
pub const REPORT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

const CVAL_STREAM: u64 = 0x6356_414c;
const GROUP_STREAM: u64 = 0x6752_5055;
const PARTICIPATION_STREAM: u64 = 0x7041_5254;

/// How per-client snapshots are weighted at aggregation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    /// Softmax attention over the c-validation raw scores.
    CValidationSoftmax,
    /// Plain averaging; with `num_groups == num_clients` this is classical
    /// federated averaging.
    Uniform,
}

/// Per-run protocol configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub num_clients: usize,
    pub num_groups: usize,
    pub rounds: usize,
    /// Fraction of clients selected each round; 1.0 means every client.
    pub participation_fraction: f64,
    pub regroup_each_round: bool,
    /// Simulated time charged per client update.
    pub unit_client_cost: f64,
    pub aggregation_mode: AggregationMode,
    pub seed: u64,
    /// Per-client fraction uploaded into the c-validation set.
    pub cval_fraction: f64,
    pub scoring: ScoringConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_clients: 16,
            num_groups: 4,
            rounds: 40,
            participation_fraction: 1.0,
            regroup_each_round: false,
            unit_client_cost: 1.0,
            aggregation_mode: AggregationMode::CValidationSoftmax,
            seed: 7,
            cval_fraction: 0.01,
            scoring: ScoringConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::InvalidConfig("num_clients must be >= 1".into()));
        }
        if self.num_groups < 1 || self.num_groups > self.num_clients {
            return Err(Error::InvalidConfig(format!(
                "num_groups {} must lie in [1, {}]",
                self.num_groups, self.num_clients
            )));
        }
        if self.rounds < 1 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "participation_fraction {} must lie in (0, 1]",
                self.participation_fraction
            )));
        }
        if !self.unit_client_cost.is_finite() || self.unit_client_cost <= 0.0 {
            return Err(Error::InvalidConfig(
                "unit_client_cost must be positive".into(),
            ));
        }
        if !(self.cval_fraction > 0.0 && self.cval_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cval_fraction {} must lie in (0, 1]",
                self.cval_fraction
            )));
        }
        self.scoring.validate()
    }
}

/// An ordered partition of the participating client ids; within-group order
/// is the execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    pub groups: Vec<Vec<usize>>,
}

impl GroupPlan {
    pub fn client_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &id in self.groups.iter().flatten() {
            if !seen.insert(id) {
                return Err(Error::InvalidConfig(format!(
                    "group plan assigns client {id} twice"
                )));
            }
        }
        if seen.is_empty() {
            return Err(Error::EmptyInput {
                context: "group plan",
            });
        }
        Ok(())
    }
}

/// Splits the given client ids into `num_groups` near-equal groups after a
/// seeded uniform shuffle; group sizes differ by at most one.
pub fn plan_from_ids(ids: &[usize], num_groups: usize, seed: u64) -> Result<GroupPlan> {
    if num_groups < 1 || num_groups > ids.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} clients into {num_groups} groups",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = shuffled.len() / num_groups;
    let extra = shuffled.len() % num_groups;
    let mut groups = Vec::with_capacity(num_groups);
    let mut cursor = 0;
    for g in 0..num_groups {
        let size = base + usize::from(g < extra);
        groups.push(shuffled[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(GroupPlan { groups })
}

/// Groups clients `0..num_clients`.
pub fn make_groups(num_clients: usize, num_groups: usize, seed: u64) -> Result<GroupPlan> {
    let ids: Vec<usize> = (0..num_clients).collect();
    plan_from_ids(&ids, num_groups, seed)
}

/// Per-round simulated time: groups run concurrently and clients within a
/// group serially, so a round costs `u` times the largest group size.
/// Aggregation and communication are free in this model.
pub fn simulate_time(plan: &GroupPlan, unit_client_cost: f64) -> f64 {
    unit_client_cost * plan.max_group_size() as f64
}

/// One client's retained state from its turn in a round.
#[derive(Debug, Clone)]
pub struct ClientSnapshot {
    pub client_id: usize,
    /// Fingerprint of the parameters this client initialized from; equals the
    /// predecessor's output fingerprint (or the global model's, for chain
    /// heads).
    pub init_fingerprint: u64,
    pub params: ParameterVector,
    pub raw_score: f64,
}

/// Per-round record: client scores, global evaluation metrics, and cost.
#[derive(Debug, Clone)]
pub struct RoundReport {
    /// 1-based round number.
    pub round_index: usize,
    /// Ascending by client id; attentions sum to 1.
    pub client_scores: Vec<ClientScore>,
    /// `(m, recall)` pairs at the thresholds in [`REPORT_THRESHOLDS`].
    pub recall: [(f64, f64); 3],
    /// Simulated units. `run_round` reports this round's own cost;
    /// `run_experiment` rewrites it to the accumulated total.
    pub simulated_time: f64,
    /// Informational wall time (seconds); never serialized.
    pub wall_clock: f64,
}

impl RoundReport {
    pub fn recall_at(&self, m: f64) -> Option<f64> {
        self.recall
            .iter()
            .find(|&&(threshold, _)| threshold == m)
            .map(|&(_, value)| value)
    }
}

/// Entrywise weighted sum of snapshots in ascending client-id order.
pub fn aggregate(
    snapshots: &[(usize, &ParameterVector)],
    weights: &[ClientScore],
) -> Result<ParameterVector> {
    if snapshots.is_empty() {
        return Err(Error::EmptyInput {
            context: "aggregate",
        });
    }
    if snapshots.len() != weights.len() {
        return Err(Error::CountMismatch {
            predictions: snapshots.len(),
            ground_truths: weights.len(),
        });
    }
    let mut ordered: Vec<&(usize, &ParameterVector)> = snapshots.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let mut scores: Vec<&ClientScore> = weights.iter().collect();
    scores.sort_by_key(|s| s.client_id);

    let layout = ordered[0].1.layout();
    for (id, params) in &ordered {
        if params.layout() != layout {
            return Err(Error::LayoutMismatch {
                left: params.layout_digest(),
                right: layout.digest(),
            });
        }
        let _ = id;
    }
    let sum: f64 = scores.iter().map(|s| s.attention).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightSumViolation { sum });
    }

    let mut values = vec![0.0; layout.param_count()];
    for ((id, params), score) in ordered.iter().zip(scores.iter()) {
        if *id != score.client_id {
            return Err(Error::InvalidConfig(format!(
                "snapshot ids and weight ids disagree: {} vs {}",
                id, score.client_id
            )));
        }
        for (acc, &v) in values.iter_mut().zip(params.values().iter()) {
            *acc += score.attention * v;
        }
    }
    ParameterVector::new(layout, values)
}

struct RoundOutcome {
    new_global: ParameterVector,
    report: RoundReport,
    snapshots: Vec<ClientSnapshot>,
}

#[allow(clippy::too_many_arguments)]
fn execute_round(
    round: usize,
    global: &ParameterVector,
    plan: &GroupPlan,
    clients: &[ClientDataset],
    p: &TemporalDistribution,
    cval: &[MomentSample],
    eval: &[MomentSample],
    cfg: &RunConfig,
    tcfg: &TrainConfig,
) -> Result<RoundOutcome> {
    plan.check_disjoint()?;
    if cval.is_empty() {
        return Err(Error::EmptyInput {
            context: "c-validation set",
        });
    }
    if eval.is_empty() {
        return Err(Error::EmptyInput {
            context: "evaluation set",
        });
    }
    let by_id: HashMap<usize, &ClientDataset> = clients.iter().map(|c| (c.client_id, c)).collect();
    for &id in plan.groups.iter().flatten() {
        if !by_id.contains_key(&id) {
            return Err(Error::InvalidConfig(format!(
                "group plan references unknown client {id}"
            )));
        }
    }
    let started = Instant::now();
    let cval_gts: Vec<(f64, f64)> = cval.iter().map(MomentSample::interval).collect();

    // Groups in parallel, clients within a group in turn. Snapshots are
    // re-sorted by client id afterwards, so scheduling cannot leak into the
    // result.
    let per_group: Vec<Result<Vec<ClientSnapshot>>> = plan
        .groups
        .par_iter()
        .map(|group| {
            let mut snapshots = Vec::with_capacity(group.len());
            let mut current = global.clone();
            for &client_id in group {
                let data = by_id[&client_id];
                let mut local_cfg = tcfg.clone();
                local_cfg.seed = seeds::client_seed(cfg.seed, round, client_id);
                let init_fingerprint = current.fingerprint();
                let trained =
                    client_update(&current, data, p, &local_cfg).map_err(|e| match e {
                        Error::Divergence { .. } => Error::ClientDivergence {
                            round,
                            client_id,
                            source: Box::new(e),
                        },
                        other => other,
                    })?;
                let preds = forward(&trained, cval)?;
                let raw_score = raw_c_score(&preds, &cval_gts, &cfg.scoring)?;
                snapshots.push(ClientSnapshot {
                    client_id,
                    init_fingerprint,
                    params: trained.clone(),
                    raw_score,
                });
                current = trained;
            }
            Ok(snapshots)
        })
        .collect();

    let mut snapshots = Vec::with_capacity(plan.client_count());
    for group in per_group {
        snapshots.extend(group?);
    }
    snapshots.sort_by_key(|s| s.client_id);

    let client_scores = match cfg.aggregation_mode {
        AggregationMode::CValidationSoftmax => {
            let raw: Vec<(usize, f64)> = snapshots
                .iter()
                .map(|s| (s.client_id, s.raw_score))
                .collect();
            attention_weights(&raw)?
        }
        AggregationMode::Uniform => {
            let uniform = 1.0 / snapshots.len() as f64;
            snapshots
                .iter()
                .map(|s| ClientScore {
                    client_id: s.client_id,
                    raw_score: s.raw_score,
                    attention: uniform,
                })
                .collect()
        }
    };

    let refs: Vec<(usize, &ParameterVector)> =
        snapshots.iter().map(|s| (s.client_id, &s.params)).collect();
    let new_global = aggregate(&refs, &client_scores)?;

    let eval_gts: Vec<(f64, f64)> = eval.iter().map(MomentSample::interval).collect();
    let eval_preds = forward(&new_global, eval)?;
    let mut recall = [(0.0, 0.0); 3];
    for (slot, &m) in recall.iter_mut().zip(REPORT_THRESHOLDS.iter()) {
        *slot = (m, recall_at_1(&eval_preds, &eval_gts, m)?);
    }

    let report = RoundReport {
        round_index: round,
        client_scores,
        recall,
        simulated_time: simulate_time(plan, cfg.unit_client_cost),
        wall_clock: started.elapsed().as_secs_f64(),
    };
    Ok(RoundOutcome {
        new_global,
        report,
        snapshots,
    })
}

/// Runs one communication round and returns the aggregated global model and
/// its report. `eval` is the held-out split the report's global metrics are
/// computed on.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    round: usize,
    global: &ParameterVector,
    plan: &GroupPlan,
    clients: &[ClientDataset],
    p: &TemporalDistribution,
    cval: &[MomentSample],
    eval: &[MomentSample],
    cfg: &RunConfig,
    tcfg: &TrainConfig,
) -> Result<(ParameterVector, RoundReport)> {
    let outcome = execute_round(round, global, plan, clients, p, cval, eval, cfg, tcfg)?;
    Ok((outcome.new_global, outcome.report))
}

/// As [`run_round`], additionally returning every client snapshot so tests
/// and tooling can verify the within-group weight handoff exactly.
#[allow(clippy::too_many_arguments)]
pub fn run_round_traced(
    round: usize,
    global: &ParameterVector,
    plan: &GroupPlan,
    clients: &[ClientDataset],
    p: &TemporalDistribution,
    cval: &[MomentSample],
    eval: &[MomentSample],
    cfg: &RunConfig,
    tcfg: &TrainConfig,
) -> Result<(ParameterVector, RoundReport, Vec<ClientSnapshot>)> {
    let outcome = execute_round(round, global, plan, clients, p, cval, eval, cfg, tcfg)?;
    Ok((outcome.new_global, outcome.report, outcome.snapshots))
}

/// Partitioned training data plus the held-out evaluation split.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// Client shards with ids `0..num_clients`, ascending.
    pub clients: Vec<ClientDataset>,
    /// Held-out samples for the per-round global metrics.
    pub eval_set: Vec<MomentSample>,
}

/// Everything a finished run exposes.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub reports: Vec<RoundReport>,
    pub final_global: ParameterVector,
    /// Population temporal distribution `p` computed in the preamble.
    pub population: TemporalDistribution,
    /// The grouping used in round 1 (later rounds may regroup).
    pub initial_plan: GroupPlan,
}

fn participant_ids(cfg: &RunConfig, round: usize) -> Vec<usize> {
    let c = cfg.num_clients;
    let take = ((cfg.participation_fraction * c as f64 - 1e-9).ceil() as usize).clamp(1, c);
    if take == c {
        return (0..c).collect();
    }
    let seed = seeds::mix(seeds::mix(cfg.seed, PARTICIPATION_STREAM), round as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, c, take).into_vec();
    ids.sort_unstable();
    ids
}

/// Runs the full protocol: computes each client's ground-truth temporal
/// distribution and the population distribution once, builds the
/// c-validation set, fixes the grouping, then executes `cfg.rounds` rounds
/// from `init`. Reports carry accumulated simulated time.
pub fn run_experiment(
    cfg: &RunConfig,
    tcfg: &TrainConfig,
    init: &ParameterVector,
    data: &ExperimentData,
) -> Result<ExperimentRun> {
    cfg.validate()?;
    tcfg.validate()?;
    if data.clients.len() != cfg.num_clients {
        return Err(Error::InvalidConfig(format!(
            "config says {} clients, data has {}",
            cfg.num_clients,
            data.clients.len()
        )));
    }
    for (index, client) in data.clients.iter().enumerate() {
        if client.client_id != index {
            return Err(Error::InvalidConfig(format!(
                "client ids must be 0..C ascending; position {index} holds id {}",
                client.client_id
            )));
        }
        if client.samples.is_empty() {
            return Err(Error::EmptyInput {
                context: "client shard",
            });
        }
    }
    if data.eval_set.is_empty() {
        return Err(Error::EmptyInput {
            context: "evaluation set",
        });
    }

    // Server preamble: q_k from each client's ground-truth annotations
    // (smoothed, so p is strictly positive), then the population average.
    let weighted: Vec<(usize, TemporalDistribution)> = data
        .clients
        .iter()
        .map(|c| Ok((c.n_k(), counts_to_distribution(&c.class_counts(), true)?)))
        .collect::<Result<_>>()?;
    let population = population_distribution(&weighted)?;

    let cval = build_c_validation(
        &data.clients,
        cfg.cval_fraction,
        seeds::mix(cfg.seed, CVAL_STREAM),
    )?;
    let base_plan = make_groups(
        cfg.num_clients,
        cfg.num_groups,
        seeds::mix(cfg.seed, GROUP_STREAM),
    )?;

    let mut global = init.clone();
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut elapsed = 0.0;
    for round in 1..=cfg.rounds {
        let plan = if cfg.participation_fraction < 1.0 {
            let ids = participant_ids(cfg, round);
            let groups = cfg.num_groups.min(ids.len());
            plan_from_ids(
                &ids,
                groups,
                seeds::mix(seeds::mix(cfg.seed, GROUP_STREAM), round as u64),
            )?
        } else if cfg.regroup_each_round {
            make_groups(
                cfg.num_clients,
                cfg.num_groups,
                seeds::mix(seeds::mix(cfg.seed, GROUP_STREAM), round as u64),
            )?
        } else {
            base_plan.clone()
        };

        let (next, mut report) = run_round(
            round,
            &global,
            &plan,
            &data.clients,
            &population,
            &cval,
            &data.eval_set,
            cfg,
            tcfg,
        )?;
        elapsed += report.simulated_time;
        report.simulated_time = elapsed;
        reports.push(report);
        global = next;
    }

    Ok(ExperimentRun {
        reports,
        final_global: global,
        population,
        initial_plan: base_plan,
    })
}

/// First 1-based round whose trailing 3-round moving average of `R(1, m)`
/// comes within 0.01 of the run's maximum such average. Shorter prefixes use
/// the rounds available; runs under 3 rounds report their length.
pub fn rounds_to_convergence(reports: &[RoundReport], m: f64) -> Result<usize> {
    if reports.is_empty() {
        return Err(Error::EmptyInput {
            context: "rounds_to_convergence",
        });
    }
    let series: Vec<f64> = reports
        .iter()
        .map(|r| {
            r.recall_at(m).ok_or_else(|| {
                Error::InvalidConfig(format!("threshold {m} is not recorded in round reports"))
            })
        })
        .collect::<Result<_>>()?;
    if series.len() < 3 {
        return Ok(series.len());
    }
    let moving: Vec<f64> = (0..series.len())
        .map(|i| {
            let start = i.saturating_sub(2);
            let window = &series[start..=i];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect();
    let best = moving.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = moving
        .iter()
        .position(|&v| v >= best - 0.01)
        .expect("max is attained");
    Ok(first + 1)
}

/// Serializes reports to the rounds CSV: round, accumulated simulated time,
/// the three recalls, then one attention column per client. Reals print at 6
/// decimal places; clients absent from a round print 0.
pub fn reports_to_csv(reports: &[RoundReport], num_clients: usize) -> String {
    let mut out = String::from("round,simulated_time,recall_0.3,recall_0.5,recall_0.7");
    for id in 0..num_clients {
        let _ = write!(out, ",a_{id}");
    }
    out.push('\n');
    for report in reports {
        let _ = write!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            report.round_index,
            report.simulated_time,
            report.recall[0].1,
            report.recall[1].1,
            report.recall[2].1
        );
        let mut attention = vec![0.0; num_clients];
        for score in &report.client_scores {
            if score.client_id < num_clients {
                attention[score.client_id] = score.attention;
            }
        }
        for a in attention {
            let _ = write!(out, ",{a:.6}");
        }
        out.push('\n');
    }
    out
}

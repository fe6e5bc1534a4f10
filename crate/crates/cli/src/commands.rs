//! End-to-end pipelines behind the CLI verbs: data generation, experiment
//! execution, and report emission. All stochastic stages derive their own
//! seed stream from the spec's single seed, so reruns are byte-identical.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use fedmoment::datagen::{
    generate_corpus, partition_dirichlet, ClientDataset, Corpus, PartitionConfig,
};
use fedmoment::federation::{
    reports_to_csv, rounds_to_convergence, run_experiment, AggregationMode, ExperimentData,
    ExperimentRun, RoundReport, RunConfig,
};
use fedmoment::localizer::{init_model, ParameterVector, TrainConfig};
use fedmoment::seeds;

use crate::spec::ExperimentSpec;

const DATA_STREAM: u64 = 0x6441_5441;
const PARTITION_STREAM: u64 = 0x7041_5254;
const INIT_STREAM: u64 = 0x6949_4e49;
const RUN_STREAM: u64 = 0x7252_554e;

/// Threshold the tradeoff and summary convergence numbers are read at.
pub const CONVERGENCE_THRESHOLD: f64 = 0.3;

/// Prepared inputs shared by every arm of a run.
pub struct PreparedExperiment {
    pub corpus_digest: u64,
    pub data: ExperimentData,
    pub init: ParameterVector,
    pub tcfg: TrainConfig,
}

/// Generates the corpus, splits off the held-out tail, and partitions the
/// training samples across clients.
pub fn prepare(spec: &ExperimentSpec) -> Result<PreparedExperiment> {
    let d = &spec.data;
    let corpus: Corpus = generate_corpus(
        d.n_total + d.n_test,
        d.d_v,
        d.d_q,
        seeds::mix(spec.seed, DATA_STREAM),
        &d.class_mix.distribution(),
    )?;
    let corpus_digest = corpus.digest();
    let train = &corpus.samples[..d.n_total];
    let eval_set = corpus.samples[d.n_total..].to_vec();
    let clients = partition_dirichlet(
        train,
        &PartitionConfig {
            num_clients: spec.run.num_clients,
            alpha: d.alpha,
            seed: seeds::mix(spec.seed, PARTITION_STREAM),
            label_mode: d.label_mode,
        },
    )?;
    let init = init_model(
        d.d_v,
        d.d_q,
        spec.train.hidden,
        seeds::mix(spec.seed, INIT_STREAM),
    )?;
    let tcfg = TrainConfig {
        local_epochs: spec.train.local_epochs,
        learning_rate: spec.train.learning_rate,
        lambda_dis: spec.train.lambda_dis,
        batch_size: spec.train.batch_size,
        seed: 0,
    };
    Ok(PreparedExperiment {
        corpus_digest,
        data: ExperimentData { clients, eval_set },
        init,
        tcfg,
    })
}

fn run_config(spec: &ExperimentSpec, num_groups: usize) -> RunConfig {
    RunConfig {
        num_clients: spec.run.num_clients,
        num_groups,
        rounds: spec.run.rounds,
        participation_fraction: spec.run.participation,
        regroup_each_round: spec.run.regroup_each_round,
        unit_client_cost: spec.run.unit_cost,
        aggregation_mode: spec.run.aggregation,
        seed: seeds::mix(spec.seed, RUN_STREAM),
        cval_fraction: spec.run.cval_fraction,
        scoring: Default::default(),
    }
}

#[derive(Debug, Serialize)]
struct RecallSummary {
    #[serde(rename = "0.3")]
    at_03: f64,
    #[serde(rename = "0.5")]
    at_05: f64,
    #[serde(rename = "0.7")]
    at_07: f64,
}

#[derive(Debug, Serialize)]
struct ConvergenceSummary {
    #[serde(rename = "0.3")]
    at_03: usize,
    #[serde(rename = "0.5")]
    at_05: usize,
    #[serde(rename = "0.7")]
    at_07: usize,
}

#[derive(Debug, Serialize)]
struct Summary {
    seed: u64,
    num_clients: usize,
    num_groups: usize,
    rounds: usize,
    corpus_digest: String,
    final_recall: RecallSummary,
    rounds_to_convergence: ConvergenceSummary,
    total_simulated_time: f64,
}

fn last_recall(reports: &[RoundReport], m: f64) -> f64 {
    reports
        .last()
        .and_then(|r| r.recall_at(m))
        .unwrap_or(f64::NAN)
}

fn write_outputs(
    dir: &Path,
    spec: &ExperimentSpec,
    num_groups: usize,
    corpus_digest: u64,
    run: &ExperimentRun,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(
        dir.join("rounds.csv"),
        reports_to_csv(&run.reports, spec.run.num_clients),
    )?;
    let mut model = Vec::new();
    run.final_global.write_binary(&mut model)?;
    fs::write(dir.join("final_model.bin"), model)?;

    let summary = Summary {
        seed: spec.seed,
        num_clients: spec.run.num_clients,
        num_groups,
        rounds: spec.run.rounds,
        corpus_digest: format!("{corpus_digest:016x}"),
        final_recall: RecallSummary {
            at_03: last_recall(&run.reports, 0.3),
            at_05: last_recall(&run.reports, 0.5),
            at_07: last_recall(&run.reports, 0.7),
        },
        rounds_to_convergence: ConvergenceSummary {
            at_03: rounds_to_convergence(&run.reports, 0.3)?,
            at_05: rounds_to_convergence(&run.reports, 0.5)?,
            at_07: rounds_to_convergence(&run.reports, 0.7)?,
        },
        total_simulated_time: run.reports.last().map(|r| r.simulated_time).unwrap_or(0.0),
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn execute_arm(
    spec: &ExperimentSpec,
    prepared: &PreparedExperiment,
    num_groups: usize,
) -> Result<ExperimentRun> {
    let cfg = run_config(spec, num_groups);
    Ok(run_experiment(
        &cfg,
        &prepared.tcfg,
        &prepared.init,
        &prepared.data,
    )?)
}

/// `run <spec>`: one experiment into the outputs directory, or one
/// subdirectory per group count when the spec carries a sweep.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<()> {
    if spec.sweep.is_some() {
        return cmd_sweep(spec);
    }
    let prepared = prepare(spec)?;
    let run = execute_arm(spec, &prepared, spec.run.num_groups)?;
    write_outputs(
        &spec.outputs,
        spec,
        spec.run.num_groups,
        prepared.corpus_digest,
        &run,
    )?;
    println!(
        "run: G={} rounds={} final R(1,0.5)={:.4} -> {}",
        spec.run.num_groups,
        spec.run.rounds,
        last_recall(&run.reports, 0.5),
        spec.outputs.display()
    );
    Ok(())
}

struct SweepEntry {
    num_groups: usize,
    rounds_needed: usize,
    round_cost: f64,
}

/// `sweep <spec>`: one experiment per group count on the identical corpus,
/// plus the combined tradeoff table.
pub fn cmd_sweep(spec: &ExperimentSpec) -> Result<()> {
    let Some(sweep) = spec.sweep.clone() else {
        bail!("spec has no `sweep` key; nothing to sweep");
    };
    let prepared = prepare(spec)?;

    let entries: Vec<SweepEntry> = sweep
        .par_iter()
        .map(|&num_groups| -> Result<SweepEntry> {
            let run = execute_arm(spec, &prepared, num_groups)?;
            let dir = spec.outputs.join(format!("g{num_groups}"));
            write_outputs(&dir, spec, num_groups, prepared.corpus_digest, &run)?;
            let round_cost =
                fedmoment::federation::simulate_time(&run.initial_plan, spec.run.unit_cost);
            Ok(SweepEntry {
                num_groups,
                rounds_needed: rounds_to_convergence(&run.reports, CONVERGENCE_THRESHOLD)?,
                round_cost,
            })
        })
        .collect::<Result<_>>()?;

    // Ratios are taken against the fully parallel arm: G = C when the sweep
    // includes it, otherwise the largest swept G.
    let baseline = entries
        .iter()
        .find(|e| e.num_groups == spec.run.num_clients)
        .or_else(|| entries.iter().max_by_key(|e| e.num_groups))
        .expect("sweep is nonempty");
    let baseline_time = baseline.rounds_needed as f64 * baseline.round_cost;

    let mut csv = String::from("g,rounds_needed,total_time,ratio\n");
    for entry in &entries {
        let total = entry.rounds_needed as f64 * entry.round_cost;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            entry.num_groups,
            entry.rounds_needed,
            total,
            total / baseline_time
        ));
    }
    fs::create_dir_all(&spec.outputs)?;
    fs::write(spec.outputs.join("tradeoff.csv"), csv)?;
    println!(
        "sweep: {} group counts -> {}",
        entries.len(),
        spec.outputs.display()
    );
    Ok(())
}

fn centralized_data(prepared: &PreparedExperiment) -> ExperimentData {
    let mut samples: Vec<_> = prepared
        .data
        .clients
        .iter()
        .flat_map(|c| c.samples.iter().cloned())
        .collect();
    samples.sort_by_key(|s| s.sample_id);
    ExperimentData {
        clients: vec![ClientDataset {
            client_id: 0,
            samples,
        }],
        eval_set: prepared.data.eval_set.clone(),
    }
}

/// `compare <spec>`: FedVMR, plain federated averaging, and a centralized
/// reference on the identical corpus and seeds.
pub fn cmd_compare(spec: &ExperimentSpec) -> Result<()> {
    let prepared = prepare(spec)?;

    // The full protocol, with whatever grouping the spec asks for.
    let fedvmr = execute_arm(spec, &prepared, spec.run.num_groups)?;

    // Plain federated averaging: every client its own group, uniform
    // weights, no distribution-gap term.
    let mut fedavg_spec = spec.clone();
    fedavg_spec.run.num_groups = spec.run.num_clients;
    fedavg_spec.run.aggregation = AggregationMode::Uniform;
    fedavg_spec.train.lambda_dis = 0.0;
    let fedavg_prepared = PreparedExperiment {
        corpus_digest: prepared.corpus_digest,
        data: prepared.data.clone(),
        init: prepared.init.clone(),
        tcfg: TrainConfig {
            lambda_dis: 0.0,
            ..prepared.tcfg.clone()
        },
    };
    let fedavg = execute_arm(&fedavg_spec, &fedavg_prepared, spec.run.num_clients)?;

    // Centralized reference: one client holding everything, same total epoch
    // budget (rounds x local epochs), no federation effects.
    let mut central_spec = spec.clone();
    central_spec.run.num_clients = 1;
    central_spec.run.num_groups = 1;
    central_spec.run.aggregation = AggregationMode::Uniform;
    central_spec.train.lambda_dis = 0.0;
    let central_prepared = PreparedExperiment {
        corpus_digest: prepared.corpus_digest,
        data: centralized_data(&prepared),
        init: prepared.init.clone(),
        tcfg: TrainConfig {
            lambda_dis: 0.0,
            ..prepared.tcfg.clone()
        },
    };
    let centralized = execute_arm(&central_spec, &central_prepared, 1)?;

    let arms = [
        ("centralized", &central_spec, &centralized),
        ("fedavg", &fedavg_spec, &fedavg),
        ("fedvmr", spec, &fedvmr),
    ];
    for (name, arm_spec, run) in &arms {
        write_outputs(
            &spec.outputs.join("compare").join(name),
            arm_spec,
            arm_spec.run.num_groups,
            prepared.corpus_digest,
            run,
        )?;
    }

    // Per-round metric comparison.
    let mut csv = String::from("round");
    for (name, _, _) in &arms {
        for m in [0.3, 0.5, 0.7] {
            csv.push_str(&format!(",{name}_{m}"));
        }
    }
    csv.push('\n');
    for round in 0..spec.run.rounds {
        csv.push_str(&format!("{}", round + 1));
        for (_, _, run) in &arms {
            let report = &run.reports[round];
            for m in [0.3, 0.5, 0.7] {
                csv.push_str(&format!(",{:.6}", report.recall_at(m).unwrap_or(f64::NAN)));
            }
        }
        csv.push('\n');
    }
    fs::write(spec.outputs.join("compare").join("comparison.csv"), csv)?;

    // Final-round summary table, one row per IoU threshold (values in %).
    let mut md = String::new();
    md.push_str(&format!(
        "corpus_digest: {:016x}\n\n",
        prepared.corpus_digest
    ));
    md.push_str("| Metric | Centralized | FedAvg | FedVMR |\n");
    md.push_str("|---|---|---|---|\n");
    for m in [0.3, 0.5, 0.7] {
        md.push_str(&format!("| IoU>{m} |"));
        for (_, _, run) in &arms {
            md.push_str(&format!(" {:.2} |", 100.0 * last_recall(&run.reports, m)));
        }
        md.push('\n');
    }
    fs::write(spec.outputs.join("compare").join("comparison.md"), md)?;

    println!(
        "compare: final R(1,0.5) centralized={:.4} fedavg={:.4} fedvmr={:.4} -> {}",
        last_recall(&centralized.reports, 0.5),
        last_recall(&fedavg.reports, 0.5),
        last_recall(&fedvmr.reports, 0.5),
        spec.outputs.join("compare").display()
    );
    Ok(())
}

//! Experiment spec files: a flat, line-oriented `key = value` format with
//! dotted section prefixes (`data.`, `train.`, `run.`).
//!
//! Unknown and duplicate keys are rejected with line numbers; semantic
//! problems are collected and reported all at once. Omitted keys fall back
//! to the documented defaults.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use fedmoment::datagen::LabelMode;
use fedmoment::federation::AggregationMode;
use fedmoment::temporal::{TemporalDistribution, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read spec: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid spec:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

/// Corpus generation and partition parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub n_total: usize,
    pub n_test: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub alpha: f64,
    pub label_mode: LabelMode,
    pub class_mix: ClassMix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassMix {
    /// Uniform over the 10 reachable temporal classes.
    FeasibleUniform,
    Explicit(Box<TemporalDistribution>),
}

impl ClassMix {
    pub fn distribution(&self) -> TemporalDistribution {
        match self {
            ClassMix::FeasibleUniform => TemporalDistribution::uniform_feasible(),
            ClassMix::Explicit(d) => (**d).clone(),
        }
    }
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n_total: 1600,
            n_test: 4000,
            d_v: 8,
            d_q: 4,
            alpha: 0.0,
            label_mode: LabelMode::TemporalClass,
            class_mix: ClassMix::FeasibleUniform,
        }
    }
}

/// Local training hyperparameters plus the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub lambda_dis: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            local_epochs: 10,
            learning_rate: 0.05,
            lambda_dis: 0.1,
            batch_size: 32,
            hidden: 16,
        }
    }
}

/// Protocol parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub num_clients: usize,
    pub num_groups: usize,
    pub rounds: usize,
    pub participation: f64,
    pub regroup_each_round: bool,
    pub unit_cost: f64,
    pub aggregation: AggregationMode,
    pub cval_fraction: f64,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            num_clients: 16,
            num_groups: 4,
            rounds: 40,
            participation: 1.0,
            regroup_each_round: false,
            unit_cost: 1.0,
            aggregation: AggregationMode::CValidationSoftmax,
            cval_fraction: 0.01,
        }
    }
}

/// A fully validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub outputs: PathBuf,
    pub sweep: Option<Vec<usize>>,
    pub data: DataSpec,
    pub train: TrainSpec,
    pub run: RunSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 7,
            outputs: PathBuf::from("out"),
            sweep: None,
            data: DataSpec::default(),
            train: TrainSpec::default(),
            run: RunSpec::default(),
        }
    }
}

/// Every key the format accepts; anything else is rejected.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "outputs",
    "sweep",
    "data.n_total",
    "data.n_test",
    "data.d_v",
    "data.d_q",
    "data.alpha",
    "data.label_mode",
    "data.class_mix",
    "train.local_epochs",
    "train.learning_rate",
    "train.lambda_dis",
    "train.batch_size",
    "train.hidden",
    "run.num_clients",
    "run.num_groups",
    "run.rounds",
    "run.participation",
    "run.regroup_each_round",
    "run.unit_cost",
    "run.aggregation",
    "run.cval_fraction",
];

struct RawEntry {
    line: usize,
    value: String,
}

fn parse_lines(text: &str) -> Result<HashMap<String, RawEntry>, SpecError> {
    let mut entries: HashMap<String, RawEntry> = HashMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(SpecError::Parse {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(SpecError::Parse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        if let Some(first) = entries.get(&key) {
            return Err(SpecError::Parse {
                line,
                message: format!("duplicate key `{key}` (first set at line {})", first.line),
            });
        }
        entries.insert(key, RawEntry { line, value });
    }
    Ok(entries)
}

struct Reader {
    entries: HashMap<String, RawEntry>,
}

impl Reader {
    fn take<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<(), SpecError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(entry) = self.entries.remove(key) {
            *into = entry.value.parse().map_err(|e| SpecError::Parse {
                line: entry.line,
                message: format!("{key}: {e}"),
            })?;
        }
        Ok(())
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        into: &mut T,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<(), SpecError> {
        if let Some(entry) = self.entries.remove(key) {
            *into = parse(&entry.value).map_err(|message| SpecError::Parse {
                line: entry.line,
                message: format!("{key}: {message}"),
            })?;
        }
        Ok(())
    }
}

fn parse_label_mode(value: &str) -> Result<LabelMode, String> {
    match value {
        "temporal_class" => Ok(LabelMode::TemporalClass),
        "synthetic_scene" => Ok(LabelMode::SyntheticScene),
        other => Err(format!(
            "expected `temporal_class` or `synthetic_scene`, found `{other}`"
        )),
    }
}

fn parse_aggregation(value: &str) -> Result<AggregationMode, String> {
    match value {
        "c_validation_softmax" => Ok(AggregationMode::CValidationSoftmax),
        "uniform" => Ok(AggregationMode::Uniform),
        other => Err(format!(
            "expected `c_validation_softmax` or `uniform`, found `{other}`"
        )),
    }
}

fn parse_class_mix(value: &str) -> Result<ClassMix, String> {
    if value == "feasible_uniform" {
        return Ok(ClassMix::FeasibleUniform);
    }
    let fields: Vec<&str> = value.split(',').collect();
    if fields.len() != NUM_CLASSES {
        return Err(format!(
            "expected `feasible_uniform` or {NUM_CLASSES} comma-separated reals"
        ));
    }
    let mut mass = [0.0; NUM_CLASSES];
    for (i, field) in fields.iter().enumerate() {
        mass[i] = field
            .trim()
            .parse()
            .map_err(|e| format!("entry {i}: {e}"))?;
    }
    let dist = TemporalDistribution::new(mass).map_err(|e| e.to_string())?;
    Ok(ClassMix::Explicit(Box::new(dist)))
}

fn parse_sweep(value: &str) -> Result<Option<Vec<usize>>, String> {
    let mut out = Vec::new();
    for field in value.split(',') {
        out.push(
            field
                .trim()
                .parse()
                .map_err(|e| format!("sweep entry `{}`: {e}", field.trim()))?,
        );
    }
    if out.is_empty() {
        return Err("sweep must list at least one group count".into());
    }
    Ok(Some(out))
}

fn validate(spec: &ExperimentSpec) -> Vec<String> {
    let mut problems = Vec::new();
    let d = &spec.data;
    let t = &spec.train;
    let r = &spec.run;
    if d.n_total < 1 {
        problems.push(format!("data.n_total: must be >= 1 (got {})", d.n_total));
    }
    if d.n_test < 1 {
        problems.push(format!("data.n_test: must be >= 1 (got {})", d.n_test));
    }
    if d.d_v < 1 {
        problems.push(format!("data.d_v: must be >= 1 (got {})", d.d_v));
    }
    if d.d_q < 1 {
        problems.push(format!("data.d_q: must be >= 1 (got {})", d.d_q));
    }
    if !d.alpha.is_finite() || d.alpha < 0.0 {
        problems.push(format!(
            "data.alpha: must be a nonnegative real (got {})",
            d.alpha
        ));
    }
    if t.local_epochs < 1 {
        problems.push(format!(
            "train.local_epochs: must be >= 1 (got {})",
            t.local_epochs
        ));
    }
    if !t.learning_rate.is_finite() || t.learning_rate < 0.0 {
        problems.push(format!(
            "train.learning_rate: must be a nonnegative real (got {})",
            t.learning_rate
        ));
    }
    if !t.lambda_dis.is_finite() || t.lambda_dis < 0.0 {
        problems.push(format!(
            "train.lambda_dis: must be a nonnegative real (got {})",
            t.lambda_dis
        ));
    }
    if t.batch_size < 1 {
        problems.push(format!(
            "train.batch_size: must be >= 1 (got {})",
            t.batch_size
        ));
    }
    if t.hidden < 1 {
        problems.push(format!("train.hidden: must be >= 1 (got {})", t.hidden));
    }
    if r.num_clients < 1 {
        problems.push(format!(
            "run.num_clients: must be >= 1 (got {})",
            r.num_clients
        ));
    }
    if r.num_groups < 1 || r.num_groups > r.num_clients {
        problems.push(format!(
            "run.num_groups: must lie in [1, run.num_clients] (got {})",
            r.num_groups
        ));
    }
    if r.rounds < 1 {
        problems.push(format!("run.rounds: must be >= 1 (got {})", r.rounds));
    }
    if !(r.participation > 0.0 && r.participation <= 1.0) {
        problems.push(format!(
            "run.participation: must lie in (0, 1] (got {})",
            r.participation
        ));
    }
    if !r.unit_cost.is_finite() || r.unit_cost <= 0.0 {
        problems.push(format!(
            "run.unit_cost: must be positive (got {})",
            r.unit_cost
        ));
    }
    if !(r.cval_fraction > 0.0 && r.cval_fraction <= 1.0) {
        problems.push(format!(
            "run.cval_fraction: must lie in (0, 1] (got {})",
            r.cval_fraction
        ));
    }
    if r.num_clients > d.n_total {
        problems.push(format!(
            "run.num_clients: cannot exceed data.n_total ({} > {})",
            r.num_clients, d.n_total
        ));
    }
    if let Some(sweep) = &spec.sweep {
        for &g in sweep {
            if g < 1 || g > r.num_clients {
                problems.push(format!(
                    "sweep: group count {g} must lie in [1, run.num_clients]"
                ));
            }
        }
    }
    problems
}

/// Parses and validates a spec from text.
pub fn parse_spec_text(text: &str) -> Result<ExperimentSpec, SpecError> {
    let mut reader = Reader {
        entries: parse_lines(text)?,
    };
    let mut spec = ExperimentSpec::default();

    reader.take("seed", &mut spec.seed)?;
    let mut outputs = spec.outputs.to_string_lossy().into_owned();
    reader.take("outputs", &mut outputs)?;
    spec.outputs = PathBuf::from(outputs);
    reader.take_with("sweep", &mut spec.sweep, parse_sweep)?;

    reader.take("data.n_total", &mut spec.data.n_total)?;
    reader.take("data.n_test", &mut spec.data.n_test)?;
    reader.take("data.d_v", &mut spec.data.d_v)?;
    reader.take("data.d_q", &mut spec.data.d_q)?;
    reader.take("data.alpha", &mut spec.data.alpha)?;
    reader.take_with(
        "data.label_mode",
        &mut spec.data.label_mode,
        parse_label_mode,
    )?;
    reader.take_with("data.class_mix", &mut spec.data.class_mix, parse_class_mix)?;

    reader.take("train.local_epochs", &mut spec.train.local_epochs)?;
    reader.take("train.learning_rate", &mut spec.train.learning_rate)?;
    reader.take("train.lambda_dis", &mut spec.train.lambda_dis)?;
    reader.take("train.batch_size", &mut spec.train.batch_size)?;
    reader.take("train.hidden", &mut spec.train.hidden)?;

    reader.take("run.num_clients", &mut spec.run.num_clients)?;
    reader.take("run.num_groups", &mut spec.run.num_groups)?;
    reader.take("run.rounds", &mut spec.run.rounds)?;
    reader.take("run.participation", &mut spec.run.participation)?;
    reader.take("run.regroup_each_round", &mut spec.run.regroup_each_round)?;
    reader.take("run.unit_cost", &mut spec.run.unit_cost)?;
    reader.take_with(
        "run.aggregation",
        &mut spec.run.aggregation,
        parse_aggregation,
    )?;
    reader.take("run.cval_fraction", &mut spec.run.cval_fraction)?;

    debug_assert!(reader.entries.is_empty(), "unconsumed known key");

    let problems = validate(&spec);
    if !problems.is_empty() {
        return Err(SpecError::Validation(problems));
    }
    Ok(spec)
}

/// Parses and validates a spec file.
pub fn parse_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec, SpecError> {
    let text = std::fs::read_to_string(path)?;
    parse_spec_text(&text)
}

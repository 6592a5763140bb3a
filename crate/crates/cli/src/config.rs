//! Experiment configuration: one JSON document, layered as built-in defaults,
//! then the config file, then `--desk`, then `--set key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use spurious_core::covmodel::{CovarianceModel, ModelOptions, ModelSpec, SyntheticFamilyParams};
use spurious_core::detequiv::{self, GroundTruth};
use spurious_core::rfmodel::Activation;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Reject models whose trace is not `2d`.
    pub require_trace_normalized: bool,
    pub ground_truth: GroundTruthSpec,
    pub n: usize,
    pub lambda_grid: LambdaGrid,
    pub seeds: SeedRange,
    /// Report test losses with the noise variance `σ²` subtracted.
    pub subtract_noise: bool,
    pub simplicity: SimplicitySpec,
    pub rf: Option<RfSpec>,
    pub output_dir: PathBuf,
}

/// Inline model or a JSON file holding one. Relative paths resolve against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    File { path: PathBuf },
    Inline(ModelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSpec {
    pub sigma2: f64,
    pub theta_x: ThetaChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaChoice {
    Named(NamedTheta),
    /// Explicit unit vector of length `d`.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedTheta {
    FirstBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub base: u64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EvMaxYy,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimplicitySpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivationSpec {
    Tanh,
    HermiteMix { c1: f64, c3: f64 },
    Identity,
}

impl ActivationSpec {
    pub fn build(&self) -> Activation {
        match *self {
            ActivationSpec::Tanh => Activation::Tanh,
            ActivationSpec::HermiteMix { c1, c3 } => Activation::HermiteMix { c1, c3 },
            ActivationSpec::Identity => Activation::Identity,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ActivationSpec::Tanh => "tanh",
            ActivationSpec::HermiteMix { .. } => "hermite_mix",
            ActivationSpec::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfSpec {
    pub activations: Vec<ActivationSpec>,
    /// Feature counts for the equivalence ladder.
    pub p_ladder: Vec<usize>,
    /// Ridge strength of the ladder.
    pub ladder_lambda: f64,
    /// Feature count for the spurious-covariance comparison; the largest
    /// ladder rung when absent.
    pub p: Option<usize>,
    /// Ridge strengths of the spurious-covariance comparison.
    pub lambdas: Vec<f64>,
    pub nodes: usize,
    pub test_points: usize,
    pub mc_samples: usize,
    /// Largest feature block, in matrix entries, for each concurrent fit.
    pub feature_budget: usize,
}

impl RfSpec {
    pub fn comparison_p(&self) -> usize {
        self.p.unwrap_or_else(|| self.p_ladder.iter().copied().max().unwrap_or(0))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = SyntheticFamilyParams::default_experiment();
        Self {
            model: ModelSource::Inline(p.into()),
            require_trace_normalized: true,
            ground_truth: GroundTruthSpec { sigma2: 0.25, theta_x: ThetaChoice::Named(NamedTheta::FirstBasis) },
            n: 2000,
            lambda_grid: LambdaGrid { min: 1e-3, max: 100.0, count: 30 },
            seeds: SeedRange { base: 0, count: 10 },
            subtract_noise: false,
            simplicity: SimplicitySpec { axis: SweepAxis::EvMaxYy, values: vec![1.5, 2.0, 3.0, 5.0], lambda: 1.0 },
            rf: Some(RfSpec {
                activations: vec![ActivationSpec::Tanh, ActivationSpec::HermiteMix { c1: 1.0, c3: 0.1 }],
                p_ladder: vec![2000, 8000, 32000],
                ladder_lambda: 0.0,
                p: None,
                lambdas: vec![0.0],
                nodes: 200,
                test_points: 100,
                mc_samples: 100_000,
                feature_budget: 50_000_000,
            }),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Everything that shapes the final configuration.
#[derive(Debug, Clone, Default)]
pub struct Layers<'a> {
    pub file: Option<&'a Path>,
    pub desk: bool,
    pub overrides: &'a [String],
    pub output_dir: Option<&'a Path>,
}

/// Configuration plus the directory relative model paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn load(layers: &Layers<'_>) -> Result<Loaded, CliError> {
    let mut value = serde_json::to_value(ExperimentConfig::default()).expect("default config serializes");
    let mut base_dir = PathBuf::from(".");
    if let Some(path) = layers.file {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut file: Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        // a model given in the file replaces the default one outright
        if let Some(m) = file.as_object_mut().and_then(|o| o.remove("model")) {
            value["model"] = m;
        }
        merge(&mut value, file);
        if let Some(dir) = path.parent() {
            base_dir = dir.to_path_buf();
        }
    }
    if layers.desk {
        apply_desk(&mut value)?;
    }
    for o in layers.overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(dir) = layers.output_dir {
        value["output_dir"] = Value::String(dir.to_string_lossy().into_owned());
    }
    let config: ExperimentConfig = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
    config.check()?;
    Ok(Loaded { config, base_dir })
}

/// Recursive merge: objects merge key by key, anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn apply_desk(value: &mut Value) -> Result<(), CliError> {
    let model = value.get_mut("model").and_then(Value::as_object_mut);
    match model {
        Some(m) if m.contains_key("ev_max_yy") => {
            m.insert("d".into(), Value::from(100));
        }
        _ => return Err(config_err("--desk needs an inline synthetic model")),
    }
    value["n"] = Value::from(500);
    Ok(())
}

/// `a.b.c=v`, where `v` is parsed as JSON and taken as a string otherwise.
fn apply_override(value: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override key `{path}` has an empty component")));
    }
    let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = value;
    for k in &keys[..keys.len() - 1] {
        if !slot.get(*k).is_some_and(Value::is_object) {
            if !slot.is_object() {
                return Err(config_err(format!("override `{path}`: `{k}` is not inside an object")));
            }
            slot[*k] = Value::Object(Map::new());
        }
        slot = slot.get_mut(*k).expect("just inserted");
    }
    match slot {
        Value::Object(m) => {
            m.insert(keys[keys.len() - 1].to_string(), new);
            Ok(())
        }
        _ => Err(config_err(format!("override `{path}` does not address an object field"))),
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), CliError> {
        let g = &self.lambda_grid;
        if g.count == 0 {
            return Err(config_err("lambda_grid.count must be positive"));
        }
        if !(g.min > 0.0 && g.max >= g.min && g.max.is_finite()) {
            return Err(config_err(format!("lambda_grid needs 0 < min ≤ max, got [{}, {}]", g.min, g.max)));
        }
        if g.count > 1 && g.max == g.min {
            return Err(config_err("lambda_grid has several points but min = max"));
        }
        if self.seeds.count == 0 {
            return Err(config_err("seeds.count must be positive"));
        }
        if self.n == 0 {
            return Err(config_err("n must be positive"));
        }
        if !(self.ground_truth.sigma2 >= 0.0 && self.ground_truth.sigma2.is_finite()) {
            return Err(config_err("ground_truth.sigma2 must be nonnegative"));
        }
        let s = &self.simplicity;
        if s.values.is_empty() {
            return Err(config_err("simplicity.values is empty"));
        }
        if !(s.lambda > 0.0 && s.lambda.is_finite()) {
            return Err(config_err("simplicity.lambda must be positive"));
        }
        if let Some(rf) = &self.rf {
            rf.check()?;
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Result<Vec<f64>, CliError> {
        let g = &self.lambda_grid;
        Ok(detequiv::geometric_grid(g.min, g.max, g.count)?)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        spurious_core::empirical::seed_range(self.seeds.base, self.seeds.count)
    }
}

impl RfSpec {
    fn check(&self) -> Result<(), CliError> {
        if self.activations.is_empty() {
            return Err(config_err("rf.activations is empty"));
        }
        for (i, a) in self.activations.iter().enumerate() {
            if self.activations[..i].iter().any(|b| b.label() == a.label()) {
                return Err(config_err(format!("rf.activations lists `{}` twice", a.label())));
            }
        }
        if self.p_ladder.is_empty() || self.p_ladder.contains(&0) {
            return Err(config_err("rf.p_ladder must be a nonempty list of positive feature counts"));
        }
        if self.p == Some(0) {
            return Err(config_err("rf.p must be positive"));
        }
        if self.lambdas.is_empty() {
            return Err(config_err("rf.lambdas is empty"));
        }
        if self.lambdas.iter().chain([&self.ladder_lambda]).any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(config_err("rf ridge strengths must be nonnegative"));
        }
        if self.nodes < 32 {
            return Err(config_err("rf.nodes must be at least 32"));
        }
        if self.test_points == 0 {
            return Err(config_err("rf.test_points must be positive"));
        }
        if self.mc_samples < 2 {
            return Err(config_err("rf.mc_samples must be at least 2"));
        }
        if self.feature_budget == 0 {
            return Err(config_err("rf.feature_budget must be positive"));
        }
        Ok(())
    }
}

impl Loaded {
    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        match &self.config.model {
            ModelSource::Inline(spec) => Ok(spec.clone()),
            ModelSource::File { path } => read_model_file(&self.base_dir.join(path)),
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions { require_trace_normalized: self.config.require_trace_normalized }
    }

    pub fn model(&self) -> Result<CovarianceModel, CliError> {
        Ok(self.model_spec()?.build_with(self.model_options())?)
    }

    pub fn synthetic_params(&self) -> Result<SyntheticFamilyParams, CliError> {
        match self.model_spec()? {
            ModelSpec::Synthetic { d, ev_max_yy, beta } => Ok(SyntheticFamilyParams { d, ev_max_yy, beta }),
            ModelSpec::Raw { .. } => Err(config_err("this command needs a synthetic model")),
        }
    }

    pub fn ground_truth(&self, d: usize) -> Result<GroundTruth, CliError> {
        let gt = &self.config.ground_truth;
        Ok(match &gt.theta_x {
            ThetaChoice::Named(NamedTheta::FirstBasis) => GroundTruth::first_basis(d, gt.sigma2)?,
            ThetaChoice::Explicit(v) => {
                if v.len() != d {
                    return Err(config_err(format!("ground_truth.theta_x has length {}, expected d = {d}", v.len())));
                }
                GroundTruth::new(DVector::from_column_slice(v), gt.sigma2)?
            }
        })
    }
}

pub fn read_model_file(path: &Path) -> Result<ModelSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read model {}: {e}", path.display())))?;
    ModelSpec::from_json(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

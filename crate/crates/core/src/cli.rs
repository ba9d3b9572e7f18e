//! Batch pipeline behind the command-line tool: configuration, the six
//! commands and their on-disk artifacts.
//!
//! Every artifact carries the tool version and a hash of the effective
//! configuration. JSON artifacts wrap their payload in [`Artifact`]; CSV
//! artifacts start with a `#` comment line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    cohort_csv, load_cohort, select_step_sample, CohortDataset, CohortSchema, ScaleStructure, Step, Subdimension,
};
use crate::error::{Error, Result};
use crate::model::{HazardSpec, LinkSpec, RandomEffects, TimeDesign, DEFAULT_QMC_POINTS};
use crate::numerics::optim::OptimizerSettings;
use crate::numerics::splines::SplineBasis;
use crate::selecting::{information_table, InformationTable};
use crate::sequencing::{self, impairment_sequence, predict_item_trajectory, JlpmFit, JlpmSpec};
use crate::simulation::{simulate_cohort, SimScenario};
use crate::staging::{fit_staging, project_staging, sequence_with_stages_csv, StageProjection, StagingFit, StagingSpec, DEFAULT_MC_DRAWS};
use crate::structuring::{run_structuring, StructuringOptions};
use crate::structuring::factor::FactorRule;
use crate::util::{fmt_f64, write_atomic};

pub const TOOL: &str = "fours";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Unexpected failure (i/o, numerical breakdown).
pub const EXIT_FAILURE: i32 = 1;
/// Invalid input, configuration or missing upstream artifact.
pub const EXIT_INVALID: i32 = 2;
/// A fit did not converge; its artifacts are written with flags.
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Structure,
    Sequence,
    Stage,
    Select,
    Simulate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Structure => "structure",
            Command::Sequence => "sequence",
            Command::Stage => "stage",
            Command::Select => "select",
            Command::Simulate => "simulate",
            Command::Report => "report",
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Input cohort. Paths are relative to the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub visits: PathBuf,
    pub events: PathBuf,
    #[serde(default)]
    pub schema: Option<CohortSchema>,
    /// JSON schema, e.g. the one written by `simulate`.
    #[serde(default)]
    pub schema_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    pub replicates: usize,
    pub n_factors: Option<usize>,
    pub factor_rule: FactorRule,
    pub loading_cutoff: f64,
    pub residual_threshold: f64,
    pub consistency: f64,
    pub monotonicity_tolerance: f64,
    /// Subdimension names and expected items to align replicates with.
    pub reference_file: Option<PathBuf>,
}

impl Default for StructureConfig {
    fn default() -> Self {
        let d = StructuringOptions::default();
        StructureConfig {
            replicates: d.replicates,
            n_factors: d.n_factors,
            factor_rule: d.factor_rule,
            loading_cutoff: d.loading_cutoff,
            residual_threshold: d.residual_threshold,
            consistency: d.consistency,
            monotonicity_tolerance: d.monotonicity_tolerance,
            reference_file: None,
        }
    }
}

/// Model template shared by sequencing and staging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    /// Hand-written structure; when set, the structure step is not needed.
    pub structure_file: Option<PathBuf>,
    /// Interior knots of the time spline; default: quartiles of visit times.
    pub knots: Option<Vec<f64>>,
    /// Default: `[0, last visit time]`.
    pub boundary: Option<(f64, f64)>,
    pub covariates: Vec<String>,
    pub time_interactions: Vec<String>,
    /// Time-basis columns with a random slope.
    pub random_slopes: Vec<usize>,
    pub diagonal: bool,
    pub hazards: Vec<HazardSpec>,
    pub qmc_points: usize,
    pub quadrature_nodes: usize,
    pub optimizer: OptimizerSettings,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            structure_file: None,
            knots: None,
            boundary: None,
            covariates: Vec::new(),
            time_interactions: Vec::new(),
            random_slopes: Vec::new(),
            diagonal: false,
            hazards: Vec::new(),
            qmc_points: DEFAULT_QMC_POINTS,
            quadrature_nodes: 15,
            optimizer: OptimizerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Default: quadratic I-spline over the sum-score range.
    pub link: Option<LinkSpec>,
    pub max_missing_frac: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { link: None, max_missing_frac: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// Draws for the sum-score equivalents of the stage thresholds.
    pub mc_draws: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig { mc_draws: DEFAULT_MC_DRAWS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Default: 21 equally spaced times over the time-spline boundary.
    pub times: Option<Vec<f64>>,
    /// Default: 5 equally spaced times over the boundary.
    pub spider_times: Option<Vec<f64>>,
    /// Covariate values of the predicted trajectories; unset ones are 0.
    pub profile: BTreeMap<String, f64>,
    pub mc_draws: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { times: None, spider_times: None, profile: BTreeMap::new(), mc_draws: DEFAULT_MC_DRAWS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream derives from this seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub structure: StructureConfig,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub stage: StageConfig,
    #[serde(default)]
    pub select: SelectConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub simulate: Option<SimScenario>,
}

/// Configuration with its resolution directory and provenance hash.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    /// Relative paths in the configuration are resolved against this.
    pub base: PathBuf,
    pub config_hash: String,
}

/// Command-line overrides of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// `dotted.key=value`, value in TOML syntax (bare words are strings).
    pub set: Vec<String>,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {key}")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{p} in {key} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// SHA-256 of the configuration without the settings that cannot change
/// results (`out`, `threads`), keys sorted.
pub fn config_hash(table: &toml::Table) -> Result<String> {
    let mut t = table.clone();
    t.remove("out");
    t.remove("threads");
    let json = serde_json::to_vec(&t)?;
    Ok(format!("{:x}", Sha256::digest(&json)))
}

/// Seed of the named random stream.
pub fn sub_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl Context {
    /// Read the configuration (if any) and apply the overrides.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Context> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                let t: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let base = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
                (t, base)
            }
            None => (toml::Table::new(), PathBuf::from(".")),
        };
        for s in &ov.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s} is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(seed) = ov.seed {
            let seed = i64::try_from(seed).map_err(|_| Error::Config("seed must fit in 63 bits".into()))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let config_hash = config_hash(&table)?;
        let mut config: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // a command-line directory is relative to the working directory
        if let Some(out) = &ov.out {
            config.out = if out.is_absolute() {
                out.clone()
            } else {
                std::env::current_dir().map_err(|e| Error::io(".", e))?.join(out)
            };
        }
        if ov.threads.is_some() {
            config.threads = ov.threads;
        }
        Ok(Context { config, base, config_hash })
    }

    pub fn from_config(config: RunConfig, base: PathBuf) -> Result<Context> {
        let value = toml::Value::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
        let table = value.as_table().cloned().unwrap_or_default();
        Ok(Context { config_hash: config_hash(&table)?, config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out)
    }

    fn artifact_path(&self, rel: &str) -> PathBuf {
        self.out_dir().join(rel)
    }

    fn write_json<T: Serialize>(&self, cmd: Command, rel: &str, payload: &T, outcome: &mut Outcome) -> Result<()> {
        let a = Artifact {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_hash: self.config_hash.clone(),
            command: cmd.name().into(),
            payload,
        };
        let mut bytes = serde_json::to_vec_pretty(&a)?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes, outcome)
    }

    fn write_csv(&self, rel: &str, body: &[u8], outcome: &mut Outcome) -> Result<()> {
        let mut bytes = format!("# {TOOL} {VERSION} config {}\n", self.config_hash).into_bytes();
        bytes.extend_from_slice(body);
        self.write_bytes(rel, &bytes, outcome)
    }

    fn write_bytes(&self, rel: &str, bytes: &[u8], outcome: &mut Outcome) -> Result<()> {
        let path = self.artifact_path(rel);
        write_atomic(&path, bytes)?;
        outcome.artifacts.push(path);
        Ok(())
    }

    fn read_artifact<T: DeserializeOwned>(&self, rel: &str, hint: &str) -> Result<T> {
        let path = self.artifact_path(rel);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("{} ({hint})", path.display())));
        }
        read_json_payload(&path)
    }

    /// The cohort named in `[data]`.
    pub fn load_data(&self) -> Result<CohortDataset> {
        let d = self.config.data.as_ref().ok_or_else(|| Error::Config("no [data] section".into()))?;
        let schema = match (&d.schema, &d.schema_file) {
            (Some(s), None) => s.clone(),
            (None, Some(f)) => {
                let path = self.resolve(f);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path.display().to_string()));
                }
                read_json_payload(&path)?
            }
            _ => return Err(Error::Config("give exactly one of data.schema and data.schema_file".into())),
        };
        let data = load_cohort(&self.resolve(&d.visits), &self.resolve(&d.events), &schema)?;
        data.validate()?;
        Ok(data)
    }

    /// User-supplied structure if configured, else the `structure` artifact.
    pub fn structure(&self) -> Result<ScaleStructure> {
        let s: ScaleStructure = match &self.config.sequence.structure_file {
            Some(f) => {
                let path = self.resolve(f);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path.display().to_string()));
                }
                read_json_payload(&path)?
            }
            None => self.read_artifact("structure/structure.json", "run `structure` or set sequence.structure_file")?,
        };
        if s.subdimensions.is_empty() {
            return Err(Error::validation("the structure has no subdimension"));
        }
        Ok(s)
    }

    /// Time design of the sequencing and staging models.
    pub fn time_design(&self, data: &CohortDataset) -> Result<TimeDesign> {
        let mut times: Vec<f64> = data.patients.iter().flat_map(|p| p.visits.iter().map(|v| v.time)).collect();
        if times.is_empty() {
            return Err(Error::validation("the cohort has no visit"));
        }
        times.sort_by(f64::total_cmp);
        let c = &self.config.sequence;
        let boundary = c.boundary.unwrap_or((0.0f64.min(times[0]), times[times.len() - 1]));
        let knots = match &c.knots {
            Some(k) => k.clone(),
            None => {
                let mut k: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|&p| quantile(&times, p)).collect();
                k.dedup();
                k.retain(|&x| x > boundary.0 && x < boundary.1);
                k
            }
        };
        Ok(TimeDesign {
            basis: SplineBasis::natural_cubic(boundary, knots)?,
            covariates: c.covariates.clone(),
            time_interactions: c.time_interactions.clone(),
        })
    }

    fn random(&self) -> RandomEffects {
        RandomEffects { time_columns: self.config.sequence.random_slopes.clone(), diagonal: self.config.sequence.diagonal }
    }

    pub fn jlpm_spec(&self, dim: &Subdimension, time: &TimeDesign) -> JlpmSpec {
        let c = &self.config.sequence;
        JlpmSpec {
            subdimension: dim.clone(),
            time: time.clone(),
            random: self.random(),
            hazards: c.hazards.clone(),
            qmc_points: c.qmc_points,
            quadrature_nodes: c.quadrature_nodes,
            optimizer: c.optimizer.clone(),
        }
    }

    pub fn staging_spec(&self, dim: &Subdimension, time: &TimeDesign) -> StagingSpec {
        let c = &self.config.sequence;
        StagingSpec {
            subdimension: dim.clone(),
            time: time.clone(),
            random: self.random(),
            link: self.config.stage.link.clone(),
            hazards: c.hazards.clone(),
            qmc_points: c.qmc_points,
            quadrature_nodes: c.quadrature_nodes,
            optimizer: c.optimizer.clone(),
            max_missing_frac: self.config.stage.max_missing_frac,
        }
    }

    pub fn structuring_options(&self) -> Result<StructuringOptions> {
        let c = &self.config.structure;
        let reference = match &c.reference_file {
            Some(f) => Some(read_json_payload(&self.resolve(f))?),
            None => None,
        };
        Ok(StructuringOptions {
            replicates: c.replicates,
            seed: sub_seed(self.config.seed, "structure"),
            n_factors: c.n_factors,
            factor_rule: c.factor_rule,
            loading_cutoff: c.loading_cutoff,
            residual_threshold: c.residual_threshold,
            consistency: c.consistency,
            monotonicity_tolerance: c.monotonicity_tolerance,
            reference,
        })
    }
}

/// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub command: String,
    pub payload: T,
}

/// Payload of a JSON artifact, or a plain JSON document of the same type.
pub fn read_json_payload<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let inner = match value {
        serde_json::Value::Object(mut m) if m.contains_key("payload") && m.contains_key("config_hash") => {
            m.remove("payload").expect("checked")
        }
        v => v,
    };
    serde_json::from_value(inner).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

/// Artifacts written by a command and whether every fit converged.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { artifacts: Vec::new(), converged: true, warnings: Vec::new() }
    }

    pub fn exit_code(&self) -> i32 {
        if self.converged {
            EXIT_OK
        } else {
            EXIT_NOT_CONVERGED
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::Domain(_)
        | Error::EmptySample(_)
        | Error::OutOfRange { .. }
        | Error::MissingArtifact(_)
        | Error::Config(_) => EXIT_INVALID,
        Error::Bracket { .. } | Error::NonFinite { .. } | Error::Io { .. } | Error::Json(_) => EXIT_FAILURE,
    }
}

/// File-system friendly form of a subdimension name.
pub fn dim_dir(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

/// Add a leading `subdimension` column to a CSV body.
fn with_dim_column(dim: &str, body: &[u8], header: bool, out: &mut Vec<u8>) -> Result<()> {
    let text = std::str::from_utf8(body).map_err(|e| Error::validation(e.to_string()))?;
    let quoted = if dim.contains([',', '"', '\n']) { format!("\"{}\"", dim.replace('"', "\"\"")) } else { dim.to_string() };
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if header {
                out.extend_from_slice(format!("subdimension,{line}\n").as_bytes());
            }
        } else {
            out.extend_from_slice(format!("{quoted},{line}\n").as_bytes());
        }
    }
    Ok(())
}

/// Run one command.
pub fn run(cmd: Command, ctx: &Context) -> Result<Outcome> {
    match cmd {
        Command::Structure => cmd_structure(ctx),
        Command::Sequence => cmd_sequence(ctx),
        Command::Stage => cmd_stage(ctx),
        Command::Select => cmd_select(ctx),
        Command::Simulate => cmd_simulate(ctx),
        Command::Report => cmd_report(ctx),
    }
}

pub fn cmd_simulate(ctx: &Context) -> Result<Outcome> {
    let mut scn = ctx.config.simulate.clone().ok_or_else(|| Error::Config("no [simulate] section".into()))?;
    scn.seed = sub_seed(ctx.config.seed, "simulate");
    let (data, truth) = simulate_cohort(&scn)?;
    let mut schema = CohortSchema::for_dataset(&data);
    if scn.stages.is_none() {
        schema.stage_column = None;
    }
    let (visits, events) = cohort_csv(&data, &schema)?;
    let mut out = Outcome::new();
    ctx.write_csv("simulate/visits.csv", &visits, &mut out)?;
    ctx.write_csv("simulate/events.csv", &events, &mut out)?;
    ctx.write_json(Command::Simulate, "simulate/schema.json", &schema, &mut out)?;
    ctx.write_json(Command::Simulate, "simulate/truth.json", &truth, &mut out)?;
    Ok(out)
}

pub fn cmd_structure(ctx: &Context) -> Result<Outcome> {
    let data = ctx.load_data()?;
    let opts = ctx.structuring_options()?;
    let report = run_structuring(&data, &opts)?;
    let mut out = Outcome::new();
    out.warnings.extend(report.warnings.iter().cloned());
    if !report.needs_review.is_empty() {
        let items: Vec<&str> = report.needs_review.iter().map(|r| r.item.as_str()).collect();
        out.warnings.push(format!("items needing review: {}", items.join(", ")));
    }
    ctx.write_json(Command::Structure, "structure/report.json", &report, &mut out)?;
    ctx.write_json(Command::Structure, "structure/structure.json", &report.structure, &mut out)?;
    ctx.write_csv("structure/monotonicity.csv", &report.curves_csv()?, &mut out)?;
    Ok(out)
}

pub fn cmd_sequence(ctx: &Context) -> Result<Outcome> {
    let data = ctx.load_data()?;
    let structure = ctx.structure()?;
    structure.validate(&data.scale)?;
    let time = ctx.time_design(&data)?;
    let (sample, selection) = select_step_sample(&data, Step::Sequencing, &structure.subdimensions)?;
    let mut out = Outcome::new();
    ctx.write_json(Command::Sequence, "sequence/selection.json", &selection, &mut out)?;
    for dim in &structure.subdimensions {
        log::info!("sequencing {}", dim.name);
        let fit = sequencing::fit(&ctx.jlpm_spec(dim, &time), &sample, None)?;
        if !fit.converged() {
            out.converged = false;
            out.warnings.push(format!("{}: {}", dim.name, fit.fit.convergence.message));
        }
        let dir = dim_dir(&dim.name);
        ctx.write_json(Command::Sequence, &format!("sequence/{dir}/fit.json"), &fit, &mut out)?;
        ctx.write_csv(&format!("sequence/{dir}/sequence.csv"), &impairment_sequence(&fit).to_csv()?, &mut out)?;
    }
    Ok(out)
}

pub fn cmd_stage(ctx: &Context) -> Result<Outcome> {
    let data = ctx.load_data()?;
    let structure = ctx.structure()?;
    structure.validate(&data.scale)?;
    let time = ctx.time_design(&data)?;
    let (sample, selection) = select_step_sample(&data, Step::Staging, &structure.subdimensions)?;
    let mut out = Outcome::new();
    ctx.write_json(Command::Stage, "stage/selection.json", &selection, &mut out)?;
    for dim in &structure.subdimensions {
        log::info!("staging {}", dim.name);
        let fit = fit_staging(&ctx.staging_spec(dim, &time), &sample)?;
        if !fit.converged() {
            out.converged = false;
            out.warnings.push(format!("{}: {}", dim.name, fit.fit.convergence.message));
        }
        out.warnings.extend(fit.warnings.iter().map(|w| format!("{}: {w}", dim.name)));
        ctx.write_json(Command::Stage, &format!("stage/{}/fit.json", dim_dir(&dim.name)), &fit, &mut out)?;
    }
    Ok(out)
}

pub fn cmd_select(ctx: &Context) -> Result<Outcome> {
    let structure = ctx.structure()?;
    let mut out = Outcome::new();
    for dim in &structure.subdimensions {
        let dir = dim_dir(&dim.name);
        let seq: JlpmFit = ctx.read_artifact(&format!("sequence/{dir}/fit.json"), "run `sequence` first")?;
        let stg: StagingFit = ctx.read_artifact(&format!("stage/{dir}/fit.json"), "run `stage` first")?;
        let proj = project_staging(&seq, &stg, ctx.config.select.mc_draws)?;
        let table = information_table(&seq.measurement(), &proj)?;
        out.warnings.extend(table.warnings.iter().map(|w| format!("{}: {w}", dim.name)));
        ctx.write_json(Command::Select, &format!("select/{dir}/projection.json"), &proj, &mut out)?;
        ctx.write_json(Command::Select, &format!("select/{dir}/information.json"), &table, &mut out)?;
        ctx.write_csv(&format!("select/{dir}/information.csv"), &table.to_csv()?, &mut out)?;
    }
    Ok(out)
}

fn spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect()
}

pub fn cmd_report(ctx: &Context) -> Result<Outcome> {
    let structure = ctx.structure()?;
    let rc = &ctx.config.report;
    let mut traj_csv = b"subdimension,item,time,expected\n".to_vec();
    let mut spider_csv = b"subdimension,item,time,expected,relative\n".to_vec();
    let mut seq_csv = Vec::new();
    let mut info_csv = Vec::new();
    for (k, dim) in structure.subdimensions.iter().enumerate() {
        let dir = dim_dir(&dim.name);
        let seq: JlpmFit = ctx.read_artifact(&format!("sequence/{dir}/fit.json"), "run `sequence` first")?;
        let proj: StageProjection = ctx.read_artifact(&format!("select/{dir}/projection.json"), "run `select` first")?;
        let info: InformationTable = ctx.read_artifact(&format!("select/{dir}/information.json"), "run `select` first")?;
        let (lo, hi) = seq.spec.time.basis.boundary();
        let mut profile = BTreeMap::new();
        for c in seq.spec.time.covariates.iter().chain(&seq.spec.time.time_interactions) {
            profile.insert(c.clone(), rc.profile.get(c).copied().unwrap_or(0.0));
        }
        let times = rc.times.clone().unwrap_or_else(|| spaced(lo, hi, 21));
        let traj = predict_item_trajectory(&seq, &profile, &times, rc.mc_draws)?;
        for (i, item) in traj.items.iter().enumerate() {
            for (j, t) in traj.times.iter().enumerate() {
                traj_csv.extend_from_slice(format!("{},{item},{},{}\n", dim.name, fmt_f64(*t), fmt_f64(traj.expected[i][j])).as_bytes());
            }
        }
        let spider_times = rc.spider_times.clone().unwrap_or_else(|| spaced(lo, hi, 5));
        let spider = predict_item_trajectory(&seq, &profile, &spider_times, rc.mc_draws)?;
        for (j, t) in spider.times.iter().enumerate() {
            for (i, item) in spider.items.iter().enumerate() {
                let e = spider.expected[i][j];
                let rel = e / f64::from(seq.items[i].max_level);
                spider_csv.extend_from_slice(format!("{},{item},{},{},{}\n", dim.name, fmt_f64(*t), fmt_f64(e), fmt_f64(rel)).as_bytes());
            }
        }
        with_dim_column(&dim.name, &sequence_with_stages_csv(&impairment_sequence(&seq), &proj)?, k == 0, &mut seq_csv)?;
        with_dim_column(&dim.name, &info.to_csv()?, k == 0, &mut info_csv)?;
    }
    let mut out = Outcome::new();
    ctx.write_csv("report/trajectories.csv", &traj_csv, &mut out)?;
    ctx.write_csv("report/spider.csv", &spider_csv, &mut out)?;
    ctx.write_csv("report/sequence_stages.csv", &seq_csv, &mut out)?;
    ctx.write_csv("report/information.csv", &info_csv, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[structure]\nreplicates = 10\n").unwrap();
        let ov = Overrides {
            seed: Some(9),
            out: Some("elsewhere".into()),
            threads: Some(2),
            set: vec!["structure.consistency=0.7".into(), "sequence.covariates=[\"sex\"]".into(), "report.profile.sex=1".into()],
        };
        let ctx = Context::load(Some(&path), &ov).unwrap();
        assert_eq!(ctx.config.seed, 9);
        assert_eq!(ctx.config.structure.replicates, 10);
        assert_eq!(ctx.config.structure.consistency, 0.7);
        assert_eq!(ctx.config.sequence.covariates, vec!["sex".to_string()]);
        assert_eq!(ctx.config.report.profile["sex"], 1.0);
        assert_eq!(ctx.config.out, std::env::current_dir().unwrap().join("elsewhere"));
        assert_eq!(ctx.config.threads, Some(2));
        let ctx = Context::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(ctx.out_dir(), dir.path().join("out"));
    }

    #[test]
    fn hash_ignores_output_location_but_not_settings() {
        let a: toml::Table = toml::from_str("seed = 1\nout = \"a\"\nthreads = 1\n").unwrap();
        let b: toml::Table = toml::from_str("out = \"b\"\nseed = 1\n").unwrap();
        let c: toml::Table = toml::from_str("seed = 2\n").unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let ov = Overrides { set: vec!["structure.replicate=3".into()], ..Default::default() };
        let e = Context::load(None, &ov).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert_eq!(exit_code(&e), EXIT_INVALID);
    }

    #[test]
    fn sub_seeds_are_distinct_and_stable() {
        assert_eq!(sub_seed(7, "structure"), sub_seed(7, "structure"));
        assert_ne!(sub_seed(7, "structure"), sub_seed(7, "simulate"));
        assert_ne!(sub_seed(7, "structure"), sub_seed(8, "structure"));
    }

    #[test]
    fn payload_reader_accepts_plain_and_wrapped_documents() {
        let dir = tempfile::tempdir().unwrap();
        let s = ScaleStructure { subdimensions: vec![Subdimension { name: "a".into(), items: vec!["x".into()] }] };
        let plain = dir.path().join("plain.json");
        std::fs::write(&plain, serde_json::to_vec(&s).unwrap()).unwrap();
        let ctx = Context::from_config(toml::from_str("out = \"o\"").unwrap(), dir.path().to_path_buf()).unwrap();
        let mut out = Outcome::new();
        ctx.write_json(Command::Structure, "s.json", &s, &mut out).unwrap();
        let wrapped: ScaleStructure = read_json_payload(&dir.path().join("o/s.json")).unwrap();
        assert_eq!(wrapped, s);
        assert_eq!(read_json_payload::<ScaleStructure>(&plain).unwrap(), s);
        let text = std::fs::read_to_string(dir.path().join("o/s.json")).unwrap();
        assert!(text.contains(&ctx.config_hash) && text.contains(VERSION));
    }

    #[test]
    fn missing_upstream_artifact_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = Context::from_config(toml::from_str("").unwrap(), dir.path().to_path_buf()).unwrap();
        let e = cmd_select(&ctx).unwrap_err();
        assert!(matches!(e, Error::MissingArtifact(_)));
        assert_eq!(exit_code(&e), EXIT_INVALID);
    }

    #[test]
    fn dimension_columns_and_directories() {
        assert_eq!(dim_dir("Motor skills/II"), "Motor_skills_II");
        let mut out = Vec::new();
        with_dim_column("a,b", b"x,y\n1,2\n", true, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "subdimension,x,y\n\"a,b\",1,2\n");
    }

    #[test]
    fn quartile_knots_inside_the_visit_range() {
        assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.25), 1.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.5), 0.5);
    }
}

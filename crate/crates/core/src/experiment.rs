//! Replicated estimator comparisons on a known population.
//!
//! A run fixes one population (generated or read from disk), draws a fresh
//! Bernoulli sample per replicate, computes the true `τ₁`, `τ₂` and runs every
//! configured estimator on that same sample. Replicate `r` uses seed
//! `seed + r` on the sample stream, so any single replicate can be replayed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::argus::{argus_estimate, compute_weights, PostStrataSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::loglinear::{fit_independence, fit_two_way, loglin_estimate, IpfOptions, LoglinModel};
use crate::risk::RiskEstimate;
use crate::smoothing::{smooth_estimate, BoundaryMode, NeighborhoodSpec, NewtonOptions};
use crate::synth::{draw_sample, gen_population, true_risk, GammaLaw, PopulationSpec};
use crate::table::{Attribute, FreqTable, Microdata, TableSchema};

pub const TRUTH_LABEL: &str = "truth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    pub name: String,
    pub levels: u32,
    #[serde(default = "default_true")]
    pub ordinal: bool,
}

fn default_true() -> bool {
    true
}

impl From<&AttributeConfig> for Attribute {
    fn from(a: &AttributeConfig) -> Self {
        Attribute {
            name: a.name.clone(),
            levels: a.levels,
            ordinal: a.ordinal,
        }
    }
}

/// Either a path to a population table or an inline generator spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<AttributeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_expected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<GammaLaw>,
    /// Generator seed; defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PopulationConfig {
    /// Parses a bare population spec, or the `[population]` section of an
    /// experiment config.
    pub fn from_toml(text: &str) -> Result<Self> {
        match toml::from_str::<PopulationConfig>(text) {
            Ok(cfg) => Ok(cfg),
            Err(bare) => ExperimentConfig::from_toml(text)
                .map(|cfg| cfg.population)
                .map_err(|_| Error::Config(bare.message().to_string())),
        }
    }

    pub fn schema(&self) -> Result<Arc<TableSchema>> {
        if self.attributes.is_empty() {
            return Err(Error::Config("population.attributes is empty".into()));
        }
        Ok(Arc::new(TableSchema::new(
            self.attributes.iter().map(Attribute::from).collect(),
        )?))
    }

    /// Generator spec for an inline population.
    pub fn spec(&self, default_seed: u64) -> Result<PopulationSpec> {
        let n_expected = self
            .n_expected
            .ok_or_else(|| Error::Config("population.n_expected is required".into()))?;
        let law = self
            .law
            .clone()
            .ok_or_else(|| Error::Config("population.law is required".into()))?;
        let schema = self.schema()?;
        law.validate(&schema)?;
        Ok(PopulationSpec {
            schema,
            n_expected,
            law,
            seed: self.seed.unwrap_or(default_seed),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Post-stratified Argus. No strata means one stratum spanning the population.
    Argus {
        #[serde(default)]
        strata: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    Loglin {
        model: LoglinModel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tol: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_iter: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    Smooth {
        /// Attributes held at the center's level, by name.
        #[serde(default)]
        fixed: Vec<String>,
        c: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<u32>,
        degree: u32,
        #[serde(default)]
        boundary: BoundaryMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tol: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_iter: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
}

/// What an estimator may need beyond the sample table.
#[derive(Debug, Clone, Copy)]
pub struct EstimationContext<'a> {
    pub pi: f64,
    /// Population size `N`.
    pub population_size: f64,
    pub population: Option<&'a FreqTable>,
    pub margins: Option<&'a PostStrataSpec>,
    /// Record-level sample carrying auxiliary stratum columns.
    pub microdata: Option<&'a Microdata>,
}

impl MethodSpec {
    pub fn argus() -> Self {
        MethodSpec::Argus {
            strata: Vec::new(),
            label: None,
        }
    }

    pub fn loglin(model: LoglinModel) -> Self {
        MethodSpec::Loglin {
            model,
            tol: None,
            max_iter: None,
            label: None,
        }
    }

    pub fn smooth(spec: &NeighborhoodSpec, schema: &TableSchema) -> Self {
        MethodSpec::Smooth {
            fixed: spec
                .fixed
                .iter()
                .map(|&i| schema.attribute(i).name.clone())
                .collect(),
            c: spec.c,
            d: spec.d,
            degree: spec.degree,
            boundary: spec.boundary,
            tol: None,
            max_iter: None,
            label: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            MethodSpec::Argus { label: Some(l), .. }
            | MethodSpec::Loglin { label: Some(l), .. }
            | MethodSpec::Smooth { label: Some(l), .. } => l.clone(),
            MethodSpec::Argus { strata, .. } if strata.is_empty() => "argus".into(),
            MethodSpec::Argus { strata, .. } => format!("argus[{}]", strata.join("+")),
            MethodSpec::Loglin { model, .. } => format!("loglin-{}", model.label()),
            MethodSpec::Smooth {
                fixed,
                c,
                d,
                degree,
                boundary,
                ..
            } => {
                let mut s = format!("smooth t={degree} c={c}");
                if let Some(d) = d {
                    let _ = write!(s, " d={d}");
                }
                if !fixed.is_empty() {
                    let _ = write!(s, " fixed={}", fixed.join("+"));
                }
                if *boundary == BoundaryMode::Shrink {
                    s.push_str(" shrink");
                }
                s
            }
        }
    }

    /// Resolves a smoothing method to a neighborhood over `schema`.
    pub fn neighborhood(&self, schema: &TableSchema) -> Result<Option<NeighborhoodSpec>> {
        let MethodSpec::Smooth {
            fixed,
            c,
            d,
            degree,
            boundary,
            ..
        } = self
        else {
            return Ok(None);
        };
        let fixed = fixed
            .iter()
            .map(|name| {
                schema
                    .index_of(name)
                    .ok_or_else(|| Error::Config(format!("fixed attribute `{name}` not in table")))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = NeighborhoodSpec {
            fixed,
            c: *c,
            d: *d,
            degree: *degree,
            boundary: *boundary,
        };
        spec.validate_for(schema)?;
        Ok(Some(spec))
    }

    /// Checks everything that can be checked before any sample exists.
    pub fn validate(&self, schema: &TableSchema) -> Result<()> {
        match self {
            MethodSpec::Argus { strata, .. } => {
                for name in strata {
                    if schema.index_of(name).is_none() {
                        return Err(Error::Config(format!(
                            "argus stratum `{name}` is not a table attribute"
                        )));
                    }
                }
            }
            MethodSpec::Loglin {
                model,
                tol,
                max_iter,
                ..
            } => {
                if *model == LoglinModel::TwoWay && schema.m() < 2 {
                    return Err(Error::Config("two-way model needs m >= 2".into()));
                }
                check_tol(*tol)?;
                if *max_iter == Some(0) {
                    return Err(Error::Config("max_iter must be positive".into()));
                }
            }
            MethodSpec::Smooth { tol, max_iter, .. } => {
                self.neighborhood(schema)?;
                check_tol(*tol)?;
                if *max_iter == Some(0) {
                    return Err(Error::Config("max_iter must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn estimate(
        &self,
        sample: &FreqTable,
        ctx: &EstimationContext,
    ) -> Result<RiskEstimate<f64>> {
        match self {
            MethodSpec::Argus { strata, .. } => {
                let owned;
                let margins = match (ctx.margins, ctx.population) {
                    (Some(m), _) => m,
                    (None, Some(pop)) => {
                        owned = PostStrataSpec::from_population(pop, strata)?;
                        &owned
                    }
                    (None, None) if strata.is_empty() => {
                        owned = PostStrataSpec::single(ctx.population_size);
                        &owned
                    }
                    (None, None) => {
                        return Err(Error::Config(
                            "argus with strata needs population margins".into(),
                        ))
                    }
                };
                let expanded;
                let microdata = match ctx.microdata {
                    Some(md) => md,
                    None => {
                        expanded = Microdata::from_table(sample);
                        &expanded
                    }
                };
                let weights = compute_weights::<f64>(microdata, margins)?;
                argus_estimate(sample, &weights)
            }
            MethodSpec::Loglin {
                model,
                tol,
                max_iter,
                ..
            } => {
                let fit = match model {
                    LoglinModel::Independence => fit_independence::<f64>(sample)?,
                    LoglinModel::TwoWay => {
                        let mut opts = IpfOptions::default();
                        if let Some(t) = tol {
                            opts.tol = *t;
                        }
                        if let Some(k) = max_iter {
                            opts.max_iter = *k;
                        }
                        fit_two_way(sample, opts)?
                    }
                };
                loglin_estimate(&fit, ctx.population_size, ctx.pi)
            }
            MethodSpec::Smooth { tol, max_iter, .. } => {
                let spec = self
                    .neighborhood(sample.schema())?
                    .expect("smoothing method has a neighborhood");
                let mut opts = NewtonOptions::default();
                if let Some(t) = tol {
                    opts.tol = *t;
                }
                if let Some(k) = max_iter {
                    opts.max_iter = *k;
                }
                smooth_estimate(sample, &spec, ctx.pi, &opts)
            }
        }
    }
}

fn check_tol(tol: Option<f64>) -> Result<()> {
    match tol {
        Some(t) if !(t.is_finite() && t > 0.0) => {
            Err(Error::Config(format!("tol must be positive, got {t}")))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Report CSV path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// JSON sidecar path; defaults to the report path with a `.json` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pi: f64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Worker threads; unset uses the global pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub population: PopulationConfig,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_replicates() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Loads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.population.path);
        rebase(&mut cfg.output.path);
        rebase(&mut cfg.output.sidecar);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Config(format!(
                "pi must lie in (0, 1), got {}",
                self.pi
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        let p = &self.population;
        match (&p.path, p.law.is_some() || p.n_expected.is_some()) {
            (Some(_), true) => {
                return Err(Error::Config(
                    "population takes either a path or an inline spec, not both".into(),
                ))
            }
            (Some(_), false) => {}
            (None, _) => {
                p.spec(self.seed)?;
            }
        }
        let mut labels = BTreeMap::new();
        for m in &self.methods {
            if m.label() == TRUTH_LABEL || labels.insert(m.label(), ()).is_some() {
                return Err(Error::Config(format!(
                    "method label `{}` is reserved or repeated",
                    m.label()
                )));
            }
        }
        Ok(())
    }

    pub fn sidecar_path(&self) -> Option<PathBuf> {
        self.output
            .sidecar
            .clone()
            .or_else(|| self.output.path.as_ref().map(|p| p.with_extension("json")))
    }

    fn load_population(&self) -> Result<FreqTable> {
        match &self.population.path {
            Some(path) => {
                let schema = if self.population.attributes.is_empty() {
                    None
                } else {
                    Some(self.population.schema()?)
                };
                io::read_table_path(path, schema)
            }
            None => gen_population(&self.population.spec(self.seed)?),
        }
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        self.seed.wrapping_add(replicate as u64)
    }
}

/// One line of the report: the truth or one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub replicate: usize,
    pub method: String,
    pub tau1: f64,
    pub tau2: f64,
    /// Sample uniques `|U|`.
    pub unique_count: u64,
    pub diagnostics: String,
    /// Estimator failure, if any; `tau1` and `tau2` are NaN then.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateInfo {
    pub replicate: usize,
    pub seed: u64,
    pub sample_total: u64,
    pub sample_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    /// Replicates that produced an estimate.
    pub replicates: usize,
    pub failures: usize,
    pub tau1_mean: f64,
    pub tau1_sd: f64,
    pub tau2_mean: f64,
    pub tau2_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationInfo {
    pub total: u64,
    pub cells: u128,
    pub nonzero_cells: usize,
    pub sha256: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub replicates: Vec<ReplicateInfo>,
    pub summary: Vec<MethodSummary>,
    pub population: PopulationInfo,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Mean and sample standard deviation; sd is zero for fewer than two values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn summarize(rows: &[ReportRow], methods: &[String]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|method| {
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| &r.method == method).collect();
            let ok: Vec<&&ReportRow> = mine.iter().filter(|r| r.error.is_none()).collect();
            let (tau1_mean, tau1_sd) = mean_sd(&ok.iter().map(|r| r.tau1).collect::<Vec<_>>());
            let (tau2_mean, tau2_sd) = mean_sd(&ok.iter().map(|r| r.tau2).collect::<Vec<_>>());
            MethodSummary {
                method: method.clone(),
                replicates: ok.len(),
                failures: mine.len() - ok.len(),
                tau1_mean,
                tau1_sd,
                tau2_mean,
                tau2_sd,
            }
        })
        .collect()
}

fn run_replicate(
    cfg: &ExperimentConfig,
    population: &FreqTable,
    replicate: usize,
) -> Result<(ReplicateInfo, Vec<ReportRow>)> {
    let seed = cfg.replicate_seed(replicate);
    let sample = draw_sample(population, cfg.pi, seed)?;
    let truth = true_risk(&sample, population)?;
    let info = ReplicateInfo {
        replicate,
        seed,
        sample_total: sample.total(),
        sample_sha256: sha256_hex(&io::table_to_bytes(&sample)),
    };
    let mut rows = vec![ReportRow {
        replicate,
        method: TRUTH_LABEL.into(),
        tau1: truth.tau1 as f64,
        tau2: truth.tau2,
        unique_count: truth.unique_count,
        diagnostics: format!("population_uniques={}", truth.population_uniques),
        error: None,
    }];
    let ctx = EstimationContext {
        pi: cfg.pi,
        population_size: population.total() as f64,
        population: Some(population),
        margins: None,
        microdata: None,
    };
    for method in &cfg.methods {
        let row = match method.estimate(&sample, &ctx) {
            Ok(est) => ReportRow {
                replicate,
                method: method.label(),
                tau1: est.tau1,
                tau2: est.tau2,
                unique_count: est.unique_count() as u64,
                diagnostics: est.diagnostics.to_string(),
                error: None,
            },
            Err(e) => ReportRow {
                replicate,
                method: method.label(),
                tau1: f64::NAN,
                tau2: f64::NAN,
                unique_count: truth.unique_count,
                diagnostics: String::new(),
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok((info, rows))
}

/// Runs every replicate and assembles the report in replicate order. Nothing
/// is written to disk; see [`write_report`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let population = cfg.load_population()?;
    for m in &cfg.methods {
        m.validate(population.schema())?;
    }
    if population.total() == 0 {
        return Err(Error::Config("population is empty".into()));
    }

    let run = || -> Result<Vec<(ReplicateInfo, Vec<ReportRow>)>> {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| run_replicate(cfg, &population, r))
            .collect()
    };
    let results = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    let mut rows = Vec::new();
    let mut replicates = Vec::new();
    for (info, r) in results {
        replicates.push(info);
        rows.extend(r);
    }
    let mut labels = vec![TRUTH_LABEL.to_string()];
    labels.extend(cfg.methods.iter().map(MethodSpec::label));
    let summary = summarize(&rows, &labels);
    Ok(ExperimentReport {
        rows,
        replicates,
        summary,
        population: PopulationInfo {
            total: population.total(),
            cells: population.schema().cell_count(),
            nonzero_cells: population.support_size(),
            sha256: sha256_hex(&io::table_to_bytes(&population)),
            seed: cfg
                .population
                .path
                .is_none()
                .then(|| cfg.population.seed.unwrap_or(cfg.seed)),
        },
    })
}

/// Machine-readable float: 17 significant digits, `NaN` for failures.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

impl ExperimentReport {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let sha: BTreeMap<usize, &str> = self
            .replicates
            .iter()
            .map(|r| (r.replicate, r.sample_sha256.as_str()))
            .collect();
        wtr.write_record([
            "replicate",
            "method",
            "tau1",
            "tau2",
            "unique_count",
            "sample_sha256",
            "diagnostics",
            "error",
        ])
        .expect("in-memory write");
        for row in &self.rows {
            wtr.write_record([
                row.replicate.to_string(),
                row.method.clone(),
                fmt_float(row.tau1),
                fmt_float(row.tau2),
                row.unique_count.to_string(),
                sha.get(&row.replicate)
                    .copied()
                    .unwrap_or_default()
                    .to_string(),
                row.diagnostics.clone(),
                row.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        wtr.into_inner().expect("in-memory flush")
    }

    pub fn sidecar_json(&self, cfg: &ExperimentConfig) -> String {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            version: &'a str,
            config: &'a ExperimentConfig,
            population: &'a PopulationInfo,
            replicates: &'a [ReplicateInfo],
            summary: &'a [MethodSummary],
            diagnostics: Vec<BTreeMap<&'a str, String>>,
        }
        let diagnostics = self
            .rows
            .iter()
            .filter(|r| !r.diagnostics.is_empty() || r.error.is_some())
            .map(|r| {
                let mut m = BTreeMap::new();
                m.insert("replicate", r.replicate.to_string());
                m.insert("method", r.method.clone());
                if !r.diagnostics.is_empty() {
                    m.insert("diagnostics", r.diagnostics.clone());
                }
                if let Some(e) = &r.error {
                    m.insert("error", e.clone());
                }
                m
            })
            .collect();
        let sidecar = Sidecar {
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            population: &self.population,
            replicates: &self.replicates,
            summary: &self.summary,
            diagnostics,
        };
        serde_json::to_string_pretty(&sidecar).expect("report serializes")
    }

    /// Per-method means in the layout of a comparison table, one decimal.
    pub fn render_table(&self) -> String {
        let width = self
            .summary
            .iter()
            .map(|s| s.method.chars().count())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}\n",
            "method", "tau1", "sd", "tau2", "sd"
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.1}  {:>9.1}  {:>9.1}  {:>9.1}{}",
                s.method,
                s.tau1_mean,
                s.tau1_sd,
                s.tau2_mean,
                s.tau2_sd,
                if s.failures > 0 {
                    format!("  ({} failed)", s.failures)
                } else {
                    String::new()
                }
            );
        }
        out
    }

    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }
}

/// Writes the report CSV and its JSON sidecar, each atomically.
pub fn write_report(report: &ExperimentReport, cfg: &ExperimentConfig) -> Result<()> {
    let Some(path) = &cfg.output.path else {
        return Err(Error::Config("output.path is not set".into()));
    };
    io::write_atomic(path, &report.to_csv())?;
    if let Some(sidecar) = cfg.sidecar_path() {
        io::write_atomic(&sidecar, report.sidecar_json(cfg).as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 7
pi = 0.2
replicates = 3

[population]
n_expected = 800.0
attributes = [{ name = "age", levels = 8 }, { name = "income", levels = 6 }]
law = { kind = "smooth", location = [3.0, 2.0], scale = [2.0, 1.5], correlation = 0.3 }

[[methods]]
kind = "argus"

[[methods]]
kind = "loglin"
model = "independence"

[[methods]]
kind = "loglin"
model = "two-way"

[[methods]]
kind = "smooth"
c = 2
degree = 1
"#;

    #[test]
    fn config_parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.methods.len(), 4);
        assert_eq!(cfg.methods[3].label(), "smooth t=1 c=2");
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.methods.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.pi = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.methods.push(MethodSpec::argus());
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml(&format!("{SMALL}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn report_has_one_truth_row_per_replicate() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 3 * 5);
        for r in 0..3 {
            let truth = report
                .rows
                .iter()
                .filter(|row| row.replicate == r && row.method == TRUTH_LABEL)
                .count();
            assert_eq!(truth, 1);
        }
        assert_eq!(report.summary.len(), 5);
        for s in &report.summary {
            let vals: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.method == s.method && r.error.is_none())
                .map(|r| r.tau2)
                .collect();
            let (mean, sd) = mean_sd(&vals);
            assert!((mean - s.tau2_mean).abs() <= 1e-12 * mean.abs().max(1.0));
            assert!((sd - s.tau2_sd).abs() <= 1e-12 * sd.abs().max(1.0));
        }
    }

    #[test]
    fn estimator_failure_is_recorded_not_fatal() {
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.methods.push(MethodSpec::Smooth {
            fixed: vec!["missing".into()],
            c: 1,
            d: None,
            degree: 1,
            boundary: BoundaryMode::ZeroFill,
            tol: None,
            max_iter: None,
            label: Some("broken".into()),
        });
        let population = cfg.load_population().unwrap();
        let (_, rows) = run_replicate(&cfg, &population, 0).unwrap();
        assert_eq!(rows.len(), 6);
        let broken = rows.iter().find(|r| r.method == "broken").unwrap();
        assert!(broken.tau2.is_nan());
        assert!(broken.error.as_deref().unwrap().contains("missing"));
        assert!(rows
            .iter()
            .filter(|r| r.method != "broken")
            .all(|r| r.error.is_none()));
    }

    #[test]
    fn starved_ipf_is_flagged() {
        let text = SMALL
            .replace(
                r#"{ name = "income", levels = 6 }]"#,
                r#"{ name = "income", levels = 6 }, { name = "region", levels = 4 }]"#,
            )
            .replace(
                "location = [3.0, 2.0], scale = [2.0, 1.5]",
                "location = [3.0, 2.0, 1.0], scale = [2.0, 1.5, 1.0]",
            );
        let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
        cfg.methods = vec![MethodSpec::Loglin {
            model: LoglinModel::TwoWay,
            tol: Some(1e-14),
            max_iter: Some(1),
            label: None,
        }];
        let report = run_experiment(&cfg).unwrap();
        let fits: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.method == "loglin-two-way")
            .collect();
        assert_eq!(fits.len(), 3);
        assert!(fits
            .iter()
            .all(|r| r.diagnostics.contains("ipf_not_converged")));
    }

    #[test]
    fn replicate_is_replayable_alone() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let full = run_experiment(&cfg).unwrap();
        let population = cfg.load_population().unwrap();
        let (info, rows) = run_replicate(&cfg, &population, 2).unwrap();
        assert_eq!(info, full.replicates[2]);
        let from_full: Vec<_> = full
            .rows
            .iter()
            .filter(|r| r.replicate == 2)
            .cloned()
            .collect();
        assert_eq!(rows, from_full);
    }

    #[test]
    fn floats_print_with_seventeen_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(f64::NAN), "NaN");
        let x = 12.345678901234567_f64;
        assert_eq!(fmt_float(x).parse::<f64>().unwrap(), x);
    }
}

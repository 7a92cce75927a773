//! Config-driven experiments: one TOML file describes corpus, schedule,
//! sampler, guidance, metrics and a list of variants; running it writes
//! traces, reports and a manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{build_corpus, fresh_draws, CorpusSpec, TrainingCorpus};
use crate::denoiser::{DenoiserSpec, EmpiricalDenoiser};
use crate::error::{invalid, io_err, Error, Result};
use crate::guidance::{ActivationSchedule, GuidanceConfig, Term};
use crate::metrics::{
    kde_export, memorization_report, silverman_bandwidth, utility_report, write_kde_csv, KdeGrid,
    MemorizationReport, UtilityReport,
};
use crate::sampler::{run_batch, run_trajectory, Condition, SampleTrace, SamplerConfig, SamplerContext};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::similarity::{MetricConfig, MetricKind, SimilarityMetric, SimilarityVerdict};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Dissimilarity intensity of the main preset.
pub const MAIN_C3: f64 = 6.0;
/// Stricter threshold the strong preset is held to.
pub const STRONG_THRESHOLD: f64 = -1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Metric that gates guidance during sampling.
    #[serde(default = "MetricConfig::nl2")]
    pub guidance: MetricConfig,
    /// Metric applied to final samples.
    #[serde(default = "MetricConfig::nl2")]
    pub evaluation: MetricConfig,
    /// Thresholds reported in `pct_over`.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Restrict the evaluation search to the corpus watchlist.
    #[serde(default)]
    pub watchlist_only: bool,
}

fn default_thresholds() -> Vec<f64> {
    vec![-1.4, STRONG_THRESHOLD]
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            guidance: MetricConfig::nl2(),
            evaluation: MetricConfig::nl2(),
            thresholds: default_thresholds(),
            watchlist_only: false,
        }
    }
}

/// Held-out reference set for the MMD proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    #[serde(default = "default_ref_n")]
    pub n: usize,
    #[serde(default = "default_ref_seed")]
    pub seed: u64,
    /// Corpus-format table to use instead of fresh draws.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_ref_n() -> usize {
    1000
}
fn default_ref_seed() -> u64 {
    1_000_003
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self { n: default_ref_n(), seed: default_ref_seed(), path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeSpec {
    /// Silverman's rule when absent.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "default_kde_points")]
    pub points: usize,
}

fn default_kde_points() -> usize {
    512
}

impl Default for KdeSpec {
    fn default() -> Self {
        Self { bandwidth: None, points: default_kde_points() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    Csv,
    Binary,
    None,
}

fn default_trace_format() -> TraceFormat {
    TraceFormat::Csv
}

/// Partial guidance override applied on top of the base `[guidance]` table.
/// Top-level keys replace the base value wholesale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default)]
    pub guidance: toml::Table,
    /// Count memorized samples of this variant towards the CLI exit status.
    #[serde(default)]
    pub gate: bool,
    /// Threshold used for the gate; the evaluation threshold when absent.
    #[serde(default)]
    pub gate_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    /// Excluded from the config hash: it moves outputs, it does not change them.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_trace_format")]
    pub traces: TraceFormat,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub kde: KdeSpec,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_trajectories() -> usize {
    1000
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// A variant with its guidance fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub guidance: GuidanceConfig,
    pub gate: bool,
    pub gate_threshold: Option<f64>,
}

fn override_table(g: &GuidanceConfig, over: &[(&str, toml::Value)]) -> VariantSpec {
    let _ = g;
    VariantSpec {
        name: String::new(),
        guidance: over.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        gate: false,
        gate_threshold: None,
    }
}

fn variant(name: &str, over: &[(&str, toml::Value)], gate: bool, gate_threshold: Option<f64>) -> VariantSpec {
    VariantSpec {
        name: name.into(),
        gate,
        gate_threshold,
        ..override_table(&GuidanceConfig::default(), over)
    }
}

fn schedule_value(s: &ActivationSchedule) -> toml::Value {
    toml::Value::try_from(s).expect("schedule serializes")
}

impl ExperimentConfig {
    /// Base settings shared by the presets: default corpus, main guidance.
    pub fn base(name: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            seed: 0,
            trajectories: default_trajectories(),
            output_dir: PathBuf::from("runs").join(name),
            traces: TraceFormat::Csv,
            corpus: CorpusSpec::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserSpec::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig { c3: MAIN_C3, ..GuidanceConfig::default() },
            metrics: MetricsSection::default(),
            reference: ReferenceSpec::default(),
            kde: KdeSpec::default(),
            variants: vec![],
        }
    }

    /// Unguided baseline, main preset and strong preset on the default corpus.
    pub fn headline() -> Self {
        let mut c = Self::base("headline");
        c.variants = vec![
            variant("baseline", &[("enabled", false.into())], false, None),
            variant("amg-main", &[], true, None),
            variant("amg-strong", &[("c3", (2.0 * MAIN_C3).into())], true, Some(STRONG_THRESHOLD)),
        ];
        c
    }

    /// Main preset against single-term, schedule and activation ablations.
    pub fn ablations() -> Self {
        let mut c = Self::base("ablations");
        let terms = |ts: &[&str]| toml::Value::Array(ts.iter().map(|&t| t.into()).collect());
        c.variants = vec![
            variant("amg-main", &[], false, None),
            variant("no-sim", &[("terms", terms(&["spe", "dup"]))], false, None),
            variant(
                "constant-schedule",
                &[("schedule", schedule_value(&ActivationSchedule::Constant { level: -1.5 }))],
                false,
                None,
            ),
            variant("always-on", &[("schedule", schedule_value(&ActivationSchedule::Always))], false, None),
        ];
        c
    }

    /// Baseline and main preset on a corpus with no duplicated points.
    pub fn duplication_free() -> Self {
        let mut c = Self::base("duplication-free");
        c.corpus.per_token_duplicate = None;
        c.variants = vec![
            variant("baseline", &[("enabled", false.into())], false, None),
            variant("amg-main", &[], true, None),
        ];
        c
    }

    pub fn from_toml_str(s: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Parse { path: origin.into(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg = Self::from_toml_str(&s, &path.display().to_string())?;
        // Relative corpus/reference paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        if let crate::corpus::Generator::File { path: p } = &mut cfg.corpus.generator {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.reference.path {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical TOML form of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml_string().as_bytes()))
    }

    pub fn resolved_variants(&self) -> Result<Vec<Variant>> {
        if self.variants.is_empty() {
            return Ok(vec![Variant {
                name: "main".into(),
                guidance: self.guidance.clone(),
                gate: false,
                gate_threshold: None,
            }]);
        }
        let base = toml::Table::try_from(&self.guidance).map_err(|e| invalid("guidance", e.to_string()))?;
        self.variants
            .iter()
            .map(|v| {
                let mut t = base.clone();
                for (k, val) in &v.guidance {
                    t.insert(k.clone(), val.clone());
                }
                let guidance: GuidanceConfig = toml::Value::Table(t)
                    .try_into()
                    .map_err(|e: toml::de::Error| invalid(format!("variants.{}.guidance", v.name), e.to_string()))?;
                Ok(Variant {
                    name: v.name.clone(),
                    guidance,
                    gate: v.gate,
                    gate_threshold: v.gate_threshold,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("{} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.trajectories == 0 {
            return Err(invalid("trajectories", "must be positive"));
        }
        self.corpus.validate()?;
        self.schedule.build()?;
        if !(self.denoiser.bandwidth >= 0.0) {
            return Err(invalid("denoiser.bandwidth", "must be >= 0"));
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(['/', '\\']) || v.name.starts_with('.') {
                return Err(invalid("variants.name", format!("'{}' is not a usable directory name", v.name)));
            }
            if !names.insert(v.name.clone()) {
                return Err(invalid("variants.name", format!("duplicate '{}'", v.name)));
            }
        }
        let conditional = self.sampler.condition != Condition::Unconditional;
        for v in self.resolved_variants()? {
            v.guidance.validate(conditional).map_err(|e| invalid(format!("variants.{}", v.name), e.to_string()))?;
        }
        if self.kde.points < 2 {
            return Err(invalid("kde.points", "need at least 2"));
        }
        if self.metrics.thresholds.iter().any(|t| t.is_nan()) {
            return Err(invalid("metrics.thresholds", "NaN"));
        }
        Ok(())
    }
}

/// Corpus, schedule, metrics and reference set built from a config.
pub struct Workbench {
    pub corpus: TrainingCorpus,
    pub schedule: NoiseSchedule,
    pub guidance_metric: SimilarityMetric,
    pub eval_metric: SimilarityMetric,
    pub reference: Vec<Vec<f64>>,
}

impl Workbench {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = build_corpus(&cfg.corpus)?;
        let schedule = cfg.schedule.build()?;
        let guidance_metric = cfg.metrics.guidance.build(&corpus)?;
        let mut eval_metric = cfg.metrics.evaluation.build(&corpus)?;
        if cfg.metrics.watchlist_only {
            let w = corpus
                .watchlist()
                .ok_or_else(|| invalid("metrics.watchlist_only", "corpus has no watchlist"))?;
            eval_metric = eval_metric.restricted_to(w)?;
        }
        let reference = match &cfg.reference.path {
            Some(p) => TrainingCorpus::load(p)?.points().map(|p| p.to_vec()).collect(),
            None => fresh_draws(&cfg.corpus, cfg.reference.n, cfg.reference.seed)?,
        };
        if reference.first().map(|r| r.len()) != Some(corpus.dim()) {
            return Err(invalid("reference", "dimension differs from the corpus"));
        }
        Ok(Self { corpus, schedule, guidance_metric, eval_metric, reference })
    }

    pub fn denoiser(&self, cfg: &ExperimentConfig) -> Result<EmpiricalDenoiser<'_>> {
        EmpiricalDenoiser::new(&self.corpus, &self.schedule, cfg.denoiser.bandwidth)
    }

    pub fn context<'a>(&'a self, cfg: &'a ExperimentConfig, guidance: &'a GuidanceConfig) -> Result<SamplerContext<'a>> {
        Ok(SamplerContext {
            denoiser: self.denoiser(cfg)?,
            sampler: &cfg.sampler,
            guidance,
            guidance_metric: &self.guidance_metric,
            eval_metric: &self.eval_metric,
        })
    }
}

/// Everything computed for one variant.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub traces: Vec<SampleTrace>,
    pub memorization: MemorizationReport,
    pub utility: UtilityReport,
    pub kde: Vec<crate::metrics::KdePoint>,
    pub failed: usize,
}

impl VariantResult {
    pub fn verdicts(&self) -> Vec<SimilarityVerdict> {
        self.traces.iter().filter_map(|t| t.final_verdict.clone()).collect()
    }

    /// Mean timestep of first activation over trajectories that activated.
    pub fn mean_first_activation(&self) -> Option<f64> {
        let v: Vec<f64> = self.traces.iter().filter_map(|t| t.first_activation()).map(|t| t as f64).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn fraction_over(&self, threshold: f64) -> f64 {
        let v = self.verdicts();
        v.iter().filter(|x| x.sigma > threshold).count() as f64 / v.len().max(1) as f64
    }
}

/// Memorization, utility and KDE for a batch of finished traces.
pub fn evaluate(cfg: &ExperimentConfig, wb: &Workbench, traces: &[SampleTrace]) -> Result<(MemorizationReport, UtilityReport, Vec<crate::metrics::KdePoint>)> {
    let ok: Vec<&SampleTrace> = traces.iter().filter(|t| t.final_verdict.is_some()).collect();
    if ok.is_empty() {
        return Err(Error::Empty("successful trajectories"));
    }
    let verdicts: Vec<SimilarityVerdict> = ok.iter().map(|t| t.final_verdict.clone().unwrap()).collect();
    let mut thresholds = cfg.metrics.thresholds.clone();
    if !thresholds.contains(&wb.eval_metric.threshold) {
        thresholds.insert(0, wb.eval_metric.threshold);
    }
    let mem = memorization_report(&verdicts, &thresholds)?;
    let samples: Vec<Vec<f64>> = ok.iter().map(|t| t.final_x0.clone()).collect();
    let requested: Vec<Option<u32>> = ok.iter().map(|t| t.condition).collect();
    let util = utility_report(&samples, &wb.reference, &requested, &wb.corpus)?;
    let scores: Vec<f64> = verdicts.iter().map(|v| v.sigma).collect();
    let bw = match cfg.kde.bandwidth {
        Some(b) => b,
        None => silverman_bandwidth(&scores).unwrap_or(0.01),
    };
    let kde = kde_export(&scores, bw, &KdeGrid::around(&scores, bw, 5.0, cfg.kde.points))?;
    Ok((mem, util, kde))
}

/// Run every variant of `cfg` in memory.
pub fn run_variants(cfg: &ExperimentConfig) -> Result<(Workbench, Vec<VariantResult>)> {
    let wb = Workbench::new(cfg)?;
    let mut out = Vec::new();
    for v in cfg.resolved_variants()? {
        let ctx = wb.context(cfg, &v.guidance)?;
        let traces = run_batch(&ctx, cfg.trajectories, cfg.seed)?;
        let failed = traces.iter().filter(|t| !t.is_ok()).count();
        let (memorization, utility, kde) = evaluate(cfg, &wb, &traces)?;
        out.push(VariantResult { name: v.name, traces, memorization, utility, kde, failed });
    }
    Ok((wb, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub name: String,
    pub dir: String,
    pub samples: String,
    pub memorization: String,
    pub utility: String,
    pub kde: String,
    pub traces: Vec<String>,
    pub failed: usize,
    pub gate: bool,
    pub gate_threshold: f64,
    pub memorized_fraction: f64,
    pub top5pct: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub tool_version: String,
    pub metric: MetricKind,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantEntry>,
    /// Every file written, relative to the output directory.
    pub files: Vec<String>,
    pub wall_clock_secs: f64,
    /// Some trajectories failed; their reports cover only the rest.
    pub partial: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse { path: path.display().to_string(), reason: e.to_string() })
    }

    /// Gated variants with any sample above their gate threshold.
    pub fn memorization_detected(&self) -> Vec<&VariantEntry> {
        self.variants.iter().filter(|v| v.gate && v.memorized_fraction > 0.0).collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| io_err(p, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Write to a sibling temp file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Final samples table: `index,seed,condition,status,sigma,neighbor_id,memorized,x0..`.
pub fn write_samples_csv<W: std::io::Write>(w: W, traces: &[SampleTrace]) -> Result<()> {
    let d = traces.first().map(|t| t.final_x0.len()).unwrap_or(0);
    let mut wr = csv::Writer::from_writer(w);
    let map = |e: csv::Error| invalid("samples table", e.to_string());
    let mut h: Vec<String> = ["index", "seed", "condition", "status", "sigma", "neighbor_id", "memorized"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..d).map(|j| format!("x{j}")));
    wr.write_record(&h).map_err(map)?;
    for t in traces {
        let status = match &t.status {
            crate::sampler::TrajectoryStatus::Ok => "ok".to_string(),
            crate::sampler::TrajectoryStatus::Failed { step, .. } => format!("failed@{step}"),
        };
        let v = t.final_verdict.as_ref();
        let mut row = vec![
            t.index.to_string(),
            t.seed.to_string(),
            t.condition.map(|c| c.to_string()).unwrap_or_default(),
            status,
            v.map(|v| v.sigma.to_string()).unwrap_or_default(),
            v.map(|v| v.neighbor_id.to_string()).unwrap_or_default(),
            v.map(|v| (v.memorized as u8).to_string()).unwrap_or_default(),
        ];
        row.extend(t.final_x0.iter().map(|x| x.to_string()));
        wr.write_record(&row).map_err(map)?;
    }
    wr.flush().map_err(|e| invalid("samples table", e.to_string()))
}

/// One row of a samples table: `(index, seed, condition, ok, x0)`.
pub type SampleRow = (usize, u64, Option<u32>, bool, Vec<f64>);

pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleRow>> {
    let perr = |r: String| Error::Parse { path: path.display().to_string(), reason: r };
    let mut rd = csv::Reader::from_path(path).map_err(|e| perr(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let index = f(0).parse().map_err(|_| perr("bad index".into()))?;
        let seed = f(1).parse().map_err(|_| perr("bad seed".into()))?;
        let cond = if f(2).is_empty() { None } else { Some(f(2).parse().map_err(|_| perr("bad condition".into()))?) };
        let ok = f(3) == "ok";
        let x: std::result::Result<Vec<f64>, _> = (7..rec.len()).map(|j| f(j).parse::<f64>()).collect();
        out.push((index, seed, cond, ok, x.map_err(|_| perr("bad coordinate".into()))?));
    }
    Ok(out)
}

/// Run the experiment and persist its outputs under `cfg.output_dir`.
pub fn run_experiment_config(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let hash = cfg.hash();
    let (wb, results) = run_variants(cfg)?;
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    let mut put = |rel: String, bytes: &[u8]| -> Result<String> {
        write_file(&out.join(&rel), bytes)?;
        files.push(rel.clone());
        Ok(rel)
    };
    put("config.toml".into(), cfg.to_toml_string().as_bytes())?;
    put("corpus.csv".into(), wb.corpus.to_csv_string().as_bytes())?;
    let variants = cfg.resolved_variants()?;
    let mut entries = Vec::new();
    for (v, r) in variants.iter().zip(&results) {
        let dir = v.name.clone();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &r.traces)?;
        let samples = put(format!("{dir}/samples.csv"), &buf)?;
        let memorization = put(format!("{dir}/memorization.json"), &json(&r.memorization))?;
        let utility = put(format!("{dir}/utility.json"), &json(&r.utility))?;
        let mut kb = Vec::new();
        write_kde_csv(&mut kb, &r.kde)?;
        let kde = put(format!("{dir}/kde.csv"), &kb)?;
        let mut traces = Vec::new();
        for t in &r.traces {
            let (ext, bytes) = match cfg.traces {
                TraceFormat::None => continue,
                TraceFormat::Csv => {
                    let mut b = Vec::new();
                    crate::trace_io::write_csv(&mut b, &t.records)?;
                    ("csv", b)
                }
                TraceFormat::Binary => {
                    let mut b = Vec::new();
                    crate::trace_io::write_binary(&mut b, t.seed, &t.records).map_err(|e| io_err(out, e))?;
                    ("bin", b)
                }
            };
            traces.push(put(format!("{dir}/traces/{}", crate::trace_io::trace_file_name(t.seed, &hash, ext)), &bytes)?);
        }
        let gate_threshold = v.gate_threshold.unwrap_or(wb.eval_metric.threshold);
        entries.push(VariantEntry {
            name: v.name.clone(),
            dir,
            samples,
            memorization,
            utility,
            kde,
            traces,
            failed: r.failed,
            gate: v.gate,
            gate_threshold,
            memorized_fraction: r.fraction_over(gate_threshold),
            top5pct: r.memorization.top5pct,
            top1: r.memorization.top1,
        });
    }
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        config_hash: hash,
        tool_version: TOOL_VERSION.into(),
        metric: cfg.metrics.evaluation.kind,
        base_seed: cfg.seed,
        seeds: (0..cfg.trajectories as u64).map(|i| cfg.seed.wrapping_add(i)).collect(),
        partial: entries.iter().any(|e| e.failed > 0),
        variants: entries,
        files,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&out.join("manifest.json"), &json(&manifest))?;
    Ok(manifest)
}

pub fn run_experiment(config_path: &Path) -> Result<RunManifest> {
    run_experiment_config(&ExperimentConfig::load(config_path)?)
}

/// Recompute reports for every variant from its saved final samples.
pub fn recompute_reports(cfg: &ExperimentConfig) -> Result<Vec<(String, MemorizationReport, UtilityReport)>> {
    let wb = Workbench::new(cfg)?;
    let mut out = Vec::new();
    for v in cfg.resolved_variants()? {
        let dir = cfg.output_dir.join(&v.name);
        let rows = read_samples_csv(&dir.join("samples.csv"))?;
        let traces: Vec<SampleTrace> = rows
            .into_iter()
            .filter(|r| r.3)
            .map(|(index, seed, condition, _, x)| {
                let verdict = wb.eval_metric.evaluate(&x, &wb.corpus)?;
                Ok(SampleTrace {
                    index,
                    seed,
                    condition,
                    records: vec![],
                    final_x0: x,
                    final_verdict: Some(verdict),
                    status: crate::sampler::TrajectoryStatus::Ok,
                })
            })
            .collect::<Result<_>>()?;
        let (mem, util, kde) = evaluate(cfg, &wb, &traces)?;
        write_file(&dir.join("memorization.json"), &json(&mem))?;
        write_file(&dir.join("utility.json"), &json(&util))?;
        let mut kb = Vec::new();
        write_kde_csv(&mut kb, &kde)?;
        write_file(&dir.join("kde.csv"), &kb)?;
        out.push((v.name, mem, util));
    }
    Ok(out)
}

/// One trajectory per variant at `cfg.seed`, written as trace CSVs.
pub fn trace_one(cfg: &ExperimentConfig) -> Result<Vec<(String, SampleTrace, PathBuf)>> {
    let wb = Workbench::new(cfg)?;
    let hash = cfg.hash();
    let tokens: Vec<u32> = wb.corpus.token_counts().keys().copied().collect();
    let cond = crate::sampler::condition_for(cfg.sampler.condition, 0, &tokens);
    let mut out = Vec::new();
    for v in cfg.resolved_variants()? {
        let ctx = wb.context(cfg, &v.guidance)?;
        let tr = run_trajectory(&ctx, 0, cfg.seed, cond)?;
        let path = cfg.output_dir.join("trace").join(&v.name).join(crate::trace_io::trace_file_name(cfg.seed, &hash, "csv"));
        let mut b = Vec::new();
        crate::trace_io::write_csv(&mut b, &tr.records)?;
        write_file(&path, &b)?;
        out.push((v.name, tr, path));
    }
    Ok(out)
}

/// Side-by-side comparison of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub thresholds: Vec<f64>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub variant: String,
    pub kind: MetricKind,
    pub top5pct: f64,
    pub top1: f64,
    pub pct_over: Vec<Option<f64>>,
    pub mmd: f64,
    pub condition_fidelity: Option<f64>,
}

pub fn compare_runs(manifests: &[PathBuf]) -> Result<Comparison> {
    if manifests.is_empty() {
        return Err(Error::Empty("manifest list"));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for path in manifests {
        let m = RunManifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        for v in &m.variants {
            let read = |rel: &str| -> Result<String> {
                let p = root.join(rel);
                std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))
            };
            let perr = |e: serde_json::Error| Error::Parse { path: path.display().to_string(), reason: e.to_string() };
            let mem: MemorizationReport = serde_json::from_str(&read(&v.memorization)?).map_err(perr)?;
            let util: UtilityReport = serde_json::from_str(&read(&v.utility)?).map_err(perr)?;
            reports.push((m.name.clone(), v.name.clone(), mem, util));
        }
    }
    let kind = reports[0].2.kind;
    if reports.iter().any(|r| r.2.kind != kind) {
        return Err(Error::MixedMetrics);
    }
    let mut thresholds: Vec<f64> = Vec::new();
    for r in &reports {
        for p in &r.2.pct_over {
            if !thresholds.contains(&p.threshold) {
                thresholds.push(p.threshold);
            }
        }
    }
    for (run, variant, mem, util) in reports {
        rows.push(ComparisonRow {
            run,
            variant,
            kind,
            top5pct: mem.top5pct,
            top1: mem.top1,
            pct_over: thresholds.iter().map(|&t| mem.fraction_over(t)).collect(),
            mmd: util.mmd,
            condition_fidelity: util.condition_fidelity,
        });
    }
    Ok(Comparison { thresholds, rows })
}

impl Comparison {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["run", "variant", "metric", "top5pct", "top1"].iter().map(|s| s.to_string()).collect();
        h.extend(self.thresholds.iter().map(|t| format!("pct_over_{t}")));
        h.push("mmd".into());
        h.push("condition_fidelity".into());
        h
    }

    fn cells(&self, r: &ComparisonRow, full: bool) -> Vec<String> {
        let f = |v: f64| if full { v.to_string() } else { format!("{v:.4}") };
        let p = |v: f64| if full { v.to_string() } else { format!("{:.2}", 100.0 * v) };
        let mut c = vec![r.run.clone(), r.variant.clone(), r.kind.to_string(), f(r.top5pct), f(r.top1)];
        c.extend(r.pct_over.iter().map(|o| o.map(p).unwrap_or_default()));
        c.push(f(r.mmd));
        c.push(r.condition_fidelity.map(f).unwrap_or_default());
        c
    }

    pub fn to_csv(&self) -> String {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(self.header()).expect("memory write");
        for r in &self.rows {
            wr.write_record(self.cells(r, true)).expect("memory write");
        }
        String::from_utf8(wr.into_inner().expect("flush")).expect("utf-8")
    }

    /// Aligned text table; `pct_over` columns in percent.
    pub fn to_text(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.rows.iter().map(|r| self.cells(r, false)));
        let widths: Vec<usize> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for row in table {
            let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

/// Which guidance terms are active for a resolved variant, for display.
pub fn describe(v: &Variant) -> String {
    if !v.guidance.enabled {
        return "unguided".into();
    }
    let terms: Vec<&str> = v
        .guidance
        .terms
        .iter()
        .map(|t| match t {
            Term::Spe => "spe",
            Term::Dup => "dup",
            Term::Sim => "sim",
        })
        .collect();
    let sched = match v.guidance.schedule {
        ActivationSchedule::Parabolic(_) => "parabolic",
        ActivationSchedule::Constant { .. } => "constant",
        ActivationSchedule::Always => "always",
    };
    format!("terms={} c3={} schedule={}", terms.join("+"), v.guidance.c3, sched)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [ExperimentConfig::headline(), ExperimentConfig::ablations(), ExperimentConfig::duplication_free()] {
            c.validate().unwrap();
            let s = c.to_toml_string();
            let back = ExperimentConfig::from_toml_str(&s, "mem").unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn hash_covers_fields_but_not_output_dir() {
        let a = ExperimentConfig::headline();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.denoiser.bandwidth = 0.81;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.metrics.evaluation.k = 49;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn variant_overrides_resolve() {
        let v = ExperimentConfig::ablations().resolved_variants().unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v[0].guidance.c3, MAIN_C3);
        assert!(!v[1].guidance.terms.contains(&Term::Sim));
        assert_eq!(v[2].guidance.schedule, ActivationSchedule::Constant { level: -1.5 });
        assert_eq!(v[3].guidance.schedule, ActivationSchedule::Always);
        let h = ExperimentConfig::headline().resolved_variants().unwrap();
        assert!(!h[0].guidance.enabled);
        assert_eq!(h[2].guidance.c3, 2.0 * MAIN_C3);
    }

    #[test]
    fn field_level_errors() {
        let bad = "schema_version = 1\n[guidance]\nc3 = -2.0\n";
        let e = ExperimentConfig::from_toml_str(bad, "mem").unwrap_err();
        assert!(e.to_string().contains("c3"), "{e}");
        let bad = "schema_version = 2\n";
        assert!(ExperimentConfig::from_toml_str(bad, "mem").unwrap_err().to_string().contains("schema_version"));
        let bad = "schema_version = 1\nbogus = 3\n";
        assert!(matches!(ExperimentConfig::from_toml_str(bad, "mem"), Err(Error::Parse { .. })));
        let bad = "schema_version = 1\n[[variants]]\nname = \"a\"\n[[variants]]\nname = \"a\"\n";
        assert!(ExperimentConfig::from_toml_str(bad, "mem").is_err());
        let bad = "schema_version = 1\n[[variants]]\nname = \"a\"\nguidance = { c4 = 1.0 }\n";
        assert!(ExperimentConfig::from_toml_str(bad, "mem").unwrap_err().to_string().contains("variants.a"));
    }

    #[test]
    fn comparison_text_and_csv() {
        let cmp = Comparison {
            thresholds: vec![-1.4],
            rows: vec![ComparisonRow {
                run: "r".into(),
                variant: "v".into(),
                kind: MetricKind::Nl2,
                top5pct: -1.7,
                top1: -1.6,
                pct_over: vec![Some(0.0)],
                mmd: 0.01,
                condition_fidelity: None,
            }],
        };
        assert!(cmp.to_csv().starts_with("run,variant,metric,top5pct,top1,pct_over_-1.4,mmd,condition_fidelity\n"));
        assert!(cmp.to_text().contains("0.00"));
    }
}

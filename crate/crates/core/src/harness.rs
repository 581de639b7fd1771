//! Batch runner: manifests, run configuration, the three pipeline arms,
//! persisted run records and the report tables built from them.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendConfig, BackendError};
use crate::extractor::{
    caption_to_svi, load_fixture, sidecar_path, ExtractError, Extractor, ExtractorConfig, ExtractorMode,
    ImageRef,
};
use crate::metrics::{
    AutoScorer, CreativityWeights, MetricError, MetricScorer, MetricScores, ReferenceCorpus, StyleLexicon,
};
use crate::prompt::{compile, simple_concat, PromptConfig, PromptError, TaskType, UserInstruction};
use crate::svi::{downgrade, GranularityLevel, SviDocument, SviError};

pub const DEFAULT_SYSTEM: &str = "VisuCraft";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid entry {id:?}: {message}")]
    Entry { id: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad run record {}: {message}", path.display())]
    Record { path: PathBuf, message: String },
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Svi(#[from] SviError),
}

impl HarnessError {
    /// Errors that stem from configuration or inputs rather than from
    /// running an entry.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Manifest { .. } | Self::Entry { .. } | Self::Io { .. } | Self::Record { .. }
        ) || matches!(self, Self::Backend(BackendError::Config(_)) | Self::Extract(ExtractError::Config(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PipelineArm {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "wo-extractor")]
    WithoutExtractor,
    #[serde(rename = "wo-promptgen")]
    WithoutPromptgen,
}

impl PipelineArm {
    pub const ALL: [PipelineArm; 3] = [Self::Full, Self::WithoutExtractor, Self::WithoutPromptgen];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WithoutExtractor => "wo-extractor",
            Self::WithoutPromptgen => "wo-promptgen",
        }
    }
}

impl fmt::Display for PipelineArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineArm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PipelineArm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown arm `{s}` (expected full, wo-extractor or wo-promptgen)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub image: ImageRef,
    pub instruction: String,
    pub caption: Option<String>,
    pub task_override: Option<TaskType>,
    pub scenario_label: String,
}

impl ManifestEntry {
    pub fn id(&self) -> &str {
        &self.image.id
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |message: &str| {
            Err(HarnessError::Entry {
                id: self.image.id.clone(),
                message: message.into(),
            })
        };
        if self.image.id.trim().is_empty() {
            return fail("id must be non-empty");
        }
        if self.image.id.contains(['/', '\\']) || self.image.id.starts_with('.') {
            return fail("id must be usable as a file name");
        }
        if self.instruction.trim().is_empty() {
            return fail("instruction must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    image_uri: String,
    #[serde(default)]
    caption: Option<String>,
    instruction: String,
    scenario: String,
    #[serde(default)]
    task: Option<String>,
    #[serde(default)]
    checksum: Option<String>,
}

/// Parses line-delimited manifest records. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, HarnessError> {
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| HarnessError::Manifest { line: line_no, message };
        let raw: ManifestLine = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let task_override = raw.task.as_deref().map(TaskType::from_str).transpose().map_err(fail)?;
        let entry = ManifestEntry {
            image: ImageRef {
                id: raw.id,
                uri: raw.image_uri,
                checksum: raw.checksum,
            },
            instruction: raw.instruction,
            caption: raw.caption,
            task_override,
            scenario_label: raw.scenario,
        };
        entry.validate().map_err(|e| fail(e.to_string()))?;
        if !ids.insert(entry.image.id.clone()) {
            return Err(fail(format!("duplicate id {:?}", entry.image.id)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Unweighted arithmetic mean over entries.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub creativity: CreativityWeights,
    pub corpus_dir: Option<PathBuf>,
    pub style_lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arm: PipelineArm,
    pub granularity: GranularityLevel,
    pub seed: u64,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    /// Where grounding reference sidecars live; defaults to the fixture dir.
    pub reference_dir: Option<PathBuf>,
    pub aggregation: Aggregation,
    pub extractor: ExtractorConfig,
    pub backend: BackendConfig,
    pub prompt: PromptConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arm: PipelineArm::Full,
            granularity: GranularityLevel::L3,
            seed: 0,
            parallelism: 4,
            output_dir: PathBuf::from("runs"),
            reference_dir: None,
            aggregation: Aggregation::Mean,
            extractor: ExtractorConfig::default(),
            backend: BackendConfig::default(),
            prompt: PromptConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML run config. Relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            self.reference_dir.as_mut(),
            self.extractor.fixture_dir.as_mut(),
            self.backend.cache_dir.as_mut(),
            self.metrics.corpus_dir.as_mut(),
            self.metrics.style_lexicon.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.parallelism == 0 {
            return Err(HarnessError::Config("parallelism must be positive".into()));
        }
        self.backend.validate()?;
        self.prompt.weights.validate()?;
        self.metrics.creativity.validate()?;
        if self.arm != PipelineArm::WithoutExtractor {
            if self.extractor.mode == ExtractorMode::CaptionFallback {
                return Err(HarnessError::Config(format!(
                    "arm {} needs a remote or fixture extractor",
                    self.arm
                )));
            }
            self.extractor.validate()?;
        }
        Ok(())
    }

    /// The configuration one (arm, level) cell actually runs with.
    pub fn for_cell(&self, arm: PipelineArm, level: GranularityLevel) -> RunConfig {
        let mut cfg = self.clone();
        cfg.arm = arm;
        cfg.granularity = level;
        cfg.backend.seed = cfg.seed;
        if cfg.reference_dir.is_none() {
            cfg.reference_dir = cfg.extractor.fixture_dir.clone();
        }
        if arm == PipelineArm::WithoutExtractor {
            cfg.extractor.mode = ExtractorMode::CaptionFallback;
        }
        cfg
    }

    /// SHA-256 of the configuration's key-sorted compact JSON.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("run configs serialize");
        let text = serde_json::to_string(&sorted_keys(value)).expect("json values serialize");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn sorted_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sorted_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted_keys).collect()),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub extract_ms: u64,
    pub generate_ms: u64,
    pub total_ms: u64,
}

/// Outcome of one (entry, arm, level) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub entry_id: String,
    pub scenario: String,
    #[serde(default = "default_system")]
    pub system: String,
    pub arm: PipelineArm,
    pub level: GranularityLevel,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<MetricScores>,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub config_fingerprint: String,
}

fn default_system() -> String {
    DEFAULT_SYSTEM.to_string()
}

impl RunRecord {
    /// A record for externally supplied scores, e.g. a baseline system.
    pub fn prescored(system: &str, scenario: &str, arm: PipelineArm, level: GranularityLevel, scores: MetricScores) -> Self {
        Self {
            entry_id: format!("{system}-{scenario}"),
            scenario: scenario.to_string(),
            system: system.to_string(),
            arm,
            level,
            status: RunStatus::Ok,
            error: None,
            task: None,
            prompt_hash: None,
            text: None,
            scores: Some(scores),
            timing: Timing::default(),
            config_fingerprint: String::new(),
        }
    }

    pub fn file_name(&self) -> String {
        record_file_name(&self.entry_id, self.arm, self.level)
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok && self.scores.is_some()
    }
}

/// `<entry-id>.<arm>.<level>.run.json`
pub fn record_file_name(entry_id: &str, arm: PipelineArm, level: GranularityLevel) -> String {
    format!("{entry_id}.{arm}.{level}.run.json")
}

/// Writes `contents` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn save_record(record: &RunRecord, dir: &Path) -> Result<PathBuf, HarnessError> {
    let path = dir.join(record.file_name());
    let body = serde_json::to_string_pretty(record).expect("run records serialize");
    write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

/// Loads every `*.run.json` in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".run.json")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Record {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Everything an entry run needs, built once per configuration.
pub struct Pipeline {
    cfg: RunConfig,
    extractor: Option<Extractor>,
    backend: Backend,
    scorer: Box<dyn MetricScorer>,
    lexicon: StyleLexicon,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        let lexicon = match &cfg.metrics.style_lexicon {
            Some(path) => StyleLexicon::load(path)?,
            None => StyleLexicon::bundled().clone(),
        };
        let corpus = match &cfg.metrics.corpus_dir {
            Some(dir) => ReferenceCorpus::load_dir(dir)?,
            None => ReferenceCorpus::default(),
        };
        let scorer = AutoScorer {
            corpus,
            lexicon: lexicon.clone(),
            weights: cfg.metrics.creativity,
        };
        Self::with_scorer(cfg, Box::new(scorer), lexicon)
    }

    /// Builds a pipeline around a custom scorer.
    pub fn with_scorer(cfg: RunConfig, scorer: Box<dyn MetricScorer>, lexicon: StyleLexicon) -> Result<Self, HarnessError> {
        cfg.metrics.creativity.validate()?;
        cfg.prompt.weights.validate()?;
        let extractor = match cfg.extractor.mode {
            ExtractorMode::CaptionFallback => None,
            _ => Some(Extractor::new(cfg.extractor.clone())?),
        };
        let mut backend_cfg = cfg.backend.clone();
        backend_cfg.seed = cfg.seed;
        let backend = Backend::new(backend_cfg)?;
        Ok(Self {
            cfg,
            extractor,
            backend,
            scorer,
            lexicon,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Runs one cell. Failures are captured in the record, never dropped.
    pub fn run(&self, entry: &ManifestEntry, arm: PipelineArm, level: GranularityLevel) -> RunRecord {
        let fingerprint = self.cfg.for_cell(arm, level).fingerprint();
        let mut record = RunRecord {
            entry_id: entry.image.id.clone(),
            scenario: entry.scenario_label.clone(),
            system: DEFAULT_SYSTEM.to_string(),
            arm,
            level,
            status: RunStatus::Ok,
            error: None,
            task: None,
            prompt_hash: None,
            text: None,
            scores: None,
            timing: Timing::default(),
            config_fingerprint: fingerprint,
        };
        if let Err(e) = self.run_into(entry, arm, level, &mut record) {
            record.status = RunStatus::Failed;
            record.error = Some(e.to_string());
        }
        record
    }

    fn run_into(
        &self,
        entry: &ManifestEntry,
        arm: PipelineArm,
        level: GranularityLevel,
        record: &mut RunRecord,
    ) -> Result<(), HarnessError> {
        let started = Instant::now();
        entry.validate()?;
        let mut instr = UserInstruction::parse(&entry.instruction, &self.lexicon)?;
        if let Some(task) = entry.task_override {
            instr = instr.with_task(task);
        }
        record.task = Some(instr.task);

        let (prompt_doc, extracted) = match arm {
            PipelineArm::WithoutExtractor => {
                let caption = entry.caption.as_deref().ok_or_else(|| HarnessError::Entry {
                    id: entry.image.id.clone(),
                    message: "the wo-extractor arm needs a caption".into(),
                })?;
                let doc = caption_to_svi(caption)?;
                let capped = level.min(doc.level);
                (downgrade(&doc, capped)?, doc)
            }
            _ => {
                let extractor = self.extractor.as_ref().ok_or_else(|| {
                    HarnessError::Config(format!("arm {arm} needs a remote or fixture extractor"))
                })?;
                let full = extractor.extract_at(&entry.image, GranularityLevel::L3)?;
                (downgrade(&full, level)?, full)
            }
        };
        let reference = self.reference_doc(&entry.image, extracted)?;
        record.timing.extract_ms = started.elapsed().as_millis() as u64;

        let prompt = match arm {
            PipelineArm::WithoutPromptgen => simple_concat(&prompt_doc, &instr)?,
            _ => compile(&prompt_doc, &instr, &self.cfg.prompt)?,
        };
        record.prompt_hash = Some(prompt.prompt_hash.clone());

        let gen_started = Instant::now();
        let generation = self.backend.generate(&prompt)?;
        record.timing.generate_ms = gen_started.elapsed().as_millis() as u64;

        let scores = self.scorer.score(&generation.text, &reference, &instr.constraints)?;
        record.text = Some(generation.text);
        record.scores = Some(scores);
        record.timing.total_ms = started.elapsed().as_millis() as u64;
        Ok(())
    }

    /// Grounding is always measured against the fullest description of the
    /// image available: the reference sidecar if present, otherwise what
    /// this arm extracted.
    fn reference_doc(&self, image: &ImageRef, extracted: SviDocument) -> Result<SviDocument, HarnessError> {
        let dir = self.cfg.reference_dir.as_ref().or(self.cfg.extractor.fixture_dir.as_ref());
        match dir.map(|d| sidecar_path(d, &image.id)) {
            Some(path) if path.is_file() => Ok(load_fixture(path)?),
            _ => Ok(extracted),
        }
    }
}

/// Runs `entry` under `cfg.arm` and `cfg.granularity` and persists the
/// record to `cfg.output_dir`.
pub fn run_pipeline(entry: &ManifestEntry, cfg: &RunConfig) -> Result<RunRecord, HarnessError> {
    entry.validate()?;
    cfg.validate()?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let record = pipeline.run(entry, cfg.arm, cfg.granularity);
    save_record(&record, &cfg.output_dir)?;
    Ok(record)
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub records: Vec<RunRecord>,
    pub reports: Vec<ReportTable>,
    pub report_paths: Vec<PathBuf>,
}

impl SuiteOutcome {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

/// Runs every entry under every (arm, level) pair, persists the records,
/// then writes all three report shapes into `cfg.output_dir`.
pub fn run_suite(
    entries: &[ManifestEntry],
    cfg: &RunConfig,
    arms: &[PipelineArm],
    levels: &[GranularityLevel],
) -> Result<SuiteOutcome, HarnessError> {
    if arms.is_empty() || levels.is_empty() {
        return Err(HarnessError::Config("at least one arm and one level are required".into()));
    }
    for arm in arms {
        RunConfig { arm: *arm, ..cfg.clone() }.validate()?;
    }
    for entry in entries {
        entry.validate()?;
    }
    let pipeline = Pipeline::new(cfg.clone())?;

    let mut cells = Vec::new();
    for entry in entries {
        for arm in arms {
            for level in levels {
                cells.push((entry, *arm, *level));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let results: Vec<Result<RunRecord, HarnessError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(entry, arm, level)| {
                let record = pipeline.run(entry, *arm, *level);
                save_record(&record, &cfg.output_dir)?;
                Ok(record)
            })
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut reports = Vec::new();
    let mut report_paths = Vec::new();
    for shape in ReportShape::ALL {
        let table = emit_report(&records, shape);
        report_paths.extend(table.write_to(&cfg.output_dir)?);
        reports.push(table);
    }
    Ok(SuiteOutcome {
        records,
        reports,
        report_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportShape {
    /// Per system and scenario.
    Table2,
    /// Per ablation arm.
    Table3,
    /// Per granularity level.
    Table4,
}

impl ReportShape {
    pub const ALL: [ReportShape; 3] = [Self::Table2, Self::Table3, Self::Table4];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Table2 => "table2",
            Self::Table3 => "table3",
            Self::Table4 => "table4",
        }
    }

    fn header(self) -> &'static str {
        match self {
            Self::Table2 => "Model - Scenario",
            Self::Table3 => "Model Configuration",
            Self::Table4 => "Output Granularity Level",
        }
    }
}

impl FromStr for ReportShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReportShape::ALL
            .into_iter()
            .find(|shape| shape.as_str() == s)
            .ok_or_else(|| format!("unknown report shape `{s}` (expected table2, table3 or table4)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub vg: f64,
    pub c: f64,
    pub ia: f64,
    pub mean: f64,
    pub n: usize,
}

impl ReportRow {
    /// Averages scores over `records`; the mean column is recomputed from
    /// the averaged components.
    fn aggregate(label: String, records: &[&RunRecord]) -> Self {
        let n = records.len();
        let avg = |f: fn(&MetricScores) -> f64| {
            records.iter().filter_map(|r| r.scores.as_ref()).map(f).sum::<f64>() / n as f64
        };
        let (vg, c, ia) = (avg(|s| s.vg), avg(|s| s.c), avg(|s| s.ia));
        let scores = MetricScores::new(vg, c, ia);
        Self {
            label,
            vg,
            c,
            ia,
            mean: scores.mean,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub shape: ReportShape,
    pub scorer: String,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn render_text(&self) -> String {
        let header = self.shape.header();
        let width = self
            .rows
            .iter()
            .map(|r| r.label.chars().count())
            .chain([header.chars().count()])
            .max()
            .unwrap_or(0);
        let pad = |s: &str| format!("{s}{}", " ".repeat(width - s.chars().count()));
        let mut out = format!("# {} ({} scores)\n", self.shape.as_str(), self.scorer);
        out.push_str(&format!("{}  {:>5}  {:>5}  {:>5}  {:>5}\n", pad(header), "VG.", "C.", "IA.", "Mean"));
        for r in &self.rows {
            out.push_str(&format!(
                "{}  {:.3}  {:.3}  {:.3}  {:.3}\n",
                pad(&r.label),
                r.vg,
                r.c,
                r.ia,
                r.mean
            ));
        }
        out
    }

    /// Rounded display columns followed by full-precision values.
    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "vg", "c", "ia", "mean", "n", "vg_full", "c_full", "ia_full", "mean_full"])
            .expect("in-memory csv");
        for r in &self.rows {
            let rounded = |x: f64| format!("{x:.3}");
            let full = |x: f64| format!("{x:?}");
            w.write_record([
                r.label.clone(),
                rounded(r.vg),
                rounded(r.c),
                rounded(r.ia),
                rounded(r.mean),
                r.n.to_string(),
                full(r.vg),
                full(r.c),
                full(r.ia),
                full(r.mean),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Writes `report.<shape>.{txt,csv,json}` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let mut paths = Vec::new();
        for (ext, body) in [
            ("txt", self.render_text()),
            ("csv", self.render_csv()),
            ("json", self.render_json()),
        ] {
            let path = dir.join(format!("report.{}.{ext}", self.shape.as_str()));
            write_atomic(&path, body.as_bytes())?;
            paths.push(path);
        }
        Ok(paths)
    }
}

type Rank = (usize, String);

fn system_rank(system: &str) -> Rank {
    let rank = match system {
        "LVLM-Base" => 0,
        "LVLM-Enhanced" => 1,
        DEFAULT_SYSTEM => 2,
        _ => 3,
    };
    (rank, system.to_string())
}

fn scenario_rank(scenario: &str) -> Rank {
    let rank = match scenario {
        "StoryGen" => 0,
        "Poetry" => 1,
        "AdCopyGen" => 2,
        _ => 3,
    };
    (rank, scenario.to_string())
}

fn arm_label(arm: PipelineArm) -> &'static str {
    match arm {
        PipelineArm::WithoutExtractor => "VisuCraft - w/o E (Generic Visual Features)",
        PipelineArm::WithoutPromptgen => "VisuCraft - w/o G (Simple Prompting)",
        PipelineArm::Full => "VisuCraft (Full)",
    }
}

fn level_label(level: GranularityLevel) -> &'static str {
    match level {
        GranularityLevel::L1 => "Level 1: Basic Object Detection",
        GranularityLevel::L2 => "Level 2: Objects + Attributes",
        GranularityLevel::L3 => "Level 3: Full Structured Information",
    }
}

/// Aggregates successful records into one of the three table layouts.
///
/// * `table2`: full-arm records at the highest level present, one row per
///   (system, scenario).
/// * `table3`: the default system's records at the highest level present,
///   one row per arm in the order w/o E, w/o G, Full.
/// * `table4`: the default system's full-arm records, one row per level.
pub fn emit_report(records: &[RunRecord], shape: ReportShape) -> ReportTable {
    // Sorted so float sums do not depend on the order records arrive in.
    let mut ok: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok()).collect();
    ok.sort_by(|a, b| {
        (&a.system, &a.entry_id, a.arm.as_str(), a.level).cmp(&(&b.system, &b.entry_id, b.arm.as_str(), b.level))
    });
    let top_level = |rs: &[&RunRecord]| rs.iter().map(|r| r.level).max();

    let rows = match shape {
        ReportShape::Table2 => {
            let full: Vec<&RunRecord> = ok.iter().copied().filter(|r| r.arm == PipelineArm::Full).collect();
            let level = top_level(&full);
            let mut groups: BTreeMap<(Rank, Rank), Vec<&RunRecord>> = BTreeMap::new();
            for r in full.into_iter().filter(|r| Some(r.level) == level) {
                groups
                    .entry((system_rank(&r.system), scenario_rank(&r.scenario)))
                    .or_default()
                    .push(r);
            }
            groups
                .into_iter()
                .map(|(((_, system), (_, scenario)), rs)| ReportRow::aggregate(format!("{system} – {scenario}"), &rs))
                .collect()
        }
        ReportShape::Table3 => {
            let ours: Vec<&RunRecord> = ok.iter().copied().filter(|r| r.system == DEFAULT_SYSTEM).collect();
            let level = top_level(&ours);
            [PipelineArm::WithoutExtractor, PipelineArm::WithoutPromptgen, PipelineArm::Full]
                .into_iter()
                .filter_map(|arm| {
                    let rs: Vec<&RunRecord> = ours
                        .iter()
                        .copied()
                        .filter(|r| r.arm == arm && Some(r.level) == level)
                        .collect();
                    (!rs.is_empty()).then(|| ReportRow::aggregate(arm_label(arm).to_string(), &rs))
                })
                .collect()
        }
        ReportShape::Table4 => GranularityLevel::ALL
            .into_iter()
            .filter_map(|level| {
                let rs: Vec<&RunRecord> = ok
                    .iter()
                    .copied()
                    .filter(|r| r.system == DEFAULT_SYSTEM && r.arm == PipelineArm::Full && r.level == level)
                    .collect();
                (!rs.is_empty()).then(|| ReportRow::aggregate(level_label(level).to_string(), &rs))
            })
            .collect(),
    };
    ReportTable {
        shape,
        scorer: "VisuGen-auto".into(),
        rows,
    }
}

/// Looks a shape up by name before emitting.
pub fn emit_report_named(records: &[RunRecord], shape: &str) -> Result<ReportTable, HarnessError> {
    let shape = ReportShape::from_str(shape).map_err(HarnessError::Config)?;
    Ok(emit_report(records, shape))
}

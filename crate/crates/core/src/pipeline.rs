//! Stage orchestration: configuration, artifact layout, provenance and timing.
//!
//! Every stage reads its inputs from the output directory and writes its
//! artifacts back there, so stages can run one at a time or all together.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ann::{self, AnnConfig, AnnModel, TrainOptions, TrainReport};
use crate::calibrate::{diagnostics, hmc_sample, Diagnostics, HmcConfig, LogPosterior, Posterior, SurrogateLikelihood};
use crate::doe::{run_design, split, Design, PriorSpec};
use crate::imis::{imis_run_detailed, ImisConfig, SimulatorLikelihood};
use crate::nathist::{generate_targets, LifeTable, ModelOutputs, NatHistParams, TargetGenConfig, TargetSet};
use crate::report::{self, ComparisonReport};
use crate::rng::{derive_seed, tag};
use crate::{Error, Result};

pub const TARGETS_CSV: &str = "targets.csv";
pub const TRUTH_CSV: &str = "truth.csv";
pub const DESIGN_CSV: &str = "design.csv";
pub const DESIGN_JSON: &str = "design.json";
pub const MODEL_JSON: &str = "model.json";
pub const TRAINING_JSON: &str = "training.json";
pub const SCATTER_CSV: &str = "validation_scatter.csv";
pub const BAYCANN_CSV: &str = "posterior_baycann.csv";
pub const BAYCANN_JSON: &str = "posterior_baycann.json";
pub const IMIS_CSV: &str = "posterior_imis.csv";
pub const IMIS_JSON: &str = "posterior_imis.json";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const DENSITY_CSV: &str = "density_grid.csv";
pub const BAND_CSV: &str = "predictive_band.csv";
pub const TIMINGS_JSON: &str = "timings.json";
pub const RESOLVED_TOML: &str = "config.resolved.toml";
pub const LOCK_FILE: &str = ".baycann.lock";

/// Size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!("unknown scale {other:?}; expected desk or full"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoeConfig {
    pub size: usize,
    pub train_fraction: f64,
}

impl Default for DoeConfig {
    fn default() -> Self {
        DoeConfig {
            size: 10_000,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImisStage {
    #[serde(flatten)]
    pub config: ImisConfig,
    /// Give IMIS as many simulator evaluations as the DoE size plus the
    /// surrogate log-density evaluations of the calibrate stage.
    pub budget_matched: bool,
}

impl Default for ImisStage {
    fn default() -> Self {
        ImisStage {
            config: ImisConfig::default(),
            budget_matched: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage seed is derived from it.
    pub seed: u64,
    /// Life-table CSV; the bundled table when absent.
    pub life_table: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub scale: Option<Scale>,
    pub targets: TargetGenConfig,
    pub doe: DoeConfig,
    pub ann: AnnConfig,
    pub training: TrainOptions,
    pub hmc: HmcConfig,
    pub imis: ImisStage,
    /// Posterior draws pushed through the simulator for the predictive band.
    pub predictive_draws: usize,
    /// Grid points per parameter in the density file.
    pub density_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 20_200_101,
            life_table: None,
            out_dir: PathBuf::from("baycann-out"),
            scale: None,
            targets: TargetGenConfig::default(),
            doe: DoeConfig::default(),
            ann: AnnConfig::default(),
            training: TrainOptions::default(),
            hmc: HmcConfig::default(),
            imis: ImisStage::default(),
            predictive_draws: 500,
            density_points: 200,
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Stage seed derived from the global seed, kept within TOML's integer range.
fn stage_seed(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream, 0) >> 1
}

impl PipelineConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let mut c = PipelineConfig::default();
        c.apply_scale(scale);
        c
    }

    /// Overrides the design size and chain lengths with a preset.
    pub fn apply_scale(&mut self, scale: Scale) {
        self.scale = Some(scale);
        match scale {
            Scale::Desk => {
                self.doe.size = 2000;
                self.hmc.chains = 2;
                self.hmc.warmup = 500;
                self.hmc.samples = 500;
            }
            Scale::Full => {
                self.doe.size = 10_000;
                self.hmc.chains = 4;
                self.hmc.warmup = 1000;
                self.hmc.samples = 1000;
            }
        }
    }

    /// Parses TOML. Keys given in the text take precedence over the preset
    /// named by a top-level `scale` key, which takes precedence over defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let scale = match over.get("scale") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("scale must be a string".into()))?
                    .parse::<Scale>()?,
            ),
            None => None,
        };
        let base = scale.map_or_else(PipelineConfig::default, PipelineConfig::for_scale);
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, over);
        let cfg: PipelineConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every stage seed derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.targets.seed = stage_seed(self.seed, tag::TARGETS);
        c.hmc.seed = stage_seed(self.seed, tag::HMC_CHAIN);
        c.imis.config.seed = stage_seed(self.seed, tag::IMIS);
        c
    }

    pub fn doe_seed(&self) -> u64 {
        stage_seed(self.seed, tag::LHS)
    }

    pub fn split_seed(&self) -> u64 {
        stage_seed(self.seed, tag::SPLIT)
    }

    pub fn ann_seed(&self) -> u64 {
        stage_seed(self.seed, tag::ANN_INIT)
    }

    pub fn validate(&self) -> Result<()> {
        if self.doe.size < 10 {
            return Err(Error::Config(format!("DoE size {} is too small", self.doe.size)));
        }
        if !(self.doe.train_fraction > 0.0 && self.doe.train_fraction < 1.0) {
            return Err(Error::Config("doe.train_fraction must lie in (0, 1)".into()));
        }
        if self.predictive_draws == 0 || self.density_points < 2 {
            return Err(Error::Config("predictive_draws >= 1 and density_points >= 2 required".into()));
        }
        if self.targets.runs < 2 || self.targets.n_adenoma == 0 || self.targets.n_incid == 0 {
            return Err(Error::Config("target generation needs runs >= 2 and positive cohort sizes".into()));
        }
        self.ann.validate()?;
        self.hmc.validate()?;
        self.imis.config.validate()?;
        Ok(())
    }

    /// Hash of every setting that can change an artifact, plus the life table.
    pub fn hash(&self, lt: &LifeTable) -> Result<String> {
        let mut c = self.resolved();
        c.out_dir = PathBuf::new();
        c.life_table = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&c)?.as_bytes());
        for (a, m) in lt.entries() {
            h.update(a.to_le_bytes());
            h.update(m.to_le_bytes());
        }
        Ok(hex::encode(&h.finalize()[..8]))
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Metadata written next to a posterior CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub config_hash: String,
    pub posterior: Posterior,
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A configured run bound to an output directory.
#[derive(Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub life_table: LifeTable,
    pub config_hash: String,
    out_dir: PathBuf,
    _lock: Lock,
}

impl Pipeline {
    /// Validates the configuration, loads the life table, creates and locks
    /// the output directory.
    pub fn open(config: &PipelineConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let life_table = match &config.life_table {
            Some(p) => LifeTable::from_csv(p)?,
            None => LifeTable::bundled(),
        };
        let config_hash = config.hash(&life_table)?;
        let out_dir = config.out_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let lock = Lock::acquire(&out_dir)?;
        let resolved = config.to_toml_string()?;
        let resolved_path = out_dir.join(RESOLVED_TOML);
        std::fs::write(&resolved_path, resolved).map_err(|e| Error::io(&resolved_path, e))?;
        log::info!("output {} config hash {config_hash} seed {}", out_dir.display(), config.seed);
        Ok(Pipeline {
            config,
            life_table,
            config_hash,
            out_dir,
            _lock: lock,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn comments(&self, stage: &str, stage_seed: Option<u64>) -> Vec<String> {
        let mut c = vec![format!("config_hash={} seed={} stage={stage}", self.config_hash, self.config.seed)];
        if let Some(s) = stage_seed {
            c.push(format!("stage_seed={s}"));
        }
        c
    }

    fn record_time(&self, stage: &str, secs: f64) -> Result<()> {
        let path = self.path(TIMINGS_JSON);
        let mut t: BTreeMap<String, f64> = match std::fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        t.insert(stage.to_string(), secs);
        std::fs::write(&path, serde_json::to_string_pretty(&t)?).map_err(|e| Error::io(&path, e))
    }

    pub fn timings(&self) -> BTreeMap<String, f64> {
        std::fs::read_to_string(self.path(TIMINGS_JSON))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    fn run_stage<T>(&self, stage: &str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        log::info!("stage {stage} started");
        let start = Instant::now();
        let out = f(self).map_err(|e| Error::stage(stage, e))?;
        let secs = start.elapsed().as_secs_f64();
        self.record_time(stage, secs).map_err(|e| Error::stage(stage, e))?;
        log::info!("stage {stage} finished in {secs:.2} s");
        Ok(out)
    }

    fn priors(&self) -> PriorSpec {
        PriorSpec::crc()
    }

    fn truth(&self) -> NatHistParams {
        NatHistParams::base_case()
    }

    pub fn gen_targets(&self) -> Result<TargetSet> {
        self.run_stage("gen-targets", |p| {
            let cfg = &p.config.targets;
            let ts = generate_targets(&p.truth(), &p.life_table, cfg)?;
            for id in &ts.floored {
                log::warn!("target {id}: zero-variance SE raised to the floor");
            }
            let comments = p.comments("gen-targets", Some(cfg.seed));
            ts.write_csv(&p.path(TARGETS_CSV), &comments)?;
            report::write_truth_csv(&p.path(TRUTH_CSV), &report::truth_of(&p.truth()), &comments)?;
            Ok(ts)
        })
    }

    pub fn doe(&self) -> Result<Design> {
        self.run_stage("doe", |p| {
            let seed = p.config.doe_seed();
            let design = run_design(&p.priors(), p.config.doe.size, seed, &p.truth(), &p.life_table)?;
            if !design.dropped.is_empty() {
                log::warn!("{} design rows dropped", design.dropped.len());
            }
            let meta = serde_json::json!({ "config_hash": p.config_hash });
            design.write(&p.path(DESIGN_CSV), &p.path(DESIGN_JSON), &p.comments("doe", Some(seed)), meta)?;
            Ok(design)
        })
    }

    pub fn train(&self) -> Result<(AnnModel, TrainReport)> {
        self.run_stage("train", |p| {
            let design = Design::read(&p.path(DESIGN_CSV), &p.path(DESIGN_JSON))?;
            let (tr, va) = split(&design, p.config.doe.train_fraction, p.config.split_seed())?;
            let seed = p.config.ann_seed();
            let (model, rep) = ann::train(&tr, &va, &p.config.ann, &p.config.training, seed)?;
            let val = ann::validate(&model, &va)?;
            log::info!("validation aggregate R2 {:.5}", val.aggregate_r2);
            let meta = serde_json::json!({
                "config_hash": p.config_hash,
                "seed": seed,
                "aggregate_r2": rep.aggregate_r2,
                "train_rows": tr.len(),
                "valid_rows": va.len(),
            });
            model.save(&p.path(MODEL_JSON), meta)?;
            let path = p.path(TRAINING_JSON);
            std::fs::write(&path, serde_json::to_string_pretty(&rep)?).map_err(|e| Error::io(&path, e))?;
            report::write_validation_scatter(&p.path(SCATTER_CSV), &ModelOutputs::ids(), &val.scatter, &p.comments("train", Some(seed)))?;
            Ok((model, rep))
        })
    }

    pub fn calibrate(&self) -> Result<Posterior> {
        self.run_stage("calibrate", |p| {
            let model = AnnModel::load(&p.path(MODEL_JSON))?;
            let targets = TargetSet::read_csv(&p.path(TARGETS_CSV))?;
            let priors = p.priors();
            let lik = SurrogateLikelihood::new(&model, &targets, &priors)?;
            let lp = LogPosterior::new(lik, &priors);
            let post = hmc_sample(&lp, &p.config.hmc)?;
            let diag = diagnostics(&post);
            for m in &diag.messages {
                log::warn!("calibrate: {m}");
            }
            post.write_csv(&p.path(BAYCANN_CSV), &p.comments("calibrate", Some(p.config.hmc.seed)))?;
            p.write_record(BAYCANN_JSON, &post, diag, serde_json::Value::Null)?;
            Ok(post)
        })
    }

    fn write_record(&self, name: &str, post: &Posterior, diagnostics: Diagnostics, extra: serde_json::Value) -> Result<()> {
        let rec = PosteriorRecord {
            config_hash: self.config_hash.clone(),
            posterior: post.clone(),
            diagnostics,
            extra,
        };
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(&rec)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read_record(&self, name: &str) -> Result<PosteriorRecord> {
        let path = self.path(name);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// IMIS settings with the evaluation budget filled in when budget matching is on.
    pub fn imis_config(&self) -> Result<ImisConfig> {
        let mut cfg = self.config.imis.config.clone();
        if self.config.imis.budget_matched {
            let rec = self.read_record(BAYCANN_JSON).map_err(|_| {
                Error::Config("budget-matched IMIS needs the calibrate stage output; run calibrate first or set imis.budget_matched = false".into())
            })?;
            cfg.max_evaluations = Some(self.config.doe.size + rec.posterior.evaluations);
        }
        Ok(cfg)
    }

    pub fn imis(&self) -> Result<Posterior> {
        self.run_stage("imis", |p| {
            let targets = TargetSet::read_csv(&p.path(TARGETS_CSV))?;
            let cfg = p.imis_config()?;
            let lik = SimulatorLikelihood::new(&p.truth(), &p.life_table, &targets);
            let run = imis_run_detailed(&lik, &p.priors(), &cfg)?;
            if run.ridge_events > 0 {
                log::warn!("imis: {} components needed a covariance ridge", run.ridge_events);
            }
            let extra = serde_json::json!({
                "iterations": run.iterations,
                "converged": run.converged,
                "final_unique_fraction": run.unique_fraction.last(),
                "ridge_events": run.ridge_events,
                "max_evaluations": cfg.max_evaluations,
            });
            run.posterior.write_csv(&p.path(IMIS_CSV), &p.comments("imis", Some(cfg.seed)))?;
            let diag = diagnostics(&run.posterior);
            p.write_record(IMIS_JSON, &run.posterior, diag, extra)?;
            Ok(run.posterior)
        })
    }

    pub fn compare(&self) -> Result<ComparisonReport> {
        self.run_stage("compare", |p| {
            let surrogate = Posterior::read_csv(&p.path(BAYCANN_CSV), "hmc")?;
            let imis = Posterior::read_csv(&p.path(IMIS_CSV), "imis")?;
            let truth = report::read_truth_csv(&p.path(TRUTH_CSV))?;
            let mut rep = report::compare(&surrogate, &imis, &truth)?;
            if let Ok(r) = p.read_record(BAYCANN_JSON) {
                rep.surrogate_evaluations = r.posterior.evaluations;
            }
            if let Ok(r) = p.read_record(IMIS_JSON) {
                rep.imis_evaluations = r.posterior.evaluations;
            }
            rep.stage_secs = p.timings();

            let comments = p.comments("compare", None);
            report::write_density_grid(&p.path(DENSITY_CSV), &p.priors(), &[&surrogate, &imis], p.config.density_points, &comments)?;
            let targets = TargetSet::read_csv(&p.path(TARGETS_CSV))?;
            let band = report::predictive_band(&surrogate, &p.truth(), &p.life_table, &targets, p.config.predictive_draws)?;
            report::write_band_csv(&p.path(BAND_CSV), &band, &comments)?;
            p.write_comparison(&rep)?;
            Ok(rep)
        })
    }

    fn write_comparison(&self, rep: &ComparisonReport) -> Result<()> {
        let path = self.path(COMPARISON_JSON);
        std::fs::write(&path, serde_json::to_string_pretty(rep)?).map_err(|e| Error::io(&path, e))?;
        let path = self.path(COMPARISON_TXT);
        std::fs::write(&path, rep.render_table()).map_err(|e| Error::io(&path, e))
    }

    /// All stages in order. The comparison's timings include the compare stage.
    pub fn run_all(&self) -> Result<ComparisonReport> {
        self.gen_targets()?;
        self.doe()?;
        self.train()?;
        self.calibrate()?;
        self.imis()?;
        let mut rep = self.compare()?;
        rep.stage_secs = self.timings();
        self.write_comparison(&rep)?;
        Ok(rep)
    }
}

/// Compares two posterior CSVs against a truth CSV.
pub fn compare_files(surrogate: &Path, imis: &Path, truth: &Path) -> Result<ComparisonReport> {
    let a = Posterior::read_csv(surrogate, "hmc")?;
    let b = Posterior::read_csv(imis, "imis")?;
    let t = report::read_truth_csv(truth)?;
    report::compare(&a, &b, &t)
}

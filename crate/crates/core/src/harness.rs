//! Run configuration, the train/eval/generalize/limbsweep commands and the
//! artifacts they leave on disk.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dgn::{DgnError, Policy, PolicyKind, DEFAULT_HIDDEN};
use crate::sim::WATER_DRAG;
use crate::tasks::{run_episode, EpisodeTrace, Mode, ScenarioSpec, Task, TaskError};
use crate::terrain::TerrainVariant;
use crate::trainer::{derive_seed, evaluate, EvalSummary, PpoConfig, Trainer, UpdateReport};

const STREAM_REPLAY: u64 = 11;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("simulation fault: {0}")]
    Fault(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Incompatible(_) | HarnessError::Checkpoint(_) => 3,
            HarnessError::Fault(_) => 4,
            HarnessError::Io(_) => 1,
        }
    }
}

impl From<TaskError> for HarnessError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Sim(_) => HarnessError::Fault(e.to_string()),
            TaskError::Policy(_) => HarnessError::Incompatible(e.to_string()),
            TaskError::Spawn { .. } | TaskError::InvalidSpec(_) | TaskError::Terrain(_) => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(std::io::Error::other(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub updates: usize,
    /// Updates between model-selection evals; each one also writes a checkpoint.
    pub eval_every: usize,
    /// Episodes per model-selection eval, at the scenario's episode length.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            updates: 200,
            eval_every: 10,
            eval_episodes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub episode_len: usize,
    /// Act with distribution modes instead of samples.
    pub deterministic: bool,
    /// Episode `k` spawns from `seed + k`.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 50,
            episode_len: 1200,
            deterministic: true,
            seed: 1_000_000,
        }
    }
}

impl EvalConfig {
    pub fn mode(&self) -> Mode {
        if self.deterministic {
            Mode::Eval
        } else {
            Mode::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl RunConfig {
    pub fn new(task: Task, kind: PolicyKind) -> Self {
        RunConfig {
            scenario: ScenarioSpec::new(task),
            policy: PolicyConfig {
                kind,
                hidden: DEFAULT_HIDDEN,
            },
            ppo: PpoConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: default_out_dir(),
        }
    }

    /// Parses TOML; errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let de = toml::Deserializer::parse(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                HarnessError::Config(e.inner().to_string())
            } else {
                HarnessError::Config(format!("{path}: {}", e.inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The fully-resolved config, every default spelled out.
    pub fn to_lock(&self) -> Result<String, HarnessError> {
        let mut resolved = self.clone();
        resolved.scenario.terrain = Some(self.scenario.terrain_params());
        toml::to_string_pretty(&resolved).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario.validate()?;
        self.ppo.validate().map_err(|e| HarnessError::Config(format!("ppo: {e}")))?;
        if self.policy.hidden == 0 {
            return Err(HarnessError::Config("policy.hidden: must be positive".into()));
        }
        if self.train.eval_every == 0 || self.train.eval_episodes == 0 {
            return Err(HarnessError::Config("train: eval_every and eval_episodes must be positive".into()));
        }
        if self.eval.episodes == 0 || self.eval.episode_len == 0 {
            return Err(HarnessError::Config("eval: episodes and episode_len must be positive".into()));
        }
        Ok(())
    }
}

/// One line of `metrics.csv`. Eval columns are empty between evals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: usize,
    pub env_steps: u64,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
    pub entropy: Option<f64>,
    pub kl: Option<f64>,
    pub value_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub explained_variance: Option<f64>,
    pub train_episode_reward: Option<f64>,
    pub faulted_episodes: usize,
    pub eval_max_component: Option<usize>,
}

impl MetricsRow {
    fn from_report(r: &UpdateReport, eval: Option<&EvalSummary>) -> Self {
        MetricsRow {
            update: r.update,
            env_steps: r.env_steps,
            eval_mean: eval.map(|e| e.mean),
            eval_std: eval.map(|e| e.std),
            entropy: Some(r.stats.entropy),
            kl: Some(r.stats.approx_kl),
            value_loss: Some(r.stats.value_loss),
            policy_loss: Some(r.stats.policy_loss),
            explained_variance: Some(r.stats.explained_variance),
            train_episode_reward: r.train_episode_reward,
            faulted_episodes: r.faulted_episodes,
            eval_max_component: eval.map(max_final_component),
        }
    }
}

fn max_final_component(e: &EvalSummary) -> usize {
    e.episodes.iter().map(|s| s.final_largest_component).max().unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub untrained: EvalSummary,
    pub best: EvalSummary,
    pub best_update: usize,
    pub last: EvalSummary,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Trains from scratch into `out`, leaving `config.lock`, `metrics.csv`,
/// `checkpoints/` and `traces/`. `on_row` sees every metrics row as it is
/// written.
pub fn cmd_train(cfg: &RunConfig, out: &Path, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let ck_dir = out.join("checkpoints");
    let trace_dir = out.join("traces");
    fs::create_dir_all(&ck_dir)?;
    fs::create_dir_all(&trace_dir)?;
    fs::write(out.join("config.lock"), cfg.to_lock()?)?;

    let scenario = &cfg.scenario;
    let mut trainer = Trainer::new(scenario, cfg.policy.kind, cfg.policy.hidden, &cfg.ppo, cfg.seed)?;
    let select = |policy: &Policy| {
        evaluate(policy, scenario, cfg.train.eval_episodes, scenario.episode_len, cfg.eval.seed, cfg.eval.mode())
    };
    let mut metrics = csv::Writer::from_writer(BufWriter::new(fs::File::create(out.join("metrics.csv"))?));

    let untrained = select(&trainer.policy)?;
    let row0 = MetricsRow {
        update: 0,
        env_steps: 0,
        eval_mean: Some(untrained.mean),
        eval_std: Some(untrained.std),
        entropy: None,
        kl: None,
        value_loss: None,
        policy_loss: None,
        explained_variance: None,
        train_episode_reward: None,
        faulted_episodes: 0,
        eval_max_component: Some(max_final_component(&untrained)),
    };
    metrics.serialize(&row0)?;
    metrics.flush()?;
    on_row(&row0);

    let snapshot = |t: &Trainer, eval: Option<f64>| Checkpoint::new(&t.policy, scenario, cfg.seed, t.update, t.env_steps, eval);
    let best_path = ck_dir.join("best.ckpt");
    snapshot(&trainer, Some(untrained.mean)).save(&best_path)?;
    let mut best = (untrained.clone(), 0, trainer.policy.clone());
    let mut last = untrained.clone();

    for u in 1..=cfg.train.updates {
        let report = trainer.iterate()?;
        let eval = if u % cfg.train.eval_every == 0 || u == cfg.train.updates {
            Some(select(&trainer.policy)?)
        } else {
            None
        };
        let row = MetricsRow::from_report(&report, eval.as_ref());
        metrics.serialize(&row)?;
        metrics.flush()?;
        on_row(&row);
        if let Some(e) = eval {
            snapshot(&trainer, Some(e.mean)).save(&ck_dir.join(format!("update_{u:05}.ckpt")))?;
            if e.mean > best.0.mean {
                snapshot(&trainer, Some(e.mean)).save(&best_path)?;
                best = (e.clone(), u, trainer.policy.clone());
            }
            last = e;
        }
    }
    let final_path = ck_dir.join("final.ckpt");
    snapshot(&trainer, Some(last.mean)).save(&final_path)?;

    let (_, trace) = run_episode(
        &eval_scenario(scenario, scenario.episode_len, cfg.eval.seed),
        &best.2,
        cfg.eval.mode(),
        derive_seed(cfg.eval.seed, STREAM_REPLAY, 0),
        true,
    )?;
    write_trace(&trace_dir.join("best_eval.jsonl"), &trace.unwrap_or_default())?;

    Ok(TrainOutcome {
        dir: out.to_path_buf(),
        untrained,
        best: best.0,
        best_update: best.1,
        last,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

fn eval_scenario(base: &ScenarioSpec, episode_len: usize, seed: u64) -> ScenarioSpec {
    let mut s = base.clone();
    s.episode_len = episode_len;
    s.seed = seed;
    s
}

fn write_trace(path: &Path, trace: &EpisodeTrace) -> Result<(), HarnessError> {
    let f = BufWriter::new(fs::File::create(path)?);
    trace.write_jsonl(f)?;
    Ok(())
}

/// A zero-shot test condition derived from the training scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Training,
    Winds,
    StrongWinds,
    WaterDoubleLimbs,
    WaterDoubleLimbsStrongWind,
    Terrain(TerrainVariant),
    Limbs(usize),
}

impl Variant {
    /// The evaluation grid for checkpoints trained on `task`, training row excluded.
    pub fn grid(task: Task) -> Vec<Variant> {
        let mut g = match task {
            Task::Standing => vec![Variant::WaterDoubleLimbs, Variant::Winds, Variant::StrongWinds],
            Task::StandingWind => vec![Variant::StrongWinds, Variant::WaterDoubleLimbsStrongWind],
            Task::Locomotion => vec![
                Variant::WaterDoubleLimbs,
                Variant::Terrain(TerrainVariant::Hurdles),
                Variant::Terrain(TerrainVariant::Gaps),
                Variant::Terrain(TerrainVariant::BimodalBumps),
                Variant::Terrain(TerrainVariant::Stairs),
                Variant::Terrain(TerrainVariant::Valley),
            ],
        };
        g.extend([Variant::Limbs(4), Variant::Limbs(12)]);
        g
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Training => "training".into(),
            Variant::Winds => "winds".into(),
            Variant::StrongWinds => "strong_winds".into(),
            Variant::WaterDoubleLimbs => "water_2x_limbs".into(),
            Variant::WaterDoubleLimbsStrongWind => "water_2x_limbs_strong_wind".into(),
            Variant::Terrain(v) => terrain_name(*v).into(),
            Variant::Limbs(n) => format!("limbs_{n}"),
        }
    }

    /// The scenario this variant evaluates in.
    pub fn apply(&self, base: &ScenarioSpec) -> ScenarioSpec {
        let mut s = base.clone();
        let strong = |s: &mut ScenarioSpec| {
            let trained = base.effective_modifiers().wind;
            s.modifiers.wind.active = true;
            s.modifiers.wind.force_max = 2.0 * trained.force_max;
        };
        let water_2x = |s: &mut ScenarioSpec| {
            s.modifiers.drag_coeff = WATER_DRAG;
            s.num_limbs = 2 * base.num_limbs;
        };
        match *self {
            Variant::Training => {}
            Variant::Winds => s.modifiers.wind.active = true,
            Variant::StrongWinds => strong(&mut s),
            Variant::WaterDoubleLimbs => water_2x(&mut s),
            Variant::WaterDoubleLimbsStrongWind => {
                water_2x(&mut s);
                strong(&mut s);
            }
            Variant::Terrain(v) => {
                let mut t = base.terrain_params();
                t.variant = v;
                s.terrain = Some(t);
            }
            Variant::Limbs(n) => s.num_limbs = n,
        }
        s
    }
}

fn terrain_name(v: TerrainVariant) -> &'static str {
    match v {
        TerrainVariant::Flat => "flat",
        TerrainVariant::Bumpy => "bumpy",
        TerrainVariant::BimodalBumps => "bimodal_bumps",
        TerrainVariant::Hurdles => "hurdles",
        TerrainVariant::Gaps => "gaps",
        TerrainVariant::Stairs => "stairs",
        TerrainVariant::Valley => "valley",
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix("limbs_") {
            return n.parse().map(Variant::Limbs).map_err(|_| format!("bad limb count in `{s}`"));
        }
        let fixed = [
            Variant::Training,
            Variant::Winds,
            Variant::StrongWinds,
            Variant::WaterDoubleLimbs,
            Variant::WaterDoubleLimbsStrongWind,
        ];
        fixed
            .into_iter()
            .chain(TerrainVariant::ALL.into_iter().map(Variant::Terrain))
            .find(|v| v.label() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub num_limbs: usize,
    /// `None` when the policy cannot act in this scenario.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Percent of the training-scenario reward retained.
    pub retained_pct: Option<f64>,
    pub max_component: Option<usize>,
    /// Why the row could not be measured.
    pub note: String,
}

impl EvalRow {
    pub fn is_na(&self) -> bool {
        self.mean.is_none()
    }
}

pub const NA_FIXED_DIMS: &str = "n/a: fixed action/state dimensionality";

/// Evaluates `checkpoint` under `variant`. A monolithic policy asked to run
/// at a different limb count yields an "n/a" row rather than an error.
pub fn cmd_eval(checkpoint: &Checkpoint, variant: Variant, eval: &EvalConfig, reference: Option<f64>) -> Result<EvalRow, HarnessError> {
    let scenario = variant.apply(&checkpoint.manifest.scenario);
    scenario.validate()?;
    let mut row = EvalRow {
        variant: variant.label(),
        num_limbs: scenario.num_limbs,
        mean: None,
        std: None,
        retained_pct: None,
        max_component: None,
        note: String::new(),
    };
    if !checkpoint.policy.accepts_limbs(scenario.num_limbs) {
        row.note = NA_FIXED_DIMS.into();
        return Ok(row);
    }
    let summary = match evaluate(&checkpoint.policy, &scenario, eval.episodes, eval.episode_len, eval.seed, eval.mode()) {
        Ok(s) => s,
        Err(TaskError::Policy(DgnError::LimbCount { .. })) => {
            row.note = NA_FIXED_DIMS.into();
            return Ok(row);
        }
        Err(e) => return Err(e.into()),
    };
    row.mean = Some(summary.mean);
    row.std = Some(summary.std);
    row.max_component = Some(max_final_component(&summary));
    row.retained_pct = reference.and_then(|r| percent_retained(summary.mean, r));
    Ok(row)
}

pub fn percent_retained(value: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| 100.0 * value / reference.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizeTable {
    pub task: Task,
    pub kind: PolicyKind,
    /// Training-scenario row; the percent-retained denominator.
    pub reference: EvalRow,
    pub rows: Vec<EvalRow>,
}

pub fn write_eval_rows<W: std::io::Write>(rows: &[EvalRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

impl GeneralizeTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), HarnessError> {
        let all: Vec<EvalRow> = std::iter::once(&self.reference).chain(&self.rows).cloned().collect();
        write_eval_rows(&all, w)
    }

    /// Plain-text rendering for terminals.
    pub fn render(&self) -> String {
        let mut s = format!("task {}  policy {}\n", self.task.name(), self.kind);
        s += &format!("{:<28} {:>6} {:>14} {:>10}\n", "variant", "limbs", "mean", "retained");
        for r in std::iter::once(&self.reference).chain(&self.rows) {
            let mean = r.mean.map_or_else(|| "n/a".to_string(), |m| format!("{m:.2}"));
            let pct = r.retained_pct.map_or_else(|| "-".to_string(), |p| format!("{p:.0}%"));
            s += &format!("{:<28} {:>6} {:>14} {:>10}\n", r.variant, r.num_limbs, mean, pct);
        }
        s
    }
}

/// Evaluates the checkpoint on its training scenario, then on every variant
/// of its task's grid. Never updates parameters.
pub fn cmd_generalize(checkpoint: &Checkpoint, eval: &EvalConfig) -> Result<GeneralizeTable, HarnessError> {
    let before = checkpoint.policy.params.clone();
    let reference = cmd_eval(checkpoint, Variant::Training, eval, None)?;
    let denom = reference.mean;
    let rows = Variant::grid(checkpoint.manifest.scenario.task)
        .into_iter()
        .map(|v| cmd_eval(checkpoint, v, eval, denom))
        .collect::<Result<Vec<_>, _>>()?;
    assert_eq!(before, checkpoint.policy.params, "generalization must not update parameters");
    Ok(GeneralizeTable {
        task: checkpoint.manifest.scenario.task,
        kind: checkpoint.manifest.kind,
        reference,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_limbs: usize,
    pub mean: f64,
    pub std: f64,
    /// Whether a network was trained for this count.
    pub trained: bool,
}

/// Performance against limb count. Modular policies evaluate `checkpoint`
/// (or one network trained at the config's limb count) everywhere;
/// monolithic ones train a fresh network per count, each in its own
/// subdirectory of `out`.
pub fn cmd_limbsweep(cfg: &RunConfig, limbs: &[usize], checkpoint: Option<&Checkpoint>, out: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    cfg.validate()?;
    let kind = cfg.policy.kind;
    if let Some(ck) = checkpoint {
        if ck.manifest.kind != kind {
            return Err(HarnessError::Incompatible(format!("checkpoint holds {} but config asks for {kind}", ck.manifest.kind)));
        }
    }
    let eval_at = |policy: &Policy, base: &ScenarioSpec, n: usize| {
        let mut s = base.clone();
        s.num_limbs = n;
        evaluate(policy, &s, cfg.eval.episodes, cfg.eval.episode_len, cfg.eval.seed, cfg.eval.mode())
    };
    let mut rows = Vec::with_capacity(limbs.len());
    if kind.is_modular() {
        let ck = match checkpoint {
            Some(ck) => ck.clone(),
            None => Checkpoint::load(&cmd_train(cfg, &out.join("shared"), |_| {})?.best_checkpoint)?,
        };
        for &n in limbs {
            let e = eval_at(&ck.policy, &ck.manifest.scenario, n)?;
            rows.push(SweepRow {
                num_limbs: n,
                mean: e.mean,
                std: e.std,
                trained: false,
            });
        }
    } else {
        for &n in limbs {
            let mut c = cfg.clone();
            c.scenario.num_limbs = n;
            let o = cmd_train(&c, &out.join(format!("limbs_{n}")), |_| {})?;
            let ck = Checkpoint::load(&o.best_checkpoint)?;
            let e = eval_at(&ck.policy, &c.scenario, n)?;
            rows.push(SweepRow {
                num_limbs: n,
                mean: e.mean,
                std: e.std,
                trained: true,
            });
        }
    }
    Ok(rows)
}

/// Records one deterministic episode of `checkpoint` under `variant` as JSONL.
pub fn cmd_replay_export(checkpoint: &Checkpoint, variant: Variant, eval: &EvalConfig, out: &Path) -> Result<usize, HarnessError> {
    let scenario = eval_scenario(&variant.apply(&checkpoint.manifest.scenario), eval.episode_len, eval.seed);
    scenario.validate()?;
    if !checkpoint.policy.accepts_limbs(scenario.num_limbs) {
        return Err(HarnessError::Incompatible(NA_FIXED_DIMS.into()));
    }
    let (_, trace) = run_episode(&scenario, &checkpoint.policy, eval.mode(), derive_seed(eval.seed, STREAM_REPLAY, 0), true)?;
    let trace = trace.unwrap_or_default();
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_trace(out, &trace)?;
    Ok(trace.records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_required_fields_are_named() {
        let err = RunConfig::from_toml("[scenario]\ntask = \"standing\"\n").unwrap_err();
        assert!(err.to_string().contains("policy"), "{err}");
        let err = RunConfig::from_toml("[scenario]\n[policy]\nkind = \"dgn\"\n").unwrap_err();
        assert!(err.to_string().contains("scenario") && err.to_string().contains("task"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_report_their_path() {
        let err = RunConfig::from_toml("[scenario]\ntask = \"standing\"\n[policy]\nkind = \"dgn\"\n[ppo]\ngamma = \"high\"\n").unwrap_err();
        assert!(err.to_string().contains("ppo.gamma"), "{err}");
    }

    #[test]
    fn lock_round_trips() {
        let mut cfg = RunConfig::new(Task::Locomotion, PolicyKind::MonoFixed);
        cfg.seed = 9;
        cfg.scenario.modifiers.wind.active = true;
        let back = RunConfig::from_toml(&cfg.to_lock().unwrap()).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.scenario.terrain_params(), cfg.scenario.terrain_params());
        assert_eq!(back.to_lock().unwrap(), cfg.to_lock().unwrap());
    }

    #[test]
    fn grids_have_the_expected_rows() {
        assert_eq!(Variant::grid(Task::Standing).len(), 5);
        assert_eq!(Variant::grid(Task::StandingWind).len(), 4);
        assert_eq!(Variant::grid(Task::Locomotion).len(), 8);
    }

    #[test]
    fn variant_names_parse_back() {
        for task in [Task::Standing, Task::StandingWind, Task::Locomotion] {
            for v in Variant::grid(task) {
                assert_eq!(v.label().parse::<Variant>().unwrap(), v);
            }
        }
        assert!("windy".parse::<Variant>().is_err());
    }

    #[test]
    fn variants_modify_the_scenario() {
        let base = ScenarioSpec::new(Task::StandingWind);
        let s = Variant::WaterDoubleLimbsStrongWind.apply(&base);
        assert_eq!(s.num_limbs, 12);
        assert_eq!(s.modifiers.drag_coeff, WATER_DRAG);
        assert!(s.modifiers.wind.active);
        assert_eq!(s.modifiers.wind.force_max, 2.0 * base.modifiers.wind.force_max);
        let w = Variant::Winds.apply(&ScenarioSpec::new(Task::Standing));
        assert!(w.effective_modifiers().wind.active);
        let h = Variant::Terrain(TerrainVariant::Hurdles).apply(&ScenarioSpec::new(Task::Locomotion));
        assert_eq!(h.terrain_params().variant, TerrainVariant::Hurdles);
    }

    #[test]
    fn percent_retained_keeps_sign() {
        assert_eq!(percent_retained(50.0, 100.0), Some(50.0));
        assert_eq!(percent_retained(-3.0, 3.0), Some(-100.0));
        assert_eq!(percent_retained(1.0, 0.0), None);
    }
}

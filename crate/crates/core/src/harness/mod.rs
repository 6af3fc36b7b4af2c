//! Experiment runner: target fine-tuning, reference distillation and
//! filtered draft distillation with content-keyed stage caching, followed by
//! speculative-decoding evaluation, diagnostics and reporting.

mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{
    hash_json, AnalysisConfig, ExperimentConfig, TaskData, TaskSpec, OUTPUT_ROOT_ENV,
};
pub use report::{read_records, report, SUMMARY_FILE};

use crate::analysis::{
    acceptance_histogram, dump_selected_tokens, error_overlap, kl_distribution,
    margin_distribution, Trajectory,
};
use crate::distill::{
    DivergenceKind, EpochStats, FilterConfig, FilterMode, ModelOutputs, Objective, ReferenceLosses,
    TrainConfig, Trainer,
};
use crate::error::{Error, Result};
use crate::metrics::{
    acceptance_from_counts, block_efficiency, measure_cost_coefficient, speedup, CostCoefficient,
};
use crate::specdec::{speculative_generate, GenerationResult, SDStats};
use crate::tinylm::{Role, TinyLM};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Forward passes timed per model when measuring the cost coefficient.
const COST_TRIALS: usize = 21;

/// Filter fractions of the k sweep.
pub const K_SWEEP: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// One training stage as it was run or loaded from cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub checkpoint: PathBuf,
    pub fingerprint: String,
    pub curve: Vec<EpochStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub margin_fraction_positive: f64,
    pub teacher_forced_acceptance: f64,
    pub median_kl: f64,
    pub mean_kl: f64,
    pub scored_tokens: usize,
    /// Share of this draft's teacher-forced errors the baseline does not make.
    pub errors_outside_baseline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub objective: Objective,
    pub divergence: DivergenceKind,
    pub filter_mode: FilterMode,
    pub k: f64,
    /// Key of the final stage, which covers every upstream stage.
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub alpha: f64,
    pub accept: usize,
    pub reject: usize,
    pub tau: f64,
    pub speedup: f64,
    pub c: f64,
    pub analysis: AnalysisSummary,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub wall_secs: f64,
    pub code_version: String,
}

impl RunRecord {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Step-2 and Step-3 settings of one compared method. Without a draft
/// config the reference itself is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub method: String,
    pub reference: TrainConfig,
    pub draft: Option<TrainConfig>,
}

impl Variant {
    pub fn baseline(cfg: &ExperimentConfig) -> Self {
        Variant {
            method: "baseline".into(),
            reference: cfg.reference_train.clone(),
            draft: None,
        }
    }

    pub fn selective(cfg: &ExperimentConfig) -> Self {
        Variant {
            method: "selective".into(),
            reference: cfg.reference_train.clone(),
            draft: Some(cfg.draft_train.clone()),
        }
    }

    fn final_config(&self) -> &TrainConfig {
        self.draft.as_ref().unwrap_or(&self.reference)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    BottomK,
    FinetuneOnly,
    Rkl,
    Tvd,
    KSweep,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bottom_k" => Ablation::BottomK,
            "finetune_only" => Ablation::FinetuneOnly,
            "rkl" => Ablation::Rkl,
            "tvd" => Ablation::Tvd,
            "k_sweep" => Ablation::KSweep,
            other => {
                return Err(Error::config(format!(
                "unknown ablation {other:?}; expected bottom_k, finetune_only, rkl, tvd or k_sweep"
            )))
            }
        })
    }
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::BottomK,
        Ablation::FinetuneOnly,
        Ablation::Rkl,
        Ablation::Tvd,
        Ablation::KSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::BottomK => "bottom_k",
            Ablation::FinetuneOnly => "finetune_only",
            Ablation::Rkl => "rkl",
            Ablation::Tvd => "tvd",
            Ablation::KSweep => "k_sweep",
        }
    }

    /// The methods this ablation compares.
    pub fn variants(self, cfg: &ExperimentConfig) -> Vec<Variant> {
        let with_draft = |method: String, draft: TrainConfig| Variant {
            method,
            reference: cfg.reference_train.clone(),
            draft: Some(draft),
        };
        let pair = |prefix: &str, objective: Objective, divergence: DivergenceKind| {
            let reference = TrainConfig {
                objective,
                divergence,
                ..cfg.reference_train.clone()
            };
            let draft = TrainConfig {
                objective,
                divergence,
                ..cfg.draft_train.clone()
            };
            vec![
                Variant {
                    method: format!("{prefix}_baseline"),
                    reference: reference.clone(),
                    draft: None,
                },
                Variant {
                    method: format!("{prefix}_selective"),
                    reference,
                    draft: Some(draft),
                },
            ]
        };
        match self {
            Ablation::BottomK => vec![with_draft(
                format!("bottom_k{}", cfg.draft_train.filter.k),
                TrainConfig {
                    filter: FilterConfig::bottom(cfg.draft_train.filter.k),
                    ..cfg.draft_train.clone()
                },
            )],
            Ablation::FinetuneOnly => {
                pair("finetune", Objective::FineTune, cfg.draft_train.divergence)
            }
            Ablation::Rkl => pair("rkl", Objective::Distill, DivergenceKind::ReverseKl),
            Ablation::Tvd => pair("tvd", Objective::Distill, DivergenceKind::Tvd),
            Ablation::KSweep => K_SWEEP
                .iter()
                .map(|&k| {
                    with_draft(
                        format!("k{k}"),
                        TrainConfig {
                            filter: FilterConfig::top(k),
                            ..cfg.draft_train.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

fn short(key: &str) -> &str {
    &key[..16]
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_vec_pretty(value)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A trained model with its stage record.
struct Stage {
    model: TinyLM,
    record: StageRecord,
}

/// State shared by every method run for one seed.
pub struct SeedSession<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    dir: PathBuf,
    data: TaskData,
    target: Stage,
    teacher: Option<ModelOutputs>,
    references: HashMap<String, (Stage, ModelOutputs)>,
    cost: Option<CostCoefficient>,
}

impl<'a> SeedSession<'a> {
    /// Prepares data and the fine-tuned target, from cache when possible.
    pub fn open(cfg: &'a ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate().map_err(|e| e.in_stage("config"))?;
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e).in_stage("setup"))?;
        let data = cfg.data(seed).map_err(|e| e.in_stage("data"))?;
        let key = hash_json(&("target", &cfg.target, &cfg.target_train, &data.key, seed));
        let target = cached_stage(&dir, "target", &key, || {
            let mut model = TinyLM::init(cfg.target.clone(), seed, Role::Target)?;
            let train = TrainConfig {
                seed,
                ..cfg.target_train.clone()
            };
            let mut trainer = Trainer::new(train)?;
            let mut curve = Vec::new();
            for _ in 0..cfg.target_train.epochs {
                let st = trainer.finetune_epoch(&mut model, &data.train, None)?;
                log::info!(
                    "seed {seed} target epoch {} loss {:.4}",
                    st.epoch,
                    st.mean_loss
                );
                curve.push(st);
            }
            Ok((model, curve))
        })
        .map_err(|e| e.in_stage("finetune-target"))?;
        Ok(SeedSession {
            cfg,
            seed,
            dir,
            data,
            target,
            teacher: None,
            references: HashMap::new(),
            cost: None,
        })
    }

    pub fn data(&self) -> &TaskData {
        &self.data
    }

    pub fn target(&self) -> &TinyLM {
        &self.target.model
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn ensure_teacher(&mut self, objective: Objective) -> Result<()> {
        if objective == Objective::Distill && self.teacher.is_none() {
            self.teacher = Some(ModelOutputs::compute(&self.target.model, &self.data.train)?);
        }
        Ok(())
    }

    fn reference_key(&self, train: &TrainConfig) -> String {
        hash_json(&(
            "reference",
            &self.cfg.draft,
            train,
            &self.target.record.fingerprint,
            &self.data.key,
            self.seed,
        ))
    }

    fn ensure_reference(&mut self, train: &TrainConfig) -> Result<String> {
        let key = self.reference_key(train);
        if !self.references.contains_key(&key) {
            self.ensure_teacher(train.objective)?;
            let stage = cached_stage(&self.dir, "reference", &key, || {
                train_student(
                    self.cfg,
                    self.seed,
                    &self.data,
                    self.teacher.as_ref(),
                    Role::Reference,
                    train,
                    None,
                    None,
                )
            })?;
            let outputs = ModelOutputs::compute(&stage.model, &self.data.train)?;
            self.references.insert(key.clone(), (stage, outputs));
        }
        Ok(key)
    }

    fn cost(&mut self, draft: &TinyLM) -> Result<CostCoefficient> {
        if let Some(c) = &self.cost {
            return Ok(c.clone());
        }
        let key = hash_json(&("cost", &self.cfg.target, &self.cfg.draft));
        let path = self.dir.join(format!("cost-{}.json", short(&key)));
        let cost = match read_json::<CostCoefficient>(&path) {
            Ok(c) => c,
            Err(_) => {
                let probe = self.data.eval.examples[0].tokens();
                let c = measure_cost_coefficient(&self.target.model, draft, &probe, COST_TRIALS)?;
                write_json(&path, &c)?;
                c
            }
        };
        self.cost = Some(cost.clone());
        Ok(cost)
    }

    /// Speculative rollouts of every evaluation prompt, cached by content.
    fn rollouts(
        &self,
        draft: &StageRecord,
        model: &TinyLM,
    ) -> Result<(Vec<GenerationResult>, PathBuf)> {
        let key = hash_json(&(
            "eval",
            &self.cfg.sd,
            &self.target.record.fingerprint,
            &draft.fingerprint,
            &self.data.key,
        ));
        let path = self.dir.join(format!("eval-{}.json", short(&key)));
        if let Ok(results) = read_json::<Vec<GenerationResult>>(&path) {
            return Ok((results, path));
        }
        let results = evaluate(&self.target.model, model, &self.data, &self.cfg.sd)?;
        write_json(&path, &results)?;
        Ok((results, path))
    }

    /// Trains or loads the reference stage for `train`.
    pub fn reference_stage(&mut self, train: &TrainConfig) -> Result<StageRecord> {
        let key = self
            .ensure_reference(train)
            .map_err(|e| e.in_stage("distill-reference"))?;
        Ok(self.references[&key].0.record.clone())
    }

    /// Trains or loads the reference and filtered draft stages.
    pub fn draft_stage(
        &mut self,
        reference: &TrainConfig,
        draft: &TrainConfig,
    ) -> Result<StageRecord> {
        let key = self
            .ensure_reference(reference)
            .map_err(|e| e.in_stage("distill-reference"))?;
        let stage = self
            .ensure_draft(&key, draft)
            .map_err(|e| e.in_stage("distill-draft"))?;
        Ok(stage.record)
    }

    pub fn target_stage(&self) -> &StageRecord {
        &self.target.record
    }

    /// Trains (or loads) and evaluates one method.
    pub fn run(&mut self, variant: &Variant) -> Result<(RunRecord, TinyLM)> {
        let start = Instant::now();
        let ref_key = self
            .ensure_reference(&variant.reference)
            .map_err(|e| e.in_stage("distill-reference"))?;
        let (draft_model, draft_record) = match &variant.draft {
            None => {
                let (r, _) = &self.references[&ref_key];
                (r.model.clone(), None)
            }
            Some(train) => {
                let stage = self
                    .ensure_draft(&ref_key, train)
                    .map_err(|e| e.in_stage("distill-draft"))?;
                (stage.model, Some(stage.record))
            }
        };
        let (ref_stage, _) = &self.references[&ref_key];
        let mut stages = vec![self.target.record.clone(), ref_stage.record.clone()];
        stages.extend(draft_record);
        let last = stages.last().expect("non-empty").clone();

        let (results, eval_path) = self
            .rollouts(&last, &draft_model)
            .map_err(|e| e.in_stage("evaluate"))?;
        let mut totals = SDStats::default();
        for r in &results {
            totals.merge(&r.stats);
        }
        let alpha = acceptance_from_counts(totals.accept, totals.reject)
            .map_err(|e| e.in_stage("evaluate"))?;
        let tau = block_efficiency(alpha, self.cfg.sd.gamma)?;
        let cost = self
            .cost(&draft_model)
            .map_err(|e| e.in_stage("evaluate"))?;
        let sp = speedup(tau, self.cfg.sd.gamma, cost.c)?;

        let mut artifacts = BTreeMap::new();
        artifacts.insert("rollouts".to_string(), eval_path);
        if let Some(d) = &draft_record_dump(&self.dir, &last) {
            if d.exists() {
                artifacts.insert("selected_tokens".to_string(), d.clone());
            }
        }
        let analysis = self
            .analyse(&variant.method, &draft_model, &results, &mut artifacts)
            .map_err(|e| e.in_stage("analysis"))?;
        let fin = variant.final_config();
        let record = RunRecord {
            experiment: self.cfg.name.clone(),
            task: self.cfg.task.name().to_string(),
            method: variant.method.clone(),
            seed: self.seed,
            objective: fin.objective,
            divergence: fin.divergence,
            filter_mode: fin.filter.mode,
            k: if fin.filter.is_active() {
                fin.filter.k
            } else {
                1.0
            },
            config_hash: last.key.clone(),
            stages,
            alpha,
            accept: totals.accept,
            reject: totals.reject,
            tau,
            speedup: sp,
            c: cost.c,
            analysis,
            artifacts,
            wall_secs: start.elapsed().as_secs_f64(),
            code_version: CODE_VERSION.to_string(),
        };
        write_json(
            &self.dir.join(format!("record-{}.json", variant.method)),
            &record,
        )?;
        log::info!("seed {} {} alpha {:.4}", self.seed, variant.method, alpha);
        Ok((record, draft_model))
    }

    fn ensure_draft(&mut self, ref_key: &str, train: &TrainConfig) -> Result<Stage> {
        let ref_fingerprint = self.references[ref_key].0.record.fingerprint.clone();
        let key = hash_json(&(
            "draft",
            &self.cfg.draft,
            train,
            &self.target.record.fingerprint,
            &ref_fingerprint,
            &self.data.key,
            self.seed,
        ));
        let dump = train.filter.is_active().then(|| dump_path(&self.dir, &key));
        if let Some(d) = &dump {
            if !d.exists() {
                remove_stage(&self.dir, "draft", &key);
            }
        }
        self.ensure_teacher(train.objective)?;
        let teacher = self
            .teacher
            .as_ref()
            .filter(|_| train.objective == Objective::Distill);
        let (_, ref_outputs) = &self.references[ref_key];
        cached_stage(&self.dir, "draft", &key, || {
            let reference = if train.filter.is_active() {
                Some(ReferenceLosses::compute(
                    ref_outputs,
                    teacher,
                    &self.data.train,
                    train.token_loss(),
                )?)
            } else {
                None
            };
            train_student(
                self.cfg,
                self.seed,
                &self.data,
                teacher,
                Role::Draft,
                train,
                reference.as_ref(),
                dump.as_deref(),
            )
        })
    }

    fn analyse(
        &self,
        method: &str,
        draft: &TinyLM,
        results: &[GenerationResult],
        artifacts: &mut BTreeMap<String, PathBuf>,
    ) -> Result<AnalysisSummary> {
        let bins = self.cfg.analysis.bins;
        let trajectories: Vec<Trajectory> = results.iter().map(Trajectory::from).collect();
        let hist = acceptance_histogram(results, bins)?;
        let (margins, margin_hist) =
            margin_distribution(&self.target.model, draft, &trajectories, bins)?;
        let (_, kl_hist) = kl_distribution(&self.target.model, draft, &trajectories, bins)?;
        for (name, h) in [
            ("acceptance", &hist),
            ("margin", &margin_hist),
            ("kl", &kl_hist),
        ] {
            let path = self.dir.join(format!("{method}-{name}.csv"));
            h.write_csv(&path)?;
            artifacts.insert(format!("{name}_histogram"), path);
        }
        let agree = margins.iter().filter(|m| m.positive).count();
        Ok(AnalysisSummary {
            margin_fraction_positive: margin_hist.summary.fraction_positive.unwrap_or(f64::NAN),
            teacher_forced_acceptance: if margins.is_empty() {
                f64::NAN
            } else {
                agree as f64 / margins.len() as f64
            },
            median_kl: kl_hist.summary.median,
            mean_kl: kl_hist.summary.mean,
            scored_tokens: margins.len(),
            errors_outside_baseline: None,
        })
    }

    /// Teacher-forced error overlap of `draft` against `baseline`, written as
    /// a case-study text file. Returns the share of `draft` errors outside
    /// the baseline's.
    pub fn overlap(
        &self,
        draft: &TinyLM,
        baseline: &TinyLM,
        results: &[GenerationResult],
        name: &str,
    ) -> Result<(f64, PathBuf)> {
        let trajectories: Vec<Trajectory> = results.iter().map(Trajectory::from).collect();
        let report = error_overlap(&self.target.model, draft, baseline, &trajectories)?;
        let path = self.dir.join(format!("{name}-overlap.txt"));
        let text = report.render(
            &self.data.tokenizer,
            &trajectories,
            self.cfg.analysis.case_study_sites,
        );
        write_text(&path, &text)?;
        Ok((report.a_outside_b(), path))
    }
}

/// Trains a fresh draft-architecture model for one stage, optionally
/// dumping the final epoch's token selections.
#[allow(clippy::too_many_arguments)]
fn train_student(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &TaskData,
    teacher: Option<&ModelOutputs>,
    role: Role,
    train: &TrainConfig,
    reference: Option<&ReferenceLosses>,
    dump: Option<&Path>,
) -> Result<(TinyLM, Vec<EpochStats>)> {
    let mut model = TinyLM::init(cfg.draft.clone(), seed.wrapping_add(1), role)?;
    let train = TrainConfig {
        seed,
        ..train.clone()
    };
    let mut trainer = Trainer::new(train.clone())?;
    let mut curve = Vec::new();
    for epoch in 0..train.epochs {
        trainer.capture = dump.is_some() && epoch + 1 == train.epochs;
        let st = match train.objective {
            Objective::Distill => {
                let t =
                    teacher.ok_or_else(|| Error::config("distillation needs teacher outputs"))?;
                trainer.distill_epoch(&mut model, t, reference, &data.train)?
            }
            Objective::FineTune => trainer.finetune_epoch(&mut model, &data.train, reference)?,
        };
        log::info!(
            "seed {seed} {role:?} epoch {} loss {:.4} kept {}/{}",
            st.epoch,
            st.mean_loss,
            st.selected_tokens,
            st.supervised_tokens
        );
        curve.push(st);
    }
    if let Some(path) = dump {
        dump_selected_tokens(&trainer.last_selections, &data.tokenizer, path)?;
    }
    Ok((model, curve))
}

fn dump_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("draft-{}.tokens.tsv", short(key)))
}

fn draft_record_dump(dir: &Path, stage: &StageRecord) -> Option<PathBuf> {
    (stage.stage == "draft").then(|| dump_path(dir, &stage.key))
}

fn stage_paths(dir: &Path, stage: &str, key: &str) -> (PathBuf, PathBuf) {
    let base = format!("{stage}-{}", short(key));
    (
        dir.join(format!("{base}.ckpt")),
        dir.join(format!("{base}.json")),
    )
}

fn remove_stage(dir: &Path, stage: &str, key: &str) {
    let (ckpt, meta) = stage_paths(dir, stage, key);
    let _ = fs::remove_file(ckpt);
    let _ = fs::remove_file(meta);
}

/// Loads a stage whose checkpoint and record exist and agree, otherwise runs
/// `train` and persists the result.
fn cached_stage(
    dir: &Path,
    stage: &str,
    key: &str,
    train: impl FnOnce() -> Result<(TinyLM, Vec<EpochStats>)>,
) -> Result<Stage> {
    let (ckpt, meta) = stage_paths(dir, stage, key);
    if let (Ok(record), Ok(model)) = (read_json::<StageRecord>(&meta), TinyLM::load(&ckpt)) {
        if record.key == key && model.fingerprint() == record.fingerprint {
            log::info!("{stage} {} loaded from cache", short(key));
            return Ok(Stage { model, record });
        }
        log::warn!("{stage} cache at {} is stale; retraining", ckpt.display());
    }
    let (model, curve) = train()?;
    model.save(&ckpt)?;
    let record = StageRecord {
        stage: stage.to_string(),
        key: key.to_string(),
        checkpoint: ckpt,
        fingerprint: model.fingerprint(),
        curve,
    };
    write_json(&meta, &record)?;
    Ok(Stage { model, record })
}

/// Speculative rollouts of every evaluation prompt.
pub fn evaluate(
    target: &TinyLM,
    draft: &TinyLM,
    data: &TaskData,
    sd: &crate::specdec::SDConfig,
) -> Result<Vec<GenerationResult>> {
    data.eval
        .examples
        .iter()
        .map(|ex| speculative_generate(target, draft, &ex.prompt, sd))
        .collect()
}

/// Runs `variants` for every seed. Selective methods also get an error
/// overlap against the seed's unfiltered baseline when one is among them.
pub fn run_variants(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<RunRecord>> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let mut session = SeedSession::open(cfg, seed)?;
        let mut models = Vec::new();
        for v in variants {
            let (record, model) = session.run(v)?;
            models.push((record, model));
        }
        let baseline = models
            .iter()
            .position(|(r, _)| r.method.ends_with("baseline"));
        if let Some(b) = baseline {
            for i in 0..models.len() {
                if i == b || models[i].0.filter_mode == FilterMode::None {
                    continue;
                }
                let results: Vec<GenerationResult> = read_json(&models[i].0.artifacts["rollouts"])?;
                let (share, path) = session
                    .overlap(&models[i].1, &models[b].1, &results, &models[i].0.method)
                    .map_err(|e| e.in_stage("analysis"))?;
                let record = &mut models[i].0;
                record.analysis.errors_outside_baseline = Some(share);
                record.artifacts.insert("error_overlap".into(), path);
                write_json(
                    &session.dir.join(format!("record-{}.json", record.method)),
                    record,
                )?;
            }
        }
        records.extend(models.into_iter().map(|(r, _)| r));
    }
    Ok(records)
}

/// Step 1 to Step 3 with the configured filter.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    run_variants(cfg, &[Variant::selective(cfg)])
}

/// Unfiltered distillation; shares the target and reference stages with
/// [`run_pipeline`] under equal seeds.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    run_variants(cfg, &[Variant::baseline(cfg)])
}

/// Baseline and selective runs side by side.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    run_variants(cfg, &[Variant::baseline(cfg), Variant::selective(cfg)])
}

pub fn run_ablation(cfg: &ExperimentConfig, which: Ablation) -> Result<Vec<RunRecord>> {
    run_variants(cfg, &which.variants(cfg))
}

/// Reloads the checkpoints named in a record and recomputes its acceptance
/// rate without touching any cache.
pub fn reevaluate(cfg: &ExperimentConfig, record: &RunRecord) -> Result<f64> {
    let data = cfg.data(record.seed)?;
    let target = TinyLM::load(&record.stages[0].checkpoint)?;
    let draft = TinyLM::load(&record.stages.last().expect("stages").checkpoint)?;
    let mut totals = SDStats::default();
    for r in evaluate(&target, &draft, &data, &cfg.sd)? {
        totals.merge(&r.stats);
    }
    acceptance_from_counts(totals.accept, totals.reject)
}

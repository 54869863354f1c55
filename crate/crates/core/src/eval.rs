//! Meta-testing: sample `T` test tasks, adapt a copy of the model on each
//! task's support set, score it on the query set, and aggregate over seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::model::{self, Batch, ProjectionModel};
use crate::tasks::{materialize_episode, sample_test_tasks, TaskConfig};
use crate::train::{self, adam_step, AdamConfig, AdamState, Algorithm, TrainOverrides, TrainPlan, META_TEST_LR};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_ADAPT_EPOCHS: usize = 5;

/// Stream index for test-task sampling under an evaluation seed; kept apart
/// from the training streams of the same seed.
const STREAM_TEST_TASKS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestPlan {
    pub task_config: TaskConfig,
    pub adapt_lr: f64,
    pub adapt_epochs: usize,
    pub seeds: Vec<u64>,
    /// Worker threads; 1 runs everything on the calling thread.
    pub jobs: usize,
}

impl MetaTestPlan {
    pub fn new(task_config: TaskConfig) -> Self {
        Self {
            task_config,
            adapt_lr: META_TEST_LR,
            adapt_epochs: DEFAULT_ADAPT_EPOCHS,
            seeds: DEFAULT_SEEDS.to_vec(),
            jobs: 1,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.task_config.validate(num_classes)?;
        if !(self.adapt_lr > 0.0) {
            return Err(Error::Usage(format!("adaptation lr must be > 0, got {}", self.adapt_lr)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Usage("at least one seed is required".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Usage("jobs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub algorithm: Algorithm,
    pub n: usize,
    pub t: usize,
    pub seeds: Vec<u64>,
    /// One row of `T` query accuracies per seed.
    pub per_task_accuracy: Vec<Vec<f64>>,
    pub per_seed_mean: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_seed_mean`.
    pub std: f64,
    pub zero_shot_mean: Option<f64>,
}

impl EvalReport {
    pub fn from_runs(
        algorithm: Algorithm,
        config: TaskConfig,
        seeds: Vec<u64>,
        per_task_accuracy: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if seeds.is_empty() || seeds.len() != per_task_accuracy.len() {
            return Err(Error::Usage(format!(
                "{} seeds for {} accuracy rows",
                seeds.len(),
                per_task_accuracy.len()
            )));
        }
        if let Some(bad) = per_task_accuracy
            .iter()
            .flatten()
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::Usage(format!("accuracy {bad} outside [0, 1]")));
        }
        let per_seed_mean: Vec<f64> = per_task_accuracy.iter().map(|row| mean(row)).collect();
        let mean_acc = mean(&per_seed_mean);
        let std = population_std(&per_seed_mean);
        Ok(Self {
            dataset: String::new(),
            split: "test".into(),
            algorithm,
            n: config.n,
            t: config.t,
            seeds,
            per_task_accuracy,
            per_seed_mean,
            mean: mean_acc,
            std,
            zero_shot_mean: None,
        })
    }

    pub fn config(&self) -> TaskConfig {
        TaskConfig { n: self.n, t: self.t }
    }

    pub fn labeled(mut self, dataset: &str, split: &str) -> Self {
        self.dataset = dataset.into();
        self.split = split.into();
        self
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn population_std(values: &[f64]) -> f64 {
    let mu = mean(values);
    (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Runs `f` on a dedicated pool of `jobs` threads, or inline when `jobs <= 1`.
pub(crate) fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Query accuracies of one evaluation seed, in task order.
pub fn meta_test_seed(
    model: &ProjectionModel,
    ds: &EmbeddingDataset,
    plan: &MetaTestPlan,
    seed: u64,
    adapt: bool,
) -> Result<Vec<f64>> {
    model.check_dataset(ds)?;
    let tasks = sample_test_tasks(
        ds.num_classes(),
        &plan.task_config,
        &mut SeededRng::child(seed, STREAM_TEST_TASKS),
    )?;
    let run = |task| -> Result<f64> {
        let episode = materialize_episode(ds, task)?;
        let texts = ds.text_matrix(&episode.task.class_indices)?;
        let query = Batch::from_labeled(&episode.query, &texts)?;
        if !adapt {
            return model::accuracy(model, &query);
        }
        let support = Batch::from_labeled(&episode.support, &texts)?;
        let mut local = model.clone();
        let mut adam = AdamState::for_model(AdamConfig::with_lr(plan.adapt_lr), &local);
        for _ in 0..plan.adapt_epochs {
            let g = model::grads(&local, &support)?;
            adam_step(&mut local, &g, &mut adam)?;
        }
        model::accuracy(&local, &query)
    };
    if plan.jobs > 1 {
        tasks.par_iter().map(run).collect()
    } else {
        tasks.iter().map(run).collect()
    }
}

/// Meta-tests one model under every seed of `plan`. With
/// `Algorithm::ZeroShot` the model is scored on the query sets as-is.
pub fn meta_test(
    model: &ProjectionModel,
    ds: &EmbeddingDataset,
    plan: &MetaTestPlan,
    algorithm: Algorithm,
) -> Result<EvalReport> {
    plan.validate(ds.num_classes())?;
    let adapt = algorithm != Algorithm::ZeroShot;
    let rows = with_jobs(plan.jobs, || {
        let per_seed = |&seed: &u64| meta_test_seed(model, ds, plan, seed, adapt);
        if plan.jobs > 1 {
            plan.seeds.par_iter().map(per_seed).collect::<Result<Vec<_>>>()
        } else {
            plan.seeds.iter().map(per_seed).collect()
        }
    })??;
    EvalReport::from_runs(algorithm, plan.task_config, plan.seeds.clone(), rows)
}

/// Zero-shot meta-test with the dataset's pretrained projection.
pub fn meta_test_zero_shot(ds: &EmbeddingDataset, plan: &MetaTestPlan) -> Result<EvalReport> {
    let model = ProjectionModel::zero_shot(ds, 1.0, false)?;
    meta_test(&model, ds, plan, Algorithm::ZeroShot)
}

/// Trains (per seed) and meta-tests one algorithm at one task configuration.
/// Training and evaluation share each seed.
pub fn run_algorithm(
    ds: &EmbeddingDataset,
    algorithm: Algorithm,
    plan: &MetaTestPlan,
    overrides: &TrainOverrides,
) -> Result<EvalReport> {
    plan.validate(ds.num_classes())?;
    let rows = with_jobs(plan.jobs, || {
        let per_seed = |&seed: &u64| -> Result<Vec<f64>> {
            let train_plan = overrides.apply(TrainPlan::for_algorithm(algorithm, plan.task_config, seed));
            let model = train::train(ds, &train_plan)?.model;
            meta_test_seed(&model, ds, plan, seed, algorithm != Algorithm::ZeroShot)
        };
        if plan.jobs > 1 {
            plan.seeds.par_iter().map(per_seed).collect::<Result<Vec<_>>>()
        } else {
            plan.seeds.iter().map(per_seed).collect()
        }
    })??;
    EvalReport::from_runs(algorithm, plan.task_config, plan.seeds.clone(), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub algorithms: Vec<Algorithm>,
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub adapt_lr: f64,
    pub adapt_epochs: usize,
    pub jobs: usize,
    pub train: TrainOverrides,
    pub dataset_name: String,
    pub split: String,
}

impl SweepPlan {
    /// All four algorithms over `N = 2..M-1`.
    pub fn full(num_classes: usize) -> Self {
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            n_values: (2..num_classes).collect(),
            seeds: DEFAULT_SEEDS.to_vec(),
            adapt_lr: META_TEST_LR,
            adapt_epochs: DEFAULT_ADAPT_EPOCHS,
            jobs: 1,
            train: TrainOverrides::default(),
            dataset_name: "dataset".into(),
            split: "test".into(),
        }
    }
}

#[derive(Clone, Copy)]
struct Job {
    n_index: usize,
    algorithm: Algorithm,
    seed_index: usize,
}

/// For every `N`, sets `T` from the coverage rule, trains each algorithm with
/// that `(N, T)` (classical always trains on the single `M`-way task) and
/// meta-tests it. Reports come out ordered by `N`, then by algorithm as listed.
pub fn sweep(ds: &EmbeddingDataset, plan: &SweepPlan) -> Result<Vec<EvalReport>> {
    let m = ds.num_classes();
    if plan.algorithms.is_empty() || plan.n_values.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Usage("sweep needs algorithms, N values and seeds".into()));
    }
    let configs: Vec<TaskConfig> = plan
        .n_values
        .iter()
        .map(|&n| TaskConfig::auto(n, m))
        .collect::<Result<_>>()?;
    let eval_plan = |cfg: TaskConfig| MetaTestPlan {
        task_config: cfg,
        adapt_lr: plan.adapt_lr,
        adapt_epochs: plan.adapt_epochs,
        seeds: plan.seeds.clone(),
        jobs: 1,
    };
    for cfg in &configs {
        eval_plan(*cfg).validate(m)?;
    }
    let zero_shot = ds
        .pretrained_projection
        .as_ref()
        .map(|_| ProjectionModel::zero_shot(ds, 1.0, false))
        .transpose()?;
    if plan.algorithms.contains(&Algorithm::ZeroShot) && zero_shot.is_none() {
        return Err(Error::Config(
            "zero-shot requested but the dataset has no pretrained projection".into(),
        ));
    }

    let results = with_jobs(plan.jobs, || -> Result<BTreeMap<(usize, Algorithm, usize), Vec<f64>>> {
        // classical ignores (N, T): train it once per seed
        let classical: Vec<Option<ProjectionModel>> = if plan.algorithms.contains(&Algorithm::Classical) {
            let train_one = |&seed: &u64| {
                let p = plan.train.apply(TrainPlan::classical(seed));
                train::train_classical(ds, &p).map(|o| Some(o.model))
            };
            if plan.jobs > 1 {
                plan.seeds.par_iter().map(train_one).collect::<Result<_>>()?
            } else {
                plan.seeds.iter().map(train_one).collect::<Result<_>>()?
            }
        } else {
            vec![None; plan.seeds.len()]
        };

        let mut jobs = Vec::new();
        for n_index in 0..configs.len() {
            for &algorithm in &plan.algorithms {
                for seed_index in 0..plan.seeds.len() {
                    jobs.push(Job {
                        n_index,
                        algorithm,
                        seed_index,
                    });
                }
            }
        }
        let run = |job: &Job| -> Result<((usize, Algorithm, usize), Vec<f64>)> {
            let cfg = configs[job.n_index];
            let seed = plan.seeds[job.seed_index];
            let ep = eval_plan(cfg);
            let acc = match job.algorithm {
                Algorithm::ZeroShot => {
                    let zs = zero_shot.as_ref().expect("checked above");
                    meta_test_seed(zs, ds, &ep, seed, false)?
                }
                Algorithm::Classical => {
                    let model = classical[job.seed_index].as_ref().expect("trained above");
                    meta_test_seed(model, ds, &ep, seed, true)?
                }
                alg => {
                    let p = plan.train.apply(TrainPlan::for_algorithm(alg, cfg, seed));
                    let model = train::train(ds, &p)?.model;
                    meta_test_seed(&model, ds, &ep, seed, true)?
                }
            };
            Ok(((job.n_index, job.algorithm, job.seed_index), acc))
        };
        let done: Vec<_> = if plan.jobs > 1 {
            jobs.par_iter().map(run).collect::<Result<_>>()?
        } else {
            jobs.iter().map(run).collect::<Result<_>>()?
        };
        Ok(done.into_iter().collect())
    })??;

    let mut reports = Vec::new();
    for (n_index, cfg) in configs.iter().enumerate() {
        let zs_mean = match &zero_shot {
            Some(zs) if !plan.algorithms.contains(&Algorithm::ZeroShot) => {
                let rows: Vec<Vec<f64>> = plan
                    .seeds
                    .iter()
                    .map(|&s| meta_test_seed(zs, ds, &eval_plan(*cfg), s, false))
                    .collect::<Result<_>>()?;
                Some(mean(&rows.iter().map(|r| mean(r)).collect::<Vec<_>>()))
            }
            _ => None,
        };
        let mut group = Vec::new();
        for &algorithm in &plan.algorithms {
            let rows = (0..plan.seeds.len())
                .map(|s| results[&(n_index, algorithm, s)].clone())
                .collect();
            group.push(
                EvalReport::from_runs(algorithm, *cfg, plan.seeds.clone(), rows)?
                    .labeled(&plan.dataset_name, &plan.split),
            );
        }
        let zs_mean = zs_mean.or_else(|| {
            group
                .iter()
                .find(|r| r.algorithm == Algorithm::ZeroShot)
                .map(|r| r.mean)
        });
        for r in &mut group {
            r.zero_shot_mean = zs_mean;
        }
        reports.extend(group);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinnerRow {
    pub dataset: String,
    pub split: String,
    pub n: usize,
    pub t: usize,
    pub zero_shot_mean: Option<f64>,
    /// Every algorithm attaining the best mean (several on exact ties).
    pub winners: Vec<Algorithm>,
    pub best_mean: f64,
}

/// Best-performing algorithm(s) per configuration, sorted by zero-shot mean
/// (rows without one go last).
pub fn winner_map(reports: &[EvalReport]) -> Result<Vec<WinnerRow>> {
    let mut groups: BTreeMap<(String, String, usize, usize), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.dataset.clone(), r.split.clone(), r.n, r.t))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((dataset, split, n, t), group) in groups {
        if group.len() < 2 {
            return Err(Error::Usage(format!(
                "winner map needs at least 2 algorithms for ({n}, {t}), found {}",
                group.len()
            )));
        }
        let best = group.iter().map(|r| r.mean).fold(f64::NEG_INFINITY, f64::max);
        let winners = group
            .iter()
            .filter(|r| r.mean == best)
            .map(|r| r.algorithm)
            .collect();
        let zero_shot_mean = group
            .iter()
            .find(|r| r.algorithm == Algorithm::ZeroShot)
            .map(|r| r.mean)
            .or_else(|| group.iter().find_map(|r| r.zero_shot_mean));
        rows.push(WinnerRow {
            dataset,
            split,
            n,
            t,
            zero_shot_mean,
            winners,
            best_mean: best,
        });
    }
    rows.sort_by(|a, b| {
        let key = |r: &WinnerRow| r.zero_shot_mean.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.n.cmp(&b.n))
    });
    Ok(rows)
}

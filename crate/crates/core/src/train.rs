//! Adam and the three training procedures: classical fine-tuning, MAMF
//! (sequential fine-tuning over uniformly sampled tasks) and first-order MAML.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::model::{self, Batch, Gradients, ProjectionModel};
use crate::tasks::{materialize_train_episode, sample_tasks, task_train_batch, Task, TaskConfig, TaskSource};

pub const TRAIN_LR: f64 = 1e-6;
pub const META_TEST_LR: f64 = 1e-7;

// child-stream indices under the plan seed
const STREAM_INIT: u64 = 0;
/// RNG stream of the training-task sequence; sampling with `SeededRng::child(seed,
/// STREAM_TASKS)` reproduces the tasks MAMF trains on under `seed`.
pub const STREAM_TASKS: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_SPLITS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    pub fn for_model(config: AdamConfig, model: &ProjectionModel) -> Self {
        Self::new(config, &[model.w_img.shape(), model.w_txt.shape()])
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "adam state tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.check_same_shape("adam param", m)?;
            g.check_same_shape("adam grad", m)?;
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter {i} became non-finite at adam step {}",
                    self.t
                )));
            }
        }
        Ok(())
    }
}

/// One Adam update of both projections.
pub fn adam_step(model: &mut ProjectionModel, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(&mut [&mut model.w_img, &mut model.w_txt], &[&grads.d_img, &grads.d_txt])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(rename = "zeroshot")]
    ZeroShot,
    Classical,
    Mamf,
    Fomaml,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::ZeroShot,
        Algorithm::Classical,
        Algorithm::Mamf,
        Algorithm::Fomaml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ZeroShot => "zeroshot",
            Algorithm::Classical => "classical",
            Algorithm::Mamf => "mamf",
            Algorithm::Fomaml => "fomaml",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown algorithm {s:?} (expected zeroshot, classical, mamf or fomaml)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub algorithm: Algorithm,
    /// Training task shape for MAMF and FOMAML; unused otherwise.
    pub task_config: Option<TaskConfig>,
    /// Epochs for classical, epochs per task for MAMF, passes for FOMAML.
    pub epochs_per_task: usize,
    pub lr: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub batch_mode: BatchMode,
    pub seed: u64,
    pub scale: f64,
    pub normalize: bool,
    /// MAMF: start every task with fresh Adam moments.
    pub reset_adam_per_task: bool,
    /// FOMAML: draw a new task sequence on every pass.
    pub resample_each_pass: bool,
    /// FOMAML: share of each class's train rows used as the inner support set.
    pub support_fraction: f64,
}

impl TrainPlan {
    fn base(algorithm: Algorithm, task_config: Option<TaskConfig>, epochs: usize, seed: u64) -> Self {
        Self {
            algorithm,
            task_config,
            epochs_per_task: epochs,
            lr: TRAIN_LR,
            inner_steps: 1,
            inner_lr: 1e-6,
            batch_mode: BatchMode::Full,
            seed,
            scale: 1.0,
            normalize: false,
            reset_adam_per_task: false,
            resample_each_pass: true,
            support_fraction: 0.5,
        }
    }

    pub fn zero_shot() -> Self {
        Self::base(Algorithm::ZeroShot, None, 0, 0)
    }

    pub fn classical(seed: u64) -> Self {
        Self::base(Algorithm::Classical, None, 50, seed)
    }

    pub fn mamf(task_config: TaskConfig, seed: u64) -> Self {
        Self::base(Algorithm::Mamf, Some(task_config), 10, seed)
    }

    pub fn fomaml(task_config: TaskConfig, seed: u64) -> Self {
        Self::base(Algorithm::Fomaml, Some(task_config), 10, seed)
    }

    /// Default plan for `algorithm`; `task_config` is ignored where unused.
    pub fn for_algorithm(algorithm: Algorithm, task_config: TaskConfig, seed: u64) -> Self {
        match algorithm {
            Algorithm::ZeroShot => Self::zero_shot(),
            Algorithm::Classical => Self::classical(seed),
            Algorithm::Mamf => Self::mamf(task_config, seed),
            Algorithm::Fomaml => Self::fomaml(task_config, seed),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Usage(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if let BatchMode::Minibatch(0) = self.batch_mode {
            return Err(Error::Usage("minibatch size must be positive".into()));
        }
        match self.algorithm {
            Algorithm::Mamf | Algorithm::Fomaml => {
                self.task_config
                    .ok_or_else(|| Error::Usage(format!("{} needs a task configuration", self.algorithm)))?
                    .validate(num_classes)?;
            }
            _ => {}
        }
        if self.algorithm == Algorithm::Fomaml && !(self.inner_lr > 0.0) {
            return Err(Error::Usage(format!("inner learning rate must be > 0, got {}", self.inner_lr)));
        }
        Ok(())
    }

    fn expect(&self, algorithm: Algorithm) -> Result<()> {
        if self.algorithm != algorithm {
            return Err(Error::Usage(format!(
                "plan is for {}, called the {algorithm} trainer",
                self.algorithm
            )));
        }
        Ok(())
    }

    fn task_config(&self) -> TaskConfig {
        self.task_config.expect("validated plan has a task configuration")
    }
}

/// Optional replacements for the per-algorithm defaults, as read from a
/// config file or command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub inner_steps: Option<usize>,
    pub inner_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub scale: Option<f64>,
    pub normalize: Option<bool>,
    pub reset_adam_per_task: Option<bool>,
    pub resample_each_pass: Option<bool>,
    pub support_fraction: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut plan: TrainPlan) -> TrainPlan {
        if let Some(v) = self.epochs {
            plan.epochs_per_task = v;
        }
        if let Some(v) = self.lr {
            plan.lr = v;
        }
        if let Some(v) = self.inner_steps {
            plan.inner_steps = v;
        }
        if let Some(v) = self.inner_lr {
            plan.inner_lr = v;
        }
        if let Some(v) = self.batch_size {
            plan.batch_mode = BatchMode::Minibatch(v);
        }
        if let Some(v) = self.scale {
            plan.scale = v;
        }
        if let Some(v) = self.normalize {
            plan.normalize = v;
        }
        if let Some(v) = self.reset_adam_per_task {
            plan.reset_adam_per_task = v;
        }
        if let Some(v) = self.resample_each_pass {
            plan.resample_each_pass = v;
        }
        if let Some(v) = self.support_fraction {
            plan.support_fraction = v;
        }
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: u64,
    pub task_id: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    pub log: Vec<LogEntry>,
    /// Total Adam updates applied to the returned parameters.
    pub adam_steps: u64,
}

fn batches_per_epoch(rows: usize, mode: BatchMode) -> usize {
    match mode {
        BatchMode::Full => 1,
        BatchMode::Minibatch(size) => rows.div_ceil(size),
    }
}

/// Adam updates a plan performs on `ds`, in closed form.
pub fn expected_adam_steps(ds: &EmbeddingDataset, plan: &TrainPlan) -> u64 {
    let (n_train, _, _) = ds.split_counts();
    let e = plan.epochs_per_task as u64;
    match plan.algorithm {
        Algorithm::ZeroShot => 0,
        Algorithm::Classical => {
            e * batches_per_epoch(ds.num_classes() * n_train, plan.batch_mode) as u64
        }
        Algorithm::Mamf => {
            let cfg = plan.task_config();
            cfg.t as u64 * e * batches_per_epoch(cfg.n * n_train, plan.batch_mode) as u64
        }
        Algorithm::Fomaml => plan.task_config().t as u64 * e,
    }
}

struct Fitter<'a> {
    adam: AdamState,
    batch_mode: BatchMode,
    batch_rng: SeededRng,
    log: &'a mut Vec<LogEntry>,
    steps: u64,
}

impl Fitter<'_> {
    fn step(&mut self, model: &mut ProjectionModel, batch: &Batch, task_id: usize) -> Result<()> {
        let (loss, g) = model::loss_and_grads(model, batch)?;
        adam_step(model, &g, &mut self.adam).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (training step {})", self.steps)),
            other => other,
        })?;
        self.log.push(LogEntry {
            step: self.steps,
            task_id,
            loss,
        });
        self.steps += 1;
        Ok(())
    }

    fn fit(&mut self, model: &mut ProjectionModel, batch: &Batch, epochs: usize, task_id: usize) -> Result<()> {
        for _ in 0..epochs {
            match self.batch_mode {
                BatchMode::Full => self.step(model, batch, task_id)?,
                BatchMode::Minibatch(size) => {
                    let mut order: Vec<usize> = (0..batch.len()).collect();
                    order.shuffle(&mut self.batch_rng);
                    for chunk in order.chunks(size) {
                        let sub = batch.select(chunk)?;
                        self.step(model, &sub, task_id)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn init_model(ds: &EmbeddingDataset, plan: &TrainPlan) -> Result<ProjectionModel> {
    let mut rng = SeededRng::child(plan.seed, STREAM_INIT);
    ProjectionModel::kaiming(ds.d_img, ds.d_txt, ds.d_joint, plan.scale, plan.normalize, &mut rng)
}

fn train_batch(ds: &EmbeddingDataset, task: &Task) -> Result<Batch> {
    let rows = task_train_batch(ds, task)?;
    Batch::new(rows.images, rows.labels, ds.text_matrix(&task.class_indices)?)
}

/// Joint training on the single `M`-way task over the train partition.
pub fn train_classical(ds: &EmbeddingDataset, plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.expect(Algorithm::Classical)?;
    plan.validate(ds.num_classes())?;
    let mut model = init_model(ds, plan)?;
    let task = Task::new((0..ds.num_classes()).collect(), TaskSource::Train, ds.num_classes())?;
    let batch = train_batch(ds, &task)?;
    let mut log = Vec::new();
    let mut fitter = Fitter {
        adam: AdamState::for_model(AdamConfig::with_lr(plan.lr), &model),
        batch_mode: plan.batch_mode,
        batch_rng: SeededRng::child(plan.seed, STREAM_BATCHES),
        log: &mut log,
        steps: 0,
    };
    fitter.fit(&mut model, &batch, plan.epochs_per_task, 0)?;
    let adam_steps = fitter.steps;
    Ok(TrainOutcome {
        model,
        log,
        adam_steps,
    })
}

/// Sequential fine-tuning over `T` uniformly sampled `N`-way tasks. Each task
/// trains on all train rows of its classes (no support/query split) and
/// starts from the parameters the previous task ended with.
pub fn train_mamf(ds: &EmbeddingDataset, plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.expect(Algorithm::Mamf)?;
    plan.validate(ds.num_classes())?;
    let mut model = init_model(ds, plan)?;
    let tasks = sample_tasks(
        ds.num_classes(),
        &plan.task_config(),
        &mut SeededRng::child(plan.seed, STREAM_TASKS),
    )?;
    let adam_config = AdamConfig::with_lr(plan.lr);
    let mut log = Vec::new();
    let mut fitter = Fitter {
        adam: AdamState::for_model(adam_config, &model),
        batch_mode: plan.batch_mode,
        batch_rng: SeededRng::child(plan.seed, STREAM_BATCHES),
        log: &mut log,
        steps: 0,
    };
    for (task_id, task) in tasks.iter().enumerate() {
        if plan.reset_adam_per_task {
            fitter.adam = AdamState::for_model(adam_config, &model);
        }
        let batch = train_batch(ds, task)?;
        fitter.fit(&mut model, &batch, plan.epochs_per_task, task_id)?;
    }
    let adam_steps = fitter.steps;
    Ok(TrainOutcome {
        model,
        log,
        adam_steps,
    })
}

/// Parameters after `steps` plain gradient-descent steps on `batch`.
pub fn adapt_sgd(model: &ProjectionModel, batch: &Batch, steps: usize, lr: f64) -> Result<ProjectionModel> {
    let mut adapted = model.clone();
    for step in 0..steps {
        let g = model::grads(&adapted, batch)?;
        adapted.w_img = adapted.w_img.add_scaled(&g.d_img, -lr)?;
        adapted.w_txt = adapted.w_txt.add_scaled(&g.d_txt, -lr)?;
        if !adapted.is_finite() {
            return Err(Error::NonFinite(format!("inner step {step} produced non-finite parameters")));
        }
    }
    Ok(adapted)
}

/// First-order meta-gradient: adapt a copy of `model` on `support`, then take
/// a fresh forward/backward pass of the query loss at the adapted parameters.
/// Returns the query loss and its gradient there.
pub fn fomaml_outer_gradient(
    model: &ProjectionModel,
    support: &Batch,
    query: &Batch,
    inner_steps: usize,
    inner_lr: f64,
) -> Result<(f64, Gradients)> {
    let adapted = adapt_sgd(model, support, inner_steps, inner_lr)?;
    model::loss_and_grads(&adapted, query)
}

/// First-order MAML with one task per meta-batch: for each sampled task the
/// query-loss gradient at the inner-adapted parameters drives one outer Adam
/// step on the original parameters.
pub fn train_fomaml(ds: &EmbeddingDataset, plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.expect(Algorithm::Fomaml)?;
    plan.validate(ds.num_classes())?;
    let mut model = init_model(ds, plan)?;
    let cfg = plan.task_config();
    let mut task_rng = SeededRng::child(plan.seed, STREAM_TASKS);
    let mut split_rng = SeededRng::child(plan.seed, STREAM_SPLITS);
    let mut adam = AdamState::for_model(AdamConfig::with_lr(plan.lr), &model);
    let mut log = Vec::new();
    let mut tasks = sample_tasks(ds.num_classes(), &cfg, &mut task_rng)?;
    for pass in 0..plan.epochs_per_task {
        if pass > 0 && plan.resample_each_pass {
            tasks = sample_tasks(ds.num_classes(), &cfg, &mut task_rng)?;
        }
        for (task_id, task) in tasks.iter().enumerate() {
            let episode = materialize_train_episode(ds, task, plan.support_fraction, &mut split_rng)?;
            let texts = ds.text_matrix(&task.class_indices)?;
            let support = Batch::from_labeled(&episode.support, &texts)?;
            let query = Batch::from_labeled(&episode.query, &texts)?;
            let (loss, g) = fomaml_outer_gradient(&model, &support, &query, plan.inner_steps, plan.inner_lr)?;
            let step = adam.steps();
            adam_step(&mut model, &g, &mut adam)?;
            log.push(LogEntry { step, task_id, loss });
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        adam_steps: adam.steps(),
    })
}

/// Runs the trainer selected by `plan.algorithm`. Zero-shot returns the
/// dataset's pretrained head untouched.
pub fn train(ds: &EmbeddingDataset, plan: &TrainPlan) -> Result<TrainOutcome> {
    match plan.algorithm {
        Algorithm::ZeroShot => Ok(TrainOutcome {
            model: ProjectionModel::zero_shot(ds, plan.scale, plan.normalize)?,
            log: Vec::new(),
            adam_steps: 0,
        }),
        Algorithm::Classical => train_classical(ds, plan),
        Algorithm::Mamf => train_mamf(ds, plan),
        Algorithm::Fomaml => train_fomaml(ds, plan),
    }
}

//! Uniform N-way task sampling and episode materialization.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Partition};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

/// Failure probability used to size task sequences.
pub const DEFAULT_P_FAIL: f64 = 0.001;

/// `N`-way tasks, `T` of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n: usize,
    pub t: usize,
}

impl TaskConfig {
    pub fn new(n: usize, t: usize, num_classes: usize) -> Result<Self> {
        let cfg = Self { n, t };
        cfg.validate(num_classes)?;
        Ok(cfg)
    }

    /// `T` chosen by [`required_tasks`].
    pub fn auto(n: usize, num_classes: usize) -> Result<Self> {
        Self::new(n, required_tasks(num_classes, n, DEFAULT_P_FAIL)?, num_classes)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.n < 2 || self.n > num_classes {
            return Err(Error::Usage(format!(
                "task size N={} must satisfy 2 <= N <= M={num_classes}",
                self.n
            )));
        }
        if self.t == 0 {
            return Err(Error::Usage("task count T must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which per-class partitions a task draws its rows from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskSource {
    Train,
    SupportQuery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    /// Distinct dataset class indices; local label `i` is `class_indices[i]`.
    pub class_indices: Vec<usize>,
    pub source: TaskSource,
}

impl Task {
    pub fn new(class_indices: Vec<usize>, source: TaskSource, num_classes: usize) -> Result<Self> {
        if class_indices.len() < 2 {
            return Err(Error::Usage("a task needs at least 2 classes".into()));
        }
        let mut seen = vec![false; num_classes];
        for &c in &class_indices {
            if c >= num_classes {
                return Err(Error::Usage(format!(
                    "class index {c} out of range for M={num_classes}"
                )));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Usage(format!("class index {c} repeated in task")));
            }
        }
        Ok(Self {
            class_indices,
            source,
        })
    }

    pub fn n(&self) -> usize {
        self.class_indices.len()
    }
}

/// Image rows with local labels in `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: Task,
    /// Set A: adaptation rows.
    pub support: LabeledImages,
    /// Set B: evaluation rows.
    pub query: LabeledImages,
}

/// Number of tasks needed so that each class is left out of every task with
/// probability at most `p_fail`: `ln(p_fail) / ln(1 - N/M)`, rounded to the
/// nearest integer (minimum 1). Returns 1 when `N == M`.
pub fn required_tasks(num_classes: usize, n: usize, p_fail: f64) -> Result<usize> {
    if n < 2 || n > num_classes {
        return Err(Error::Usage(format!(
            "task size N={n} must satisfy 2 <= N <= M={num_classes}"
        )));
    }
    if !(p_fail > 0.0 && p_fail < 1.0) {
        return Err(Error::Usage(format!("p_fail must be in (0, 1), got {p_fail}")));
    }
    if n == num_classes {
        return Ok(1);
    }
    let t = p_fail.ln() / (1.0 - n as f64 / num_classes as f64).ln();
    Ok((t.round() as usize).max(1))
}

/// `T` independent uniformly random `N`-subsets of `0..M`, each sorted
/// ascending. Duplicates across tasks are allowed.
pub fn sample_tasks(num_classes: usize, config: &TaskConfig, rng: &mut SeededRng) -> Result<Vec<Task>> {
    config.validate(num_classes)?;
    Ok((0..config.t)
        .map(|_| {
            let mut class_indices = index::sample(rng, num_classes, config.n).into_vec();
            class_indices.sort_unstable();
            Task {
                class_indices,
                source: TaskSource::Train,
            }
        })
        .collect())
}

/// Like [`sample_tasks`] but tagged for meta-testing (support/query partitions).
pub fn sample_test_tasks(num_classes: usize, config: &TaskConfig, rng: &mut SeededRng) -> Result<Vec<Task>> {
    let mut tasks = sample_tasks(num_classes, config, rng)?;
    for t in &mut tasks {
        t.source = TaskSource::SupportQuery;
    }
    Ok(tasks)
}

fn check_task(ds: &EmbeddingDataset, task: &Task) -> Result<()> {
    Task::new(task.class_indices.clone(), task.source, ds.num_classes()).map(|_| ())
}

/// Stacks whole partitions of the task's classes with local labels.
pub fn gather(ds: &EmbeddingDataset, task: &Task, which: Partition) -> Result<LabeledImages> {
    check_task(ds, task)?;
    let parts: Vec<&Matrix> = task
        .class_indices
        .iter()
        .map(|&c| ds.classes[c].partition(which))
        .collect();
    let labels = parts
        .iter()
        .enumerate()
        .flat_map(|(label, m)| std::iter::repeat_n(label, m.rows()))
        .collect();
    Ok(LabeledImages {
        images: Matrix::vstack(&parts)?,
        labels,
    })
}

/// All train rows of a task, unsplit (the batch used by classical
/// fine-tuning and MAMF).
pub fn task_train_batch(ds: &EmbeddingDataset, task: &Task) -> Result<LabeledImages> {
    gather(ds, task, Partition::Train)
}

/// Builds the support/query episode for a task.
///
/// Meta-test tasks take the stored support and query partitions. Train tasks
/// split each class's train partition positionally: the first
/// `round(n_train / 2)` rows form the support set.
pub fn materialize_episode(ds: &EmbeddingDataset, task: &Task) -> Result<Episode> {
    match task.source {
        TaskSource::SupportQuery => Ok(Episode {
            task: task.clone(),
            support: gather(ds, task, Partition::Support)?,
            query: gather(ds, task, Partition::Query)?,
        }),
        TaskSource::Train => {
            let (n_train, _, _) = ds.split_counts();
            let k = support_rows(n_train, 0.5)?;
            let order: Vec<usize> = (0..n_train).collect();
            split_train(ds, task, &order, k)
        }
    }
}

/// Random per-class split of the train partition into support/query with
/// `support_fraction` of the rows (rounded) in the support set.
pub fn materialize_train_episode(
    ds: &EmbeddingDataset,
    task: &Task,
    support_fraction: f64,
    rng: &mut SeededRng,
) -> Result<Episode> {
    check_task(ds, task)?;
    let (n_train, _, _) = ds.split_counts();
    let k = support_rows(n_train, support_fraction)?;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(rng);
    split_train(ds, task, &order, k)
}

fn support_rows(n_train: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Usage(format!(
            "support fraction must be in (0, 1), got {fraction}"
        )));
    }
    let k = (n_train as f64 * fraction).round() as usize;
    if k == 0 || k >= n_train {
        return Err(Error::Sizing(format!(
            "train partition of {n_train} rows cannot be split {fraction} / {} into non-empty support and query sets",
            1.0 - fraction
        )));
    }
    Ok(k)
}

fn split_train(ds: &EmbeddingDataset, task: &Task, order: &[usize], k: usize) -> Result<Episode> {
    check_task(ds, task)?;
    let mut support_parts = Vec::with_capacity(task.n());
    let mut query_parts = Vec::with_capacity(task.n());
    for &c in &task.class_indices {
        let train = &ds.classes[c].train;
        support_parts.push(train.select_rows(&order[..k])?);
        query_parts.push(train.select_rows(&order[k..])?);
    }
    let labels = |parts: &[Matrix]| -> Vec<usize> {
        parts
            .iter()
            .enumerate()
            .flat_map(|(label, m)| std::iter::repeat_n(label, m.rows()))
            .collect()
    };
    let support_refs: Vec<&Matrix> = support_parts.iter().collect();
    let query_refs: Vec<&Matrix> = query_parts.iter().collect();
    Ok(Episode {
        task: task.clone(),
        support: LabeledImages {
            images: Matrix::vstack(&support_refs)?,
            labels: labels(&support_parts),
        },
        query: LabeledImages {
            images: Matrix::vstack(&query_refs)?,
            labels: labels(&query_parts),
        },
    })
}

/// Monte-Carlo frequency with which `T` sampled `N`-way tasks cover all `M`
/// classes.
pub fn coverage_frequency(
    num_classes: usize,
    config: &TaskConfig,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    config.validate(num_classes)?;
    let mut covered = 0usize;
    let mut seen = vec![false; num_classes];
    for _ in 0..trials {
        seen.iter_mut().for_each(|s| *s = false);
        let mut count = 0;
        for _ in 0..config.t {
            for c in index::sample(rng, num_classes, config.n) {
                if !std::mem::replace(&mut seen[c], true) {
                    count += 1;
                }
            }
        }
        covered += usize::from(count == num_classes);
    }
    Ok(covered as f64 / trials as f64)
}

//! Task streams, datasets, and accuracy bookkeeping.
//!
//! Two data sources: a 2-D synthetic five-task stream whose geometry is
//! fixed here (so results are reproducible from the constants alone), and
//! split image classification from IDX files, with a deterministic 784-D
//! blob surrogate when no files are on disk so the full suite runs
//! offline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{LabeledBatch, Labels};
use crate::{Error, Result};

/// How task labels are presented to the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Every task is a fresh binary problem with labels {0, 1}.
    DomainIncremental,
    /// Labels keep their global identity; one shared output space.
    ClassIncremental,
}

/// One task: train and test splits plus the original class identities.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    /// Original label values present in this task.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub protocol: Protocol,
    /// Size of the global label space (2 for domain-incremental streams).
    pub n_classes_total: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.x.ncols()
    }

    /// Union of all tasks, for multi-task baselines.
    pub fn pooled(&self) -> Result<(LabeledBatch, LabeledBatch)> {
        let trains: Vec<&LabeledBatch> = self.tasks.iter().map(|t| &t.train).collect();
        let tests: Vec<&LabeledBatch> = self.tasks.iter().map(|t| &t.test).collect();
        Ok((LabeledBatch::concat(&trains)?, LabeledBatch::concat(&tests)?))
    }

    fn validate(self) -> Result<Self> {
        if self.tasks.is_empty() {
            return Err(Error::EmptyInput("task stream with no tasks".into()));
        }
        let dim = self.tasks[0].train.x.ncols();
        for t in &self.tasks {
            if t.train.x.ncols() != dim || t.test.x.ncols() != dim {
                return Err(Error::shape("task stream", format!("task {} has a different input width", t.name)));
            }
        }
        if self.protocol == Protocol::ClassIncremental {
            let mut seen = std::collections::HashSet::new();
            for t in &self.tasks {
                for &c in &t.classes {
                    if !seen.insert(c) {
                        return Err(Error::invalid(format!(
                            "class {c} appears in more than one task"
                        )));
                    }
                }
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Per task, one blob above and one below the x-axis at the same x;
    /// which one carries class 0 alternates from task to task.
    Gaussians,
    /// Per task, a left and a right blob on the x-axis; class 0 is
    /// always the left one, so the stripe pattern alternates along x.
    StripBands,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub kind: ToyKind,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            kind: ToyKind::Gaussians,
            n_train_per_class: 100,
            n_test_per_class: 100,
            noise_std: 0.28,
            seed: 0,
        }
    }
}

/// Task x-locations for the toy streams.
pub const TOY_TASK_X: [f64; 5] = [-4.0, -2.0, 0.0, 2.0, 4.0];
/// Vertical offset of the paired blobs in the `Gaussians` stream.
pub const TOY_BLOB_Y: f64 = 1.5;
/// Horizontal half-gap of the paired blobs in the `StripBands` stream.
pub const TOY_BAND_HALF_GAP: f64 = 0.5;

/// Five sequential binary tasks over 2-D Gaussian blobs, progressing
/// left to right. Adjacent tasks disagree about which side carries which
/// class, so a learner that overwrites its weights forgets; the pooled
/// problem is still cleanly separable by a small network.
pub fn gen_toy_tasks(cfg: &ToyConfig) -> Result<TaskStream> {
    if cfg.n_train_per_class == 0 || cfg.n_test_per_class == 0 {
        return Err(Error::invalid("toy tasks need train and test points"));
    }
    if !(cfg.noise_std > 0.0) {
        return Err(Error::invalid("toy noise std must be positive"));
    }
    let mut tasks = Vec::with_capacity(TOY_TASK_X.len());
    for (k, &xk) in TOY_TASK_X.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + k as u64));
        let (c0, c1) = match cfg.kind {
            ToyKind::Gaussians => {
                let top = (xk, TOY_BLOB_Y);
                let bottom = (xk, -TOY_BLOB_Y);
                if k % 2 == 0 { (top, bottom) } else { (bottom, top) }
            }
            ToyKind::StripBands => {
                ((xk - TOY_BAND_HALF_GAP, 0.0), (xk + TOY_BAND_HALF_GAP, 0.0))
            }
        };
        let n_total = cfg.n_train_per_class + cfg.n_test_per_class;
        let draw = |rng: &mut ChaCha8Rng, center: (f64, f64), n: usize| -> Array2<f64> {
            Array2::from_shape_fn((n, 2), |(_, j)| {
                let c = if j == 0 { center.0 } else { center.1 };
                c + cfg.noise_std * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let pts0 = draw(&mut rng, c0, n_total);
        let pts1 = draw(&mut rng, c1, n_total);

        let make = |range: std::ops::Range<usize>| -> Result<LabeledBatch> {
            let n = range.len();
            let mut x = Array2::zeros((2 * n, 2));
            let mut y = Array1::zeros(2 * n);
            for (i, idx) in range.clone().enumerate() {
                x.row_mut(i).assign(&pts0.row(idx));
                y[i] = 0.0;
                x.row_mut(n + i).assign(&pts1.row(idx));
                y[n + i] = 1.0;
            }
            LabeledBatch::new(x, Labels::Binary(y))
        };
        tasks.push(Task {
            name: format!("toy-{}", k + 1),
            train: make(0..cfg.n_train_per_class)?,
            test: make(cfg.n_train_per_class..n_total)?,
            classes: vec![0, 1],
        });
    }
    TaskStream {
        tasks,
        protocol: Protocol::DomainIncremental,
        n_classes_total: 2,
    }
    .validate()
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("sliced 4")))
        .ok_or_else(|| Error::Truncated {
            path: path.display().to_string(),
            needed: at + 4,
            had: bytes.len(),
        })
}

/// IDX image file to a (n, rows*cols) matrix with pixels scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::WrongMagic {
            path: path.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let rows = read_be_u32(&bytes, 8, path)? as usize;
    let cols = read_be_u32(&bytes, 12, path)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed,
            had: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Array2::from_shape_vec((n, rows * cols), data)
        .map_err(|e| Error::shape("idx images", e.to_string()))
}

/// IDX label file to integer labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::WrongMagic {
            path: path.display().to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed,
            had: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Load the four standard IDX files from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<(LabeledBatch, LabeledBatch)> {
    let pair = |imgs: &str, labels: &str| -> Result<LabeledBatch> {
        let x = load_idx_images(&dir.join(imgs))?;
        let y = load_idx_labels(&dir.join(labels))?;
        if x.nrows() != y.len() {
            return Err(Error::CountMismatch {
                path: dir.join(labels).display().to_string(),
                detail: format!("{} images but {} labels", x.nrows(), y.len()),
            });
        }
        LabeledBatch::new(x, Labels::Classes(y))
    };
    Ok((
        pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Class means are drawn as blob_scale * N(0, I).
    pub blob_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            n_train_per_class: 250,
            n_test_per_class: 100,
            dim: 784,
            n_classes: 10,
            blob_scale: 0.35,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// Deterministic stand-in for the image data: one Gaussian blob per
/// class in the full input dimension.
pub fn gen_surrogate(cfg: &SurrogateConfig) -> Result<(LabeledBatch, LabeledBatch)> {
    if cfg.n_train_per_class == 0 || cfg.n_test_per_class == 0 || cfg.n_classes == 0 || cfg.dim == 0
    {
        return Err(Error::invalid("surrogate needs classes, points, and a dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5b10_b5));
    let means = Array2::from_shape_fn((cfg.n_classes, cfg.dim), |_| {
        cfg.blob_scale * rng.sample::<f64, _>(StandardNormal)
    });
    let mut gen_split = |n_per_class: usize| -> Result<LabeledBatch> {
        let n = n_per_class * cfg.n_classes;
        let mut x = Array2::zeros((n, cfg.dim));
        let mut y = Vec::with_capacity(n);
        for c in 0..cfg.n_classes {
            for i in 0..n_per_class {
                let row = c * n_per_class + i;
                for j in 0..cfg.dim {
                    x[[row, j]] =
                        means[[c, j]] + cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
                y.push(c);
            }
        }
        LabeledBatch::new(x, Labels::Classes(y))
    };
    let train = gen_split(cfg.n_train_per_class)?;
    let test = gen_split(cfg.n_test_per_class)?;
    Ok((train, test))
}

/// Where the image data actually came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "path")]
pub enum DataSource {
    Idx(PathBuf),
    Synthetic,
}

/// Environment override for the IDX directory.
pub const IDX_DIR_ENV: &str = "BCL_MNIST_DIR";

/// Resolve image data: explicit directory, then the environment
/// override, then ./data/mnist, then the synthetic surrogate.
pub fn images_or_surrogate(
    dir: Option<&Path>,
    surrogate: &SurrogateConfig,
) -> Result<(LabeledBatch, LabeledBatch, DataSource)> {
    if let Some(d) = dir {
        let (train, test) = load_idx_dir(d)?;
        return Ok((train, test, DataSource::Idx(d.to_path_buf())));
    }
    let mut candidates = Vec::new();
    if let Ok(env_dir) = std::env::var(IDX_DIR_ENV) {
        candidates.push(PathBuf::from(env_dir));
    }
    candidates.push(PathBuf::from("data/mnist"));
    for d in candidates {
        if d.join("train-images-idx3-ubyte").exists() {
            let (train, test) = load_idx_dir(&d)?;
            return Ok((train, test, DataSource::Idx(d)));
        }
    }
    let (train, test) = gen_surrogate(surrogate)?;
    Ok((train, test, DataSource::Synthetic))
}

/// Carve class-labeled data into two-class tasks.
pub fn split_by_classes(
    train: &LabeledBatch,
    test: &LabeledBatch,
    pairs: &[(usize, usize)],
    protocol: Protocol,
) -> Result<TaskStream> {
    let train_y = match &train.y {
        Labels::Classes(v) => v,
        _ => return Err(Error::invalid("class split needs class labels")),
    };
    let test_y = match &test.y {
        Labels::Classes(v) => v,
        _ => return Err(Error::invalid("class split needs class labels")),
    };
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no class pairs".into()));
    }
    let n_classes_total = match protocol {
        Protocol::ClassIncremental => {
            1 + pairs.iter().map(|&(a, b)| a.max(b)).max().expect("non-empty")
        }
        Protocol::DomainIncremental => 2,
    };
    let mut tasks = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let pick = |x: &Array2<f64>, y: &[usize]| -> Result<LabeledBatch> {
            let idx: Vec<usize> =
                (0..y.len()).filter(|&i| y[i] == a || y[i] == b).collect();
            if idx.is_empty() {
                return Err(Error::EmptyInput(format!("no points for classes {a}/{b}")));
            }
            let xs = x.select(Axis(0), &idx);
            let labels = match protocol {
                Protocol::ClassIncremental => Labels::Classes(idx.iter().map(|&i| y[i]).collect()),
                Protocol::DomainIncremental => Labels::Binary(
                    idx.iter().map(|&i| if y[i] == a { 0.0 } else { 1.0 }).collect(),
                ),
            };
            LabeledBatch::new(xs, labels)
        };
        tasks.push(Task {
            name: format!("{a}-vs-{b}"),
            train: pick(&train.x, train_y)?,
            test: pick(&test.x, test_y)?,
            classes: vec![a, b],
        });
    }
    TaskStream { tasks, protocol, n_classes_total }.validate()
}

/// The canonical five-task split over digits.
pub const SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

/// Uniform subsample without replacement; asking for more than there is
/// returns everything.
pub fn coreset_sample(batch: &LabeledBatch, n: usize, seed: u64) -> LabeledBatch {
    if n >= batch.len() {
        return batch.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    batch.select(&idx)
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions, {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("accuracy of nothing".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Row-argmax; ties resolve to the lowest index.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Threshold a (n, 1) probability column at 1/2.
pub fn threshold_binary(probs: &Array2<f64>) -> Vec<usize> {
    probs.column(0).iter().map(|&p| usize::from(p >= 0.5)).collect()
}

/// True labels as class indices regardless of representation.
pub fn labels_as_indices(labels: &Labels) -> Vec<usize> {
    match labels {
        Labels::Binary(a) => a.iter().map(|&v| usize::from(v >= 0.5)).collect(),
        Labels::Classes(v) => v.clone(),
        Labels::Real(_) => Vec::new(),
    }
}

/// Lower-triangular record of test accuracy: row t holds the accuracy on
/// tasks 1..=t measured after training on task t.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::shape(
                "accuracy matrix",
                format!("row {} must have {} entries, got {}", self.rows.len() + 1, self.rows.len() + 1, row.len()),
            ));
        }
        if row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::invalid("accuracy outside [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on `eval_task` measured after `after_task` (1-based).
    pub fn get(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        self.rows.get(after_task - 1)?.get(eval_task - 1).copied()
    }

    pub fn row(&self, after_task: usize) -> Option<&[f64]> {
        self.rows.get(after_task - 1).map(Vec::as_slice)
    }

    /// Mean over the row recorded after task t.
    pub fn average_after(&self, after_task: usize) -> Option<f64> {
        let row = self.rows.get(after_task - 1)?;
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean of the last row: the usual end-of-stream summary.
    pub fn final_average(&self) -> Option<f64> {
        self.average_after(self.rows.len())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("after_task,eval_task,accuracy\n");
        for (ti, row) in self.rows.iter().enumerate() {
            for (ei, acc) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", ti + 1, ei + 1, acc)
                    .expect("writing to a String cannot fail");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn from_csv_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("after_task,eval_task,accuracy") => {}
            other => {
                return Err(Error::Parse(format!(
                    "accuracy csv header missing, found {other:?}"
                )))
            }
        }
        let mut m = AccuracyMatrix::new();
        let mut current: Vec<f64> = Vec::new();
        let mut current_task = 1usize;
        for (ln, line) in lines.enumerate() {
            let mut parts = line.splitn(3, ',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse(format!("accuracy csv line {}: {line}", ln + 2)))
            };
            let after = parse(parts.next())? as usize;
            let eval = parse(parts.next())? as usize;
            let acc = parse(parts.next())?;
            if after != current_task {
                m.push_row(std::mem::take(&mut current))?;
                current_task = after;
            }
            if eval != current.len() + 1 {
                return Err(Error::Parse(format!(
                    "accuracy csv line {}: eval task {} out of order",
                    ln + 2,
                    eval
                )));
            }
            current.push(acc);
        }
        if !current.is_empty() {
            m.push_row(current)?;
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn toy_stream_has_five_alternating_tasks() {
        let stream = gen_toy_tasks(&ToyConfig::default()).unwrap();
        assert_eq!(stream.len(), 5);
        assert_eq!(stream.protocol, Protocol::DomainIncremental);
        for (k, task) in stream.tasks.iter().enumerate() {
            assert_eq!(task.train.len(), 200);
            assert_eq!(task.test.len(), 200);
            // Class-0 blob center: y = +1.5 on even tasks, -1.5 on odd.
            let y0: f64 = (0..100).map(|i| task.train.x[[i, 0]]).sum::<f64>() / 100.0;
            assert_abs_diff_eq!(y0, TOY_TASK_X[k], epsilon = 0.2);
            let mean_y0: f64 = (0..100).map(|i| task.train.x[[i, 1]]).sum::<f64>() / 100.0;
            let want = if k % 2 == 0 { TOY_BLOB_Y } else { -TOY_BLOB_Y };
            assert_abs_diff_eq!(mean_y0, want, epsilon = 0.2);
        }
    }

    #[test]
    fn toy_tasks_are_linearly_separable() {
        // Logistic regression (no hidden layer) must nail each task.
        use crate::nn::{Activation, Head, MlpSpec};
        use crate::opt::Adam;
        let stream = gen_toy_tasks(&ToyConfig::default()).unwrap();
        let spec = MlpSpec::new(vec![2, 1], Activation::Tanh, Head::Bernoulli).unwrap();
        for task in &stream.tasks {
            let f = crate::nn::build_log_lik_graph(&spec, &task.train).unwrap();
            let mut params = vec![0.0; spec.n_params()];
            let mut opt = Adam::new(0.05, params.len());
            for _ in 0..400 {
                let (_, g) = f.graph.eval_with_grad(f.output, &params).unwrap();
                opt.step(&mut params, &g);
            }
            let probs = crate::nn::forward(&spec, &params, &task.train.x).unwrap();
            let acc = accuracy(
                &threshold_binary(&probs),
                &labels_as_indices(&task.train.y),
            )
            .unwrap();
            assert!(acc >= 0.99, "task {} separability {acc}", task.name);
        }
    }

    #[test]
    fn strip_bands_alternate_along_x() {
        let cfg = ToyConfig { kind: ToyKind::StripBands, ..ToyConfig::default() };
        let stream = gen_toy_tasks(&cfg).unwrap();
        for (k, task) in stream.tasks.iter().enumerate() {
            let x0: f64 = (0..100).map(|i| task.train.x[[i, 0]]).sum::<f64>() / 100.0;
            let x1: f64 = (100..200).map(|i| task.train.x[[i, 0]]).sum::<f64>() / 100.0;
            assert_abs_diff_eq!(x0, TOY_TASK_X[k] - TOY_BAND_HALF_GAP, epsilon = 0.15);
            assert_abs_diff_eq!(x1, TOY_TASK_X[k] + TOY_BAND_HALF_GAP, epsilon = 0.15);
        }
    }

    #[test]
    fn toy_stream_is_deterministic_per_seed() {
        let a = gen_toy_tasks(&ToyConfig::default()).unwrap();
        let b = gen_toy_tasks(&ToyConfig::default()).unwrap();
        assert_eq!(a.tasks[2].train.x, b.tasks[2].train.x);
        let c = gen_toy_tasks(&ToyConfig { seed: 1, ..ToyConfig::default() }).unwrap();
        assert_ne!(a.tasks[2].train.x, c.tasks[2].train.x);
    }

    fn write_idx_fixture(dir: &Path) {
        // Two 2x2 images with labels 7 and 3.
        let mut imgs = Vec::new();
        imgs.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&[0, 128, 255, 64, 10, 20, 30, 40]);
        std::fs::write(dir.join("imgs"), &imgs).unwrap();

        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 3]);
        std::fs::write(dir.join("labels"), &labels).unwrap();
    }

    #[test]
    fn idx_parsing_scales_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_fixture(dir.path());
        let x = load_idx_images(&dir.path().join("imgs")).unwrap();
        assert_eq!(x.dim(), (2, 4));
        assert_abs_diff_eq!(x[[0, 0]], 0.0);
        assert_abs_diff_eq!(x[[0, 2]], 1.0);
        assert_abs_diff_eq!(x[[0, 1]], 128.0 / 255.0, epsilon = 1e-15);
        let y = load_idx_labels(&dir.path().join("labels")).unwrap();
        assert_eq!(y, vec![7, 3]);
    }

    #[test]
    fn idx_errors_are_specific() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_fixture(dir.path());
        let img_path = dir.path().join("imgs");

        // Labels magic on an image load.
        assert!(matches!(
            load_idx_images(&dir.path().join("labels")),
            Err(Error::WrongMagic { .. })
        ));

        let good = std::fs::read(&img_path).unwrap();
        std::fs::write(&img_path, &good[..good.len() - 2]).unwrap();
        assert!(matches!(load_idx_images(&img_path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn idx_dir_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        // 1 image, 2 labels.
        let mut imgs = Vec::new();
        imgs.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        imgs.extend_from_slice(&1u32.to_be_bytes());
        imgs.extend_from_slice(&1u32.to_be_bytes());
        imgs.extend_from_slice(&1u32.to_be_bytes());
        imgs.push(9);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &imgs).unwrap();
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[0, 1]);
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &labels).unwrap();
        assert!(matches!(
            load_idx_dir(dir.path()),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn surrogate_is_deterministic_and_balanced() {
        let cfg = SurrogateConfig { n_train_per_class: 20, n_test_per_class: 5, ..Default::default() };
        let (train_a, test_a) = gen_surrogate(&cfg).unwrap();
        let (train_b, _) = gen_surrogate(&cfg).unwrap();
        assert_eq!(train_a.x, train_b.x);
        assert_eq!(train_a.len(), 200);
        assert_eq!(test_a.len(), 50);
        assert_eq!(train_a.x.ncols(), 784);
        if let Labels::Classes(y) = &train_a.y {
            for c in 0..10 {
                assert_eq!(y.iter().filter(|&&v| v == c).count(), 20);
            }
        } else {
            panic!("surrogate should carry class labels");
        }
    }

    #[test]
    fn images_or_surrogate_falls_back_to_synthetic() {
        let cfg = SurrogateConfig { n_train_per_class: 2, n_test_per_class: 1, dim: 8, ..Default::default() };
        let (_, _, source) = images_or_surrogate(None, &cfg).unwrap();
        assert_eq!(source, DataSource::Synthetic);
    }

    #[test]
    fn class_split_respects_protocol() {
        let cfg = SurrogateConfig {
            n_train_per_class: 6,
            n_test_per_class: 3,
            dim: 4,
            ..Default::default()
        };
        let (train, test) = gen_surrogate(&cfg).unwrap();
        let ci = split_by_classes(&train, &test, &SPLIT_PAIRS, Protocol::ClassIncremental).unwrap();
        assert_eq!(ci.len(), 5);
        assert_eq!(ci.n_classes_total, 10);
        if let Labels::Classes(y) = &ci.tasks[1].train.y {
            assert!(y.iter().all(|&v| v == 2 || v == 3));
        } else {
            panic!("class-incremental tasks keep global labels");
        }
        assert_eq!(ci.tasks[1].train.len(), 12);
        assert_eq!(ci.tasks[1].test.len(), 6);

        let di = split_by_classes(&train, &test, &SPLIT_PAIRS, Protocol::DomainIncremental).unwrap();
        assert_eq!(di.n_classes_total, 2);
        if let Labels::Binary(y) = &di.tasks[1].train.y {
            let ones = y.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, 6);
        } else {
            panic!("domain-incremental tasks use binary labels");
        }
    }

    #[test]
    fn class_split_rejects_repeated_classes() {
        let cfg = SurrogateConfig {
            n_train_per_class: 2,
            n_test_per_class: 1,
            dim: 3,
            ..Default::default()
        };
        let (train, test) = gen_surrogate(&cfg).unwrap();
        let res = split_by_classes(
            &train,
            &test,
            &[(0, 1), (1, 2)],
            Protocol::ClassIncremental,
        );
        assert!(res.is_err());
    }

    #[test]
    fn coreset_is_a_deterministic_subset() {
        let stream = gen_toy_tasks(&ToyConfig::default()).unwrap();
        let batch = &stream.tasks[0].train;
        let a = coreset_sample(batch, 50, 7);
        let b = coreset_sample(batch, 50, 7);
        assert_eq!(a.x, b.x);
        assert_eq!(a.len(), 50);
        let c = coreset_sample(batch, 50, 8);
        assert_ne!(a.x, c.x);
        // Oversized request returns everything.
        assert_eq!(coreset_sample(batch, 10_000, 1).len(), batch.len());
        // Every coreset row appears in the source.
        for i in 0..a.len() {
            let row = a.x.row(i);
            assert!(batch.x.rows().into_iter().any(|r| r == row));
        }
    }

    #[test]
    fn accuracy_matrix_round_trips_through_csv() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.99]).unwrap();
        m.push_row(vec![0.52, 0.98]).unwrap();
        m.push_row(vec![0.41, 0.63, 0.97]).unwrap();
        assert_abs_diff_eq!(m.final_average().unwrap(), (0.41 + 0.63 + 0.97) / 3.0);
        assert_abs_diff_eq!(m.get(2, 1).unwrap(), 0.52);

        let text = m.to_csv_string();
        assert!(text.starts_with("after_task,eval_task,accuracy\n1,1,0.99\n"));
        let back = AccuracyMatrix::from_csv_string(&text).unwrap();
        assert_eq!(back.n_rows(), 3);
        assert_eq!(back.to_csv_string(), text);

        assert!(m.push_row(vec![0.1, 0.2]).is_err());
        assert!(AccuracyMatrix::from_csv_string("nope\n1,1,0.5").is_err());
    }

    #[test]
    fn accuracy_and_argmax_basics() {
        assert_abs_diff_eq!(accuracy(&[1, 2, 3], &[1, 0, 3]).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        let probs = ndarray::array![[0.1, 0.7, 0.2], [0.5, 0.2, 0.3]];
        assert_eq!(argmax_rows(&probs), vec![1, 0]);
        let bin = ndarray::array![[0.49], [0.5], [0.9]];
        assert_eq!(threshold_binary(&bin), vec![0, 1, 1]);
    }
}

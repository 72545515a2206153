//! Task streams: synthetic Gaussian-blob tasks, IDX image ingestion, and
//! the class-split protocol that turns one labeled dataset into an ordered
//! sequence of tasks with disjoint class sets.

use crate::error::HiclError;
use crate::rng::substream;
use crate::Result;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Where a stream's samples came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    IdxDataset,
    CsvDataset,
}

/// One task: training and held-out samples with task-local labels, plus the
/// ascending list of global class ids those labels map to.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub eval_inputs: Vec<Vec<f64>>,
    pub eval_labels: Vec<usize>,
    pub class_list: Vec<usize>,
}

impl TaskData {
    pub fn n_classes(&self) -> usize {
        self.class_list.len()
    }

    /// Task-local label → global class id.
    pub fn global_label(&self, local: usize) -> Result<usize> {
        self.class_list
            .get(local)
            .copied()
            .ok_or_else(|| HiclError::Data(format!("local label {local} has no global class")))
    }
}

/// An ordered sequence of tasks with pairwise-disjoint class lists.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub provenance: Provenance,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks
            .first()
            .and_then(|t| t.inputs.first())
            .map_or(0, |x| x.len())
    }

    /// Total number of global classes (class lists are disjoint).
    pub fn n_global_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.class_list.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.class_list.is_empty() {
                return Err(HiclError::Data(format!("task {t} has no classes")));
            }
            for &c in &task.class_list {
                if !seen.insert(c) {
                    return Err(HiclError::Data(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
            for (set, labels) in [
                (task.n_classes(), &task.labels),
                (task.n_classes(), &task.eval_labels),
            ] {
                if let Some(&bad) = labels.iter().find(|&&y| y >= set) {
                    return Err(HiclError::Data(format!(
                        "task {t}: local label {bad} outside its {set}-class list"
                    )));
                }
            }
            if task.inputs.len() != task.labels.len()
                || task.eval_inputs.len() != task.eval_labels.len()
            {
                return Err(HiclError::Data(format!(
                    "task {t}: inputs and labels differ in length"
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic stream: per class, an isotropic Gaussian blob whose mean is
/// drawn uniformly on a sphere of radius `separation`. Everything is then
/// mapped affinely into [0,1] (clamped at ~5σ tails), which preserves the
/// separation/spread ratio. Deterministic per seed.
#[allow(clippy::too_many_arguments)]
pub fn make_synthetic_stream(
    n_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    separation: f64,
    train_per_class: usize,
    eval_per_class: usize,
    seed: u64,
) -> Result<TaskStream> {
    if n_tasks == 0 || classes_per_task == 0 || dim == 0 || train_per_class == 0 {
        return Err(HiclError::Config(
            "synthetic stream needs positive task/class/dim/sample counts".into(),
        ));
    }
    if separation < 0.0 {
        return Err(HiclError::Parameter {
            name: "separation",
            reason: format!("must be nonnegative, got {separation}"),
        });
    }
    let mut rng = substream(seed, "data");
    // Centered squash: raw values live within ±(separation + 5σ), so this
    // maps them into [−0.5, 0.5] without clipping mass. Keeping the data
    // zero-mean matters downstream — a large shared offset would dominate
    // every feature vector and wash out the per-task structure the router
    // depends on.
    let half_range = separation + 5.0;
    let squash = |v: f64| (v / (2.0 * half_range)).clamp(-0.5, 0.5);

    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut eval_inputs = Vec::new();
        let mut eval_labels = Vec::new();
        let class_list: Vec<usize> = (0..classes_per_task)
            .map(|c| t * classes_per_task + c)
            .collect();
        for local in 0..classes_per_task {
            let dir: Vec<f64> = (0..dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let mean: Vec<f64> = dir.iter().map(|v| v / norm * separation).collect();
            let mut draw = |out: &mut Vec<Vec<f64>>, labs: &mut Vec<usize>, n: usize| {
                for _ in 0..n {
                    let x: Vec<f64> = mean
                        .iter()
                        .map(|&m| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            squash(m + e)
                        })
                        .collect();
                    out.push(x);
                    labs.push(local);
                }
            };
            draw(&mut inputs, &mut labels, train_per_class);
            draw(&mut eval_inputs, &mut eval_labels, eval_per_class);
        }
        // Deterministic interleave so batches are not sorted by class.
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        shuffle(&mut order, &mut rng);
        let inputs: Vec<_> = order.iter().map(|&i| inputs[i].clone()).collect();
        let labels: Vec<_> = order.iter().map(|&i| labels[i]).collect();
        tasks.push(TaskData {
            inputs,
            labels,
            eval_inputs,
            eval_labels,
            class_list,
        });
    }
    let stream = TaskStream {
        tasks,
        provenance: Provenance::Synthetic,
    };
    stream.validate()?;
    Ok(stream)
}

/// Fisher–Yates with the library RNG (kept explicit so the draw order is
/// part of the reproducibility contract).
pub fn shuffle(order: &mut [usize], rng: &mut crate::rng::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Split one labeled dataset into `n_tasks` tasks of contiguous ascending
/// classes; within-task labels are remapped to 0..c−1 and the global map is
/// kept in `class_list`. Evaluation arrays start empty — attach a held-out
/// split with [`attach_eval`].
pub fn split_dataset(
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_tasks: usize,
) -> Result<TaskStream> {
    if images.len() != labels.len() {
        return Err(HiclError::Data(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if n_tasks == 0 {
        return Err(HiclError::Config("n_tasks must be positive".into()));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if n_classes == 0 || n_classes % n_tasks != 0 {
        return Err(HiclError::Config(format!(
            "{n_classes} classes not divisible into {n_tasks} tasks"
        )));
    }
    let per = n_classes / n_tasks;
    let mut tasks: Vec<TaskData> = (0..n_tasks)
        .map(|t| TaskData {
            inputs: Vec::new(),
            labels: Vec::new(),
            eval_inputs: Vec::new(),
            eval_labels: Vec::new(),
            class_list: (t * per..(t + 1) * per).collect(),
        })
        .collect();
    for (x, y) in images.into_iter().zip(labels) {
        let t = y / per;
        tasks[t].inputs.push(x);
        tasks[t].labels.push(y % per);
    }
    let stream = TaskStream {
        tasks,
        provenance: Provenance::IdxDataset,
    };
    stream.validate()?;
    Ok(stream)
}

/// Move `held_out`'s training arrays into `stream`'s evaluation slots.
/// Task count and class lists must agree.
pub fn attach_eval(stream: &mut TaskStream, held_out: TaskStream) -> Result<()> {
    if stream.n_tasks() != held_out.n_tasks() {
        return Err(HiclError::Data(format!(
            "{} tasks vs {} in held-out split",
            stream.n_tasks(),
            held_out.n_tasks()
        )));
    }
    for (task, held) in stream.tasks.iter_mut().zip(held_out.tasks) {
        if task.class_list != held.class_list {
            return Err(HiclError::Data(format!(
                "class lists differ between splits: {:?} vs {:?}",
                task.class_list, held.class_list
            )));
        }
        task.eval_inputs = held.inputs;
        task.eval_labels = held.labels;
    }
    Ok(())
}

// ── IDX format ───────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: u64,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| HiclError::io(path.display().to_string(), e))?;
        Ok(Self { path, bytes, pos: 0 })
    }

    fn fail(&self, reason: impl Into<String>) -> HiclError {
        HiclError::Format {
            path: self.path.display().to_string(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let start = self.pos as usize;
        let end = start + 4;
        if end > self.bytes.len() {
            return Err(self.fail("truncated while reading a 32-bit field"));
        }
        let v = u32::from_be_bytes(self.bytes[start..end].try_into().unwrap());
        self.pos = end as u64;
        Ok(v)
    }

    fn read_payload(&mut self, n: usize) -> Result<&[u8]> {
        let start = self.pos as usize;
        let end = start + n;
        if end > self.bytes.len() {
            return Err(self.fail(format!(
                "payload needs {n} bytes, file has {}",
                self.bytes.len() - start
            )));
        }
        self.pos = end as u64;
        Ok(&self.bytes[start..end])
    }

    fn finish(&self) -> Result<()> {
        if (self.pos as usize) < self.bytes.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos as usize
            )));
        }
        Ok(())
    }
}

/// Read an IDX image file: big-endian magic 0x00000803, dims (count, rows,
/// cols), then row-major bytes. Pixels are scaled to [0,1] as v/255.
pub fn read_idx_images(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = IdxReader::open(path)?;
    let magic = r.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad image magic 0x{magic:08x}")));
    }
    let count = r.read_u32()? as usize;
    let rows = r.read_u32()? as usize;
    let cols = r.read_u32()? as usize;
    let per = rows
        .checked_mul(cols)
        .ok_or_else(|| r.fail("image dimensions overflow"))?;
    let payload = r.read_payload(count * per)?.to_vec();
    r.finish()?;
    Ok(payload
        .chunks(per.max(1))
        .take(count)
        .map(|img| img.iter().map(|&b| b as f64 / 255.0).collect())
        .collect())
}

/// Read an IDX label file: magic 0x00000801, count, then one byte each.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = IdxReader::open(path)?;
    let magic = r.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad label magic 0x{magic:08x}")));
    }
    let count = r.read_u32()? as usize;
    let payload = r.read_payload(count)?.to_vec();
    r.finish()?;
    Ok(payload.into_iter().map(|b| b as usize).collect())
}

/// Load a paired image/label IDX set and cross-validate the counts.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(HiclError::Data(format!(
            "{} images in {} vs {} labels in {}",
            images.len(),
            images_path.display(),
            labels.len(),
            labels_path.display()
        )));
    }
    Ok((images, labels))
}

/// Write images in IDX layout (inverse of [`read_idx_images`]); values are
/// rounded back to bytes as round(v·255).
pub fn write_idx_images(path: &Path, images: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.len() != rows * cols {
            return Err(HiclError::Data(format!(
                "image has {} pixels, expected {}",
                img.len(),
                rows * cols
            )));
        }
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    write_bytes(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        if y > 255 {
            return Err(HiclError::Data(format!("label {y} does not fit in a byte")));
        }
        out.push(y as u8);
    }
    write_bytes(path, &out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| HiclError::io(path.display().to_string(), e))
}

//! Post-training diagnostics: active-set Jaccard structure, prototype
//! similarity, and routing behavior. All analyses are pure — a fixed
//! (model, stream, seed) triple always yields byte-identical CSV.

use crate::data::TaskStream;
use crate::model::HiclModel;
use crate::router::{cosine_similarity, gate, GatingMode};
use crate::rng::substream;
use crate::Result;
use rand::Rng as _;

/// |A∩B| / |A∪B| over two ascending index sets. Two empty sets count as
/// identical (1.0).
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut i = 0;
    let mut j = 0;
    let mut inter = 0usize;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Mean Jaccard between tasks' separation codes.
pub struct JaccardReport {
    /// `matrix[t][t']`: mean Jaccard over sampled (task-t, task-t') pairs.
    pub matrix: Vec<Vec<f64>>,
    /// Mean of the diagonal cells.
    pub intra: f64,
    /// Mean of the off-diagonal cells.
    pub inter: f64,
}

/// Sample `pairs_per_cell` code pairs per task pair (each sample encoded by
/// its own task's expert, as during training) and average the Jaccard of
/// their active sets.
pub fn jaccard_analysis(
    model: &HiclModel,
    stream: &TaskStream,
    pairs_per_cell: usize,
    seed: u64,
) -> Result<JaccardReport> {
    let n = stream.n_tasks();
    let mut rng = substream(seed, "analysis");
    // Pre-encode every eval sample once.
    let mut active: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n);
    for (t, task) in stream.tasks.iter().enumerate() {
        let expert = model.expert_for_task(t);
        let mut sets = Vec::with_capacity(task.eval_inputs.len());
        for x in &task.eval_inputs {
            let (code, _) = model.forced_forward(x, expert)?;
            sets.push(code.active_set.clone());
        }
        if sets.is_empty() {
            return Err(crate::error::HiclError::Data(format!(
                "task {t} has no evaluation samples to analyze"
            )));
        }
        active.push(sets);
    }
    let mut matrix = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let mut total = 0.0;
            for _ in 0..pairs_per_cell {
                let i = rng.gen_range(0..active[a].len());
                let mut j = rng.gen_range(0..active[b].len());
                if a == b && active[a].len() > 1 {
                    // Distinct samples within a task; identical pairs would
                    // inflate the intra average by definition.
                    while j == i {
                        j = rng.gen_range(0..active[b].len());
                    }
                }
                total += jaccard(&active[a][i], &active[b][j]);
            }
            matrix[a][b] = total / pairs_per_cell as f64;
        }
    }
    let mut intra = 0.0;
    let mut inter = 0.0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                intra += v;
            } else {
                inter += v;
            }
        }
    }
    intra /= n as f64;
    if n > 1 {
        inter /= (n * n - n) as f64;
    }
    Ok(JaccardReport { matrix, intra, inter })
}

/// M[i][j] = cos(u_i, u_j). Warm diagonals are exactly 1; a cold prototype
/// yields a row (and column) of zeros.
pub fn prototype_similarity_matrix(model: &HiclModel) -> Vec<Vec<f64>> {
    let n = model.n_experts();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = if i == j && !model.prototypes[i].is_cold() {
                1.0
            } else {
                cosine_similarity(&model.prototypes[i].vector, &model.prototypes[j].vector)
                    .unwrap_or(0.0)
            };
        }
    }
    m
}

/// Hard-gate routing counts: row t = histogram of selected experts over
/// task-t evaluation samples, plus the row-normalized variant.
pub struct RoutingReport {
    pub counts: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
}

fn hard_route(model: &HiclModel, x: &[f64]) -> Result<usize> {
    let f = model.backbone_features(x)?;
    let codes = model.encode_all(&f)?;
    let d = gate(&codes, &model.prototypes, GatingMode::Hard, model.temperature)?;
    Ok(d.top_expert())
}

pub fn routing_matrix(model: &HiclModel, stream: &TaskStream) -> Result<RoutingReport> {
    let n_tasks = stream.n_tasks();
    let n_experts = model.n_experts();
    let mut counts = vec![vec![0u64; n_experts]; n_tasks];
    for (t, task) in stream.tasks.iter().enumerate() {
        for x in &task.eval_inputs {
            counts[t][hard_route(model, x)?] += 1;
        }
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(RoutingReport { counts, normalized })
}

/// Fraction of evaluation samples (tasks 0..upto, exclusive) whose
/// hard-gated expert matches the task's own expert.
pub fn routing_accuracy(model: &HiclModel, stream: &TaskStream, upto: usize) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (t, task) in stream.tasks.iter().enumerate().take(upto) {
        let target = model.expert_for_task(t);
        for x in &task.eval_inputs {
            total += 1;
            if hard_route(model, x)? == target {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(crate::error::HiclError::Data(
            "routing accuracy over zero samples".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

/// Render a numeric matrix as CSV with row/column labels.
pub fn matrix_csv<T: std::fmt::Display>(
    row_label: &str,
    col_prefix: &str,
    matrix: &[Vec<T>],
) -> String {
    let cols = matrix.first().map_or(0, |r| r.len());
    let mut out = String::from(row_label);
    for c in 0..cols {
        out.push_str(&format!(",{col_prefix}{c}"));
    }
    out.push('\n');
    for (r, row) in matrix.iter().enumerate() {
        out.push_str(&r.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

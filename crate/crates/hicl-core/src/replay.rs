//! Prioritized replay. Each finished task leaves behind a fixed-capacity
//! store of examples (reservoir-sampled uniformly from the task); rehearsal
//! draws across all stores with probability ∝ priority^α, without
//! replacement within a batch, and refreshes the priorities of whatever it
//! drew from the latest per-sample losses.

use crate::error::HiclError;
use crate::rng::Rng;
use crate::Result;
use rand::Rng as _;

/// One stored example. `label` is the task-local class index.
#[derive(Debug, Clone)]
pub struct ReplayItem {
    pub input: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
    pub priority: f64,
    pub last_loss: f64,
}

/// Stable address of a stored item: (task slot, index within it).
pub type ReplayHandle = (usize, usize);

pub struct ReplayBuffer {
    tasks: Vec<Vec<ReplayItem>>,
    pub capacity: usize,
    pub alpha_per: f64,
    rng: Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha_per: f64, rng: Rng) -> Self {
        Self { tasks: Vec::new(), capacity, alpha_per, rng }
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_count(&self, task_id: usize) -> usize {
        self.tasks.get(task_id).map_or(0, Vec::len)
    }

    pub fn get(&self, h: ReplayHandle) -> &ReplayItem {
        &self.tasks[h.0][h.1]
    }

    /// Store up to `capacity` examples of a finished task, reservoir-sampled
    /// uniformly. Initial priority = per-sample loss + 1e-3. Tasks must be
    /// populated in stream order, once each.
    pub fn populate_buffer(
        &mut self,
        inputs: &[Vec<f64>],
        labels: &[usize],
        losses: &[f64],
        task_id: usize,
    ) -> Result<()> {
        if task_id != self.tasks.len() {
            return Err(HiclError::Protocol(format!(
                "populate_buffer expects task {} next, got {task_id}",
                self.tasks.len()
            )));
        }
        if inputs.len() != labels.len() || inputs.len() != losses.len() {
            return Err(HiclError::Contract(format!(
                "populate_buffer arity mismatch: {} inputs, {} labels, {} losses",
                inputs.len(),
                labels.len(),
                losses.len()
            )));
        }
        // Reservoir sampling (algorithm R): uniform over the task even when
        // it exceeds capacity; stores everything otherwise.
        let mut kept: Vec<usize> = Vec::with_capacity(self.capacity.min(inputs.len()));
        for i in 0..inputs.len() {
            if kept.len() < self.capacity {
                kept.push(i);
            } else {
                let j = self.rng.gen_range(0..=i);
                if j < self.capacity {
                    kept[j] = i;
                }
            }
        }
        kept.sort_unstable();
        let items = kept
            .into_iter()
            .map(|i| ReplayItem {
                input: inputs[i].clone(),
                label: labels[i],
                task_id,
                priority: losses[i] + 1e-3,
                last_loss: losses[i],
            })
            .collect();
        self.tasks.push(items);
        Ok(())
    }

    /// Draw `n` items with probability ∝ priority^α_PER, normalized over the
    /// whole buffer, without replacement within the batch. Asking for more
    /// than the buffer holds returns everything.
    pub fn sample_replay(&mut self, n: usize) -> Vec<ReplayHandle> {
        let mut pool: Vec<(ReplayHandle, f64)> = Vec::with_capacity(self.len());
        for (t, items) in self.tasks.iter().enumerate() {
            for (i, item) in items.iter().enumerate() {
                pool.push(((t, i), item.priority.powf(self.alpha_per)));
            }
        }
        if n >= pool.len() {
            return pool.into_iter().map(|(h, _)| h).collect();
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let total: f64 = pool.iter().map(|(_, w)| w).sum();
            let mut target = self.rng.gen_range(0.0..total);
            let mut pick = pool.len() - 1;
            for (idx, (_, w)) in pool.iter().enumerate() {
                if target < *w {
                    pick = idx;
                    break;
                }
                target -= w;
            }
            out.push(pool.swap_remove(pick).0);
        }
        out
    }

    /// Refresh a sampled item after its replay loss was computed:
    /// priority ← |loss| + 1e-3.
    pub fn update_priority(&mut self, h: ReplayHandle, loss: f64) {
        let item = &mut self.tasks[h.0][h.1];
        item.priority = loss.abs() + 1e-3;
        item.last_loss = loss;
    }
}

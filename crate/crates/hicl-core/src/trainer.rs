//! The task-incremental training loop. Per task: Phase I specializes the
//! forced expert with the full composite loss while prototypes track the
//! batch-mean separation code; Phase II freezes everything but the DG
//! layers and tightens codes against the (fixed) prototypes; then the
//! Fisher diagonal is anchored, the distillation snapshot refreshed, and
//! the replay buffer populated.

use crate::checkpoint::CheckpointData;
use crate::config::{DatasetConfig, RunConfig};
use crate::data::{
    attach_eval, load_idx, make_synthetic_stream, shuffle, split_dataset, TaskData, TaskStream,
};
use crate::encoder::Backbone;
use crate::error::HiclError;
use crate::flops::count_flops;
use crate::metrics::{forgetting_from_matrix, MetricsEvent, MetricsReport};
use crate::model::HiclModel;
use crate::objectives::{
    compose_full, compose_phase1, compose_phase2, cross_entropy, ewc_task_weight, loss_contrastive_phase2,
    loss_distill, loss_ewc, loss_intra, loss_replay, loss_sparsity, FisherInfo, Phase1Terms,
};
use crate::replay::ReplayBuffer;
use crate::rng::{substream, Rng};
use crate::tensor::{backward, Adam, Tensor};
use crate::Result;
use std::path::Path;

/// How many samples feed the per-task Fisher estimate.
const FISHER_SAMPLES: usize = 200;

/// Every raw-dataset access, as (task being trained, task whose data was
/// touched). The two must always match — past tasks are reachable only
/// through the replay buffer.
#[derive(Debug, Default)]
pub struct AccessAudit {
    pub events: Vec<(usize, usize)>,
}

impl AccessAudit {
    fn record(&mut self, training: usize, accessed: usize) -> Result<()> {
        self.events.push((training, accessed));
        if training != accessed {
            return Err(HiclError::Protocol(format!(
                "raw data of task {accessed} touched while training task {training}"
            )));
        }
        Ok(())
    }
}

/// Bookkeeping returned by one `train_task` call.
#[derive(Debug, Clone)]
pub struct TaskSummary {
    pub task_id: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub final_phase1_loss: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: HiclModel,
    pub buffer: ReplayBuffer,
    pub fisher_set: Vec<FisherInfo>,
    pub snapshot: Option<Backbone>,
    pub seen_tasks: usize,
    pub audit: AccessAudit,
    n_global_classes: usize,
    classes_per_task: usize,
    shuffle_rng: Rng,
    /// Per-sample losses of the final Phase-I epoch, reused as initial
    /// replay priorities.
    last_epoch_losses: Vec<f64>,
    /// Presentation order of that epoch (tail feeds the Fisher estimate).
    last_epoch_order: Vec<usize>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, n_global_classes: usize, classes_per_task: usize) -> Result<Self> {
        cfg.validate()?;
        let model = HiclModel::new(cfg, n_global_classes, classes_per_task)?;
        let buffer = ReplayBuffer::new(
            cfg.replay.capacity,
            cfg.replay.alpha_per,
            substream(cfg.seed, "sampling"),
        );
        Ok(Self {
            cfg: cfg.clone(),
            model,
            buffer,
            fisher_set: Vec::new(),
            snapshot: None,
            seen_tasks: 0,
            audit: AccessAudit::default(),
            n_global_classes,
            classes_per_task,
            shuffle_rng: substream(cfg.seed, "shuffle"),
            last_epoch_losses: Vec::new(),
            last_epoch_order: Vec::new(),
        })
    }

    /// Train one task end to end (both phases plus anchoring artifacts).
    pub fn train_task(&mut self, task: &TaskData, task_id: usize) -> Result<TaskSummary> {
        if task_id != self.seen_tasks {
            return Err(HiclError::Protocol(format!(
                "task {task_id} arrived after {} tasks; tasks must arrive in order",
                self.seen_tasks
            )));
        }
        if task.inputs.is_empty() {
            return Err(HiclError::Data(format!("task {task_id} has no training data")));
        }
        self.model.assign_task(task_id, &task.class_list)?;
        let (phase1_steps, final_phase1_loss) = self.phase1(task, task_id)?;
        // Anchor before consolidation: EWC should protect the parameters
        // that classify well, and Phase II deliberately moves DG weights
        // for routing margins.
        self.anchor_fisher(task, task_id)?;
        let phase2_steps = self.phase2(task, task_id)?;
        self.snapshot = Some(self.model.backbone.frozen_copy()?);
        self.audit.record(task_id, task_id)?;
        self.buffer
            .populate_buffer(&task.inputs, &task.labels, &self.last_epoch_losses, task_id)?;
        self.seen_tasks += 1;
        Ok(TaskSummary {
            task_id,
            phase1_steps,
            phase2_steps,
            final_phase1_loss,
        })
    }

    /// Phase I: all parameters trainable, inputs force-routed to the task's
    /// expert, composite loss, prototype EMA once per optimization step.
    pub(crate) fn phase1(&mut self, task: &TaskData, task_id: usize) -> Result<(usize, f64)> {
        let expert = self.model.expert_for_task(task_id);
        let named = self.model.named_parameters();
        let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        let mut opt = Adam::new(&tensors, self.cfg.schedule.lr);
        let w = self.cfg.weights.clone();
        let n = task.inputs.len();
        let mut steps = 0usize;
        let mut last_loss = f64::NAN;
        self.last_epoch_losses = vec![0.0; n];
        self.last_epoch_order = (0..n).collect();

        for epoch in 0..self.cfg.schedule.epochs_phase1 {
            let final_epoch = epoch + 1 == self.cfg.schedule.epochs_phase1;
            let mut order: Vec<usize> = (0..n).collect();
            shuffle(&mut order, &mut self.shuffle_rng);
            if final_epoch {
                self.last_epoch_order = order.clone();
            }
            for chunk in order.chunks(self.cfg.schedule.batch_size) {
                self.audit.record(task_id, task_id)?;
                for t in &tensors {
                    t.zero_grad();
                }

                let mut features = Vec::with_capacity(chunk.len());
                let mut code_values = Vec::with_capacity(chunk.len());
                let mut pre_topk = Vec::with_capacity(chunk.len());
                let mut ces = Vec::with_capacity(chunk.len());
                let mut labels = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let f = self.model.backbone_features(&task.inputs[i])?;
                    let (code, logits) = self.model.experts[expert].forward(&f)?;
                    let ce = cross_entropy(&logits, task.labels[i])?;
                    if final_epoch {
                        self.last_epoch_losses[i] = ce.item()?;
                    }
                    features.push(f);
                    code_values.push(code.values.clone());
                    pre_topk.push(code.pre_topk.clone());
                    ces.push(ce);
                    labels.push(task.labels[i]);
                }
                let cls = batch_mean(&ces)?;
                let intra = loss_intra(&code_values, &labels, w.lambda_push, w.m_intra)?;
                let sparsity = loss_sparsity(
                    &pre_topk,
                    self.cfg.encoder.sparsity_rho,
                    w.epsilon_s,
                )?;

                let (replay, handles, replay_vals, replay_codes) = self.replay_term()?;
                let distill = match &self.snapshot {
                    Some(snap) => {
                        let snap_feats = chunk
                            .iter()
                            .map(|&i| {
                                let x = Tensor::from_vec(
                                    task.inputs[i].clone(),
                                    &[task.inputs[i].len()],
                                )?;
                                snap.features(&x)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        loss_distill(&features, &snap_feats)?
                    }
                    None => Tensor::scalar(0.0)?,
                };
                let ewc = self.ewc_term(&named, expert)?;

                let terms = Phase1Terms {
                    cls,
                    intra,
                    replay: replay.clone(),
                    distill,
                    ewc: ewc.clone(),
                    sparsity,
                };
                let phase1 = compose_phase1(&w, &terms)?;
                let total = if self.cfg.strict_paper_objective {
                    let phase2 = self.strict_phase2_term(task, chunk, task_id)?;
                    compose_full(&w, &phase1, &phase2, &ewc, &replay)?
                } else {
                    phase1
                };
                backward(&total)?;
                opt.step(&tensors)?;
                last_loss = total.item()?;

                for (h, v) in handles.iter().zip(&replay_vals) {
                    self.buffer.update_priority(*h, *v);
                }

                // One prototype step per optimization step, on the batch
                // mean of the (detached) separation codes.
                let mean_code = mean_vectors(&code_values)?;
                self.model.prototypes[expert].apply_ema(&mean_code)?;
                if self.cfg.replay_refresh_prototypes {
                    self.refresh_replay_prototypes(&replay_codes)?;
                }
                steps += 1;
            }
        }
        Ok((steps, last_loss))
    }

    /// Replay loss over a prioritized batch; returns the loss term plus the
    /// sampled handles and their fresh per-sample losses.
    fn replay_term(
        &mut self,
    ) -> Result<(Tensor, Vec<crate::replay::ReplayHandle>, Vec<f64>, Vec<(usize, Vec<f64>)>)> {
        if self.buffer.is_empty() || self.cfg.schedule.replay_batch_size == 0 {
            return Ok((Tensor::scalar(0.0)?, Vec::new(), Vec::new(), Vec::new()));
        }
        let handles = self
            .buffer
            .sample_replay(self.cfg.schedule.replay_batch_size);
        let items: Vec<_> = handles.iter().map(|&h| self.buffer.get(h).clone()).collect();
        let (loss, vals, codes) = loss_replay(&self.model, &items)?;
        Ok((loss, handles, vals, codes))
    }

    /// EMA maintenance for old prototypes from codes already computed for
    /// the replay term: group the replayed codes by source task and advance
    /// each task's prototype on its group mean.
    fn refresh_replay_prototypes(&mut self, codes: &[(usize, Vec<f64>)]) -> Result<()> {
        let mut by_expert: std::collections::BTreeMap<usize, (Vec<f64>, usize)> =
            std::collections::BTreeMap::new();
        for (task_id, code) in codes {
            let expert = self.model.expert_for_task(*task_id);
            let entry = by_expert
                .entry(expert)
                .or_insert_with(|| (vec![0.0; code.len()], 0));
            for (acc, v) in entry.0.iter_mut().zip(code) {
                *acc += v;
            }
            entry.1 += 1;
        }
        for (expert, (sum, count)) in by_expert {
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            self.model.prototypes[expert].apply_ema(&mean)?;
        }
        Ok(())
    }

    /// EWC term with similarity weights refreshed against the live
    /// prototype of the expert currently training.
    fn ewc_term(&mut self, named: &[(String, Tensor)], expert: usize) -> Result<Tensor> {
        if self.fisher_set.is_empty() {
            return Ok(Tensor::scalar(0.0)?);
        }
        let u_cur = self.model.prototypes[expert].vector.clone();
        for info in &mut self.fisher_set {
            info.weight = ewc_task_weight(&u_cur, &info.prototype, self.cfg.weights.epsilon_floor)?;
        }
        loss_ewc(named, &self.fisher_set)
    }

    /// The consolidation term inside the literal single-objective form:
    /// batch-mean contrastive loss over all seen experts, or zero while the
    /// current prototype is still cold (the first optimization step).
    fn strict_phase2_term(
        &self,
        task: &TaskData,
        chunk: &[usize],
        task_id: usize,
    ) -> Result<Tensor> {
        let seen = self.seen_expert_ids(task_id);
        if seen
            .iter()
            .any(|&e| self.model.prototypes[e].is_cold())
        {
            return Ok(Tensor::scalar(0.0)?);
        }
        let protos: Vec<_> = seen.iter().map(|&e| self.model.prototypes[e].clone()).collect();
        let current_pos = seen
            .iter()
            .position(|&e| e == self.model.expert_for_task(task_id))
            .expect("current expert is seen");
        let mut terms = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let f = self.model.backbone_features(&task.inputs[i])?;
            let codes: Vec<Tensor> = seen
                .iter()
                .map(|&e| Ok(self.model.experts[e].encode(&f)?.values))
                .collect::<Result<Vec<_>>>()?;
            terms.push(loss_contrastive_phase2(
                &codes,
                &protos,
                current_pos,
                self.cfg.weights.m_contrastive,
                self.cfg.phase2_cross_form,
            )?);
        }
        batch_mean(&terms)
    }

    /// Experts serving tasks 0..=task_id, ascending, deduplicated.
    fn seen_expert_ids(&self, task_id: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..=task_id).map(|t| self.model.expert_for_task(t)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Phase II: freeze everything except DG parameters, then pull each
    /// sample's separation code toward its own (fixed) prototype and push
    /// the other experts' codes under the margin. Batches mix current-task
    /// and replayed samples 1:1 (both halves optional by config).
    pub(crate) fn phase2(&mut self, task: &TaskData, task_id: usize) -> Result<usize> {
        if self.cfg.schedule.epochs_phase2 == 0
            || (!self.cfg.phase2_use_current && !self.cfg.phase2_use_replay)
        {
            return Ok(0);
        }
        let named = self.model.named_parameters();
        let frozen: Vec<&Tensor> = named
            .iter()
            .filter(|(name, _)| !HiclModel::is_dg_param(name))
            .map(|(_, t)| t)
            .collect();
        for t in &frozen {
            t.set_requires_grad(false);
        }
        let result = self.phase2_inner(task, task_id);
        for t in &frozen {
            t.set_requires_grad(true);
        }
        result
    }

    fn phase2_inner(&mut self, task: &TaskData, task_id: usize) -> Result<usize> {
        let seen = self.seen_expert_ids(task_id);
        // Prototypes act as fixed anchors for the whole phase by default;
        // with `phase2_update_prototypes` they advance each step and the
        // anchors are re-read so the loss always sees the current ones.
        let mut protos: Vec<_> = seen.iter().map(|&e| self.model.prototypes[e].clone()).collect();
        let dg_named = self.model.dg_parameters();
        let dg_tensors: Vec<Tensor> = dg_named.iter().map(|(_, t)| t.clone()).collect();
        let mut opt = Adam::new(&dg_tensors, self.cfg.schedule.lr_phase2);
        let w = self.cfg.weights.clone();
        let n = task.inputs.len();
        let mut steps = 0usize;

        for _ in 0..self.cfg.schedule.epochs_phase2 {
            let mut order: Vec<usize> = (0..n).collect();
            shuffle(&mut order, &mut self.shuffle_rng);
            for chunk in order.chunks(self.cfg.schedule.batch_size) {
                // (input, owning task) pairs for this step.
                let mut samples: Vec<(Vec<f64>, usize)> = Vec::new();
                if self.cfg.phase2_use_current {
                    self.audit.record(task_id, task_id)?;
                    for &i in chunk {
                        samples.push((task.inputs[i].clone(), task_id));
                    }
                }
                if self.cfg.phase2_use_replay && !self.buffer.is_empty() {
                    for h in self.buffer.sample_replay(self.cfg.schedule.replay_batch_size) {
                        let item = self.buffer.get(h);
                        samples.push((item.input.clone(), item.task_id));
                    }
                }
                if samples.is_empty() {
                    continue;
                }
                for t in &dg_tensors {
                    t.zero_grad();
                }
                let mut terms = Vec::with_capacity(samples.len());
                let mut own_codes: Vec<Vec<Tensor>> = vec![Vec::new(); seen.len()];
                for (x, sample_task) in &samples {
                    let f = self.model.backbone_features(x)?;
                    let codes: Vec<Tensor> = seen
                        .iter()
                        .map(|&e| Ok(self.model.experts[e].encode(&f)?.values))
                        .collect::<Result<Vec<_>>>()?;
                    let own = self.model.expert_for_task(*sample_task);
                    let pos = seen.iter().position(|&e| e == own).ok_or_else(|| {
                        HiclError::Protocol(format!(
                            "replayed task {sample_task} routes to unseen expert {own}"
                        ))
                    })?;
                    own_codes[pos].push(codes[pos].clone());
                    terms.push(loss_contrastive_phase2(
                        &codes,
                        &protos,
                        pos,
                        w.m_contrastive,
                        self.cfg.phase2_cross_form,
                    )?);
                }
                let total = compose_phase2(&w, &batch_mean(&terms)?)?;
                backward(&total)?;
                opt.step(&dg_tensors)?;
                if self.cfg.phase2_update_prototypes {
                    // Keep every prototype tracking its own expert's moving
                    // codes: each expert's EMA advances on the mean code of
                    // this step's samples from its own task (current batch
                    // for the fresh expert, replayed items for older ones).
                    // Without this, a prototype frozen at its task's end
                    // drifts apart from the expert as later tasks keep
                    // shaping the shared DG stage.
                    for (pos, codes) in own_codes.iter().enumerate() {
                        if codes.is_empty() {
                            continue;
                        }
                        let mean_code = mean_vectors(codes)?;
                        self.model.prototypes[seen[pos]].apply_ema(&mean_code)?;
                    }
                    protos = seen.iter().map(|&e| self.model.prototypes[e].clone()).collect();
                }
                steps += 1;
            }
        }
        Ok(steps)
    }

    /// Empirical diagonal Fisher at task end: mean squared gradient of the
    /// per-sample classification loss over the last `FISHER_SAMPLES`
    /// samples of the final Phase-I epoch, with anchors at current values.
    pub(crate) fn anchor_fisher(&mut self, task: &TaskData, task_id: usize) -> Result<()> {
        let expert = self.model.expert_for_task(task_id);
        let named = self.model.named_parameters();
        let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        let tail_start = self.last_epoch_order.len().saturating_sub(FISHER_SAMPLES);
        let tail = &self.last_epoch_order[tail_start..];
        self.audit.record(task_id, task_id)?;

        let mut sq_sums: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for &i in tail {
            for t in &tensors {
                t.zero_grad();
            }
            let f = self.model.backbone_features(&task.inputs[i])?;
            let (_, logits) = self.model.experts[expert].forward(&f)?;
            let ce = cross_entropy(&logits, task.labels[i])?;
            backward(&ce)?;
            for (t, sq) in tensors.iter().zip(&mut sq_sums) {
                if let Some(g) = t.grad() {
                    for (s, gi) in sq.iter_mut().zip(&g) {
                        *s += gi * gi;
                    }
                }
            }
        }
        let scale = 1.0 / tail.len() as f64;
        let fisher: Vec<(String, Vec<f64>)> = named
            .iter()
            .zip(&mut sq_sums)
            .map(|((name, _), sq)| {
                for v in sq.iter_mut() {
                    *v *= scale;
                }
                (name.clone(), std::mem::take(sq))
            })
            .collect();
        let anchor: Vec<(String, Vec<f64>)> = named
            .iter()
            .map(|(name, t)| (name.clone(), t.to_vec()))
            .collect();
        let prototype = self.model.prototypes[expert].vector.clone();
        self.fisher_set
            .push(FisherInfo::new(task_id, fisher, anchor, prototype)?);
        Ok(())
    }

    /// Write the full training state at a task boundary.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        CheckpointData::capture(
            &self.cfg,
            &self.model,
            &self.fisher_set,
            self.snapshot.as_ref(),
            self.seen_tasks,
            self.n_global_classes,
            self.classes_per_task,
        )
        .save(path)
    }
}

/// Mean of scalar graph tensors.
fn batch_mean(terms: &[Tensor]) -> Result<Tensor> {
    let mut it = terms.iter();
    let first = it
        .next()
        .ok_or_else(|| HiclError::Contract("mean over empty batch".into()))?;
    let mut acc = first.clone();
    for t in it {
        acc = acc.add(t)?;
    }
    acc.scale(1.0 / terms.len() as f64)
}

/// Element-wise mean of equal-length tensors, detached to plain data.
fn mean_vectors(codes: &[Tensor]) -> Result<Vec<f64>> {
    let first = codes
        .first()
        .ok_or_else(|| HiclError::Contract("mean over empty code batch".into()))?;
    let mut acc = vec![0.0; first.len()];
    for c in codes {
        for (a, v) in acc.iter_mut().zip(c.data().iter()) {
            *a += v;
        }
    }
    let n = codes.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

// ── evaluation ───────────────────────────────────────────────────────

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Task-aware accuracy: inputs force-routed to the task's own expert,
/// predictions argmaxed over its local classes.
pub fn task_il_accuracy(model: &HiclModel, task: &TaskData, task_id: usize) -> Result<f64> {
    if task.eval_inputs.is_empty() {
        return Err(HiclError::Data(format!("task {task_id} has no evaluation data")));
    }
    let expert = model.expert_for_task(task_id);
    let mut correct = 0usize;
    for (x, &y) in task.eval_inputs.iter().zip(&task.eval_labels) {
        let (_, logits) = model.forced_forward(x, expert)?;
        if argmax(&logits.to_vec()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.eval_inputs.len() as f64)
}

/// Task-free accuracy: hard-gated conditional forward, predictions argmaxed
/// over the global class range.
pub fn class_il_accuracy(model: &HiclModel, task: &TaskData, task_id: usize) -> Result<f64> {
    if task.eval_inputs.is_empty() {
        return Err(HiclError::Data(format!("task {task_id} has no evaluation data")));
    }
    let mut correct = 0usize;
    for (x, &y) in task.eval_inputs.iter().zip(&task.eval_labels) {
        let (global_logits, _) = model.moe_forward(x, crate::router::GatingMode::Hard, true)?;
        let truth = task.global_label(y)?;
        if argmax(&global_logits) == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.eval_inputs.len() as f64)
}

// ── full-stream orchestration ────────────────────────────────────────

/// Build the stream a config describes.
pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            n_tasks,
            classes_per_task,
            dim,
            separation,
            train_per_class,
            eval_per_class,
        } => make_synthetic_stream(
            *n_tasks,
            *classes_per_task,
            *dim,
            *separation,
            *train_per_class,
            *eval_per_class,
            cfg.seed,
        ),
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            n_tasks,
        } => {
            let (imgs, labs) = load_idx(Path::new(train_images), Path::new(train_labels))?;
            let mut stream = split_dataset(imgs, labs, *n_tasks)?;
            let (ti, tl) = load_idx(Path::new(test_images), Path::new(test_labels))?;
            let held = split_dataset(ti, tl, *n_tasks)?;
            attach_eval(&mut stream, held)?;
            Ok(stream)
        }
    }
}

/// Train every task in order, evaluating on all seen tasks after each
/// boundary. With `out_dir` set, writes `task_<t>.ckpt` checkpoints,
/// `metrics.jsonl`, `report.json`, `report.csv`, and `report_detail.csv`.
pub fn run_stream(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<(MetricsReport, Vec<MetricsEvent>)> {
    let stream = build_stream(cfg)?;
    run_stream_with(cfg, &stream, out_dir)
}

/// `run_stream` over an already-built stream (ablations reuse one stream
/// across model variants).
pub fn run_stream_with(
    cfg: &RunConfig,
    stream: &TaskStream,
    out_dir: Option<&Path>,
) -> Result<(MetricsReport, Vec<MetricsEvent>)> {
    let n_tasks = stream.n_tasks();
    if n_tasks == 0 {
        return Err(HiclError::Data("empty task stream".into()));
    }
    let classes_per_task = stream.tasks[0].n_classes();
    if stream.tasks.iter().any(|t| t.n_classes() != classes_per_task) {
        return Err(HiclError::Config(
            "tasks carry different class counts; expert heads are uniform".into(),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HiclError::io(dir.display().to_string(), e))?;
    }
    let mut trainer = Trainer::new(cfg, stream.n_global_classes(), classes_per_task)?;
    let mut events = Vec::new();
    let mut matrix: Vec<Vec<f64>> = Vec::new();
    let mut class_il_last = vec![0.0; n_tasks];
    let mut routing_last = 0.0;

    for (t, task) in stream.tasks.iter().enumerate() {
        let summary = trainer.train_task(task, t)?;
        events.push(MetricsEvent::TaskTrained {
            task_id: t,
            phase1_steps: summary.phase1_steps,
            phase2_steps: summary.phase2_steps,
            final_phase1_loss: summary.final_phase1_loss,
        });
        let mut row = Vec::with_capacity(t + 1);
        for (tau, seen) in stream.tasks.iter().enumerate().take(t + 1) {
            let til = task_il_accuracy(&trainer.model, seen, tau)?;
            let cil = class_il_accuracy(&trainer.model, seen, tau)?;
            row.push(til);
            class_il_last[tau] = cil;
            events.push(MetricsEvent::Evaluation {
                after_task: t,
                eval_task: tau,
                task_il: til,
                class_il: cil,
            });
        }
        matrix.push(row);
        routing_last = crate::analysis::routing_accuracy(&trainer.model, stream, t + 1)?;
        events.push(MetricsEvent::Routing {
            after_task: t,
            accuracy: routing_last,
        });
        if let Some(dir) = out_dir {
            trainer.save_checkpoint(&dir.join(format!("task_{t}.ckpt")))?;
        }
    }

    let task_il_per_task = matrix.last().cloned().unwrap_or_default();
    let forgetting = forgetting_from_matrix(&matrix);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = MetricsReport {
        n_tasks,
        accuracy_matrix: matrix,
        mean_task_il: mean(&task_il_per_task),
        mean_class_il: mean(&class_il_last),
        task_il_per_task,
        class_il_per_task: class_il_last,
        routing_accuracy: routing_last,
        mean_forgetting: mean(&forgetting),
        forgetting_per_task: forgetting,
        flops: count_flops(cfg, classes_per_task),
    };
    if let Some(dir) = out_dir {
        crate::metrics::write_events(&dir.join("metrics.jsonl"), &events)?;
        let write = |name: &str, text: &str| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| HiclError::io(p.display().to_string(), e))
        };
        write("report.json", &report.to_json()?)?;
        write("report.csv", &report.to_csv())?;
        write("report_detail.csv", &report.to_detail_csv())?;
    }
    Ok((report, events))
}

//! The assembled mixture: one shared backbone, N expert stacks, and one
//! prototype per expert. Forward paths come in two flavors — forced routing
//! (training and task-aware evaluation) and gated routing (task-free
//! evaluation), the latter with optional conditional computation that runs
//! only the selected experts' CA3/CA1/head stages.

use crate::config::RunConfig;
use crate::encoder::{Backbone, DgCode, EncoderConfig, Expert};
use crate::error::HiclError;
use crate::rng::substream;
use crate::router::{gate, GateDecision, GatingMode, Prototype};
use crate::tensor::Tensor;
use crate::Result;

pub struct HiclModel {
    pub encoder_cfg: EncoderConfig,
    pub backbone: Backbone,
    pub experts: Vec<Expert>,
    pub prototypes: Vec<Prototype>,
    /// Global class ids served by each expert; empty until a task is
    /// assigned. Re-assigned when tasks outnumber experts (ablations).
    pub expert_classes: Vec<Vec<usize>>,
    pub n_global_classes: usize,
    pub gating: GatingMode,
    pub temperature: f64,
}

impl HiclModel {
    /// Build a fresh model; all weights drawn from the config seed's
    /// "init" sub-stream.
    pub fn new(cfg: &RunConfig, n_global_classes: usize, classes_per_task: usize) -> Result<Self> {
        cfg.encoder.validate()?;
        let mut rng = substream(cfg.seed, "init");
        let backbone = Backbone::new(&cfg.encoder, &mut rng)?;
        let experts = (0..cfg.n_experts)
            .map(|id| Expert::new(id, &cfg.encoder, classes_per_task, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let prototypes = (0..cfg.n_experts)
            .map(|id| Prototype::cold(id, cfg.encoder.dg_dim, cfg.proto_ema))
            .collect();
        Ok(Self {
            encoder_cfg: cfg.encoder.clone(),
            backbone,
            experts,
            prototypes,
            expert_classes: vec![Vec::new(); cfg.n_experts],
            n_global_classes,
            gating: cfg.gating,
            temperature: cfg.temperature,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Task → expert assignment: one expert per task, wrapping when tasks
    /// outnumber experts.
    pub fn expert_for_task(&self, task_id: usize) -> usize {
        task_id % self.experts.len()
    }

    /// Record which global classes an expert's head now serves.
    pub fn assign_task(&mut self, task_id: usize, class_list: &[usize]) -> Result<()> {
        let e = self.expert_for_task(task_id);
        if class_list.len() != self.experts[e].n_classes {
            return Err(HiclError::Contract(format!(
                "expert {e} has {} outputs but task {task_id} carries {} classes",
                self.experts[e].n_classes,
                class_list.len()
            )));
        }
        self.expert_classes[e] = class_list.to_vec();
        Ok(())
    }

    pub fn backbone_features(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.encoder_cfg.input_dim {
            return Err(HiclError::Dimension {
                op: "backbone_features",
                lhs: vec![self.encoder_cfg.input_dim],
                rhs: vec![x.len()],
            });
        }
        let t = Tensor::from_vec(x.to_vec(), &[x.len()])?;
        self.backbone.features(&t)
    }

    /// Separation codes of every expert — the always-on routing signals.
    pub fn encode_all(&self, f: &Tensor) -> Result<Vec<DgCode>> {
        self.experts.iter().map(|e| e.encode(f)).collect()
    }

    /// Training/task-aware path: run one designated expert end to end.
    /// Returns its separation code and local class logits.
    pub fn forced_forward(&self, x: &[f64], expert: usize) -> Result<(DgCode, Tensor)> {
        if expert >= self.experts.len() {
            return Err(HiclError::Routing(format!(
                "expert {expert} out of range (N = {})",
                self.experts.len()
            )));
        }
        let f = self.backbone_features(x)?;
        self.experts[expert].forward(&f)
    }

    /// Gated inference. All experts' grid/DG stages run to produce routing
    /// signals; with `conditional` set, only selected experts (nonzero gate
    /// weight) run CA3/CA1/head. Returns global class logits assembled from
    /// per-expert blocks scaled by gate weight.
    ///
    /// Experts with zero gate weight are skipped in the dense pass too when
    /// accumulating logits, so conditional and dense hard-gated execution
    /// agree bit for bit.
    pub fn moe_forward(
        &self,
        x: &[f64],
        mode: GatingMode,
        conditional: bool,
    ) -> Result<(Vec<f64>, GateDecision)> {
        let f = self.backbone_features(x)?;
        let codes = self.encode_all(&f)?;
        let decision = gate(&codes, &self.prototypes, mode, self.temperature)?;

        let mut global = vec![0.0; self.n_global_classes];
        for (e, code) in codes.iter().enumerate() {
            let alpha = decision.weights[e];
            if alpha == 0.0 {
                continue;
            }
            if conditional && !decision.selected_experts.contains(&e) {
                continue;
            }
            if self.expert_classes[e].is_empty() {
                // Never trained: nothing to contribute.
                continue;
            }
            let logits = self.experts[e].logits_from_code(code)?;
            let local = logits.to_vec();
            for (c, &v) in local.iter().enumerate() {
                let g = self.expert_classes[e][c];
                global[g] += alpha * v;
            }
        }
        Ok((global, decision))
    }

    /// All parameters in a stable order: backbone first, then each expert.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.backbone.named_params("backbone");
        for (i, e) in self.experts.iter().enumerate() {
            out.extend(e.named_params(&format!("expert.{i}")));
        }
        out
    }

    /// The Phase-II trainable set: every expert's DG projection and DG
    /// LayerNorm parameters.
    pub fn dg_parameters(&self) -> Vec<(String, Tensor)> {
        self.experts
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.dg_params(&format!("expert.{i}")))
            .collect()
    }

    /// Whether a parameter name belongs to the DG stage.
    pub fn is_dg_param(name: &str) -> bool {
        name.contains(".dg.")
    }
}

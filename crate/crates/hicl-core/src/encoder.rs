//! One expert's encoding stack, staged after the hippocampal circuit:
//! shared backbone features feed a bank of sinusoidal grid units, a sparse
//! top-k separation layer (DG), a small refinement MLP (CA3), and an
//! integration head (CA1) that concatenates the sparse and refined codes
//! before classification.
//!
//! The separation code doubles as the routing signal, so the grid + DG
//! stages of *every* expert run on each input even under conditional
//! computation; only CA3/CA1/head are gated.

use crate::error::HiclError;
use crate::nn::{Dense, LayerNorm1d};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Architecture of the shared backbone and each expert stack.
///
/// `sparsity_rho` fixes the kept fraction of the separation layer:
/// k = ⌊sparsity_rho · dg_dim⌋, computed once here and never per-sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub backbone_widths: Vec<usize>,
    /// Number of parallel sinusoidal grid units M.
    pub grid_units: usize,
    /// Output size of each grid unit.
    pub grid_dim: usize,
    pub dg_dim: usize,
    pub sparsity_rho: f64,
    pub ca3_widths: (usize, usize),
    pub ca1_widths: Vec<usize>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for EncoderConfig {
    /// Desk-scale stack: 64-d inputs, 256-d separation layer (k = 12).
    fn default() -> Self {
        Self {
            input_dim: 64,
            backbone_widths: vec![64],
            grid_units: 4,
            grid_dim: 16,
            dg_dim: 256,
            sparsity_rho: 0.05,
            ca3_widths: (64, 32),
            ca1_widths: vec![64, 32, 16],
            ln_eps: default_ln_eps(),
        }
    }
}

impl EncoderConfig {
    /// Active-unit count of the separation code.
    pub fn k(&self) -> usize {
        (self.sparsity_rho * self.dg_dim as f64).floor() as usize
    }

    pub fn backbone_out(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&self.input_dim)
    }

    pub fn grid_out(&self) -> usize {
        self.grid_units * self.grid_dim
    }

    pub fn ca3_out(&self) -> usize {
        self.ca3_widths.1
    }

    /// Length of the integrated code [p_sep ; p_comp].
    pub fn integrated_dim(&self) -> usize {
        self.dg_dim + self.ca3_out()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity_rho > 0.0 && self.sparsity_rho < 1.0) {
            return Err(HiclError::Parameter {
                name: "sparsity_rho".into(),
                reason: format!("must lie in (0,1), got {}", self.sparsity_rho),
            });
        }
        if self.k() < 1 {
            return Err(HiclError::Config(format!(
                "floor(sparsity_rho * dg_dim) = {} leaves no active units",
                self.k()
            )));
        }
        if self.k() >= self.dg_dim {
            return Err(HiclError::Config(format!(
                "k = {} must be smaller than dg_dim = {}",
                self.k(),
                self.dg_dim
            )));
        }
        let widths = self
            .backbone_widths
            .iter()
            .chain(self.ca1_widths.iter())
            .chain([&self.input_dim, &self.grid_dim, &self.dg_dim])
            .chain([&self.ca3_widths.0, &self.ca3_widths.1]);
        for &w in widths {
            if w == 0 {
                return Err(HiclError::Config("all widths must be positive".into()));
            }
        }
        if self.grid_units == 0 {
            return Err(HiclError::Config("grid_units must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sparse separation code: exactly k nonzero entries, the rest zeroed.
///
/// `pre_topk` keeps the ReLU output ahead of normalization/top-k for the
/// sparsity regularizer; `values` stays in the autodiff graph so loss
/// gradients reach the backbone through the top-k mask.
pub struct DgCode {
    pub values: Tensor,
    pub active_set: Vec<usize>,
    pub pre_topk: Tensor,
}

impl DgCode {
    /// Detached code from raw values, for tests and analysis tooling.
    pub fn from_values(values: Vec<f64>, active_set: Vec<usize>) -> Result<Self> {
        let n = values.len();
        let t = Tensor::from_vec(values, &[n])?;
        Ok(Self { values: t.clone(), active_set, pre_topk: t })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Concatenation [p_sep ; p_comp]; the first `dg_len` entries are the
/// separation code verbatim.
pub struct IntegratedCode {
    pub values: Tensor,
    pub dg_len: usize,
}

/// Shared dense feature extractor; ReLU after every layer.
pub struct Backbone {
    pub layers: Vec<Dense>,
}

impl Backbone {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut in_dim = cfg.input_dim;
        for &w in &cfg.backbone_widths {
            layers.push(Dense::new(in_dim, w, rng)?);
            in_dim = w;
        }
        Ok(Self { layers })
    }

    /// f = ReLU-activated dense stack output.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.relu()?;
        }
        Ok(h)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named_params(&format!("{prefix}.{i}")))
            .collect()
    }

    /// Frozen copy of the current weights (distillation snapshot).
    pub fn frozen_copy(&self) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Dense::from_data(l.weight.to_vec(), l.bias.to_vec(), l.in_dim, l.out_dim, false)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// One expert: grid encoding, sparse separation, refinement, and its head.
pub struct Expert {
    pub id: usize,
    /// M parallel affine maps; bias doubles as the phase offset φ_m.
    pub grid: Vec<Dense>,
    pub dg_proj: Dense,
    pub dg_norm: LayerNorm1d,
    pub ca3_a: Dense,
    pub ca3_b: Dense,
    pub ca3_norm: LayerNorm1d,
    /// CA1 integration stack ending in class logits.
    pub head: Vec<Dense>,
    pub k: usize,
    pub n_classes: usize,
}

impl Expert {
    pub fn new(id: usize, cfg: &EncoderConfig, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        let feat = cfg.backbone_out();
        let grid = (0..cfg.grid_units)
            .map(|_| Dense::new(feat, cfg.grid_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let dg_proj = Dense::new(cfg.grid_out(), cfg.dg_dim, rng)?;
        let dg_norm = LayerNorm1d::new(cfg.dg_dim, cfg.ln_eps)?;
        let ca3_a = Dense::new(cfg.dg_dim, cfg.ca3_widths.0, rng)?;
        let ca3_b = Dense::new(cfg.ca3_widths.0, cfg.ca3_widths.1, rng)?;
        let ca3_norm = LayerNorm1d::new(cfg.ca3_widths.1, cfg.ln_eps)?;

        let mut head = Vec::new();
        let mut in_dim = cfg.integrated_dim();
        for &w in &cfg.ca1_widths {
            head.push(Dense::new(in_dim, w, rng)?);
            in_dim = w;
        }
        head.push(Dense::new(in_dim, n_classes, rng)?);

        Ok(Self {
            id,
            grid,
            dg_proj,
            dg_norm,
            ca3_a,
            ca3_b,
            ca3_norm,
            head,
            k: cfg.k(),
            n_classes,
        })
    }

    /// g = concat(sin(W_1 f + φ_1), …, sin(W_M f + φ_M)); entries in [−1,1].
    pub fn grid_encode(&self, f: &Tensor) -> Result<Tensor> {
        let units = self
            .grid
            .iter()
            .map(|u| u.forward(f)?.sin())
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = units.iter().collect();
        crate::tensor::concat(&refs)
    }

    /// z = ReLU(W_DG g + b_DG); keep the k largest post-norm entries.
    pub fn dg_separate(&self, g: &Tensor) -> Result<DgCode> {
        let z = self.dg_proj.forward(g)?.relu()?;
        let normed = self.dg_norm.forward(&z)?;
        let (values, active_set) = normed.top_k(self.k)?;
        Ok(DgCode { values, active_set, pre_topk: z })
    }

    /// p_comp = LayerNorm(ReLU(W_2 ReLU(W_1 p_sep + b_1) + b_2)).
    pub fn ca3_refine(&self, code: &DgCode) -> Result<Tensor> {
        let h = self.ca3_a.forward(&code.values)?.relu()?;
        let h = self.ca3_b.forward(&h)?.relu()?;
        self.ca3_norm.forward(&h)
    }

    /// u = [p_sep ; p_comp].
    pub fn ca1_integrate(code: &DgCode, p_comp: &Tensor) -> Result<IntegratedCode> {
        let values = crate::tensor::concat(&[&code.values, p_comp])?;
        Ok(IntegratedCode { values, dg_len: code.dim() })
    }

    /// Class logits from the integrated code (ReLU between hidden layers,
    /// linear final layer).
    pub fn head_logits(&self, u: &IntegratedCode) -> Result<Tensor> {
        let mut h = u.values.clone();
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.head.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Grid + separation only — the always-on routing path.
    pub fn encode(&self, f: &Tensor) -> Result<DgCode> {
        let g = self.grid_encode(f)?;
        self.dg_separate(&g)
    }

    /// Full expert pass: separation code and class logits.
    pub fn forward(&self, f: &Tensor) -> Result<(DgCode, Tensor)> {
        let code = self.encode(f)?;
        let logits = self.logits_from_code(&code)?;
        Ok((code, logits))
    }

    /// CA3/CA1/head stages on an existing separation code (the gated part).
    pub fn logits_from_code(&self, code: &DgCode) -> Result<Tensor> {
        let p_comp = self.ca3_refine(code)?;
        let u = Self::ca1_integrate(code, &p_comp)?;
        self.head_logits(&u)
    }

    /// All parameters, DG-stage ones first (the Phase-II trainable set:
    /// projection weights/bias and separation LayerNorm gain/bias).
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.dg_params(prefix);
        for (i, u) in self.grid.iter().enumerate() {
            out.extend(u.named_params(&format!("{prefix}.grid.{i}")));
        }
        out.extend(self.ca3_a.named_params(&format!("{prefix}.ca3.0")));
        out.extend(self.ca3_b.named_params(&format!("{prefix}.ca3.1")));
        out.extend(self.ca3_norm.named_params(&format!("{prefix}.ca3.norm")));
        for (i, l) in self.head.iter().enumerate() {
            out.extend(l.named_params(&format!("{prefix}.head.{i}")));
        }
        out
    }

    pub fn dg_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.dg_proj.named_params(&format!("{prefix}.dg"));
        out.extend(self.dg_norm.named_params(&format!("{prefix}.dg.norm")));
        out
    }
}

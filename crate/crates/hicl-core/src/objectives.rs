//! Loss terms and their weighted compositions. Phase I combines
//! classification with the auxiliary stabilizers (code push–pull, replay,
//! feature distillation, similarity-weighted EWC, sparsity); Phase II is the
//! prototype contrastive loss alone. Everything here is a pure function of
//! tensors, so each term can be finite-difference checked in isolation.

use crate::error::HiclError;
use crate::model::HiclModel;
use crate::replay::ReplayItem;
use crate::router::{cosine_similarity, Prototype};
use crate::tensor::{log_softmax, Tensor};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Coefficients for all loss terms and the full-objective composition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_intra: f64,
    pub alpha_rep: f64,
    pub alpha_dist: f64,
    pub alpha_ewc: f64,
    pub alpha_s: f64,
    pub alpha_contrastive: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Extra EWC weight in the literal full objective; 0 by default because
    /// the Phase-I composition already carries the term.
    pub lambda3: f64,
    /// Extra replay weight in the literal full objective; 0 by default for
    /// the same reason.
    pub lambda4: f64,
    pub m_intra: f64,
    pub m_contrastive: f64,
    /// The λ inside the push–pull loss (weight of the push term).
    pub lambda_push: f64,
    /// Floor added to the inter-task EWC similarity weight, so dissimilar
    /// tasks still get minimal protection.
    pub epsilon_floor: f64,
    /// Temperature of the sigmoid surrogate in the sparsity loss.
    pub epsilon_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            // The push–pull term needs a light touch: its hinge is
            // subtracted, so once the pull drags different-label codes
            // under the margin the objective starts paying for further
            // collapse. A small weight and a small margin keep that basin
            // out of reach while the pull still tightens classes.
            alpha_intra: 0.01,
            alpha_rep: 1.0,
            alpha_dist: 0.1,
            alpha_ewc: 0.1,
            alpha_s: 0.01,
            alpha_contrastive: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.0,
            lambda4: 0.0,
            m_intra: 0.2,
            m_contrastive: 0.3,
            lambda_push: 1.0,
            epsilon_floor: 0.05,
            epsilon_s: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha_intra", self.alpha_intra),
            ("alpha_rep", self.alpha_rep),
            ("alpha_dist", self.alpha_dist),
            ("alpha_ewc", self.alpha_ewc),
            ("alpha_s", self.alpha_s),
            ("alpha_contrastive", self.alpha_contrastive),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda_push", self.lambda_push),
            ("epsilon_floor", self.epsilon_floor),
        ];
        for (name, v) in named {
            if v < 0.0 {
                return Err(HiclError::Parameter {
                    name: name.into(),
                    reason: format!("must be nonnegative, got {v}"),
                });
            }
        }
        for (name, m) in [("m_intra", self.m_intra), ("m_contrastive", self.m_contrastive)] {
            if !(0.0..=2.0).contains(&m) {
                return Err(HiclError::Parameter {
                    name: name.into(),
                    reason: format!("margin must lie in [0,2], got {m}"),
                });
            }
        }
        if !(self.epsilon_s > 0.0) {
            return Err(HiclError::Parameter {
                name: "epsilon_s".into(),
                reason: format!("must be positive, got {}", self.epsilon_s),
            });
        }
        Ok(())
    }
}

/// Diagonal Fisher estimate and parameter anchor from one finished task.
///
/// `fisher` and `anchor` are constant tensors aligned, name for name, with
/// the model's parameter registry. `weight` is the inter-task similarity
/// weight w_t used in the most recent EWC evaluation; the trainer refreshes
/// it from `prototype` (the task's prototype at anchoring time) before each
/// loss pass.
pub struct FisherInfo {
    pub task_id: usize,
    pub fisher: Vec<(String, Tensor)>,
    pub anchor: Vec<(String, Tensor)>,
    pub prototype: Vec<f64>,
    pub weight: f64,
}

impl FisherInfo {
    pub fn new(
        task_id: usize,
        fisher: Vec<(String, Vec<f64>)>,
        anchor: Vec<(String, Vec<f64>)>,
        prototype: Vec<f64>,
    ) -> Result<Self> {
        if fisher.len() != anchor.len() {
            return Err(HiclError::Contract(
                "fisher and anchor registries differ in length".into(),
            ));
        }
        for (name, f) in &fisher {
            if f.iter().any(|&v| v < 0.0) {
                return Err(HiclError::Contract(format!(
                    "negative Fisher entry in {name}"
                )));
            }
        }
        let to_tensors = |v: Vec<(String, Vec<f64>)>| -> Result<Vec<(String, Tensor)>> {
            v.into_iter()
                .map(|(n, d)| {
                    let len = d.len();
                    Ok((n, Tensor::from_vec(d, &[len])?))
                })
                .collect()
        };
        Ok(Self {
            task_id,
            fisher: to_tensors(fisher)?,
            anchor: to_tensors(anchor)?,
            prototype,
            weight: 0.0,
        })
    }
}

/// Inter-task EWC weight: max(0, cos(u_current, u_t)) + ε_floor.
pub fn ewc_task_weight(u_current: &[f64], u_t: &[f64], eps_floor: f64) -> Result<f64> {
    Ok(cosine_similarity(u_current, u_t)?.max(0.0) + eps_floor)
}

fn zero() -> Tensor {
    Tensor::scalar(0.0).expect("scalar zero")
}

/// Mean of scalar terms; errors on an empty list.
fn mean_of(terms: &[Tensor]) -> Result<Tensor> {
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

/// Cross-entropy of one sample: −log softmax(logits)[label].
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor> {
    if label >= logits.len() {
        return Err(HiclError::Data(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    log_softmax(logits)?.pick(label)?.neg()
}

/// Mean cross-entropy over a batch of per-sample logits.
pub fn loss_cls(logits: &[Tensor], labels: &[usize]) -> Result<Tensor> {
    if logits.len() != labels.len() {
        return Err(HiclError::Contract(format!(
            "{} logit vectors vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let terms = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| cross_entropy(l, y))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&terms)
}

/// Push–pull loss over a batch of separation codes: same-label pairs are
/// pulled together (squared distance), different-label pairs are pushed
/// apart through a hinge at margin `m_intra`, weighted by `lambda_push` and
/// subtracted — so the total can go negative. Pairs i<j counted once; each
/// term is averaged over its own pair count so the scale does not grow
/// quadratically with batch size (an unnormalized double sum dwarfs the
/// classification loss and collapses the encoder).
pub fn loss_intra(
    codes: &[Tensor],
    labels: &[usize],
    lambda_push: f64,
    m_intra: f64,
) -> Result<Tensor> {
    if codes.len() != labels.len() {
        return Err(HiclError::Contract(format!(
            "{} codes vs {} labels",
            codes.len(),
            labels.len()
        )));
    }
    let mut pull: Option<Tensor> = None;
    let mut push: Option<Tensor> = None;
    let (mut n_pull, mut n_push) = (0usize, 0usize);
    for i in 0..codes.len() {
        for j in (i + 1)..codes.len() {
            let d2 = codes[i].sub(&codes[j])?.square()?.sum()?;
            if labels[i] == labels[j] {
                n_pull += 1;
                pull = Some(match pull {
                    Some(acc) => acc.add(&d2)?,
                    None => d2,
                });
            } else {
                // Guard the sqrt: identical codes with different labels
                // would otherwise put an infinity in the backward pass.
                let d = d2.add_scalar(1e-12)?.sqrt()?;
                let hinge = Tensor::scalar(m_intra)?.sub(&d)?.relu()?.square()?;
                n_push += 1;
                push = Some(match push {
                    Some(acc) => acc.add(&hinge)?,
                    None => hinge,
                });
            }
        }
    }
    let pull = match pull {
        Some(p) => Some(p.scale(1.0 / n_pull as f64)?),
        None => None,
    };
    let push = match push {
        Some(q) => Some(q.scale(1.0 / n_push as f64)?),
        None => None,
    };
    match (pull, push) {
        (Some(p), Some(q)) => p.sub(&q.scale(lambda_push)?),
        (Some(p), None) => Ok(p),
        (None, Some(q)) => q.scale(lambda_push)?.neg(),
        (None, None) => Ok(zero()),
    }
}

/// Mean cross-entropy on replayed samples, each routed through its stored
/// task's expert. Returns the batch loss and the per-sample values the
/// buffer needs for its priority refresh. Empty batch → 0.
pub fn loss_replay(
    model: &HiclModel,
    items: &[ReplayItem],
) -> Result<(Tensor, Vec<f64>, Vec<(usize, Vec<f64>)>)> {
    if items.is_empty() {
        return Ok((zero(), Vec::new(), Vec::new()));
    }
    let mut terms = Vec::with_capacity(items.len());
    let mut values = Vec::with_capacity(items.len());
    let mut codes = Vec::with_capacity(items.len());
    for item in items {
        let expert = model.expert_for_task(item.task_id);
        let (code, logits) = model.forced_forward(&item.input, expert)?;
        let ce = cross_entropy(&logits, item.label)?;
        values.push(ce.item()?);
        terms.push(ce);
        // Detached copies so callers can maintain prototypes without
        // holding the autodiff graph alive.
        codes.push((item.task_id, code.values.to_vec()));
    }
    Ok((mean_of(&terms)?, values, codes))
}

/// Mean squared error between current backbone features and frozen-snapshot
/// features on the same inputs. Snapshot tensors are constants, so no
/// gradient reaches them. Empty batch (no snapshot yet) → 0.
pub fn loss_distill(features: &[Tensor], snapshot_features: &[Tensor]) -> Result<Tensor> {
    if features.len() != snapshot_features.len() {
        return Err(HiclError::Contract(format!(
            "{} feature vectors vs {} snapshot vectors",
            features.len(),
            snapshot_features.len()
        )));
    }
    if features.is_empty() {
        return Ok(zero());
    }
    let terms = features
        .iter()
        .zip(snapshot_features)
        .map(|(f, s)| f.sub(s)?.square()?.mean())
        .collect::<Result<Vec<_>>>()?;
    mean_of(&terms)
}

/// Similarity-weighted quadratic anchor: Σ_t w_t Σ_j F_{t,j} (θ_j − θ*_{t,j})².
/// `params` must be the same registry (names and order) the anchors were
/// taken from. Empty Fisher set → 0.
pub fn loss_ewc(params: &[(String, Tensor)], fisher_set: &[FisherInfo]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for info in fisher_set {
        if info.fisher.len() != params.len() {
            return Err(HiclError::Checkpoint(format!(
                "task {} anchors cover {} parameters, model has {}",
                info.task_id,
                info.fisher.len(),
                params.len()
            )));
        }
        let mut task_sum: Option<Tensor> = None;
        for (((name, theta), (fname, f)), (aname, anchor)) in
            params.iter().zip(&info.fisher).zip(&info.anchor)
        {
            if name != fname || name != aname {
                return Err(HiclError::Checkpoint(format!(
                    "anchor registry mismatch: {name} vs {fname}/{aname}"
                )));
            }
            if theta.len() != anchor.len() {
                return Err(HiclError::Checkpoint(format!(
                    "{name}: {} parameters vs {} anchored",
                    theta.len(),
                    anchor.len()
                )));
            }
            // Anchors are stored flat; compare on the flattened view.
            let term = theta.flatten()?.sub(anchor)?.square()?.mul(f)?.sum()?;
            task_sum = Some(match task_sum {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        if let Some(s) = task_sum {
            let weighted = s.scale(info.weight)?;
            total = Some(match total {
                Some(acc) => acc.add(&weighted)?,
                None => weighted,
            });
        }
    }
    Ok(total.unwrap_or_else(zero))
}

/// |mean activation fraction − ρ| with a sigmoid surrogate σ(z/ε_s) standing
/// in for the hard z > 0 indicator. Exact zeros contribute σ(0) = 0.5 — the
/// documented floor of the surrogate. Empty batch → 0.
pub fn loss_sparsity(pre_topk: &[Tensor], rho: f64, eps_s: f64) -> Result<Tensor> {
    if !(eps_s > 0.0) {
        return Err(HiclError::Parameter {
            name: "epsilon_s".into(),
            reason: format!("must be positive, got {eps_s}"),
        });
    }
    if pre_topk.is_empty() {
        return Ok(zero());
    }
    let fracs = pre_topk
        .iter()
        .map(|z| z.scale(1.0 / eps_s)?.sigmoid()?.mean())
        .collect::<Result<Vec<_>>>()?;
    mean_of(&fracs)?.add_scalar(-rho)?.abs()
}

/// Differentiable cosine between a graph tensor and a constant vector.
fn graph_cosine(x: &Tensor, u: &[f64]) -> Result<Tensor> {
    let nu: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nu < 1e-12 {
        return Err(HiclError::Routing(
            "cosine against a zero prototype".into(),
        ));
    }
    let uc = Tensor::from_vec(u.to_vec(), &[u.len()])?;
    let dot = x.mul(&uc)?.sum()?;
    let nx = x.square()?.sum()?.add_scalar(1e-24)?.sqrt()?;
    dot.div(&nx.scale(nu)?)
}

/// Phase-II consolidation loss for one sample:
/// (1 − cos(p^(t), u_t)) + Σ_{j≠t} max{0, cos(p^(j), u_j) − m}.
///
/// `codes[i]` pairs with `prototypes[i]`; pass only the experts of tasks
/// seen so far — every prototype here must be warm. With `cross_form` set,
/// the off-terms score the *current* code against the other prototypes
/// (cos(p^(t), u_j)) instead.
pub fn loss_contrastive_phase2(
    codes: &[Tensor],
    prototypes: &[Prototype],
    current: usize,
    m: f64,
    cross_form: bool,
) -> Result<Tensor> {
    if codes.len() != prototypes.len() {
        return Err(HiclError::Contract(format!(
            "{} codes vs {} prototypes",
            codes.len(),
            prototypes.len()
        )));
    }
    if current >= codes.len() {
        return Err(HiclError::Contract(format!(
            "current index {current} out of range ({} experts)",
            codes.len()
        )));
    }
    if let Some(p) = prototypes.iter().find(|p| p.is_cold()) {
        return Err(HiclError::Routing(format!(
            "prototype {} is cold; consolidation needs warm anchors",
            p.expert_id
        )));
    }
    let align = graph_cosine(&codes[current], &prototypes[current].vector)?;
    let mut total = Tensor::scalar(1.0)?.sub(&align)?;
    for j in 0..codes.len() {
        if j == current {
            continue;
        }
        let c = if cross_form {
            graph_cosine(&codes[current], &prototypes[j].vector)?
        } else {
            graph_cosine(&codes[j], &prototypes[j].vector)?
        };
        let hinge = c.add_scalar(-m)?.relu()?;
        total = total.add(&hinge)?;
    }
    Ok(total)
}

/// The Phase-I term values entering the composition.
pub struct Phase1Terms {
    pub cls: Tensor,
    pub intra: Tensor,
    pub replay: Tensor,
    pub distill: Tensor,
    pub ewc: Tensor,
    pub sparsity: Tensor,
}

/// Weighted accumulation, skipping zero-weight terms so they neither cost
/// graph nodes nor perturb the result.
fn accumulate(base: Tensor, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut acc = base;
    for &(w, t) in terms {
        if w != 0.0 {
            acc = acc.add(&t.scale(w)?)?;
        }
    }
    Ok(acc)
}

/// L_phase1 = L_cls + α_intra L_intra + α_rep L_replay + α_dist L_distill
///          + α_ewc L_EWC + α_s L_sparsity.
pub fn compose_phase1(w: &LossWeights, t: &Phase1Terms) -> Result<Tensor> {
    accumulate(
        t.cls.clone(),
        &[
            (w.alpha_intra, &t.intra),
            (w.alpha_rep, &t.replay),
            (w.alpha_dist, &t.distill),
            (w.alpha_ewc, &t.ewc),
            (w.alpha_s, &t.sparsity),
        ],
    )
}

/// L_phase2 = α_contrastive · L_contrastive.
pub fn compose_phase2(w: &LossWeights, contrastive: &Tensor) -> Result<Tensor> {
    contrastive.scale(w.alpha_contrastive)
}

/// Full objective: λ1 L_phase1 + λ2 L_phase2 + λ3 L_EWC + λ4 L_replay.
/// Defaults keep λ3 = λ4 = 0 since L_phase1 already carries both terms.
pub fn compose_full(
    w: &LossWeights,
    phase1: &Tensor,
    phase2: &Tensor,
    ewc: &Tensor,
    replay: &Tensor,
) -> Result<Tensor> {
    accumulate(
        zero(),
        &[
            (w.lambda1, phase1),
            (w.lambda2, phase2),
            (w.lambda3, ewc),
            (w.lambda4, replay),
        ],
    )
}

//! Prototype-based routing. Each expert keeps an exponential moving average
//! of its own separation codes; at inference an input is scored against every
//! expert by the cosine between that expert's code and its prototype, and the
//! gate turns the score vector into mixing weights under one of four modes.

use crate::encoder::DgCode;
use crate::error::HiclError;
use crate::Result;
use serde::{Deserialize, Serialize};

/// How similarity scores become mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    /// α_i ∝ exp(s_i / τ).
    Soft,
    /// One-hot on the argmax (ties: lowest expert id).
    Hard,
    /// Two best scores renormalized; the rest zero.
    Top2,
    /// Softmax over the top-2 scores only.
    Hybrid,
}

/// Running EMA of one expert's separation codes.
///
/// A prototype with no updates yet is "cold": its vector is all zeros and
/// cosine against it is defined as 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prototype {
    pub expert_id: usize,
    pub vector: Vec<f64>,
    pub update_count: u64,
    pub ema_rate: f64,
}

impl Prototype {
    pub fn cold(expert_id: usize, dim: usize, ema_rate: f64) -> Self {
        Self { expert_id, vector: vec![0.0; dim], update_count: 0, ema_rate }
    }

    pub fn is_cold(&self) -> bool {
        self.update_count == 0
    }

    /// u ← (1−μ)u + μ·v.
    pub fn apply_ema(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.vector.len() {
            return Err(HiclError::Dimension {
                op: "prototype_update",
                lhs: vec![self.vector.len()],
                rhs: vec![v.len()],
            });
        }
        let mu = self.ema_rate;
        for (u, &c) in self.vector.iter_mut().zip(v) {
            *u = (1.0 - mu) * *u + mu * c;
        }
        self.update_count += 1;
        Ok(())
    }
}

/// EMA update from a separation code; returns the advanced prototype.
pub fn update_prototype(p: &Prototype, code: &DgCode) -> Result<Prototype> {
    let mut next = p.clone();
    next.apply_ema(&code.values.to_vec())?;
    Ok(next)
}

/// Cosine of two equal-length vectors; 0 when either norm is below 1e-12
/// (the cold-prototype convention).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HiclError::Dimension {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Outcome of one routing decision.
#[derive(Debug, Clone)]
pub struct GateDecision {
    pub similarities: Vec<f64>,
    pub weights: Vec<f64>,
    pub mode: GatingMode,
    pub selected_experts: Vec<usize>,
}

impl GateDecision {
    /// The expert carrying the most weight (ties: lowest id).
    pub fn top_expert(&self) -> usize {
        argmax(&self.weights)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `s/τ` with the usual max shift.
fn softmax_weights(s: &[f64], tau: f64) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Mixing weights from a raw similarity vector. The pure core of `gate`,
/// split out so modes can be tested on hand-written score vectors.
pub fn gate_from_similarities(s: &[f64], mode: GatingMode, tau: f64) -> Result<GateDecision> {
    if s.is_empty() {
        return Err(HiclError::Routing("no experts to gate over".into()));
    }
    if tau <= 0.0 {
        return Err(HiclError::Parameter {
            name: "temperature".into(),
            reason: format!("must be positive, got {tau}"),
        });
    }
    let n = s.len();
    let (weights, selected) = match mode {
        GatingMode::Soft => {
            let w = softmax_weights(s, tau);
            (w, (0..n).collect())
        }
        GatingMode::Hard => {
            let best = argmax(s);
            let mut w = vec![0.0; n];
            w[best] = 1.0;
            (w, vec![best])
        }
        GatingMode::Top2 | GatingMode::Hybrid => {
            if n == 1 {
                (vec![1.0], vec![0])
            } else {
                // Two best scores, ties by lowest index.
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
                let (i, j) = (order[0], order[1]);
                let mut w = vec![0.0; n];
                let pair = [s[i], s[j]];
                let two = if mode == GatingMode::Top2 && pair[0] > 0.0 && pair[1] > 0.0 {
                    // Renormalize by the sum while both scores are positive;
                    // cosines can go negative, in which case fall through to
                    // a softmax over the pair.
                    let z = pair[0] + pair[1];
                    [pair[0] / z, pair[1] / z]
                } else {
                    let sm = softmax_weights(&pair, tau);
                    [sm[0], sm[1]]
                };
                w[i] = two[0];
                w[j] = two[1];
                let mut sel = vec![i, j];
                sel.sort_unstable();
                (w, sel)
            }
        }
    };
    Ok(GateDecision { similarities: s.to_vec(), weights, mode, selected_experts: selected })
}

/// Score every expert's code against its own prototype and gate.
///
/// Errors when every prototype is cold — routing is undefined before any
/// task has been trained.
pub fn gate(
    codes: &[DgCode],
    prototypes: &[Prototype],
    mode: GatingMode,
    tau: f64,
) -> Result<GateDecision> {
    if codes.len() != prototypes.len() {
        return Err(HiclError::Routing(format!(
            "{} codes vs {} prototypes",
            codes.len(),
            prototypes.len()
        )));
    }
    if prototypes.iter().all(|p| p.is_cold()) {
        return Err(HiclError::Routing("all prototypes are cold".into()));
    }
    let sims = codes
        .iter()
        .zip(prototypes)
        .map(|(c, p)| cosine_similarity(&c.values.to_vec(), &p.vector))
        .collect::<Result<Vec<f64>>>()?;
    gate_from_similarities(&sims, mode, tau)
}

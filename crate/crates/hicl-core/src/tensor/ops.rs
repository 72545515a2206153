//! Forward rules and their backward counterparts.
//!
//! Binary elementwise ops accept equal shapes or a single-element operand
//! (scalar broadcast on either side). `layer_norm`, `softmax` and
//! `log_softmax` are compositions of primitives, so their gradients come
//! from the chain rule rather than hand-derived formulas.

use super::{BackwardRule, Tensor};
use crate::error::{HiclError, Result};

enum Broadcast {
    Elementwise,
    ScalarRhs,
    ScalarLhs,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Elementwise)
    } else if b.len() == 1 {
        Ok(Broadcast::ScalarRhs)
    } else if a.len() == 1 {
        Ok(Broadcast::ScalarLhs)
    } else {
        Err(HiclError::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Elementwise binary op with per-operand partial derivatives
/// (as functions of the two operand values).
fn binary_op(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    df_da: impl Fn(f64, f64) -> f64 + 'static,
    df_db: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let kind = broadcast_kind(op, a, b)?;
    let (data, shape) = {
        let av = a.data();
        let bv = b.data();
        match kind {
            Broadcast::Elementwise => (
                av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
                a.shape().to_vec(),
            ),
            Broadcast::ScalarRhs => {
                let y = bv[0];
                (av.iter().map(|&x| f(x, y)).collect(), a.shape().to_vec())
            }
            Broadcast::ScalarLhs => {
                let x = av[0];
                (bv.iter().map(|&y| f(x, y)).collect(), b.shape().to_vec())
            }
        }
    };
    let (ac, bc) = (a.clone(), b.clone());
    let rule: BackwardRule = Box::new(move |out_grad| {
        let av = ac.data();
        let bv = bc.data();
        match broadcast_kind("backward", &ac, &bc).expect("checked in forward") {
            Broadcast::Elementwise => {
                let ga = out_grad
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&g, (&x, &y))| g * df_da(x, y))
                    .collect();
                let gb = out_grad
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&g, (&x, &y))| g * df_db(x, y))
                    .collect();
                vec![ga, gb]
            }
            Broadcast::ScalarRhs => {
                let y = bv[0];
                let ga = out_grad
                    .iter()
                    .zip(av.iter())
                    .map(|(&g, &x)| g * df_da(x, y))
                    .collect();
                let gb = out_grad
                    .iter()
                    .zip(av.iter())
                    .map(|(&g, &x)| g * df_db(x, y))
                    .sum::<f64>();
                vec![ga, vec![gb]]
            }
            Broadcast::ScalarLhs => {
                let x = av[0];
                let ga = out_grad
                    .iter()
                    .zip(bv.iter())
                    .map(|(&g, &y)| g * df_da(x, y))
                    .sum::<f64>();
                let gb = out_grad
                    .iter()
                    .zip(bv.iter())
                    .map(|(&g, &y)| g * df_db(x, y))
                    .collect();
                vec![vec![ga], gb]
            }
        }
    });
    Tensor::from_op(data, shape, vec![a.clone(), b.clone()], op, rule)
}

fn unary_op(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64 + 'static,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    let rule: BackwardRule = Box::new(move |out_grad| {
        let xv = xc.data();
        vec![out_grad
            .iter()
            .zip(xv.iter())
            .map(|(&g, &v)| g * df(v))
            .collect()]
    });
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], op, rule)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("add", self, other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("sub", self, other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("mul", self, other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary_op(
            "div",
            self,
            other,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    /// Multiply by a compile-time constant (no graph node for the scalar).
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary_op("scale", self, move |v| v * c, move |_| c)
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary_op("add_scalar", self, move |v| v + c, |_| 1.0)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary_op(
            "relu",
            self,
            |v| v.max(0.0),
            |v| if v > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sin(&self) -> Result<Tensor> {
        unary_op("sin", self, f64::sin, f64::cos)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary_op("exp", self, f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        unary_op("ln", self, f64::ln, |v| 1.0 / v)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        unary_op("sqrt", self, f64::sqrt, |v| 0.5 / v.sqrt())
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        fn sig(v: f64) -> f64 {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        }
        unary_op("sigmoid", self, sig, |v| {
            let s = sig(v);
            s * (1.0 - s)
        })
    }

    pub fn square(&self) -> Result<Tensor> {
        unary_op("square", self, |v| v * v, |v| 2.0 * v)
    }

    /// |x|, with subgradient 0 at the origin.
    pub fn abs(&self) -> Result<Tensor> {
        unary_op("abs", self, f64::abs, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Reinterpret as rank-1; values and gradients pass straight through.
    pub fn flatten(&self) -> Result<Tensor> {
        let n = self.len();
        let rule: BackwardRule = Box::new(move |out_grad| vec![out_grad.to_vec()]);
        Tensor::from_op(self.to_vec(), vec![n], vec![self.clone()], "flatten", rule)
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let n = self.len();
        let rule: BackwardRule = Box::new(move |out_grad| vec![vec![out_grad[0]; n]]);
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], "sum", rule)
    }

    /// Arithmetic mean of all elements (scalar output).
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len();
        if n == 0 {
            return Err(HiclError::InvalidShape {
                op: "mean",
                shape: self.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Matrix product. `self` must be [m×k]; `other` is [k×n] (output
    /// [m×n]) or a length-k vector (output length m).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || HiclError::Dimension {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (m, k) = match self.shape() {
            [m, k] => (*m, *k),
            _ => return Err(mismatch()),
        };
        let (k2, n, vec_rhs) = match other.shape() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }

        let mut data = vec![0.0; m * n];
        {
            let av = self.data();
            let bv = other.data();
            for i in 0..m {
                for p in 0..k {
                    let a_ip = av[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        data[i * n + j] += a_ip * bv[p * n + j];
                    }
                }
            }
        }
        let out_shape = if vec_rhs { vec![m] } else { vec![m, n] };
        let (ac, bc) = (self.clone(), other.clone());
        let rule: BackwardRule = Box::new(move |out_grad| {
            let av = ac.data();
            let bv = bc.data();
            // dA = dC · Bᵀ
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += out_grad[i * n + j] * bv[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            // dB = Aᵀ · dC
            let mut gb = vec![0.0; k * n];
            for p in 0..k {
                for i in 0..m {
                    let a_ip = av[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += a_ip * out_grad[i * n + j];
                    }
                }
            }
            vec![ga, gb]
        });
        Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            "matmul",
            rule,
        )
    }

    /// Extract element `index` of a 1-D tensor as a scalar.
    pub fn pick(&self, index: usize) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(HiclError::InvalidShape {
                op: "pick",
                shape: self.shape().to_vec(),
                reason: "expects a 1-D tensor".into(),
            });
        }
        let n = self.len();
        if index >= n {
            return Err(HiclError::Contract(format!(
                "pick index {index} out of range for length {n}"
            )));
        }
        let v = self.data()[index];
        let rule: BackwardRule = Box::new(move |out_grad| {
            let mut g = vec![0.0; n];
            g[index] = out_grad[0];
            vec![g]
        });
        Tensor::from_op(vec![v], vec![1], vec![self.clone()], "pick", rule)
    }

    /// Keep the `k` largest entries of a 1-D tensor, zero the rest.
    ///
    /// Ties break toward the lowest index. Gradients flow only through the
    /// kept entries (straight-through on the selection mask). Returns the
    /// masked tensor and the kept indices in ascending order.
    pub fn top_k(&self, k: usize) -> Result<(Tensor, Vec<usize>)> {
        if self.shape().len() != 1 {
            return Err(HiclError::InvalidShape {
                op: "top_k",
                shape: self.shape().to_vec(),
                reason: "expects a 1-D tensor".into(),
            });
        }
        let n = self.len();
        if k == 0 || k > n {
            return Err(HiclError::Parameter {
                name: "k",
                reason: format!("k={k} outside 1..={n}"),
            });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        {
            let v = self.data();
            idx.sort_by(|&a, &b| {
                v[b].partial_cmp(&v[a])
                    .expect("values are finite")
                    .then(a.cmp(&b))
            });
        }
        let mut active: Vec<usize> = idx[..k].to_vec();
        active.sort_unstable();
        let mut mask = vec![false; n];
        for &i in &active {
            mask[i] = true;
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i] { v } else { 0.0 })
            .collect();
        let mask_for_rule = mask.clone();
        let rule: BackwardRule = Box::new(move |out_grad| {
            vec![out_grad
                .iter()
                .enumerate()
                .map(|(i, &g)| if mask_for_rule[i] { g } else { 0.0 })
                .collect()]
        });
        let out = Tensor::from_op(data, vec![n], vec![self.clone()], "top_k", rule)?;
        Ok((out, active))
    }
}

/// Concatenate 1-D tensors. Backward slices the gradient back apart.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(HiclError::Contract("concat of zero tensors".into()));
    }
    let mut data = Vec::new();
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        if p.shape().len() != 1 {
            return Err(HiclError::InvalidShape {
                op: "concat",
                shape: p.shape().to_vec(),
                reason: "expects 1-D tensors".into(),
            });
        }
        lens.push(p.len());
        data.extend_from_slice(&p.data());
    }
    let total = data.len();
    let rule: BackwardRule = Box::new(move |out_grad| {
        let mut grads = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for &l in &lens {
            grads.push(out_grad[offset..offset + l].to_vec());
            offset += l;
        }
        grads
    });
    let parents: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
    Tensor::from_op(data, vec![total], parents, "concat", rule)
}

/// Normalize a 1-D tensor to zero mean and unit variance, then apply the
/// learnable affine `gain`/`bias`. Requires at least two elements.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.len();
    if x.shape().len() != 1 || d < 2 {
        return Err(HiclError::InvalidShape {
            op: "layer_norm",
            shape: x.shape().to_vec(),
            reason: "expects a 1-D tensor with at least 2 elements".into(),
        });
    }
    if gain.len() != d || bias.len() != d {
        return Err(HiclError::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mean = x.mean()?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.mean()?;
    let std = var.add_scalar(eps)?.sqrt()?;
    centered.div(&std)?.mul(gain)?.add(bias)
}

/// Temperature softmax over a 1-D tensor, shifted by the (detached)
/// maximum for stability. Gradients are exact by shift invariance.
pub fn softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(HiclError::Parameter {
            name: "temperature",
            reason: format!("must be positive, got {temperature}"),
        });
    }
    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = x.add_scalar(-max)?.scale(1.0 / temperature)?.exp()?;
    let total = exps.sum()?;
    exps.div(&total)
}

/// Log of softmax at temperature 1, in the numerically stable shifted form.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = x.add_scalar(-max)?;
    let lse = shifted.exp()?.sum()?.ln()?;
    shifted.sub(&lse)
}

//! Cosine similarity, group NT-Xent, and pre-training retrieval accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Scalar, Tensor};

/// Norm below which a representation is treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `dot(a, b) / (|a| |b|)`, in `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if !(n > NORM_FLOOR) {
            return Err(Error::DegenerateRepresentation { norm: n, floor: NORM_FLOOR });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Row-normalized copy of a `[R, H]` matrix plus the row norms.
fn normalize_rows<T: Scalar>(z: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if z.rank() != 2 {
        return Err(Error::shape("ntxent", format!("expected [2P, H], got {:?}", z.shape())));
    }
    let (r, h) = (z.shape()[0], z.shape()[1]);
    let mut u = Vec::with_capacity(r * h);
    let mut norms = Vec::with_capacity(r);
    for i in 0..r {
        let row: Vec<f64> = z.row(i).iter().map(|v| v.f64()).collect();
        let n = norm(&row);
        if !(n > NORM_FLOOR) {
            return Err(Error::DegenerateRepresentation { norm: n, floor: NORM_FLOOR });
        }
        u.extend(row.iter().map(|x| x / n));
        norms.push(n);
    }
    Ok((u, norms, r, h))
}

fn similarity_matrix(u: &[f64], r: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; r * r];
    for i in 0..r {
        for j in i..r {
            let d: f64 = u[i * h..(i + 1) * h].iter().zip(&u[j * h..(j + 1) * h]).map(|(a, b)| a * b).sum();
            s[i * r + j] = d;
            s[j * r + i] = d;
        }
    }
    s
}

/// Group NT-Xent over a `[2P, H]` input whose first `P` rows are the A side
/// and last `P` rows the B side; row `i` and row `i + P` form a positive
/// pair. Each anchor's denominator runs over every other row. Computed in
/// 64-bit with log-sum-exp stabilization.
#[derive(Clone, Copy, Debug)]
pub struct NtXent {
    pub temperature: f64,
}

struct NtXentParts {
    loss: f64,
    /// `dL/dS` where `S` is the cosine matrix divided by the temperature.
    grad_logits: Vec<f64>,
    u: Vec<f64>,
    norms: Vec<f64>,
    rows: usize,
    width: usize,
}

impl NtXent {
    fn parts<T: Scalar>(&self, z: &Tensor<T>) -> Result<NtXentParts> {
        let (u, norms, r, h) = normalize_rows(z)?;
        if r == 0 || r % 2 != 0 {
            return Err(Error::contract(format!("NT-Xent needs 2P rows with P >= 1, got {r}")));
        }
        let p = r / 2;
        let inv_t = 1.0 / self.temperature;
        let cos = similarity_matrix(&u, r, h);
        let mut loss = 0.0;
        let mut grad = vec![0.0; r * r];
        let scale = 1.0 / r as f64;
        for a in 0..r {
            let pos = (a + p) % r;
            let logits: Vec<f64> = (0..r).map(|j| cos[a * r + j] * inv_t).collect();
            let max = (0..r).filter(|&j| j != a).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..r).filter(|&j| j != a).map(|j| (logits[j] - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - logits[pos];
            for j in (0..r).filter(|&j| j != a) {
                let soft = (logits[j] - lse).exp();
                grad[a * r + j] += scale * (soft - f64::from(u8::from(j == pos)));
            }
        }
        Ok(NtXentParts {
            loss: loss * scale,
            grad_logits: grad,
            u,
            norms,
            rows: r,
            width: h,
        })
    }
}

impl<T: Scalar> CustomOp<T> for NtXent {
    fn name(&self) -> &'static str {
        "group_ntxent"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [z] = inputs else {
            return Err(Error::shape("group_ntxent", format!("expected 1 input, got {}", inputs.len())));
        };
        Ok(Tensor::scalar(T::of(self.parts(z)?.loss)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let z = inputs[0];
        let NtXentParts {
            grad_logits: g,
            u,
            norms,
            rows: r,
            width: h,
            ..
        } = self.parts(z)?;
        let upstream = grad.item().f64() / self.temperature;
        // dL/du_a = sum_j (G[a,j] + G[j,a]) u_j
        let mut du = vec![0.0; r * h];
        for a in 0..r {
            for j in 0..r {
                let w = g[a * r + j] + g[j * r + a];
                if w == 0.0 {
                    continue;
                }
                for k in 0..h {
                    du[a * h + k] += w * u[j * h + k];
                }
            }
        }
        let mut dz = Vec::with_capacity(r * h);
        for a in 0..r {
            let ua = &u[a * h..(a + 1) * h];
            let da = &du[a * h..(a + 1) * h];
            let dot: f64 = ua.iter().zip(da).map(|(x, y)| x * y).sum();
            for k in 0..h {
                dz.push(T::of(upstream * (da[k] - ua[k] * dot) / norms[a]));
            }
        }
        Ok(vec![Tensor::new(z.shape().to_vec(), dz)?])
    }
}

fn stack(za: &Tensor<f64>, zb: &Tensor<f64>) -> Result<Tensor<f64>> {
    if za.rank() != 2 || za.shape() != zb.shape() {
        return Err(Error::shape("ntxent", format!("Z_A {:?} vs Z_B {:?}", za.shape(), zb.shape())));
    }
    let mut data = za.data().to_vec();
    data.extend_from_slice(zb.data());
    Tensor::new(vec![2 * za.shape()[0], za.shape()[1]], data)
}

/// Mean NT-Xent over both sides for `[P, H]` group representations.
pub fn group_ntxent_loss(za: &Tensor<f64>, zb: &Tensor<f64>, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let z = stack(za, zb)?;
    let op = NtXent {
        temperature: config.temperature,
    };
    Ok(CustomOp::<f64>::forward(&op, &[&z])?.item())
}

/// Strict top-1 retrieval over a `[2P, H]` stack (A rows then B rows): an
/// anchor counts when its positive is strictly more similar than each of the
/// other `2P - 2` candidates. Ties count as misses.
pub fn retrieval_accuracy<T: Scalar>(z: &Tensor<T>) -> Result<f64> {
    let (u, _, r, h) = normalize_rows(z)?;
    if r < 4 || r % 2 != 0 {
        return Err(Error::contract(format!("retrieval accuracy needs P >= 2 (2P rows), got {r} rows")));
    }
    let p = r / 2;
    let cos = similarity_matrix(&u, r, h);
    let hits = (0..r)
        .filter(|&a| {
            let pos = (a + p) % r;
            let s = cos[a * r + pos];
            (0..r).filter(|&j| j != a && j != pos).all(|j| s > cos[a * r + j])
        })
        .count();
    Ok(hits as f64 / r as f64)
}

/// Cross-side top-1 retrieval over a `[2P, H]` stack: an A anchor counts
/// when its B partner is strictly more similar than every other B row, and
/// symmetrically for B anchors. Chance is `1 / P`.
pub fn cross_retrieval_accuracy<T: Scalar>(z: &Tensor<T>) -> Result<f64> {
    let (u, _, r, h) = normalize_rows(z)?;
    if r < 4 || r % 2 != 0 {
        return Err(Error::contract(format!("retrieval accuracy needs P >= 2 (2P rows), got {r} rows")));
    }
    let p = r / 2;
    let cos = similarity_matrix(&u, r, h);
    let hits = (0..r)
        .filter(|&a| {
            let pos = (a + p) % r;
            let other = if a < p { p..r } else { 0..p };
            let s = cos[a * r + pos];
            other.filter(|&j| j != pos).all(|j| s > cos[a * r + j])
        })
        .count();
    Ok(hits as f64 / r as f64)
}

/// [`retrieval_accuracy`] for separate `[P, H]` sides.
pub fn pretrain_accuracy(za: &Tensor<f64>, zb: &Tensor<f64>) -> Result<f64> {
    retrieval_accuracy(&stack(za, zb)?)
}

//! L2-regularised multinomial logistic regression solved with L-BFGS.
//!
//! The objective matches the usual `C`-parameterised form,
//! `½‖W‖² + C Σᵢ CE(W xᵢ + b, yᵢ)`, scaled by `1 / (C n)` so that it reads
//! `mean CE + ‖W‖² / (2 C n)`. The bias is not penalised.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageset::Label;

/// Per-feature affine standardisation to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let d = x.first().map(Vec::len).ok_or_else(|| Error::data("no samples to standardise"))?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // Constant features keep unit scale.
        let scale = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    }
}

/// `scores = W x + b` with W stored row-per-class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Argmax class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Label {
        let s = self.scores(x);
        let mut best = 0;
        for j in 1..s.len() {
            if s[j] > s[best] {
                best = j;
            }
        }
        best as Label
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[Label]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        let hits = x.iter().zip(y).filter(|(r, &t)| self.predict(r) == t).count();
        hits as f64 / x.len() as f64
    }

    /// Rewrites a classifier trained on standardised inputs as one acting on raw inputs.
    pub fn fold_standardizer(&self, s: &Standardizer) -> LinearClassifier {
        let weight: Vec<Vec<f64>> = self
            .weight
            .iter()
            .map(|w| w.iter().zip(&s.scale).map(|(a, sc)| a / sc).collect())
            .collect();
        let bias = self
            .bias
            .iter()
            .zip(&weight)
            .map(|(b, w)| b - w.iter().zip(&s.mean).map(|(a, m)| a * m).sum::<f64>())
            .collect();
        LinearClassifier { weight, bias }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop when the gradient's max-norm falls below this.
    pub tol: f64,
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 1000,
            tol: 1e-6,
            memory: 10,
        }
    }
}

/// Objective value and gradient over the flattened parameters
/// `[W row-major (k×d), b (k)]`.
pub struct Objective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [Label],
    k: usize,
    d: usize,
    c: f64,
}

impl<'a> Objective<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [Label], k: usize, c: f64) -> Result<Self> {
        let d = x.first().map(Vec::len).ok_or_else(|| Error::data("no training samples"))?;
        if x.len() != y.len() || x.iter().any(|r| r.len() != d) {
            return Err(Error::data("ragged feature matrix or label count mismatch"));
        }
        if let Some(&bad) = y.iter().find(|&&l| l as usize >= k) {
            return Err(Error::OutOfRange {
                what: "label".into(),
                index: bad as usize,
                len: k,
            });
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::spec(format!("regularisation C must be positive, got {c}")));
        }
        Ok(Objective { x, y, k, d, c })
    }

    pub fn dim(&self) -> usize {
        self.k * (self.d + 1)
    }

    pub fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (k, d) = (self.k, self.d);
        let n = self.x.len() as f64;
        let (w, b) = theta.split_at(k * d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for (row, &t) in self.x.iter().zip(self.y) {
            for j in 0..k {
                z[j] = b[j] + w[j * d..(j + 1) * d].iter().zip(row).map(|(a, c)| a * c).sum::<f64>();
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[t as usize];
            for j in 0..k {
                let p = (z[j] - lse).exp() - if j == t as usize { 1.0 } else { 0.0 };
                let p = p / n;
                for (g, v) in grad[j * d..(j + 1) * d].iter_mut().zip(row) {
                    *g += p * v;
                }
                grad[k * d + j] += p;
            }
        }
        let lam = 1.0 / (self.c * n);
        let mut reg = 0.0;
        for (g, wv) in grad[..k * d].iter_mut().zip(w) {
            *g += lam * wv;
            reg += wv * wv;
        }
        loss / n + 0.5 * lam * reg
    }

    fn unpack(&self, theta: &[f64]) -> LinearClassifier {
        let (w, b) = theta.split_at(self.k * self.d);
        LinearClassifier {
            weight: w.chunks(self.d).map(<[f64]>::to_vec).collect(),
            bias: b.to_vec(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises a smooth function with L-BFGS and a backtracking Armijo line
/// search. Returns the minimiser and its objective value.
pub fn lbfgs(
    dim: usize,
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    opts: &SolverOptions,
) -> (Vec<f64>, f64) {
    let mut x = x0;
    let mut g = vec![0.0; dim];
    let mut fx = f(&x, &mut g);
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut xn = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    for _ in 0..opts.max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.tol {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - beta) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // not a descent direction: restart from steepest descent
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if hist.is_empty() {
            1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..dim {
                xn[i] = x[i] + step * dir[i];
            }
            let fnew = f(&xn, &mut gn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 {
                    if hist.len() == opts.memory {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut xn);
                std::mem::swap(&mut g, &mut gn);
                let improvement = fx - fnew;
                fx = fnew;
                accepted = true;
                if improvement <= 1e-15 * fx.abs().max(1.0) {
                    return (x, fx);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (x, fx)
}

/// Fits the regularised multinomial model, starting from zero.
pub fn fit_multinomial(
    x: &[Vec<f64>],
    y: &[Label],
    num_classes: usize,
    c: f64,
    opts: &SolverOptions,
) -> Result<LinearClassifier> {
    let obj = Objective::new(x, y, num_classes, c)?;
    let (theta, _) = lbfgs(obj.dim(), |t, g| obj.eval(t, g), vec![0.0; obj.dim()], opts);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("logistic regression produced non-finite weights"));
    }
    Ok(obj.unpack(&theta))
}

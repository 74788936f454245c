use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Shard};
use crate::error::{check_dim, Error, Result};
use crate::params::ParamVector;
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveKind {
    /// `F_i(x; ξ) = ½ Σ_k a_k (x_k − b_{ξ,k})²` with curvatures spread
    /// geometrically over `[1/condition, 1]`; `d = feature_dim`.
    Quadratic {
        #[serde(default = "one")]
        condition: f64,
    },
    /// Multinomial logistic regression; `d = classes · (feature_dim + 1)`.
    Logistic {
        #[serde(default)]
        l2: f64,
    },
    /// One tanh hidden layer with softmax output;
    /// `d = hidden · (feature_dim + 1) + classes · (hidden + 1)`.
    Mlp1 {
        hidden: usize,
        #[serde(default)]
        l2: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
enum Body {
    Quadratic {
        curvature: Vec<f64>,
        /// Per client, row-major `m × d` example targets.
        targets: Vec<Vec<f64>>,
        optimum: ParamVector,
    },
    Logistic {
        shards: Vec<Shard>,
        classes: usize,
        l2: f64,
    },
    Mlp {
        shards: Vec<Shard>,
        classes: usize,
        hidden: usize,
        l2: f64,
    },
}

/// A federated objective: `n` clients, each with a finite shard of examples.
#[derive(Debug, Clone)]
pub struct Objective {
    dim: usize,
    shard_lens: Vec<usize>,
    body: Body,
}

impl Objective {
    pub fn from_dataset(kind: &ObjectiveKind, data: &Dataset) -> Result<Self> {
        let f = data.spec.feature_dim;
        let c = data.spec.classes;
        let shard_lens: Vec<usize> = data.shards.iter().map(Shard::len).collect();
        match *kind {
            ObjectiveKind::Quadratic { condition } => {
                if !(condition >= 1.0 && condition.is_finite()) {
                    return Err(Error::invalid("objective", "condition must be >= 1"));
                }
                // Example targets sit at the shard's label-weighted class
                // centroid (plus offset) perturbed by the example's noise.
                let targets = data
                    .shards
                    .iter()
                    .map(|shard| {
                        let mut centroid = shard.offset.clone();
                        let m = shard.len() as f64;
                        for &y in &shard.labels {
                            for (c, mu) in centroid.iter_mut().zip(&data.class_means[y]) {
                                *c += mu / m;
                            }
                        }
                        let mut t = Vec::with_capacity(shard.len() * f);
                        for j in 0..shard.len() {
                            t.extend(centroid.iter().zip(shard.noise_row(j)).map(|(c, e)| c + e));
                        }
                        t
                    })
                    .collect();
                Ok(Self::quadratic_from_rows(
                    geometric_curvature(f, condition),
                    targets,
                    f,
                ))
            }
            ObjectiveKind::Logistic { l2 } => Ok(Objective {
                dim: c * (f + 1),
                shard_lens,
                body: Body::Logistic {
                    shards: data.shards.clone(),
                    classes: c,
                    l2,
                },
            }),
            ObjectiveKind::Mlp1 { hidden, l2 } => {
                if hidden == 0 {
                    return Err(Error::invalid("objective", "hidden must be at least 1"));
                }
                Ok(Objective {
                    dim: hidden * (f + 1) + c * (hidden + 1),
                    shard_lens,
                    body: Body::Mlp {
                        shards: data.shards.clone(),
                        classes: c,
                        hidden,
                        l2,
                    },
                })
            }
        }
    }

    /// Quadratic objective with explicit per-client example targets.
    pub fn quadratic(curvature: Vec<f64>, targets: Vec<Vec<ParamVector>>) -> Result<Self> {
        let d = curvature.len();
        if targets.is_empty() || targets.iter().any(|t| t.is_empty()) {
            return Err(Error::invalid(
                "objective",
                "every client needs at least one example",
            ));
        }
        let mut rows = Vec::with_capacity(targets.len());
        for client in &targets {
            let mut flat = Vec::with_capacity(client.len() * d);
            for t in client {
                check_dim(d, t.len())?;
                flat.extend_from_slice(t.as_slice());
            }
            rows.push(flat);
        }
        Ok(Self::quadratic_from_rows(curvature, rows, d))
    }

    fn quadratic_from_rows(curvature: Vec<f64>, targets: Vec<Vec<f64>>, d: usize) -> Self {
        let n = targets.len();
        let shard_lens: Vec<usize> = targets.iter().map(|t| t.len() / d.max(1)).collect();
        let mut optimum = vec![0.0; d];
        for (t, &m) in targets.iter().zip(&shard_lens) {
            let mut mean = vec![0.0; d];
            for row in t.chunks(d) {
                for (a, b) in mean.iter_mut().zip(row) {
                    *a += b;
                }
            }
            for (o, a) in optimum.iter_mut().zip(&mean) {
                *o += a / m as f64;
            }
        }
        for o in &mut optimum {
            *o /= n as f64;
        }
        Objective {
            dim: d,
            shard_lens,
            body: Body::Quadratic {
                curvature,
                targets,
                optimum: ParamVector::from_vec(optimum),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_clients(&self) -> usize {
        self.shard_lens.len()
    }

    pub fn shard_len(&self, client: usize) -> usize {
        self.shard_lens[client]
    }

    /// Known global minimiser, available for the quadratic kind.
    pub fn optimum(&self) -> Option<&ParamVector> {
        match &self.body {
            Body::Quadratic { optimum, .. } => Some(optimum),
            _ => None,
        }
    }

    /// `f(x) − f(x*)` when the minimiser is known.
    pub fn gap(&self, x: &ParamVector) -> Option<f64> {
        match &self.body {
            Body::Quadratic {
                curvature, optimum, ..
            } => Some(
                0.5 * curvature
                    .iter()
                    .zip(x.iter().zip(optimum.iter()))
                    .map(|(a, (xi, oi))| a * (xi - oi) * (xi - oi))
                    .sum::<f64>(),
            ),
            _ => None,
        }
    }

    /// Initial global model: the origin for convex kinds, a scaled Gaussian
    /// draw for the MLP so hidden units are not symmetric.
    pub fn initial_point(&self, rng: &mut SimRng) -> ParamVector {
        match &self.body {
            Body::Mlp {
                shards,
                classes,
                hidden,
                ..
            } => {
                let f = shards[0].feature_dim;
                let (h, c) = (*hidden, *classes);
                let mut v = vec![0.0; self.dim];
                let s1 = 1.0 / (f as f64).sqrt();
                let s2 = 1.0 / (h as f64).sqrt();
                for w in &mut v[..h * f] {
                    *w = s1 * rng.sample::<f64, _>(StandardNormal);
                }
                let w2 = h * (f + 1);
                for w in &mut v[w2..w2 + c * h] {
                    *w = s2 * rng.sample::<f64, _>(StandardNormal);
                }
                ParamVector::from_vec(v)
            }
            _ => ParamVector::zeros(self.dim),
        }
    }

    fn check_client(&self, client: usize) -> Result<()> {
        if client < self.n_clients() {
            Ok(())
        } else {
            Err(Error::invalid(
                "client",
                format!(
                    "index {client} out of range for {} clients",
                    self.n_clients()
                ),
            ))
        }
    }

    /// Mean loss `F_i` over the given example indices of one client.
    pub fn loss_on(&self, client: usize, x: &ParamVector, idx: &[usize]) -> Result<f64> {
        self.check_client(client)?;
        check_dim(self.dim, x.len())?;
        Ok(self.eval(client, x.as_slice(), idx, None))
    }

    /// Mean gradient of `F_i` over the given example indices of one client.
    pub fn gradient_on(
        &self,
        client: usize,
        x: &ParamVector,
        idx: &[usize],
    ) -> Result<ParamVector> {
        self.check_client(client)?;
        check_dim(self.dim, x.len())?;
        let mut g = vec![0.0; self.dim];
        self.eval(client, x.as_slice(), idx, Some(&mut g));
        Ok(ParamVector::from_vec(g))
    }

    pub fn client_loss(&self, client: usize, x: &ParamVector) -> Result<f64> {
        self.check_client(client)?;
        let all: Vec<usize> = (0..self.shard_len(client)).collect();
        self.loss_on(client, x, &all)
    }

    pub fn client_full_gradient(&self, client: usize, x: &ParamVector) -> Result<ParamVector> {
        self.check_client(client)?;
        let all: Vec<usize> = (0..self.shard_len(client)).collect();
        self.gradient_on(client, x, &all)
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.n_clients() {
            total += self.client_loss(i, x)?;
        }
        Ok(total / self.n_clients() as f64)
    }

    /// `∇f(x) = (1/n) Σ_i ∇f_i(x)`, summed in client order.
    pub fn full_gradient(&self, x: &ParamVector) -> Result<ParamVector> {
        check_dim(self.dim, x.len())?;
        let mut sum = ParamVector::zeros(self.dim);
        for i in 0..self.n_clients() {
            sum.axpy(1.0, &self.client_full_gradient(i, x)?)?;
        }
        sum.scale(1.0 / self.n_clients() as f64);
        Ok(sum)
    }

    /// Mini-batch gradient on `batch_size` examples drawn without
    /// replacement. A batch at least as large as the shard uses the whole
    /// shard and leaves `rng` untouched.
    pub fn stochastic_gradient(
        &self,
        client: usize,
        x: &ParamVector,
        batch_size: usize,
        rng: &mut SimRng,
    ) -> Result<ParamVector> {
        self.check_client(client)?;
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        let m = self.shard_len(client);
        let idx: Vec<usize> = if batch_size >= m {
            (0..m).collect()
        } else {
            let mut v = index::sample(rng, m, batch_size).into_vec();
            v.sort_unstable();
            v
        };
        self.gradient_on(client, x, &idx)
    }

    /// Largest curvature estimate: power iteration on the Hessian for the
    /// quadratic, otherwise the largest gradient-difference ratio over 100
    /// random nearby pairs around `around`.
    pub fn smoothness_estimate(&self, around: &ParamVector, rng: &mut SimRng) -> Result<f64> {
        check_dim(self.dim, around.len())?;
        match &self.body {
            Body::Quadratic { curvature, .. } => {
                let mut v: Vec<f64> = (0..self.dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut lambda = 0.0;
                for _ in 0..200 {
                    let hv: Vec<f64> = v.iter().zip(curvature).map(|(a, b)| a * b).collect();
                    let norm = hv.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return Ok(0.0);
                    }
                    lambda = norm / v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v = hv.into_iter().map(|a| a / norm).collect();
                }
                Ok(lambda)
            }
            _ => {
                let mut best: f64 = 0.0;
                for _ in 0..100 {
                    let x: Vec<f64> = around
                        .iter()
                        .map(|a| a + rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let y: Vec<f64> = x
                        .iter()
                        .map(|a| a + 1e-3 * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let (x, y) = (ParamVector::from_vec(x), ParamVector::from_vec(y));
                    let gx = self.full_gradient(&x)?;
                    let gy = self.full_gradient(&y)?;
                    let ratio = gx.sub(&gy)?.norm() / x.sub(&y)?.norm();
                    best = best.max(ratio);
                }
                Ok(best)
            }
        }
    }

    /// Core evaluator: writes the mean gradient over `idx` into `grad` when
    /// given, otherwise returns the mean loss. The quadratic skips the loss
    /// in gradient mode and returns NaN.
    fn eval(&self, client: usize, x: &[f64], idx: &[usize], grad: Option<&mut Vec<f64>>) -> f64 {
        let b = idx.len() as f64;
        match &self.body {
            Body::Quadratic {
                curvature, targets, ..
            } => {
                let d = self.dim;
                let rows = &targets[client];
                if let Some(g) = grad {
                    let mut mean_target = vec![0.0; d];
                    for &j in idx {
                        for (m, t) in mean_target.iter_mut().zip(&rows[j * d..(j + 1) * d]) {
                            *m += t;
                        }
                    }
                    for k in 0..d {
                        g[k] = curvature[k] * (x[k] - mean_target[k] / b);
                    }
                    return f64::NAN;
                }
                let mut loss = 0.0;
                for &j in idx {
                    let row = &rows[j * d..(j + 1) * d];
                    for k in 0..d {
                        let r = x[k] - row[k];
                        loss += 0.5 * curvature[k] * r * r;
                    }
                }
                loss / b
            }
            Body::Logistic {
                shards,
                classes,
                l2,
            } => {
                let shard = &shards[client];
                let f = shard.feature_dim;
                let c = *classes;
                let (w, bias) = x.split_at(c * f);
                let mut logits = vec![0.0; c];
                let mut loss = 0.0;
                let mut g = grad;
                for &j in idx {
                    let row = shard.row(j);
                    for k in 0..c {
                        logits[k] = bias[k] + dot(&w[k * f..(k + 1) * f], row);
                    }
                    let y = shard.labels[j];
                    loss += softmax_in_place(&mut logits, y);
                    if let Some(g) = g.as_deref_mut() {
                        for k in 0..c {
                            let delta = logits[k] - if k == y { 1.0 } else { 0.0 };
                            for (gw, xv) in g[k * f..(k + 1) * f].iter_mut().zip(row) {
                                *gw += delta * xv;
                            }
                            g[c * f + k] += delta;
                        }
                    }
                }
                finish(x, loss, b, *l2, g)
            }
            Body::Mlp {
                shards,
                classes,
                hidden,
                l2,
            } => {
                let shard = &shards[client];
                let f = shard.feature_dim;
                let (h, c) = (*hidden, *classes);
                let (w1, rest) = x.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let o_b1 = h * f;
                let o_w2 = o_b1 + h;
                let o_b2 = o_w2 + c * h;
                let mut act = vec![0.0; h];
                let mut logits = vec![0.0; c];
                let mut dh = vec![0.0; h];
                let mut loss = 0.0;
                let mut g = grad;
                for &j in idx {
                    let row = shard.row(j);
                    for u in 0..h {
                        act[u] = (b1[u] + dot(&w1[u * f..(u + 1) * f], row)).tanh();
                    }
                    for k in 0..c {
                        logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &act);
                    }
                    let y = shard.labels[j];
                    loss += softmax_in_place(&mut logits, y);
                    if let Some(g) = g.as_deref_mut() {
                        dh.iter_mut().for_each(|v| *v = 0.0);
                        for k in 0..c {
                            let delta = logits[k] - if k == y { 1.0 } else { 0.0 };
                            for u in 0..h {
                                g[o_w2 + k * h + u] += delta * act[u];
                                dh[u] += delta * w2[k * h + u];
                            }
                            g[o_b2 + k] += delta;
                        }
                        for u in 0..h {
                            let da = dh[u] * (1.0 - act[u] * act[u]);
                            for (gw, xv) in g[u * f..(u + 1) * f].iter_mut().zip(row) {
                                *gw += da * xv;
                            }
                            g[o_b1 + u] += da;
                        }
                    }
                }
                finish(x, loss, b, *l2, g)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Replaces logits with softmax probabilities; returns `−log p_y`.
fn softmax_in_place(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    let nll = z.ln() - (logits[y].ln());
    for v in logits.iter_mut() {
        *v /= z;
    }
    nll
}

/// Averages accumulated sums over the batch and adds `½ l2 ‖x‖²`.
fn finish(x: &[f64], loss: f64, b: f64, l2: f64, grad: Option<&mut Vec<f64>>) -> f64 {
    if let Some(g) = grad {
        for (gv, xv) in g.iter_mut().zip(x) {
            *gv = *gv / b + l2 * xv;
        }
    }
    loss / b + 0.5 * l2 * dot(x, x)
}

fn geometric_curvature(d: usize, condition: f64) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d)
        .map(|k| condition.powf(-(k as f64) / (d - 1) as f64))
        .collect()
}

/// Gradient dissimilarity `(1/n) Σ_i ‖∇f_i(x) − ∇f(x)‖²`.
pub fn measure_heterogeneity(obj: &Objective, x: &ParamVector) -> Result<f64> {
    let n = obj.n_clients();
    let grads: Vec<ParamVector> = (0..n)
        .map(|i| obj.client_full_gradient(i, x))
        .collect::<Result<_>>()?;
    let mut mean = ParamVector::zeros(obj.dim());
    for g in &grads {
        mean.axpy(1.0, g)?;
    }
    mean.scale(1.0 / n as f64);
    let mut total = 0.0;
    for g in &grads {
        total += g.sub(&mean)?.norm_sq();
    }
    Ok(total / n as f64)
}

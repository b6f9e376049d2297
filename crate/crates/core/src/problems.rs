//! Small differentiable objectives with exact gradients and seeded data.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{gaussian_matrix, synth_spd};
use crate::math;
use crate::matrix::Matrix;

/// A loss over matrix-shaped parameters.
///
/// Parameters are passed in their 2-D storage shape (rank-1 tensors as
/// `d × 1` columns). A batch is a list of sample indices; problems without
/// samples ignore it.
pub trait Problem {
    fn name(&self) -> &'static str;

    /// Tensor shape of every parameter.
    fn shapes(&self) -> Vec<Vec<usize>>;

    /// Number of samples; 1 for deterministic objectives.
    fn n_samples(&self) -> usize;

    /// Seeded starting point.
    fn init(&self, seed: u64) -> Vec<Matrix>;

    fn loss_and_grad(&self, params: &[Matrix], batch: &[usize]) -> (f64, Vec<Matrix>);

    fn loss(&self, params: &[Matrix], batch: &[usize]) -> f64 {
        self.loss_and_grad(params, batch).0
    }

    fn grad(&self, params: &[Matrix], batch: &[usize]) -> Vec<Matrix> {
        self.loss_and_grad(params, batch).1
    }

    /// Optimal loss value when known.
    fn optimum(&self) -> Option<f64> {
        None
    }

    fn full_batch(&self) -> Vec<usize> {
        (0..self.n_samples()).collect()
    }
}

/// Frobenius norm of a list of gradient blocks.
pub fn grad_norm(grads: &[Matrix]) -> f64 {
    math::sqrt(grads.iter().map(|g| g.dot(g)).sum())
}

/// `½‖A W B − C‖_F²` with SPD `A`, `B` and `C = A W⋆ B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub w_star: Matrix,
}

/// `A` and `B` have condition number `cond` with spectra centred on 1.
pub fn quadratic_problem(m: usize, n: usize, cond: f64, seed: u64) -> Quadratic {
    assert!(cond >= 1.0, "condition number must be at least 1");
    let spd = |k: usize, s: u64| {
        if k == 1 {
            Matrix::identity(1)
        } else {
            let half = math::sqrt(cond);
            synth_spd(k, 1.0 / half, half, s).expect("valid spectrum").into_inner()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let a = spd(m, rng.random());
    let b = spd(n, rng.random());
    let w_star = gaussian_matrix(m, n, &mut rng);
    let c = a.matmul(&w_star).matmul(&b);
    Quadratic { a, b, c, w_star }
}

impl Quadratic {
    /// Arbitrary `A`, `B`, `C`.
    pub fn from_parts(a: Matrix, b: Matrix, c: Matrix) -> Self {
        let w_star = Matrix::zeros(a.cols(), b.rows());
        Self { a, b, c, w_star }
    }

    fn residual(&self, w: &Matrix) -> Matrix {
        self.a.matmul(w).matmul(&self.b).sub(&self.c)
    }
}

impl Problem for Quadratic {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.a.cols(), self.b.rows()]]
    }

    fn n_samples(&self) -> usize {
        1
    }

    fn init(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![gaussian_matrix(self.a.cols(), self.b.rows(), &mut rng)]
    }

    fn loss_and_grad(&self, params: &[Matrix], _batch: &[usize]) -> (f64, Vec<Matrix>) {
        let r = self.residual(&params[0]);
        let g = self.a.transpose().matmul(&r).matmul(&self.b.transpose());
        (0.5 * r.dot(&r), vec![g])
    }

    fn optimum(&self) -> Option<f64> {
        Some(0.0)
    }
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + math::ln(z.iter().map(|v| math::exp(v - m)).sum());
    z.iter().map(|v| v - lse).collect()
}

/// Multinomial logistic regression with `W` of shape `d × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    /// `n × d` features.
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Optional `½λ‖W‖²` term.
    pub l2: f64,
}

/// Two-class data from a random linear teacher with margin noise and 5% label flips.
pub fn logistic_problem(d: usize, n_samples: usize, seed: u64) -> Logistic {
    let classes = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let teacher = gaussian_matrix(d, classes, &mut rng);
    let x = gaussian_matrix(n_samples, d, &mut rng);
    let scores = x.matmul(&teacher);
    let labels = (0..n_samples)
        .map(|i| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let margin = scores[(i, 1)] - scores[(i, 0)] + 0.5 * noise;
            let y = usize::from(margin > 0.0);
            if rng.random::<f64>() < 0.05 {
                1 - y
            } else {
                y
            }
        })
        .collect();
    Logistic { x, labels, classes, l2: 0.0 }
}

impl Problem for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.x.cols(), self.classes]]
    }

    fn n_samples(&self) -> usize {
        self.x.rows()
    }

    fn init(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![gaussian_matrix(self.x.cols(), self.classes, &mut rng).scale(0.1)]
    }

    fn loss_and_grad(&self, params: &[Matrix], batch: &[usize]) -> (f64, Vec<Matrix>) {
        let w = &params[0];
        let (d, c) = (self.x.cols(), self.classes);
        let mut g = Matrix::zeros(d, c);
        let mut loss = 0.0;
        let inv = 1.0 / batch.len().max(1) as f64;
        for &i in batch {
            let xi = self.x.row(i);
            let z: Vec<f64> = (0..c).map(|k| (0..d).map(|j| xi[j] * w[(j, k)]).sum()).collect();
            let lp = log_softmax_row(&z);
            loss -= lp[self.labels[i]] * inv;
            for k in 0..c {
                let delta = (math::exp(lp[k]) - f64::from(k == self.labels[i])) * inv;
                for j in 0..d {
                    g[(j, k)] += xi[j] * delta;
                }
            }
        }
        if self.l2 > 0.0 {
            loss += 0.5 * self.l2 * w.dot(w);
            g = g.lincomb(1.0, w, self.l2);
        }
        (loss, vec![g])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => f64::from(x > 0.0),
        }
    }
}

/// `y = W₂ σ(W₁ x + b₁) + b₂` fitted by mean squared error to a random teacher.
///
/// Parameters are `[W₁ (h × d_in), b₁ (h), W₂ (d_out × h), b₂ (d_out)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `n × d_in`
    pub x: Matrix,
    /// `n × d_out`
    pub y: Matrix,
    pub hidden: usize,
    pub activation: Activation,
}

pub fn mlp_problem(
    d_in: usize,
    hidden: usize,
    d_out: usize,
    n_samples: usize,
    activation: Activation,
    seed: u64,
) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    let x = gaussian_matrix(n_samples, d_in, &mut rng);
    let teacher = Mlp { x: x.clone(), y: Matrix::zeros(n_samples, d_out), hidden, activation };
    let tp = [
        gaussian_matrix(hidden, d_in, &mut rng).scale(1.0 / math::sqrt(d_in as f64)),
        gaussian_matrix(hidden, 1, &mut rng).scale(0.1),
        gaussian_matrix(d_out, hidden, &mut rng).scale(1.0 / math::sqrt(hidden as f64)),
        gaussian_matrix(d_out, 1, &mut rng).scale(0.1),
    ];
    let mut y = Matrix::zeros(n_samples, d_out);
    for i in 0..n_samples {
        let (_, _, out) = teacher.forward(&tp, i);
        for (k, v) in out.into_iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            y[(i, k)] = v + 0.01 * noise;
        }
    }
    Mlp { x, y, hidden, activation }
}

impl Mlp {
    fn d_in(&self) -> usize {
        self.x.cols()
    }

    fn d_out(&self) -> usize {
        self.y.cols()
    }

    /// Pre-activations, hidden activations and outputs for sample `i`.
    fn forward(&self, p: &[Matrix], i: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = (&p[0], &p[1], &p[2], &p[3]);
        let xi = self.x.row(i);
        let pre: Vec<f64> =
            (0..self.hidden).map(|h| b1[(h, 0)] + w1.row(h).iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()).collect();
        let act: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let out = (0..self.d_out())
            .map(|k| b2[(k, 0)] + w2.row(k).iter().zip(&act).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        (pre, act, out)
    }

    /// Outputs of every sample in `batch`.
    pub fn predict(&self, params: &[Matrix], batch: &[usize]) -> Vec<Vec<f64>> {
        batch.iter().map(|&i| self.forward(params, i).2).collect()
    }

    /// Hidden activations of every sample in `batch`.
    pub fn hidden_activations(&self, params: &[Matrix], batch: &[usize]) -> Vec<Vec<f64>> {
        batch.iter().map(|&i| self.forward(params, i).1).collect()
    }

    /// Smallest `|pre-activation|` over the batch (distance to the relu kink).
    pub fn min_abs_preactivation(&self, params: &[Matrix], batch: &[usize]) -> f64 {
        batch.iter().flat_map(|&i| self.forward(params, i).0).fold(f64::INFINITY, |m, z| m.min(math::abs(z)))
    }
}

impl Problem for Mlp {
    fn name(&self) -> &'static str {
        match self.activation {
            Activation::Tanh => "mlp-tanh",
            Activation::Relu => "mlp-relu",
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.hidden, self.d_in()], vec![self.hidden], vec![self.d_out(), self.hidden], vec![self.d_out()]]
    }

    fn n_samples(&self) -> usize {
        self.x.rows()
    }

    /// Scaled Gaussian weights, zero biases.
    fn init(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            gaussian_matrix(self.hidden, self.d_in(), &mut rng).scale(1.0 / math::sqrt(self.d_in() as f64)),
            Matrix::zeros(self.hidden, 1),
            gaussian_matrix(self.d_out(), self.hidden, &mut rng).scale(1.0 / math::sqrt(self.hidden as f64)),
            Matrix::zeros(self.d_out(), 1),
        ]
    }

    fn loss_and_grad(&self, params: &[Matrix], batch: &[usize]) -> (f64, Vec<Matrix>) {
        let (h, d_in, d_out) = (self.hidden, self.d_in(), self.d_out());
        let w2 = &params[2];
        let mut g = vec![Matrix::zeros(h, d_in), Matrix::zeros(h, 1), Matrix::zeros(d_out, h), Matrix::zeros(d_out, 1)];
        let inv = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for &i in batch {
            let (pre, act, out) = self.forward(params, i);
            let err: Vec<f64> = (0..d_out).map(|k| out[k] - self.y[(i, k)]).collect();
            loss += 0.5 * inv * err.iter().map(|e| e * e).sum::<f64>();
            for k in 0..d_out {
                let e = err[k] * inv;
                g[3][(k, 0)] += e;
                for j in 0..h {
                    g[2][(k, j)] += e * act[j];
                }
            }
            let xi = self.x.row(i);
            for j in 0..h {
                let back: f64 = (0..d_out).map(|k| err[k] * inv * w2[(k, j)]).sum();
                let delta = back * self.activation.derivative(pre[j], act[j]);
                g[1][(j, 0)] += delta;
                for (l, &xv) in xi.iter().enumerate() {
                    g[0][(j, l)] += delta * xv;
                }
            }
        }
        (loss, g)
    }
}

/// Mini-batches drawn without replacement, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0 && batch > 0, "sampler needs samples and a positive batch size");
        let mut s = Self {
            order: (0..n).collect(),
            batch: batch.min(n),
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Batches per epoch (the last one may be short).
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Central finite-difference gradient, one coordinate at a time.
pub fn finite_difference<P: Problem + ?Sized>(p: &P, params: &[Matrix], batch: &[usize], h: f64) -> Vec<Matrix> {
    let mut work = params.to_vec();
    let mut out: Vec<Matrix> = params.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for t in 0..params.len() {
        for idx in 0..params[t].len() {
            let orig = work[t].as_slice()[idx];
            work[t].as_mut_slice()[idx] = orig + h;
            let up = p.loss(&work, batch);
            work[t].as_mut_slice()[idx] = orig - h;
            let down = p.loss(&work, batch);
            work[t].as_mut_slice()[idx] = orig;
            out[t].as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over concatenated blocks.
pub fn relative_error(a: &[Matrix], b: &[Matrix], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.sub(y);
            d.dot(&d)
        })
        .sum();
    math::sqrt(diff) / grad_norm(a).max(grad_norm(b)).max(floor)
}

//! Base optimizers and the Shampoo wrapper.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use thiserror::Error;

use crate::linalg::precondition;
use crate::math;
use crate::matrix::Matrix;
use crate::metrics::min_eigenvalue;
use crate::quant::{CodebookKind, OffDiagNorm, QuantCodebook, QuantError, Quantizer};
use crate::state::{
    refresh_roots, DiagonalPolicy, PowerIteration, RefreshReport, ShampooLayerState, Side, StateError, StateMode,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("parameter {index}: expected shape {expected:?}, got {got:?}")]
    Shape { index: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("expected {expected} parameter tensors, got {got}")]
    Count { expected: usize, got: usize },
}

impl From<QuantError> for OptimError {
    fn from(e: QuantError) -> Self {
        OptimError::State(StateError::Quant(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShampooConfig {
    pub beta: f64,
    pub beta_e: f64,
    pub eps: f64,
    /// Statistic update interval.
    pub t1: u64,
    /// Inverse-root refresh interval.
    pub t2: u64,
    pub bits: u8,
    pub block: usize,
    pub max_order: usize,
    /// Matrices with fewer elements are stored in full precision.
    pub exemption: usize,
    pub grafting: bool,
    pub mode: StateMode,
    pub codebook: CodebookKind,
    /// Replace quantization by the identity (every payload stored verbatim).
    pub exact: bool,
    pub diagonal: DiagonalPolicy,
    pub offdiag_norm: OffDiagNorm,
    /// Also update and refresh at step 1, so preconditioning starts immediately.
    pub force_first_update: bool,
    pub power_iters: usize,
    pub power_tol: f64,
    /// Record the smallest eigenvalue of every root cache after each refresh.
    pub monitor_eigenvalues: bool,
}

impl Default for ShampooConfig {
    fn default() -> Self {
        Self {
            beta: 0.95,
            beta_e: 0.95,
            eps: 1e-6,
            t1: 100,
            t2: 500,
            bits: 4,
            block: 64,
            max_order: 1200,
            exemption: 4096,
            grafting: true,
            mode: StateMode::Cq4Ef,
            codebook: CodebookKind::Linear2,
            exact: false,
            diagonal: DiagonalPolicy::FullPrecision,
            offdiag_norm: OffDiagNorm::OffDiagonal,
            force_first_update: true,
            power_iters: 100,
            power_tol: 1e-6,
            monitor_eigenvalues: false,
        }
    }
}

impl ShampooConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(OptimError::Config("beta must lie in (0, 1)"));
        }
        if !(self.beta_e >= 0.0 && self.beta_e < 1.0) {
            return Err(OptimError::Config("beta_e must lie in [0, 1)"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(OptimError::Config("eps must be finite and non-negative"));
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(OptimError::Config("t1 and t2 must be at least 1"));
        }
        if !(2..=8).contains(&self.bits) {
            return Err(OptimError::Config("bits must lie in 2..=8"));
        }
        if self.block == 0 {
            return Err(OptimError::Config("block must be at least 1"));
        }
        if self.max_order < self.block {
            return Err(OptimError::Config("max_order must be at least block"));
        }
        if self.power_iters == 0 {
            return Err(OptimError::Config("power_iters must be at least 1"));
        }
        Ok(())
    }

    pub fn codebook(&self) -> Result<QuantCodebook, QuantError> {
        QuantCodebook::new(self.bits, self.codebook)
    }

    pub fn quantizer(&self) -> Result<Quantizer, QuantError> {
        let cb = self.codebook()?;
        let mut q =
            if self.exact { Quantizer::exact(cb, self.block) } else { Quantizer::new(cb, self.block, self.exemption) };
        q.offdiag_norm = self.offdiag_norm;
        Ok(q)
    }

    pub fn power_iteration(&self) -> PowerIteration {
        PowerIteration { iters: self.power_iters, tol: self.power_tol }
    }

    fn update_due(&self, k: u64) -> bool {
        k.is_multiple_of(self.t1) || (self.force_first_update && k == 1)
    }

    fn refresh_due(&self, k: u64) -> bool {
        k.is_multiple_of(self.t2) || (self.force_first_update && k == 1)
    }
}

/// `m ← μm + g + wd·W;  W ← W − ηm`
pub fn sgdm_step(m: &mut [f64], w: &mut [f64], g: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((mi, wi), gi) in m.iter_mut().zip(w.iter_mut()).zip(g) {
        *mi = momentum * *mi + gi + weight_decay * *wi;
        *wi -= lr * *mi;
    }
}

/// AdamW with decoupled weight decay and bias correction; `t` starts at 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    m: &mut [f64],
    v: &mut [f64],
    w: &mut [f64],
    g: &[f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    denom_eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - math::powf(beta1, t as f64);
    let bc2 = 1.0 - math::powf(beta2, t as f64);
    for (((mi, vi), wi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(w.iter_mut()).zip(g) {
        *wi *= 1.0 - lr * weight_decay;
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *wi -= lr * mhat / (math::sqrt(vhat) + denom_eps);
    }
}

/// `v ← ρv + (1−ρ)g²;  W ← W − ηg/(√v + c)`
pub fn rmsprop_step(v: &mut [f64], w: &mut [f64], g: &[f64], lr: f64, rho: f64, denom_eps: f64) {
    for ((vi, wi), &gi) in v.iter_mut().zip(w.iter_mut()).zip(g) {
        *vi = rho * *vi + (1.0 - rho) * gi * gi;
        *wi -= lr * gi / (math::sqrt(*vi) + denom_eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseOptimizerKind {
    Sgdm { momentum: f64, weight_decay: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    RmsProp { rho: f64, eps: f64 },
}

impl BaseOptimizerKind {
    pub fn sgdm() -> Self {
        BaseOptimizerKind::Sgdm { momentum: 0.9, weight_decay: 0.0 }
    }

    pub fn adamw() -> Self {
        BaseOptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn rmsprop() -> Self {
        BaseOptimizerKind::RmsProp { rho: 0.99, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaseOptimizerKind::Sgdm { .. } => "sgdm",
            BaseOptimizerKind::AdamW { .. } => "adamw",
            BaseOptimizerKind::RmsProp { .. } => "rmsprop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `min_lr` over `total_steps`.
    Cosine {
        total_steps: u64,
        min_lr: f64,
    },
}

impl LrSchedule {
    /// Learning rate at step `k` (1-based).
    pub fn lr_at(&self, base: f64, k: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps, min_lr } => {
                let t = (k.saturating_sub(1)).min(total_steps) as f64 / total_steps.max(1) as f64;
                min_lr + 0.5 * (base - min_lr) * (1.0 + math::cos(PI * t))
            }
        }
    }
}

/// A first-order optimizer with one set of moment buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseOptimizer {
    pub kind: BaseOptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl BaseOptimizer {
    pub fn new(kind: BaseOptimizerKind, lr: f64) -> Self {
        Self { kind, lr, schedule: LrSchedule::Constant, first: Vec::new(), second: Vec::new(), t: 0 }
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one step to every parameter; `updates[i]` plays the role of the gradient.
    pub fn step(&mut self, params: &mut [Matrix], updates: &[Matrix]) {
        assert_eq!(params.len(), updates.len(), "parameter/update count mismatch");
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let lr = self.schedule.lr_at(self.lr, self.t);
        for (i, (w, g)) in params.iter_mut().zip(updates).enumerate() {
            assert_eq!(w.shape(), g.shape(), "update shape mismatch");
            let (w, g) = (w.as_mut_slice(), g.as_slice());
            match self.kind {
                BaseOptimizerKind::Sgdm { momentum, weight_decay } => {
                    sgdm_step(&mut self.first[i], w, g, lr, momentum, weight_decay)
                }
                BaseOptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => adamw_step(
                    &mut self.first[i],
                    &mut self.second[i],
                    w,
                    g,
                    self.t,
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                ),
                BaseOptimizerKind::RmsProp { rho, eps } => rmsprop_step(&mut self.second[i], w, g, lr, rho, eps),
            }
        }
    }
}

/// Splits `d` into `ceil(d / max)` contiguous near-equal chunks, larger first.
pub fn balanced_chunks(d: usize, max: usize) -> Vec<Range<usize>> {
    if d == 0 {
        return Vec::new();
    }
    let k = d.div_ceil(max.max(1));
    let (base, extra) = (d / k, d % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// A rectangular sub-matrix of a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRange {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl BlockRange {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }
}

/// Row-major grid of blocks whose sides never exceed `max_order`.
pub fn block_partition(shape: (usize, usize), max_order: usize) -> Vec<BlockRange> {
    let rows = balanced_chunks(shape.0, max_order);
    let cols = balanced_chunks(shape.1, max_order);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in &rows {
        for c in &cols {
            out.push(BlockRange { rows: r.clone(), cols: c.clone() });
        }
    }
    out
}

/// Matrix view of a tensor: rank ≥ 2 flattens trailing axes, rank ≤ 1 has none.
pub fn matrix_view(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [] | [_] => None,
        [out, rest @ ..] => Some((*out, rest.iter().product())),
    }
}

/// The 2-D shape a parameter is stored with inside [`Shampoo`].
pub fn storage_shape(shape: &[usize]) -> (usize, usize) {
    matrix_view(shape).unwrap_or((shape.iter().product(), 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub range: BlockRange,
    pub state: ShampooLayerState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub shape: Vec<usize>,
    pub storage: (usize, usize),
    /// Empty for bypassed (rank ≤ 1) tensors.
    pub blocks: Vec<LayerBlock>,
}

impl ParamSlot {
    pub fn is_bypassed(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Smallest eigenvalues of the dequantized roots, taken after a refresh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSample {
    pub param: usize,
    pub block: usize,
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub updated: bool,
    pub refreshed: bool,
    pub refreshes: Vec<(usize, usize, RefreshReport)>,
    pub eigen: Vec<EigenSample>,
}

impl StepReport {
    /// Smallest monitored left and right eigenvalues, if any were sampled.
    pub fn min_eigen(&self) -> Option<(f64, f64)> {
        self.eigen.iter().fold(None, |acc, s| match acc {
            None => Some((s.left, s.right)),
            Some((l, r)) => Some((l.min(s.left), r.min(s.right))),
        })
    }
}

/// Shampoo preconditioning in front of a first-order optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Shampoo {
    cfg: ShampooConfig,
    base: BaseOptimizer,
    slots: Vec<ParamSlot>,
    k: u64,
}

impl Shampoo {
    /// `shapes` are tensor shapes; parameters are then passed as matrices of
    /// [`storage_shape`].
    pub fn new<S: AsRef<[usize]>>(shapes: &[S], cfg: ShampooConfig, base: BaseOptimizer) -> Result<Self, OptimError> {
        cfg.validate()?;
        let quantizer = cfg.quantizer()?;
        let mut slots = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let shape = shape.as_ref();
            let storage = storage_shape(shape);
            let mut blocks = Vec::new();
            if matrix_view(shape).is_some() {
                for range in block_partition(storage, cfg.max_order) {
                    let (m, n) = range.shape();
                    let state = ShampooLayerState::new(m, n, cfg.mode, quantizer.clone(), cfg.diagonal, cfg.eps)?;
                    blocks.push(LayerBlock { range, state });
                }
            }
            slots.push(ParamSlot { shape: shape.to_vec(), storage, blocks });
        }
        Ok(Self { cfg, base, slots, k: 0 })
    }

    pub fn config(&self) -> &ShampooConfig {
        &self.cfg
    }

    pub fn base(&self) -> &BaseOptimizer {
        &self.base
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn steps(&self) -> u64 {
        self.k
    }

    pub fn states(&self) -> impl Iterator<Item = &ShampooLayerState> {
        self.slots.iter().flat_map(|s| s.blocks.iter().map(|b| &b.state))
    }

    /// The preconditioned (and grafted) gradients without touching any state.
    pub fn preconditioned(&self, grads: &[Matrix]) -> Result<Vec<Matrix>, OptimError> {
        self.check(grads)?;
        let mut out = Vec::with_capacity(grads.len());
        for (slot, g) in self.slots.iter().zip(grads) {
            if slot.is_bypassed() {
                out.push(g.clone());
                continue;
            }
            let mut pg = Matrix::zeros(g.rows(), g.cols());
            for b in &slot.blocks {
                let gb = g.submatrix(b.range.rows.start, b.range.cols.start, b.range.rows.len(), b.range.cols.len());
                let l = b.state.root(Side::Left)?;
                let r = b.state.root(Side::Right)?;
                let mut hat = precondition(&l, &gb, &r).map_err(StateError::from)?;
                if self.cfg.grafting {
                    let n = hat.frobenius();
                    hat = if n > 0.0 && n.is_finite() { hat.scale(gb.frobenius() / n) } else { gb };
                }
                pg.write_submatrix(b.range.rows.start, b.range.cols.start, &hat);
            }
            out.push(pg);
        }
        Ok(out)
    }

    fn check(&self, mats: &[Matrix]) -> Result<(), OptimError> {
        if mats.len() != self.slots.len() {
            return Err(OptimError::Count { expected: self.slots.len(), got: mats.len() });
        }
        for (index, (slot, m)) in self.slots.iter().zip(mats).enumerate() {
            if m.shape() != slot.storage {
                return Err(OptimError::Shape { index, expected: slot.storage, got: m.shape() });
            }
        }
        Ok(())
    }

    /// One optimizer step: statistic update every `t1` steps, root refresh
    /// every `t2` steps, then the base optimizer on the preconditioned gradient.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<StepReport, OptimError> {
        self.check(params)?;
        self.check(grads)?;
        self.k += 1;
        let k = self.k;
        let mut report = StepReport { step: k, ..StepReport::default() };
        let update = self.cfg.update_due(k);
        let refresh = self.cfg.refresh_due(k);
        for (pi, (slot, g)) in self.slots.iter_mut().zip(grads).enumerate() {
            for (bi, b) in slot.blocks.iter_mut().enumerate() {
                b.state.set_step(k);
                if update {
                    let gb =
                        g.submatrix(b.range.rows.start, b.range.cols.start, b.range.rows.len(), b.range.cols.len());
                    b.state.update(&gb, &self.cfg)?;
                }
                if refresh {
                    let r = refresh_roots(&mut b.state, self.cfg.eps, self.cfg.power_iteration())?;
                    report.refreshes.push((pi, bi, r));
                    if self.cfg.monitor_eigenvalues {
                        let left = min_eigenvalue(&b.state.root(Side::Left)?).map_err(StateError::from)?;
                        let right = min_eigenvalue(&b.state.root(Side::Right)?).map_err(StateError::from)?;
                        report.eigen.push(EigenSample { param: pi, block: bi, left, right });
                    }
                }
            }
        }
        report.updated = update;
        report.refreshed = refresh;
        let pg = self.preconditioned(grads)?;
        self.base.step(params, &pg);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgdm_examples() {
        let (mut m, mut w) = (vec![0.0], vec![0.0]);
        sgdm_step(&mut m, &mut w, &[1.0], 0.1, 0.9, 0.0);
        assert_eq!(m, vec![1.0]);
        assert!((w[0] + 0.1).abs() < 1e-15);
        sgdm_step(&mut m, &mut w, &[1.0], 0.1, 0.9, 0.0);
        assert!((m[0] - 1.9).abs() < 1e-15);
        assert!((w[0] + 0.29).abs() < 1e-15);

        let (mut m, mut w) = (vec![0.0], vec![3.0]);
        sgdm_step(&mut m, &mut w, &[0.0], 0.1, 0.9, 0.0);
        assert_eq!(w, vec![3.0]);
    }

    #[test]
    fn adamw_examples() {
        let (mut m, mut v, mut w) = (vec![0.0], vec![0.0], vec![0.0]);
        adamw_step(&mut m, &mut v, &mut w, &[1.0], 1, 1e-3, 0.9, 0.999, 1e-8, 0.0);
        assert!((w[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);

        let (mut m, mut v, mut w) = (vec![0.0], vec![0.0], vec![2.0]);
        adamw_step(&mut m, &mut v, &mut w, &[0.0], 1, 0.1, 0.9, 0.999, 1e-8, 0.01);
        assert!((w[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);

        let (mut m, mut v, mut w) = (vec![0.0], vec![0.0], vec![0.0]);
        let mut prev = 0.0;
        for t in 1..=2000 {
            adamw_step(&mut m, &mut v, &mut w, &[0.5], t, 1e-2, 0.9, 0.999, 1e-8, 0.0);
            let step = prev - w[0];
            prev = w[0];
            if t > 1000 {
                assert!((step - 1e-2).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rmsprop_examples() {
        let (mut v, mut w) = (vec![0.0], vec![0.0]);
        rmsprop_step(&mut v, &mut w, &[1.0], 0.01, 0.99, 1e-8);
        assert!((w[0] + 0.01 / (0.1 + 1e-8)).abs() < 1e-14);
        let (mut v, mut w) = (vec![0.0], vec![1.0]);
        rmsprop_step(&mut v, &mut w, &[0.0], 0.01, 0.99, 1e-8);
        assert_eq!(w, vec![1.0]);
        let (mut v, mut w) = (vec![0.0], vec![0.0]);
        for _ in 0..5000 {
            rmsprop_step(&mut v, &mut w, &[2.0], 0.01, 0.99, 1e-8);
        }
        let before = w[0];
        rmsprop_step(&mut v, &mut w, &[2.0], 0.01, 0.99, 1e-8);
        assert!(((before - w[0]) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { total_steps: 100, min_lr: 0.0 };
        assert!((s.lr_at(0.1, 1) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(0.1, 51) - 0.05).abs() < 1e-12);
        assert!(s.lr_at(0.1, 101).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 77), 0.3);
    }

    #[test]
    fn partition_examples() {
        let p = block_partition((2400, 100), 1200);
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|b| b.shape() == (1200, 100)));
        assert_eq!(block_partition((100, 100), 1200), vec![BlockRange { rows: 0..100, cols: 0..100 }]);
        let p = block_partition((2500, 1300), 1200);
        assert_eq!(p.len(), 6);
        let rows: Vec<usize> = balanced_chunks(2500, 1200).iter().map(|r| r.len()).collect();
        assert_eq!(rows, vec![834, 833, 833]);
        let cols: Vec<usize> = balanced_chunks(1300, 1200).iter().map(|r| r.len()).collect();
        assert_eq!(cols, vec![650, 650]);
        assert_eq!(p[1].rows, 0..834);
        assert_eq!(p[1].cols, 650..1300);
    }

    #[test]
    fn tensor_views() {
        assert_eq!(matrix_view(&[7]), None);
        assert_eq!(matrix_view(&[3, 4]), Some((3, 4)));
        assert_eq!(matrix_view(&[8, 3, 3, 2]), Some((8, 18)));
        assert_eq!(storage_shape(&[5]), (5, 1));
    }

    #[test]
    fn config_validation() {
        assert!(ShampooConfig::default().validate().is_ok());
        assert!(ShampooConfig { beta: 1.0, ..Default::default() }.validate().is_err());
        assert!(ShampooConfig { t1: 0, ..Default::default() }.validate().is_err());
        assert!(ShampooConfig { max_order: 32, ..Default::default() }.validate().is_err());
        assert!(ShampooConfig { bits: 9, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn identity_roots_match_base_optimizer() {
        // with t2 far away the roots stay at the identity
        let cfg =
            ShampooConfig { t2: 1_000_000, force_first_update: false, mode: StateMode::Full32, ..Default::default() };
        let base = BaseOptimizer::new(BaseOptimizerKind::sgdm(), 0.1);
        let mut sh = Shampoo::new(&[[3usize, 4]], cfg, base.clone()).unwrap();
        let mut plain = base;
        let mut w1 = vec![Matrix::from_fn(3, 4, |i, j| (i + j) as f64)];
        let mut w2 = w1.clone();
        for k in 0..5 {
            let g = vec![Matrix::from_fn(3, 4, |i, j| ((k + i * 4 + j) as f64).sin())];
            sh.step(&mut w1, &g).unwrap();
            plain.step(&mut w2, &g);
        }
        assert_eq!(w1, w2);
    }

    #[test]
    fn bypass_and_shape_errors() {
        let cfg = ShampooConfig { mode: StateMode::Full32, ..Default::default() };
        let base = BaseOptimizer::new(BaseOptimizerKind::sgdm(), 0.1);
        let shapes: [&[usize]; 2] = [&[4, 2], &[4]];
        let mut sh = Shampoo::new(&shapes, cfg, base).unwrap();
        assert!(sh.slots()[1].is_bypassed());
        let mut w = vec![Matrix::zeros(4, 2), Matrix::zeros(4, 1)];
        let g = vec![Matrix::zeros(4, 2), Matrix::zeros(4, 1)];
        sh.step(&mut w, &g).unwrap();
        assert!(sh.step(&mut w, &g[..1]).is_err());
        let bad = vec![Matrix::zeros(2, 4), Matrix::zeros(4, 1)];
        assert!(matches!(sh.step(&mut w, &bad), Err(OptimError::Shape { index: 0, .. })));
    }
}

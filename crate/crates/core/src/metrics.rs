//! Spectral fidelity of quantized preconditioners and logical memory accounting.

use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{cholesky_with_retry, eigen_inv_root, eigh, synth_spd, LinalgError, SpdMatrix};
use crate::math;
use crate::matrix::Matrix;
use crate::quant::Quantizer;
use crate::state::{
    DiagonalPolicy, PackedFactorPair, PairBody, QuantizedFactor, RootCache, ShampooLayerState, Side, StatPayload,
    StateError, StateMode, SymmetricPayload,
};

/// Smallest eigenvalue of the symmetric part of `x`.
pub fn min_eigenvalue(x: &Matrix) -> Result<f64, LinalgError> {
    Ok(eigh(x)?.min())
}

/// How a matrix is stored and brought back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    /// Lossless reference.
    Identity,
    /// Quantize the matrix itself.
    Vq,
    /// Quantize its Cholesky factor and rebuild `D(C̄) D(C̄)ᵀ`.
    Cq,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Identity => "identity",
            Pipeline::Vq => "vq",
            Pipeline::Cq => "cq",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityConfig {
    pub quantizer: Quantizer,
    pub diagonal: DiagonalPolicy,
    /// Regularization `λ_max·ε` added before taking inverse roots.
    pub root_eps: f64,
    /// Shift used in the Cholesky factorization of the CQ pipeline.
    pub chol_eps: f64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self { quantizer: Quantizer::default(), diagonal: DiagonalPolicy::FullPrecision, root_eps: 1e-6, chol_eps: 0.0 }
    }
}

/// Round-trips `a` through `pipeline`.
pub fn reconstruct(a: &Matrix, pipeline: Pipeline, cfg: &FidelityConfig) -> Result<Matrix, StateError> {
    let q = &cfg.quantizer;
    Ok(match pipeline {
        Pipeline::Identity => a.clone(),
        Pipeline::Vq => SymmetricPayload::quantize(a, q, cfg.diagonal)?.reconstruct(&q.codebook)?,
        Pipeline::Cq => {
            let (c, _) = cholesky_with_retry(a, cfg.chol_eps)?;
            QuantizedFactor::quantize(c.as_matrix(), q, cfg.diagonal)?.dequantize(&q.codebook)?.gram()
        }
    })
}

/// `(max(X, 0) + λ_max·ε·I)^(-1/4)` by eigendecomposition.
///
/// Negative eigenvalues (possible after vanilla quantization) are clamped at
/// zero before the shift.
pub fn spectral_inv_root(x: &Matrix, eps: f64) -> Result<(Matrix, f64), LinalgError> {
    let e = eigh(x)?;
    let lam_max = e.max().max(0.0);
    let (root, _) = eigen_inv_root(x, 4, lam_max * eps)?;
    Ok((root, e.min()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    pub nre: f64,
    /// Degrees.
    pub ae: f64,
    /// Smallest eigenvalue of the reconstruction.
    pub min_eig: f64,
}

/// Angle in degrees between two matrices under the Frobenius inner product.
///
/// Computed as `2·asin(‖â − b̂‖/2)` on the normalised matrices, which is
/// exactly zero for identical inputs.
pub fn angle_degrees(a: &Matrix, b: &Matrix) -> f64 {
    let (na, nb) = (a.frobenius(), b.frobenius());
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 90.0 };
    }
    let d = a.scale(1.0 / na).sub(&b.scale(1.0 / nb)).frobenius();
    let half = (0.5 * d).min(1.0);
    (2.0 * libm::asin(half)).to_degrees()
}

/// NRE and AE between `A^(-1/4)` and `g(A)^(-1/4)`.
pub fn nre_ae(a: &SpdMatrix, pipeline: Pipeline, cfg: &FidelityConfig) -> Result<Fidelity, StateError> {
    let a = a.as_matrix();
    let (reference, _) = spectral_inv_root(a, cfg.root_eps)?;
    let g = reconstruct(a, pipeline, cfg)?;
    let (approx, min_eig) = spectral_inv_root(&g, cfg.root_eps)?;
    let nre = reference.sub(&approx).frobenius() / reference.frobenius();
    Ok(Fidelity { nre, ae: angle_degrees(&reference, &approx), min_eig })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityRow {
    pub index: usize,
    pub seed: u64,
    pub pipeline: Pipeline,
    pub fidelity: Fidelity,
}

/// Per-matrix results plus cumulative sums and means per pipeline.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FidelityReport {
    pub rows: Vec<FidelityRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelitySummary {
    pub count: usize,
    pub nre_sum: f64,
    pub ae_sum: f64,
    pub nre_mean: f64,
    pub ae_mean: f64,
    pub min_eig: f64,
    /// Reconstructions with a non-positive eigenvalue.
    pub indefinite: usize,
}

impl FidelityReport {
    pub fn summary(&self, pipeline: Pipeline) -> FidelitySummary {
        let rows: Vec<&FidelityRow> = self.rows.iter().filter(|r| r.pipeline == pipeline).collect();
        let count = rows.len();
        let nre_sum: f64 = rows.iter().map(|r| r.fidelity.nre).sum();
        let ae_sum: f64 = rows.iter().map(|r| r.fidelity.ae).sum();
        let denom = count.max(1) as f64;
        FidelitySummary {
            count,
            nre_sum,
            ae_sum,
            nre_mean: nre_sum / denom,
            ae_mean: ae_sum / denom,
            min_eig: rows.iter().map(|r| r.fidelity.min_eig).fold(f64::INFINITY, f64::min),
            indefinite: rows.iter().filter(|r| r.fidelity.min_eig.is_nan() || r.fidelity.min_eig <= 0.0).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub n_matrices: usize,
    pub order: usize,
    pub lam_lo: f64,
    pub lam_hi: f64,
    pub seed: u64,
    pub pipelines: Vec<Pipeline>,
    pub fidelity: FidelityConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_matrices: 100,
            order: 64,
            lam_lo: 1e-3,
            lam_hi: 1e3,
            seed: 0,
            pipelines: alloc::vec![Pipeline::Vq, Pipeline::Cq],
            fidelity: FidelityConfig::default(),
        }
    }
}

/// Runs every pipeline over `n_matrices` seeded synthetic SPD matrices.
pub fn fidelity_study(cfg: &StudyConfig) -> Result<FidelityReport, StateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FidelityReport::default();
    for index in 0..cfg.n_matrices {
        let seed = rng.next_u64();
        let a = synth_spd(cfg.order, cfg.lam_lo, cfg.lam_hi, seed)?;
        for &pipeline in &cfg.pipelines {
            let fidelity = nre_ae(&a, pipeline, &cfg.fidelity)?;
            report.rows.push(FidelityRow { index, seed, pipeline, fidelity });
        }
    }
    Ok(report)
}

/// Margin `1 + 2/(2^b − 1)` of strict diagonal dominance under which an
/// off-diagonal-quantized matrix stays positive definite.
pub fn dominance_margin(bits: u8) -> f64 {
    1.0 + 2.0 / (((1u32 << bits) - 1) as f64)
}

/// `|m_ii| > margin · Σ_{j≠i} |m_ij|` for every row.
pub fn is_diagonally_dominant(m: &Matrix, margin: f64) -> bool {
    (0..m.rows()).all(|i| {
        let off: f64 = (0..m.cols()).filter(|&j| j != i).map(|j| math::abs(m[(i, j)])).sum();
        math::abs(m[(i, i)]) > margin * off
    })
}

/// `C_B · n · 2^(-b)` with `C_B` the largest off-diagonal magnitude of `m`.
pub fn dominance_shift(m: &Matrix, bits: u8) -> f64 {
    m.max_abs_off_diag() * m.rows() as f64 * math::powf(2.0, -(bits as f64))
}

/// Logical byte counts of stored payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemoryParts {
    pub code_bytes: u64,
    pub norm_bytes: u64,
    pub diag_bytes: u64,
    pub full_bytes: u64,
}

impl MemoryParts {
    pub fn total(&self) -> u64 {
        self.code_bytes + self.norm_bytes + self.diag_bytes + self.full_bytes
    }

    pub fn quantized_bytes(&self) -> u64 {
        self.code_bytes + self.norm_bytes
    }

    fn add(&mut self, o: MemoryParts) {
        self.code_bytes += o.code_bytes;
        self.norm_bytes += o.norm_bytes;
        self.diag_bytes += o.diag_bytes;
        self.full_bytes += o.full_bytes;
    }
}

/// Bytes for statistics and for root caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemoryLedger {
    pub stats: MemoryParts,
    pub roots: MemoryParts,
}

impl MemoryLedger {
    pub fn parts(&self) -> MemoryParts {
        let mut p = self.stats;
        p.add(self.roots);
        p
    }

    pub fn total(&self) -> u64 {
        self.stats.total() + self.roots.total()
    }

    pub fn merge(&mut self, o: &MemoryLedger) {
        self.stats.add(o.stats);
        self.roots.add(o.roots);
    }
}

/// Bytes per full-precision scalar in the memory model.
pub const FULL_BYTES: u64 = 4;

fn code_bytes(count: u64, bits: u8) -> u64 {
    (count * bits as u64).div_ceil(8)
}

fn full_matrix(n: usize) -> MemoryParts {
    MemoryParts { full_bytes: (n * n) as u64 * FULL_BYTES, ..MemoryParts::default() }
}

fn symmetric_bytes(p: &SymmetricPayload) -> MemoryParts {
    let body = p.body();
    let n = body.rows();
    if body.is_exempt() {
        return full_matrix(n);
    }
    MemoryParts {
        code_bytes: code_bytes((n * n) as u64, body.bits()),
        norm_bytes: body.norms().len() as u64 * FULL_BYTES,
        diag_bytes: p.diag().map_or(0, |d| d.len() as u64 * FULL_BYTES),
        full_bytes: 0,
    }
}

fn lower_blocks(n: usize, block: usize) -> u64 {
    let nb = n.div_ceil(block) as u64;
    nb * (nb + 1) / 2
}

fn factor_bytes(p: &PackedFactorPair, with_error: bool) -> MemoryParts {
    let n = p.order() as u64;
    match p.body() {
        PairBody::Exempt { .. } => {
            let factor = n * (n + 1) / 2;
            let error = if with_error { n * (n - 1) / 2 } else { 0 };
            MemoryParts { full_bytes: (factor + error) * FULL_BYTES, ..MemoryParts::default() }
        }
        PairBody::Packed { diag, .. } => {
            let strict = n * (n - 1) / 2;
            let diag_codes = if diag.is_some() { 0 } else { n };
            let codes = if with_error { n * n } else { strict + diag_codes };
            let nb = lower_blocks(p.order(), p.block());
            let norms = if with_error { 2 * nb } else { nb };
            MemoryParts {
                code_bytes: code_bytes(codes, p.bits()),
                norm_bytes: norms * FULL_BYTES,
                diag_bytes: diag.as_ref().map_or(0, |d| d.len() as u64 * FULL_BYTES),
                full_bytes: 0,
            }
        }
    }
}

/// Logical storage of one order-`n` matrix kept by `pipeline`.
pub fn pipeline_bytes(n: usize, pipeline: Pipeline, cfg: &FidelityConfig) -> Result<MemoryParts, StateError> {
    let q = &cfg.quantizer;
    Ok(match pipeline {
        Pipeline::Identity => full_matrix(n),
        Pipeline::Vq => symmetric_bytes(&SymmetricPayload::quantize(&Matrix::identity(n), q, cfg.diagonal)?),
        Pipeline::Cq => factor_bytes(&PackedFactorPair::scaled_identity(n, 1.0, q, cfg.diagonal)?, false),
    })
}

/// Logical storage of one layer state.
///
/// Codes cost `bits/8` bytes each, norms and diagonals 4 bytes, verbatim
/// payloads 4 bytes per entry. A Cholesky factor without error state counts
/// only its lower triangle.
pub fn memory_bytes(st: &ShampooLayerState) -> MemoryLedger {
    let mut ledger = MemoryLedger::default();
    for side in [Side::Left, Side::Right] {
        let s = st.side(side);
        ledger.stats.add(match &s.stat {
            StatPayload::Full(m) => full_matrix(m.rows()),
            StatPayload::Vq(p) => symmetric_bytes(p),
            StatPayload::Factor(p) => factor_bytes(p, st.mode() == StateMode::Cq4Ef),
        });
        ledger.roots.add(match &s.root {
            RootCache::Full(m) => full_matrix(m.rows()),
            RootCache::Quantized(p) => symmetric_bytes(p),
        });
    }
    ledger
}

/// Memory of a fresh `m × n` layer in `mode`.
pub fn layer_memory(
    m: usize,
    n: usize,
    mode: StateMode,
    quantizer: &Quantizer,
    eps: f64,
) -> Result<MemoryLedger, StateError> {
    let st = ShampooLayerState::new(m, n, mode, quantizer.clone(), DiagonalPolicy::FullPrecision, eps)?;
    Ok(memory_bytes(&st))
}

//! Per-layer preconditioner state in the four storage modes.
//!
//! A layer with an `m × n` gradient keeps a left statistic of order `m` and a
//! right statistic of order `n`, each with a cached inverse fourth root.
//!
//! | mode    | statistic payload                           | root cache           |
//! |---------|---------------------------------------------|----------------------|
//! | Full32  | full matrix                                 | full matrix          |
//! | Vq4     | quantized off-diagonals + diagonal          | quantized + diagonal |
//! | Cq4     | quantized Cholesky factor (lower triangle)  | quantized + diagonal |
//! | Cq4Ef   | factor and error state sharing one grid     | quantized + diagonal |

use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::{self, cholesky_with_retry, inv_quarter_root, LinalgError, LowerTriangular, RootMethod};
use crate::matrix::Matrix;
use crate::optim::ShampooConfig;
use crate::quant::{
    quantize_scaled, BlockLayout, BlockPayload, CodebookKind, OffDiagNorm, OffDiagQuantized, PackedCodes,
    QuantCodebook, QuantError, QuantizedBlockMatrix, Quantizer,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("gradient shape {got:?} does not match layer shape {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("operation needs mode {expected:?}, state is {actual:?}")]
    ModeMismatch { expected: StateMode, actual: StateMode },
    #[error("inconsistent state payload: {0}")]
    Malformed(&'static str),
    #[error("statistic has no positive eigenvalue estimate")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateMode {
    Full32,
    Vq4,
    Cq4,
    Cq4Ef,
}

impl StateMode {
    pub const ALL: [StateMode; 4] = [StateMode::Full32, StateMode::Vq4, StateMode::Cq4, StateMode::Cq4Ef];

    pub fn name(self) -> &'static str {
        match self {
            StateMode::Full32 => "full32",
            StateMode::Vq4 => "vq4",
            StateMode::Cq4 => "cq4",
            StateMode::Cq4Ef => "cq4ef",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn tag(self) -> u8 {
        match self {
            StateMode::Full32 => 0,
            StateMode::Vq4 => 1,
            StateMode::Cq4 => 2,
            StateMode::Cq4Ef => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn is_quantized(self) -> bool {
        self != StateMode::Full32
    }

    pub fn is_cholesky(self) -> bool {
        matches!(self, StateMode::Cq4 | StateMode::Cq4Ef)
    }
}

/// Whether diagonals stay in full precision or go through the quantizer too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiagonalPolicy {
    /// Off-diagonals quantized, diagonal kept exactly.
    #[default]
    FullPrecision,
    /// Everything quantized, diagonal included (the 2×2 toy study).
    Quantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// A quantized symmetric matrix, with or without a separate diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum SymmetricPayload {
    OffDiag(OffDiagQuantized),
    Dense(QuantizedBlockMatrix),
}

impl SymmetricPayload {
    pub fn quantize(x: &Matrix, q: &Quantizer, policy: DiagonalPolicy) -> Result<Self, QuantError> {
        Ok(match policy {
            DiagonalPolicy::FullPrecision => SymmetricPayload::OffDiag(q.quantize_offdiag(x)?),
            DiagonalPolicy::Quantized => {
                if !x.is_square() {
                    return Err(QuantError::NotSquare { rows: x.rows(), cols: x.cols() });
                }
                SymmetricPayload::Dense(q.quantize(x)?)
            }
        })
    }

    /// Dequantize, restore the diagonal, symmetrize.
    pub fn reconstruct(&self, cb: &QuantCodebook) -> Result<Matrix, QuantError> {
        match self {
            SymmetricPayload::OffDiag(o) => o.reconstruct_symmetric(cb),
            SymmetricPayload::Dense(q) => Ok(q.dequantize(cb)?.symmetrize()),
        }
    }

    pub fn order(&self) -> usize {
        match self {
            SymmetricPayload::OffDiag(o) => o.order(),
            SymmetricPayload::Dense(q) => q.rows(),
        }
    }

    pub fn body(&self) -> &QuantizedBlockMatrix {
        match self {
            SymmetricPayload::OffDiag(o) => &o.offdiag,
            SymmetricPayload::Dense(q) => q,
        }
    }

    pub fn diag(&self) -> Option<&[f64]> {
        match self {
            SymmetricPayload::OffDiag(o) => Some(&o.diag),
            SymmetricPayload::Dense(_) => None,
        }
    }
}

/// A quantized lower-triangular factor before packing.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFactor {
    /// `n × n` codes; only the lower triangle is meaningful.
    pub body: QuantizedBlockMatrix,
    /// Exact diagonal when the diagonal is not quantized.
    pub diag: Option<Vec<f64>>,
}

impl QuantizedFactor {
    pub fn quantize(c: &Matrix, q: &Quantizer, policy: DiagonalPolicy) -> Result<Self, QuantError> {
        if !c.is_square() {
            return Err(QuantError::NotSquare { rows: c.rows(), cols: c.cols() });
        }
        let lower = LowerTriangular::from_lower_part(c).into_inner();
        let cb = &q.codebook;
        if c.rows() * c.cols() < q.exemption {
            return Ok(Self { body: quantize_scaled(&lower, &lower, cb, q.block, q.exemption)?, diag: None });
        }
        match policy {
            DiagonalPolicy::Quantized => {
                Ok(Self { body: quantize_scaled(&lower, &lower, cb, q.block, q.exemption)?, diag: None })
            }
            DiagonalPolicy::FullPrecision => {
                let strict = lower.strict_lower();
                let source = match q.offdiag_norm {
                    OffDiagNorm::OffDiagonal => &strict,
                    OffDiagNorm::FullBlock => &lower,
                };
                let body = quantize_scaled(&strict, source, cb, q.block, q.exemption)?;
                Ok(Self { body, diag: Some(lower.diag()) })
            }
        }
    }

    pub fn order(&self) -> usize {
        self.body.rows()
    }

    pub fn dequantize(&self, cb: &QuantCodebook) -> Result<LowerTriangular, QuantError> {
        let mut m = LowerTriangular::from_lower_part(&self.body.dequantize(cb)?).into_inner();
        if let Some(d) = &self.diag {
            m.set_diag(d);
        }
        Ok(LowerTriangular::new(m).expect("masked to the lower triangle"))
    }
}

/// One `n × n` code grid holding a Cholesky factor and its error state.
///
/// The lower triangle (diagonal included when it is quantized) carries the
/// factor codes; the strict upper triangle carries the error-state codes,
/// transposed. Factor and error have separate per-block scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedFactorPair {
    order: usize,
    block: usize,
    bits: u8,
    kind: CodebookKind,
    body: PairBody,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairBody {
    Packed {
        codes: PackedCodes,
        factor_norms: Vec<f64>,
        error_norms: Vec<f64>,
        diag: Option<Vec<f64>>,
    },
    /// Factor and error stored verbatim (small or exact-mode layers).
    Exempt {
        factor: Matrix,
        error: Matrix,
    },
}

impl PackedFactorPair {
    pub fn pack(factor: &QuantizedFactor, error: &QuantizedBlockMatrix) -> Result<Self, StateError> {
        let f = &factor.body;
        if f.layout().rows != f.layout().cols || f.layout() != error.layout() {
            return Err(StateError::Malformed("factor and error layouts differ"));
        }
        if f.bits() != error.bits() || f.kind() != error.kind() {
            return Err(StateError::Malformed("factor and error codebooks differ"));
        }
        let layout = f.layout();
        let n = layout.rows;
        let (order, block, bits, kind) = (n, layout.block, f.bits(), f.kind());
        let body = match (f.payload(), error.payload()) {
            (BlockPayload::Exempt(fm), BlockPayload::Exempt(em)) => {
                let mut fm = LowerTriangular::from_lower_part(fm).into_inner();
                if let Some(d) = &factor.diag {
                    fm.set_diag(d);
                }
                PairBody::Exempt { factor: fm, error: em.strict_lower() }
            }
            (
                BlockPayload::Quantized { codes: fc, norms: fnorms },
                BlockPayload::Quantized { codes: ec, norms: enorms },
            ) => {
                let dead = zero_code(bits);
                let mut codes = PackedCodes::new(bits, n * n, 0);
                for i in 0..n {
                    for j in 0..n {
                        let code = if i > j || (i == j && factor.diag.is_none()) {
                            fc.get(layout.code_index(i, j))
                        } else if i < j {
                            ec.get(layout.code_index(j, i))
                        } else {
                            dead
                        };
                        codes.set(layout.code_index(i, j), code);
                    }
                }
                PairBody::Packed {
                    codes,
                    factor_norms: fnorms.clone(),
                    error_norms: enorms.clone(),
                    diag: factor.diag.clone(),
                }
            }
            _ => return Err(StateError::Malformed("factor and error must both be exempt or both quantized")),
        };
        Ok(Self { order, block, bits, kind, body })
    }

    pub fn from_parts(
        order: usize,
        block: usize,
        bits: u8,
        kind: CodebookKind,
        body: PairBody,
    ) -> Result<Self, StateError> {
        if block == 0 {
            return Err(QuantError::InvalidBlock.into());
        }
        let layout = BlockLayout::new(order, order, block);
        match &body {
            PairBody::Packed { codes, factor_norms, error_norms, diag } => {
                if codes.len() != order * order || codes.bits() != bits {
                    return Err(StateError::Malformed("code grid does not match order"));
                }
                if factor_norms.len() != layout.num_blocks() || error_norms.len() != layout.num_blocks() {
                    return Err(StateError::Malformed("norm count does not match block count"));
                }
                if diag.as_ref().is_some_and(|d| d.len() != order) {
                    return Err(StateError::Malformed("diagonal length does not match order"));
                }
            }
            PairBody::Exempt { factor, error } => {
                if factor.shape() != (order, order) || error.shape() != (order, order) {
                    return Err(StateError::Malformed("exempt payload shape does not match order"));
                }
            }
        }
        Ok(Self { order, block, bits, kind, body })
    }

    /// Fresh pair: factor `s·I`, error zero.
    pub fn scaled_identity(n: usize, s: f64, q: &Quantizer, policy: DiagonalPolicy) -> Result<Self, StateError> {
        let factor = QuantizedFactor::quantize(&Matrix::from_diag(&alloc::vec![s; n]), q, policy)?;
        let error = quantize_error(&Matrix::zeros(n, n), q)?;
        Self::pack(&factor, &error)
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn block(&self) -> usize {
        self.block
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    #[inline]
    pub fn body(&self) -> &PairBody {
        &self.body
    }

    pub fn is_exempt(&self) -> bool {
        matches!(self.body, PairBody::Exempt { .. })
    }

    fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.order, self.order, self.block)
    }

    fn extract(&self, upper: bool) -> Result<QuantizedBlockMatrix, StateError> {
        let layout = self.layout();
        let n = self.order;
        let payload = match &self.body {
            PairBody::Exempt { factor, error } => {
                BlockPayload::Exempt(if upper { error.clone() } else { factor.clone() })
            }
            PairBody::Packed { codes, factor_norms, error_norms, .. } => {
                let dead = zero_code(self.bits);
                let mut out = PackedCodes::new(self.bits, n * n, dead);
                for i in 0..n {
                    for j in 0..n {
                        let code = if upper {
                            (i > j).then(|| codes.get(layout.code_index(j, i)))
                        } else {
                            (i >= j).then(|| codes.get(layout.code_index(i, j)))
                        };
                        if let Some(c) = code {
                            out.set(layout.code_index(i, j), c);
                        }
                    }
                }
                let norms = if upper { error_norms.clone() } else { factor_norms.clone() };
                BlockPayload::Quantized { codes: out, norms }
            }
        };
        Ok(QuantizedBlockMatrix::from_parts(layout, self.bits, self.kind, payload)?)
    }

    pub fn factor(&self) -> Result<QuantizedFactor, StateError> {
        let diag = match &self.body {
            PairBody::Packed { diag, .. } => diag.clone(),
            PairBody::Exempt { .. } => None,
        };
        Ok(QuantizedFactor { body: self.extract(false)?, diag })
    }

    /// Error-state payload in its natural (strictly lower) orientation.
    pub fn error(&self) -> Result<QuantizedBlockMatrix, StateError> {
        self.extract(true)
    }

    pub fn dequantize_factor(&self, cb: &QuantCodebook) -> Result<LowerTriangular, StateError> {
        Ok(self.factor()?.dequantize(cb)?)
    }

    /// `D(Ē)`, strictly lower triangular.
    pub fn dequantize_error(&self, cb: &QuantCodebook) -> Result<Matrix, StateError> {
        Ok(self.error()?.dequantize(cb)?.strict_lower())
    }

    /// `D(C̄) D(C̄)ᵀ`
    pub fn reconstruct(&self, cb: &QuantCodebook) -> Result<Matrix, StateError> {
        Ok(self.dequantize_factor(cb)?.gram())
    }

    /// Bytes of the packed code grid (zero when exempt).
    pub fn code_bytes(&self) -> usize {
        match &self.body {
            PairBody::Packed { codes, .. } => codes.as_bytes().len(),
            PairBody::Exempt { .. } => 0,
        }
    }
}

fn zero_code(bits: u8) -> u8 {
    ((1u16 << (bits - 1)) - 1) as u8
}

fn quantize_error(e: &Matrix, q: &Quantizer) -> Result<QuantizedBlockMatrix, QuantError> {
    let strict = e.strict_lower();
    quantize_scaled(&strict, &strict, &q.codebook, q.block, q.exemption)
}

/// `C̄ = Q(C + D(Ē_prev))`; the diagonal follows `policy`.
pub fn apply_error_feedback(
    c: &LowerTriangular,
    e_prev: &Matrix,
    q: &Quantizer,
    policy: DiagonalPolicy,
) -> Result<QuantizedFactor, StateError> {
    if c.as_matrix().shape() != e_prev.shape() {
        return Err(StateError::Shape { expected: c.as_matrix().shape(), got: e_prev.shape() });
    }
    let compensated = c.as_matrix().add(&e_prev.strict_lower());
    Ok(QuantizedFactor::quantize(&compensated, q, policy)?)
}

/// `E = β_e·E_prev + (1 − β_e)(C + E_prev − D(C̄))`, re-quantized with strictly
/// lower support.
pub fn update_error_state(
    e_prev: &Matrix,
    c: &LowerTriangular,
    c_bar: &LowerTriangular,
    beta_e: f64,
    q: &Quantizer,
) -> Result<QuantizedBlockMatrix, StateError> {
    let c = c.as_matrix();
    if c.shape() != e_prev.shape() || c.shape() != c_bar.as_matrix().shape() {
        return Err(StateError::Shape { expected: c.shape(), got: e_prev.shape() });
    }
    let e_prev = e_prev.strict_lower();
    let residual = c.add(&e_prev).sub(c_bar.as_matrix());
    let e = e_prev.lincomb(beta_e, &residual, 1.0 - beta_e);
    Ok(quantize_error(&e, q)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatPayload {
    Full(Matrix),
    Vq(SymmetricPayload),
    Factor(PackedFactorPair),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RootCache {
    Full(Matrix),
    Quantized(SymmetricPayload),
}

impl RootCache {
    pub fn dequantize(&self, cb: &QuantCodebook) -> Result<Matrix, QuantError> {
        match self {
            RootCache::Full(m) => Ok(m.clone()),
            RootCache::Quantized(p) => p.reconstruct(cb),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideState {
    pub stat: StatPayload,
    pub root: RootCache,
}

/// Diagnostics of one inverse-root computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootInfo {
    pub lam_max: f64,
    pub method: RootMethod,
    pub residual: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefreshReport {
    pub left: RootInfo,
    pub right: RootInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShampooLayerState {
    mode: StateMode,
    rows: usize,
    cols: usize,
    quantizer: Quantizer,
    diagonal: DiagonalPolicy,
    left: SideState,
    right: SideState,
    step: u64,
}

fn fresh_side(
    n: usize,
    mode: StateMode,
    eps: f64,
    q: &Quantizer,
    policy: DiagonalPolicy,
) -> Result<SideState, StateError> {
    let id = Matrix::identity(n);
    let stat = match mode {
        StateMode::Full32 => StatPayload::Full(id.scale(eps)),
        StateMode::Vq4 => StatPayload::Vq(SymmetricPayload::quantize(&id.scale(eps), q, policy)?),
        StateMode::Cq4 | StateMode::Cq4Ef => {
            StatPayload::Factor(PackedFactorPair::scaled_identity(n, libm::sqrt(eps), q, policy)?)
        }
    };
    let root = match mode {
        StateMode::Full32 => RootCache::Full(id),
        _ => RootCache::Quantized(SymmetricPayload::quantize(&id, q, policy)?),
    };
    Ok(SideState { stat, root })
}

/// Fresh state for an `m × n` layer.
pub fn init_state(m: usize, n: usize, mode: StateMode, cfg: &ShampooConfig) -> Result<ShampooLayerState, StateError> {
    ShampooLayerState::new(m, n, mode, cfg.quantizer()?, cfg.diagonal, cfg.eps)
}

impl ShampooLayerState {
    /// Statistics start at `εI` (Cholesky modes: factor `√ε·I`, error zero);
    /// roots start at the identity.
    pub fn new(
        m: usize,
        n: usize,
        mode: StateMode,
        quantizer: Quantizer,
        diagonal: DiagonalPolicy,
        eps: f64,
    ) -> Result<Self, StateError> {
        if m == 0 || n == 0 {
            return Err(StateError::Malformed("layer dimensions must be positive"));
        }
        let left = fresh_side(m, mode, eps, &quantizer, diagonal)?;
        let right = fresh_side(n, mode, eps, &quantizer, diagonal)?;
        Ok(Self { mode, rows: m, cols: n, quantizer, diagonal, left, right, step: 0 })
    }

    /// Reassembles a state from stored parts, checking that payloads match the mode.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        mode: StateMode,
        rows: usize,
        cols: usize,
        quantizer: Quantizer,
        diagonal: DiagonalPolicy,
        left: SideState,
        right: SideState,
        step: u64,
    ) -> Result<Self, StateError> {
        for (side, n) in [(&left, rows), (&right, cols)] {
            let ok = match (&side.stat, mode) {
                (StatPayload::Full(m), StateMode::Full32) => m.shape() == (n, n),
                (StatPayload::Vq(p), StateMode::Vq4) => p.order() == n,
                (StatPayload::Factor(p), StateMode::Cq4 | StateMode::Cq4Ef) => p.order() == n,
                _ => false,
            };
            let root_ok = match (&side.root, mode) {
                (RootCache::Full(m), StateMode::Full32) => m.shape() == (n, n),
                (RootCache::Quantized(p), m) if m.is_quantized() => p.order() == n,
                _ => false,
            };
            if !ok || !root_ok {
                return Err(StateError::Malformed("payload does not match mode or shape"));
            }
        }
        Ok(Self { mode, rows, cols, quantizer, diagonal, left, right, step })
    }

    #[inline]
    pub fn mode(&self) -> StateMode {
        self.mode
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    #[inline]
    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    #[inline]
    pub fn codebook(&self) -> &QuantCodebook {
        &self.quantizer.codebook
    }

    #[inline]
    pub fn diagonal_policy(&self) -> DiagonalPolicy {
        self.diagonal
    }

    pub fn side(&self, side: Side) -> &SideState {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut SideState {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }

    /// The statistic as seen by the update rule (`L`, or `D(C̄)D(C̄)ᵀ`).
    pub fn statistic(&self, side: Side) -> Result<Matrix, StateError> {
        let cb = self.codebook();
        Ok(match &self.side(side).stat {
            StatPayload::Full(m) => m.clone(),
            StatPayload::Vq(p) => p.reconstruct(cb)?,
            StatPayload::Factor(p) => p.reconstruct(cb)?,
        })
    }

    /// Dequantized Cholesky factor (Cholesky modes only).
    pub fn factor(&self, side: Side) -> Result<LowerTriangular, StateError> {
        match &self.side(side).stat {
            StatPayload::Factor(p) => p.dequantize_factor(self.codebook()),
            _ => Err(StateError::ModeMismatch { expected: StateMode::Cq4, actual: self.mode }),
        }
    }

    /// Dequantized error state (Cholesky modes only).
    pub fn error_state(&self, side: Side) -> Result<Matrix, StateError> {
        match &self.side(side).stat {
            StatPayload::Factor(p) => p.dequantize_error(self.codebook()),
            _ => Err(StateError::ModeMismatch { expected: StateMode::Cq4Ef, actual: self.mode }),
        }
    }

    /// Dequantized inverse-root preconditioner.
    pub fn root(&self, side: Side) -> Result<Matrix, StateError> {
        Ok(self.side(side).root.dequantize(self.codebook())?)
    }

    fn check_grad(&self, g: &Matrix) -> Result<(), StateError> {
        if g.shape() != (self.rows, self.cols) {
            return Err(StateError::Shape { expected: (self.rows, self.cols), got: g.shape() });
        }
        if !g.is_finite() {
            return Err(StateError::Linalg(LinalgError::NonFinite));
        }
        Ok(())
    }

    /// Runs the statistic update for the state's mode.
    pub fn update(&mut self, g: &Matrix, cfg: &ShampooConfig) -> Result<(), StateError> {
        match self.mode {
            StateMode::Full32 => update_state_full32(self, g, cfg.beta),
            StateMode::Vq4 => update_state_vq(self, g, cfg.beta),
            StateMode::Cq4 | StateMode::Cq4Ef => update_state_cq(self, g, cfg.beta, cfg.eps, cfg.beta_e),
        }
    }
}

fn outer_products(g: &Matrix) -> (Matrix, Matrix) {
    (g.gram(), g.gram_t())
}

/// `L ← βL + (1−β)GGᵀ`, `R ← βR + (1−β)GᵀG`.
pub fn update_state_full32(st: &mut ShampooLayerState, g: &Matrix, beta: f64) -> Result<(), StateError> {
    if st.mode != StateMode::Full32 {
        return Err(StateError::ModeMismatch { expected: StateMode::Full32, actual: st.mode });
    }
    st.check_grad(g)?;
    let (gl, gr) = outer_products(g);
    for (side, gg) in [(Side::Left, gl), (Side::Right, gr)] {
        if let StatPayload::Full(m) = &mut st.side_mut(side).stat {
            *m = m.lincomb(beta, &gg, 1.0 - beta);
        }
    }
    Ok(())
}

/// `L ← β·D(L̄) + (1−β)GGᵀ`, `L̄ ← Q(L)`; likewise for `R`.
pub fn update_state_vq(st: &mut ShampooLayerState, g: &Matrix, beta: f64) -> Result<(), StateError> {
    if st.mode != StateMode::Vq4 {
        return Err(StateError::ModeMismatch { expected: StateMode::Vq4, actual: st.mode });
    }
    st.check_grad(g)?;
    let (gl, gr) = outer_products(g);
    for (side, gg) in [(Side::Left, gl), (Side::Right, gr)] {
        let prev = st.statistic(side)?;
        let next = prev.lincomb(beta, &gg, 1.0 - beta);
        let payload = SymmetricPayload::quantize(&next, &st.quantizer, st.diagonal)?;
        st.side_mut(side).stat = StatPayload::Vq(payload);
    }
    Ok(())
}

/// Cholesky-factor update; in `Cq4Ef` mode the factor is error-compensated
/// before quantization and the error state is refreshed.
pub fn update_state_cq(
    st: &mut ShampooLayerState,
    g: &Matrix,
    beta: f64,
    eps: f64,
    beta_e: f64,
) -> Result<(), StateError> {
    if !st.mode.is_cholesky() {
        return Err(StateError::ModeMismatch { expected: StateMode::Cq4, actual: st.mode });
    }
    st.check_grad(g)?;
    let (gl, gr) = outer_products(g);
    let ef = st.mode == StateMode::Cq4Ef;
    for (side, gg) in [(Side::Left, gl), (Side::Right, gr)] {
        let StatPayload::Factor(pair) = &st.side(side).stat else {
            return Err(StateError::Malformed("cholesky mode without factor payload"));
        };
        let cb = &st.quantizer.codebook;
        let prev = pair.reconstruct(cb)?;
        let e_prev = if ef { pair.dequantize_error(cb)? } else { Matrix::zeros(prev.rows(), prev.cols()) };
        let l = prev.lincomb(beta, &gg, 1.0 - beta);
        let (c, _shift) = cholesky_with_retry(&l, eps)?;
        let (factor, error) = if ef {
            let c_bar = apply_error_feedback(&c, &e_prev, &st.quantizer, st.diagonal)?;
            let deq = c_bar.dequantize(cb)?;
            let e = update_error_state(&e_prev, &c, &deq, beta_e, &st.quantizer)?;
            (c_bar, e)
        } else {
            let c_bar = QuantizedFactor::quantize(c.as_matrix(), &st.quantizer, st.diagonal)?;
            (c_bar, quantize_error(&e_prev, &st.quantizer)?)
        };
        st.side_mut(side).stat = StatPayload::Factor(PackedFactorPair::pack(&factor, &error)?);
    }
    Ok(())
}

/// Power-iteration settings used when refreshing roots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub iters: usize,
    pub tol: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self { iters: 100, tol: 1e-6 }
    }
}

/// Recomputes `(L + λ_max·ε·I)^(-1/4)` and `(R + λ_max·ε·I)^(-1/4)` from the
/// stored statistics and caches them (quantized, in the low-bit modes).
pub fn refresh_roots(st: &mut ShampooLayerState, eps: f64, power: PowerIteration) -> Result<RefreshReport, StateError> {
    let mut infos = [None, None];
    for (k, side) in [Side::Left, Side::Right].into_iter().enumerate() {
        let l = st.statistic(side)?;
        let lam = linalg::max_singular_value(&l, power.iters, power.tol);
        if lam.is_nan() || lam <= 0.0 {
            return Err(StateError::Degenerate);
        }
        let root = inv_quarter_root(&l, lam, eps)?;
        let cache = match st.mode {
            StateMode::Full32 => RootCache::Full(root.matrix),
            _ => RootCache::Quantized(SymmetricPayload::quantize(&root.matrix, &st.quantizer, st.diagonal)?),
        };
        st.side_mut(side).root = cache;
        infos[k] = Some(RootInfo { lam_max: lam, method: root.method, residual: root.residual, clamped: root.clamped });
    }
    let [Some(left), Some(right)] = infos else { unreachable!() };
    Ok(RefreshReport { left, right })
}

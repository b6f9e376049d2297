//! Block-wise low-bit quantization.
//!
//! A matrix is tiled into `B × B` blocks. Every block is scaled by its own
//! max-absolute value `N_p` into `[-1, 1]` and each entry is replaced by the
//! index of the nearest codebook value. Codes are bit-packed LSB-first; for
//! 4-bit codes that is two codes per byte, low nibble first.
//!
//! Element order inside the packed stream is block-major: blocks in row-major
//! order, entries row-major inside each (possibly truncated) edge block.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("unsupported bit width {0} (expected 2..=8)")]
    UnsupportedBits(u8),
    #[error("block size must be at least 1")]
    InvalidBlock,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error(
        "codebook mismatch: payload uses {payload_bits}-bit {payload_kind:?}, codebook is {cb_bits}-bit {cb_kind:?}"
    )]
    CodebookMismatch { payload_bits: u8, payload_kind: CodebookKind, cb_bits: u8, cb_kind: CodebookKind },
    #[error("malformed quantized payload: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodebookKind {
    /// Uniform cells of width `2 / 2^b` with values at the cell centres.
    Linear,
    /// Signed-square mapping, dense around zero.
    Linear2,
}

impl CodebookKind {
    pub fn tag(self) -> u8 {
        match self {
            CodebookKind::Linear => 0,
            CodebookKind::Linear2 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CodebookKind::Linear),
            1 => Some(CodebookKind::Linear2),
            _ => None,
        }
    }
}

/// The `2^b` reconstruction levels of a `b`-bit mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantCodebook {
    bits: u8,
    kind: CodebookKind,
    values: Vec<f64>,
    max_half_gap: f64,
}

pub fn build_codebook(bits: u8, kind: CodebookKind) -> Result<QuantCodebook, QuantError> {
    QuantCodebook::new(bits, kind)
}

impl QuantCodebook {
    pub fn new(bits: u8, kind: CodebookKind) -> Result<Self, QuantError> {
        if !(2..=8).contains(&bits) {
            return Err(QuantError::UnsupportedBits(bits));
        }
        let levels = 1usize << bits;
        let values: Vec<f64> = match kind {
            CodebookKind::Linear => {
                let scale = levels as f64;
                (0..levels).map(|j| (2.0 * j as f64 + 1.0 - scale) / scale).collect()
            }
            CodebookKind::Linear2 => {
                let zero = levels / 2 - 1;
                let denom = (levels - 1) as f64;
                (0..levels)
                    .map(|j| {
                        let t = -1.0 + 2.0 * j as f64 / denom;
                        match j.cmp(&zero) {
                            core::cmp::Ordering::Less => -(t * t),
                            core::cmp::Ordering::Equal => 0.0,
                            core::cmp::Ordering::Greater => t * t,
                        }
                    })
                    .collect()
            }
        };
        let max_half_gap = values.windows(2).fold(0.0f64, |m, w| m.max(0.5 * (w[1] - w[0])));
        Ok(Self { bits, kind, values, max_half_gap })
    }

    /// The default 4-bit linear-2 codebook.
    pub fn linear2_4bit() -> Self {
        Self::new(4, CodebookKind::Linear2).expect("4 bits is supported")
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
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn max_half_gap(&self) -> f64 {
        self.max_half_gap
    }

    #[inline]
    pub fn value(&self, code: u8) -> f64 {
        self.values[code as usize]
    }

    /// Code `2^(b-1) - 1`; exactly zero for linear-2, used for all-zero blocks.
    #[inline]
    pub fn zero_code(&self) -> u8 {
        ((1u16 << (self.bits - 1)) - 1) as u8
    }

    /// Nearest codebook index; ties go to the smaller index.
    pub fn quantize_scalar(&self, x: f64) -> u8 {
        debug_assert!(math::abs(x) <= 1.0 + 1e-12, "quantize_scalar input {x} outside [-1, 1]");
        let x = x.clamp(-1.0, 1.0);
        let hi = self.values.partition_point(|&v| v < x);
        if hi == 0 {
            return 0;
        }
        if hi == self.values.len() {
            return (hi - 1) as u8;
        }
        let lo = hi - 1;
        if x - self.values[lo] <= self.values[hi] - x {
            lo as u8
        } else {
            hi as u8
        }
    }

    fn check_payload(&self, bits: u8, kind: CodebookKind) -> Result<(), QuantError> {
        if bits != self.bits || kind != self.kind {
            return Err(QuantError::CodebookMismatch {
                payload_bits: bits,
                payload_kind: kind,
                cb_bits: self.bits,
                cb_kind: self.kind,
            });
        }
        Ok(())
    }
}

pub fn quantize_scalar(x: f64, cb: &QuantCodebook) -> u8 {
    cb.quantize_scalar(x)
}

/// A dense LSB-first bit-packed array of `bits`-wide codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: u8,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedCodes {
    pub fn new(bits: u8, len: usize, fill: u8) -> Self {
        let mut codes = Self { bits, len, bytes: vec![0; Self::byte_len(bits, len)] };
        if fill != 0 {
            for i in 0..len {
                codes.set(i, fill);
            }
        }
        codes
    }

    pub fn from_bytes(bits: u8, len: usize, bytes: Vec<u8>) -> Result<Self, QuantError> {
        if bytes.len() != Self::byte_len(bits, len) {
            return Err(QuantError::Malformed("code byte count does not match element count"));
        }
        Ok(Self { bits, len, bytes })
    }

    pub fn byte_len(bits: u8, len: usize) -> usize {
        (len * bits as usize).div_ceil(8)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        debug_assert!(i < self.len);
        let bit = i * self.bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let mut word = self.bytes[byte] as u16;
        if shift + self.bits as usize > 8 {
            word |= (self.bytes[byte + 1] as u16) << 8;
        }
        ((word >> shift) & ((1u16 << self.bits) - 1)) as u8
    }

    #[inline]
    pub fn set(&mut self, i: usize, code: u8) {
        debug_assert!(i < self.len);
        let mask = (1u16 << self.bits) - 1;
        debug_assert!((code as u16) <= mask);
        let bit = i * self.bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let spans = shift + self.bits as usize > 8;
        let mut word = self.bytes[byte] as u16;
        if spans {
            word |= (self.bytes[byte + 1] as u16) << 8;
        }
        word = (word & !(mask << shift)) | (((code as u16) & mask) << shift);
        self.bytes[byte] = word as u8;
        if spans {
            self.bytes[byte + 1] = (word >> 8) as u8;
        }
    }
}

/// Block tiling of a `rows × cols` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub rows: usize,
    pub cols: usize,
    pub block: usize,
}

impl BlockLayout {
    pub fn new(rows: usize, cols: usize, block: usize) -> Self {
        Self { rows, cols, block }
    }

    pub fn block_rows(&self) -> usize {
        math::ceil_div(self.rows, self.block)
    }

    pub fn block_cols(&self) -> usize {
        math::ceil_div(self.cols, self.block)
    }

    pub fn num_blocks(&self) -> usize {
        self.block_rows() * self.block_cols()
    }

    /// `(row0, col0, height, width)` of block `(bi, bj)`.
    pub fn block_extent(&self, bi: usize, bj: usize) -> (usize, usize, usize, usize) {
        let r0 = bi * self.block;
        let c0 = bj * self.block;
        (r0, c0, self.block.min(self.rows - r0), self.block.min(self.cols - c0))
    }

    /// Position of element `(i, j)` in the block-major code stream.
    #[inline]
    pub fn code_index(&self, i: usize, j: usize) -> usize {
        let b = self.block;
        let (bi, bj) = (i / b, j / b);
        let h = b.min(self.rows - bi * b);
        let w = b.min(self.cols - bj * b);
        bi * b * self.cols + h * bj * b + (i - bi * b) * w + (j - bj * b)
    }

    #[inline]
    pub fn block_index(&self, i: usize, j: usize) -> usize {
        (i / self.block) * self.block_cols() + j / self.block
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockPayload {
    Quantized {
        codes: PackedCodes,
        norms: Vec<f64>,
    },
    /// Stored verbatim: tensors below the exemption threshold, or exact mode.
    Exempt(Matrix),
}

/// A matrix stored as packed low-bit codes plus one normalisation factor per block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlockMatrix {
    layout: BlockLayout,
    bits: u8,
    kind: CodebookKind,
    payload: BlockPayload,
}

impl QuantizedBlockMatrix {
    /// Reassembles a payload, validating its invariants.
    pub fn from_parts(
        layout: BlockLayout,
        bits: u8,
        kind: CodebookKind,
        payload: BlockPayload,
    ) -> Result<Self, QuantError> {
        if layout.block == 0 {
            return Err(QuantError::InvalidBlock);
        }
        if !(2..=8).contains(&bits) {
            return Err(QuantError::UnsupportedBits(bits));
        }
        match &payload {
            BlockPayload::Quantized { codes, norms } => {
                if codes.len() != layout.rows * layout.cols || codes.bits() != bits {
                    return Err(QuantError::Malformed("code stream does not match layout"));
                }
                if norms.len() != layout.num_blocks() {
                    return Err(QuantError::Malformed("norm count does not match block count"));
                }
                if norms.iter().any(|n| !n.is_finite() || *n < 0.0) {
                    return Err(QuantError::Malformed("norms must be finite and non-negative"));
                }
            }
            BlockPayload::Exempt(m) => {
                if m.shape() != (layout.rows, layout.cols) {
                    return Err(QuantError::Malformed("exempt payload shape does not match layout"));
                }
            }
        }
        Ok(Self { layout, bits, kind, payload })
    }

    #[inline]
    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.layout.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.layout.cols
    }

    #[inline]
    pub fn block(&self) -> usize {
        self.layout.block
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
    pub fn payload(&self) -> &BlockPayload {
        &self.payload
    }

    pub fn is_exempt(&self) -> bool {
        matches!(self.payload, BlockPayload::Exempt(_))
    }

    pub fn norms(&self) -> &[f64] {
        match &self.payload {
            BlockPayload::Quantized { norms, .. } => norms,
            BlockPayload::Exempt(_) => &[],
        }
    }

    pub fn codes(&self) -> Option<&PackedCodes> {
        match &self.payload {
            BlockPayload::Quantized { codes, .. } => Some(codes),
            BlockPayload::Exempt(_) => None,
        }
    }

    /// Code of element `(i, j)`; `None` for exempt payloads.
    pub fn code_at(&self, i: usize, j: usize) -> Option<u8> {
        self.codes().map(|c| c.get(self.layout.code_index(i, j)))
    }

    pub fn dequantize(&self, cb: &QuantCodebook) -> Result<Matrix, QuantError> {
        match &self.payload {
            BlockPayload::Exempt(m) => Ok(m.clone()),
            BlockPayload::Quantized { codes, norms } => {
                cb.check_payload(self.bits, self.kind)?;
                let l = self.layout;
                let mut out = Matrix::zeros(l.rows, l.cols);
                let mut idx = 0;
                for bi in 0..l.block_rows() {
                    for bj in 0..l.block_cols() {
                        let (r0, c0, h, w) = l.block_extent(bi, bj);
                        let n = norms[bi * l.block_cols() + bj];
                        for i in r0..r0 + h {
                            for j in c0..c0 + w {
                                if n != 0.0 {
                                    out[(i, j)] = n * cb.value(codes.get(idx));
                                }
                                idx += 1;
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

impl QuantizedBlockMatrix {
    /// Whether `|N_p · v(code) − x| ≤ N_p · rel` holds for every entry, evaluated
    /// in exact arithmetic on the real-valued reconstruction.
    pub fn error_within(&self, cb: &QuantCodebook, x: &Matrix, rel: f64) -> Result<bool, QuantError> {
        use core::cmp::Ordering::Greater;
        if x.shape() != (self.layout.rows, self.layout.cols) {
            return Err(QuantError::Malformed("reference shape does not match layout"));
        }
        let BlockPayload::Quantized { codes, norms } = &self.payload else {
            return Ok(self.dequantize(cb)? == *x);
        };
        cb.check_payload(self.bits, self.kind)?;
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let n = norms[self.layout.block_index(i, j)];
                let v = if n == 0.0 { 0.0 } else { cb.value(codes.get(self.layout.code_index(i, j))) };
                let (p, pe) = math::two_prod(n, v);
                let (b, be) = math::two_prod(n, rel);
                let t = x[(i, j)];
                if math::exact_sum_sign(&[p, pe, -t, -b, -be]) == Greater
                    || math::exact_sum_sign(&[t, -p, -pe, -b, -be]) == Greater
                {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Quantizes `x`, taking each block's scale from the matching block of `norm_source`.
pub(crate) fn quantize_scaled(
    x: &Matrix,
    norm_source: &Matrix,
    cb: &QuantCodebook,
    block: usize,
    exemption: usize,
) -> Result<QuantizedBlockMatrix, QuantError> {
    if block == 0 {
        return Err(QuantError::InvalidBlock);
    }
    let (rows, cols) = x.shape();
    for i in 0..rows {
        for j in 0..cols {
            if !x[(i, j)].is_finite() {
                return Err(QuantError::NonFinite { row: i, col: j });
            }
        }
    }
    let layout = BlockLayout::new(rows, cols, block);
    if rows * cols < exemption {
        return Ok(QuantizedBlockMatrix {
            layout,
            bits: cb.bits(),
            kind: cb.kind(),
            payload: BlockPayload::Exempt(x.clone()),
        });
    }
    let mut codes = PackedCodes::new(cb.bits(), rows * cols, 0);
    let mut norms = Vec::with_capacity(layout.num_blocks());
    let zero = cb.zero_code();
    let mut idx = 0;
    for bi in 0..layout.block_rows() {
        for bj in 0..layout.block_cols() {
            let (r0, c0, h, w) = layout.block_extent(bi, bj);
            let mut n: f64 = 0.0;
            for i in r0..r0 + h {
                for j in c0..c0 + w {
                    n = n.max(math::abs(norm_source[(i, j)]));
                }
            }
            norms.push(n);
            for i in r0..r0 + h {
                for j in c0..c0 + w {
                    let code = if n == 0.0 { zero } else { cb.quantize_scalar((x[(i, j)] / n).clamp(-1.0, 1.0)) };
                    codes.set(idx, code);
                    idx += 1;
                }
            }
        }
    }
    Ok(QuantizedBlockMatrix {
        layout,
        bits: cb.bits(),
        kind: cb.kind(),
        payload: BlockPayload::Quantized { codes, norms },
    })
}

pub fn quantize_matrix(
    x: &Matrix,
    cb: &QuantCodebook,
    block: usize,
    exemption: usize,
) -> Result<QuantizedBlockMatrix, QuantError> {
    quantize_scaled(x, x, cb, block, exemption)
}

pub fn dequantize_matrix(q: &QuantizedBlockMatrix, cb: &QuantCodebook) -> Result<Matrix, QuantError> {
    q.dequantize(cb)
}

/// Which entries define the block scale when only off-diagonals are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffDiagNorm {
    /// `N_p` = max over the off-diagonal entries of the block.
    #[default]
    OffDiagonal,
    /// `N_p` = max over the whole block, diagonal included.
    FullBlock,
}

/// Off-diagonal codes plus a full-precision diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct OffDiagQuantized {
    pub offdiag: QuantizedBlockMatrix,
    pub diag: Vec<f64>,
}

impl OffDiagQuantized {
    /// Dequantized off-diagonals with the exact diagonal restored.
    pub fn reconstruct(&self, cb: &QuantCodebook) -> Result<Matrix, QuantError> {
        let mut m = self.offdiag.dequantize(cb)?;
        m.set_diag(&self.diag);
        Ok(m)
    }

    /// Dequantize, restore the diagonal, then `(X + Xᵀ)/2`.
    pub fn reconstruct_symmetric(&self, cb: &QuantCodebook) -> Result<Matrix, QuantError> {
        Ok(self.reconstruct(cb)?.symmetrize())
    }

    pub fn order(&self) -> usize {
        self.diag.len()
    }
}

pub fn quantize_offdiag(
    s: &Matrix,
    cb: &QuantCodebook,
    block: usize,
    exemption: usize,
    scope: OffDiagNorm,
) -> Result<OffDiagQuantized, QuantError> {
    if !s.is_square() {
        return Err(QuantError::NotSquare { rows: s.rows(), cols: s.cols() });
    }
    let off = s.without_diag();
    let offdiag = match scope {
        OffDiagNorm::OffDiagonal => quantize_scaled(&off, &off, cb, block, exemption)?,
        OffDiagNorm::FullBlock => quantize_scaled(&off, s, cb, block, exemption)?,
    };
    Ok(OffDiagQuantized { offdiag, diag: s.diag() })
}

/// A codebook together with the tiling and exemption policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub codebook: QuantCodebook,
    pub block: usize,
    pub exemption: usize,
    pub offdiag_norm: OffDiagNorm,
}

impl Quantizer {
    pub fn new(codebook: QuantCodebook, block: usize, exemption: usize) -> Self {
        Self { codebook, block, exemption, offdiag_norm: OffDiagNorm::OffDiagonal }
    }

    /// Identity quantizer: every payload is stored verbatim.
    pub fn exact(codebook: QuantCodebook, block: usize) -> Self {
        Self::new(codebook, block, usize::MAX)
    }

    pub fn is_exact(&self) -> bool {
        self.exemption == usize::MAX
    }

    pub fn quantize(&self, x: &Matrix) -> Result<QuantizedBlockMatrix, QuantError> {
        quantize_matrix(x, &self.codebook, self.block, self.exemption)
    }

    pub fn dequantize(&self, q: &QuantizedBlockMatrix) -> Result<Matrix, QuantError> {
        q.dequantize(&self.codebook)
    }

    pub fn roundtrip(&self, x: &Matrix) -> Result<Matrix, QuantError> {
        self.dequantize(&self.quantize(x)?)
    }

    pub fn quantize_offdiag(&self, s: &Matrix) -> Result<OffDiagQuantized, QuantError> {
        quantize_offdiag(s, &self.codebook, self.block, self.exemption, self.offdiag_norm)
    }
}

impl Default for Quantizer {
    fn default() -> Self {
        Self::new(QuantCodebook::linear2_4bit(), 64, 4096)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb4() -> QuantCodebook {
        QuantCodebook::linear2_4bit()
    }

    #[test]
    fn linear2_golden_levels() {
        let cb = cb4();
        assert_eq!(cb.levels(), 16);
        assert_eq!(cb.value(7), 0.0);
        assert_eq!(cb.value(15), 1.0);
        assert_eq!(cb.value(0), -1.0);
        assert!((cb.value(12) - 0.36).abs() < 1e-15);
        assert!((cb.value(10) - 1.0 / 9.0).abs() < 1e-15);
        let top_gap = (1.0 - (13.0f64 / 15.0).powi(2)) / 2.0;
        assert!((cb.max_half_gap() - top_gap).abs() < 1e-15);
        assert!((cb.max_half_gap() - 0.1244).abs() < 1e-4);
    }

    #[test]
    fn codebook_invariants() {
        for bits in 2..=8u8 {
            for kind in [CodebookKind::Linear, CodebookKind::Linear2] {
                let cb = QuantCodebook::new(bits, kind).unwrap();
                let v = cb.values();
                let n = v.len();
                assert_eq!(n, 1 << bits);
                assert!(v.windows(2).all(|w| w[0] < w[1]));
                let gap = v.windows(2).map(|w| (w[1] - w[0]) / 2.0).fold(0.0, f64::max);
                assert_eq!(cb.max_half_gap(), gap);
                let z = cb.zero_code() as usize;
                for j in 0..n {
                    // linear-2 has the level 0 at index 2^(b-1)-1, so the pair
                    // (zero, zero+1) is the only one that is not mirrored
                    if kind == CodebookKind::Linear2 && (j == z || j == z + 1) {
                        continue;
                    }
                    assert!((v[j] + v[n - 1 - j]).abs() < 1e-15, "bits {bits} {kind:?} j {j}");
                }
                match kind {
                    CodebookKind::Linear2 => {
                        assert_eq!(v[0], -1.0);
                        assert_eq!(v[n - 1], 1.0);
                        assert_eq!(v[z], 0.0);
                    }
                    CodebookKind::Linear => {
                        assert_eq!(cb.max_half_gap(), 1.0 / n as f64);
                        assert_eq!(v[n - 1], 1.0 - 1.0 / n as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn unsupported_bits() {
        assert_eq!(QuantCodebook::new(1, CodebookKind::Linear2), Err(QuantError::UnsupportedBits(1)));
        assert_eq!(QuantCodebook::new(9, CodebookKind::Linear), Err(QuantError::UnsupportedBits(9)));
    }

    #[test]
    fn scalar_quantization_examples() {
        let cb = cb4();
        assert_eq!(cb.quantize_scalar(0.3), 12);
        assert_eq!(cb.quantize_scalar(0.0), 7);
        assert_eq!(cb.quantize_scalar(0.1), 10);
        assert_eq!(cb.quantize_scalar(1.0), 15);
        assert_eq!(cb.quantize_scalar(-1.0), 0);
    }

    #[test]
    fn scalar_quantization_matches_exhaustive_scan() {
        let cb = cb4();
        let brute = |x: f64| {
            let mut best = 0usize;
            for j in 1..cb.levels() {
                if (x - cb.values()[j]).abs() < (x - cb.values()[best]).abs() {
                    best = j;
                }
            }
            best as u8
        };
        for k in 0..=20_000 {
            let x = -1.0 + 2.0 * k as f64 / 20_000.0;
            assert_eq!(cb.quantize_scalar(x), brute(x), "x = {x}");
        }
    }

    #[test]
    fn ties_go_to_smaller_index() {
        let cb = QuantCodebook::new(4, CodebookKind::Linear).unwrap();
        // 0 sits exactly between -1/16 (index 7) and 1/16 (index 8)
        assert_eq!(cb.quantize_scalar(0.0), 7);
        let mid = 0.5 * (cb.value(10) + cb.value(11));
        assert_eq!(cb.quantize_scalar(mid), 10);
    }

    #[test]
    fn packed_codes_nibble_order() {
        let mut p = PackedCodes::new(4, 3, 0);
        p.set(0, 0xA);
        p.set(1, 0x3);
        p.set(2, 0xF);
        assert_eq!(p.as_bytes(), &[0x3A, 0x0F]);
        assert_eq!((p.get(0), p.get(1), p.get(2)), (0xA, 0x3, 0xF));

        let mut q = PackedCodes::new(3, 5, 0);
        for (i, c) in [5u8, 7, 1, 6, 2].iter().enumerate() {
            q.set(i, *c);
        }
        assert_eq!((0..5).map(|i| q.get(i)).collect::<Vec<_>>(), vec![5, 7, 1, 6, 2]);
    }

    #[test]
    fn block_layout_indexing_is_a_bijection() {
        let l = BlockLayout::new(7, 5, 3);
        let mut seen = [false; 35];
        for i in 0..7 {
            for j in 0..5 {
                let k = l.code_index(i, j);
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert_eq!(l.num_blocks(), 3 * 2);
        // first block is rows 0..3, cols 0..3
        assert_eq!(l.code_index(0, 0), 0);
        assert_eq!(l.code_index(0, 2), 2);
        assert_eq!(l.code_index(1, 0), 3);
        assert_eq!(l.code_index(0, 3), 9);
    }

    #[test]
    fn toy_matrix_codes_and_reconstruction() {
        let x = Matrix::from_rows(&[[10.0, 3.0], [3.0, 1.0]]);
        let q = quantize_matrix(&x, &cb4(), 64, 0).unwrap();
        assert_eq!(q.norms(), &[10.0]);
        let codes: Vec<u8> = (0..4).map(|k| q.codes().unwrap().get(k)).collect();
        assert_eq!(codes, vec![15, 12, 12, 10]);
        let d = q.dequantize(&cb4()).unwrap();
        assert_eq!(d[(0, 0)], 10.0);
        assert!((d[(0, 1)] - 3.6).abs() < 1e-12);
        assert!((d[(1, 0)] - 3.6).abs() < 1e-12);
        assert!((d[(1, 1)] - 10.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_and_exemption() {
        let z = Matrix::zeros(3, 4);
        let q = quantize_matrix(&z, &cb4(), 2, 0).unwrap();
        assert!(q.norms().iter().all(|&n| n == 0.0));
        assert_eq!(q.norms().len(), 4);
        assert!((0..12).all(|k| q.codes().unwrap().get(k) == 7));
        assert_eq!(q.dequantize(&cb4()).unwrap(), z);

        let x = Matrix::from_fn(3, 4, |i, j| (i as f64 - 1.3) * (j as f64 + 0.7));
        let q = quantize_matrix(&x, &cb4(), 64, 13).unwrap();
        assert!(q.is_exempt());
        assert_eq!(q.dequantize(&cb4()).unwrap(), x);
        assert!(!quantize_matrix(&x, &cb4(), 64, 12).unwrap().is_exempt());
    }

    #[test]
    fn invalid_inputs() {
        let mut x = Matrix::identity(3);
        assert_eq!(quantize_matrix(&x, &cb4(), 0, 0), Err(QuantError::InvalidBlock));
        x[(2, 1)] = f64::NAN;
        assert_eq!(quantize_matrix(&x, &cb4(), 2, 0), Err(QuantError::NonFinite { row: 2, col: 1 }));
        let r = Matrix::zeros(2, 3);
        assert_eq!(
            quantize_offdiag(&r, &cb4(), 2, 0, OffDiagNorm::OffDiagonal),
            Err(QuantError::NotSquare { rows: 2, cols: 3 })
        );
        let q = quantize_matrix(&Matrix::identity(2), &cb4(), 2, 0).unwrap();
        let other = QuantCodebook::new(3, CodebookKind::Linear2).unwrap();
        assert!(matches!(q.dequantize(&other), Err(QuantError::CodebookMismatch { .. })));
    }

    #[test]
    fn offdiag_identity_and_toy() {
        let id = Matrix::identity(5);
        let q = quantize_offdiag(&id, &cb4(), 2, 0, OffDiagNorm::OffDiagonal).unwrap();
        assert_eq!(q.diag, vec![1.0; 5]);
        assert_eq!(q.offdiag.dequantize(&cb4()).unwrap(), Matrix::zeros(5, 5));
        assert_eq!(q.reconstruct(&cb4()).unwrap(), id);

        let s = Matrix::from_rows(&[[10.0, 3.0], [3.0, 1.0]]);
        let q = quantize_offdiag(&s, &cb4(), 64, 0, OffDiagNorm::OffDiagonal).unwrap();
        assert_eq!(q.offdiag.norms(), &[3.0]);
        assert_eq!(q.reconstruct_symmetric(&cb4()).unwrap(), s);

        let q = quantize_offdiag(&s, &cb4(), 64, 0, OffDiagNorm::FullBlock).unwrap();
        assert_eq!(q.offdiag.norms(), &[10.0]);
        let r = q.reconstruct_symmetric(&cb4()).unwrap();
        assert_eq!(r[(0, 0)], 10.0);
        assert_eq!(r[(1, 1)], 1.0);
        assert!((r[(0, 1)] - 3.6).abs() < 1e-12);
        assert!((r[(1, 0)] - 3.6).abs() < 1e-12);
    }

    #[test]
    fn exact_quantizer_is_identity() {
        let q = Quantizer::exact(cb4(), 2);
        let x = Matrix::from_fn(70, 70, |i, j| ((i * 31 + j * 17) % 13) as f64 - 6.5);
        assert_eq!(q.roundtrip(&x).unwrap(), x);
        assert_eq!(q.quantize_offdiag(&x).unwrap().reconstruct(&q.codebook).unwrap(), x);
    }
}

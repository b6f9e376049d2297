//! Little-endian binary snapshots of quantized payloads and layer states.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! state   := "QSHS" version:u16 mode:u8 rows:u64 cols:u64 step:u64
//!            quantizer diagonal:u8 side side
//! side    := stat root
//! matrix  := rows:u64 cols:u64 f64[rows*cols]         (row-major)
//! qblock  := rows:u64 cols:u64 block:u64 bits:u8 kind:u8 tag:u8
//!            tag 0: norms:vec<f64> codes:bytes       (packed, LSB first)
//!            tag 1: matrix                           (verbatim)
//! vec<T>  := len:u64 T[len]
//! bytes   := len:u64 u8[len]
//! ```
//!
//! Floats are stored as their raw bit patterns, so decoding reproduces the
//! encoded state exactly.

use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::LinalgError;
use crate::matrix::Matrix;
use crate::quant::{
    BlockLayout, BlockPayload, CodebookKind, OffDiagNorm, OffDiagQuantized, PackedCodes, QuantCodebook, QuantError,
    QuantizedBlockMatrix, Quantizer,
};
use crate::state::{
    DiagonalPolicy, PackedFactorPair, PairBody, RootCache, ShampooLayerState, SideState, StatPayload, StateError,
    StateMode, SymmetricPayload,
};

pub const MAGIC: [u8; 4] = *b"QSHS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SnapshotError {
    #[error("snapshot truncated at byte {0}")]
    Truncated(usize),
    #[error("not a state snapshot")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    Version(u16),
    #[error("invalid {what} tag {tag}")]
    Tag { what: &'static str, tag: u8 },
    #[error("{0} trailing bytes after snapshot")]
    Trailing(usize),
    #[error("dimension {0} does not fit in memory")]
    Size(u64),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(if v == usize::MAX { u64::MAX } else { v as u64 });
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        m.as_slice().iter().for_each(|&x| self.f64(x));
    }

    pub fn option_f64s(&mut self, v: Option<&[f64]>) {
        match v {
            None => self.u8(0),
            Some(d) => {
                self.u8(1);
                self.f64s(d);
            }
        }
    }

    pub fn qblock(&mut self, q: &QuantizedBlockMatrix) {
        let l = q.layout();
        self.usize(l.rows);
        self.usize(l.cols);
        self.usize(l.block);
        self.u8(q.bits());
        self.u8(q.kind().tag());
        match q.payload() {
            BlockPayload::Quantized { codes, norms } => {
                self.u8(0);
                self.f64s(norms);
                self.bytes(codes.as_bytes());
            }
            BlockPayload::Exempt(m) => {
                self.u8(1);
                self.matrix(m);
            }
        }
    }

    pub fn symmetric(&mut self, p: &SymmetricPayload) {
        match p {
            SymmetricPayload::OffDiag(o) => {
                self.u8(0);
                self.qblock(&o.offdiag);
                self.f64s(&o.diag);
            }
            SymmetricPayload::Dense(q) => {
                self.u8(1);
                self.qblock(q);
            }
        }
    }

    pub fn factor_pair(&mut self, p: &PackedFactorPair) {
        self.usize(p.order());
        self.usize(p.block());
        self.u8(p.bits());
        self.u8(p.kind().tag());
        match p.body() {
            PairBody::Packed { codes, factor_norms, error_norms, diag } => {
                self.u8(0);
                self.bytes(codes.as_bytes());
                self.f64s(factor_norms);
                self.f64s(error_norms);
                self.option_f64s(diag.as_deref());
            }
            PairBody::Exempt { factor, error } => {
                self.u8(1);
                self.matrix(factor);
                self.matrix(error);
            }
        }
    }

    pub fn quantizer(&mut self, q: &Quantizer) {
        self.u8(q.codebook.bits());
        self.u8(q.codebook.kind().tag());
        self.usize(q.block);
        self.usize(q.exemption);
        self.u8(match q.offdiag_norm {
            OffDiagNorm::OffDiagonal => 0,
            OffDiagNorm::FullBlock => 1,
        });
    }

    fn side(&mut self, s: &SideState) {
        match &s.stat {
            StatPayload::Full(m) => {
                self.u8(0);
                self.matrix(m);
            }
            StatPayload::Vq(p) => {
                self.u8(1);
                self.symmetric(p);
            }
            StatPayload::Factor(p) => {
                self.u8(2);
                self.factor_pair(p);
            }
        }
        match &s.root {
            RootCache::Full(m) => {
                self.u8(0);
                self.matrix(m);
            }
            RootCache::Quantized(p) => {
                self.u8(1);
                self.symmetric(p);
            }
        }
    }

    pub fn state(&mut self, st: &ShampooLayerState) {
        self.buf.extend_from_slice(&MAGIC);
        self.u16(VERSION);
        self.u8(st.mode().tag());
        let (r, c) = st.shape();
        self.usize(r);
        self.usize(c);
        self.u64(st.step());
        self.quantizer(st.quantizer());
        self.u8(match st.diagonal_policy() {
            DiagonalPolicy::FullPrecision => 0,
            DiagonalPolicy::Quantized => 1,
        });
        self.side(st.side(crate::state::Side::Left));
        self.side(st.side(crate::state::Side::Right));
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), SnapshotError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(SnapshotError::Trailing(n)),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        if self.remaining() < n {
            return Err(SnapshotError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn usize(&mut self) -> Result<usize, SnapshotError> {
        match self.u64()? {
            u64::MAX => Ok(usize::MAX),
            v => usize::try_from(v).map_err(|_| SnapshotError::Size(v)),
        }
    }

    /// A length prefix, checked against the bytes left assuming `unit` bytes per item.
    fn len(&mut self, unit: usize) -> Result<usize, SnapshotError> {
        let n = self.usize()?;
        match n.checked_mul(unit) {
            Some(b) if b <= self.remaining() => Ok(n),
            _ => Err(SnapshotError::Truncated(self.buf.len())),
        }
    }

    pub fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, SnapshotError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, SnapshotError> {
        let n = self.len(1)?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn matrix(&mut self) -> Result<Matrix, SnapshotError> {
        let r = self.usize()?;
        let c = self.usize()?;
        let n = r.checked_mul(c).ok_or(SnapshotError::Size(r as u64))?;
        if n.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(SnapshotError::Truncated(self.buf.len()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Matrix::from_vec(r, c, data))
    }

    pub fn option_f64s(&mut self) -> Result<Option<Vec<f64>>, SnapshotError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64s()?)),
            tag => Err(SnapshotError::Tag { what: "option", tag }),
        }
    }

    fn kind(&mut self) -> Result<CodebookKind, SnapshotError> {
        let tag = self.u8()?;
        CodebookKind::from_tag(tag).ok_or(SnapshotError::Tag { what: "codebook", tag })
    }

    pub fn qblock(&mut self) -> Result<QuantizedBlockMatrix, SnapshotError> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let block = self.usize()?;
        let bits = self.u8()?;
        let kind = self.kind()?;
        let layout = BlockLayout::new(rows, cols, block);
        let payload = match self.u8()? {
            0 => {
                let norms = self.f64s()?;
                let len = rows.checked_mul(cols).ok_or(SnapshotError::Size(rows as u64))?;
                let codes = PackedCodes::from_bytes(bits, len, self.bytes()?)?;
                BlockPayload::Quantized { codes, norms }
            }
            1 => BlockPayload::Exempt(self.matrix()?),
            tag => return Err(SnapshotError::Tag { what: "block payload", tag }),
        };
        Ok(QuantizedBlockMatrix::from_parts(layout, bits, kind, payload)?)
    }

    pub fn symmetric(&mut self) -> Result<SymmetricPayload, SnapshotError> {
        match self.u8()? {
            0 => {
                let offdiag = self.qblock()?;
                let diag = self.f64s()?;
                if offdiag.layout().rows != offdiag.layout().cols || diag.len() != offdiag.rows() {
                    return Err(QuantError::Malformed("diagonal does not match off-diagonal payload").into());
                }
                Ok(SymmetricPayload::OffDiag(OffDiagQuantized { offdiag, diag }))
            }
            1 => Ok(SymmetricPayload::Dense(self.qblock()?)),
            tag => Err(SnapshotError::Tag { what: "symmetric payload", tag }),
        }
    }

    pub fn factor_pair(&mut self) -> Result<PackedFactorPair, SnapshotError> {
        let order = self.usize()?;
        let block = self.usize()?;
        let bits = self.u8()?;
        let kind = self.kind()?;
        let body = match self.u8()? {
            0 => {
                let raw = self.bytes()?;
                let len = order.checked_mul(order).ok_or(SnapshotError::Size(order as u64))?;
                let codes = PackedCodes::from_bytes(bits, len, raw)?;
                let factor_norms = self.f64s()?;
                let error_norms = self.f64s()?;
                let diag = self.option_f64s()?;
                PairBody::Packed { codes, factor_norms, error_norms, diag }
            }
            1 => PairBody::Exempt { factor: self.matrix()?, error: self.matrix()? },
            tag => return Err(SnapshotError::Tag { what: "factor pair", tag }),
        };
        Ok(PackedFactorPair::from_parts(order, block, bits, kind, body)?)
    }

    pub fn quantizer(&mut self) -> Result<Quantizer, SnapshotError> {
        let bits = self.u8()?;
        let kind = self.kind()?;
        let codebook = QuantCodebook::new(bits, kind)?;
        let block = self.usize()?;
        if block == 0 {
            return Err(QuantError::InvalidBlock.into());
        }
        let exemption = self.usize()?;
        let offdiag_norm = match self.u8()? {
            0 => OffDiagNorm::OffDiagonal,
            1 => OffDiagNorm::FullBlock,
            tag => return Err(SnapshotError::Tag { what: "norm scope", tag }),
        };
        Ok(Quantizer { codebook, block, exemption, offdiag_norm })
    }

    fn side(&mut self) -> Result<SideState, SnapshotError> {
        let stat = match self.u8()? {
            0 => StatPayload::Full(self.matrix()?),
            1 => StatPayload::Vq(self.symmetric()?),
            2 => StatPayload::Factor(self.factor_pair()?),
            tag => return Err(SnapshotError::Tag { what: "statistic", tag }),
        };
        let root = match self.u8()? {
            0 => RootCache::Full(self.matrix()?),
            1 => RootCache::Quantized(self.symmetric()?),
            tag => return Err(SnapshotError::Tag { what: "root cache", tag }),
        };
        Ok(SideState { stat, root })
    }

    pub fn state(&mut self) -> Result<ShampooLayerState, SnapshotError> {
        if self.take(4)? != MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(SnapshotError::Version(version));
        }
        let tag = self.u8()?;
        let mode = StateMode::from_tag(tag).ok_or(SnapshotError::Tag { what: "mode", tag })?;
        let rows = self.usize()?;
        let cols = self.usize()?;
        let step = self.u64()?;
        let quantizer = self.quantizer()?;
        let diagonal = match self.u8()? {
            0 => DiagonalPolicy::FullPrecision,
            1 => DiagonalPolicy::Quantized,
            tag => return Err(SnapshotError::Tag { what: "diagonal policy", tag }),
        };
        let left = self.side()?;
        let right = self.side()?;
        Ok(ShampooLayerState::from_parts(mode, rows, cols, quantizer, diagonal, left, right, step)?)
    }
}

pub fn encode_state(st: &ShampooLayerState) -> Vec<u8> {
    let mut w = Writer::new();
    w.state(st);
    w.into_bytes()
}

pub fn decode_state(bytes: &[u8]) -> Result<ShampooLayerState, SnapshotError> {
    let mut r = Reader::new(bytes);
    let st = r.state()?;
    r.finish()?;
    Ok(st)
}

pub fn encode_block(q: &QuantizedBlockMatrix) -> Vec<u8> {
    let mut w = Writer::new();
    w.qblock(q);
    w.into_bytes()
}

pub fn decode_block(bytes: &[u8]) -> Result<QuantizedBlockMatrix, SnapshotError> {
    let mut r = Reader::new(bytes);
    let q = r.qblock()?;
    r.finish()?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ShampooConfig;
    use crate::state::init_state;

    #[test]
    fn block_header_layout() {
        let q = Quantizer::new(QuantCodebook::linear2_4bit(), 2, 0);
        let m = Matrix::from_rows(&[[1.0, -0.5], [0.25, 0.0]]);
        let bytes = encode_block(&q.quantize(&m).unwrap());
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(bytes[24], 4);
        assert_eq!(bytes[26], 0);
        // one norm, then two code bytes
        assert_eq!(&bytes[27..35], &1u64.to_le_bytes());
        assert_eq!(&bytes[35..43], &1.0f64.to_bits().to_le_bytes());
        assert_eq!(&bytes[43..51], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 53);
    }

    #[test]
    fn states_round_trip_after_updates() {
        for mode in StateMode::ALL {
            let cfg = ShampooConfig { mode, exemption: 0, block: 3, ..Default::default() };
            let mut st = init_state(5, 4, mode, &cfg).unwrap();
            let g = Matrix::from_fn(5, 4, |i, j| libm::sin(i as f64 * 1.3 + j as f64) + 0.1);
            st.update(&g, &cfg).unwrap();
            st.set_step(7);
            let bytes = encode_state(&st);
            let back = decode_state(&bytes).unwrap();
            assert_eq!(back, st, "{mode:?}");
            assert_eq!(encode_state(&back), bytes);
        }
    }

    #[test]
    fn rejects_damage() {
        let cfg = ShampooConfig::default();
        let st = init_state(3, 2, StateMode::Cq4Ef, &cfg).unwrap();
        let bytes = encode_state(&st);
        assert_eq!(decode_state(&bytes[..bytes.len() - 1]).unwrap_err(), SnapshotError::Truncated(bytes.len() - 1));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(decode_state(&b).unwrap_err(), SnapshotError::BadMagic);
        let mut b = bytes.clone();
        b.push(0);
        assert_eq!(decode_state(&b).unwrap_err(), SnapshotError::Trailing(1));
        let mut b = bytes;
        b[6] = 9;
        assert!(matches!(decode_state(&b), Err(SnapshotError::Tag { what: "mode", .. })));
    }
}

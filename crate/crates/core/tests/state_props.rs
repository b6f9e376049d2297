use proptest::prelude::*;
use qshampoo_core::linalg::{cholesky_with_retry, eigh, gaussian_matrix};
use qshampoo_core::metrics::{dominance_margin, dominance_shift, is_diagonally_dominant, min_eigenvalue};
use qshampoo_core::state::{init_state, DiagonalPolicy, PackedFactorPair, Side, StatPayload, SymmetricPayload};
use qshampoo_core::{Matrix, QuantCodebook, Quantizer, ShampooConfig, StateMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(mode: StateMode) -> ShampooConfig {
    ShampooConfig { mode, exemption: 0, block: 8, ..ShampooConfig::default() }
}

/// Symmetric matrix whose rows dominate their off-diagonal sums by `margin·(1 + slack)`.
fn dominant(n: usize, margin: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v: f64 = rng.random_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
        let slack: f64 = rng.random_range(0.001..0.5);
        m[(i, i)] = margin * off * (1.0 + slack) + 1e-9;
    }
    m
}

#[test]
fn dominant_roots_stay_positive_definite() {
    let q = Quantizer::new(QuantCodebook::linear2_4bit(), 64, 0);
    let margin = dominance_margin(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let n = rng.random_range(2..=96);
        let m = dominant(n, margin, &mut rng);
        assert!(is_diagonally_dominant(&m, margin));
        let d = SymmetricPayload::quantize(&m, &q, DiagonalPolicy::FullPrecision)
            .unwrap()
            .reconstruct(&q.codebook)
            .unwrap();
        assert!(min_eigenvalue(&d).unwrap() > 0.0, "n={n}");
        let gap = m.add_diag(dominance_shift(&m, 4)).sub(&d);
        assert!(eigh(&gap).unwrap().min() >= -1e-12 * m.max_abs(), "n={n}");
    }
}

#[test]
fn error_state_stays_bounded_over_thousand_steps() {
    let c = ShampooConfig { beta: 0.9, ..cfg(StateMode::Cq4Ef) };
    let h = c.quantizer().unwrap().codebook.max_half_gap();
    let mut st = init_state(12, 6, StateMode::Cq4Ef, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // |E_k| ≤ h · max_j ‖strict(C_j + E_{j-1})‖_max by induction
    let mut bound = 0.0f64;
    let mut factor_max = 0.0f64;
    for k in 0..1000 {
        let prev = st.statistic(Side::Left).unwrap();
        let e_prev = st.error_state(Side::Left).unwrap();
        let scale = 1.0 + (k as f64 * 0.05).sin();
        let g = gaussian_matrix(12, 6, &mut rng).scale(scale);
        let l = prev.lincomb(c.beta, &g.gram(), 1.0 - c.beta);
        let (chol, _) = cholesky_with_retry(&l, c.eps).unwrap();
        let target = chol.as_matrix().add(&e_prev).strict_lower();
        bound = bound.max(h * target.max_abs());
        factor_max = factor_max.max(chol.as_matrix().max_abs());

        st.update(&g, &c).unwrap();
        let e = st.error_state(Side::Left).unwrap();
        assert!(e.is_finite());
        assert_eq!(e.diag(), vec![0.0; 12]);
        assert_eq!(e.strict_lower(), e);
        assert!(e.max_abs() <= bound * (1.0 + 1e-12), "step {k}: {} > {bound}", e.max_abs());
    }
    assert!(bound <= h * factor_max / (1.0 - h) * (1.0 + 1e-12));
}

#[test]
fn cholesky_reconstructions_are_psd() {
    for mode in [StateMode::Cq4, StateMode::Cq4Ef] {
        let c = cfg(mode);
        let eps = c.eps;
        let mut st = init_state(20, 10, mode, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            st.update(&gaussian_matrix(20, 10, &mut rng).scale(1e-2), &c).unwrap();
            for side in [Side::Left, Side::Right] {
                let l = st.statistic(side).unwrap();
                let scale = l.max_abs();
                let lo = min_eigenvalue(&l).unwrap();
                assert!(lo >= -1e-14 * scale);
                assert!(min_eigenvalue(&l.add_diag(eps)).unwrap() >= eps * (1.0 - 1e-6) - 1e-14 * scale);
            }
        }
    }
}

#[test]
fn ef_grid_costs_the_same_codes_as_vanilla() {
    for n in [8, 17, 64, 130] {
        let q = Quantizer::new(QuantCodebook::linear2_4bit(), 64, 0);
        let pair = PackedFactorPair::scaled_identity(n, 1.0, &q, DiagonalPolicy::FullPrecision).unwrap();
        let vq = SymmetricPayload::quantize(&Matrix::identity(n), &q, DiagonalPolicy::FullPrecision).unwrap();
        assert_eq!(pair.code_bytes(), vq.body().codes().unwrap().as_bytes().len(), "n={n}");
    }
}

#[test]
fn full32_trace_follows_the_ema() {
    let c = cfg(StateMode::Full32);
    let mut st = init_state(5, 3, StateMode::Full32, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tl = 5.0 * c.eps;
    let mut tr = 3.0 * c.eps;
    for _ in 0..30 {
        let g = gaussian_matrix(5, 3, &mut rng);
        st.update(&g, &c).unwrap();
        let f2 = g.dot(&g);
        tl = c.beta * tl + (1.0 - c.beta) * f2;
        tr = c.beta * tr + (1.0 - c.beta) * f2;
        assert!((st.statistic(Side::Left).unwrap().trace() - tl).abs() <= 1e-12 * tl);
        assert!((st.statistic(Side::Right).unwrap().trace() - tr).abs() <= 1e-12 * tr);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_mode_reconstructs_a_symmetric_statistic(m in 1usize..12, n in 1usize..12, seed in any::<u64>(), toy in any::<bool>()) {
        let policy = if toy { DiagonalPolicy::Quantized } else { DiagonalPolicy::FullPrecision };
        for mode in StateMode::ALL {
            let c = ShampooConfig { diagonal: policy, ..cfg(mode) };
            let mut st = init_state(m, n, mode, &c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..3 {
                st.update(&gaussian_matrix(m, n, &mut rng), &c).unwrap();
            }
            for side in [Side::Left, Side::Right] {
                let l = st.statistic(side).unwrap();
                prop_assert!(l.is_finite());
                prop_assert!(l.is_symmetric(0.0));
                if mode.is_cholesky() {
                    prop_assert!(matches!(st.side(side).stat, StatPayload::Factor(_)));
                    prop_assert!(min_eigenvalue(&l).unwrap() >= -1e-12 * l.max_abs());
                }
            }
        }
    }
}

//! The four harness commands. Each returns a [`Report`] and a pass/fail verdict.

use std::time::Instant;

use qshampoo_core::linalg::{cholesky, eigh};
use qshampoo_core::metrics::{
    fidelity_study, memory_bytes, min_eigenvalue, pipeline_bytes, FidelityReport, MemoryLedger, Pipeline, StudyConfig,
};
use qshampoo_core::optim::OptimError;
use qshampoo_core::problems::{
    grad_norm, logistic_problem, mlp_problem, quadratic_problem, Activation, BatchSampler, Problem,
};
use qshampoo_core::state::{DiagonalPolicy, QuantizedFactor, Side};
use qshampoo_core::{BaseOptimizer, Matrix, QuantCodebook, Quantizer, Shampoo, ShampooConfig, StateError, StateMode};
use thiserror::Error;

use crate::config::{ExperimentConfig, ProblemKind};
use crate::report::{Report, Table, Value};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Quant(#[from] qshampoo_core::QuantError),
    #[error(transparent)]
    Linalg(#[from] qshampoo_core::LinalgError),
}

/// Outcome of a command: the table to write and, on failure, why.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: Report,
    pub failure: Option<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

pub const TOY: [[f64; 2]; 2] = [[10.0, 3.0], [3.0, 1.0]];
pub const TOY_EIG_TOL: f64 = 1e-2;
pub const TOY_ENTRY_TOL: f64 = 5e-3;

/// Name, reconstruction and ascending eigenvalues.
pub type ToyGolden = (&'static str, [[f64; 2]; 2], [f64; 2]);

/// Reference reconstructions and eigenvalues of the toy study.
pub const TOY_GOLDEN: [ToyGolden; 3] = [
    ("original", TOY, [0.092, 10.908]),
    ("vq", [[10.0, 3.6], [3.6, 1.11]], [-0.164, 11.275]),
    ("cq", [[10.0, 3.6], [3.6, 1.42]], [0.109, 11.310]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyResult {
    pub name: &'static str,
    pub matrix: Matrix,
    pub eigenvalues: [f64; 2],
}

/// The 2×2 study: the matrix itself, its vanilla 4-bit round trip and its
/// Cholesky round trip, all in one 64-block with every entry quantized.
pub fn toy_study() -> Result<Vec<ToyResult>, CommandError> {
    let x = Matrix::from_rows(&TOY);
    let q = Quantizer::new(QuantCodebook::linear2_4bit(), 64, 0);
    let vq = q.roundtrip(&x)?;
    let c = cholesky(&x, 0.0)?;
    let cq = QuantizedFactor::quantize(c.as_matrix(), &q, DiagonalPolicy::Quantized)?.dequantize(&q.codebook)?.gram();
    let mut out = Vec::new();
    for (name, m) in [("original", x), ("vq", vq), ("cq", cq)] {
        let e = eigh(&m)?;
        out.push(ToyResult { name, eigenvalues: [e.values[0], e.values[1]], matrix: m });
    }
    Ok(out)
}

pub fn cmd_toy(cfg: &ExperimentConfig) -> Result<Outcome, CommandError> {
    let results = toy_study()?;
    let mut table = Table::new(&["matrix", "a11", "a12", "a21", "a22", "eig_min", "eig_max", "golden"]);
    let mut misses = Vec::new();
    for (r, (name, want, want_eig)) in results.iter().zip(TOY_GOLDEN) {
        debug_assert_eq!(r.name, name);
        let entries_ok = (0..4).all(|k| (r.matrix[(k / 2, k % 2)] - want[k / 2][k % 2]).abs() <= TOY_ENTRY_TOL);
        let eig_ok = r.eigenvalues.iter().zip(want_eig).all(|(g, w)| (g - w).abs() <= TOY_EIG_TOL);
        if !entries_ok {
            misses.push(format!("{name} reconstruction"));
        }
        if !eig_ok {
            misses.push(format!("{name} eigenvalues"));
        }
        let m = &r.matrix;
        table.push(vec![
            name.into(),
            m[(0, 0)].into(),
            m[(0, 1)].into(),
            m[(1, 0)].into(),
            m[(1, 1)].into(),
            r.eigenvalues[0].into(),
            r.eigenvalues[1].into(),
            (entries_ok && eig_ok).into(),
        ]);
    }
    let failure = (!misses.is_empty()).then(|| format!("golden mismatch: {}", misses.join(", ")));
    Ok(Outcome { report: Report::new("toy", cfg, table), failure })
}

pub const MATSTUDY_COLUMNS: [&str; 9] =
    ["kind", "seed", "index", "matrix_seed", "pipeline", "nre", "ae", "min_eig", "bytes"];

/// One fidelity study per configured seed.
pub fn matstudy_reports(cfg: &ExperimentConfig) -> Result<Vec<(u64, FidelityReport)>, CommandError> {
    let fidelity = cfg.fidelity_config()?;
    let m = &cfg.matstudy;
    let mut out = Vec::new();
    for &seed in &m.seeds {
        let study = StudyConfig {
            n_matrices: m.n_matrices,
            order: m.order,
            lam_lo: m.lam_lo,
            lam_hi: m.lam_hi,
            seed,
            pipelines: vec![Pipeline::Vq, Pipeline::Cq],
            fidelity: fidelity.clone(),
        };
        out.push((seed, fidelity_study(&study)?));
    }
    Ok(out)
}

/// Per-matrix rows, then `sum` and `mean` rows per seed and pipeline. Fails
/// when the Cholesky pipeline does not beat the vanilla one on both metrics,
/// unless the matrices are stored losslessly.
pub fn cmd_matstudy(cfg: &ExperimentConfig) -> Result<Outcome, CommandError> {
    let fidelity = cfg.fidelity_config()?;
    let order = cfg.matstudy.order;
    let bytes = |p: Pipeline| pipeline_bytes(order, p, &fidelity).map(|m| m.total());
    let (vq_bytes, cq_bytes) = (bytes(Pipeline::Vq)?, bytes(Pipeline::Cq)?);
    let bytes_of = |p: Pipeline| if p == Pipeline::Vq { vq_bytes } else { cq_bytes };
    // nothing to compare when every matrix is stored verbatim
    let lossless = fidelity.quantizer.is_exact() || order * order < fidelity.quantizer.exemption;

    let mut table = Table::new(&MATSTUDY_COLUMNS);
    let mut losses = Vec::new();
    for (seed, report) in matstudy_reports(cfg)? {
        for r in &report.rows {
            let f = r.fidelity;
            table.push(vec![
                "matrix".into(),
                seed.into(),
                r.index.into(),
                r.seed.into(),
                r.pipeline.name().into(),
                f.nre.into(),
                f.ae.into(),
                f.min_eig.into(),
                bytes_of(r.pipeline).into(),
            ]);
        }
        for p in [Pipeline::Vq, Pipeline::Cq] {
            let s = report.summary(p);
            for (kind, nre, ae) in [("sum", s.nre_sum, s.ae_sum), ("mean", s.nre_mean, s.ae_mean)] {
                table.push(vec![
                    kind.into(),
                    seed.into(),
                    s.count.into(),
                    Value::Missing,
                    p.name().into(),
                    nre.into(),
                    ae.into(),
                    s.min_eig.into(),
                    bytes_of(p).into(),
                ]);
            }
        }
        let (vq, cq) = (report.summary(Pipeline::Vq), report.summary(Pipeline::Cq));
        if cfg.matstudy.n_matrices > 0 && !lossless && !(cq.nre_sum < vq.nre_sum && cq.ae_sum < vq.ae_sum) {
            losses.push(seed.to_string());
        }
    }
    let failure = (!losses.is_empty()).then(|| format!("cq does not beat vq for seeds {}", losses.join(", ")));
    Ok(Outcome { report: Report::new("matstudy", cfg, table), failure })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Smallest eigenvalue over all dequantized left roots; `None` when no
    /// parameter is preconditioned.
    pub min_eig_left: Option<f64>,
    pub min_eig_right: Option<f64>,
    pub wall_ms: f64,
    pub state_bytes: u64,
}

/// Smallest eigenvalues recorded when roots were refreshed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefreshSample {
    pub step: u64,
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub problem: &'static str,
    pub mode: StateMode,
    /// Log rows, then the final summary row.
    pub records: Vec<TrainRecord>,
    pub refreshes: Vec<RefreshSample>,
    pub final_params: Vec<Matrix>,
    pub diverged: Option<Divergence>,
}

/// Why and where a run was stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub loss: f64,
    pub reason: String,
}

impl Divergence {
    fn loss(step: u64, loss: f64) -> Self {
        Self { step, loss, reason: "non-finite loss or gradient".into() }
    }
}

impl TrainRun {
    pub fn last(&self) -> &TrainRecord {
        self.records.last().expect("a run logs at least its final row")
    }
}

pub fn build_problem(cfg: &ExperimentConfig) -> Box<dyn Problem> {
    let t = &cfg.train;
    let seed = cfg.run.seed;
    match t.problem {
        ProblemKind::Quadratic => Box::new(quadratic_problem(t.rows, t.cols, t.cond, seed)),
        ProblemKind::Logistic => {
            let mut p = logistic_problem(t.dim, t.samples, seed);
            p.l2 = t.l2;
            Box::new(p)
        }
        ProblemKind::MlpTanh => Box::new(mlp_problem(t.dim, t.hidden, t.outputs, t.samples, Activation::Tanh, seed)),
        ProblemKind::MlpRelu => Box::new(mlp_problem(t.dim, t.hidden, t.outputs, t.samples, Activation::Relu, seed)),
    }
}

fn root_min_eigs(opt: &Shampoo) -> Result<(Option<f64>, Option<f64>), CommandError> {
    let mut lo: Option<(f64, f64)> = None;
    for st in opt.states() {
        let l = min_eigenvalue(&st.root(Side::Left)?)?;
        let r = min_eigenvalue(&st.root(Side::Right)?)?;
        lo = Some(lo.map_or((l, r), |(a, b)| (a.min(l), b.min(r))));
    }
    Ok((lo.map(|x| x.0), lo.map(|x| x.1)))
}

/// Failures that come from the numbers rather than from the setup.
fn is_breakdown(e: &OptimError) -> bool {
    matches!(e, OptimError::State(StateError::Linalg(_) | StateError::Degenerate))
}

fn state_bytes(opt: &Shampoo) -> u64 {
    let mut total = MemoryLedger::default();
    for st in opt.states() {
        total.merge(&memory_bytes(st));
    }
    total.total()
}

/// Runs the configured problem under `shampoo`, logging every `log_every`
/// steps and at every root refresh, plus a final row at the last step.
pub fn train(cfg: &ExperimentConfig, shampoo: ShampooConfig) -> Result<TrainRun, CommandError> {
    let t = &cfg.train;
    let seed = cfg.run.seed;
    let problem = build_problem(cfg);
    let shampoo = ShampooConfig { monitor_eigenvalues: true, ..shampoo };
    let mode = shampoo.mode;
    let mut opt = Shampoo::new(&problem.shapes(), shampoo, BaseOptimizer::new(t.base_kind(), t.lr))?;
    let mut params = problem.init(seed);
    let full = problem.full_batch();
    let mut sampler =
        t.batch.map(|b| BatchSampler::new(problem.n_samples(), b.min(problem.n_samples()), seed.wrapping_add(1)));
    let start = Instant::now();
    let mut run = TrainRun {
        problem: problem.name(),
        mode,
        records: Vec::new(),
        refreshes: Vec::new(),
        final_params: Vec::new(),
        diverged: None,
    };

    let record = |step: u64, params: &[Matrix], opt: &Shampoo| -> Result<TrainRecord, CommandError> {
        let (loss, g) = problem.loss_and_grad(params, &full);
        let (min_eig_left, min_eig_right) = root_min_eigs(opt)?;
        let wall_ms = if cfg.run.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        Ok(TrainRecord {
            step,
            loss,
            grad_norm: grad_norm(&g),
            min_eig_left,
            min_eig_right,
            wall_ms,
            state_bytes: state_bytes(opt),
        })
    };

    for step in 1..=t.steps {
        let batch = sampler.as_mut().map_or_else(|| full.clone(), BatchSampler::next_batch);
        let (loss, g) = problem.loss_and_grad(&params, &batch);
        if !loss.is_finite() || !grad_norm(&g).is_finite() {
            run.diverged = Some(Divergence::loss(step, loss));
            break;
        }
        let rep = match opt.step(&mut params, &g) {
            Ok(r) => r,
            Err(e) if is_breakdown(&e) => {
                run.diverged = Some(Divergence { step, loss, reason: format!("numerical breakdown: {e}") });
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some((left, right)) = rep.min_eigen() {
            run.refreshes.push(RefreshSample { step, left, right });
        }
        if step == t.steps {
            break;
        }
        if step % t.log_every == 0 || rep.refreshed {
            let r = record(step, &params, &opt)?;
            if !r.loss.is_finite() {
                run.records.push(r);
                run.diverged = Some(Divergence::loss(step, r.loss));
                break;
            }
            run.records.push(r);
        }
    }
    if run.diverged.is_none() {
        let r = record(t.steps, &params, &opt)?;
        if !r.loss.is_finite() {
            run.diverged = Some(Divergence::loss(t.steps, r.loss));
        }
        run.records.push(r);
    }
    run.final_params = params;
    Ok(run)
}

pub const TRAIN_COLUMNS: [&str; 9] =
    ["kind", "step", "loss", "grad_norm", "min_eig_left", "min_eig_right", "wall_ms", "state_bytes", "mode"];

pub fn train_table(run: &TrainRun) -> Table {
    let mut table = Table::new(&TRAIN_COLUMNS);
    let n = run.records.len();
    for (i, r) in run.records.iter().enumerate() {
        let kind = if i + 1 == n && run.diverged.is_none() { "final" } else { "log" };
        table.push(vec![
            kind.into(),
            r.step.into(),
            r.loss.into(),
            r.grad_norm.into(),
            r.min_eig_left.into(),
            r.min_eig_right.into(),
            r.wall_ms.into(),
            r.state_bytes.into(),
            run.mode.name().into(),
        ]);
    }
    table
}

/// Fails on divergence or when a monitored root loses positive definiteness.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome, CommandError> {
    let run = train(cfg, cfg.shampoo_config())?;
    let mut failure =
        run.diverged.as_ref().map(|d| format!("diverged at step {}: loss {}, {}", d.step, d.loss, d.reason));
    if failure.is_none() {
        if let Some(s) = run.refreshes.iter().find(|s| !(s.left > 0.0 && s.right > 0.0)) {
            failure =
                Some(format!("root lost definiteness at step {}: min eigenvalues {} / {}", s.step, s.left, s.right));
        }
    }
    Ok(Outcome { report: Report::new("train", cfg, train_table(&run)), failure })
}

pub const MEMREPORT_COLUMNS: [&str; 14] = [
    "shape",
    "mode",
    "stats_code",
    "stats_norm",
    "stats_diag",
    "stats_full",
    "roots_code",
    "roots_norm",
    "roots_diag",
    "roots_full",
    "code_bytes",
    "quantized_bytes",
    "total_bytes",
    "ratio_to_vq4",
];

/// Logical memory of a freshly built optimizer for one parameter shape.
pub fn shape_memory(shape: &[usize], cfg: &ShampooConfig) -> Result<MemoryLedger, CommandError> {
    let opt = Shampoo::new(&[shape], cfg.clone(), BaseOptimizer::new(qshampoo_core::BaseOptimizerKind::sgdm(), 0.0))?;
    let mut total = MemoryLedger::default();
    for st in opt.states() {
        total.merge(&memory_bytes(st));
    }
    Ok(total)
}

pub fn shape_name(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn cmd_memreport(cfg: &ExperimentConfig) -> Result<Outcome, CommandError> {
    let base = cfg.shampoo_config();
    let mut table = Table::new(&MEMREPORT_COLUMNS);
    for shape in &cfg.memreport.shapes {
        let vq = shape_memory(shape, &ShampooConfig { mode: StateMode::Vq4, ..base.clone() })?.total();
        for &mode in &cfg.memreport.modes {
            let m = shape_memory(shape, &ShampooConfig { mode: mode.into(), ..base.clone() })?;
            let p = m.parts();
            let ratio = if vq > 0 { Some(m.total() as f64 / vq as f64) } else { None };
            table.push(vec![
                shape_name(shape).into(),
                StateMode::from(mode).name().into(),
                m.stats.code_bytes.into(),
                m.stats.norm_bytes.into(),
                m.stats.diag_bytes.into(),
                m.stats.full_bytes.into(),
                m.roots.code_bytes.into(),
                m.roots.norm_bytes.into(),
                m.roots.diag_bytes.into(),
                m.roots.full_bytes.into(),
                p.code_bytes.into(),
                p.quantized_bytes().into(),
                m.total().into(),
                ratio.into(),
            ]);
        }
    }
    Ok(Outcome { report: Report::new("memreport", cfg, table), failure: None })
}

/// Parses `64x32` or `7`.
pub fn parse_shape(s: &str) -> Option<Vec<usize>> {
    let dims: Option<Vec<usize>> = s.split(['x', 'X']).map(|d| d.trim().parse().ok()).collect();
    dims.filter(|d| !d.is_empty() && !d.contains(&0))
}

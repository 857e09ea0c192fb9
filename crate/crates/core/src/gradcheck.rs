//! Central finite differences and the named gradient-check suites used by
//! `check-grad` and the acceptance tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::attention_forward;
use crate::error::{invalid, Result};
use crate::graph::{graph_backward, EpochSequence, GraphParams, GraphStructure, StftConfig, Taper};
use crate::layers::{
    bimap_backward, congruence, expm_backward, logeig_backward, reeig_backward, reeig_forward, BiMapWeight,
};
use crate::model::{batch_loss, batch_loss_and_grad, ModelConfig, ModelParams, PreparedTrial};
use crate::random::{gaussian_matrix, random_spd, random_stiefel, random_sym, spd_with_spectrum};
use crate::spd::{matrix_exp, matrix_log, SpdMatrix, SymMatrix};

/// Step used by every suite.
pub const FD_STEP: f64 = 1e-5;

/// Entrywise central differences of `f` at `x`.
pub fn central_difference(f: &dyn Fn(&DMatrix<f64>) -> f64, x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let mut probe = x.clone();
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let orig = probe[(i, j)];
        probe[(i, j)] = orig + h;
        let plus = f(&probe);
        probe[(i, j)] = orig - h;
        let minus = f(&probe);
        probe[(i, j)] = orig;
        (plus - minus) / (2.0 * h)
    })
}

/// Symmetric gradient of `f` restricted to symmetric inputs.
///
/// Off-diagonal pairs are perturbed together; the returned matrix `∇`
/// satisfies `df = ⟨∇, dS⟩` for symmetric `dS`.
pub fn symmetric_central_difference(
    f: &dyn Fn(&DMatrix<f64>) -> f64,
    x: &DMatrix<f64>,
    h: f64,
) -> DMatrix<f64> {
    let n = x.nrows();
    let mut probe = x.clone();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (a, b) = (probe[(i, j)], probe[(j, i)]);
            probe[(i, j)] = a + h;
            probe[(j, i)] = b + h;
            let plus = f(&probe);
            probe[(i, j)] = a - h;
            probe[(j, i)] = b - h;
            let minus = f(&probe);
            probe[(i, j)] = a;
            probe[(j, i)] = b;
            let d = (plus - minus) / (2.0 * h);
            if i == j {
                out[(i, i)] = d;
            } else {
                out[(i, j)] = 0.5 * d;
                out[(j, i)] = 0.5 * d;
            }
        }
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; absolute below 1e-10.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = a.norm().max(b.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Default tolerance on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// A backward rule checked against finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheck {
    LogEig,
    ReEig,
    ExpEig,
    BiMap,
    Attention,
    Graph,
    Model,
}

/// Hook applied to every analytic gradient before comparison. Identity in
/// normal runs; tests use it to inject faults.
pub type Tamper<'a> = &'a dyn Fn(DMatrix<f64>) -> DMatrix<f64>;

/// Outcome of one check over a range of seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub operation: &'static str,
    pub module: &'static str,
    pub seeds: u64,
    pub worst_error: f64,
    pub worst_seed: u64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn worst_of(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, |w, e| if e.is_nan() || e > w { e } else { w })
}

impl GradCheck {
    pub const ALL: [GradCheck; 7] = [
        GradCheck::LogEig,
        GradCheck::ReEig,
        GradCheck::ExpEig,
        GradCheck::BiMap,
        GradCheck::Attention,
        GradCheck::Graph,
        GradCheck::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCheck::LogEig => "logeig",
            GradCheck::ReEig => "reeig",
            GradCheck::ExpEig => "expeig",
            GradCheck::BiMap => "bimap",
            GradCheck::Attention => "attention",
            GradCheck::Graph => "graph",
            GradCheck::Model => "model",
        }
    }

    /// Module the checked rule belongs to, as accepted by `--module`.
    pub fn module(self) -> &'static str {
        match self {
            GradCheck::LogEig | GradCheck::ReEig | GradCheck::ExpEig | GradCheck::BiMap => "spd-layers",
            GradCheck::Attention => "manifold-attention",
            GradCheck::Graph => "dynamic-graph",
            GradCheck::Model => "pipeline",
        }
    }

    pub fn error(self, seed: u64) -> Result<f64> {
        self.error_with(seed, &|g| g)
    }

    /// Worst relative error over every checked input for one random case.
    pub fn error_with(self, seed: u64, tamper: Tamper<'_>) -> Result<f64> {
        match self {
            GradCheck::LogEig => logeig_error(seed, tamper),
            GradCheck::ReEig => reeig_error(seed, tamper),
            GradCheck::ExpEig => expeig_error(seed, tamper),
            GradCheck::BiMap => bimap_error(seed, tamper),
            GradCheck::Attention => attention_error(seed, tamper),
            GradCheck::Graph => graph_error(seed, tamper),
            GradCheck::Model => model_error(seed, tamper),
        }
    }

    pub fn run(self, seeds: u64, tolerance: f64) -> Result<CheckOutcome> {
        self.run_with(seeds, tolerance, &|g| g)
    }

    pub fn run_with(self, seeds: u64, tolerance: f64, tamper: Tamper<'_>) -> Result<CheckOutcome> {
        let mut worst = (0.0f64, 0u64);
        for seed in 0..seeds {
            let e = self.error_with(seed, tamper)?;
            if e.is_nan() || e > worst.0 {
                worst = (e, seed);
            }
        }
        Ok(CheckOutcome {
            operation: self.name(),
            module: self.module(),
            seeds,
            worst_error: worst.0,
            worst_seed: worst.1,
            tolerance,
            passed: worst.0 <= tolerance,
        })
    }
}

/// Checks whose module matches `module`, or all of them.
pub fn select(module: Option<&str>) -> Result<Vec<GradCheck>> {
    match module {
        None => Ok(GradCheck::ALL.to_vec()),
        Some(m) => {
            let picked: Vec<GradCheck> = GradCheck::ALL
                .into_iter()
                .filter(|c| c.module() == m || c.name() == m)
                .collect();
            if picked.is_empty() {
                return Err(invalid(format!("no gradient checks for module {m}")));
            }
            Ok(picked)
        }
    }
}

fn spectral_case(seed: u64) -> (ChaCha8Rng, SpdMatrix, SymMatrix) {
    let mut r = rng(seed);
    let n = 2 + (seed % 5) as usize;
    let s = random_spd(&mut r, n, 50.0);
    let g = random_sym(&mut r, n, 1.0);
    (r, s, g)
}

fn logeig_error(seed: u64, tamper: Tamper<'_>) -> Result<f64> {
    let (_, s, g) = spectral_case(seed);
    let analytic = tamper(logeig_backward(&s, &g)?.into_inner());
    let f = |x: &DMatrix<f64>| matrix_log(&SpdMatrix::new(x.clone()).unwrap()).unwrap().as_matrix().dot(g.as_matrix());
    let fd = symmetric_central_difference(&f, s.as_matrix(), FD_STEP);
    Ok(relative_error(&fd, &analytic))
}

fn reeig_error(seed: u64, tamper: Tamper<'_>) -> Result<f64> {
    let mut r = rng(seed);
    let n = 3 + (seed % 4) as usize;
    // Well separated spectrum with the threshold halfway between two
    // eigenvalues, so some are clamped and none sits on the kink.
    let spectrum: Vec<f64> = (0..n).map(|i| 0.2 * 1.8f64.powi(i as i32) * (1.0 + 0.1 * r.gen::<f64>())).collect();
    let cut = 1 + (seed as usize % (n - 1));
    let threshold = 0.5 * (spectrum[cut - 1] + spectrum[cut]);
    let s = spd_with_spectrum(&mut r, &spectrum);
    let g = random_sym(&mut r, n, 1.0);
    let analytic = tamper(reeig_backward(&s, threshold, &g)?.into_inner());
    let f = |x: &DMatrix<f64>| {
        reeig_forward(&SpdMatrix::new(x.clone()).unwrap(), threshold)
            .unwrap()
            .as_matrix()
            .dot(g.as_matrix())
    };
    let fd = symmetric_central_difference(&f, s.as_matrix(), FD_STEP);
    Ok(relative_error(&fd, &analytic))
}

fn expeig_error(seed: u64, tamper: Tamper<'_>) -> Result<f64> {
    let (mut r, _, g) = spectral_case(seed);
    let a = random_sym(&mut r, g.dim(), 0.7);
    let analytic = tamper(expm_backward(&a, &g)?.into_inner());
    let f = |x: &DMatrix<f64>| matrix_exp(&SymMatrix::new(x.clone()).unwrap()).unwrap().as_matrix().dot(g.as_matrix());
    let fd = symmetric_central_difference(&f, a.as_matrix(), FD_STEP);
    Ok(relative_error(&fd, &analytic))
}

fn bimap_error(seed: u64, tamper: Tamper<'_>) -> Result<f64> {
    let mut r = rng(seed);
    let d = 3 + (seed % 6) as usize;
    let l = 1 + (seed as usize / 6) % d;
    let w = BiMapWeight::random(&mut r, d, l);
    let s = random_spd(&mut r, d, 100.0);
    let g = random_sym(&mut r, l, 1.0);
    let grads = bimap_backward(&w, &s, &g)?;
    let wm = w.as_matrix().clone();
    let fw = |x: &DMatrix<f64>| congruence(x, s.as_matrix()).dot(g.as_matrix());
    let fs = |x: &DMatrix<f64>| congruence(&wm, x).dot(g.as_matrix());
    Ok(worst_of([
        relative_error(&central_difference(&fw, &wm, FD_STEP), &tamper(grads.wrt_weight)),
        relative_error(
            &symmetric_central_difference(&fs, s.as_matrix(), FD_STEP),
            &tamper(grads.wrt_input.into_inner()),
        ),
    ]))
}

fn attention_error(seed: u64, tamper: Tamper<'_>) -> Result<f64> {
    let mut r = rng(seed);
    let len = 1 + (seed % 3) as usize;
    let (n, d, l) = (3, 4, 2);
    let wq = random_stiefel(&mut r, n, l);
    let wk = random_stiefel(&mut r, d, l);
    let wv = random_stiefel(&mut r, d, l);
    let s: Vec<DMatrix<f64>> = (0..len).map(|_| random_spd(&mut r, d, 20.0).into_inner()).collect();
    let c: Vec<DMatrix<f64>> = (0..len).map(|_| random_spd(&mut r, n, 20.0).into_inner()).collect();
    let ups: Vec<DMatrix<f64>> = (0..len).map(|_| random_sym(&mut r, l, 1.0).into_inner()).collect();
    let (eps, tau) = (1e-4, 0.8);
    let probe = |wq: &DMatrix<f64>, wk: &DMatrix<f64>, wv: &DMatrix<f64>, s: &[DMatrix<f64>], c: &[DMatrix<f64>]| {
        let f = attention_forward(wq, wk, wv, s, c, eps, tau).unwrap();
        f.output.iter().zip(&ups).map(|(o, g)| o.as_matrix().dot(g)).sum::<f64>()
    };
    let g = attention_forward(&wq, &wk, &wv, &s, &c, eps, tau)?.backward(&ups)?;
    let mut errors = vec![
        relative_error(&central_difference(&|x| probe(x, &wk, &wv, &s, &c), &wq, FD_STEP), &tamper(g.wq)),
        relative_error(&central_difference(&|x| probe(&wq, x, &wv, &s, &c), &wk, FD_STEP), &tamper(g.wk)),
        relative_error(&central_difference(&|x| probe(&wq, &wk, x, &s, &c), &wv, FD_STEP), &tamper(g.wv)),
    ];
    for (t, (gs, gc)) in g.s.into_iter().zip(g.c).enumerate() {
        let fs = |x: &DMatrix<f64>| {
            let mut s2 = s.clone();
            s2[t] = x.clone();
            probe(&wq, &wk, &wv, &s2, &c)
        };
        let fc = |x: &DMatrix<f64>| {
            let mut c2 = c.clone();
            c2[t] = x.clone();
            probe(&wq, &wk, &wv, &s, &c2)
        };
        errors.push(relative_error(&symmetric_central_difference(&fs, &s[t], FD_STEP), &tamper(gs.into_inner())));
        errors.push(relative_error(&symmetric_central_difference(&fc, &c[t], FD_STEP), &tamper(gc.into_inner())));
    }
    Ok(worst_of(errors))
}

fn graph_tensors(p: &GraphParams) -> Vec<&DMatrix<f64>> {
    let (a, b, g) = (&p.node_gru, &p.edge_gru, &p.gnn);
    vec![
        &a.w_ih, &a.w_hh, &a.b_ih, &a.b_hh, &b.w_ih, &b.w_hh, &b.b_ih, &b.b_hh, &g.edge.w, &g.edge.b, &g.node.w,
        &g.node.b,
    ]
}

fn graph_tensors_mut(p: &mut GraphParams) -> Vec<&mut DMatrix<f64>> {
    let (a, b, g) = (&mut p.node_gru, &mut p.edge_gru, &mut p.gnn);
    vec![
        &mut a.w_ih,
        &mut a.w_hh,
        &mut a.b_ih,
        &mut a.b_hh,
        &mut b.w_ih,
        &mut b.w_hh,
        &mut b.b_ih,
        &mut b.b_hh,
        &mut g.edge.w,
        &mut g.edge.b,
        &mut g.node.w,
        &mut g.node.b,
    ]
}

fn graph_error(seed: u64, tamper: Tamper<'_>) -> Result<f64> {
    let mut r = rng(seed);
    let (n, t, m) = (3 + (seed % 3) as usize, 1 + (seed % 3) as usize, 3);
    let trial = EpochSequence::new((0..t).map(|_| gaussian_matrix(&mut r, n, 32)).collect())?;
    let stft = StftConfig {
        window: 8,
        hop: 8,
        taper: Taper::Hann,
    };
    let structure = GraphStructure::build(&trial, &stft, 2)?;
    let mut p = GraphParams::init(&mut r, 5, m);
    // Positive biases keep the ReLU units away from their kinks.
    p.gnn.edge.b.apply(|v| *v = v.abs() + 0.2);
    p.gnn.node.b.apply(|v| *v = v.abs() + 0.2);
    let eps = 1e-4;
    let up_c: Vec<SymMatrix> = (0..t).map(|_| random_sym(&mut r, n, 1.0)).collect();
    let up_u = gaussian_matrix(&mut r, n, m);
    let up_g = gaussian_matrix(&mut r, 1, m);
    let probe = |q: &GraphParams| {
        let f = q.forward(&structure, eps).unwrap();
        let mut v = f.node_out.dot(&up_u) + f.global.dot(&up_g);
        for (c, g) in f.c_seq.iter().zip(&up_c) {
            v += c.as_matrix().dot(g.as_matrix());
        }
        v
    };
    let grads = graph_backward(&p, &structure, eps, &up_c, &up_u, &up_g)?;
    let analytic = graph_tensors(&grads);
    let mut errors = Vec::new();
    for (slot, value) in graph_tensors(&p).into_iter().enumerate() {
        let f = |x: &DMatrix<f64>| {
            let mut q = p.clone();
            *graph_tensors_mut(&mut q).swap_remove(slot) = x.clone();
            probe(&q)
        };
        errors.push(relative_error(&central_difference(&f, value, FD_STEP), &tamper(analytic[slot].clone())));
    }
    Ok(worst_of(errors))
}

/// Full model on the tiny configuration, batch of two trials, every tensor.
fn model_error(seed: u64, tamper: Tamper<'_>) -> Result<f64> {
    let config = ModelConfig::tiny();
    let mut r = rng(seed);
    let params = ModelParams::init(&config, &mut r)?;
    let trials: Vec<PreparedTrial> = (0..2)
        .map(|_| {
            let epochs = (0..config.epochs)
                .map(|_| gaussian_matrix(&mut r, config.channels, config.samples))
                .collect();
            PreparedTrial::new(&config, EpochSequence::new(epochs)?)
        })
        .collect::<Result<_>>()?;
    let batch: Vec<&PreparedTrial> = trials.iter().collect();
    let labels = [0, 1];
    let (_, grads) = batch_loss_and_grad(&params, &config, &batch, &labels, None)?;
    let analytic: Vec<DMatrix<f64>> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut errors = Vec::new();
    for (idx, (_, value)) in params.tensors().into_iter().enumerate() {
        let f = |x: &DMatrix<f64>| {
            let mut p = params.clone();
            *p.tensors_mut().swap_remove(idx).1 = x.clone();
            batch_loss(&p, &config, &batch, &labels).map_or(f64::NAN, |l| l.total)
        };
        errors.push(relative_error(&central_difference(&f, value, FD_STEP), &tamper(analytic[idx].clone())));
    }
    Ok(worst_of(errors))
}

//! The end-to-end model: spatiotemporal encoder, graph path, manifold
//! cross-attention, tangent projection, classifier and the two losses.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionForward, AttentionWeights};
use crate::autodiff::{CustomOp, Gradients, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::graph::{EpochSequence, GnnParams, GraphParams, GruParams, GraphStructure, GraphVars, StftConfig, Taper};
use crate::layers::{spectral_backward, Clamp, Log};
use crate::nn::{uniform_matrix, Affine, AffineVars};
use crate::random::random_stiefel;
use crate::spd::{log_from_eig, sym_eig, vec_len, EigenPair, SymMatrix};

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub epochs: usize,
    pub samples: usize,
    pub num_classes: usize,
    pub spatial_filters: usize,
    pub temporal_kernel: usize,
    pub feature_dim: usize,
    pub bimap_dim: usize,
    pub gru_hidden: usize,
    pub proj_dim: usize,
    pub stft_window: usize,
    pub stft_hop: usize,
    pub tau_top: usize,
    pub eps: f64,
    pub reeig_threshold: f64,
    pub temperature: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl ModelConfig {
    /// Default architecture for data of the given shape.
    pub fn for_data(channels: usize, epochs: usize, samples: usize, num_classes: usize) -> Self {
        Self {
            channels,
            epochs,
            samples,
            num_classes,
            spatial_filters: 64,
            temporal_kernel: 31,
            feature_dim: 20,
            bimap_dim: 8,
            gru_hidden: 64,
            proj_dim: 32,
            stft_window: 32,
            stft_hop: 16,
            tau_top: 3,
            eps: 1e-4,
            reeig_threshold: 1e-4,
            temperature: 1.0,
            beta: 0.3,
            kappa: 0.1,
        }
    }

    /// Small model for gradient checks: 4 channels, 2 epochs, 16 samples, dims 4→2.
    pub fn tiny() -> Self {
        Self {
            spatial_filters: 4,
            temporal_kernel: 5,
            feature_dim: 4,
            bimap_dim: 2,
            gru_hidden: 3,
            proj_dim: 3,
            stft_window: 8,
            stft_hop: 4,
            tau_top: 2,
            ..Self::for_data(4, 2, 16, 2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("epochs", self.epochs),
            ("samples", self.samples),
            ("num_classes", self.num_classes),
            ("spatial_filters", self.spatial_filters),
            ("temporal_kernel", self.temporal_kernel),
            ("feature_dim", self.feature_dim),
            ("bimap_dim", self.bimap_dim),
            ("gru_hidden", self.gru_hidden),
            ("proj_dim", self.proj_dim),
            ("stft_window", self.stft_window),
            ("stft_hop", self.stft_hop),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.temporal_kernel > self.samples {
            return Err(invalid("temporal_kernel exceeds samples per epoch"));
        }
        if self.stft_window > self.samples {
            return Err(invalid("stft_window exceeds samples per epoch"));
        }
        if self.bimap_dim > self.feature_dim || self.bimap_dim > self.channels {
            return Err(invalid("bimap_dim must not exceed feature_dim or channels"));
        }
        if self.channels > 1 && (self.tau_top == 0 || self.tau_top >= self.channels) {
            return Err(invalid(format!("tau_top must be in [1, {}]", self.channels - 1)));
        }
        for (name, v) in [
            ("eps", self.eps),
            ("reeig_threshold", self.reeig_threshold),
            ("temperature", self.temperature),
            ("kappa", self.kappa),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        check_beta(self.beta)
    }

    pub fn tangent_dim(&self) -> usize {
        vec_len(self.bimap_dim)
    }

    /// Samples per epoch left after the valid temporal convolution.
    pub fn conv_len(&self) -> usize {
        self.samples - self.temporal_kernel + 1
    }

    pub fn bins(&self) -> usize {
        self.stft_window / 2 + 1
    }

    pub fn head_input_dim(&self) -> usize {
        self.gru_hidden.max(self.tangent_dim())
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            window: self.stft_window,
            hop: self.stft_hop,
            taper: Taper::Hann,
        }
    }
}

/// `0 ≤ β < 1`; zero switches the alignment loss off.
pub fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(invalid(format!("beta must be in [0, 1), got {beta}")));
    }
    Ok(())
}

/// All learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Spatial filters, `filters × channels`.
    pub spatial: DMatrix<f64>,
    /// Temporal filters, `features × (filters·kernel)` with column `h·K + k`.
    pub temporal: DMatrix<f64>,
    pub graph: GraphParams,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub classifier: Affine,
    pub head: Affine,
}

/// Names of the tensors constrained to the Stiefel manifold.
pub const STIEFEL_TENSORS: [&str; 3] = ["attention.wq", "attention.wk", "attention.wv"];

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (n, f, k, d, l) = (
            config.channels,
            config.spatial_filters,
            config.temporal_kernel,
            config.feature_dim,
            config.bimap_dim,
        );
        let spatial = uniform_matrix(rng, f, n, 1.0 / (n as f64).sqrt());
        let temporal = uniform_matrix(rng, d, f * k, 1.0 / ((f * k) as f64).sqrt());
        let graph = GraphParams::init(rng, config.bins(), config.gru_hidden);
        let wq = random_stiefel(rng, n, l);
        let wk = random_stiefel(rng, d, l);
        let wv = random_stiefel(rng, d, l);
        let classifier = Affine::init(rng, config.epochs * config.tangent_dim(), config.num_classes);
        let head = Affine::init(rng, config.head_input_dim(), config.proj_dim);
        Ok(Self {
            spatial,
            temporal,
            graph,
            wq,
            wk,
            wv,
            classifier,
            head,
        })
    }

    /// All-zero tensors with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (n, f, k, d, l, m) = (
            config.channels,
            config.spatial_filters,
            config.temporal_kernel,
            config.feature_dim,
            config.bimap_dim,
            config.gru_hidden,
        );
        Self {
            spatial: DMatrix::zeros(f, n),
            temporal: DMatrix::zeros(d, f * k),
            graph: GraphParams {
                node_gru: GruParams::zeros(config.bins(), m),
                edge_gru: GruParams::zeros(1, m),
                gnn: GnnParams::zeros(m),
            },
            wq: DMatrix::zeros(n, l),
            wk: DMatrix::zeros(d, l),
            wv: DMatrix::zeros(d, l),
            classifier: Affine::zeros(config.epochs * config.tangent_dim(), config.num_classes),
            head: Affine::zeros(config.head_input_dim(), config.proj_dim),
        }
    }

    /// Every tensor with its stable name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let g = &self.graph;
        vec![
            ("encoder.spatial", &self.spatial),
            ("encoder.temporal", &self.temporal),
            ("graph.node_gru.w_ih", &g.node_gru.w_ih),
            ("graph.node_gru.w_hh", &g.node_gru.w_hh),
            ("graph.node_gru.b_ih", &g.node_gru.b_ih),
            ("graph.node_gru.b_hh", &g.node_gru.b_hh),
            ("graph.edge_gru.w_ih", &g.edge_gru.w_ih),
            ("graph.edge_gru.w_hh", &g.edge_gru.w_hh),
            ("graph.edge_gru.b_ih", &g.edge_gru.b_ih),
            ("graph.edge_gru.b_hh", &g.edge_gru.b_hh),
            ("graph.gnn.edge.w", &g.gnn.edge.w),
            ("graph.gnn.edge.b", &g.gnn.edge.b),
            ("graph.gnn.node.w", &g.gnn.node.w),
            ("graph.gnn.node.b", &g.gnn.node.b),
            ("attention.wq", &self.wq),
            ("attention.wk", &self.wk),
            ("attention.wv", &self.wv),
            ("classifier.w", &self.classifier.w),
            ("classifier.b", &self.classifier.b),
            ("head.w", &self.head.w),
            ("head.b", &self.head.b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut DMatrix<f64>)> {
        let g = &mut self.graph;
        vec![
            ("encoder.spatial", &mut self.spatial),
            ("encoder.temporal", &mut self.temporal),
            ("graph.node_gru.w_ih", &mut g.node_gru.w_ih),
            ("graph.node_gru.w_hh", &mut g.node_gru.w_hh),
            ("graph.node_gru.b_ih", &mut g.node_gru.b_ih),
            ("graph.node_gru.b_hh", &mut g.node_gru.b_hh),
            ("graph.edge_gru.w_ih", &mut g.edge_gru.w_ih),
            ("graph.edge_gru.w_hh", &mut g.edge_gru.w_hh),
            ("graph.edge_gru.b_ih", &mut g.edge_gru.b_ih),
            ("graph.edge_gru.b_hh", &mut g.edge_gru.b_hh),
            ("graph.gnn.edge.w", &mut g.gnn.edge.w),
            ("graph.gnn.edge.b", &mut g.gnn.edge.b),
            ("graph.gnn.node.w", &mut g.gnn.node.w),
            ("graph.gnn.node.b", &mut g.gnn.node.b),
            ("attention.wq", &mut self.wq),
            ("attention.wk", &mut self.wk),
            ("attention.wv", &mut self.wv),
            ("classifier.w", &mut self.classifier.w),
            ("classifier.b", &mut self.classifier.b),
            ("head.w", &mut self.head.w),
            ("head.b", &mut self.head.b),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            *t *= factor;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Largest `‖WᵀW − I‖_F` over the Stiefel tensors.
    pub fn max_orthogonality_drift(&self) -> f64 {
        [&self.wq, &self.wk, &self.wv]
            .iter()
            .map(|w| crate::layers::orthogonality_drift(w))
            .fold(0.0, f64::max)
    }

    /// Checks tensor shapes against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let reference = ModelParams::zeros(config);
        for ((name, a), (_, b)) in self.tensors().into_iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(invalid(format!(
                    "tensor {name} is {}x{}, expected {}x{}",
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        Ok(())
    }
}

/// A trial with its frozen graph structure, ready for the model.
#[derive(Clone, Debug)]
pub struct PreparedTrial {
    pub trial: EpochSequence,
    pub structure: GraphStructure,
}

impl PreparedTrial {
    pub fn new(config: &ModelConfig, trial: EpochSequence) -> Result<Self> {
        if trial.channels() != config.channels
            || trial.num_epochs() != config.epochs
            || trial.samples() != config.samples
        {
            return Err(invalid(format!(
                "trial is {} channels x {} epochs x {} samples, model expects {} x {} x {}",
                trial.channels(),
                trial.num_epochs(),
                trial.samples(),
                config.channels,
                config.epochs,
                config.samples
            )));
        }
        let structure = GraphStructure::build(&trial, &config.stft(), config.tau_top)?;
        Ok(Self { trial, structure })
    }
}

/// Prepares many trials in parallel, preserving order.
pub fn prepare_all(config: &ModelConfig, trials: Vec<EpochSequence>) -> Result<Vec<PreparedTrial>> {
    trials
        .into_par_iter()
        .map(|t| PreparedTrial::new(config, t))
        .collect()
}

/// Effective kernel of the spatial conv followed by the temporal conv:
/// `E[o][c·K + k] = Σ_h T[o][h·K + k] · S[h][c]`.
pub fn compose_kernel(spatial: &DMatrix<f64>, temporal: &DMatrix<f64>, kernel: usize) -> DMatrix<f64> {
    let (f, n) = spatial.shape();
    let d = temporal.nrows();
    let mut out = DMatrix::zeros(d, n * kernel);
    for k in 0..kernel {
        let t_k = DMatrix::from_fn(d, f, |o, h| temporal[(o, h * kernel + k)]);
        let e_k = t_k * spatial;
        for c in 0..n {
            out.column_mut(c * kernel + k).copy_from(&e_k.column(c));
        }
    }
    out
}

/// Gradients of [`compose_kernel`] with respect to `(spatial, temporal)`.
pub fn compose_kernel_backward(
    spatial: &DMatrix<f64>,
    temporal: &DMatrix<f64>,
    kernel: usize,
    upstream: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (f, n) = spatial.shape();
    let d = temporal.nrows();
    let mut g_spatial = DMatrix::zeros(f, n);
    let mut g_temporal = DMatrix::zeros(d, f * kernel);
    for k in 0..kernel {
        let t_k = DMatrix::from_fn(d, f, |o, h| temporal[(o, h * kernel + k)]);
        let g_k = DMatrix::from_fn(d, n, |o, c| upstream[(o, c * kernel + k)]);
        g_spatial += t_k.tr_mul(&g_k);
        let gt_k = g_k * spatial.transpose();
        for h in 0..f {
            g_temporal.column_mut(h * kernel + k).copy_from(&gt_k.column(h));
        }
    }
    (g_spatial, g_temporal)
}

/// Sliding-window patches of all epochs: row `c·K + k`, column `t·L' + s`
/// holds `X_t[c][s + k]`.
pub fn epoch_patches(trial: &EpochSequence, kernel: usize) -> DMatrix<f64> {
    let (n, l) = (trial.channels(), trial.samples());
    let out_len = l - kernel + 1;
    let mut p = DMatrix::zeros(n * kernel, trial.num_epochs() * out_len);
    for (t, x) in trial.epochs().iter().enumerate() {
        for s in 0..out_len {
            let col = t * out_len + s;
            for c in 0..n {
                for k in 0..kernel {
                    p[(c * kernel + k, col)] = x[(c, s + k)];
                }
            }
        }
    }
    p
}

/// Signal-view SPD sequence: encoder features → per-epoch covariance + εI.
pub fn encode_trial(
    params: &ModelParams,
    config: &ModelConfig,
    trial: &EpochSequence,
) -> Result<Vec<crate::spd::SpdMatrix>> {
    if trial.channels() != params.spatial.ncols() {
        return Err(invalid(format!(
            "trial has {} channels, spatial filters expect {}",
            trial.channels(),
            params.spatial.ncols()
        )));
    }
    if trial.samples() < config.temporal_kernel {
        return Err(invalid("epoch shorter than the temporal kernel"));
    }
    let kernel = compose_kernel(&params.spatial, &params.temporal, config.temporal_kernel);
    let features = kernel * epoch_patches(trial, config.temporal_kernel);
    let len = trial.samples() - config.temporal_kernel + 1;
    (0..trial.num_epochs())
        .map(|t| crate::spd::covariance_spd(&features.columns(t * len, len).into_owned(), config.eps))
        .collect()
}

/// Every SPD matrix and attention map produced for one trial.
#[derive(Clone, Debug)]
pub struct TrialTrace {
    pub signal: Vec<DMatrix<f64>>,
    pub graph: Vec<DMatrix<f64>>,
    pub queries: Vec<DMatrix<f64>>,
    pub keys: Vec<DMatrix<f64>>,
    pub values: Vec<DMatrix<f64>>,
    pub attended: Vec<DMatrix<f64>>,
    pub rectified: Vec<DMatrix<f64>>,
    pub attention: DMatrix<f64>,
    pub tangent: DMatrix<f64>,
}

impl TrialTrace {
    pub fn spd_matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.signal
            .iter()
            .chain(&self.graph)
            .chain(&self.queries)
            .chain(&self.keys)
            .chain(&self.values)
            .chain(&self.attended)
            .chain(&self.rectified)
    }
}

/// Result of a forward pass on one trial.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: DVector<f64>,
    /// `T × l(l+1)/2`, one tangent vector per epoch.
    pub tangent: DMatrix<f64>,
    pub pooled_tangent: DVector<f64>,
    pub global: DVector<f64>,
    pub attention: AttentionWeights,
    pub trace: TrialTrace,
}

struct AttentionOp {
    forward: Arc<AttentionForward>,
}

impl CustomOp for AttentionOp {
    fn name(&self) -> &str {
        "manifold_attention"
    }

    fn backward(
        &self,
        _inputs: &[&DMatrix<f64>],
        _output: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> Result<Vec<Option<DMatrix<f64>>>> {
        let l = self.forward.output_dim();
        let ups: Vec<DMatrix<f64>> = (0..self.forward.len())
            .map(|t| upstream.rows(t * l, l).into_owned())
            .collect();
        let g = self.forward.backward(&ups)?;
        let mut out = vec![Some(g.wq), Some(g.wk), Some(g.wv)];
        out.extend(g.s.into_iter().map(|m| Some(m.into_inner())));
        out.extend(g.c.into_iter().map(|m| Some(m.into_inner())));
        Ok(out)
    }
}

/// ReEig, LogEig and `vec_upper` on a stack of `T` blocks of size `l×l`.
struct TangentOp {
    input: Vec<EigenPair>,
    rectified: Vec<EigenPair>,
    threshold: f64,
}

impl TangentOp {
    fn forward(stacked: &DMatrix<f64>, l: usize, threshold: f64) -> Result<(Self, DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let t_len = stacked.nrows() / l;
        let p = vec_len(l);
        let mut out = DMatrix::zeros(t_len, p);
        let mut input = Vec::with_capacity(t_len);
        let mut rectified = Vec::with_capacity(t_len);
        let mut rect_values = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let block = SymMatrix::from_matrix_unchecked(stacked.rows(t * l, l).into_owned());
            let eig = sym_eig(&block)?;
            let r = EigenPair {
                vectors: eig.vectors.clone(),
                values: eig.values.map(|v| v.max(threshold)),
            };
            rect_values.push(r.reconstruct().into_inner());
            let (log_r, _) = log_from_eig(&r)?;
            let v = crate::spd::vec_upper(&log_r);
            out.row_mut(t).copy_from(&v.transpose());
            input.push(eig);
            rectified.push(r);
        }
        Ok((Self { input, rectified, threshold }, out, rect_values))
    }
}

/// Adjoint of `vec_upper` for a symmetric argument.
fn vec_upper_adjoint(g: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                m[(i, i)] = g[k];
            } else {
                let v = g[k] / std::f64::consts::SQRT_2;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            k += 1;
        }
    }
    m
}

impl CustomOp for TangentOp {
    fn name(&self) -> &str {
        "reeig_logeig"
    }

    fn backward(
        &self,
        inputs: &[&DMatrix<f64>],
        _output: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> Result<Vec<Option<DMatrix<f64>>>> {
        let l = self.input[0].dim();
        let mut g = DMatrix::zeros(inputs[0].nrows(), l);
        for t in 0..self.input.len() {
            let row: Vec<f64> = upstream.row(t).iter().copied().collect();
            let g_log = vec_upper_adjoint(&row, l);
            let g_rect = spectral_backward(&self.rectified[t], &Log, &g_log);
            let g_in = spectral_backward(&self.input[t], &Clamp(self.threshold), g_rect.as_matrix());
            g.rows_mut(t * l, l).copy_from(g_in.as_matrix());
        }
        Ok(vec![Some(g)])
    }
}

/// Tape handles for the per-trial parameters. The encoder enters through its
/// composed kernel.
#[derive(Clone, Copy, Debug)]
struct TrialVars {
    kernel: Var,
    graph: GraphVars,
    wq: Var,
    wk: Var,
    wv: Var,
    classifier: AffineVars,
}

/// A recorded forward pass for one trial.
struct TrialRecord {
    tape: Tape,
    vars: TrialVars,
    logits: Var,
    pooled: Var,
    global: Var,
    trace: TrialTrace,
    attention: AttentionWeights,
}

fn record_trial(
    params: &ModelParams,
    config: &ModelConfig,
    kernel: &DMatrix<f64>,
    prepared: &PreparedTrial,
) -> Result<TrialRecord> {
    let mut tape = Tape::new();
    let vars = TrialVars {
        kernel: tape.leaf(kernel.clone()),
        graph: params.graph.record(&mut tape),
        wq: tape.leaf(params.wq.clone()),
        wk: tape.leaf(params.wk.clone()),
        wv: tape.leaf(params.wv.clone()),
        classifier: params.classifier.record(&mut tape),
    };
    let t_len = config.epochs;
    let l = config.bimap_dim;

    // Signal view.
    let patches = tape.constant(epoch_patches(&prepared.trial, config.temporal_kernel));
    let features = tape.matmul(vars.kernel, patches)?;
    let len = config.conv_len();
    let mut s_seq = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let y = tape.slice_cols(features, t * len, len)?;
        let centered = tape.center_rows(y);
        let gram = tape.gram(centered);
        let cov = tape.scale(gram, 1.0 / len as f64);
        s_seq.push(tape.add_identity(cov, config.eps)?);
    }

    // Graph view.
    let graph = vars.graph.record_forward(&mut tape, &prepared.structure, config.eps)?;

    // Cross-attention.
    let s_vals: Vec<DMatrix<f64>> = s_seq.iter().map(|&v| tape.value(v).clone()).collect();
    let c_vals: Vec<DMatrix<f64>> = graph.c_seq.iter().map(|&v| tape.value(v).clone()).collect();
    let fwd = Arc::new(attention_forward(
        &params.wq,
        &params.wk,
        &params.wv,
        &s_vals,
        &c_vals,
        config.eps,
        config.temperature,
    )?);
    let mut stacked = DMatrix::zeros(t_len * l, l);
    for (t, o) in fwd.output.iter().enumerate() {
        stacked.rows_mut(t * l, l).copy_from(o.as_matrix());
    }
    let mut inputs = vec![vars.wq, vars.wk, vars.wv];
    inputs.extend(&s_seq);
    inputs.extend(&graph.c_seq);
    let attended = tape.custom(&inputs, stacked, Box::new(AttentionOp { forward: fwd.clone() }));

    // Tangent projection and heads.
    let (op, tangent_value, rectified) = TangentOp::forward(tape.value(attended), l, config.reeig_threshold)?;
    let tangent = tape.custom(&[attended], tangent_value, Box::new(op));
    let flat = tape.reshape(tangent, 1, t_len * config.tangent_dim())?;
    let logits = vars.classifier.apply(&mut tape, flat)?;
    let pooled = tape.mean_rows(tangent);

    let trace = TrialTrace {
        signal: s_vals,
        graph: c_vals,
        queries: fwd.queries.iter().map(|m| m.as_matrix().clone()).collect(),
        keys: fwd.keys.iter().map(|m| m.as_matrix().clone()).collect(),
        values: fwd.values.iter().map(|m| m.as_matrix().clone()).collect(),
        attended: fwd.output.iter().map(|m| m.as_matrix().clone()).collect(),
        rectified,
        attention: fwd.attention.weights.clone(),
        tangent: tape.value(tangent).clone(),
    };
    Ok(TrialRecord {
        tape,
        vars,
        logits,
        pooled,
        global: graph.g,
        trace,
        attention: fwd.attention.clone(),
    })
}

/// Full forward pass on one trial.
pub fn forward(params: &ModelParams, config: &ModelConfig, prepared: &PreparedTrial) -> Result<ModelOutput> {
    let kernel = compose_kernel(&params.spatial, &params.temporal, config.temporal_kernel);
    let rec = record_trial(params, config, &kernel, prepared)?;
    let row = |v: Var| DVector::from_iterator(rec.tape.value(v).len(), rec.tape.value(v).iter().copied());
    Ok(ModelOutput {
        logits: row(rec.logits),
        tangent: rec.trace.tangent.clone(),
        pooled_tangent: row(rec.pooled),
        global: row(rec.global),
        attention: rec.attention,
        trace: rec.trace,
    })
}

/// Forward passes over many trials in parallel, in input order.
pub fn forward_all(
    params: &ModelParams,
    config: &ModelConfig,
    trials: &[&PreparedTrial],
) -> Result<Vec<ModelOutput>> {
    trials.par_iter().map(|p| forward(params, config, p)).collect()
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &DVector<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("cross_entropy: non-finite logits"));
    }
    let max = logits.max();
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

fn pad_columns(m: &DMatrix<f64>, width: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), width);
    out.columns_mut(0, m.ncols()).copy_from(m);
    out
}

/// Contrastive alignment between graph features and pooled tangent
/// embeddings through the shared head. Inputs narrower than the head are
/// zero-padded.
pub fn geotop_loss(g_batch: &DMatrix<f64>, u_batch: &DMatrix<f64>, head: &Affine, kappa: f64) -> Result<f64> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(invalid(format!("kappa must be positive, got {kappa}")));
    }
    let b = g_batch.nrows();
    if b == 0 || u_batch.nrows() != b {
        return Err(invalid("geotop_loss: batches must be non-empty and of equal size"));
    }
    let width = head.input_dim();
    if g_batch.ncols() > width || u_batch.ncols() > width {
        return Err(invalid("geotop_loss: embedding wider than the projection head"));
    }
    let normalize = |m: DMatrix<f64>| {
        let mut m = m;
        for (i, mut row) in m.row_iter_mut().enumerate() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            } else {
                log::warn!("geotop_loss: projected row {i} has zero norm; cosine treated as 0");
            }
        }
        m
    };
    let zg = normalize(head.forward(&pad_columns(g_batch, width))?);
    let zu = normalize(head.forward(&pad_columns(u_batch, width))?);
    let sim = &zg * zu.transpose() / kappa;
    let mut total = 0.0;
    for i in 0..b {
        let row = sim.row(i);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - sim[(i, i)];
    }
    Ok(total / b as f64)
}

/// `ce + β·geotop`.
pub fn total_loss(ce: f64, geotop: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(ce + beta * geotop)
}

/// Batch-mean loss and its components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub geotop: f64,
}

struct LossVars {
    total: Var,
    ce: Var,
    geotop: Var,
}

fn record_losses(
    tape: &mut Tape,
    logits: &[Var],
    globals: &[Var],
    pooled: &[Var],
    head: AffineVars,
    labels: &[usize],
    config: &ModelConfig,
) -> Result<LossVars> {
    let b = logits.len();
    let stacked = tape.concat_rows(logits)?;
    let logp = tape.log_softmax_rows(stacked);
    let picks: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let picked = tape.pick(logp, &picks)?;
    let mean = tape.mean(picked);
    let ce = tape.scale(mean, -1.0);

    let width = config.head_input_dim();
    let pad = |tape: &mut Tape, rows: &[Var]| -> Result<Var> {
        let m = tape.concat_rows(rows)?;
        let cols = tape.shape(m).1;
        if cols == width {
            return Ok(m);
        }
        let zeros = tape.constant(DMatrix::zeros(b, width - cols));
        tape.concat_cols(&[m, zeros])
    };
    let g = pad(tape, globals)?;
    let u = pad(tape, pooled)?;
    let zg = head.apply(tape, g)?;
    let zu = head.apply(tape, u)?;
    let ng = tape.normalize_rows(zg);
    let nu = tape.normalize_rows(zu);
    let sim = tape.matmul_nt(ng, nu)?;
    let scaled = tape.scale(sim, 1.0 / config.kappa);
    let logq = tape.log_softmax_rows(scaled);
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let matched = tape.pick(logq, &diag)?;
    let mean = tape.mean(matched);
    let geotop = tape.scale(mean, -1.0);

    let weighted = tape.scale(geotop, config.beta);
    let total = tape.add(ce, weighted)?;
    Ok(LossVars { total, ce, geotop })
}

fn check_batch(config: &ModelConfig, batch: &[&PreparedTrial], labels: &[usize]) -> Result<()> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(invalid("batch must be non-empty with one label per trial"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= config.num_classes) {
        return Err(invalid(format!("label {y} out of range for {} classes", config.num_classes)));
    }
    Ok(())
}

fn finite_or_fail(parts: &LossParts) -> Result<()> {
    for (name, v) in [("cross-entropy", parts.ce), ("geotop", parts.geotop), ("total", parts.total)] {
        if !v.is_finite() {
            return Err(Error::NumericalFailure(format!("{name} loss is {v}")));
        }
    }
    Ok(())
}

/// Forward-only batch loss.
pub fn batch_loss(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[&PreparedTrial],
    labels: &[usize],
) -> Result<LossParts> {
    check_batch(config, batch, labels)?;
    let outputs = forward_all(params, config, batch)?;
    let row = |v: &DVector<f64>| DMatrix::from_row_slice(1, v.len(), v.as_slice());
    let ce = outputs
        .iter()
        .zip(labels)
        .map(|(o, &y)| cross_entropy(&o.logits, y))
        .sum::<Result<f64>>()?
        / batch.len() as f64;
    let g_rows: Vec<DMatrix<f64>> = outputs.iter().map(|o| row(&o.global)).collect();
    let u_rows: Vec<DMatrix<f64>> = outputs.iter().map(|o| row(&o.pooled_tangent)).collect();
    let stack = |rows: &[DMatrix<f64>]| {
        DMatrix::from_fn(rows.len(), rows[0].ncols(), |i, j| rows[i][(0, j)])
    };
    let geotop = geotop_loss(&stack(&g_rows), &stack(&u_rows), &params.head, config.kappa)?;
    let parts = LossParts {
        total: total_loss(ce, geotop, config.beta)?,
        ce,
        geotop,
    };
    finite_or_fail(&parts)?;
    Ok(parts)
}

/// Batch-mean loss and its gradient with respect to every parameter.
/// Per-trial tapes run in parallel; gradients are reduced in batch order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[&PreparedTrial],
    labels: &[usize],
    mut observer: Option<&mut dyn FnMut(&TrialTrace)>,
) -> Result<(LossParts, ModelParams)> {
    check_batch(config, batch, labels)?;
    let kernel = compose_kernel(&params.spatial, &params.temporal, config.temporal_kernel);
    let records: Vec<TrialRecord> = batch
        .par_iter()
        .map(|p| record_trial(params, config, &kernel, p))
        .collect::<Result<_>>()?;
    if let Some(obs) = observer.as_mut() {
        for r in &records {
            obs(&r.trace);
        }
    }

    let mut tape = Tape::new();
    let head = params.head.record(&mut tape);
    let leaf_rows = |tape: &mut Tape, pick: fn(&TrialRecord) -> Var| -> Vec<Var> {
        records.iter().map(|r| tape.leaf(r.tape.value(pick(r)).clone())).collect()
    };
    let logits = leaf_rows(&mut tape, |r| r.logits);
    let globals = leaf_rows(&mut tape, |r| r.global);
    let pooled = leaf_rows(&mut tape, |r| r.pooled);
    let loss = record_losses(&mut tape, &logits, &globals, &pooled, head, labels, config)?;
    let parts = LossParts {
        total: tape.value(loss.total)[(0, 0)],
        ce: tape.value(loss.ce)[(0, 0)],
        geotop: tape.value(loss.geotop)[(0, 0)],
    };
    finite_or_fail(&parts)?;
    let top = tape.backward(loss.total)?;

    let per_trial: Vec<TrialGrads> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let seeds = vec![
                (r.logits, top.wrt(logits[i])),
                (r.global, top.wrt(globals[i])),
                (r.pooled, top.wrt(pooled[i])),
            ];
            let g = r.tape.backward_from(&seeds)?;
            Ok(TrialGrads::collect(&r.vars, &g))
        })
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    let mut g_kernel = DMatrix::zeros(kernel.nrows(), kernel.ncols());
    for tg in &per_trial {
        g_kernel += &tg.kernel;
        grads.graph_add(&tg.graph);
        grads.wq += &tg.wq;
        grads.wk += &tg.wk;
        grads.wv += &tg.wv;
        grads.classifier.w += &tg.classifier.w;
        grads.classifier.b += &tg.classifier.b;
    }
    let (gs, gt) = compose_kernel_backward(&params.spatial, &params.temporal, config.temporal_kernel, &g_kernel);
    grads.spatial = gs;
    grads.temporal = gt;
    grads.head.w = top.wrt(head.w);
    grads.head.b = top.wrt(head.b);
    Ok((parts, grads))
}

struct TrialGrads {
    kernel: DMatrix<f64>,
    graph: GraphParams,
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
    classifier: Affine,
}

impl TrialGrads {
    fn collect(vars: &TrialVars, g: &Gradients) -> Self {
        Self {
            kernel: g.wrt(vars.kernel),
            graph: vars.graph.collect(g),
            wq: g.wrt(vars.wq),
            wk: g.wrt(vars.wk),
            wv: g.wrt(vars.wv),
            classifier: Affine {
                w: g.wrt(vars.classifier.w),
                b: g.wrt(vars.classifier.b),
            },
        }
    }
}

impl ModelParams {
    fn graph_add(&mut self, g: &GraphParams) {
        let pairs = [
            (&mut self.graph.node_gru.w_ih, &g.node_gru.w_ih),
            (&mut self.graph.node_gru.w_hh, &g.node_gru.w_hh),
            (&mut self.graph.node_gru.b_ih, &g.node_gru.b_ih),
            (&mut self.graph.node_gru.b_hh, &g.node_gru.b_hh),
            (&mut self.graph.edge_gru.w_ih, &g.edge_gru.w_ih),
            (&mut self.graph.edge_gru.w_hh, &g.edge_gru.w_hh),
            (&mut self.graph.edge_gru.b_ih, &g.edge_gru.b_ih),
            (&mut self.graph.edge_gru.b_hh, &g.edge_gru.b_hh),
            (&mut self.graph.gnn.edge.w, &g.gnn.edge.w),
            (&mut self.graph.gnn.edge.b, &g.gnn.edge.b),
            (&mut self.graph.gnn.node.w, &g.gnn.node.w),
            (&mut self.graph.gnn.node.b, &g.gnn.node.b),
        ];
        for (a, b) in pairs {
            *a += b;
        }
    }
}

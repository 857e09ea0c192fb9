//! Dynamic functional-connectivity graph of a trial.
//!
//! Log-spectral STFT features give per-epoch cosine adjacency matrices, kept
//! sparse by per-row top-k selection. Node and edge attribute sequences are
//! encoded by GRUs, one round of message passing produces node outputs and a
//! global feature, and per-epoch node hiddens are lifted to SPD matrices.
//! The adjacency structure depends only on the data and stays frozen.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{uniform_matrix, Affine, AffineVars};
use crate::spd::{SpdMatrix, SymMatrix};

/// Default STFT frame length in samples.
pub const DEFAULT_WINDOW: usize = 32;
/// Default STFT hop in samples.
pub const DEFAULT_HOP: usize = 16;
/// Default number of strongest neighbours kept per node.
pub const DEFAULT_TAU_TOP: usize = 3;
/// Default GRU hidden size.
pub const DEFAULT_HIDDEN: usize = 64;

/// One trial: `T` epochs, each an `N×L` block of channel samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSequence {
    epochs: Vec<DMatrix<f64>>,
}

impl EpochSequence {
    pub fn new(epochs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = epochs.first().ok_or_else(|| invalid("trial must contain at least one epoch"))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(invalid("epochs must have at least one channel and one sample"));
        }
        if epochs.iter().any(|e| e.shape() != shape) {
            return Err(invalid("all epochs of a trial must share one shape"));
        }
        if epochs.iter().any(|e| e.iter().any(|v| !v.is_finite())) {
            return Err(invalid("trial contains non-finite samples"));
        }
        Ok(Self { epochs })
    }

    pub fn channels(&self) -> usize {
        self.epochs[0].nrows()
    }

    pub fn num_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn samples(&self) -> usize {
        self.epochs[0].ncols()
    }

    pub fn epoch(&self, t: usize) -> &DMatrix<f64> {
        &self.epochs[t]
    }

    pub fn epochs(&self) -> &[DMatrix<f64>] {
        &self.epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Taper {
    Hann,
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub taper: Taper,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
            taper: Taper::Hann,
        }
    }
}

/// `ln(1 + |X|)` spectra, one `N×F` matrix per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFeatures {
    pub values: Vec<DMatrix<f64>>,
}

impl SpectralFeatures {
    pub fn channels(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn num_epochs(&self) -> usize {
        self.values.len()
    }

    pub fn bins(&self) -> usize {
        self.values[0].ncols()
    }
}

fn taper_weights(taper: Taper, window: usize) -> Vec<f64> {
    match taper {
        Taper::Rectangular => vec![1.0; window],
        Taper::Hann => (0..window)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos())
            .collect(),
    }
}

/// Frame-averaged log-magnitude spectra; `F = window/2 + 1` bins.
pub fn stft_features(trial: &EpochSequence, config: &StftConfig) -> Result<SpectralFeatures> {
    let (window, hop) = (config.window, config.hop);
    if window == 0 || window > trial.samples() {
        return Err(invalid(format!(
            "STFT window {window} must be in [1, {}]",
            trial.samples()
        )));
    }
    if hop == 0 {
        return Err(invalid("STFT hop must be at least 1"));
    }
    let bins = window / 2 + 1;
    let taper = taper_weights(config.taper, window);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(window);
    let starts: Vec<usize> = (0..=trial.samples() - window).step_by(hop).collect();
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let values = trial
        .epochs()
        .iter()
        .map(|epoch| {
            let mut out: DMatrix<f64> = DMatrix::zeros(epoch.nrows(), bins);
            for ch in 0..epoch.nrows() {
                for &s in &starts {
                    for (n, slot) in buf.iter_mut().enumerate() {
                        *slot = Complex::new(epoch[(ch, s + n)] * taper[n], 0.0);
                    }
                    fft.process(&mut buf);
                    for k in 0..bins {
                        out[(ch, k)] += buf[k].norm();
                    }
                }
            }
            let frames = starts.len() as f64;
            out.map(|m| (m / frames).ln_1p())
        })
        .collect();
    Ok(SpectralFeatures { values })
}

fn cosine_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.row_iter().map(|r| r.norm()).collect();
    for (i, &nr) in norms.iter().enumerate() {
        if nr == 0.0 {
            log::warn!("adjacency: channel {i} has a zero spectral vector; its similarities are set to 0");
        }
    }
    DMatrix::from_fn(n, n, |i, j| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            x.row(i).dot(&x.row(j)) / (norms[i] * norms[j])
        }
    })
}

/// Cosine adjacency of epoch `t`, sparsified to the `tau_top` strongest
/// neighbours per row (ties to the lower index) and symmetrized by union.
pub fn build_adjacency(features: &SpectralFeatures, t: usize, tau_top: usize) -> Result<DMatrix<f64>> {
    if t >= features.num_epochs() {
        return Err(invalid(format!("epoch {t} out of {}", features.num_epochs())));
    }
    let n = features.channels();
    if tau_top == 0 || tau_top + 1 > n {
        return Err(invalid(format!("tau_top must be in [1, {}], got {tau_top}", n.saturating_sub(1))));
    }
    let sim = cosine_matrix(&features.values[t]);
    let mut keep = vec![vec![false; n]; n];
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cand.sort_by(|&a, &b| sim[(i, b)].total_cmp(&sim[(i, a)]).then(a.cmp(&b)));
        for &j in cand.iter().take(tau_top) {
            keep[i][j] = true;
            keep[j][i] = true;
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| if i != j && keep[i][j] { sim[(i, j)] } else { 0.0 }))
}

/// Gate-stacked GRU weights, column blocks in order (reset, update, candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_ih: DMatrix<f64>,
    pub w_hh: DMatrix<f64>,
    pub b_ih: DMatrix<f64>,
    pub b_hh: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_bias(mut m: DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        row += b;
    }
    m
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: DMatrix::zeros(input, 3 * hidden),
            w_hh: DMatrix::zeros(hidden, 3 * hidden),
            b_ih: DMatrix::zeros(1, 3 * hidden),
            b_hh: DMatrix::zeros(1, 3 * hidden),
        }
    }

    /// Uniform in `±1/√hidden`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: uniform_matrix(rng, input, 3 * hidden, bound),
            w_hh: uniform_matrix(rng, hidden, 3 * hidden, bound),
            b_ih: uniform_matrix(rng, 1, 3 * hidden, bound),
            b_hh: uniform_matrix(rng, 1, 3 * hidden, bound),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.nrows()
    }

    fn validate(&self) -> Result<()> {
        let m = self.hidden_dim();
        if m == 0
            || self.w_hh.ncols() != 3 * m
            || self.w_ih.ncols() != 3 * m
            || self.b_ih.shape() != (1, 3 * m)
            || self.b_hh.shape() != (1, 3 * m)
        {
            return Err(invalid("GRU parameter shapes are inconsistent"));
        }
        Ok(())
    }

    /// One step for a batch of rows: `x: B×input`, `h: B×m`.
    pub fn step(&self, x: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        let m = self.hidden_dim();
        if x.ncols() != self.input_dim() || h.ncols() != m || x.nrows() != h.nrows() {
            return Err(invalid(format!(
                "GRU step: input {}x{} / hidden {}x{} do not match params ({} -> {m})",
                x.nrows(),
                x.ncols(),
                h.nrows(),
                h.ncols(),
                self.input_dim()
            )));
        }
        let gi = add_bias(x * &self.w_ih, &self.b_ih);
        let gh = add_bias(h * &self.w_hh, &self.b_hh);
        Ok(DMatrix::from_fn(h.nrows(), m, |b, k| {
            let r = sigmoid(gi[(b, k)] + gh[(b, k)]);
            let z = sigmoid(gi[(b, m + k)] + gh[(b, m + k)]);
            let n = (gi[(b, 2 * m + k)] + r * gh[(b, 2 * m + k)]).tanh();
            n + z * (h[(b, k)] - n)
        }))
    }

    /// Runs the recursion over `inputs` (each `B×input`) from a zero state.
    /// Returns every step's hidden; the last one is the final state.
    pub fn run(&self, rows: usize, inputs: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        let mut h = DMatrix::zeros(rows, self.hidden_dim());
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            h = self.step(x, &h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn record(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            w_ih: tape.leaf(self.w_ih.clone()),
            w_hh: tape.leaf(self.w_hh.clone()),
            b_ih: tape.leaf(self.b_ih.clone()),
            b_hh: tape.leaf(self.b_hh.clone()),
        }
    }
}

impl GruVars {
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let m = tape.shape(self.w_hh).0;
        let gi = tape.linear(x, self.w_ih, Some(self.b_ih))?;
        let gh = tape.linear(h, self.w_hh, Some(self.b_hh))?;
        let (gi_r, gh_r) = (tape.slice_cols(gi, 0, m)?, tape.slice_cols(gh, 0, m)?);
        let (gi_z, gh_z) = (tape.slice_cols(gi, m, m)?, tape.slice_cols(gh, m, m)?);
        let (gi_n, gh_n) = (tape.slice_cols(gi, 2 * m, m)?, tape.slice_cols(gh, 2 * m, m)?);
        let r_pre = tape.add(gi_r, gh_r)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(gi_z, gh_z)?;
        let z = tape.sigmoid(z_pre);
        let rn = tape.mul(r, gh_n)?;
        let n_pre = tape.add(gi_n, rn)?;
        let n = tape.tanh(n_pre);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    pub fn run(&self, tape: &mut Tape, rows: usize, inputs: &[Var]) -> Result<Vec<Var>> {
        let m = tape.shape(self.w_hh).0;
        let mut h = tape.constant(DMatrix::zeros(rows, m));
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(tape, x, h)?;
            out.push(h);
        }
        Ok(out)
    }

    pub fn collect(&self, grads: &Gradients) -> GruParams {
        GruParams {
            w_ih: grads.wrt(self.w_ih),
            w_hh: grads.wrt(self.w_hh),
            b_ih: grads.wrt(self.b_ih),
            b_hh: grads.wrt(self.b_hh),
        }
    }
}

/// Single-sequence GRU: returns the final hidden and the per-step hiddens.
pub fn gru_sequence(
    params: &GruParams,
    inputs: &[nalgebra::DVector<f64>],
) -> Result<(nalgebra::DVector<f64>, Vec<nalgebra::DVector<f64>>)> {
    params.validate()?;
    let rows: Vec<DMatrix<f64>> = inputs
        .iter()
        .map(|x| DMatrix::from_row_slice(1, x.len(), x.as_slice()))
        .collect();
    let steps: Vec<nalgebra::DVector<f64>> = params
        .run(1, &rows)?
        .into_iter()
        .map(|h| h.row(0).transpose())
        .collect();
    let last = steps
        .last()
        .cloned()
        .unwrap_or_else(|| nalgebra::DVector::zeros(params.hidden_dim()));
    Ok((last, steps))
}

/// Edge map `φ_e` (m→m) and node map `φ_n` (2m→m).
#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub edge: Affine,
    pub node: Affine,
}

impl GnnParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden: usize) -> Self {
        Self {
            edge: Affine::init(rng, hidden, hidden),
            node: Affine::init(rng, 2 * hidden, hidden),
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            edge: Affine::zeros(hidden, hidden),
            node: Affine::zeros(2 * hidden, hidden),
        }
    }
}

/// Final edge hiddens for the kept undirected pairs `i < j`, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeEmbeddings {
    pub pairs: Vec<(usize, usize)>,
    pub hidden: DMatrix<f64>,
}

/// One message-passing round. Returns node outputs `u` (N×m) and the
/// global mean `g` (1×m).
pub fn gnn_aggregate(
    params: &GnnParams,
    node_hidden: &DMatrix<f64>,
    edges: &EdgeEmbeddings,
    adjacency: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = node_hidden.shape();
    if adjacency.shape() != (n, n) || edges.hidden.nrows() != edges.pairs.len() {
        return Err(invalid("gnn_aggregate: inconsistent dimensions"));
    }
    if params.edge.input_dim() != m || params.node.input_dim() != 2 * m || params.node.output_dim() != m {
        return Err(invalid("gnn_aggregate: GNN maps do not match the hidden size"));
    }
    if !edges.pairs.is_empty() && edges.hidden.ncols() != m {
        return Err(invalid("gnn_aggregate: edge hidden size differs from node hidden size"));
    }
    if edges.pairs.iter().any(|&(i, j)| i >= n || j >= n || i == j) {
        return Err(invalid("gnn_aggregate: edge endpoint out of range"));
    }
    let mut agg = DMatrix::zeros(n, m);
    if !edges.pairs.is_empty() {
        let phi = params.edge.forward(&edges.hidden)?.map(|v| v.max(0.0));
        for (e, &(i, j)) in edges.pairs.iter().enumerate() {
            for (dst, src) in [(i, j), (j, i)] {
                let w = adjacency[(dst, src)];
                for k in 0..m {
                    agg[(dst, k)] += w * phi[(e, k)] * node_hidden[(src, k)];
                }
            }
        }
    }
    let mut cat = DMatrix::zeros(n, 2 * m);
    cat.view_mut((0, 0), (n, m)).copy_from(node_hidden);
    cat.view_mut((0, m), (n, m)).copy_from(&agg);
    let u = params.node.forward(&cat)?.map(|v| v.max(0.0));
    let g = DMatrix::from_fn(1, m, |_, k| u.column(k).mean());
    Ok((u, g))
}

/// `C = (1/m)·H̄ H̄ᵀ + eps·I` with `H̄` the row-centered hiddens.
pub fn graph_spd(node_hidden: &DMatrix<f64>, eps: f64) -> Result<SpdMatrix> {
    let (n, m) = node_hidden.shape();
    if m == 0 || n == 0 {
        return Err(invalid("graph_spd: empty hidden matrix"));
    }
    if !(eps > 0.0) {
        return Err(invalid("graph_spd: eps must be positive"));
    }
    let mut h = node_hidden.clone();
    for mut row in h.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let mut c = &h * h.transpose() / m as f64;
    for i in 0..n {
        c[(i, i)] += eps;
    }
    Ok(SpdMatrix::from_sym_unchecked(SymMatrix::from_matrix_unchecked(c)))
}

/// Data-dependent part of the graph path, computed once per trial.
#[derive(Clone, Debug)]
pub struct GraphStructure {
    pub features: SpectralFeatures,
    pub adjacency: Vec<DMatrix<f64>>,
    /// Epoch-averaged adjacency used to weight messages.
    pub mean_adjacency: DMatrix<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// Edge GRU inputs, one `E×1` column per epoch.
    pub edge_inputs: Vec<DMatrix<f64>>,
}

impl GraphStructure {
    pub fn build(trial: &EpochSequence, stft: &StftConfig, tau_top: usize) -> Result<Self> {
        let features = stft_features(trial, stft)?;
        let n = features.channels();
        // A single channel has no neighbours to keep.
        let adjacency = if n == 1 {
            vec![DMatrix::zeros(1, 1); features.num_epochs()]
        } else {
            (0..features.num_epochs())
                .map(|t| build_adjacency(&features, t, tau_top))
                .collect::<Result<Vec<_>>>()?
        };
        let mut mean_adjacency = DMatrix::zeros(n, n);
        for a in &adjacency {
            mean_adjacency += a;
        }
        mean_adjacency /= adjacency.len() as f64;
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| adjacency.iter().any(|a| a[(i, j)] != 0.0))
            .collect();
        let edge_inputs = adjacency
            .iter()
            .map(|a| DMatrix::from_iterator(pairs.len(), 1, pairs.iter().map(|&p| a[p])))
            .collect();
        Ok(Self {
            features,
            adjacency,
            mean_adjacency,
            pairs,
            edge_inputs,
        })
    }

    pub fn channels(&self) -> usize {
        self.features.channels()
    }

    pub fn num_epochs(&self) -> usize {
        self.features.num_epochs()
    }
}

/// Learnable part of the graph path.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    pub node_gru: GruParams,
    pub edge_gru: GruParams,
    pub gnn: GnnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub node_gru: GruVars,
    pub edge_gru: GruVars,
    pub edge_map: AffineVars,
    pub node_map: AffineVars,
}

/// Tape outputs of the graph path.
#[derive(Clone, Debug)]
pub struct GraphNodes {
    pub c_seq: Vec<Var>,
    pub u: Var,
    pub g: Var,
}

/// Everything the graph path produces for one trial.
#[derive(Clone, Debug)]
pub struct DynamicGraphSequence {
    pub adjacency: Vec<DMatrix<f64>>,
    pub node_hidden: Vec<DMatrix<f64>>,
    pub edges: Vec<EdgeEmbeddings>,
    pub node_out: DMatrix<f64>,
    pub global: DMatrix<f64>,
    pub c_seq: Vec<SpdMatrix>,
}

impl GraphParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, bins: usize, hidden: usize) -> Self {
        Self {
            node_gru: GruParams::init(rng, bins, hidden),
            edge_gru: GruParams::init(rng, 1, hidden),
            gnn: GnnParams::init(rng, hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.node_gru.hidden_dim()
    }

    pub fn record(&self, tape: &mut Tape) -> GraphVars {
        GraphVars {
            node_gru: self.node_gru.record(tape),
            edge_gru: self.edge_gru.record(tape),
            edge_map: self.gnn.edge.record(tape),
            node_map: self.gnn.node.record(tape),
        }
    }

    pub fn forward(&self, structure: &GraphStructure, eps: f64) -> Result<DynamicGraphSequence> {
        let n = structure.channels();
        let node_hidden = self.node_gru.run(n, &structure.features.values)?;
        let edge_steps = if structure.pairs.is_empty() {
            vec![DMatrix::zeros(0, self.hidden_dim()); structure.num_epochs()]
        } else {
            self.edge_gru.run(structure.pairs.len(), &structure.edge_inputs)?
        };
        let edges: Vec<EdgeEmbeddings> = edge_steps
            .into_iter()
            .map(|hidden| EdgeEmbeddings {
                pairs: structure.pairs.clone(),
                hidden,
            })
            .collect();
        let last = node_hidden.last().expect("at least one epoch");
        let (node_out, global) = gnn_aggregate(&self.gnn, last, edges.last().unwrap(), &structure.mean_adjacency)?;
        let c_seq = node_hidden
            .iter()
            .map(|h| graph_spd(h, eps))
            .collect::<Result<Vec<_>>>()?;
        Ok(DynamicGraphSequence {
            adjacency: structure.adjacency.clone(),
            node_hidden,
            edges,
            node_out,
            global,
            c_seq,
        })
    }
}

impl GraphVars {
    pub fn record_forward(&self, tape: &mut Tape, structure: &GraphStructure, eps: f64) -> Result<GraphNodes> {
        let n = structure.channels();
        let node_in: Vec<Var> = structure
            .features
            .values
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect();
        let node_h = self.node_gru.run(tape, n, &node_in)?;
        let m = tape.shape(self.node_gru.w_hh).0;
        let last = *node_h.last().ok_or_else(|| invalid("graph: trial has no epochs"))?;

        let agg = if structure.pairs.is_empty() {
            tape.constant(DMatrix::zeros(n, m))
        } else {
            let edge_in: Vec<Var> = structure.edge_inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let edge_h = self.edge_gru.run(tape, structure.pairs.len(), &edge_in)?;
            let pre = self.edge_map.apply(tape, *edge_h.last().unwrap())?;
            let phi = tape.relu(pre);
            let mut edge_rows = Vec::with_capacity(2 * structure.pairs.len());
            let mut src_rows = Vec::with_capacity(edge_rows.capacity());
            let mut scatter = DMatrix::zeros(n, 2 * structure.pairs.len());
            for (e, &(i, j)) in structure.pairs.iter().enumerate() {
                for (dst, src) in [(i, j), (j, i)] {
                    scatter[(dst, edge_rows.len())] = structure.mean_adjacency[(dst, src)];
                    edge_rows.push(e);
                    src_rows.push(src);
                }
            }
            let phi_dir = tape.gather_rows(phi, &edge_rows)?;
            let h_src = tape.gather_rows(last, &src_rows)?;
            let msg = tape.mul(phi_dir, h_src)?;
            let scatter = tape.constant(scatter);
            tape.matmul(scatter, msg)?
        };
        let cat = tape.concat_cols(&[last, agg])?;
        let pre = self.node_map.apply(tape, cat)?;
        let u = tape.relu(pre);
        let g = tape.mean_rows(u);

        let mut c_seq = Vec::with_capacity(node_h.len());
        for &h in &node_h {
            let centered = tape.center_rows(h);
            let gram = tape.gram(centered);
            let scaled = tape.scale(gram, 1.0 / m as f64);
            c_seq.push(tape.add_identity(scaled, eps)?);
        }
        Ok(GraphNodes { c_seq, u, g })
    }

    pub fn collect(&self, grads: &Gradients) -> GraphParams {
        GraphParams {
            node_gru: self.node_gru.collect(grads),
            edge_gru: self.edge_gru.collect(grads),
            gnn: GnnParams {
                edge: Affine {
                    w: grads.wrt(self.edge_map.w),
                    b: grads.wrt(self.edge_map.b),
                },
                node: Affine {
                    w: grads.wrt(self.node_map.w),
                    b: grads.wrt(self.node_map.b),
                },
            },
        }
    }
}

/// Reverse-mode gradients of the graph parameters given upstream adjoints on
/// every `C_t`, on `u` and on `g`. The adjacency is held fixed.
pub fn graph_backward(
    params: &GraphParams,
    structure: &GraphStructure,
    eps: f64,
    upstream_c: &[SymMatrix],
    upstream_u: &DMatrix<f64>,
    upstream_g: &DMatrix<f64>,
) -> Result<GraphParams> {
    if upstream_c.len() != structure.num_epochs() {
        return Err(invalid("graph_backward: one upstream gradient per epoch is required"));
    }
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let out = vars.record_forward(&mut tape, structure, eps)?;
    let mut seeds: Vec<(Var, DMatrix<f64>)> = out
        .c_seq
        .iter()
        .zip(upstream_c)
        .map(|(&v, g)| (v, g.as_matrix().clone()))
        .collect();
    seeds.push((out.u, upstream_u.clone()));
    seeds.push((out.g, upstream_g.clone()));
    let grads = tape.backward_from(&seeds)?;
    Ok(vars.collect(&grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::random::{gaussian_matrix, random_sym};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_trial(r: &mut ChaCha8Rng, n: usize, t: usize, l: usize) -> EpochSequence {
        EpochSequence::new((0..t).map(|_| gaussian_matrix(r, n, l)).collect()).unwrap()
    }

    pub(crate) fn naive_stft(x: &[f64], cfg: &StftConfig) -> Vec<f64> {
        let w = cfg.window;
        let taper = taper_weights(cfg.taper, w);
        let bins = w / 2 + 1;
        let mut acc = vec![0.0; bins];
        let mut frames = 0;
        let mut s = 0;
        while s + w <= x.len() {
            for (k, slot) in acc.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / w as f64;
                    re += x[s + n] * taper[n] * ang.cos();
                    im += x[s + n] * taper[n] * ang.sin();
                }
                *slot += (re * re + im * im).sqrt();
            }
            frames += 1;
            s += cfg.hop;
        }
        acc.iter().map(|a| (a / frames as f64).ln_1p()).collect()
    }

    #[test]
    fn stft_zero_and_errors() {
        let trial = EpochSequence::new(vec![DMatrix::zeros(3, 64)]).unwrap();
        let f = stft_features(&trial, &StftConfig::default()).unwrap();
        assert_eq!(f.bins(), 17);
        assert!(f.values[0].iter().all(|&v| v == 0.0));
        let cfg = StftConfig { window: 65, ..Default::default() };
        assert!(stft_features(&trial, &cfg).is_err());
        let cfg = StftConfig { hop: 0, ..Default::default() };
        assert!(stft_features(&trial, &cfg).is_err());
    }

    #[test]
    fn stft_pure_tone_concentrates() {
        let l = 64;
        let k0 = 5;
        let row: Vec<f64> = (0..l)
            .map(|n| (2.0 * std::f64::consts::PI * (k0 * n) as f64 / l as f64).sin())
            .collect();
        let trial = EpochSequence::new(vec![DMatrix::from_row_slice(1, l, &row)]).unwrap();
        let cfg = StftConfig { window: l, hop: l, taper: Taper::Rectangular };
        let f = stft_features(&trial, &cfg).unwrap();
        let v = &f.values[0];
        assert!(v[(0, k0)] >= 10.0 * v[(0, k0 - 1)]);
        assert!(v[(0, k0)] >= 10.0 * v[(0, k0 + 1)]);
    }

    #[test]
    fn stft_matches_naive_dft() {
        let mut r = rng(1);
        let trial = random_trial(&mut r, 3, 2, 64);
        for cfg in [
            StftConfig::default(),
            StftConfig { window: 20, hop: 7, taper: Taper::Rectangular },
        ] {
            let f = stft_features(&trial, &cfg).unwrap();
            for t in 0..2 {
                for ch in 0..3 {
                    let row: Vec<f64> = trial.epoch(t).row(ch).iter().copied().collect();
                    let expect = naive_stft(&row, &cfg);
                    for (k, e) in expect.iter().enumerate() {
                        assert!((f.values[t][(ch, k)] - e).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    pub(crate) fn brute_adjacency(x: &DMatrix<f64>, tau: usize) -> DMatrix<f64> {
        let n = x.nrows();
        let cos = |i: usize, j: usize| {
            let (a, b) = (x.row(i), x.row(j));
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                a.dot(&b) / (na * nb)
            }
        };
        let mut kept = DMatrix::from_element(n, n, false);
        for i in 0..n {
            // Repeatedly take the best remaining neighbour.
            let mut taken = vec![false; n];
            taken[i] = true;
            for _ in 0..tau {
                let mut best: Option<usize> = None;
                for j in 0..n {
                    if !taken[j] && best.map_or(true, |b| cos(i, j) > cos(i, b)) {
                        best = Some(j);
                    }
                }
                let b = best.unwrap();
                taken[b] = true;
                kept[(i, b)] = true;
                kept[(b, i)] = true;
            }
        }
        DMatrix::from_fn(n, n, |i, j| if i != j && kept[(i, j)] { cos(i, j) } else { 0.0 })
    }

    #[test]
    fn adjacency_cases() {
        let same = SpectralFeatures { values: vec![DMatrix::from_fn(4, 5, |_, k| 1.0 + k as f64)] };
        let a = build_adjacency(&same, 0, 2).unwrap();
        for i in 0..4 {
            assert_eq!(a[(i, i)], 0.0);
            for j in 0..4 {
                assert!(a[(i, j)] == 0.0 || (a[(i, j)] - 1.0).abs() < 1e-12);
            }
        }
        let ortho = SpectralFeatures { values: vec![DMatrix::identity(4, 4)] };
        assert_eq!(build_adjacency(&ortho, 0, 3).unwrap(), DMatrix::zeros(4, 4));
        assert!(build_adjacency(&ortho, 0, 4).is_err());
        assert!(build_adjacency(&ortho, 0, 0).is_err());
        assert!(build_adjacency(&ortho, 1, 1).is_err());

        let mut x = DMatrix::from_fn(4, 3, |i, k| (i + k + 1) as f64);
        x.row_mut(2).fill(0.0);
        let a = build_adjacency(&SpectralFeatures { values: vec![x] }, 0, 1).unwrap();
        assert!(a.row(2).iter().all(|&v| v == 0.0));
    }

    fn a_full(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        x.row(i).dot(&x.row(j)) / (x.row(i).norm() * x.row(j).norm())
    }

    #[test]
    fn adjacency_matches_brute_force() {
        let mut r = rng(2);
        for _ in 0..20 {
            let x = gaussian_matrix(&mut r, 8, 17).map(f64::abs);
            let f = SpectralFeatures { values: vec![x.clone()] };
            let a = build_adjacency(&f, 0, 3).unwrap();
            assert!((&a - brute_adjacency(&x, 3)).norm() <= 1e-12);
            assert_eq!(a, a.transpose());
            // Every kept edge is among the top 3 of at least one endpoint.
            let own_top = |i: usize| -> Vec<usize> {
                let mut c: Vec<usize> = (0..8).filter(|&j| j != i).collect();
                c.sort_by(|&p, &q| a_full(&x, i, q).total_cmp(&a_full(&x, i, p)).then(p.cmp(&q)));
                c.truncate(3);
                c
            };
            for i in 0..8 {
                for j in 0..8 {
                    if a[(i, j)] != 0.0 {
                        assert!(own_top(i).contains(&j) || own_top(j).contains(&i));
                    }
                }
            }
        }
    }

    #[test]
    fn adjacency_invariant_to_feature_scaling() {
        let mut r = rng(3);
        let x = gaussian_matrix(&mut r, 6, 9).map(f64::abs);
        let a = build_adjacency(&SpectralFeatures { values: vec![x.clone()] }, 0, 2).unwrap();
        let b = build_adjacency(&SpectralFeatures { values: vec![x * 37.5] }, 0, 2).unwrap();
        assert!((a - b).amax() <= 1e-12);
    }

    pub(crate) fn reference_gru(p: &GruParams, xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let m = p.hidden_dim();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = DVector::zeros(m);
        let mut out = Vec::new();
        for x in xs {
            let mut next = DVector::zeros(m);
            for k in 0..m {
                let lin = |gate: usize, w: &DMatrix<f64>, b: &DMatrix<f64>, v: &DVector<f64>| {
                    let col = gate * m + k;
                    b[(0, col)] + (0..v.len()).map(|i| v[i] * w[(i, col)]).sum::<f64>()
                };
                let r = sig(lin(0, &p.w_ih, &p.b_ih, x) + lin(0, &p.w_hh, &p.b_hh, &h));
                let z = sig(lin(1, &p.w_ih, &p.b_ih, x) + lin(1, &p.w_hh, &p.b_hh, &h));
                let n = (lin(2, &p.w_ih, &p.b_ih, x) + r * lin(2, &p.w_hh, &p.b_hh, &h)).tanh();
                next[k] = (1.0 - z) * n + z * h[k];
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn gru_cases() {
        let p = GruParams::zeros(3, 4);
        let xs = vec![DVector::zeros(3); 3];
        let (last, steps) = gru_sequence(&p, &xs).unwrap();
        assert_eq!(last, DVector::zeros(4));
        assert!(steps.iter().all(|h| h.iter().all(|&v| v == 0.0)));
        let (last, steps) = gru_sequence(&p, &[]).unwrap();
        assert_eq!(last, DVector::zeros(4));
        assert!(steps.is_empty());
        assert!(gru_sequence(&p, &[DVector::zeros(2)]).is_err());

        let mut r = rng(4);
        for _ in 0..20 {
            let p = GruParams::init(&mut r, 3, 5);
            let xs: Vec<DVector<f64>> = (0..3).map(|_| gaussian_matrix(&mut r, 3, 1).column(0).into_owned()).collect();
            let (_, steps) = gru_sequence(&p, &xs).unwrap();
            for (a, b) in steps.iter().zip(reference_gru(&p, &xs)) {
                assert!((a - b).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn gru_tape_matches_plain() {
        let mut r = rng(5);
        let p = GruParams::init(&mut r, 3, 4);
        let xs: Vec<DMatrix<f64>> = (0..3).map(|_| gaussian_matrix(&mut r, 5, 3)).collect();
        let plain = p.run(5, &xs).unwrap();
        let mut t = Tape::new();
        let vars = p.record(&mut t);
        let xv: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let taped = vars.run(&mut t, 5, &xv).unwrap();
        for (a, b) in plain.iter().zip(taped) {
            assert!((a - t.value(b)).amax() <= 1e-14);
        }
    }

    fn naive_gnn(p: &GnnParams, h: &DMatrix<f64>, e: &EdgeEmbeddings, a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = h.shape();
        let relu = |v: f64| v.max(0.0);
        let mut hij = vec![vec![None; n]; n];
        for (k, &(i, j)) in e.pairs.iter().enumerate() {
            hij[i][j] = Some(k);
            hij[j][i] = Some(k);
        }
        let mut u = DMatrix::zeros(n, m);
        for i in 0..n {
            let mut agg = vec![0.0; m];
            for j in 0..n {
                if let Some(k) = hij[i][j] {
                    for c in 0..m {
                        let mut phi = p.edge.b[(0, c)];
                        for q in 0..m {
                            phi += e.hidden[(k, q)] * p.edge.w[(q, c)];
                        }
                        agg[c] += a[(i, j)] * relu(phi) * h[(j, c)];
                    }
                }
            }
            for c in 0..m {
                let mut s = p.node.b[(0, c)];
                for q in 0..m {
                    s += h[(i, q)] * p.node.w[(q, c)] + agg[q] * p.node.w[(m + q, c)];
                }
                u[(i, c)] = relu(s);
            }
        }
        let g = DMatrix::from_fn(1, m, |_, c| (0..n).map(|i| u[(i, c)]).sum::<f64>() / n as f64);
        (u, g)
    }

    #[test]
    fn gnn_cases() {
        let mut r = rng(6);
        let p = GnnParams::init(&mut r, 3);
        let h = gaussian_matrix(&mut r, 4, 3);
        let none = EdgeEmbeddings { pairs: vec![], hidden: DMatrix::zeros(0, 3) };
        let (u, _) = gnn_aggregate(&p, &h, &none, &DMatrix::zeros(4, 4)).unwrap();
        let mut cat = DMatrix::zeros(4, 6);
        cat.view_mut((0, 0), (4, 3)).copy_from(&h);
        assert_eq!(u, p.node.forward(&cat).unwrap().map(|v| v.max(0.0)));

        let h1 = gaussian_matrix(&mut r, 1, 3);
        let (u, g) = gnn_aggregate(&p, &h1, &none, &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(u, g);

        for _ in 0..20 {
            let pairs = vec![(0, 1), (1, 3), (0, 2)];
            let e = EdgeEmbeddings { pairs: pairs.clone(), hidden: gaussian_matrix(&mut r, 3, 3) };
            let mut a = DMatrix::zeros(4, 4);
            for &(i, j) in &pairs {
                let v = gaussian_matrix(&mut r, 1, 1)[(0, 0)];
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            let (u, g) = gnn_aggregate(&p, &h, &e, &a).unwrap();
            let (nu, ng) = naive_gnn(&p, &h, &e, &a);
            assert!((u - nu).amax() <= 1e-12);
            assert!((g - ng).amax() <= 1e-12);
        }
    }

    #[test]
    fn graph_spd_cases() {
        let c = graph_spd(&DMatrix::zeros(3, 5), 1e-4).unwrap();
        assert_eq!(c.as_matrix(), &(DMatrix::identity(3, 3) * 1e-4));
        let mut r = rng(7);
        let mut h = gaussian_matrix(&mut r, 3, 6);
        let row = h.row(0).into_owned();
        h.set_row(2, &row);
        let c = graph_spd(&h, 1e-4).unwrap();
        assert!((c.as_matrix()[(0, 2)] - (c.as_matrix()[(0, 0)] - 1e-4)).abs() <= 1e-12);
        for _ in 0..20 {
            let h = gaussian_matrix(&mut r, 4, 7);
            let c = graph_spd(&h, 1e-4).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let (mi, mj) = (h.row(i).mean(), h.row(j).mean());
                    let s: f64 = (0..7).map(|k| (h[(i, k)] - mi) * (h[(j, k)] - mj)).sum();
                    let expect = s / 7.0 + if i == j { 1e-4 } else { 0.0 };
                    assert!((c.as_matrix()[(i, j)] - expect).abs() <= 1e-12);
                }
            }
            assert!(c.min_eigenvalue().unwrap() > 0.0);
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let mut r = rng(8);
        let trial = random_trial(&mut r, 5, 3, 48);
        let perm = [3, 0, 4, 1, 2];
        let permuted = EpochSequence::new(
            trial
                .epochs()
                .iter()
                .map(|e| DMatrix::from_fn(5, 48, |i, k| e[(perm[i], k)]))
                .collect(),
        )
        .unwrap();
        let cfg = StftConfig::default();
        let params = GraphParams::init(&mut r, cfg.window / 2 + 1, 6);
        let s0 = GraphStructure::build(&trial, &cfg, 2).unwrap();
        let s1 = GraphStructure::build(&permuted, &cfg, 2).unwrap();
        let g0 = params.forward(&s0, 1e-4).unwrap();
        let g1 = params.forward(&s1, 1e-4).unwrap();
        for t in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    assert!((s1.adjacency[t][(i, j)] - s0.adjacency[t][(perm[i], perm[j])]).abs() <= 1e-12);
                    assert!(
                        (g1.c_seq[t].as_matrix()[(i, j)] - g0.c_seq[t].as_matrix()[(perm[i], perm[j])]).abs() <= 1e-12
                    );
                }
                assert!((g1.node_hidden[t].row(i) - g0.node_hidden[t].row(perm[i])).amax() <= 1e-12);
            }
        }
        assert!((g1.global - g0.global).amax() <= 1e-12);
    }

    #[test]
    fn tape_forward_matches_plain() {
        let mut r = rng(9);
        let trial = random_trial(&mut r, 6, 3, 64);
        let s = GraphStructure::build(&trial, &StftConfig::default(), 3).unwrap();
        let p = GraphParams::init(&mut r, 17, 5);
        let plain = p.forward(&s, 1e-4).unwrap();
        let mut t = Tape::new();
        let vars = p.record(&mut t);
        let out = vars.record_forward(&mut t, &s, 1e-4).unwrap();
        assert!((t.value(out.u) - &plain.node_out).amax() <= 1e-12);
        assert!((t.value(out.g) - &plain.global).amax() <= 1e-12);
        for (v, c) in out.c_seq.iter().zip(&plain.c_seq) {
            assert!((t.value(*v) - c.as_matrix()).amax() <= 1e-12);
        }
    }

    fn flatten(p: &GraphParams) -> Vec<&DMatrix<f64>> {
        vec![
            &p.node_gru.w_ih,
            &p.node_gru.w_hh,
            &p.node_gru.b_ih,
            &p.node_gru.b_hh,
            &p.edge_gru.w_ih,
            &p.edge_gru.w_hh,
            &p.edge_gru.b_ih,
            &p.edge_gru.b_hh,
            &p.gnn.edge.w,
            &p.gnn.edge.b,
            &p.gnn.node.w,
            &p.gnn.node.b,
        ]
    }

    fn with_slot(p: &GraphParams, slot: usize, value: &DMatrix<f64>) -> GraphParams {
        let mut q = p.clone();
        let target = match slot {
            0 => &mut q.node_gru.w_ih,
            1 => &mut q.node_gru.w_hh,
            2 => &mut q.node_gru.b_ih,
            3 => &mut q.node_gru.b_hh,
            4 => &mut q.edge_gru.w_ih,
            5 => &mut q.edge_gru.w_hh,
            6 => &mut q.edge_gru.b_ih,
            7 => &mut q.edge_gru.b_hh,
            8 => &mut q.gnn.edge.w,
            9 => &mut q.gnn.edge.b,
            10 => &mut q.gnn.node.w,
            _ => &mut q.gnn.node.b,
        };
        *target = value.clone();
        q
    }

    /// Worst relative error over all graph parameters for a random probe.
    pub(crate) fn graph_fd_error(seed: u64, n: usize, t: usize, m: usize) -> f64 {
        let mut r = rng(seed);
        let trial = random_trial(&mut r, n, t, 32);
        let cfg = StftConfig { window: 8, hop: 8, taper: Taper::Hann };
        let s = GraphStructure::build(&trial, &cfg, (n.max(2) - 1).min(2)).unwrap();
        let mut p = GraphParams::init(&mut r, 5, m);
        // Push biases positive so ReLU units are active away from kinks.
        p.gnn.edge.b.apply(|v| *v = v.abs() + 0.2);
        p.gnn.node.b.apply(|v| *v = v.abs() + 0.2);
        let eps = 1e-4;
        let up_c: Vec<SymMatrix> = (0..t).map(|_| random_sym(&mut r, n, 1.0)).collect();
        let up_u = gaussian_matrix(&mut r, n, m);
        let up_g = gaussian_matrix(&mut r, 1, m);
        let probe = |q: &GraphParams| {
            let f = q.forward(&s, eps).unwrap();
            let mut v = f.node_out.dot(&up_u) + f.global.dot(&up_g);
            for (c, g) in f.c_seq.iter().zip(&up_c) {
                v += c.as_matrix().dot(g.as_matrix());
            }
            v
        };
        let grads = graph_backward(&p, &s, eps, &up_c, &up_u, &up_g).unwrap();
        let analytic = flatten(&grads);
        let mut worst: f64 = 0.0;
        for (slot, value) in flatten(&p).into_iter().enumerate() {
            let fd = central_difference(&|x| probe(&with_slot(&p, slot, x)), value, 1e-5);
            worst = worst.max(relative_error(&fd, analytic[slot]));
        }
        worst
    }

    #[test]
    fn graph_backward_zero_upstream() {
        let mut r = rng(10);
        let trial = random_trial(&mut r, 4, 2, 32);
        let s = GraphStructure::build(&trial, &StftConfig::default(), 2).unwrap();
        let p = GraphParams::init(&mut r, 17, 3);
        let zeros: Vec<SymMatrix> = vec![SymMatrix::zeros(4); 2];
        let g = graph_backward(&p, &s, 1e-4, &zeros, &DMatrix::zeros(4, 3), &DMatrix::zeros(1, 3)).unwrap();
        assert!(flatten(&g).iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn graph_backward_matches_finite_differences() {
        let single = graph_fd_error(11, 1, 1, 2);
        assert!(single <= 1e-5, "{single}");
        for seed in 0..3 {
            let err = graph_fd_error(20 + seed, 4, 3, 3);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}

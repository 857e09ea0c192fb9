//! Graph-guided cross-attention on the SPD manifold.
//!
//! Keys and values are BiMap projections of the signal-view SPD sequence,
//! queries are BiMap projections of the graph-view sequence. Affinity is a
//! decreasing function of the Log-Euclidean distance, normalized by a
//! temperature softmax, and values are aggregated with a Log-Euclidean
//! weighted mean, so every output stays on the manifold.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::layers::{congruence, congruence_backward, spectral_backward, BiMapWeight, Exp, Log};
use crate::spd::{exp_from_eig, le_distance, le_weighted_mean, log_from_eig, sym_eig, EigenPair, SpdMatrix, SymMatrix};

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Row-stochastic attention weights with the raw affinities they came from.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub weights: DMatrix<f64>,
    pub raw_scores: DMatrix<f64>,
    pub temperature: f64,
}

/// Projected queries, keys and values, each regularized by `eps·I`.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub queries: Vec<SpdMatrix>,
    pub keys: Vec<SpdMatrix>,
    pub values: Vec<SpdMatrix>,
}

/// `1 / (1 + ln(1 + d))`.
pub fn affinity(distance: f64) -> f64 {
    1.0 / (1.0 + distance.ln_1p())
}

fn regularized_congruence(w: &DMatrix<f64>, s: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let mut out = congruence(w, s);
    for i in 0..out.nrows() {
        out[(i, i)] += eps;
    }
    out
}

pub fn project_qkv(
    wq: &BiMapWeight,
    wk: &BiMapWeight,
    wv: &BiMapWeight,
    s_seq: &[SpdMatrix],
    c_seq: &[SpdMatrix],
    eps: f64,
) -> Result<Qkv> {
    if s_seq.len() != c_seq.len() {
        return Err(invalid(format!(
            "project_qkv: {} signal epochs vs {} graph epochs",
            s_seq.len(),
            c_seq.len()
        )));
    }
    if wk.output_dim() != wv.output_dim() || wk.output_dim() != wq.output_dim() {
        return Err(invalid("project_qkv: BiMap output dimensions differ"));
    }
    if !(eps > 0.0) {
        return Err(invalid("project_qkv: eps must be positive"));
    }
    let project = |w: &BiMapWeight, seq: &[SpdMatrix]| -> Result<Vec<SpdMatrix>> {
        seq.iter()
            .map(|s| {
                if s.dim() != w.input_dim() {
                    return Err(invalid(format!(
                        "project_qkv: input dim {} does not match BiMap {}",
                        s.dim(),
                        w.input_dim()
                    )));
                }
                let m = regularized_congruence(w.as_matrix(), s.as_matrix(), eps);
                Ok(SpdMatrix::from_sym_unchecked(SymMatrix::from_matrix_unchecked(m)))
            })
            .collect()
    };
    Ok(Qkv {
        queries: project(wq, c_seq)?,
        keys: project(wk, s_seq)?,
        values: project(wv, s_seq)?,
    })
}

/// `A[t][j] = affinity(d_LE(K_t, Q_j))`.
pub fn attention_scores(keys: &[SpdMatrix], queries: &[SpdMatrix]) -> Result<DMatrix<f64>> {
    if keys.len() != queries.len() || keys.is_empty() {
        return Err(invalid("attention_scores: sequences must be non-empty and of equal length"));
    }
    let mut scores = DMatrix::zeros(keys.len(), queries.len());
    for (t, k) in keys.iter().enumerate() {
        for (j, q) in queries.iter().enumerate() {
            scores[(t, j)] = affinity(le_distance(k, q)?);
        }
    }
    Ok(scores)
}

/// Row-wise `softmax(scores / τ)` with max subtraction.
pub fn softmax_rows(scores: &DMatrix<f64>, temperature: f64) -> Result<AttentionWeights> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(invalid(format!("softmax temperature must be positive, got {temperature}")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax_rows: non-finite scores"));
    }
    let mut weights = scores / temperature;
    for mut row in weights.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(AttentionWeights {
        weights,
        raw_scores: scores.clone(),
        temperature,
    })
}

/// `S̃_t = exp(Σ_j a[t][j] log V_j)`, one Log-Euclidean weighted mean per row.
pub fn attend(weights: &AttentionWeights, values: &[SpdMatrix]) -> Result<Vec<SpdMatrix>> {
    if weights.weights.ncols() != values.len() {
        return Err(invalid(format!(
            "attend: {} weight columns for {} values",
            weights.weights.ncols(),
            values.len()
        )));
    }
    weights
        .weights
        .row_iter()
        .map(|row| {
            let w: Vec<f64> = row.iter().copied().collect();
            le_weighted_mean(&w, values)
        })
        .collect()
}

/// Cached forward pass of the whole attention block, from raw weights.
#[derive(Clone, Debug)]
pub struct AttentionForward {
    pub eps: f64,
    s_seq: Vec<DMatrix<f64>>,
    c_seq: Vec<DMatrix<f64>>,
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
    pub queries: Vec<SpdMatrix>,
    pub keys: Vec<SpdMatrix>,
    pub values: Vec<SpdMatrix>,
    eig_q: Vec<EigenPair>,
    eig_k: Vec<EigenPair>,
    eig_v: Vec<EigenPair>,
    log_q: Vec<DMatrix<f64>>,
    log_k: Vec<DMatrix<f64>>,
    log_v: Vec<DMatrix<f64>>,
    pub distances: DMatrix<f64>,
    pub attention: AttentionWeights,
    eig_mixed: Vec<EigenPair>,
    pub output: Vec<SpdMatrix>,
}

/// Gradients of a scalar loss with respect to every attention input.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub s: Vec<SymMatrix>,
    pub c: Vec<SymMatrix>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
}

fn spd_parts(m: DMatrix<f64>) -> Result<(SpdMatrix, EigenPair, DMatrix<f64>)> {
    let sym = SymMatrix::from_matrix_unchecked(m);
    let eig = sym_eig(&sym)?;
    let (log, _) = log_from_eig(&eig)?;
    Ok((SpdMatrix::from_sym_unchecked(sym), eig, log.into_inner()))
}

pub fn attention_forward(
    wq: &DMatrix<f64>,
    wk: &DMatrix<f64>,
    wv: &DMatrix<f64>,
    s_seq: &[DMatrix<f64>],
    c_seq: &[DMatrix<f64>],
    eps: f64,
    temperature: f64,
) -> Result<AttentionForward> {
    let len = s_seq.len();
    if len == 0 || c_seq.len() != len {
        return Err(invalid("attention: sequences must be non-empty and of equal length"));
    }
    let l = wk.ncols();
    if wv.ncols() != l || wq.ncols() != l {
        return Err(invalid("attention: BiMap output dimensions differ"));
    }
    for s in s_seq {
        if s.nrows() != wk.nrows() || s.ncols() != wk.nrows() || wv.nrows() != wk.nrows() {
            return Err(invalid("attention: signal SPD dimension does not match key/value BiMaps"));
        }
    }
    for c in c_seq {
        if c.nrows() != wq.nrows() || c.ncols() != wq.nrows() {
            return Err(invalid("attention: graph SPD dimension does not match query BiMap"));
        }
    }
    if !(eps > 0.0) {
        return Err(invalid("attention: eps must be positive"));
    }

    let mut queries = Vec::with_capacity(len);
    let mut keys = Vec::with_capacity(len);
    let mut values = Vec::with_capacity(len);
    let (mut eig_q, mut eig_k, mut eig_v) = (Vec::new(), Vec::new(), Vec::new());
    let (mut log_q, mut log_k, mut log_v) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..len {
        let (q, e, lg) = spd_parts(regularized_congruence(wq, &c_seq[t], eps))?;
        queries.push(q);
        eig_q.push(e);
        log_q.push(lg);
        let (k, e, lg) = spd_parts(regularized_congruence(wk, &s_seq[t], eps))?;
        keys.push(k);
        eig_k.push(e);
        log_k.push(lg);
        let (v, e, lg) = spd_parts(regularized_congruence(wv, &s_seq[t], eps))?;
        values.push(v);
        eig_v.push(e);
        log_v.push(lg);
    }

    let mut distances = DMatrix::zeros(len, len);
    let mut scores = DMatrix::zeros(len, len);
    for t in 0..len {
        for j in 0..len {
            let d = (&log_k[t] - &log_q[j]).norm();
            distances[(t, j)] = d;
            scores[(t, j)] = affinity(d);
        }
    }
    let attention = softmax_rows(&scores, temperature)?;

    let mut eig_mixed = Vec::with_capacity(len);
    let mut output = Vec::with_capacity(len);
    for t in 0..len {
        let mut mixed = DMatrix::zeros(l, l);
        for (j, lv) in log_v.iter().enumerate() {
            mixed += lv * attention.weights[(t, j)];
        }
        let eig = sym_eig(&SymMatrix::from_matrix_unchecked(mixed))?;
        output.push(exp_from_eig(&eig)?);
        eig_mixed.push(eig);
    }

    Ok(AttentionForward {
        eps,
        s_seq: s_seq.to_vec(),
        c_seq: c_seq.to_vec(),
        wq: wq.clone(),
        wk: wk.clone(),
        wv: wv.clone(),
        queries,
        keys,
        values,
        eig_q,
        eig_k,
        eig_v,
        log_q,
        log_k,
        log_v,
        distances,
        attention,
        eig_mixed,
        output,
    })
}

impl AttentionForward {
    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.wk.ncols()
    }

    pub fn backward(&self, upstream: &[DMatrix<f64>]) -> Result<AttentionGrads> {
        let len = self.len();
        let l = self.output_dim();
        if upstream.len() != len || upstream.iter().any(|g| g.shape() != (l, l)) {
            return Err(invalid("attention backward: upstream gradients do not match outputs"));
        }
        let a = &self.attention.weights;
        let tau = self.attention.temperature;

        let g_mixed: Vec<DMatrix<f64>> = (0..len)
            .map(|t| spectral_backward(&self.eig_mixed[t], &Exp, &upstream[t]).into_inner())
            .collect();

        let mut g_log_v = vec![DMatrix::zeros(l, l); len];
        let mut g_weights = DMatrix::zeros(len, len);
        for t in 0..len {
            for j in 0..len {
                g_log_v[j] += &g_mixed[t] * a[(t, j)];
                g_weights[(t, j)] = g_mixed[t].dot(&self.log_v[j]);
            }
        }

        let mut g_log_k = vec![DMatrix::zeros(l, l); len];
        let mut g_log_q = vec![DMatrix::zeros(l, l); len];
        for t in 0..len {
            let row_dot: f64 = (0..len).map(|k| a[(t, k)] * g_weights[(t, k)]).sum();
            for j in 0..len {
                let g_score = a[(t, j)] * (g_weights[(t, j)] - row_dot) / tau;
                let d = self.distances[(t, j)];
                if d == 0.0 {
                    // Non-differentiable point of the norm; take the zero subgradient.
                    continue;
                }
                let score = self.attention.raw_scores[(t, j)];
                let g_dist = g_score * (-score * score / (1.0 + d));
                let dir = (&self.log_k[t] - &self.log_q[j]) * (g_dist / d);
                g_log_k[t] += &dir;
                g_log_q[j] -= &dir;
            }
        }

        let mut grads = AttentionGrads {
            s: Vec::with_capacity(len),
            c: Vec::with_capacity(len),
            wq: DMatrix::zeros(self.wq.nrows(), l),
            wk: DMatrix::zeros(self.wk.nrows(), l),
            wv: DMatrix::zeros(self.wv.nrows(), l),
        };
        for t in 0..len {
            let g_k = spectral_backward(&self.eig_k[t], &Log, &g_log_k[t]).into_inner();
            let g_v = spectral_backward(&self.eig_v[t], &Log, &g_log_v[t]).into_inner();
            let g_q = spectral_backward(&self.eig_q[t], &Log, &g_log_q[t]).into_inner();
            let (ds_k, dwk) = congruence_backward(&self.wk, &self.s_seq[t], &g_k);
            let (ds_v, dwv) = congruence_backward(&self.wv, &self.s_seq[t], &g_v);
            let (dc, dwq) = congruence_backward(&self.wq, &self.c_seq[t], &g_q);
            grads.s.push(SymMatrix::from_matrix_unchecked(ds_k + ds_v));
            grads.c.push(SymMatrix::from_matrix_unchecked(dc));
            grads.wk += dwk;
            grads.wv += dwv;
            grads.wq += dwq;
        }
        Ok(grads)
    }
}

/// Gradients of the loss with respect to signal SPDs, graph SPDs and the
/// three BiMap weights, given `upstream[t] = ∂L/∂S̃_t`.
pub fn attention_backward(forward: &AttentionForward, upstream: &[SymMatrix]) -> Result<AttentionGrads> {
    let up: Vec<DMatrix<f64>> = upstream.iter().map(|g| g.as_matrix().clone()).collect();
    forward.backward(&up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error, symmetric_central_difference};
    use crate::random::{random_spd, random_stiefel, random_sym};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn qkv_selector_and_shared_weights() {
        let mut r = rng(1);
        let s = vec![random_spd(&mut r, 4, 10.0)];
        let c = vec![random_spd(&mut r, 4, 10.0)];
        let sel = BiMapWeight::identity_selector(4, 2).unwrap();
        let eps = 1e-4;
        let qkv = project_qkv(&sel, &sel, &sel, &s, &c, eps).unwrap();
        let sub = |m: &SpdMatrix| {
            let mut x = m.as_matrix().view((0, 0), (2, 2)).clone_owned();
            x[(0, 0)] += eps;
            x[(1, 1)] += eps;
            x
        };
        assert_eq!(qkv.keys[0].as_matrix(), &sub(&s[0]));
        assert_eq!(qkv.values[0].as_matrix(), &sub(&s[0]));
        assert_eq!(qkv.queries[0].as_matrix(), &sub(&c[0]));

        let w = BiMapWeight::random(&mut r, 5, 3);
        let seq: Vec<SpdMatrix> = (0..3).map(|_| random_spd(&mut r, 5, 10.0)).collect();
        let qkv = project_qkv(&w, &w, &w, &seq, &seq, eps).unwrap();
        for t in 0..3 {
            assert_eq!(qkv.keys[t], qkv.queries[t]);
            assert!(qkv.keys[t].min_eigenvalue().unwrap() > 0.0);
        }
        assert!(project_qkv(&w, &w, &w, &seq, &seq[..2], eps).is_err());
    }

    #[test]
    fn score_cases() {
        let mut r = rng(2);
        let k = vec![random_spd(&mut r, 3, 10.0)];
        assert_eq!(attention_scores(&k, &k).unwrap()[(0, 0)], 1.0);
        assert!((affinity(std::f64::consts::E - 1.0) - 0.5).abs() < 1e-15);
        let q = vec![random_spd(&mut r, 3, 10.0)];
        let d = le_distance(&k[0], &q[0]).unwrap();
        let s = attention_scores(&k, &q).unwrap()[(0, 0)];
        assert!((s - 1.0 / (1.0 + (1.0 + d).ln())).abs() <= 1e-12);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn softmax_cases() {
        let w = softmax_rows(&DMatrix::from_element(1, 4, 0.3), 1.0).unwrap();
        for j in 0..4 {
            assert!((w.weights[(0, j)] - 0.25).abs() < 1e-15);
        }
        let w = softmax_rows(&DMatrix::from_row_slice(1, 2, &[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((w.weights[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.weights[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax_rows(&DMatrix::zeros(1, 2), 0.0).is_err());
        assert!(softmax_rows(&DMatrix::zeros(1, 2), -1.0).is_err());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // Oracle: direct exp/sum without max shift, summed in extended order.
        let mut r = rng(3);
        for _ in 0..20 {
            let row: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let tau = 0.5;
            let w = softmax_rows(&DMatrix::from_row_slice(1, 6, &row), tau).unwrap();
            let exps: Vec<f64> = row.iter().map(|x| (x / tau).exp()).collect();
            let mut sorted = exps.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let total: f64 = sorted.iter().sum();
            for j in 0..6 {
                assert!((w.weights[(0, j)] - exps[j] / total).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attend_cases() {
        let mut r = rng(4);
        let vals: Vec<SpdMatrix> = (0..3).map(|_| random_spd(&mut r, 3, 10.0)).collect();
        let mut onehot = DMatrix::zeros(1, 3);
        onehot[(0, 1)] = 1.0;
        let w = AttentionWeights { weights: onehot.clone(), raw_scores: onehot, temperature: 1.0 };
        let out = attend(&w, &vals).unwrap();
        assert!((out[0].as_matrix() - vals[1].as_matrix()).norm() <= 1e-12);

        let same = vec![vals[0].clone(); 3];
        let uniform = DMatrix::from_element(2, 3, 1.0 / 3.0);
        let w = AttentionWeights { weights: uniform.clone(), raw_scores: uniform.clone(), temperature: 1.0 };
        for o in attend(&w, &same).unwrap() {
            assert!((o.as_matrix() - vals[0].as_matrix()).norm() / vals[0].as_matrix().norm() <= 1e-12);
        }

        let diags = [[1.0, 8.0], [2.0, 1.0], [4.0, 27.0]];
        let dvals: Vec<SpdMatrix> = diags.iter().map(|d| SpdMatrix::from_diagonal(d).unwrap()).collect();
        let out = attend(&w, &dvals).unwrap();
        for i in 0..2 {
            let geo: f64 = diags.iter().map(|d| d[i]).product::<f64>().powf(1.0 / 3.0);
            assert!((out[0].as_matrix()[(i, i)] - geo).abs() <= 1e-12);
        }
    }

    fn random_case(r: &mut ChaCha8Rng, len: usize, d: usize, n: usize, l: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let wq = random_stiefel(r, n, l);
        let wk = random_stiefel(r, d, l);
        let wv = random_stiefel(r, d, l);
        let s: Vec<_> = (0..len).map(|_| random_spd(r, d, 20.0).into_inner()).collect();
        let c: Vec<_> = (0..len).map(|_| random_spd(r, n, 20.0).into_inner()).collect();
        (wq, wk, wv, s, c)
    }

    #[test]
    fn forward_matches_typed_composition() {
        let mut r = rng(5);
        let (wq, wk, wv, s, c) = random_case(&mut r, 3, 5, 4, 3);
        let fwd = attention_forward(&wq, &wk, &wv, &s, &c, 1e-4, 0.7).unwrap();
        let spd = |v: &Vec<DMatrix<f64>>| v.iter().map(|m| SpdMatrix::new(m.clone()).unwrap()).collect::<Vec<_>>();
        let qkv = project_qkv(
            &BiMapWeight::new(wq).unwrap(),
            &BiMapWeight::new(wk).unwrap(),
            &BiMapWeight::new(wv).unwrap(),
            &spd(&s),
            &spd(&c),
            1e-4,
        )
        .unwrap();
        let scores = attention_scores(&qkv.keys, &qkv.queries).unwrap();
        assert!((&scores - &fwd.attention.raw_scores).norm() <= 1e-12);
        let weights = softmax_rows(&scores, 0.7).unwrap();
        for row in weights.weights.row_iter() {
            assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
        let out = attend(&weights, &qkv.values).unwrap();
        for (a, b) in out.iter().zip(&fwd.output) {
            assert!((a.as_matrix() - b.as_matrix()).norm() <= 1e-10 * a.as_matrix().norm());
        }
    }

    #[test]
    fn permutation_equivariance_of_key_value_order() {
        let mut r = rng(6);
        let (wq, wk, wv, s, c) = random_case(&mut r, 4, 4, 4, 2);
        let spd = |v: &[DMatrix<f64>]| v.iter().map(|m| SpdMatrix::new(m.clone()).unwrap()).collect::<Vec<_>>();
        let (wq, wk, wv) = (
            BiMapWeight::new(wq).unwrap(),
            BiMapWeight::new(wk).unwrap(),
            BiMapWeight::new(wv).unwrap(),
        );
        let qkv = project_qkv(&wq, &wk, &wv, &spd(&s), &spd(&c), 1e-4).unwrap();
        // Attention rows run over the query sequence; permute it together with values.
        let perm = [2, 0, 3, 1];
        let pq: Vec<SpdMatrix> = perm.iter().map(|&i| qkv.queries[i].clone()).collect();
        let pv: Vec<SpdMatrix> = perm.iter().map(|&i| qkv.values[i].clone()).collect();
        let w0 = softmax_rows(&attention_scores(&qkv.keys, &qkv.queries).unwrap(), 1.0).unwrap();
        let w1 = softmax_rows(&attention_scores(&qkv.keys, &pq).unwrap(), 1.0).unwrap();
        for t in 0..4 {
            for (jn, &jo) in perm.iter().enumerate() {
                assert!((w1.weights[(t, jn)] - w0.weights[(t, jo)]).abs() <= 1e-14);
            }
        }
        let o0 = attend(&w0, &qkv.values).unwrap();
        let o1 = attend(&w1, &pv).unwrap();
        for (a, b) in o0.iter().zip(&o1) {
            assert!((a.as_matrix() - b.as_matrix()).norm() <= 1e-10);
        }
    }

    #[test]
    fn score_monotone_in_distance() {
        let mut r = rng(7);
        let mut ds: Vec<f64> = (0..50).map(|_| r.gen_range(0.0..20.0)).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ds.dedup();
        for w in ds.windows(2) {
            assert!(affinity(w[0]) > affinity(w[1]));
        }
    }

    #[test]
    fn identity_limit() {
        let mut r = rng(8);
        let base = random_spd(&mut r, 3, 10.0);
        let vals: Vec<SpdMatrix> = (0..4)
            .map(|_| {
                let p = random_sym(&mut r, 3, 1e-8 / 3.0);
                SpdMatrix::new(base.as_matrix() + p.as_matrix()).unwrap()
            })
            .collect();
        let w = softmax_rows(&DMatrix::from_fn(2, 4, |_, _| r.gen::<f64>()), 1.0).unwrap();
        for o in attend(&w, &vals).unwrap() {
            assert!((o.as_matrix() - base.as_matrix()).norm() <= 1e-7);
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let mut r = rng(9);
        let (wq, wk, wv, s, c) = random_case(&mut r, 3, 4, 4, 2);
        let fwd = attention_forward(&wq, &wk, &wv, &s, &c, 1e-4, 1.0).unwrap();
        let g = fwd.backward(&vec![DMatrix::zeros(2, 2); 3]).unwrap();
        assert_eq!(g.wq.norm() + g.wk.norm() + g.wv.norm(), 0.0);
        assert!(g.s.iter().chain(&g.c).all(|m| m.frobenius_norm() == 0.0));
    }

    /// Checks every input of the attention block against central differences
    /// of `Σ_t ⟨G_t, S̃_t⟩`. Returns the worst relative error.
    pub(crate) fn full_path_error(seed: u64, len: usize, d: usize, l: usize) -> f64 {
        let mut r = rng(seed);
        let (wq, wk, wv, s, c) = random_case(&mut r, len, d, d, l);
        let ups: Vec<DMatrix<f64>> = (0..len).map(|_| random_sym(&mut r, l, 1.0).into_inner()).collect();
        let (eps, tau) = (1e-4, 0.8);
        let probe = |wq: &DMatrix<f64>, wk: &DMatrix<f64>, wv: &DMatrix<f64>, s: &[DMatrix<f64>], c: &[DMatrix<f64>]| {
            let f = attention_forward(wq, wk, wv, s, c, eps, tau).unwrap();
            f.output.iter().zip(&ups).map(|(o, g)| o.as_matrix().dot(g)).sum::<f64>()
        };
        let fwd = attention_forward(&wq, &wk, &wv, &s, &c, eps, tau).unwrap();
        let g = fwd.backward(&ups).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        worst = worst.max(relative_error(&central_difference(&|x| probe(x, &wk, &wv, &s, &c), &wq, h), &g.wq));
        worst = worst.max(relative_error(&central_difference(&|x| probe(&wq, x, &wv, &s, &c), &wk, h), &g.wk));
        worst = worst.max(relative_error(&central_difference(&|x| probe(&wq, &wk, x, &s, &c), &wv, h), &g.wv));
        for t in 0..len {
            let fs = |x: &DMatrix<f64>| {
                let mut s2 = s.clone();
                s2[t] = x.clone();
                probe(&wq, &wk, &wv, &s2, &c)
            };
            worst = worst.max(relative_error(&symmetric_central_difference(&fs, &s[t], h), g.s[t].as_matrix()));
            let fc = |x: &DMatrix<f64>| {
                let mut c2 = c.clone();
                c2[t] = x.clone();
                probe(&wq, &wk, &wv, &s, &c2)
            };
            worst = worst.max(relative_error(&symmetric_central_difference(&fc, &c[t], h), g.c[t].as_matrix()));
        }
        worst
    }

    #[test]
    fn backward_single_epoch() {
        for seed in 0..5 {
            let err = full_path_error(100 + seed, 1, 4, 2);
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn backward_full_path() {
        for seed in 0..10 {
            let err = full_path_error(200 + seed, 3, 4, 2);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}

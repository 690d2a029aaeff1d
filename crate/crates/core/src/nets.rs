//! Unrolled sparse coding networks (LISTA, LFISTA, FacNet) with hand-derived
//! reverse-mode gradients, Adagrad training and model files.
//!
//! Batched code paths hold one sample per column. Work is split into chunks
//! of `CHUNK` columns; chunk results are reduced in chunk order, so results do
//! not depend on the number of threads.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::factorized::factorized_kernel;
use crate::io::{load_matrix, save_matrix};
use crate::lasso::{shrink, BernoulliGaussianModel, CodingOperator, LassoProblem};
use crate::linalg::{self, Mat, Vector};
use crate::rng;
use crate::solvers::{fista_momentum, fista_weight, reference_solution, REFERENCE_TOL};

pub const CHUNK: usize = 64;
pub const STIEFEL_MIN_SINGULAR: f64 = 1e-12;
/// Training stops when the batch loss exceeds this multiple of the first batch loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
pub const MODEL_META: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Lista,
    Lfista,
    Facnet,
}

impl NetKind {
    pub const ALL: [NetKind; 3] = [NetKind::Lista, NetKind::Lfista, NetKind::Facnet];

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Lista => "lista",
            NetKind::Lfista => "lfista",
            NetKind::Facnet => "facnet",
        }
    }

    /// Trainable parameters per layer for m atoms and signal dimension n.
    pub fn params_per_layer(self, m: usize, n: usize) -> usize {
        match self {
            NetKind::Lista => m * m + m * n + m,
            NetKind::Lfista => 2 * m * m + m * n + m,
            NetKind::Facnet => m * m + m,
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown network kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListaLayer {
    pub w_g: Mat,
    pub w_e: Mat,
    pub theta: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfistaLayer {
    pub w_g: Mat,
    pub w_m: Mat,
    pub w_e: Mat,
    pub theta: Vector,
}

/// One factorized layer; S = exp(log_s) stays positive under free updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FacnetLayer {
    pub a: Mat,
    pub log_s: Vector,
}

impl FacnetLayer {
    pub fn s(&self) -> Vector {
        self.log_s.map(f64::exp)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ListaParams {
    pub layers: Vec<ListaLayer>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LfistaParams {
    pub layers: Vec<LfistaLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacnetParams {
    pub layers: Vec<FacnetLayer>,
    /// weight of the unitarity penalty
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Lista(ListaParams),
    Lfista(LfistaParams),
    Facnet(FacnetParams),
}

/// I − B/L and Dᵀ/L
fn ista_weights(op: &CodingOperator) -> (Mat, Mat) {
    let m = op.atoms();
    let l = op.lipschitz;
    (Mat::identity(m, m) - &op.gram / l, op.dict.entries().transpose() / l)
}

fn lfista_init_layer(op: &CodingOperator, lambda: f64, index: usize) -> LfistaLayer {
    let (w, w_e) = ista_weights(op);
    let ts = fista_momentum(index + 1);
    let mom = fista_weight(&ts, index);
    LfistaLayer {
        w_g: &w * (1.0 + mom),
        w_m: &w * (-mom),
        w_e,
        theta: Vector::from_element(op.atoms(), lambda / op.lipschitz),
    }
}

fn rowwise_shrink(u: &Mat, theta: &Vector) -> Mat {
    Mat::from_fn(u.nrows(), u.ncols(), |i, j| shrink(u[(i, j)], theta[i]))
}

/// Soft-threshold backward: ∂u = 1_{|u|>θ}∂z, ∂θ_i = −Σ_j sign(u_ij)1_{|u_ij|>θ_i}∂z_ij.
fn shrink_backward(u: &Mat, theta: &Vector, upstream: &Mat) -> (Mat, Vector) {
    let mut du = Mat::zeros(u.nrows(), u.ncols());
    let mut dtheta = Vector::zeros(u.nrows());
    for j in 0..u.ncols() {
        for i in 0..u.nrows() {
            let v = u[(i, j)];
            if v.abs() > theta[i] {
                let g = upstream[(i, j)];
                du[(i, j)] = g;
                dtheta[i] -= v.signum() * g;
            }
        }
    }
    (du, dtheta)
}

fn scale_rows(m: &Mat, r: &Vector) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| r[i] * m[(i, j)])
}

/// Samples in columns together with Dᵀx and the regularization weight.
#[derive(Debug, Clone)]
pub struct Batch {
    pub op: Arc<CodingOperator>,
    pub lambda: f64,
    pub x: Mat,
    pub dtx: Mat,
}

impl Batch {
    pub fn new(op: &Arc<CodingOperator>, x: Mat, lambda: f64) -> Result<Self> {
        check_dims("sample length", op.signal_dim(), x.nrows())?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        let dtx = op.dict.entries().tr_mul(&x);
        Ok(Self { op: Arc::clone(op), lambda, x, dtx })
    }

    /// Draws `size` codes from the model and returns their signals x = Dz.
    pub fn sample(
        op: &Arc<CodingOperator>,
        model: &BernoulliGaussianModel,
        size: usize,
        lambda: f64,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        check_dims("code model size", op.atoms(), model.m)?;
        let codes: Vec<Vector> = (0..size).map(|_| model.sample(rng)).collect();
        let x = op.dict.entries() * Mat::from_columns(&codes);
        Self::new(op, x, lambda)
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, start: usize, len: usize) -> Batch {
        Batch {
            op: Arc::clone(&self.op),
            lambda: self.lambda,
            x: self.x.columns(start, len).into_owned(),
            dtx: self.dtx.columns(start, len).into_owned(),
        }
    }

    fn chunks(&self) -> Vec<Batch> {
        (0..self.len()).step_by(CHUNK).map(|s| self.slice(s, CHUNK.min(self.len() - s))).collect()
    }

    /// LASSO cost of each column of `z`.
    pub fn costs(&self, z: &Mat) -> Vec<f64> {
        let resid = &self.x - self.op.dict.entries() * z;
        (0..z.ncols())
            .map(|j| 0.5 * resid.column(j).norm_squared() + self.lambda * z.column(j).abs().sum())
            .collect()
    }

    pub fn problem(&self, j: usize) -> Result<LassoProblem> {
        self.op.problem(self.x.column(j).into_owned(), self.lambda)
    }
}

struct LayerCache {
    u: Mat,
    theta: Vector,
    /// FacNet only: g = Bz − Dᵀx and q = Ag
    g: Option<Mat>,
    q: Option<Mat>,
    w: Option<Mat>,
}

/// Codes z_0..z_K of a batched forward pass plus what backprop needs.
pub struct ForwardTrace {
    pub codes: Vec<Mat>,
    cache: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Mat {
        self.codes.last().expect("trace holds z_0")
    }

    /// Smallest distance ||u| − θ| over all pre-activations; small values mean a kink is near.
    pub fn kink_margin(&self) -> f64 {
        self.cache
            .iter()
            .flat_map(|c| {
                (0..c.u.ncols())
                    .flat_map(move |j| (0..c.u.nrows()).map(move |i| (c.u[(i, j)].abs() - c.theta[i]).abs()))
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn pattern(&self) -> Vec<bool> {
        self.cache
            .iter()
            .flat_map(|c| {
                (0..c.u.ncols())
                    .flat_map(move |j| (0..c.u.nrows()).map(move |i| c.u[(i, j)].abs() > c.theta[i]))
            })
            .collect()
    }
}

impl Network {
    /// Weights that reproduce `depth` iterations of the classical solver:
    /// ISTA for LISTA and FacNet (A = I, S = L·1), FISTA for LFISTA.
    pub fn init(kind: NetKind, op: &CodingOperator, lambda: f64, depth: usize, mu: f64) -> Self {
        let mut net = match kind {
            NetKind::Lista => Network::Lista(ListaParams::default()),
            NetKind::Lfista => Network::Lfista(LfistaParams::default()),
            NetKind::Facnet => Network::Facnet(FacnetParams { layers: Vec::new(), mu }),
        };
        for _ in 0..depth {
            net.push_init_layer(op, lambda);
        }
        net
    }

    /// Appends the classical-solver layer for the next depth.
    pub fn push_init_layer(&mut self, op: &CodingOperator, lambda: f64) {
        let m = op.atoms();
        let theta = Vector::from_element(m, lambda / op.lipschitz);
        match self {
            Network::Lista(p) => {
                let (w_g, w_e) = ista_weights(op);
                p.layers.push(ListaLayer { w_g, w_e, theta });
            }
            Network::Lfista(p) => {
                let idx = p.layers.len();
                p.layers.push(lfista_init_layer(op, lambda, idx));
            }
            Network::Facnet(p) => p.layers.push(FacnetLayer {
                a: Mat::identity(m, m),
                log_s: Vector::from_element(m, op.lipschitz.ln()),
            }),
        }
    }

    pub fn kind(&self) -> NetKind {
        match self {
            Network::Lista(_) => NetKind::Lista,
            Network::Lfista(_) => NetKind::Lfista,
            Network::Facnet(_) => NetKind::Facnet,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Network::Lista(p) => p.layers.len(),
            Network::Lfista(p) => p.layers.len(),
            Network::Facnet(p) => p.layers.len(),
        }
    }

    pub fn mu(&self) -> Option<f64> {
        match self {
            Network::Facnet(p) => Some(p.mu),
            _ => None,
        }
    }

    /// Single-sample forward pass from z_0 = 0; returns z_0..z_K.
    /// FacNet layers call the same kernel as the factorized solver step.
    pub fn forward(&self, p: &LassoProblem) -> Vec<Vector> {
        let m = p.atoms();
        let mut zs = vec![Vector::zeros(m)];
        match self {
            Network::Lista(params) => {
                for l in &params.layers {
                    let u = &l.w_g * zs.last().unwrap() + &l.w_e * &p.x;
                    zs.push(u.zip_map(&l.theta, shrink));
                }
            }
            Network::Lfista(params) => {
                let mut prev = Vector::zeros(m);
                for l in &params.layers {
                    let z = zs.last().unwrap();
                    let u = &l.w_g * z + &l.w_m * &prev + &l.w_e * &p.x;
                    prev = z.clone();
                    zs.push(u.zip_map(&l.theta, shrink));
                }
            }
            Network::Facnet(params) => {
                for l in &params.layers {
                    let next = factorized_kernel(p, zs.last().unwrap(), &l.a, &l.s()).next;
                    zs.push(next);
                }
            }
        }
        zs
    }

    pub fn forward_batch(&self, b: &Batch) -> ForwardTrace {
        let m = b.op.atoms();
        let mut codes = vec![Mat::zeros(m, b.len())];
        let mut cache = Vec::with_capacity(self.depth());
        match self {
            Network::Lista(params) => {
                for l in &params.layers {
                    let u = &l.w_g * codes.last().unwrap() + &l.w_e * &b.x;
                    codes.push(rowwise_shrink(&u, &l.theta));
                    cache.push(LayerCache { u, theta: l.theta.clone(), g: None, q: None, w: None });
                }
            }
            Network::Lfista(params) => {
                for (k, l) in params.layers.iter().enumerate() {
                    let z = &codes[k];
                    let mut u = &l.w_g * z + &l.w_e * &b.x;
                    if k > 0 {
                        u += &l.w_m * &codes[k - 1];
                    }
                    codes.push(rowwise_shrink(&u, &l.theta));
                    cache.push(LayerCache { u, theta: l.theta.clone(), g: None, q: None, w: None });
                }
            }
            Network::Facnet(params) => {
                for l in &params.layers {
                    let z = codes.last().unwrap();
                    let inv_s = l.log_s.map(|v| (-v).exp());
                    let theta = &inv_s * b.lambda;
                    let g = &b.op.gram * z - &b.dtx;
                    let q = &l.a * &g;
                    let u = &l.a * z - scale_rows(&q, &inv_s);
                    let w = rowwise_shrink(&u, &theta);
                    codes.push(l.a.tr_mul(&w));
                    cache.push(LayerCache { u, theta, g: Some(g), q: Some(q), w: Some(w) });
                }
            }
        }
        ForwardTrace { codes, cache }
    }

    /// Network outputs z_K, one column per sample.
    pub fn predict(&self, b: &Batch) -> Mat {
        let parts: Vec<Mat> =
            b.chunks().par_iter().map(|c| self.forward_batch(c).codes.pop().expect("trace holds z_0")).collect();
        hcat(b.op.atoms(), &parts)
    }

    /// Zero-valued parameters of the same shapes.
    pub fn zeros_like(&self) -> Network {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Parameter tensors in a fixed order (per layer: W_g, [W_m], W_e, θ or A, log S).
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Network::Lista(p) => p
                .layers
                .iter()
                .flat_map(|l| [l.w_g.as_slice(), l.w_e.as_slice(), l.theta.as_slice()])
                .collect(),
            Network::Lfista(p) => p
                .layers
                .iter()
                .flat_map(|l| [l.w_g.as_slice(), l.w_m.as_slice(), l.w_e.as_slice(), l.theta.as_slice()])
                .collect(),
            Network::Facnet(p) => p.layers.iter().flat_map(|l| [l.a.as_slice(), l.log_s.as_slice()]).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Network::Lista(p) => p
                .layers
                .iter_mut()
                .flat_map(|l| [l.w_g.as_mut_slice(), l.w_e.as_mut_slice(), l.theta.as_mut_slice()])
                .collect(),
            Network::Lfista(p) => p
                .layers
                .iter_mut()
                .flat_map(|l| {
                    [l.w_g.as_mut_slice(), l.w_m.as_mut_slice(), l.w_e.as_mut_slice(), l.theta.as_mut_slice()]
                })
                .collect(),
            Network::Facnet(p) => {
                p.layers.iter_mut().flat_map(|l| [l.a.as_mut_slice(), l.log_s.as_mut_slice()]).collect()
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Network) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= c;
            }
        }
    }

    /// θ ← max(θ, 0) for the thresholded architectures.
    pub fn clamp_thresholds(&mut self) {
        let clamp = |t: &mut Vector| t.apply(|v| *v = v.max(0.0));
        match self {
            Network::Lista(p) => p.layers.iter_mut().for_each(|l| clamp(&mut l.theta)),
            Network::Lfista(p) => p.layers.iter_mut().for_each(|l| clamp(&mut l.theta)),
            Network::Facnet(_) => {}
        }
    }

    /// (μ/K)Σ_k‖I − A_kᵀA_k‖²_F; zero for the other architectures.
    pub fn unitarity_penalty(&self) -> f64 {
        match self {
            Network::Facnet(p) if !p.layers.is_empty() => {
                let sum: f64 = p.layers.iter().map(|l| linalg::unitarity_error(&l.a).powi(2)).sum();
                p.mu / p.layers.len() as f64 * sum
            }
            _ => 0.0,
        }
    }

    /// Replaces every A by its orthogonal polar factor.
    pub fn project(&mut self) -> Result<()> {
        if let Network::Facnet(p) = self {
            for l in &mut p.layers {
                l.a = stiefel_project(&l.a)?;
            }
        }
        Ok(())
    }

    /// Per-layer ‖AᵀA − I‖_F (empty unless FacNet).
    pub fn unitarity_errors(&self) -> Vec<f64> {
        match self {
            Network::Facnet(p) => p.layers.iter().map(|l| linalg::unitarity_error(&l.a)).collect(),
            _ => Vec::new(),
        }
    }

    /// Reverse pass for the trace of `b`, given ∂loss/∂z_K. Excludes the penalty.
    pub fn backward(&self, b: &Batch, trace: &ForwardTrace, upstream: &Mat) -> Network {
        let k_layers = self.depth();
        let mut grads = self.zeros_like();
        if k_layers == 0 {
            return grads;
        }
        let mut dz: Vec<Mat> = trace.codes.iter().map(|z| Mat::zeros(z.nrows(), z.ncols())).collect();
        dz[k_layers] = upstream.clone();
        for k in (0..k_layers).rev() {
            let c = &trace.cache[k];
            let z = &trace.codes[k];
            match (self, &mut grads) {
                (Network::Lista(p), Network::Lista(g)) => {
                    let l = &p.layers[k];
                    let (du, dtheta) = shrink_backward(&c.u, &c.theta, &dz[k + 1]);
                    let gl = &mut g.layers[k];
                    gl.w_g += &du * z.transpose();
                    gl.w_e += &du * b.x.transpose();
                    gl.theta += dtheta;
                    dz[k] += l.w_g.tr_mul(&du);
                }
                (Network::Lfista(p), Network::Lfista(g)) => {
                    let l = &p.layers[k];
                    let (du, dtheta) = shrink_backward(&c.u, &c.theta, &dz[k + 1]);
                    let gl = &mut g.layers[k];
                    gl.w_g += &du * z.transpose();
                    gl.w_e += &du * b.x.transpose();
                    gl.theta += dtheta;
                    dz[k] += l.w_g.tr_mul(&du);
                    if k > 0 {
                        gl.w_m += &du * trace.codes[k - 1].transpose();
                        dz[k - 1] += l.w_m.tr_mul(&du);
                    }
                }
                (Network::Facnet(p), Network::Facnet(g)) => {
                    let l = &p.layers[k];
                    let (gm, q, w) = (c.g.as_ref().unwrap(), c.q.as_ref().unwrap(), c.w.as_ref().unwrap());
                    let inv_s = l.log_s.map(|v| (-v).exp());
                    let up = &dz[k + 1];
                    let dw = &l.a * up;
                    let (du, dtheta) = shrink_backward(&c.u, &c.theta, &dw);
                    let rdu = scale_rows(&du, &inv_s);
                    let gl = &mut g.layers[k];
                    gl.a += w * up.transpose() + &du * z.transpose() - &rdu * gm.transpose();
                    for i in 0..inv_s.len() {
                        let qdu: f64 = q.row(i).dot(&du.row(i));
                        gl.log_s[i] += -c.theta[i] * dtheta[i] + inv_s[i] * qdu;
                    }
                    let back = l.a.tr_mul(&rdu);
                    dz[k] += l.a.tr_mul(&du) - &b.op.gram * back;
                }
                _ => unreachable!("gradient container matches the network"),
            }
        }
        grads
    }

    fn penalty_gradient(&self, grads: &mut Network) {
        if let (Network::Facnet(p), Network::Facnet(g)) = (self, grads) {
            if p.layers.is_empty() {
                return;
            }
            let c = 4.0 * p.mu / p.layers.len() as f64;
            for (l, gl) in p.layers.iter().zip(g.layers.iter_mut()) {
                let m = l.a.ncols();
                let gap = l.a.tr_mul(&l.a) - Mat::identity(m, m);
                gl.a += (&l.a * gap) * c;
            }
        }
    }

    /// Mean LASSO cost of the outputs over the batch plus the FacNet penalty.
    pub fn loss(&self, b: &Batch) -> f64 {
        let sums: Vec<f64> =
            b.chunks().par_iter().map(|c| c.costs(self.forward_batch(c).output()).iter().sum()).collect();
        sums.iter().sum::<f64>() / b.len() as f64 + self.unitarity_penalty()
    }

    /// Loss and its exact gradient.
    pub fn loss_and_grad(&self, b: &Batch) -> (f64, Network) {
        let parts: Vec<(f64, Network)> = b
            .chunks()
            .par_iter()
            .map(|c| {
                let trace = self.forward_batch(c);
                let z = trace.output();
                let loss: f64 = c.costs(z).iter().sum();
                let upstream = &c.op.gram * z - &c.dtx + z.map(linalg::sign) * c.lambda;
                (loss, self.backward(c, &trace, &upstream))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.zeros_like();
        for (loss, g) in &parts {
            total += loss;
            grads.add_assign(g);
        }
        let n = b.len() as f64;
        grads.scale(1.0 / n);
        self.penalty_gradient(&mut grads);
        (total / n + self.unitarity_penalty(), grads)
    }
}

fn hcat(rows: usize, parts: &[Mat]) -> Mat {
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(p);
        at += p.ncols();
    }
    out
}

/// Orthogonal polar factor UVᵀ of A = UΣVᵀ.
pub fn stiefel_project(a: &Mat) -> Result<Mat> {
    linalg::polar_factor(a, STIEFEL_MIN_SINGULAR)
}

/// G ← G + g²; p ← p − lr·g/(√G + eps). Coordinates with g = 0 are left untouched.
pub fn adagrad_update(param: &mut [f64], accum: &mut [f64], grad: &[f64], lr: f64, eps: f64) {
    for ((p, acc), &g) in param.iter_mut().zip(accum.iter_mut()).zip(grad) {
        if g == 0.0 {
            continue;
        }
        *acc += g * g;
        *p -= lr * g / (acc.sqrt() + eps);
    }
}

#[derive(Debug, Clone)]
pub struct Adagrad {
    accum: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Adagrad {
    pub fn new(net: &Network, learning_rate: f64, epsilon: f64) -> Self {
        let accum = net.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { accum, learning_rate, epsilon }
    }

    /// Applies one update, then clamps thresholds at zero.
    pub fn step(&mut self, net: &mut Network, grads: &Network) {
        for ((p, acc), g) in net.tensors_mut().into_iter().zip(self.accum.iter_mut()).zip(grads.tensors()) {
            adagrad_update(p, acc, g, self.learning_rate, self.epsilon);
        }
        net.clamp_thresholds();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// ‖analytic − numeric‖∞ / max(‖analytic‖∞, 1e-12)
    pub max_rel_error: f64,
    pub checked: usize,
    /// coordinates whose ±h perturbation crossed a threshold kink
    pub skipped: usize,
}

/// Central finite differences of `loss` on every parameter coordinate.
pub fn finite_difference_check(net: &Network, b: &Batch, h: f64) -> GradCheck {
    let (_, analytic) = net.loss_and_grad(b);
    let analytic: Vec<f64> = analytic.tensors().concat();
    let base_pattern = net.forward_batch(b).pattern();
    let mut numeric = vec![f64::NAN; analytic.len()];
    let mut skipped = 0;
    let mut idx = 0;
    let n_tensors = net.tensors().len();
    for t in 0..n_tensors {
        let len = net.tensors()[t].len();
        for i in 0..len {
            let eval = |delta: f64| {
                let mut probe = net.clone();
                probe.tensors_mut()[t][i] += delta;
                (probe.loss(b), probe.forward_batch(b).pattern() == base_pattern)
            };
            let (plus, ok_p) = eval(h);
            let (minus, ok_m) = eval(-h);
            if ok_p && ok_m {
                numeric[idx] = (plus - minus) / (2.0 * h);
            } else {
                skipped += 1;
            }
            idx += 1;
        }
    }
    let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        if n.is_finite() {
            worst = worst.max((a - n).abs());
            checked += 1;
        }
    }
    GradCheck { max_rel_error: worst / scale, checked, skipped }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// FacNet unitarity penalty weight
    pub mu: f64,
    /// train depth 1 first, then append a layer and retrain, up to the target depth
    pub greedy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            batch_size: 500,
            learning_rate: 0.01,
            adagrad_epsilon: 1e-8,
            seed: 0,
            eval_every: 100,
            mu: 1.0,
            greedy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.adagrad_epsilon >= 0.0) {
            return bad("adagrad_epsilon must be non-negative");
        }
        if !(self.mu >= 0.0) {
            return bad("mu must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl GapSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_error: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, n }
    }
}

/// Held-out samples with their optimal LASSO costs.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub batch: Batch,
    pub optimal: Vec<f64>,
}

impl EvalSet {
    /// Solves every sample to the reference tolerance.
    pub fn new(batch: Batch) -> Result<Self> {
        let optimal = (0..batch.len())
            .into_par_iter()
            .map(|j| {
                let p = batch.problem(j)?;
                let z = reference_solution(&p, REFERENCE_TOL)?;
                Ok(p.cost(&z))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self { batch, optimal })
    }

    pub fn with_optimal(batch: Batch, optimal: Vec<f64>) -> Result<Self> {
        check_dims("optimal cost count", batch.len(), optimal.len())?;
        Ok(Self { batch, optimal })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// F(z_j) − F(z*_j) for each column.
    pub fn gaps(&self, codes: &Mat) -> Vec<f64> {
        self.batch.costs(codes).iter().zip(&self.optimal).map(|(c, o)| c - o).collect()
    }

    pub fn summarize(&self, codes: &Mat) -> GapSummary {
        GapSummary::of(&self.gaps(codes))
    }

    pub fn network_gap(&self, net: &Network) -> GapSummary {
        self.summarize(&net.predict(&self.batch))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub mean_gap: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Mean gap of each network at its own depth.
pub fn evaluate_depth_curve(nets: &[Network], eval: &EvalSet) -> Vec<DepthRow> {
    nets.iter()
        .map(|net| {
            let s = eval.network_gap(net);
            DepthRow { depth: net.depth(), mean_gap: s.mean, std_error: s.std_error, n: s.n }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// mean batch loss since the previous point; at step 0, the loss on the first batch
    pub train_loss: f64,
    pub test_cost_gap: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,train_loss,test_cost_gap\n");
    for p in curve {
        out.push_str(&format!("{},{:?},{:?}\n", p.step, p.train_loss, p.test_cost_gap));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// best checkpoint on the test set (projected for FacNet)
    pub net: Network,
    pub best_step: usize,
    pub best_gap: GapSummary,
    pub init_gap: GapSummary,
    pub curve: Vec<CurvePoint>,
    /// step at which the batch loss blew up, if it did
    pub diverged_at: Option<usize>,
}

/// Evaluation copy: FacNet checkpoints are projected first.
fn checkpoint(net: &Network, eval: &EvalSet) -> Option<(Network, GapSummary)> {
    let mut c = net.clone();
    c.project().ok()?;
    let gap = eval.network_gap(&c);
    gap.mean.is_finite().then_some((c, gap))
}

/// Trains a `depth`-layer network from the classical initialization on fresh
/// batches drawn from `model` at every step, keeping the checkpoint with the
/// lowest mean test gap. The initialization itself is a candidate, so the
/// result never does worse on the test set than the classical solver.
pub fn train(
    kind: NetKind,
    op: &Arc<CodingOperator>,
    model: &BernoulliGaussianModel,
    lambda: f64,
    depth: usize,
    eval: &EvalSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dims("code model size", op.atoms(), model.m)?;
    let init = Network::init(kind, op, lambda, depth, config.mu);
    let (mut best_net, init_gap) = checkpoint(&init, eval)
        .ok_or_else(|| Error::InvalidArgument("initial network cannot be evaluated".into()))?;
    let mut best_gap = init_gap;
    let mut best_step = 0;
    let mut curve = Vec::new();
    let mut diverged_at = None;

    let stages: Vec<(usize, usize)> = if config.greedy && depth > 1 {
        let per = (config.steps / depth).max(1);
        (1..=depth).map(|d| (d, if d == depth { config.steps.saturating_sub(per * (depth - 1)) } else { per })).collect()
    } else {
        vec![(depth, config.steps)]
    };
    let mut net = Network::init(kind, op, lambda, stages[0].0, config.mu);
    let mut step = 0usize;
    let mut first_loss: Option<f64> = None;
    'stages: for (stage_depth, stage_steps) in stages {
        while net.depth() < stage_depth {
            net.push_init_layer(op, lambda);
        }
        let last_stage = stage_depth == depth;
        let mut opt = Adagrad::new(&net, config.learning_rate, config.adagrad_epsilon);
        let mut window = Vec::new();
        for _ in 0..stage_steps {
            step += 1;
            let mut r = rng::derived(config.seed, step as u64);
            let batch = Batch::sample(op, model, config.batch_size, lambda, &mut r)?;
            let (loss, grads) = net.loss_and_grad(&batch);
            let reference = *first_loss.get_or_insert(loss);
            if last_stage && curve.is_empty() {
                curve.push(CurvePoint { step: 0, train_loss: loss, test_cost_gap: init_gap.mean });
            }
            if !loss.is_finite() || loss > DIVERGENCE_FACTOR * reference.max(f64::MIN_POSITIVE) {
                diverged_at = Some(step);
                break 'stages;
            }
            window.push(loss);
            opt.step(&mut net, &grads);
            if last_stage && (step % config.eval_every == 0 || step == config.steps) {
                let train_loss = window.iter().sum::<f64>() / window.len() as f64;
                window.clear();
                let gap = match checkpoint(&net, eval) {
                    Some((c, gap)) => {
                        if gap.mean < best_gap.mean {
                            best_gap = gap;
                            best_net = c;
                            best_step = step;
                        }
                        gap.mean
                    }
                    None => f64::NAN,
                };
                curve.push(CurvePoint { step, train_loss, test_cost_gap: gap });
            }
        }
    }
    if curve.is_empty() {
        curve.push(CurvePoint { step: 0, train_loss: init.loss(&eval.batch), test_cost_gap: init_gap.mean });
    }
    Ok(TrainOutcome { net: best_net, best_step, best_gap, init_gap, curve, diverged_at })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    kind: NetKind,
    depth: usize,
    atoms: usize,
    signal_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
}

fn tensor_names(kind: NetKind) -> &'static [&'static str] {
    match kind {
        NetKind::Lista => &["W_g", "W_e", "theta"],
        NetKind::Lfista => &["W_g", "W_m", "W_e", "theta"],
        NetKind::Facnet => &["A", "log_S"],
    }
}

fn tensor_shapes(kind: NetKind, m: usize, n: usize) -> Vec<(usize, usize)> {
    match kind {
        NetKind::Lista => vec![(m, m), (m, n), (m, 1)],
        NetKind::Lfista => vec![(m, m), (m, m), (m, n), (m, 1)],
        NetKind::Facnet => vec![(m, m), (m, 1)],
    }
}

/// Writes `model.json` and one matrix file per layer tensor (`layer{k}_{name}.mat`).
pub fn save_network(dir: impl AsRef<Path>, net: &Network, op: &CodingOperator) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let kind = net.kind();
    let (m, n) = (op.atoms(), op.signal_dim());
    let meta = ModelMeta { kind, depth: net.depth(), atoms: m, signal_dim: n, mu: net.mu() };
    fs::write(dir.join(MODEL_META), serde_json::to_string_pretty(&meta)? + "\n")?;
    let names = tensor_names(kind);
    let shapes = tensor_shapes(kind, m, n);
    for (i, t) in net.tensors().into_iter().enumerate() {
        let (layer, slot) = (i / names.len(), i % names.len());
        let (r, c) = shapes[slot];
        let mat = Mat::from_column_slice(r, c, t);
        save_matrix(dir.join(format!("layer{layer}_{}.mat", names[slot])), &mat)?;
    }
    Ok(())
}

pub fn load_network(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_META))?)?;
    let (m, n) = (meta.atoms, meta.signal_dim);
    let names = tensor_names(meta.kind);
    let shapes = tensor_shapes(meta.kind, m, n);
    let mut layer_tensors = Vec::with_capacity(meta.depth);
    for layer in 0..meta.depth {
        let mut ts = Vec::with_capacity(names.len());
        for (name, &(r, c)) in names.iter().zip(&shapes) {
            let mat = load_matrix(dir.join(format!("layer{layer}_{name}.mat")))?;
            if mat.shape() != (r, c) {
                return Err(Error::DimensionMismatch(format!(
                    "layer {layer} {name}: expected {r}x{c}, found {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            ts.push(mat);
        }
        layer_tensors.push(ts);
    }
    let col = |m: Mat| -> Vector { m.column(0).into_owned() };
    Ok(match meta.kind {
        NetKind::Lista => Network::Lista(ListaParams {
            layers: layer_tensors
                .into_iter()
                .map(|mut t| {
                    let theta = col(t.pop().unwrap());
                    let w_e = t.pop().unwrap();
                    let w_g = t.pop().unwrap();
                    ListaLayer { w_g, w_e, theta }
                })
                .collect(),
        }),
        NetKind::Lfista => Network::Lfista(LfistaParams {
            layers: layer_tensors
                .into_iter()
                .map(|mut t| {
                    let theta = col(t.pop().unwrap());
                    let w_e = t.pop().unwrap();
                    let w_m = t.pop().unwrap();
                    let w_g = t.pop().unwrap();
                    LfistaLayer { w_g, w_m, w_e, theta }
                })
                .collect(),
        }),
        NetKind::Facnet => Network::Facnet(FacnetParams {
            layers: layer_tensors
                .into_iter()
                .map(|mut t| {
                    let log_s = col(t.pop().unwrap());
                    let a = t.pop().unwrap();
                    FacnetLayer { a, log_s }
                })
                .collect(),
            mu: meta.mu.unwrap_or(TrainConfig::default().mu),
        }),
    })
}

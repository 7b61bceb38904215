//! Graph convolutional layers `H' = g(S·H·W + 1bᵀ)` with hand-written
//! backward passes, the four-layer block, MSE loss, Glorot initialization
//! and Adam.
//!
//! `S` is the symmetric normalized adjacency of the element graph; `H` holds
//! one row per element. Forward passes return caches that the matching
//! backward pass consumes.

mod checkpoint;

pub use checkpoint::{load_blocks, save_blocks, BlockCheckpoint, CHECKPOINT_FORMAT_VERSION};

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::PropagationOperator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams {
    /// `f_in × f_out`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl GcnLayerParams {
    pub fn zeros(f_in: usize, f_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(f_in, f_out),
            b: DVector::zeros(f_out),
        }
    }

    pub fn f_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn f_out(&self) -> usize {
        self.w.ncols()
    }

    fn token(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.w.shape().hash(&mut h);
        for x in self.w.iter().chain(self.b.iter()) {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Values saved by [`gcn_layer_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    /// `S·H`
    sh: DMatrix<f64>,
    /// Pre-activation `S·H·W + 1bᵀ`.
    z: DMatrix<f64>,
    activation: Activation,
    params_token: u64,
    source: String,
}

pub fn gcn_layer_forward(
    s: &PropagationOperator,
    h: &DMatrix<f64>,
    params: &GcnLayerParams,
    activation: Activation,
) -> Result<(DMatrix<f64>, LayerCache)> {
    if h.nrows() != s.dim() || h.ncols() != params.f_in() || params.b.len() != params.f_out() {
        return Err(Error::usage(format!(
            "GCN layer: S is {0}×{0}, H is {1}×{2}, W is {3}×{4}, b has {5}",
            s.dim(),
            h.nrows(),
            h.ncols(),
            params.f_in(),
            params.f_out(),
            params.b.len()
        )));
    }
    let sh = s.apply(h);
    let mut z = &sh * &params.w;
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(params.b[j]);
    }
    let out = z.map(|x| activation.apply(x));
    let cache = LayerCache {
        sh,
        z,
        activation,
        params_token: params.token(),
        source: s.source().to_string(),
    };
    Ok((out, cache))
}

/// Gradients of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub dw: DMatrix<f64>,
    pub db: DVector<f64>,
    pub dh: DMatrix<f64>,
}

pub fn gcn_layer_backward(
    cache: &LayerCache,
    s: &PropagationOperator,
    params: &GcnLayerParams,
    d_out: &DMatrix<f64>,
) -> Result<LayerGrads> {
    if cache.source != s.source() || cache.params_token != params.token() {
        return Err(Error::usage("layer cache was produced by a different operator or parameters"));
    }
    if d_out.shape() != cache.z.shape() {
        return Err(Error::usage(format!(
            "upstream gradient is {:?}, layer output is {:?}",
            d_out.shape(),
            cache.z.shape()
        )));
    }
    let act = cache.activation;
    let g = d_out.zip_map(&cache.z, |d, z| d * act.derivative(z));
    let dw = cache.sh.transpose() * &g;
    let db = DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum()));
    let dh = s.apply(&(&g * params.w.transpose()));
    Ok(LayerGrads { dw, db, dh })
}

/// Feature widths of a block, input first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub widths: Vec<usize>,
}

impl BlockSchedule {
    /// `2 → 250 → 250 → 250 → 1`.
    pub fn standard() -> Self {
        Self {
            widths: vec![2, 250, 250, 250, 1],
        }
    }

    /// `1 → 250 → 250 → 250 → 1`, the residual-network block.
    pub fn residual() -> Self {
        Self {
            widths: vec![1, 250, 250, 250, 1],
        }
    }

    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) || *widths.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "a block schedule needs at least one layer, positive widths and one output feature (got {widths:?})"
            )));
        }
        Ok(Self { widths })
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// ReLU on every layer except the last, which is linear.
    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            Activation::Linear
        } else {
            Activation::Relu
        }
    }
}

impl Default for BlockSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnBlockParams {
    pub schedule: BlockSchedule,
    pub layers: Vec<GcnLayerParams>,
}

impl GcnBlockParams {
    pub fn zeros(schedule: &BlockSchedule) -> Self {
        Self {
            layers: schedule
                .widths
                .windows(2)
                .map(|w| GcnLayerParams::zeros(w[0], w[1]))
                .collect(),
            schedule: schedule.clone(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check(&self) -> Result<()> {
        let ok = self.layers.len() == self.schedule.n_layers()
            && self.layers.iter().enumerate().all(|(i, l)| {
                l.f_in() == self.schedule.widths[i]
                    && l.f_out() == self.schedule.widths[i + 1]
                    && l.b.len() == l.f_out()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::usage("block parameters do not match their schedule"))
        }
    }
}

/// Glorot-uniform weights `U(±√(6/(f_in+f_out)))`, zero biases.
pub fn init_params(seed: u64, schedule: &BlockSchedule) -> GcnBlockParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = GcnBlockParams::zeros(schedule);
    for l in &mut p.layers {
        let a = (6.0 / (l.f_in() + l.f_out()) as f64).sqrt();
        for x in l.w.iter_mut() {
            *x = rng.random_range(-a..=a);
        }
    }
    p
}

/// Caches of the layers of one block forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    layers: Vec<LayerCache>,
}

/// Block output for an `M × f_in` input feature matrix.
pub fn block_forward_features(
    s: &PropagationOperator,
    h0: DMatrix<f64>,
    params: &GcnBlockParams,
) -> Result<(DVector<f64>, BlockCache)> {
    params.check()?;
    let mut h = h0;
    let mut caches = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let (out, cache) = gcn_layer_forward(s, &h, layer, params.schedule.activation(i))?;
        caches.push(cache);
        h = out;
    }
    Ok((h.column(0).into_owned(), BlockCache { layers: caches }))
}

/// `y = block([x, dx])`, no residual.
pub fn block_forward(
    s: &PropagationOperator,
    x: &DVector<f64>,
    dx: &DVector<f64>,
    params: &GcnBlockParams,
) -> Result<(DVector<f64>, BlockCache)> {
    if x.len() != s.dim() || dx.len() != s.dim() {
        return Err(Error::usage(format!(
            "block inputs have lengths {} and {} on a graph of {} nodes",
            x.len(),
            dx.len(),
            s.dim()
        )));
    }
    block_forward_features(s, DMatrix::from_columns(&[x.clone(), dx.clone()]), params)
}

/// Block output only.
pub fn block_apply(
    s: &PropagationOperator,
    x: &DVector<f64>,
    dx: &DVector<f64>,
    params: &GcnBlockParams,
) -> Result<DVector<f64>> {
    Ok(block_forward(s, x, dx, params)?.0)
}

/// Parameter gradients of a block plus the gradient of its input features.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub params: GcnBlockParams,
    /// `M × f_in`; column 0 is `∂/∂x`, column 1 (if any) `∂/∂δx`.
    pub d_input: DMatrix<f64>,
}

pub fn block_backward(
    cache: &BlockCache,
    s: &PropagationOperator,
    params: &GcnBlockParams,
    dy: &DVector<f64>,
) -> Result<BlockGrads> {
    params.check()?;
    if cache.layers.len() != params.layers.len() {
        return Err(Error::usage("block cache has the wrong number of layers"));
    }
    let mut grads = GcnBlockParams::zeros(&params.schedule);
    let mut d = DMatrix::from_column_slice(dy.len(), 1, dy.as_slice());
    for i in (0..params.layers.len()).rev() {
        let g = gcn_layer_backward(&cache.layers[i], s, &params.layers[i], &d)?;
        grads.layers[i].w = g.dw;
        grads.layers[i].b = g.db;
        d = g.dh;
    }
    Ok(BlockGrads {
        params: grads,
        d_input: d,
    })
}

/// `(mean((pred−truth)²), 2(pred−truth)/M)`.
pub fn mse_loss(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::usage(format!(
            "MSE of vectors with lengths {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let r = pred - truth;
    let m = r.len() as f64;
    Ok((r.norm_squared() / m, r * (2.0 / m)))
}

/// Anything Adam can update: a fixed sequence of flat parameter slices.
pub trait ParameterSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

impl ParameterSet for GcnBlockParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }
}

impl ParameterSet for Vec<GcnBlockParams> {
    fn slices(&self) -> Vec<&[f64]> {
        self.iter().flat_map(|b| b.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|b| b.slices_mut()).collect()
    }
}

/// Adds `scale · src` to `dst` slice by slice.
pub fn accumulate<P: ParameterSet>(dst: &mut P, src: &P, scale: f64) {
    for (d, s) in dst.slices_mut().into_iter().zip(src.slices()) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_step<P: ParameterSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.n_params();
    if grads.n_params() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::usage(format!(
            "Adam: {n} parameters, {} gradients, state of {}",
            grads.n_params(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut k = 0;
    for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
        for (w, &gi) in p.iter_mut().zip(g) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            k += 1;
        }
    }
    Ok(())
}

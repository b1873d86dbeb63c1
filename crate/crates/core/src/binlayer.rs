//! 1-bit fully-connected block.
//!
//! Training runs the block in real arithmetic so gradients can pass the sign functions
//! straight through; inference runs the same block on packed bits. Per output channel `j`:
//!
//! ```text
//! out = sign(PReLU(BN(alpha_j * <sign(x), sign(W_j)>)))
//! ```
//!
//! A block flagged as the global-pool stage takes the maximum over the points of each cloud
//! right after the scaled product, then normalizes the pooled vector.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitops::{self, xnor_popcount_matmul, PackedBitMatrix};
use crate::em::{self, GmmChannelState};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, maxpool_points_backward, maxpool_points_forward,
    prelu_backward, prelu_forward, BatchNormState, BnCache, GradBundle, Mode, PReLUState,
    ParamKind, Tensor,
};
use crate::real::Real;
use crate::serde_bits;

/// Smallest value a scale factor may take.
pub const ALPHA_FLOOR: f64 = 1e-8;

#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Straight-through window for activation signs. `None` passes every gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteConfig {
    pub clip: Option<f64>,
}

impl Default for SteConfig {
    fn default() -> Self {
        SteConfig { clip: Some(1.0) }
    }
}

impl SteConfig {
    #[inline]
    fn passes<T: Real>(&self, x: T) -> bool {
        self.clip.is_none_or(|c| x.abs().as_f64() <= c)
    }
}

/// Which form of the reconstruction-loss gradients to use.
///
/// `Analytic` is the exact derivative of `½‖W − α∘sign(W)‖²` with `sign(W)` held fixed.
/// `Published` keeps the published expressions: the weight gradient carries an extra factor
/// `α` and the scale gradient has the opposite sign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradVariant {
    #[default]
    Analytic,
    Published,
}

/// Values retained from [`BiFCLayer::forward_train`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerForwardCache<T> {
    version: u64,
    input_shape: Vec<usize>,
    /// Real input, kept only when the layer binarizes its own input.
    pub input: Option<Tensor<T>>,
    /// ±1 input actually multiplied.
    pub input_sign: Tensor<T>,
    /// Integer ±1 products, `rows × out`.
    pub dots: Tensor<T>,
    pub pool_argmax: Option<Vec<usize>>,
    bn: BnCache<T>,
    /// Batch-norm output (the PReLU input).
    pub pre_activation: Tensor<T>,
    /// Value fed to the output sign.
    pub pre_sign: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BiFCLayer<T: Real> {
    weights: Tensor<T>,
    #[serde(with = "serde_bits")]
    alpha: Vec<T>,
    pub bn: BatchNormState<T>,
    pub prelu: PReLUState<T>,
    gmm: Vec<GmmChannelState>,
    gmm_fitted: bool,
    binarize_input: bool,
    pool: bool,
    pub ste: SteConfig,
    #[serde(skip)]
    version: u64,
    #[serde(skip)]
    cached_binary: Option<(u64, PackedBitMatrix)>,
}

impl<T: Real> BiFCLayer<T> {
    /// Uniform initialization in `±1/sqrt(in)`, scales at their reconstruction optimum and
    /// mixtures initialized from the starting weights.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self::from_weights(Tensor::uniform(&[outputs, inputs], -bound, bound, rng))
            .expect("2-d weights")
    }

    pub fn from_weights(weights: Tensor<T>) -> Result<Self> {
        let (outputs, _) = weights.dims2()?;
        let mut layer = BiFCLayer {
            weights,
            alpha: vec![T::one(); outputs],
            bn: BatchNormState::new(outputs),
            prelu: PReLUState::default(),
            gmm: Vec::new(),
            gmm_fitted: false,
            binarize_input: false,
            pool: false,
            ste: SteConfig::default(),
            version: 0,
            cached_binary: None,
        };
        layer.alpha = layer.optimal_alpha();
        layer.clamp_alpha();
        layer.init_gmm();
        Ok(layer)
    }

    /// Marks the layer as receiving real-valued input that it binarizes itself.
    pub fn with_input_binarization(mut self, on: bool) -> Self {
        self.binarize_input = on;
        self
    }

    /// Marks the layer as the global max-pool stage.
    pub fn with_pool(mut self, on: bool) -> Self {
        self.pool = on;
        self
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn binarizes_input(&self) -> bool {
        self.binarize_input
    }

    pub fn pools(&self) -> bool {
        self.pool
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    pub fn gmm(&self) -> &[GmmChannelState] {
        &self.gmm
    }

    /// Monotone counter bumped on every weight mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_weights(&mut self, weights: Tensor<T>) -> Result<()> {
        if weights.shape() != self.weights.shape() {
            return Err(Error::shape(format!(
                "replacing {:?} weights with {:?}",
                self.weights.shape(),
                weights.shape()
            )));
        }
        self.weights = weights;
        self.version += 1;
        Ok(())
    }

    /// Mutates the latent weights in place and invalidates the packed cache.
    pub fn update_weights(&mut self, f: impl FnOnce(&mut [T])) {
        f(self.weights.data_mut());
        self.version += 1;
    }

    /// Replaces the scales, clamping each to [`ALPHA_FLOOR`].
    pub fn set_alpha(&mut self, alpha: Vec<T>) -> Result<()> {
        if alpha.len() != self.out_features() {
            return Err(Error::shape(format!(
                "{} scales for {} channels",
                alpha.len(),
                self.out_features()
            )));
        }
        self.alpha = alpha;
        self.clamp_alpha();
        Ok(())
    }

    pub fn update_alpha(&mut self, f: impl FnOnce(&mut [T])) {
        f(&mut self.alpha);
        self.clamp_alpha();
    }

    fn clamp_alpha(&mut self) {
        let floor = T::of(ALPHA_FLOOR);
        for a in &mut self.alpha {
            if a.is_nan() || *a < floor {
                *a = floor;
            }
        }
    }

    /// `sign(W)` as a ±1 tensor.
    pub fn binary_weights(&self) -> Tensor<T> {
        self.weights.map(sign)
    }

    pub fn refresh_binary_cache(&mut self) {
        self.cached_binary = Some((self.version, bitops::pack(&self.weights)));
    }

    /// Packed `sign(W)` if the cache matches the current weights.
    pub fn cached_binary(&self) -> Result<&PackedBitMatrix> {
        match &self.cached_binary {
            Some((v, p)) if *v == self.version => Ok(p),
            other => Err(Error::StaleCache {
                weights: self.version,
                cache: other.as_ref().map(|(v, _)| *v),
            }),
        }
    }

    fn packed_weights(&self) -> std::borrow::Cow<'_, PackedBitMatrix> {
        match self.cached_binary() {
            Ok(p) => std::borrow::Cow::Borrowed(p),
            Err(_) => std::borrow::Cow::Owned(bitops::pack(&self.weights)),
        }
    }

    /// Latent weights of output channel `j` in double precision.
    pub fn channel_weights(&self, j: usize) -> Vec<f64> {
        self.weights.row(j).iter().map(|w| w.as_f64()).collect()
    }

    fn init_gmm(&mut self) {
        self.gmm = (0..self.out_features())
            .map(|j| em::init_channel(&self.channel_weights(j)))
            .collect();
        self.gmm_fitted = true;
    }

    /// Runs one E-step and one M-step per output channel on the current weights.
    pub fn refit_gmm(&mut self) -> Result<()> {
        let rows: Vec<Vec<f64>> = (0..self.out_features()).map(|j| self.channel_weights(j)).collect();
        if self.gmm.len() != rows.len() {
            self.init_gmm();
        }
        self.gmm
            .par_iter_mut()
            .zip(rows.par_iter())
            .try_for_each(|(state, w)| em::em_iteration(w, state).map(|_| ()))?;
        // Responsibilities stay current for the refitted parameters.
        self.gmm
            .par_iter_mut()
            .zip(rows.par_iter())
            .for_each(|(state, w)| {
                em::e_step(w, state);
            });
        self.gmm_fitted = true;
        Ok(())
    }

    /// Errors unless every channel has a fitted mixture sized for this layer.
    pub fn check_gmm(&self) -> Result<()> {
        if !self.gmm_fitted || self.gmm.len() != self.out_features() {
            return Err(Error::StaleGmm(format!(
                "{} mixtures for {} channels",
                self.gmm.len(),
                self.out_features()
            )));
        }
        let n = self.in_features();
        if let Some(j) = self.gmm.iter().position(|g| g.resp.len() != n) {
            return Err(Error::StaleGmm(format!(
                "channel {j} has {} responsibilities for {n} weights",
                self.gmm[j].resp.len()
            )));
        }
        Ok(())
    }

    /// Replaces the mixture states (used when restoring checkpoints).
    pub fn set_gmm(&mut self, gmm: Vec<GmmChannelState>) -> Result<()> {
        self.gmm = gmm;
        self.gmm_fitted = true;
        self.check_gmm()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match (self.pool, shape) {
            (true, [_, _, c]) => *c == self.in_features(),
            (false, [.., c]) => *c == self.in_features(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "layer {}→{}{} got input {shape:?}",
                self.in_features(),
                self.out_features(),
                if self.pool { " (pooling)" } else { "" }
            )))
        }
    }

    /// Simulated-binarization forward pass in real arithmetic.
    ///
    /// `x` is `(..., in)`, or `batch × points × in` for the pooling stage. Entries are ±1
    /// unless the layer binarizes its own input.
    pub fn forward_train(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, LayerForwardCache<T>)> {
        let mut bn = self.bn.clone();
        let r = self.forward_core(x, mode, &mut bn)?;
        if mode == Mode::Train {
            self.bn = bn;
        }
        Ok(r)
    }

    /// Eval-mode simulated forward without retaining a cache.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut bn = self.bn.clone();
        Ok(self.forward_core(x, Mode::Eval, &mut bn)?.0)
    }

    fn forward_core(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        bn_state: &mut BatchNormState<T>,
    ) -> Result<(Tensor<T>, LayerForwardCache<T>)> {
        self.check_input(x.shape())?;
        let (input, input_sign) = if self.binarize_input {
            (Some(x.clone()), x.map(sign))
        } else {
            (None, x.clone())
        };
        let (rows, _) = input_sign.rows_cols();
        let out = self.out_features();
        let products = xnor_popcount_matmul(&bitops::pack(&input_sign), &self.packed_weights())?;
        let mut lead = x.shape()[..x.ndim() - 1].to_vec();
        lead.push(out);
        let dots = Tensor::from_vec(&lead, products.data.iter().map(|&d| T::of(d as f64)).collect())?;
        let mut scaled = dots.clone();
        for row in scaled.data_mut().chunks_exact_mut(out) {
            for (v, &a) in row.iter_mut().zip(&self.alpha) {
                *v = a * *v;
            }
        }
        debug_assert_eq!(rows * out, scaled.len());
        let (pre_bn, pool_argmax) = if self.pool {
            let (p, idx) = maxpool_points_forward(&scaled)?;
            (p, Some(idx))
        } else {
            (scaled, None)
        };
        let (bn_out, bn) = batchnorm_forward(&pre_bn, bn_state, mode)?;
        let pre_sign = prelu_forward(&bn_out, &self.prelu);
        let output = pre_sign.map(sign);
        let cache = LayerForwardCache {
            version: self.version,
            input_shape: x.shape().to_vec(),
            input,
            input_sign,
            dots,
            pool_argmax,
            bn,
            pre_activation: bn_out,
            pre_sign,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Straight-through backward pass for [`forward_train`](Self::forward_train).
    ///
    /// The output sign passes gradient where `|pre_sign|` lies inside the STE window; the
    /// weight sign passes it unclipped.
    pub fn ste_backward(&self, grad_out: &Tensor<T>, cache: &LayerForwardCache<T>) -> Result<GradBundle<T>> {
        if cache.version != self.version {
            return Err(Error::CacheMismatch(format!(
                "cache from weight version {}, layer at {}",
                cache.version, self.version
            )));
        }
        if grad_out.shape() != cache.pre_sign.shape() {
            return Err(Error::CacheMismatch(format!(
                "gradient {:?} for output {:?}",
                grad_out.shape(),
                cache.pre_sign.shape()
            )));
        }
        let out = self.out_features();
        let g_sign = grad_out.zip_map(&cache.pre_sign, |g, v| if self.ste.passes(v) { g } else { T::zero() })?;
        let mut bundle = GradBundle::default();
        let g_act = prelu_backward(&g_sign, &cache.pre_activation, &self.prelu)?;
        let g_bn_in = {
            let mut gb = batchnorm_backward(g_act.input.as_ref().expect("input grad"), &cache.bn, &self.bn)?;
            let gi = gb.input.take().expect("input grad");
            bundle.absorb(gb);
            gi
        };
        bundle.absorb(g_act);
        let g_scaled = match &cache.pool_argmax {
            Some(idx) => {
                let points = cache.input_shape[1];
                maxpool_points_backward(&g_bn_in, idx, points)?
            }
            None => g_bn_in,
        };
        let mut g_alpha = vec![0.0f64; out];
        let mut g_dot = g_scaled;
        for (g_row, d_row) in g_dot
            .data_mut()
            .chunks_exact_mut(out)
            .zip(cache.dots.data().chunks_exact(out))
        {
            for j in 0..out {
                g_alpha[j] += (g_row[j] * d_row[j]).as_f64();
                g_row[j] *= self.alpha[j];
            }
        }
        let g_w = g_dot.matmul_tn(&cache.input_sign)?;
        let g_xb = g_dot.matmul_nn(&self.binary_weights())?.reshape(&cache.input_shape)?;
        let g_x = match &cache.input {
            Some(x) => g_xb.zip_map(x, |g, v| if self.ste.passes(v) { g } else { T::zero() })?,
            None => g_xb,
        };
        bundle.input = Some(g_x);
        bundle.insert(ParamKind::Weight, g_w);
        bundle.insert(
            ParamKind::Alpha,
            Tensor::from_vec(&[out], g_alpha.into_iter().map(T::of).collect())?,
        );
        Ok(bundle)
    }

    /// Packed inference: XNOR/popcount product, scale, batch norm with running statistics,
    /// PReLU and sign, repacked as bits.
    ///
    /// `points` is the number of rows per cloud and matters only for the pooling stage. The
    /// packed weight cache must be fresh (see [`refresh_binary_cache`](Self::refresh_binary_cache)).
    pub fn forward_infer(&self, x: &PackedBitMatrix, points: usize) -> Result<PackedBitMatrix> {
        let wbits = self.cached_binary()?;
        if x.cols() != self.in_features() {
            return Err(Error::shape(format!(
                "packed input has {} columns, layer expects {}",
                x.cols(),
                self.in_features()
            )));
        }
        let dots = xnor_popcount_matmul(x, wbits)?;
        let coeffs = self.bn.eval_coeffs();
        let out = self.out_features();
        let finish = |v: T, j: usize| self.prelu.apply(coeffs.apply(v, j)) > T::zero();
        if self.pool {
            if points == 0 || x.rows() % points != 0 {
                return Err(Error::shape(format!(
                    "{} rows do not split into clouds of {points} points",
                    x.rows()
                )));
            }
            let clouds = x.rows() / points;
            let mut bits = PackedBitMatrix::new(clouds, out);
            for b in 0..clouds {
                for j in 0..out {
                    let a = self.alpha[j];
                    let mut m = a * T::of(dots.get(b * points, j) as f64);
                    for p in 1..points {
                        let v = a * T::of(dots.get(b * points + p, j) as f64);
                        if v > m {
                            m = v;
                        }
                    }
                    bits.set(b, j, finish(m, j));
                }
            }
            Ok(bits)
        } else {
            let mut bits = PackedBitMatrix::new(x.rows(), out);
            for r in 0..x.rows() {
                for j in 0..out {
                    let v = self.alpha[j] * T::of(dots.get(r, j) as f64);
                    bits.set(r, j, finish(v, j));
                }
            }
            Ok(bits)
        }
    }

    /// `½ Σ (W − α∘sign(W))²` with `α` broadcast over each output row.
    pub fn reconstruction_loss(&self) -> f64 {
        let n = self.in_features();
        let mut total = 0.0;
        for (row, &a) in self.weights.data().chunks_exact(n).zip(&self.alpha) {
            let a = a.as_f64();
            for &w in row {
                let d = w.as_f64() - a * sign(w.as_f64());
                total += d * d;
            }
        }
        0.5 * total
    }

    /// Gradient of the reconstruction loss with respect to the latent weights.
    pub fn grad_reconstruction_w(&self, variant: GradVariant) -> Tensor<T> {
        let n = self.in_features();
        let mut g = Tensor::zeros(self.weights.shape());
        for ((row, grow), &a) in self
            .weights
            .data()
            .chunks_exact(n)
            .zip(g.data_mut().chunks_exact_mut(n))
            .zip(&self.alpha)
        {
            for (gv, &w) in grow.iter_mut().zip(row) {
                let r = w - a * sign(w);
                *gv = match variant {
                    GradVariant::Analytic => r,
                    GradVariant::Published => r * a,
                };
            }
        }
        g
    }

    /// Gradient of the reconstruction loss with respect to the per-channel scales.
    pub fn grad_reconstruction_alpha(&self, variant: GradVariant) -> Vec<T> {
        let n = self.in_features();
        self.weights
            .data()
            .chunks_exact(n)
            .zip(&self.alpha)
            .map(|(row, &a)| {
                let a = a.as_f64();
                let s: f64 = row
                    .iter()
                    .map(|&w| {
                        let b = sign(w.as_f64());
                        (w.as_f64() - a * b) * b
                    })
                    .sum();
                T::of(match variant {
                    GradVariant::Analytic => -s,
                    GradVariant::Published => s,
                })
            })
            .collect()
    }

    /// Closed-form minimizer of the reconstruction loss: `α_j = mean_n |W_jn|`.
    pub fn optimal_alpha(&self) -> Vec<T> {
        let n = self.in_features().max(1);
        self.weights
            .data()
            .chunks_exact(self.in_features().max(1))
            .map(|row| T::of(row.iter().map(|w| w.as_f64().abs()).sum::<f64>() / n as f64))
            .collect()
    }
}

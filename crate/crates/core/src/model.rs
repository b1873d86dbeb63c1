//! Mini-PointNet: a real input layer, shared per-point 1-bit blocks, a global max-pool and a
//! classifier whose last layer is real.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binlayer::{BiFCLayer, LayerForwardCache};
use crate::bitops::{self, PackedBitMatrix};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, linear_backward, linear_forward, maxpool_points_backward,
    maxpool_points_forward, prelu_backward, prelu_forward, BatchNormState, BnCache, GradBundle, Mode,
    PReLUState, ParamKind, Tensor,
};
use crate::real::Real;

/// Layer widths and binarization policy.
///
/// Layers are numbered input first: `input_dim → point_widths[0]`, then the remaining
/// per-point widths, then the classifier widths. The last per-point layer pools.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub point_widths: Vec<usize>,
    pub classifier_widths: Vec<usize>,
    pub num_classes: usize,
    pub points: usize,
    pub binarize: Vec<bool>,
}

impl ModelSpec {
    /// Default desk-scale topology: per-point `[64, 64, 128, 256]`, classifier `[128, C]`,
    /// every layer binarized except the first and last.
    pub fn new(num_classes: usize, points: usize) -> Self {
        let point_widths = vec![64, 64, 128, 256];
        let classifier_widths = vec![128, num_classes];
        let n = point_widths.len() + classifier_widths.len();
        ModelSpec {
            input_dim: 3,
            point_widths,
            classifier_widths,
            num_classes,
            points,
            binarize: (0..n).map(|i| i != 0 && i + 1 != n).collect(),
        }
    }

    /// Same widths with every layer real-valued.
    pub fn real_control(mut self) -> Self {
        self.binarize.iter_mut().for_each(|b| *b = false);
        self
    }

    pub fn layer_count(&self) -> usize {
        self.point_widths.len() + self.classifier_widths.len()
    }

    /// Index of the layer that max-pools over points.
    pub fn pool_layer(&self) -> usize {
        self.point_widths.len() - 1
    }

    /// `(in, out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.point_widths.iter().copied())
            .chain(self.classifier_widths.iter().copied())
            .collect();
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.point_widths.is_empty() || self.classifier_widths.is_empty() {
            return bad("need at least one per-point and one classifier layer".into());
        }
        if self.input_dim == 0 || self.point_widths.iter().chain(&self.classifier_widths).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.classifier_widths.last() != Some(&self.num_classes) {
            return bad(format!(
                "last classifier width {:?} differs from {} classes",
                self.classifier_widths.last(),
                self.num_classes
            ));
        }
        if self.points == 0 {
            return bad("points per cloud must be positive".into());
        }
        let n = self.layer_count();
        if self.binarize.len() != n {
            return bad(format!("{} binarize flags for {n} layers", self.binarize.len()));
        }
        if self.binarize[0] || self.binarize[n - 1] {
            return bad("first and last layers must stay real-valued".into());
        }
        Ok(())
    }
}

/// Real-valued layer: linear map, optional pool over points, then optional BN and PReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RealLayer<T: Real> {
    weights: Tensor<T>,
    bias: Option<Tensor<T>>,
    pub bn: Option<BatchNormState<T>>,
    pub prelu: Option<PReLUState<T>>,
    pool: bool,
}

#[derive(Clone, Debug)]
pub struct RealLayerCache<T> {
    input: Tensor<T>,
    points: usize,
    pool_argmax: Option<Vec<usize>>,
    bn: Option<BnCache<T>>,
    /// PReLU input.
    pre_activation: Tensor<T>,
}

impl<T: Real> RealLayer<T> {
    /// Hidden layer (`with_bias = false`, BN and PReLU) or output layer (bias only).
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, hidden: bool, pool: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        RealLayer {
            weights: Tensor::uniform(&[outputs, inputs], -bound, bound, rng),
            bias: (!hidden).then(|| Tensor::zeros(&[outputs])),
            bn: hidden.then(|| BatchNormState::new(outputs)),
            prelu: hidden.then(PReLUState::default),
            pool,
        }
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_ref().map(|b| b.data())
    }

    pub fn pools(&self) -> bool {
        self.pool
    }

    fn forward_core(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        bn: Option<&mut BatchNormState<T>>,
    ) -> Result<(Tensor<T>, RealLayerCache<T>)> {
        let y = linear_forward(x, &self.weights, self.bias())?;
        let (y, pool_argmax, points) = if self.pool {
            let points = y.shape().get(1).copied().unwrap_or(0);
            let (p, idx) = maxpool_points_forward(&y)?;
            (p, Some(idx), points)
        } else {
            (y, None, 0)
        };
        let (y, bn_cache) = match bn {
            Some(state) => {
                let (y, c) = batchnorm_forward(&y, state, mode)?;
                (y, Some(c))
            }
            None => (y, None),
        };
        let out = match &self.prelu {
            Some(p) => prelu_forward(&y, p),
            None => y.clone(),
        };
        Ok((
            out,
            RealLayerCache {
                input: x.clone(),
                points,
                pool_argmax,
                bn: bn_cache,
                pre_activation: y,
            },
        ))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, RealLayerCache<T>)> {
        let mut bn = self.bn.clone();
        let r = self.forward_core(x, mode, bn.as_mut())?;
        if mode == Mode::Train {
            self.bn = bn;
        }
        Ok(r)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut bn = self.bn.clone();
        Ok(self.forward_core(x, Mode::Eval, bn.as_mut())?.0)
    }

    pub fn backward(&self, grad_out: &Tensor<T>, cache: &RealLayerCache<T>) -> Result<GradBundle<T>> {
        let mut bundle = GradBundle::default();
        let mut g = grad_out.clone();
        if let Some(p) = &self.prelu {
            let mut gb = prelu_backward(&g, &cache.pre_activation, p)?;
            g = gb.input.take().expect("input grad");
            bundle.absorb(gb);
        }
        if let (Some(state), Some(c)) = (&self.bn, &cache.bn) {
            let mut gb = batchnorm_backward(&g, c, state)?;
            g = gb.input.take().expect("input grad");
            bundle.absorb(gb);
        }
        if let Some(idx) = &cache.pool_argmax {
            g = maxpool_points_backward(&g, idx, cache.points)?;
        }
        let mut gb = linear_backward(&cache.input, &self.weights, &g, self.bias.is_some())?;
        bundle.input = gb.input.take();
        bundle.absorb(gb);
        Ok(bundle)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum Layer<T: Real> {
    Real(RealLayer<T>),
    Binary(BiFCLayer<T>),
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum LayerCache<T> {
    Real(RealLayerCache<T>),
    Binary(LayerForwardCache<T>),
}

impl<T: Real> Layer<T> {
    pub fn as_binary(&self) -> Option<&BiFCLayer<T>> {
        match self {
            Layer::Binary(b) => Some(b),
            Layer::Real(_) => None,
        }
    }

    pub fn as_binary_mut(&mut self) -> Option<&mut BiFCLayer<T>> {
        match self {
            Layer::Binary(b) => Some(b),
            Layer::Real(_) => None,
        }
    }

    pub fn weights(&self) -> &Tensor<T> {
        match self {
            Layer::Real(l) => l.weights(),
            Layer::Binary(l) => l.weights(),
        }
    }

    /// Learnable parameter kinds present in this layer, in registry order.
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut kinds = vec![ParamKind::Weight];
        match self {
            Layer::Real(l) => {
                if l.bias.is_some() {
                    kinds.push(ParamKind::Bias);
                }
                if l.bn.is_some() {
                    kinds.extend([ParamKind::BnScale, ParamKind::BnShift]);
                }
                if l.prelu.is_some() {
                    kinds.push(ParamKind::PReluSlope);
                }
            }
            Layer::Binary(_) => {
                kinds.extend([ParamKind::Alpha, ParamKind::BnScale, ParamKind::BnShift, ParamKind::PReluSlope])
            }
        }
        kinds
    }

    /// Current values of one parameter.
    pub fn param(&self, kind: ParamKind) -> Option<&[T]> {
        let (bn, prelu) = match self {
            Layer::Real(l) => (l.bn.as_ref(), l.prelu.as_ref()),
            Layer::Binary(l) => (Some(&l.bn), Some(&l.prelu)),
        };
        match kind {
            ParamKind::Weight => Some(self.weights().data()),
            ParamKind::Bias => match self {
                Layer::Real(l) => l.bias(),
                Layer::Binary(_) => None,
            },
            ParamKind::Alpha => self.as_binary().map(|l| l.alpha()),
            ParamKind::BnScale => bn.map(|b| &b.scale[..]),
            ParamKind::BnShift => bn.map(|b| &b.shift[..]),
            ParamKind::PReluSlope => prelu.map(|p| std::slice::from_ref(&p.slope)),
        }
    }

    /// Applies `f` to one parameter in place, keeping layer invariants (weight versioning,
    /// positive scales, PReLU slopes at or above the floor). Returns `false` if the layer has no such parameter.
    pub fn update_param(&mut self, kind: ParamKind, f: impl FnOnce(&mut [T])) -> bool {
        match (self, kind) {
            (Layer::Binary(l), ParamKind::Weight) => l.update_weights(f),
            (Layer::Binary(l), ParamKind::Alpha) => l.update_alpha(f),
            (Layer::Binary(l), ParamKind::BnScale) => f(&mut l.bn.scale),
            (Layer::Binary(l), ParamKind::BnShift) => f(&mut l.bn.shift),
            (Layer::Binary(l), ParamKind::PReluSlope) => {
                f(std::slice::from_mut(&mut l.prelu.slope));
                l.prelu.clamp_slope();
            }
            (Layer::Real(l), ParamKind::Weight) => f(l.weights.data_mut()),
            (Layer::Real(l), ParamKind::Bias) => match &mut l.bias {
                Some(b) => f(b.data_mut()),
                None => return false,
            },
            (Layer::Real(l), ParamKind::BnScale) => match &mut l.bn {
                Some(b) => f(&mut b.scale),
                None => return false,
            },
            (Layer::Real(l), ParamKind::BnShift) => match &mut l.bn {
                Some(b) => f(&mut b.shift),
                None => return false,
            },
            (Layer::Real(l), ParamKind::PReluSlope) => match &mut l.prelu {
                Some(p) => {
                    f(std::slice::from_mut(&mut p.slope));
                    p.clamp_slope();
                }
                None => return false,
            },
            _ => return false,
        }
        true
    }

    pub fn parameter_count(&self) -> usize {
        self.param_kinds().iter().filter_map(|&k| self.param(k)).map(|p| p.len()).sum()
    }
}

/// How [`Model::predict_with`] evaluates the binary blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferencePath {
    /// Real arithmetic on ±1 values.
    Simulated,
    /// XNOR/popcount on packed bits.
    Packed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    pub layers: Vec<LayerCache<T>>,
}

/// Clouds per chunk when predicting.
const PREDICT_CHUNK: usize = 64;

impl<T: Real> Model<T> {
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let n = dims.len();
        let pool = spec.pool_layer();
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(inp, out))| {
                if spec.binarize[i] {
                    Layer::Binary(
                        BiFCLayer::new(inp, out, rng)
                            .with_input_binarization(!spec.binarize[i - 1])
                            .with_pool(i == pool),
                    )
                } else {
                    Layer::Real(RealLayer::new(inp, out, i + 1 != n, i == pool, rng))
                }
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn binary_layers(&self) -> impl Iterator<Item = &BiFCLayer<T>> {
        self.layers.iter().filter_map(Layer::as_binary)
    }

    pub fn binary_layers_mut(&mut self) -> impl Iterator<Item = &mut BiFCLayer<T>> {
        self.layers.iter_mut().filter_map(Layer::as_binary_mut)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Sum of the reconstruction losses of all binary layers.
    pub fn reconstruction_loss(&self) -> f64 {
        self.binary_layers().map(|l| l.reconstruction_loss()).sum()
    }

    /// Checks layer shapes against the spec, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let dims = self.spec.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::format("model", format!("{} layers for {} in spec", self.layers.len(), dims.len())));
        }
        for (i, (layer, &(inp, out))) in self.layers.iter().zip(&dims).enumerate() {
            let w = layer.weights();
            if w.shape() != [out, inp] || w.len() != inp * out {
                return Err(Error::format("model", format!("layer {i} weights {:?}, expected [{out}, {inp}]", w.shape())));
            }
            if layer.as_binary().is_some() != self.spec.binarize[i] {
                return Err(Error::format("model", format!("layer {i} binarization differs from spec")));
            }
            for kind in layer.param_kinds() {
                let len = layer.param(kind).map_or(0, <[T]>::len);
                let want = match kind {
                    ParamKind::Weight => inp * out,
                    ParamKind::PReluSlope => 1,
                    _ => out,
                };
                if len != want {
                    return Err(Error::format("model", format!("layer {i} {kind:?} has {len} values, expected {want}")));
                }
            }
            if let Some(b) = layer.as_binary() {
                b.check_gmm().map_err(|e| Error::format("model", format!("layer {i}: {e}")))?;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [_, n, d] if *n > 0 && *d == self.spec.input_dim => Ok(()),
            s => Err(Error::shape(format!(
                "expected clouds batch x points x {}, got {s:?}",
                self.spec.input_dim
            ))),
        }
    }

    /// Training-path forward over `x: batch × points × 3`, returning logits and caches.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ModelCache<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (y, c) = match layer {
                Layer::Real(l) => {
                    let (y, c) = l.forward_train(&h, mode)?;
                    (y, LayerCache::Real(c))
                }
                Layer::Binary(l) => {
                    let (y, c) = l.forward_train(&h, mode)?;
                    (y, LayerCache::Binary(c))
                }
            };
            caches.push(c);
            h = y;
        }
        Ok((h, ModelCache { layers: caches }))
    }

    /// Per-layer gradients, input layer first.
    pub fn backward(&self, grad_logits: &Tensor<T>, cache: &ModelCache<T>) -> Result<Vec<GradBundle<T>>> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "{} cached layers for a {}-layer model",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_logits.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let mut bundle = match (layer, c) {
                (Layer::Real(l), LayerCache::Real(c)) => l.backward(&g, c)?,
                (Layer::Binary(l), LayerCache::Binary(c)) => l.ste_backward(&g, c)?,
                _ => return Err(Error::CacheMismatch("layer kind differs from cache".into())),
            };
            if let Some(gi) = bundle.input.take() {
                g = gi;
            }
            grads.push(bundle);
        }
        grads.reverse();
        Ok(grads)
    }

    fn forward_eval_chunk(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Real(l) => l.forward_eval(&h)?,
                Layer::Binary(l) => l.forward_eval(&h)?,
            };
        }
        Ok(h)
    }

    /// Refreshes the packed weight caches of all binary layers.
    pub fn prepare_packed(&mut self) {
        for l in self.binary_layers_mut() {
            l.refresh_binary_cache();
        }
    }

    fn forward_packed_chunk(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        enum Act<T> {
            Real(Tensor<T>),
            Bits(PackedBitMatrix),
        }
        let (batch, points) = (x.shape()[0], x.shape()[1]);
        let mut pooled = false;
        let mut act = Act::Real(x.clone());
        for layer in &self.layers {
            act = match layer {
                Layer::Binary(l) => {
                    let bits = match act {
                        Act::Bits(b) => b,
                        Act::Real(t) => bitops::pack(&t),
                    };
                    let out = l.forward_infer(&bits, points)?;
                    pooled |= l.pools();
                    Act::Bits(out)
                }
                Layer::Real(l) => {
                    let t = match act {
                        Act::Real(t) => t,
                        Act::Bits(b) => {
                            let shape: Vec<usize> = if pooled {
                                vec![batch, b.cols()]
                            } else {
                                vec![batch, points, b.cols()]
                            };
                            Tensor::from_vec(&shape, b.unpack_vec())?
                        }
                    };
                    pooled |= l.pools();
                    Act::Real(l.forward_eval(&t)?)
                }
            };
        }
        match act {
            Act::Real(t) => Ok(t),
            Act::Bits(b) => Tensor::from_vec(&[batch, b.cols()], b.unpack_vec()),
        }
    }

    /// Eval-mode class scores for `x: batch × points × 3`.
    pub fn predict_with(&self, x: &Tensor<T>, path: InferencePath) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (batch, points, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let per = points * d;
        let mut scores = Vec::with_capacity(batch * self.spec.num_classes);
        for chunk in x.data().chunks(PREDICT_CHUNK * per) {
            let xc = Tensor::from_vec(&[chunk.len() / per, points, d], chunk.to_vec())?;
            let y = match path {
                InferencePath::Simulated => self.forward_eval_chunk(&xc)?,
                InferencePath::Packed => self.forward_packed_chunk(&xc)?,
            };
            scores.extend_from_slice(y.data());
        }
        Tensor::from_vec(&[batch, self.spec.num_classes], scores)
    }

    /// Simulated-binarization prediction.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(x, InferencePath::Simulated)
    }

    /// Packed XNOR/popcount prediction; requires [`prepare_packed`](Self::prepare_packed).
    pub fn predict_packed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(x, InferencePath::Packed)
    }

    /// Runs one E-step and M-step on every binary layer's mixtures.
    pub fn refit_gmm(&mut self) -> Result<()> {
        for l in self.binary_layers_mut() {
            l.refit_gmm()?;
        }
        Ok(())
    }
}

/// Index of the largest score per row (first on ties).
pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let (_, c) = scores.rows_cols();
    scores
        .data()
        .chunks_exact(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

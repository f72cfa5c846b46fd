//! Dense feed-forward networks with hand-derived reverse-mode gradients.
//!
//! A `Network` is a stack of dense layers. The final layer is the classifier
//! (identity activation, produces logits); everything before it is the
//! encoder. The classifier consumes the raw encoder output; the L2-normalized
//! encoder features are kept separately for centroid and queue math, and the
//! backward pass chains feature-space gradients through that normalization.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{normalize_rows, row_norms, softmax_rows};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `post = act(x W^T + b)`, weights shaped `[out, in]`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Layer {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    /// He-normal initialized weights, zero bias.
    pub fn he_init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng));
        Layer {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Encoder + linear classifier. The last layer must use the identity
/// activation; its input width is the feature dimension `F`.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::contract(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::contract("classifier layer must be identity"));
        }
        let net = Network { layers };
        if !net.params_finite() {
            return Err(Error::contract("network parameters must be finite"));
        }
        Ok(net)
    }

    /// Default lab architecture: two ReLU encoder layers (hidden width 32,
    /// feature width 16) and a linear classifier.
    pub fn default_arch<R: Rng + ?Sized>(input_dim: usize, n_classes: usize, rng: &mut R) -> Self {
        let layers = vec![
            Layer::he_init(input_dim, 32, Activation::Relu, rng),
            Layer::he_init(32, 16, Activation::Relu, rng),
            Layer::he_init(16, n_classes, Activation::Identity, rng),
        ];
        Network::new(layers).expect("default architecture is valid")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Feature dimension F: the classifier's input width. For a single-layer
    /// network the encoder is the identity and F equals the input width.
    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flat parameter accessor (weights row-major, then bias, per layer).
    /// Used by the finite-difference checker; panics on out-of-range index.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.weights.len() {
                return *l.weights.as_slice().unwrap().get(idx).unwrap();
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                l.weights.as_slice_mut().unwrap()[idx] = value;
                return;
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                l.bias[idx] = value;
                return;
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

/// Everything the backward pass needs, plus the quantities downstream
/// modules read: raw encoder output, normalized features, logits, softmax.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    preacts: Vec<Array2<f64>>,
    posts: Vec<Array2<f64>>,
    /// Raw (un-normalized) encoder output, shape [N, F].
    pub features: Array2<f64>,
    pub feature_norms: Array1<f64>,
    /// Row-normalized encoder features, shape [N, F].
    pub z: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl ForwardCache {
    pub fn n_points(&self) -> usize {
        self.logits.nrows()
    }

    /// Smallest pre-activation magnitude in a layer. Used by the gradient
    /// checker to reject instances sitting on a ReLU kink.
    pub fn preact_abs_min(&self, layer: usize) -> f64 {
        self.preacts[layer]
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros((l.out_dim(), l.in_dim())),
                        Array1::zeros(l.out_dim()),
                    )
                })
                .collect(),
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
        self
    }

    pub fn add(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }
}

/// Runs the network on a batch of row vectors.
pub fn forward(net: &Network, x: &ArrayView2<f64>) -> Result<ForwardCache> {
    if x.ncols() != net.input_dim() {
        return Err(Error::contract(format!(
            "input width {} does not match first layer input {}",
            x.ncols(),
            net.input_dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::contract("forward requires at least one row"));
    }
    let n_layers = net.layers.len();
    let mut preacts = Vec::with_capacity(n_layers);
    let mut posts = Vec::with_capacity(n_layers);
    let mut cur = x.to_owned();
    for layer in &net.layers {
        let mut pre = cur.dot(&layer.weights.t());
        pre += &layer.bias;
        let post = match layer.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
        };
        preacts.push(pre);
        posts.push(post.clone());
        cur = post;
    }
    // Encoder output: input to the classifier layer.
    let features = if n_layers >= 2 {
        posts[n_layers - 2].clone()
    } else {
        x.to_owned()
    };
    let feature_norms = row_norms(&features.view());
    let z = normalize_rows(&features.view(), NORM_EPS);
    let logits = posts[n_layers - 1].clone();
    let probs = softmax_rows(&logits.view());
    Ok(ForwardCache {
        input: x.to_owned(),
        preacts,
        posts,
        features,
        feature_norms,
        z,
        logits,
        probs,
    })
}

/// Exact reverse-mode gradients of `logit_loss + feature_loss`.
///
/// `d_logits` is the loss gradient at the logits; `d_features` is the loss
/// gradient at the *normalized* features z and is chained through the row
/// normalization before entering the encoder.
pub fn backward(
    net: &Network,
    cache: &ForwardCache,
    d_logits: &ArrayView2<f64>,
    d_features: &ArrayView2<f64>,
) -> Result<Gradients> {
    let n = cache.n_points();
    let f_dim = net.feature_dim();
    if d_logits.dim() != (n, net.n_classes()) {
        return Err(Error::contract(format!(
            "d_logits shape {:?} does not match [{}, {}]",
            d_logits.dim(),
            n,
            net.n_classes()
        )));
    }
    if d_features.dim() != (n, f_dim) {
        return Err(Error::contract(format!(
            "d_features shape {:?} does not match [{}, {}]",
            d_features.dim(),
            n,
            f_dim
        )));
    }

    let n_layers = net.layers.len();
    let mut grads = Vec::with_capacity(n_layers);
    let mut d_post = d_logits.to_owned();

    for i in (0..n_layers).rev() {
        let layer = &net.layers[i];
        let d_pre = match layer.activation {
            Activation::Identity => d_post,
            Activation::Relu => {
                let mut d = d_post;
                d.zip_mut_with(&cache.preacts[i], |g, &p| {
                    *g *= Activation::Relu.derivative(p)
                });
                d
            }
        };
        let layer_input = if i == 0 {
            cache.input.view()
        } else {
            cache.posts[i - 1].view()
        };
        let dw = d_pre.t().dot(&layer_input);
        let db = d_pre.sum_axis(Axis(0));
        grads.push((dw, db));
        let mut d_in = d_pre.dot(&layer.weights);
        if i == n_layers - 1 {
            // The classifier input is the raw encoder output h. Add the
            // feature path: dL/dh = (g - (g . z) z) / ||h|| per row.
            for r in 0..n {
                let norm = cache.feature_norms[r];
                if norm < NORM_EPS {
                    continue;
                }
                let g = d_features.row(r);
                let z = cache.z.row(r);
                let gz: f64 = g.dot(&z);
                for c in 0..f_dim {
                    d_in[[r, c]] += (g[c] - gz * z[c]) / norm;
                }
            }
            if n_layers == 1 {
                // Single-layer net: the "encoder" is the identity, so the
                // feature path ends at the input and no parameters see it.
                break;
            }
        }
        d_post = d_in;
    }

    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Plain gradient-descent update: `theta <- theta - lr * g`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::contract("learning rate must be positive and finite"));
    }
    if grads.layers.len() != net.layers.len() {
        return Err(Error::contract("gradient layer count mismatch"));
    }
    for (i, ((gw, gb), layer)) in grads.layers.iter().zip(&net.layers).enumerate() {
        if gw.dim() != layer.weights.dim() || gb.len() != layer.bias.len() {
            return Err(Error::contract(format!("gradient shape mismatch in layer {i}")));
        }
        if gw.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence(format!("non-finite gradient in layer {i} weights")));
        }
        if gb.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence(format!("non-finite gradient in layer {i} bias")));
        }
    }
    for ((gw, gb), layer) in grads.layers.iter().zip(&mut net.layers) {
        layer.weights.scaled_add(-lr, gw);
        layer.bias.scaled_add(-lr, gb);
    }
    Ok(())
}

/// Exponential moving average: `teacher <- (1 - lambda) * student + lambda * teacher`.
pub fn ema_update(teacher: &mut Network, student: &Network, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("ema momentum {lambda} outside [0, 1]")));
    }
    if teacher.layers.len() != student.layers.len() {
        return Err(Error::contract("teacher/student layer count mismatch"));
    }
    for (t, s) in teacher.layers.iter_mut().zip(&student.layers) {
        if t.weights.dim() != s.weights.dim() {
            return Err(Error::contract("teacher/student shape mismatch"));
        }
        t.weights.zip_mut_with(&s.weights, |tv, &sv| {
            *tv = (1.0 - lambda) * sv + lambda * *tv;
        });
        t.bias.zip_mut_with(&s.bias, |tv, &sv| {
            *tv = (1.0 - lambda) * sv + lambda * *tv;
        });
    }
    Ok(())
}

/// Which sensor stream a network pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Appearance2d,
    Geometry3d,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Appearance2d, Modality::Geometry3d];

    pub fn index(&self) -> usize {
        match self {
            Modality::Appearance2d => 0,
            Modality::Geometry3d => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Modality::Appearance2d => "2d",
            Modality::Geometry3d => "3d",
        }
    }
}

/// Fast student and slow EMA teacher for one modality.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub student: Network,
    pub teacher: Network,
    pub modality: Modality,
}

impl ModelPair {
    /// Teacher starts as an exact copy of the student.
    pub fn from_student(student: Network, modality: Modality) -> Self {
        ModelPair {
            teacher: student.clone(),
            student,
            modality,
        }
    }
}

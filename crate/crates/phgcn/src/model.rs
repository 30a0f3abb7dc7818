//! The part-graph model: blended graph-convolution layers, an appearance
//! projection, feature fusion, per-part classifiers, and exact analytic
//! backpropagation through all of it.
//!
//! Propagation per layer: `H' = relu((eps * A_norm * H + (1 - eps) * H) * theta)`,
//! with `eps` the fraction of information a node takes from its neighbors.
//! The appearance stream is `F = relu(X * proj)`; fusion is `Z = H_final +
//! beta * F`. Each part gets its own affine classifier; the loss is the
//! mean softmax cross-entropy over parts.
//!
//! Gradients are hand-derived. The adjacency is treated as a constant (no
//! gradient flows through the edge weights), and the ReLU subgradient at
//! zero is zero.

use ndarray::{Array1, Array2, NdFloat};
use serde::{Deserialize, Serialize};

use crate::dataset::PartFeatureSet;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::rng::Xoshiro256StarStar;

/// How the Eq-1 scale parameter is chosen per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum DeltaPolicy {
    /// Mean edge distance of the image's part features (1 when degenerate).
    #[default]
    Auto,
    /// A fixed positive value.
    Fixed(f64),
}


/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub eps: f64,
    pub beta: f64,
    pub delta: DeltaPolicy,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            eps: 0.75,
            beta: 0.3,
            delta: DeltaPolicy::Auto,
            hidden_dim: 256,
            num_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!(
                "model.eps must lie strictly inside (0, 1), got {}",
                self.eps
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "model.beta must be finite and nonnegative, got {}",
                self.beta
            )));
        }
        if let DeltaPolicy::Fixed(d) = self.delta {
            if !d.is_finite() || d <= 0.0 {
                return Err(Error::Config(format!(
                    "model.delta must be positive when fixed, got {d}"
                )));
            }
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("model.hidden_dim must be positive".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("model.num_layers must be positive".into()));
        }
        Ok(())
    }
}

/// One per-part affine head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// All trainable tensors plus the blending hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub theta: Vec<Array2<F>>,
    pub proj: Array2<F>,
    pub classifiers: Vec<Classifier<F>>,
    pub eps: F,
    pub beta: F,
}

/// Learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Gcn,
    Head,
}

impl<F: NdFloat> ModelParams<F> {
    pub fn input_dim(&self) -> usize {
        self.proj.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj.ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.theta.len()
    }

    pub fn num_parts(&self) -> usize {
        self.classifiers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classifiers.first().map_or(0, |c| c.bias.len())
    }

    /// Tensors in canonical order: theta layers, projection, then each
    /// part's classifier weight and bias.
    pub fn num_tensors(&self) -> usize {
        self.theta.len() + 1 + 2 * self.classifiers.len()
    }

    pub fn tensor_name(&self, k: usize) -> String {
        let t = self.theta.len();
        if k < t {
            format!("theta{k}")
        } else if k == t {
            "proj".to_string()
        } else {
            let rest = k - t - 1;
            let part = rest / 2;
            if rest.is_multiple_of(2) {
                format!("classifier{part}.weight")
            } else {
                format!("classifier{part}.bias")
            }
        }
    }

    pub fn tensor_group(&self, k: usize) -> ParamGroup {
        if k < self.theta.len() {
            ParamGroup::Gcn
        } else {
            ParamGroup::Head
        }
    }

    pub fn tensor(&self, k: usize) -> &[F] {
        let t = self.theta.len();
        if k < t {
            self.theta[k].as_slice().expect("standard layout")
        } else if k == t {
            self.proj.as_slice().expect("standard layout")
        } else {
            let rest = k - t - 1;
            let c = &self.classifiers[rest / 2];
            if rest.is_multiple_of(2) {
                c.weight.as_slice().expect("standard layout")
            } else {
                c.bias.as_slice().expect("standard layout")
            }
        }
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut [F] {
        let t = self.theta.len();
        if k < t {
            self.theta[k].as_slice_mut().expect("standard layout")
        } else if k == t {
            self.proj.as_slice_mut().expect("standard layout")
        } else {
            let rest = k - t - 1;
            let c = &mut self.classifiers[rest / 2];
            if rest.is_multiple_of(2) {
                c.weight.as_slice_mut().expect("standard layout")
            } else {
                c.bias.as_slice_mut().expect("standard layout")
            }
        }
    }

    /// Cast every tensor and hyperparameter to another float width.
    pub fn cast<G: NdFloat>(&self) -> ModelParams<G> {
        let conv2 = |a: &Array2<F>| a.mapv(|v| G::from(v).expect("float cast"));
        ModelParams {
            theta: self.theta.iter().map(conv2).collect(),
            proj: conv2(&self.proj),
            classifiers: self
                .classifiers
                .iter()
                .map(|c| Classifier {
                    weight: conv2(&c.weight),
                    bias: c.bias.mapv(|v| G::from(v).expect("float cast")),
                })
                .collect(),
            eps: G::from(self.eps).expect("float cast"),
            beta: G::from(self.beta).expect("float cast"),
        }
    }
}

/// Gradient of the loss with respect to every trainable tensor, mirroring
/// the canonical tensor order of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub theta: Vec<Array2<F>>,
    pub proj: Array2<F>,
    pub classifiers: Vec<Classifier<F>>,
}

impl<F: NdFloat> Gradients<F> {
    pub fn zeros_like(params: &ModelParams<F>) -> Self {
        Gradients {
            theta: params.theta.iter().map(|t| Array2::zeros(t.dim())).collect(),
            proj: Array2::zeros(params.proj.dim()),
            classifiers: params
                .classifiers
                .iter()
                .map(|c| Classifier {
                    weight: Array2::zeros(c.weight.dim()),
                    bias: Array1::zeros(c.bias.len()),
                })
                .collect(),
        }
    }

    pub fn num_tensors(&self) -> usize {
        self.theta.len() + 1 + 2 * self.classifiers.len()
    }

    pub fn tensor(&self, k: usize) -> &[F] {
        let t = self.theta.len();
        if k < t {
            self.theta[k].as_slice().expect("standard layout")
        } else if k == t {
            self.proj.as_slice().expect("standard layout")
        } else {
            let rest = k - t - 1;
            let c = &self.classifiers[rest / 2];
            if rest.is_multiple_of(2) {
                c.weight.as_slice().expect("standard layout")
            } else {
                c.bias.as_slice().expect("standard layout")
            }
        }
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut [F] {
        let t = self.theta.len();
        if k < t {
            self.theta[k].as_slice_mut().expect("standard layout")
        } else if k == t {
            self.proj.as_slice_mut().expect("standard layout")
        } else {
            let rest = k - t - 1;
            let c = &mut self.classifiers[rest / 2];
            if rest.is_multiple_of(2) {
                c.weight.as_slice_mut().expect("standard layout")
            } else {
                c.bias.as_slice_mut().expect("standard layout")
            }
        }
    }

    /// Accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += b;
        }
        self.proj += &other.proj;
        for (a, b) in self.classifiers.iter_mut().zip(&other.classifiers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, factor: F) {
        for t in &mut self.theta {
            t.mapv_inplace(|v| v * factor);
        }
        self.proj.mapv_inplace(|v| v * factor);
        for c in &mut self.classifiers {
            c.weight.mapv_inplace(|v| v * factor);
            c.bias.mapv_inplace(|v| v * factor);
        }
    }
}

/// Initialize parameters: uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// for matrices, zero biases. Draw order is theta layers (row-major),
/// projection, then per-part classifier weights. Values are drawn in f64
/// and cast, so the f32 and f64 initializations correspond.
pub fn init_params<F: NdFloat>(
    input_dim: usize,
    num_classes: usize,
    num_parts: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ModelParams<F>> {
    cfg.validate()?;
    if input_dim == 0 || num_classes == 0 || num_parts == 0 {
        return Err(Error::Config(format!(
            "init needs positive dims, got input_dim={input_dim}, \
             num_classes={num_classes}, num_parts={num_parts}"
        )));
    }
    let mut rng = Xoshiro256StarStar::from_seed(seed);
    let mut draw_matrix = |rows: usize, cols: usize| -> Array2<F> {
        let bound = 1.0 / (rows as f64).sqrt();
        let data: Vec<F> = (0..rows * cols)
            .map(|_| F::from((2.0 * rng.next_f64() - 1.0) * bound).expect("float cast"))
            .collect();
        Array2::from_shape_vec((rows, cols), data).expect("shape matches")
    };

    let mut theta = Vec::with_capacity(cfg.num_layers);
    let mut d_in = input_dim;
    for _ in 0..cfg.num_layers {
        theta.push(draw_matrix(d_in, cfg.hidden_dim));
        d_in = cfg.hidden_dim;
    }
    let proj = draw_matrix(input_dim, cfg.hidden_dim);
    let classifiers = (0..num_parts)
        .map(|_| Classifier {
            weight: draw_matrix(cfg.hidden_dim, num_classes),
            bias: Array1::zeros(num_classes),
        })
        .collect();

    Ok(ModelParams {
        theta,
        proj,
        classifiers,
        eps: F::from(cfg.eps).expect("float cast"),
        beta: F::from(cfg.beta).expect("float cast"),
    })
}

/// Pool an image and build its normalized adjacency in one step.
pub fn prepare_image<F: NdFloat>(
    fmap: &crate::dataset::FeatureMap,
    spec: &crate::dataset::PartitionSpec,
    topo: &crate::graph::GraphTopology,
    delta: &DeltaPolicy,
) -> Result<(PartFeatureSet<F>, NormalizedAdjacency<F>)> {
    let x = crate::dataset::partition_pool::<F>(fmap, spec)?;
    let d = match delta {
        DeltaPolicy::Auto => crate::graph::auto_delta(&x, topo)?,
        DeltaPolicy::Fixed(v) => F::from(*v).expect("float cast"),
    };
    let adj = crate::graph::edge_weights(&x, topo, d)?;
    Ok((x, crate::graph::row_normalize(&adj)))
}

fn relu<F: NdFloat>(m: &Array2<F>) -> Array2<F> {
    m.mapv(|v| v.max(F::zero()))
}

/// One propagation step. Returns `(pre_activation, output)`; the output is
/// the ReLU of the pre-activation unless `activate` is false.
pub fn gcn_layer<F: NdFloat>(
    h: &Array2<F>,
    a_norm: &NormalizedAdjacency<F>,
    theta: &Array2<F>,
    eps: F,
    activate: bool,
) -> Result<(Array2<F>, Array2<F>)> {
    if h.nrows() != a_norm.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "H has {} rows, adjacency has {} nodes",
            h.nrows(),
            a_norm.num_nodes()
        )));
    }
    if h.ncols() != theta.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "H has {} columns, theta expects {}",
            h.ncols(),
            theta.nrows()
        )));
    }
    let aggregated = a_norm.matrix().dot(h);
    let blended = aggregated.mapv(|v| v * eps) + h.mapv(|v| v * (F::one() - eps));
    let pre = blended.dot(theta);
    let out = if activate { relu(&pre) } else { pre.clone() };
    Ok((pre, out))
}

/// Appearance stream: `(pre, relu(pre))` with `pre = X * proj`.
pub fn appearance_project<F: NdFloat>(
    x: &Array2<F>,
    proj: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    if x.ncols() != proj.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "X has {} columns, projection expects {}",
            x.ncols(),
            proj.nrows()
        )));
    }
    let pre = x.dot(proj);
    let f = relu(&pre);
    Ok((pre, f))
}

/// Rowwise fusion `Z = H_final + beta * F`.
pub fn fuse<F: NdFloat>(h_final: &Array2<F>, f: &Array2<F>, beta: F) -> Result<Array2<F>> {
    if h_final.dim() != f.dim() {
        return Err(Error::ShapeMismatch(format!(
            "fusion needs equal shapes, got {:?} and {:?}",
            h_final.dim(),
            f.dim()
        )));
    }
    Ok(h_final + &f.mapv(|v| v * beta))
}

/// Stable softmax cross-entropy for one logits row. Returns the loss and
/// the softmax probabilities.
fn softmax_ce<F: NdFloat>(logits: &[F], label: usize) -> (F, Vec<F>) {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: F = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    let loss = sum.ln() - (logits[label] - max);
    let probs = exps.iter().map(|&e| e / sum).collect();
    (loss, probs)
}

/// Per-part cross-entropies and their mean, summed in canonical part order.
pub fn part_loss<F: NdFloat>(logits: &Array2<F>, label_class: usize) -> Result<(Vec<F>, F)> {
    if label_class >= logits.ncols() {
        return Err(Error::Invalid(format!(
            "label class {label_class} out of range for {} classes",
            logits.ncols()
        )));
    }
    let mut per_part = Vec::with_capacity(logits.nrows());
    let mut total = F::zero();
    for row in logits.rows() {
        let (loss, _) = softmax_ce(row.as_slice().expect("standard layout"), label_class);
        total += loss;
        per_part.push(loss);
    }
    let n = F::from(logits.nrows()).expect("part count fits");
    Ok((per_part, total / n))
}

/// Every intermediate needed to reproduce the loss and run backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    /// `H^(0) ..= H^(T)`; `h[0]` is the input part matrix.
    pub h: Vec<Array2<F>>,
    /// Pre-activations per layer.
    pub pre: Vec<Array2<F>>,
    /// `A_norm * H^(t)` per layer (kept for the weight gradients).
    pub aggregated: Vec<Array2<F>>,
    pub f_pre: Array2<F>,
    pub f: Array2<F>,
    pub z: Array2<F>,
    pub logits: Array2<F>,
    pub probs: Array2<F>,
    pub per_part_loss: Vec<F>,
    pub loss: F,
    pub label_class: usize,
}

impl<F: NdFloat> ForwardTrace<F> {
    /// Final node representations `H^(T)`.
    pub fn h_final(&self) -> &Array2<F> {
        self.h.last().expect("at least the input layer")
    }
}

/// Run the graph stream, appearance stream, fusion, and classification,
/// retaining all intermediates.
pub fn forward<F: NdFloat>(
    x: &PartFeatureSet<F>,
    a_norm: &NormalizedAdjacency<F>,
    params: &ModelParams<F>,
    label_class: usize,
) -> Result<ForwardTrace<F>> {
    if x.num_parts() != params.num_parts() {
        return Err(Error::ShapeMismatch(format!(
            "part set has {} parts, model has {} classifiers",
            x.num_parts(),
            params.num_parts()
        )));
    }
    let mut h = Vec::with_capacity(params.theta.len() + 1);
    let mut pre = Vec::with_capacity(params.theta.len());
    let mut aggregated = Vec::with_capacity(params.theta.len());
    h.push(x.features.clone());
    for theta in &params.theta {
        let current = h.last().expect("layer input");
        let agg = a_norm.matrix().dot(current);
        let blended = agg.mapv(|v| v * params.eps)
            + current.mapv(|v| v * (F::one() - params.eps));
        let p = blended.dot(theta);
        let out = relu(&p);
        aggregated.push(agg);
        pre.push(p);
        h.push(out);
    }

    let (f_pre, f) = appearance_project(&x.features, &params.proj)?;
    let z = fuse(h.last().expect("final layer"), &f, params.beta)?;

    let num_classes = params.num_classes();
    if label_class >= num_classes {
        return Err(Error::Invalid(format!(
            "label class {label_class} out of range for {num_classes} classes"
        )));
    }
    let n = params.num_parts();
    let mut logits = Array2::<F>::zeros((n, num_classes));
    let mut probs = Array2::<F>::zeros((n, num_classes));
    let mut per_part_loss = Vec::with_capacity(n);
    let mut total = F::zero();
    for (i, classifier) in params.classifiers.iter().enumerate() {
        let zi = z.row(i);
        let row: Array1<F> = zi.dot(&classifier.weight) + &classifier.bias;
        let (loss, p) = softmax_ce(row.as_slice().expect("standard layout"), label_class);
        for (j, v) in row.iter().enumerate() {
            logits[(i, j)] = *v;
        }
        for (j, v) in p.iter().enumerate() {
            probs[(i, j)] = *v;
        }
        total += loss;
        per_part_loss.push(loss);
    }
    let loss = total / F::from(n).expect("part count fits");

    Ok(ForwardTrace {
        h,
        pre,
        aggregated,
        f_pre,
        f,
        z,
        logits,
        probs,
        per_part_loss,
        loss,
        label_class,
    })
}

/// Mask of strictly positive entries; the ReLU subgradient at zero is zero.
fn relu_mask_mul<F: NdFloat>(grad: &Array2<F>, pre: &Array2<F>) -> Array2<F> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, p| {
        if *p <= F::zero() {
            *g = F::zero();
        }
    });
    out
}

/// Exact gradients of the aggregate loss with respect to every trainable
/// tensor. The normalized adjacency is a constant of the computation.
pub fn backward<F: NdFloat>(
    trace: &ForwardTrace<F>,
    a_norm: &NormalizedAdjacency<F>,
    params: &ModelParams<F>,
) -> Result<Gradients<F>> {
    let n = params.num_parts();
    if trace.z.nrows() != n || trace.h.len() != params.theta.len() + 1 {
        return Err(Error::ShapeMismatch(
            "trace does not match the model it is differentiated against".into(),
        ));
    }
    let inv_n = F::one() / F::from(n).expect("part count fits");
    let mut grads = Gradients::zeros_like(params);

    // Classifier heads and the gradient flowing into Z.
    let mut g_z = Array2::<F>::zeros(trace.z.dim());
    for i in 0..n {
        let mut g_logits = trace.probs.row(i).to_owned();
        g_logits[trace.label_class] -= F::one();
        g_logits.mapv_inplace(|v| v * inv_n);

        let zi = trace.z.row(i);
        // dW = z_i^T g, db = g, dz_i = g W^T
        for (r, zr) in zi.iter().enumerate() {
            for (c, gc) in g_logits.iter().enumerate() {
                grads.classifiers[i].weight[(r, c)] = *zr * *gc;
            }
        }
        grads.classifiers[i].bias.assign(&g_logits);
        let w = &params.classifiers[i].weight;
        for r in 0..w.nrows() {
            let mut acc = F::zero();
            for c in 0..w.ncols() {
                acc += g_logits[c] * w[(r, c)];
            }
            g_z[(i, r)] = acc;
        }
    }

    // Fusion: Z = H_T + beta * F.
    let g_h_final = g_z.clone();
    let g_f = g_z.mapv(|v| v * params.beta);

    // Appearance stream: F = relu(X proj).
    let g_f_pre = relu_mask_mul(&g_f, &trace.f_pre);
    grads.proj = trace.h[0].t().dot(&g_f_pre);

    // Graph stream, last layer to first.
    let mut g_h = g_h_final;
    for t in (0..params.theta.len()).rev() {
        let g_pre = relu_mask_mul(&g_h, &trace.pre[t]);
        let blended = trace.aggregated[t].mapv(|v| v * params.eps)
            + trace.h[t].mapv(|v| v * (F::one() - params.eps));
        grads.theta[t] = blended.t().dot(&g_pre);
        if t > 0 {
            let g_blended = g_pre.dot(&params.theta[t].t());
            g_h = a_norm.matrix().t().dot(&g_blended).mapv(|v| v * params.eps)
                + g_blended.mapv(|v| v * (F::one() - params.eps));
        }
    }

    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_node_adjacency() -> NormalizedAdjacency<f64> {
        NormalizedAdjacency::from_matrix(array![[0.0, 1.0], [1.0, 0.0]])
    }

    #[test]
    fn gcn_layer_hand_case() {
        let h = array![[1.0], [3.0]];
        let theta = array![[2.0]];
        let (pre, out) = gcn_layer(&h, &two_node_adjacency(), &theta, 0.75, true).unwrap();
        assert_eq!(pre, array![[5.0], [3.0]]);
        assert_eq!(out, array![[5.0], [3.0]]);
    }

    #[test]
    fn gcn_layer_endpoints() {
        let h = array![[1.0, 0.5], [3.0, 2.0]];
        let theta = Array2::<f64>::eye(2);
        let a = two_node_adjacency();
        let (_, out0) = gcn_layer(&h, &a, &theta, 0.0, true).unwrap();
        assert_eq!(out0, h);
        let (_, out1) = gcn_layer(&h, &a, &theta, 1.0, true).unwrap();
        let expect = a.matrix().dot(&h);
        for (x, y) in out1.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn appearance_projection_cases() {
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let zero = Array2::<f64>::zeros((2, 3));
        let (_, f) = appearance_project(&x, &zero).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));

        let eye = Array2::<f64>::eye(2);
        let xp = array![[1.0, 2.0], [0.5, 3.0]];
        let (_, f) = appearance_project(&xp, &eye).unwrap();
        assert_eq!(f, xp);

        // Linearity of the pre-activation.
        let proj = array![[0.2, -0.4, 1.0], [0.7, 0.1, -0.3]];
        let x2 = array![[0.3, -0.8], [1.5, 0.25]];
        let (p1, _) = appearance_project(&x, &proj).unwrap();
        let (p2, _) = appearance_project(&x2, &proj).unwrap();
        let (p12, _) = appearance_project(&(&x + &x2), &proj).unwrap();
        for ((a, b), c) in p1.iter().zip(p2.iter()).zip(p12.iter()) {
            assert!((a + b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_hand_case() {
        let h = array![[1.0, 2.0]];
        let f = array![[10.0, 20.0]];
        assert_eq!(fuse(&h, &f, 0.3).unwrap(), array![[4.0, 8.0]]);
        assert_eq!(fuse(&h, &f, 0.0).unwrap(), h);
        let zero = Array2::<f64>::zeros((1, 2));
        assert_eq!(fuse(&zero, &f, 0.3).unwrap(), f.mapv(|v| v * 0.3));
    }

    #[test]
    fn part_loss_uniform_and_mean() {
        let logits = Array2::<f64>::zeros((3, 5));
        let (per, agg) = part_loss(&logits, 2).unwrap();
        for l in &per {
            assert!((l - 5.0f64.ln()).abs() < 1e-12);
        }
        assert!((agg - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn part_loss_saturates_with_margin() {
        let mut logits = Array2::<f64>::zeros((1, 4));
        logits[(0, 1)] = 100.0;
        let (per, _) = part_loss(&logits, 1).unwrap();
        assert!(per[0] < 1e-40, "{}", per[0]);
    }

    #[test]
    fn part_loss_mean_of_two() {
        // Construct logits whose cross-entropies are 0.2 and 0.4.
        // ln(1 + e^-m) = L  =>  m = -ln(e^L - 1)
        let m1 = -(0.2f64.exp() - 1.0).ln();
        let m2 = -(0.4f64.exp() - 1.0).ln();
        let logits = array![[m1, 0.0], [m2, 0.0]];
        let (per, agg) = part_loss(&logits, 0).unwrap();
        assert!((per[0] - 0.2).abs() < 1e-12);
        assert!((per[1] - 0.4).abs() < 1e-12);
        assert!((agg - 0.3).abs() < 1e-12);
    }

    #[test]
    fn part_loss_rejects_bad_label() {
        let logits = Array2::<f64>::zeros((2, 3));
        assert!(part_loss(&logits, 3).is_err());
    }

    #[test]
    fn loss_invariant_to_constant_logit_shift() {
        // Exactly representable values keep the additions exact.
        let logits = array![[0.5, 1.25, -2.0], [3.0, -0.75, 0.0]];
        let (per, _) = part_loss(&logits, 1).unwrap();
        let shifted = logits.mapv(|v| v + 2.0);
        let (per_shifted, _) = part_loss(&shifted, 1).unwrap();
        assert_eq!(per[0], per_shifted[0]);
        assert_eq!(per[1], per_shifted[1]);
    }

    fn tiny_instance() -> (PartFeatureSet<f64>, NormalizedAdjacency<f64>, ModelParams<f64>) {
        let spec = crate::dataset::PartitionSpec::default();
        let topo = crate::graph::build_topology(&spec);
        let mut rng = Xoshiro256StarStar::from_seed(77);
        let n = topo.num_nodes();
        let dim = 6;
        let data: Vec<f64> = (0..n * dim).map(|_| rng.next_normal()).collect();
        let x = PartFeatureSet {
            features: Array2::from_shape_vec((n, dim), data).unwrap(),
            parts: topo.nodes().to_vec(),
        };
        let delta = crate::graph::auto_delta(&x, &topo).unwrap();
        let adj = crate::graph::edge_weights(&x, &topo, delta).unwrap();
        let a_norm = crate::graph::row_normalize(&adj);
        let cfg = ModelConfig {
            hidden_dim: 8,
            ..ModelConfig::default()
        };
        let params = init_params::<f64>(dim, 3, n, &cfg, 123).unwrap();
        (x, a_norm, params)
    }

    #[test]
    fn forward_shapes_and_zero_paths() {
        let (x, a_norm, mut params) = tiny_instance();
        let trace = forward(&x, &a_norm, &params, 1).unwrap();
        assert_eq!(trace.logits.dim(), (10, 3));
        assert_eq!(trace.h[0].dim(), (10, 6));
        assert_eq!(trace.h[1].dim(), (10, 8));
        assert_eq!(trace.h[2].dim(), (10, 8));
        assert!(trace.h[1].iter().all(|&v| v >= 0.0));
        assert!(trace.h[2].iter().all(|&v| v >= 0.0));

        // beta = 0 and all theta = 0: Z = 0, logits = biases.
        params.beta = 0.0;
        for t in &mut params.theta {
            t.fill(0.0);
        }
        for (i, c) in params.classifiers.iter_mut().enumerate() {
            c.bias.fill(i as f64 * 0.25);
        }
        let trace = forward(&x, &a_norm, &params, 0).unwrap();
        assert!(trace.z.iter().all(|&v| v == 0.0));
        for (i, row) in trace.logits.rows().into_iter().enumerate() {
            for v in row {
                assert_eq!(*v, i as f64 * 0.25);
            }
        }
    }

    #[test]
    fn unused_projection_has_exactly_zero_gradient() {
        let (x, a_norm, mut params) = tiny_instance();
        params.beta = 0.0;
        let trace = forward(&x, &a_norm, &params, 2).unwrap();
        let grads = backward(&trace, &a_norm, &params).unwrap();
        assert!(grads.proj.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_edges_changes_nothing_when_eps_is_zero_and_f_dead() {
        let (x, a_norm, mut params) = tiny_instance();
        // eps may not be 0 in a valid config, but the math accepts it; the
        // degenerate model must ignore the graph entirely.
        params.eps = 0.0;
        params.proj.fill(0.0);
        let trace = forward(&x, &a_norm, &params, 1).unwrap();
        // Scramble the adjacency: swap two rows' neighborhoods.
        let mut m = a_norm.matrix().clone();
        let tmp = m.row(3).to_owned();
        let r7 = m.row(7).to_owned();
        m.row_mut(3).assign(&r7);
        m.row_mut(7).assign(&tmp);
        let scrambled = NormalizedAdjacency::from_matrix(m);
        let trace2 = forward(&x, &scrambled, &params, 1).unwrap();
        assert_eq!(trace.loss, trace2.loss);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::default();
        let a = init_params::<f32>(16, 4, 10, &cfg, 9).unwrap();
        let b = init_params::<f32>(16, 4, 10, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / (16f32).sqrt();
        assert!(a.theta[0].iter().all(|v| v.abs() <= bound));
        assert!(a
            .classifiers
            .iter()
            .all(|c| c.bias.iter().all(|&v| v == 0.0)));
        let c = init_params::<f32>(16, 4, 10, &cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tensor_view_roundtrip() {
        let (.., mut params) = tiny_instance();
        let names: Vec<String> = (0..params.num_tensors())
            .map(|k| params.tensor_name(k))
            .collect();
        assert_eq!(names[0], "theta0");
        assert_eq!(names[2], "proj");
        assert_eq!(names[3], "classifier0.weight");
        assert_eq!(names[4], "classifier0.bias");
        assert_eq!(params.tensor_group(0), ParamGroup::Gcn);
        assert_eq!(params.tensor_group(2), ParamGroup::Head);
        let before = params.tensor(3)[5];
        params.tensor_mut(3)[5] = before + 1.0;
        assert_eq!(params.classifiers[0].weight.as_slice().unwrap()[5], before + 1.0);
    }
}

//! Gram-matrix style loss, activation content loss, the soft range penalty
//! and the weighted total objective with its pixel-space gradient.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::network::{deorient, orient, Layer, Network, Tensor4};

/// Channel correlation matrix `phi^T phi / U` of one activation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: Array2<f64>,
    /// `U = B * H * W` of the features the matrix was computed from.
    pub normalizer: f64,
}

impl GramMatrix {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frobenius_distance(&self, other: &GramMatrix) -> f64 {
        (&self.values - &other.values).mapv(|v| v * v).sum().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::InvalidConfig("one of alpha, beta must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 1e9,
            gamma: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSets {
    pub style: BTreeSet<Layer>,
    pub content: BTreeSet<Layer>,
}

impl Default for LayerSets {
    fn default() -> Self {
        Self {
            style: BTreeSet::from([Layer::Relu1, Layer::Relu2]),
            content: BTreeSet::from([Layer::Relu3]),
        }
    }
}

/// Per-image (C, H*W) view of batch item `b`.
fn item_matrix<'a>(features: &'a ndarray::ArrayView4<'_, f64>, b: usize) -> ArrayView2<'a, f64> {
    let (_, c, h, w) = features.dim();
    features
        .index_axis(Axis(0), b)
        .into_shape_with_order((c, h * w))
        .expect("standard layout activations")
}

pub fn gram(features: &Tensor4) -> GramMatrix {
    let owned = features.as_standard_layout();
    let features = owned.view();
    let (b, c, h, w) = features.dim();
    let u = (b * h * w) as f64;
    let mut values = Array2::<f64>::zeros((c, c));
    for n in 0..b {
        let m = item_matrix(&features, n);
        values += &m.dot(&m.t());
    }
    if u > 0.0 {
        values /= u;
    }
    // Symmetrise away rounding asymmetry from the blocked product.
    let sym = (&values + &values.t()) * 0.5;
    GramMatrix { values: sym, normalizer: u }
}

fn check_gram(layer: Layer, target: &GramMatrix, c: usize) -> Result<()> {
    if target.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "{layer}: target Gram has {} channels, activations {c}",
            target.channels()
        )));
    }
    Ok(())
}

/// `sum_n (1/C_n) ||G(phi_n) - T_n||_F^2` and its gradient at each layer.
pub fn style_loss_and_grads(
    targets: &BTreeMap<Layer, GramMatrix>,
    acts: &BTreeMap<Layer, &Tensor4>,
    layers: &BTreeSet<Layer>,
) -> Result<(f64, BTreeMap<Layer, Tensor4>)> {
    let mut loss = 0.0;
    let mut grads = BTreeMap::new();
    for &layer in layers {
        let target = targets
            .get(&layer)
            .ok_or_else(|| Error::MissingLayer(format!("no style target for {layer}")))?;
        let phi = acts
            .get(&layer)
            .ok_or_else(|| Error::MissingLayer(format!("no activations for {layer}")))?;
        let (b, c, h, w) = phi.dim();
        check_gram(layer, target, c)?;
        let g = gram(phi);
        let diff = &g.values - &target.values;
        loss += diff.mapv(|v| v * v).sum() / c as f64;

        let coef = 4.0 / (c as f64 * g.normalizer);
        let mut grad = Tensor4::zeros((b, c, h, w));
        let phi_view = phi.view();
        for n in 0..b {
            let m = item_matrix(&phi_view, n);
            let mut dst = grad
                .index_axis_mut(Axis(0), n)
                .into_shape_with_order((c, h * w))
                .expect("fresh tensor");
            dst.assign(&diff.dot(&m));
            dst *= coef;
        }
        grads.insert(layer, grad);
    }
    Ok((loss, grads))
}

/// `sum_m (1/C_m) ||phi_m(c) - phi_m(x)||^2` and its gradient at each layer.
pub fn content_loss_and_grads(
    targets: &BTreeMap<Layer, Tensor4>,
    acts: &BTreeMap<Layer, &Tensor4>,
    layers: &BTreeSet<Layer>,
) -> Result<(f64, BTreeMap<Layer, Tensor4>)> {
    let mut loss = 0.0;
    let mut grads = BTreeMap::new();
    for &layer in layers {
        let target = targets
            .get(&layer)
            .ok_or_else(|| Error::MissingLayer(format!("no content target for {layer}")))?;
        let phi = acts
            .get(&layer)
            .ok_or_else(|| Error::MissingLayer(format!("no activations for {layer}")))?;
        if target.dim() != phi.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{layer}: content target {:?} vs activations {:?}",
                target.dim(),
                phi.dim()
            )));
        }
        let c = phi.dim().1 as f64;
        let diff = *phi - target;
        loss += diff.mapv(|v| v * v).sum() / c;
        grads.insert(layer, diff * (2.0 / c));
    }
    Ok((loss, grads))
}

/// `||U + D||_2` with `U = max(x - 1, 0)`, `D = max(-x, 0)`.
pub fn range_penalty_and_grad(x: &Array2<f64>) -> (f64, Array2<f64>) {
    let excess = x.mapv(|v| {
        if v > 1.0 {
            v - 1.0
        } else if v < 0.0 {
            -v
        } else {
            0.0
        }
    });
    let norm = excess.mapv(|v| v * v).sum().sqrt();
    if norm < 1e-12 {
        return (norm, Array2::zeros(x.dim()));
    }
    let mut grad = Array2::zeros(x.dim());
    Zip::from(&mut grad).and(x).and(&excess).for_each(|g, &v, &e| {
        let sign = if v > 1.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = sign * e / norm;
    });
    (norm, grad)
}

/// Precomputed statistics of the reference sounds.
#[derive(Debug, Clone, Default)]
pub struct Targets {
    pub style: BTreeMap<Layer, GramMatrix>,
    pub content: BTreeMap<Layer, Tensor4>,
}

/// Unweighted loss terms of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub content: f64,
    pub style: f64,
    pub range: f64,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub terms: LossTerms,
    pub grad: Array2<f64>,
}

/// `alpha * content + beta * style + gamma * range` over the (F, T) pixel
/// image `x`. Terms with zero weight are not computed and report 0.
pub fn total_objective(
    net: &Network,
    x: &Array2<f64>,
    targets: &Targets,
    weights: &LossWeights,
    layers: &LayerSets,
) -> Result<Objective> {
    let o = net.orientation();
    let want_content = weights.alpha > 0.0 && !layers.content.is_empty();
    let want_style = weights.beta > 0.0 && !layers.style.is_empty();
    let deepest = [
        want_content.then(|| layers.content.iter().max().copied()).flatten(),
        want_style.then(|| layers.style.iter().max().copied()).flatten(),
    ]
    .into_iter()
    .flatten()
    .max();

    let mut terms = LossTerms::default();
    let mut grad = match deepest {
        Some(last) => {
            let input = orient(x, o);
            let acts = net.forward_to(&input, last)?;
            let view: BTreeMap<Layer, &Tensor4> = Layer::ALL
                .iter()
                .filter_map(|&l| acts.get(l).map(|t| (l, t)))
                .collect();
            let mut at: BTreeMap<Layer, Tensor4> = BTreeMap::new();
            if want_style {
                let (loss, grads) = style_loss_and_grads(&targets.style, &view, &layers.style)?;
                terms.style = loss;
                for (l, g) in grads {
                    add_scaled(&mut at, l, g, weights.beta);
                }
            }
            if want_content {
                let (loss, grads) = content_loss_and_grads(&targets.content, &view, &layers.content)?;
                terms.content = loss;
                for (l, g) in grads {
                    add_scaled(&mut at, l, g, weights.alpha);
                }
            }
            deorient(&net.backward_input(&acts, &at)?, o)?
        }
        None => Array2::zeros(x.dim()),
    };

    if weights.gamma > 0.0 {
        let (loss, g) = range_penalty_and_grad(x);
        terms.range = loss;
        grad.scaled_add(weights.gamma, &g);
    }
    let total = weights.alpha * terms.content + weights.beta * terms.style + weights.gamma * terms.range;
    if !total.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    Ok(Objective { total, terms, grad })
}

fn add_scaled(at: &mut BTreeMap<Layer, Tensor4>, layer: Layer, mut g: Tensor4, k: f64) {
    g *= k;
    match at.get_mut(&layer) {
        Some(acc) => *acc += &g,
        None => {
            at.insert(layer, g);
        }
    }
}

/// Target Grams of `references` stacked on the batch axis of one forward pass.
pub fn style_targets(net: &Network, batch: &Tensor4, layers: &BTreeSet<Layer>) -> Result<BTreeMap<Layer, GramMatrix>> {
    let Some(&last) = layers.iter().max() else {
        return Ok(BTreeMap::new());
    };
    let acts = net.forward_to(batch, last)?;
    layers.iter().map(|&l| Ok((l, gram(acts.layer(l)?)))).collect()
}

pub fn content_targets(net: &Network, input: &Tensor4, layers: &BTreeSet<Layer>) -> Result<BTreeMap<Layer, Tensor4>> {
    let Some(&last) = layers.iter().max() else {
        return Ok(BTreeMap::new());
    };
    let acts = net.forward_to(input, last)?;
    layers.iter().map(|&l| Ok((l, acts.layer(l)?.clone()))).collect()
}

/// Sum over style layers of `||G(phi(x)) - T||_F`, for convergence reporting.
pub fn gram_distance(net: &Network, x: &Array2<f64>, targets: &BTreeMap<Layer, GramMatrix>) -> Result<f64> {
    let Some(&last) = targets.keys().max() else {
        return Ok(0.0);
    };
    let acts = net.forward_to(&orient(x, net.orientation()), last)?;
    targets
        .iter()
        .map(|(&l, t)| Ok(gram(acts.layer(l)?).frobenius_distance(t)))
        .sum()
}

//! Similarity (triplet), identity (cross-entropy) and layer-wise losses.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor for distances before they are used as divisors.
const DIST_EPS: f64 = 1e-12;

/// Hinge on Euclidean distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletSpec {
    pub margin: f64,
}

impl TripletSpec {
    pub fn new(margin: f64) -> Result<Self> {
        if margin.is_nan() || margin < 0.0 || !margin.is_finite() {
            return Err(Error::Config(format!(
                "triplet margin must be a finite value ≥ 0, got {margin}"
            )));
        }
        Ok(TripletSpec { margin })
    }
}

impl Default for TripletSpec {
    fn default() -> Self {
        TripletSpec { margin: 0.3 }
    }
}

/// One projection width and one weight per tapped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseSpec {
    pub proj_dims: Vec<usize>,
    pub weights: Vec<f64>,
}

impl LayerwiseSpec {
    pub fn uniform(taps: usize, proj_dim: usize, weight: f64) -> Self {
        LayerwiseSpec {
            proj_dims: vec![proj_dim; taps],
            weights: vec![weight; taps],
        }
    }

    pub fn validate(&self, taps: usize) -> Result<()> {
        if self.proj_dims.len() != taps || self.weights.len() != taps {
            return Err(Error::Config(format!(
                "layer-wise spec has {} projections and {} weights for {taps} taps",
                self.proj_dims.len(),
                self.weights.len()
            )));
        }
        if self.proj_dims.contains(&0) || self.weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config(
                "layer-wise projections must be positive and weights ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub layer: Vec<f64>,
}

/// Loss components of one step together with the weights that combined them.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub triplet_final: f64,
    pub identity: f64,
    pub layerwise: Vec<f64>,
    pub lambda_id: f64,
    pub layer_weights: Vec<f64>,
}

impl LossReport {
    /// `triplet_final + λ_id·identity + Σ λ_l·layerwise[l]`, accumulated in that order.
    pub fn recompute_total(&self) -> f64 {
        let mut total = 0.0;
        total += 1.0 * self.triplet_final;
        total += self.lambda_id * self.identity;
        for (w, v) in self.layer_weights.iter().zip(&self.layerwise) {
            total += w * v;
        }
        total
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.triplet_final.is_finite()
            && self.identity.is_finite()
            && self.layerwise.iter().all(|v| v.is_finite())
    }
}

/// Scalar loss terms recorded on a tape.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub triplet: Var,
    pub identity: Option<Var>,
    pub layerwise: Vec<Var>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_vector(tape: &Tape, v: Var) -> Result<usize> {
    let t = tape.value(v);
    if t.rank() != 1 {
        return Err(Error::Usage(format!("expected a vector, got shape {:?}", t.shape())));
    }
    Ok(t.numel())
}

/// Identity key of a batch member: `(action_id, pid)`.
pub type IdentityKey = (u32, u32);

/// For every anchor with at least one positive and one negative in the batch,
/// picks the farthest positive and the nearest negative. Ties go to the lower
/// index. Returns `(anchor, positive, negative)` index triples.
pub fn batch_hard_triplets(embeddings: &[&[f64]], labels: &[IdentityKey]) -> Vec<(usize, usize, usize)> {
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclid(embeddings[i], embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut triplets = Vec::new();
    for i in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in (0..n).filter(|&j| j != i) {
            let d = dist[i * n + j];
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| d > dist[i * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[i * n + q]) {
                neg = Some(j);
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            triplets.push((i, p, q));
        }
    }
    triplets
}

impl Tape {
    /// `max(‖a − p‖ − ‖a − n‖ + margin, 0)`; the kink counts as inactive.
    pub fn triplet_loss(&mut self, anchor: Var, positive: Var, negative: Var, spec: TripletSpec) -> Result<Var> {
        let n = check_vector(self, anchor)?;
        if check_vector(self, positive)? != n || check_vector(self, negative)? != n {
            return Err(Error::Usage("triplet members must have equal lengths".into()));
        }
        let (a, p, q) = (
            self.value(anchor).data(),
            self.value(positive).data(),
            self.value(negative).data(),
        );
        let (d_ap, d_an) = (euclid(a, p), euclid(a, q));
        let value = (d_ap - d_an + spec.margin).max(0.0);
        Ok(self.record(
            &[anchor, positive, negative],
            Tensor::scalar(value),
            Box::new(move |inputs, out, g, _| {
                if out.data()[0] <= 0.0 {
                    return vec![Some(vec![0.0; n]); 3];
                }
                let (a, p, q) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
                let unit = |x: &[f64], y: &[f64], d: f64| -> Vec<f64> {
                    if d < DIST_EPS {
                        vec![0.0; n]
                    } else {
                        x.iter().zip(y).map(|(u, v)| g[0] * (u - v) / d).collect()
                    }
                };
                let u_ap = unit(a, p, d_ap);
                let u_an = unit(a, q, d_an);
                let grad_a = u_ap.iter().zip(&u_an).map(|(x, y)| x - y).collect();
                let grad_p = u_ap.iter().map(|x| -x).collect();
                vec![Some(grad_a), Some(grad_p), Some(u_an)]
            }),
        ))
    }

    /// `−log softmax(logits)[label]`, evaluated with the max-subtraction trick.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let k = self.value(logits).numel();
        if label >= k {
            return Err(Error::Usage(format!("label {label} outside 0..{k}")));
        }
        let z = self.value(logits).data();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = -(z[label] - max - log_norm);
        let shift = max + log_norm;
        Ok(self.record(
            &[logits],
            Tensor::scalar(value),
            Box::new(move |inputs, _, g, _| {
                let grad = inputs[0]
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g[0] * ((v - shift).exp() - if i == label { 1.0 } else { 0.0 }))
                    .collect();
                vec![Some(grad)]
            }),
        ))
    }

    /// `x·W + b` for a length-`n` vector and an `n×m` weight.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = check_vector(self, x)?;
        let m = self.value(weight).shape().get(1).copied().unwrap_or(0);
        let row = self.reshape(x, &[1, n])?;
        let y = self.matmul(row, weight)?;
        let y = self.reshape(y, &[m])?;
        self.add(y, bias)
    }

    /// Pool → project → normalize embedding of one tapped feature map.
    pub fn tap_embedding(&mut self, tap: Var, weight: Var, bias: Var) -> Result<Var> {
        let pooled = self.spatial_avg_pool(tap)?;
        let projected = self.linear(pooled, weight, bias)?;
        Ok(self.l2_normalize(projected))
    }

    /// One triplet loss per tap on the projected, normalized tap features.
    pub fn layerwise_similarity_loss(
        &mut self,
        taps_a: &[Var],
        taps_p: &[Var],
        taps_n: &[Var],
        heads: &[(Var, Var)],
        spec: TripletSpec,
    ) -> Result<Vec<Var>> {
        if taps_a.len() != taps_p.len() || taps_a.len() != taps_n.len() || taps_a.len() != heads.len() {
            return Err(Error::Usage(format!(
                "tap sets differ: anchor {}, positive {}, negative {}, heads {}",
                taps_a.len(),
                taps_p.len(),
                taps_n.len(),
                heads.len()
            )));
        }
        let mut losses = Vec::with_capacity(taps_a.len());
        for l in 0..taps_a.len() {
            let (w, b) = heads[l];
            let shape = self.value(taps_a[l]).shape().to_vec();
            if self.value(taps_p[l]).shape() != shape.as_slice() || self.value(taps_n[l]).shape() != shape.as_slice() {
                return Err(Error::Usage(format!("tap {l} has different shapes across roles")));
            }
            let ea = self.tap_embedding(taps_a[l], w, b)?;
            let ep = self.tap_embedding(taps_p[l], w, b)?;
            let en = self.tap_embedding(taps_n[l], w, b)?;
            losses.push(self.triplet_loss(ea, ep, en, spec)?);
        }
        Ok(losses)
    }

    /// Mean batch-hard triplet loss over `embeddings`; `None` when no anchor
    /// has both a positive and a negative.
    pub fn batch_hard_loss(
        &mut self,
        embeddings: &[Var],
        labels: &[IdentityKey],
        spec: TripletSpec,
    ) -> Result<Option<Var>> {
        if embeddings.len() != labels.len() {
            return Err(Error::Usage("one label per embedding required".into()));
        }
        let values: Vec<&[f64]> = embeddings.iter().map(|&v| self.value(v).data()).collect();
        let triplets = batch_hard_triplets(&values, labels);
        if triplets.is_empty() {
            return Ok(None);
        }
        let weight = 1.0 / triplets.len() as f64;
        let mut terms = Vec::with_capacity(triplets.len());
        for (a, p, n) in triplets {
            let l = self.triplet_loss(embeddings[a], embeddings[p], embeddings[n], spec)?;
            terms.push((l, weight));
        }
        self.weighted_sum(&terms).map(Some)
    }

    /// Mixes the loss terms into the training objective.
    pub fn combine_losses(&mut self, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
        if terms.layerwise.len() != weights.layer.len() {
            return Err(Error::Usage(format!(
                "{} layer-wise terms but {} weights",
                terms.layerwise.len(),
                weights.layer.len()
            )));
        }
        let mut mix = vec![(terms.triplet, 1.0)];
        let identity = match terms.identity {
            Some(v) => {
                mix.push((v, weights.lambda_id));
                self.value(v).data()[0]
            }
            None => 0.0,
        };
        mix.extend(terms.layerwise.iter().zip(&weights.layer).map(|(&v, &w)| (v, w)));
        let total = self.weighted_sum(&mix)?;
        let report = LossReport {
            total: self.value(total).data()[0],
            triplet_final: self.value(terms.triplet).data()[0],
            identity,
            layerwise: terms.layerwise.iter().map(|&v| self.value(v).data()[0]).collect(),
            lambda_id: weights.lambda_id,
            layer_weights: weights.layer.clone(),
        };
        Ok((total, report))
    }
}

/// A single anchor/positive/negative instance with optional identity logits
/// and tap features, as consumed by [`total_loss`].
pub struct TripletInstance<'a> {
    pub final_a: Var,
    pub final_p: Var,
    pub final_n: Var,
    pub logits_a: Option<(Var, usize)>,
    pub taps: Option<LayerTaps<'a>>,
}

pub struct LayerTaps<'a> {
    pub anchor: &'a [Var],
    pub positive: &'a [Var],
    pub negative: &'a [Var],
    pub heads: &'a [(Var, Var)],
}

pub fn total_loss(
    tape: &mut Tape,
    instance: &TripletInstance<'_>,
    spec: TripletSpec,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let triplet = tape.triplet_loss(instance.final_a, instance.final_p, instance.final_n, spec)?;
    let identity = match instance.logits_a {
        Some((logits, label)) => Some(tape.cross_entropy(logits, label)?),
        None => None,
    };
    let layerwise = match &instance.taps {
        Some(t) => tape.layerwise_similarity_loss(t.anchor, t.positive, t.negative, t.heads, spec)?,
        None => Vec::new(),
    };
    tape.combine_losses(
        &LossTerms {
            triplet,
            identity,
            layerwise,
        },
        weights,
    )
}

//! PK-batch training with batch-hard triplet loss and Adam.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::data::{sample_pk_batch, train_identities, Manifest, Role};
use crate::error::{Error, Result};
use crate::losses::{IdentityKey, LossReport, LossTerms};
use crate::model::{tap_head_names, Model, ID_BIAS, ID_WEIGHT};
use crate::optim::Adam;
use crate::streams::StreamConfig;
use crate::tensor::Tensor;

pub const LOSS_CSV: &str = "loss.csv";
pub const WEIGHTS_DIR: &str = "weights";

/// Offset mixed into the seed for the batch-sampling stream so it is
/// independent of parameter initialization.
const BATCH_STREAM: u64 = 0x0ba7_c4e5;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().map_or(f64::NAN, |r| r.total)
    }
}

fn csv_header(taps: usize) -> String {
    let mut header = String::from("step,total,triplet,identity");
    for l in 0..taps {
        header.push_str(&format!(",tap_{l}"));
    }
    header
}

fn csv_row(step: usize, r: &LossReport) -> String {
    let mut row = format!("{step},{},{},{}", r.total, r.triplet_final, r.identity);
    for v in &r.layerwise {
        row.push_str(&format!(",{v}"));
    }
    row
}

/// Renders the per-step loss table.
pub fn loss_csv(losses: &[LossReport]) -> String {
    let taps = losses.first().map_or(0, |r| r.layerwise.len());
    let mut out = csv_header(taps) + "\n";
    for (step, r) in losses.iter().enumerate() {
        out.push_str(&csv_row(step, r));
        out.push('\n');
    }
    out
}

/// One optimization step on a batch; returns the loss report and gradients
/// for every trainable parameter.
fn batch_step(
    model: &Model,
    images: &[&Tensor],
    labels: &[IdentityKey],
    class_of: &BTreeMap<IdentityKey, usize>,
    config: &RunConfig,
) -> Result<(LossReport, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let freeze = config.freeze_part;
    let bound = model
        .params
        .bind(&mut tape, |name| !(freeze && StreamConfig::is_part_param(name)));
    let spec = config.triplet_spec()?;

    let mut descriptors = Vec::with_capacity(images.len());
    let mut taps: Vec<Vec<Var>> = Vec::with_capacity(images.len());
    for image in images {
        let x = tape.constant((*image).clone());
        let out = model.forward_on(&mut tape, &bound, x)?;
        descriptors.push(out.descriptor);
        taps.push(out.taps);
    }

    let triplet = match tape.batch_hard_loss(&descriptors, labels, spec)? {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };

    let identity = if model.num_identities() > 0 && config.lambda_id > 0.0 {
        let (w, b) = (bound.var(ID_WEIGHT)?, bound.var(ID_BIAS)?);
        let weight = 1.0 / descriptors.len() as f64;
        let mut terms = Vec::with_capacity(descriptors.len());
        for (&d, label) in descriptors.iter().zip(labels) {
            let logits = tape.linear(d, w, b)?;
            let class = class_of[label];
            terms.push((tape.cross_entropy(logits, class)?, weight));
        }
        Some(tape.weighted_sum(&terms)?)
    } else {
        None
    };

    let num_taps = config.layerwise_spec().weights.len();
    let mut layerwise = Vec::with_capacity(num_taps);
    for l in 0..num_taps {
        let (wn, bn) = tap_head_names(l);
        let (w, b) = (bound.var(&wn)?, bound.var(&bn)?);
        let embeddings: Vec<Var> = taps
            .iter()
            .map(|t| tape.tap_embedding(t[l], w, b))
            .collect::<Result<_>>()?;
        let term = match tape.batch_hard_loss(&embeddings, labels, spec)? {
            Some(v) => v,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        layerwise.push(term);
    }

    let terms = LossTerms {
        triplet,
        identity,
        layerwise,
    };
    let (total, report) = tape.combine_losses(&terms, &config.loss_weights())?;
    if !report.is_finite() {
        return Ok((report, Vec::new()));
    }
    let vars: Vec<(String, Var)> = bound
        .iter()
        .map(|(n, v)| (n.to_string(), v))
        .filter(|(_, v)| tape.requires_grad(*v))
        .collect();
    let grads = tape.backward(total)?;
    Ok((report, vars.into_iter().map(|(n, v)| (n, grads.wrt(v))).collect()))
}

/// Trains a fresh model on the training split of `manifest`.
pub fn train(manifest: &Manifest, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let identities = train_identities(manifest);
    if identities.is_empty() {
        return Err(Error::Config("manifest has no training samples".into()));
    }
    let class_of: BTreeMap<IdentityKey, usize> = identities.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut model = Model::init(config, identities.len())?;
    let (c, h, w) = manifest.image_shape;
    if (c, h, w) != model.stream.input_shape {
        return Err(Error::Config(format!(
            "manifest images are {c}×{h}×{w} but the model expects {:?}",
            model.stream.input_shape
        )));
    }
    let images: HashMap<u64, Tensor> = manifest.load_images(|r| r == Role::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ BATCH_STREAM);
    let mut adam = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_pk_batch(manifest, config.batch_p, config.batch_k, &mut rng)?;
        let batch_images: Vec<&Tensor> = batch.samples.iter().map(|s| &images[&s.sample_id]).collect();
        let labels: Vec<IdentityKey> = batch.samples.iter().map(|s| s.identity()).collect();
        let (report, grads) = batch_step(&model, &batch_images, &labels, &class_of, config)?;
        if !report.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: total={} triplet={} identity={} layerwise={:?}",
                report.total, report.triplet_final, report.identity, report.layerwise
            )));
        }
        adam.step(&mut model.params, &grads)?;
        losses.push(report);
    }
    Ok(TrainOutcome { model, losses })
}

/// Writes the loss CSV, the weights directory and the resolved config.
pub fn write_outputs(outcome: &TrainOutcome, config: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(LOSS_CSV);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(loss_csv(&outcome.losses).as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    outcome.model.save(&out_dir.join(WEIGHTS_DIR))?;
    config.write_resolved(out_dir)
}

//! The full descriptor model: both streams, the pooling step and the
//! auxiliary heads used only during training.
//!
//! A weights directory holds the parameter files, the resolved config the
//! model was built from and, for compact pooling, the sketch tables.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::pooling::{PoolingMode, SketchParams};
use crate::streams::{two_stream_forward_on, StreamConfig};
use crate::tensor::Tensor;

pub const SKETCH_FILE: &str = "sketch.json";
pub const ID_WEIGHT: &str = "id.weight";
pub const ID_BIAS: &str = "id.bias";

pub fn tap_head_names(l: usize) -> (String, String) {
    (format!("tap.{l}.weight"), format!("tap.{l}.bias"))
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub descriptor: Var,
    pub a: Var,
    pub p: Var,
    /// Tapped appearance maps in configured order.
    pub taps: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub stream: StreamConfig,
    pub params: ParamStore,
    sketch: Option<Arc<SketchParams>>,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`. `num_identities > 0` adds a
    /// classifier head when the identity loss is enabled.
    pub fn init(config: &RunConfig, num_identities: usize) -> Result<Model> {
        config.validate()?;
        let stream = config.stream_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = stream.init_params(&mut rng)?;
        let mut model = Model {
            config: config.clone(),
            stream,
            params: ParamStore::new(),
            sketch: None,
        };
        model.sketch = model.make_sketch(config.pooling)?;
        if config.layerwise_enabled() {
            let channels = model.stream.tap_channels();
            for (l, &c) in channels.iter().enumerate() {
                let bound = 1.0 / (c as f64).sqrt();
                let (w, b) = tap_head_names(l);
                params.insert(w, Tensor::uniform(&[c, config.tap_dim], -bound, bound, &mut rng));
                params.insert(b, Tensor::zeros(&[config.tap_dim]));
            }
        }
        if config.lambda_id > 0.0 && num_identities > 0 {
            let dim = model.descriptor_dim();
            let bound = 1.0 / (dim as f64).sqrt();
            params.insert(
                ID_WEIGHT,
                Tensor::uniform(&[dim, num_identities], -bound, bound, &mut rng),
            );
            params.insert(ID_BIAS, Tensor::zeros(&[num_identities]));
        }
        model.params = params;
        Ok(model)
    }

    fn make_sketch(&self, mode: PoolingMode) -> Result<Option<Arc<SketchParams>>> {
        Ok(match mode {
            PoolingMode::Exact => None,
            PoolingMode::Compact => Some(Arc::new(SketchParams::generate(
                self.stream.appearance_channels(),
                self.stream.conf_channels,
                self.config.sketch_dim,
                self.config.sketch_seed,
            )?)),
        })
    }

    pub fn pooling(&self) -> PoolingMode {
        self.config.pooling
    }

    /// Switches pooling mode, deriving sketch tables from the config when needed.
    pub fn set_pooling(&mut self, mode: PoolingMode) -> Result<()> {
        if mode != self.config.pooling || (mode == PoolingMode::Compact && self.sketch.is_none()) {
            self.config.pooling = mode;
            self.sketch = self.make_sketch(mode)?;
        }
        Ok(())
    }

    pub fn sketch(&self) -> Option<&Arc<SketchParams>> {
        self.sketch.as_ref()
    }

    pub fn descriptor_dim(&self) -> usize {
        match self.config.pooling {
            PoolingMode::Exact => self.stream.appearance_channels() * self.stream.conf_channels,
            PoolingMode::Compact => self.config.sketch_dim,
        }
    }

    pub fn num_identities(&self) -> usize {
        self.params.get(ID_BIAS).map(|b| b.numel()).unwrap_or(0)
    }

    /// Image → normalized descriptor on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<ForwardOutput> {
        let (app, part) = two_stream_forward_on(tape, image, &self.stream, bound)?;
        let p = part.p();
        let pooled = match (&self.config.pooling, &self.sketch) {
            (PoolingMode::Exact, _) => tape.bilinear_pool_exact(app.a, p)?,
            (PoolingMode::Compact, Some(sketch)) => tape.compact_bilinear_pool(app.a, p, sketch)?,
            (PoolingMode::Compact, None) => return Err(Error::Config("compact pooling without sketch tables".into())),
        };
        Ok(ForwardOutput {
            descriptor: tape.l2_normalize(pooled),
            a: app.a,
            p,
            taps: app.taps.into_iter().map(|(_, v)| v).collect(),
        })
    }

    /// Inference-only descriptor of one image.
    pub fn descriptor(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(image.clone());
        let out = self.forward_on(&mut tape, &bound, x)?;
        Ok(tape.value(out.descriptor).data().to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)?;
        self.config.write_resolved(dir)?;
        if let Some(sketch) = &self.sketch {
            sketch.save(dir.join(SKETCH_FILE))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let config = RunConfig::load(dir.join(RESOLVED_CONFIG_FILE))?;
        let stream = config.stream_config()?;
        let params = ParamStore::load_dir(dir)?;
        let reference = stream.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in reference.iter() {
            let stored = params.get(name)?;
            if stored.shape() != t.shape() {
                return Err(Error::format(
                    dir,
                    format!(
                        "parameter {name} has shape {:?}, config implies {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                ));
            }
        }
        let sketch_path = dir.join(SKETCH_FILE);
        let sketch = if config.pooling == PoolingMode::Compact && sketch_path.is_file() {
            Some(Arc::new(SketchParams::load(&sketch_path)?))
        } else {
            None
        };
        let mut model = Model {
            config,
            stream,
            params,
            sketch,
        };
        if model.sketch.is_none() {
            model.sketch = model.make_sketch(model.config.pooling)?;
        }
        Ok(model)
    }
}

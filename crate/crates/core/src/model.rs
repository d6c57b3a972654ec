//! The full pipeline: patch embedding, positional encoding, encoder, graph
//! propagation, pooling and classification.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{extract_patches, patch_embed_on, patch_layout};
use crate::encoder::{encoder_layer_on, layer_param_specs, Dropout, EncoderConfig, LayerVars};
use crate::error::{dim_err, Error, Result};
use crate::gradcheck::{grad_check_wide, GradCheckReport};
use crate::graph::{build_graph, propagate_on, PropagationConfig, StGraph};
use crate::head::{argmax, pool_and_classify_on};
use crate::params::{Init, ParamStore};
use crate::rng::{stream, Rng};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;
use crate::wide::Wide;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// `[ph, pw]`
    pub patch: [usize; 2],
    /// Extra per-token `C -> C` GELU layers after the projection (0 to 2).
    #[serde(default)]
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[T, H_px, W_px, ch]` of input clips.
    pub clip_shape: [usize; 4],
    pub num_classes: usize,
    /// Token width `C`.
    pub dim: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub propagation: PropagationConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_shape.contains(&0) {
            return Err(Error::Config(format!("clip shape {:?} has a zero extent", self.clip_shape)));
        }
        patch_layout(&self.clip_shape, self.backbone.patch).map_err(|e| Error::Config(e.to_string()))?;
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::Config("num_classes and dim must be positive".into()));
        }
        if self.backbone.depth > 2 {
            return Err(Error::Config(format!("backbone depth {} exceeds 2", self.backbone.depth)));
        }
        self.encoder.validate(self.dim)?;
        self.propagation.validate()
    }

    /// `(T, P, patch_len)`
    pub fn grid(&self) -> (usize, usize, usize) {
        let (t, gh, gw, d) = patch_layout(&self.clip_shape, self.backbone.patch).expect("validated patch layout");
        (t, gh * gw, d)
    }

    pub fn num_tokens(&self) -> usize {
        let (t, p, _) = self.grid();
        t * p
    }

    /// Every learnable tensor as `(name, shape, init)`, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = self.dim;
        let (t, p, d) = self.grid();
        let mut specs = vec![
            ("backbone.patch.w".to_string(), vec![d, c], Init::FanInUniform { fan_in: d }),
            ("backbone.patch.b".to_string(), vec![c], Init::Zeros),
        ];
        for i in 0..self.backbone.depth {
            specs.push((format!("backbone.mlp{i}.w"), vec![c, c], Init::FanInUniform { fan_in: c }));
            specs.push((format!("backbone.mlp{i}.b"), vec![c], Init::Zeros));
        }
        if self.encoder.positional_encoding {
            specs.push(("pe.table".to_string(), vec![t, p, c], Init::Normal { std: 0.02 }));
        }
        for l in 0..self.encoder.layers {
            for (name, shape, init) in layer_param_specs(c, &self.encoder) {
                specs.push((format!("encoder.{l}.{name}"), shape, init));
            }
        }
        specs.push(("head.w".to_string(), vec![self.num_classes, c], Init::FanInUniform { fan_in: c }));
        specs.push(("head.b".to_string(), vec![self.num_classes], Init::Zeros));
        specs
    }
}

/// Pipeline stage whose pooled output is reported by [`TagHead::features`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Backbone,
    Encoder,
    Graph,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Stage::Backbone),
            "encoder" => Ok(Stage::Encoder),
            "graph" => Ok(Stage::Graph),
            _ => Err(Error::Config(format!("unknown stage {s}; expected backbone, encoder or graph"))),
        }
    }
}

/// Deliberate defects for negative-control gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the cotangent flowing back through the graph stage.
    FlipGraphAdjoint,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub backbone: Var,
    pub encoded: Var,
    pub propagated: Var,
    pub pooled: Var,
    pub logits: Var,
}

pub struct SampleGrads<S> {
    pub loss: f64,
    pub logits: Vec<S>,
    pub grads: Vec<Vec<S>>,
}

#[derive(Clone, Debug)]
pub struct TagHead<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    graph: Arc<StGraph>,
    pub fault: Option<Fault>,
}

impl<S: Scalar> TagHead<S> {
    /// Each tensor draws from its own stream keyed by its name, so models that
    /// share a seed share every tensor they have in common.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in config.param_specs() {
            let mut rng = stream(seed, &format!("init/{name}"), 0);
            params.insert(name, init.sample(shape, &mut rng)?)?;
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} tensors supplied, config needs {}",
                params.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return dim_err("model", format!("{name} has shape {:?}, expected {shape:?}", t.shape()));
            }
        }
        let (t, p, _) = config.grid();
        let graph = Arc::new(build_graph(t, p, &config.propagation)?);
        Ok(Self {
            config,
            params,
            graph,
            fault: None,
        })
    }

    pub fn graph(&self) -> &StGraph {
        &self.graph
    }

    pub fn cast<T: Scalar>(&self) -> TagHead<T> {
        TagHead {
            config: self.config.clone(),
            params: self.params.cast(),
            graph: Arc::clone(&self.graph),
            fault: self.fault,
        }
    }

    /// Patch matrix `[N, patch_len]` for one clip.
    pub fn prepare(&self, clip: &Tensor<f64>) -> Result<Tensor<S>> {
        if clip.shape() != self.config.clip_shape {
            return dim_err(
                "model",
                format!("clip {:?} for model expecting {:?}", clip.shape(), self.config.clip_shape),
            );
        }
        let patches = extract_patches(clip, self.config.backbone.patch)?;
        let data = patches.data().iter().map(|&x| lit(x)).collect();
        Tensor::new(patches.shape().to_vec(), data)
    }

    pub fn record_params(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.param(t)).collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Runs the pipeline on `patches` using parameter handles `vars` (aligned
    /// with `self.params`).
    pub fn forward_on(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        patches: &Tensor<S>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (t, p, d) = cfg.grid();
        if patches.shape() != [t * p, d] {
            return dim_err("model", format!("patches {:?}, expected [{}, {d}]", patches.shape(), t * p));
        }
        let x = tape.constant(patches.shape().to_vec(), patches.data().to_vec())?;
        let mut h = patch_embed_on(tape, x, self.var(vars, "backbone.patch.w")?, self.var(vars, "backbone.patch.b")?)?;
        for i in 0..cfg.backbone.depth {
            let z = tape.matmul(h, self.var(vars, &format!("backbone.mlp{i}.w"))?)?;
            let z = tape.add_row(z, self.var(vars, &format!("backbone.mlp{i}.b"))?)?;
            h = tape.gelu(z);
        }
        let backbone = h;
        if cfg.encoder.positional_encoding {
            let pe = self.var(vars, "pe.table")?;
            let pe = tape.reshape(pe, vec![t * p, cfg.dim])?;
            h = tape.add(h, pe)?;
        }
        for l in 0..cfg.encoder.layers {
            let lv = LayerVars::from_store(&self.params, vars, &format!("encoder.{l}."), cfg.encoder.heads)?;
            h = encoder_layer_on(tape, h, &lv, &cfg.encoder, dropout.as_deref_mut())?;
        }
        let encoded = h;
        let mut propagated = propagate_on(tape, encoded, &self.graph, &cfg.propagation)?;
        if self.fault == Some(Fault::FlipGraphAdjoint) {
            let shape = tape.shape(propagated).to_vec();
            let value = tape.value(propagated).to_vec();
            propagated = tape.linear(
                propagated,
                shape,
                value,
                Box::new(|g: &[S]| g.iter().map(|&x| -x).collect()),
            )?;
        }
        let (pooled, logits) =
            pool_and_classify_on(tape, propagated, self.var(vars, "head.w")?, self.var(vars, "head.b")?)?;
        Ok(ForwardVars {
            backbone,
            encoded,
            propagated,
            pooled,
            logits,
        })
    }

    /// Cross-entropy of one sample, recorded on `tape`.
    pub fn loss_on(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        patches: &Tensor<S>,
        label: usize,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Var, ForwardVars)> {
        let fwd = self.forward_on(tape, vars, patches, dropout)?;
        Ok((tape.cross_entropy(fwd.logits, label)?, fwd))
    }

    /// Loss, logits and per-parameter gradients of one sample.
    pub fn loss_and_grads(
        &self,
        patches: &Tensor<S>,
        label: usize,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<SampleGrads<S>> {
        let mut tape = Tape::new();
        let vars = self.record_params(&mut tape);
        let (loss, fwd) = self.loss_on(&mut tape, &vars, patches, label, dropout)?;
        tape.backward(loss)?;
        let grads = vars.iter().map(|&v| tape.grad(v)).collect::<Result<Vec<_>>>()?;
        Ok(SampleGrads {
            loss: to_f64(tape.value(loss)[0]),
            logits: tape.value(fwd.logits).to_vec(),
            grads,
        })
    }

    fn inference(&self, patches: &Tensor<S>) -> Result<(Tape<S>, ForwardVars)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant_from(t)).collect();
        let fwd = self.forward_on(&mut tape, &vars, patches, None)?;
        Ok((tape, fwd))
    }

    pub fn logits(&self, patches: &Tensor<S>) -> Result<Vec<S>> {
        let (tape, fwd) = self.inference(patches)?;
        Ok(tape.value(fwd.logits).to_vec())
    }

    /// Pooled features after `stage`.
    pub fn features(&self, patches: &Tensor<S>, stage: Stage) -> Result<Vec<S>> {
        let (mut tape, fwd) = self.inference(patches)?;
        let v = match stage {
            Stage::Backbone => tape.mean_rows(fwd.backbone)?,
            Stage::Encoder => tape.mean_rows(fwd.encoded)?,
            Stage::Graph => fwd.pooled,
        };
        Ok(tape.value(v).to_vec())
    }

    /// `(predicted class, loss)` for one labelled sample.
    pub fn predict(&self, patches: &Tensor<S>, label: usize) -> Result<(usize, f64)> {
        let logits = self.logits(patches)?;
        let loss = crate::head::cross_entropy(&logits, label)?;
        Ok((argmax(&logits), to_f64(loss)))
    }

    /// Gradient-enabled dropout context when the config asks for one.
    pub fn dropout<'a>(&self, rng: &'a mut Rng) -> Option<Dropout<'a>> {
        (self.config.encoder.dropout > 0.0).then(|| Dropout {
            rate: self.config.encoder.dropout,
            rng,
        })
    }
}

impl TagHead<f64> {
    /// Finite-difference check of the single-sample loss over every
    /// parameter entry, with a double-double reference for the differences.
    pub fn grad_check(&self, clip: &Tensor<f64>, label: usize, eps: f64) -> Result<GradCheckReport> {
        let wide: TagHead<Wide> = self.cast();
        let x = self.prepare(clip)?;
        let xw = wide.prepare(clip)?;
        grad_check_wide(
            self.params.names(),
            self.params.tensors(),
            eps,
            |tape, vars| Ok(self.loss_on(tape, vars, &x, label, None)?.0),
            |tape, vars| Ok(wide.loss_on(tape, vars, &xw, label, None)?.0),
        )
    }
}

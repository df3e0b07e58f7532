use std::fmt;

use super::mlp::{BoundMlp, Head, Mlp, MlpSpec};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// The four parameter sets of the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    /// Shared feature extractor `x -> z`.
    Extractor,
    /// Label predictor `z -> logits`.
    Predictor,
    /// Reconstruction network `z -> x_hat`.
    Decoder,
    /// Binary domain classifier `z -> logit`, used by the DAT baseline.
    Discriminator,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Extractor, Part::Predictor, Part::Decoder, Part::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            Part::Extractor => "extractor",
            Part::Predictor => "predictor",
            Part::Decoder => "decoder",
            Part::Discriminator => "discriminator",
        }
    }

    pub fn from_name(s: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleSpec {
    pub extractor: MlpSpec,
    pub predictor: MlpSpec,
    pub decoder: MlpSpec,
    pub discriminator: Option<MlpSpec>,
}

impl BundleSpec {
    /// Checks the mirror constraints: the decoder maps the latent space back
    /// to input space, and the heads read the latent space.
    pub fn validate(&self) -> Result<()> {
        let d_in = self.extractor.input_dim();
        let d_z = self.extractor.output_dim();
        if self.decoder.input_dim() != d_z {
            return Err(Error::InvalidSpec(format!(
                "decoder input {} != extractor output {d_z}",
                self.decoder.input_dim()
            )));
        }
        if self.decoder.output_dim() != d_in {
            return Err(Error::InvalidSpec(format!(
                "decoder output {} != extractor input {d_in}",
                self.decoder.output_dim()
            )));
        }
        if self.predictor.input_dim() != d_z {
            return Err(Error::InvalidSpec(format!(
                "predictor input {} != extractor output {d_z}",
                self.predictor.input_dim()
            )));
        }
        if self.predictor.output_dim() < 2 {
            return Err(Error::InvalidSpec("predictor needs at least two classes".into()));
        }
        if let Some(d) = &self.discriminator {
            if d.input_dim() != d_z || d.output_dim() != 1 {
                return Err(Error::InvalidSpec(format!(
                    "discriminator must map {d_z} -> 1, got {:?}",
                    d.widths()
                )));
            }
        }
        Ok(())
    }

    /// Builds the relu MLP family from hidden widths. The decoder mirrors the
    /// extractor's hidden widths in reverse.
    pub fn from_widths(
        input_dim: usize,
        classes: usize,
        hidden: &[usize],
        latent: usize,
        discriminator_hidden: Option<&[usize]>,
    ) -> Result<Self> {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(hidden);
        enc.push(latent);
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        let discriminator = discriminator_hidden
            .map(|h| {
                let mut w = vec![latent];
                w.extend_from_slice(h);
                w.push(1);
                MlpSpec::relu(&w, Head::Logits)
            })
            .transpose()?;
        let spec = BundleSpec {
            extractor: MlpSpec::relu(&enc, Head::Linear)?,
            predictor: MlpSpec::relu(&[latent, classes], Head::Logits)?,
            decoder: MlpSpec::relu(&dec, Head::Linear)?,
            discriminator,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default desk-scale architecture: extractor `[d, 64, 64, 16]`,
    /// predictor `[16, K]`, decoder `[16, 64, 64, d]`, discriminator
    /// `[16, 32, 1]`.
    pub fn toy(input_dim: usize, classes: usize, with_discriminator: bool) -> Result<Self> {
        Self::from_widths(
            input_dim,
            classes,
            &[64, 64],
            16,
            with_discriminator.then_some(&[32][..]),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.predictor.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub extractor: Mlp,
    pub predictor: Mlp,
    pub decoder: Mlp,
    pub discriminator: Option<Mlp>,
}

impl ModelBundle {
    /// Draws every parameter from `rng` in part order.
    pub fn init(spec: &BundleSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        Ok(ModelBundle {
            extractor: Mlp::init(&spec.extractor, rng),
            predictor: Mlp::init(&spec.predictor, rng),
            decoder: Mlp::init(&spec.decoder, rng),
            discriminator: spec.discriminator.as_ref().map(|d| Mlp::init(d, rng)),
        })
    }

    pub fn zeros(spec: &BundleSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ModelBundle {
            extractor: Mlp::zeros(&spec.extractor),
            predictor: Mlp::zeros(&spec.predictor),
            decoder: Mlp::zeros(&spec.decoder),
            discriminator: spec.discriminator.as_ref().map(Mlp::zeros),
        })
    }

    pub fn spec(&self) -> BundleSpec {
        BundleSpec {
            extractor: self.extractor.spec().clone(),
            predictor: self.predictor.spec().clone(),
            decoder: self.decoder.spec().clone(),
            discriminator: self.discriminator.as_ref().map(|d| d.spec().clone()),
        }
    }

    pub fn part(&self, part: Part) -> Option<&Mlp> {
        match part {
            Part::Extractor => Some(&self.extractor),
            Part::Predictor => Some(&self.predictor),
            Part::Decoder => Some(&self.decoder),
            Part::Discriminator => self.discriminator.as_ref(),
        }
    }

    pub fn part_mut(&mut self, part: Part) -> Option<&mut Mlp> {
        match part {
            Part::Extractor => Some(&mut self.extractor),
            Part::Predictor => Some(&mut self.predictor),
            Part::Decoder => Some(&mut self.decoder),
            Part::Discriminator => self.discriminator.as_mut(),
        }
    }

    /// `(name, tensor)` pairs in checkpoint order, e.g. `decoder.1.bias`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for part in Part::ALL {
            if let Some(mlp) = self.part(part) {
                for (i, layer) in mlp.layers().iter().enumerate() {
                    out.push((format!("{part}.{i}.weight"), &layer.weight));
                    out.push((format!("{part}.{i}.bias"), &layer.bias));
                }
            }
        }
        out
    }

    /// Registers all parameters on `g`; only parts listed in `trainable`
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: &[Part]) -> BoundBundle {
        let on = |p: Part| trainable.contains(&p);
        BoundBundle {
            extractor: self.extractor.bind(g, on(Part::Extractor)),
            predictor: self.predictor.bind(g, on(Part::Predictor)),
            decoder: self.decoder.bind(g, on(Part::Decoder)),
            discriminator: self.discriminator.as_ref().map(|d| d.bind(g, on(Part::Discriminator))),
        }
    }

    /// Copies gradients from a finished backward pass into the trainable
    /// parts' buffers.
    pub fn collect_grads(&mut self, g: &Graph, bound: &BoundBundle) -> Result<()> {
        self.extractor.accumulate_grads(g, &bound.extractor)?;
        self.predictor.accumulate_grads(g, &bound.predictor)?;
        self.decoder.accumulate_grads(g, &bound.decoder)?;
        if let (Some(d), Some(bd)) = (self.discriminator.as_mut(), bound.discriminator.as_ref()) {
            d.accumulate_grads(g, bd)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for part in Part::ALL {
            if let Some(m) = self.part_mut(part) {
                m.zero_grad();
            }
        }
    }
}

impl BundleSpec {
    /// Number of parameter tensors per part, in checkpoint order.
    pub fn param_counts(&self) -> Vec<(Part, usize)> {
        let mut out = vec![
            (Part::Extractor, 2 * self.extractor.layer_count()),
            (Part::Predictor, 2 * self.predictor.layer_count()),
            (Part::Decoder, 2 * self.decoder.layer_count()),
        ];
        if let Some(d) = &self.discriminator {
            out.push((Part::Discriminator, 2 * d.layer_count()));
        }
        out
    }
}

/// A [`ModelBundle`] registered on one graph.
#[derive(Debug, Clone)]
pub struct BoundBundle {
    extractor: BoundMlp,
    predictor: BoundMlp,
    decoder: BoundMlp,
    discriminator: Option<BoundMlp>,
}

impl BoundBundle {
    /// Wraps nodes given in [`ModelBundle::named_params`] order.
    pub fn from_vars(spec: &BundleSpec, vars: &[Var]) -> Result<Self> {
        let mut rest = vars;
        let mut take = |mlp: &MlpSpec| -> Result<BoundMlp> {
            let n = (2 * mlp.layer_count()).min(rest.len());
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Mlp::bind_vars(mlp, head)
        };
        let extractor = take(&spec.extractor)?;
        let predictor = take(&spec.predictor)?;
        let decoder = take(&spec.decoder)?;
        let discriminator = spec.discriminator.as_ref().map(&mut take).transpose()?;
        if !rest.is_empty() {
            return Err(Error::shape("from_vars", format!("{} nodes left over", rest.len())));
        }
        Ok(BoundBundle {
            extractor,
            predictor,
            decoder,
            discriminator,
        })
    }

    pub fn feature_extract(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.extractor.forward(g, x)
    }

    pub fn predict(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.predictor.forward(g, z)
    }

    pub fn reconstruct(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.decoder.forward(g, z)
    }

    pub fn discriminate(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.discriminator
            .as_ref()
            .ok_or(Error::MissingDiscriminator)?
            .forward(g, z)
    }

    pub fn part(&self, part: Part) -> Option<&BoundMlp> {
        match part {
            Part::Extractor => Some(&self.extractor),
            Part::Predictor => Some(&self.predictor),
            Part::Decoder => Some(&self.decoder),
            Part::Discriminator => self.discriminator.as_ref(),
        }
    }
}

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

/// How the output layer is read. Both are affine; `Logits` marks outputs fed
/// to a softmax or sigmoid loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Logits,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidSpec(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Logits => "logits",
            Head::Linear => "linear",
        })
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(Head::Logits),
            "linear" => Ok(Head::Linear),
            other => Err(Error::InvalidSpec(format!("unknown head {other:?}"))),
        }
    }
}

/// Layer widths `[input, hidden.., output]` plus one activation per hidden
/// layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    head: Head,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, head: Head) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need input and output widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidSpec(format!("zero width in {widths:?}")));
        }
        if activations.len() != widths.len() - 2 {
            return Err(Error::InvalidSpec(format!(
                "{} hidden layers but {} activations",
                widths.len() - 2,
                activations.len()
            )));
        }
        Ok(MlpSpec {
            widths,
            activations,
            head,
        })
    }

    /// All hidden layers use relu.
    pub fn relu(widths: &[usize], head: Head) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::new(widths.to_vec(), vec![Activation::Relu; hidden], head)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }
}

impl fmt::Display for MlpSpec {
    /// `2,64,16 relu linear`; a spec without hidden layers writes `-` for
    /// the activation list.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        let acts: Vec<String> = self.activations.iter().map(ToString::to_string).collect();
        let acts = if acts.is_empty() {
            "-".to_string()
        } else {
            acts.join(",")
        };
        write!(f, "{} {} {}", widths.join(","), acts, self.head)
    }
}

impl FromStr for MlpSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        let [widths, acts, head] = fields.as_slice() else {
            return Err(Error::InvalidSpec(format!("malformed spec {s:?}")));
        };
        let widths = widths
            .split(',')
            .map(|w| w.parse().map_err(|_| Error::InvalidSpec(format!("bad width {w:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let acts = if *acts == "-" {
            Vec::new()
        } else {
            acts.split(',').map(str::parse).collect::<Result<_>>()?
        };
        Self::new(widths, acts, head.parse()?)
    }
}

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    /// Weights from U(-s, s), `s = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut RngState) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
                Linear {
                    weight: Tensor::param(vec![fan_in, fan_out], data).expect("finite init"),
                    bias: Tensor::param(vec![fan_out], vec![0.0; fan_out]).expect("finite init"),
                }
            })
            .collect();
        Mlp {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let mut weight = Tensor::zeros(vec![w[0], w[1]]);
                let mut bias = Tensor::zeros(vec![w[1]]);
                weight.set_requires_grad(true);
                bias.set_requires_grad(true);
                Linear { weight, bias }
            })
            .collect();
        Mlp {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Parameters in checkpoint order: per layer, weight then bias.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers the parameters on `g`. Frozen parameters enter as constants
    /// and never receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.variable(&l.weight), g.variable(&l.bias))
                } else {
                    (g.constant(&l.weight), g.constant(&l.bias))
                }
            })
            .collect();
        BoundMlp {
            vars,
            activations: self.spec.activations.clone(),
            input_dim: self.spec.input_dim(),
            trainable,
        }
    }

    /// Wraps existing graph nodes, taken per layer as weight then bias.
    /// Used by finite-difference checks that own the parameter nodes.
    pub fn bind_vars(spec: &MlpSpec, vars: &[Var]) -> Result<BoundMlp> {
        if vars.len() != 2 * spec.layer_count() {
            return Err(Error::shape(
                "bind_vars",
                format!("{} nodes for {} layers", vars.len(), spec.layer_count()),
            ));
        }
        Ok(BoundMlp {
            vars: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
            activations: spec.activations.clone(),
            input_dim: spec.input_dim(),
            trainable: true,
        })
    }

    /// Adds the gradients that flowed to `bound` into the parameter buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundMlp) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            if let Some(gw) = g.grad(w) {
                layer.weight.accumulate_grad(gw)?;
            }
            if let Some(gb) = g.grad(b) {
                layer.bias.accumulate_grad(gb)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// An [`Mlp`] registered on one graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
    activations: Vec<Activation>,
    input_dim: usize,
    trainable: bool,
}

impl BoundMlp {
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match g.shape(x) {
            [_, d] if *d == self.input_dim => {}
            s => {
                return Err(Error::shape(
                    "mlp",
                    format!("expected [batch, {}], got {s:?}", self.input_dim),
                ))
            }
        }
        let mut h = x;
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if let Some(act) = self.activations.get(i) {
                h = match act {
                    Activation::Relu => g.relu(h)?,
                    Activation::Sigmoid => g.sigmoid(h)?,
                    Activation::Identity => h,
                };
            }
        }
        Ok(h)
    }
}

//! Plain-text parameter checkpoints.
//!
//! ```text
//! mdat-checkpoint 1
//! spec extractor 2,64,64,16 relu,relu linear
//! spec predictor 16,2 - logits
//! spec decoder 16,64,64,2 relu,relu linear
//! param extractor.0.weight 2x64
//! <space-separated values, row-major>
//! param extractor.0.bias 64
//! ...
//! ```
//!
//! Parameters follow [`ModelBundle::named_params`] order: parts in the order
//! extractor, predictor, decoder, discriminator; within a part, layer by
//! layer, weight before bias. Values use the shortest exponent form that
//! parses back to the same bits.

use std::io::{BufRead, Write};

use super::{BundleSpec, MlpSpec, ModelBundle, Part};
use crate::error::{Error, Result};

const MAGIC: &str = "mdat-checkpoint 1";

pub fn write_checkpoint<W: Write>(bundle: &ModelBundle, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    for part in Part::ALL {
        if let Some(mlp) = bundle.part(part) {
            writeln!(out, "spec {part} {}", mlp.spec())?;
        }
    }
    for (name, t) in bundle.named_params() {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        writeln!(out, "param {name} {}", dims.join("x"))?;
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", values.join(" "))?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<ModelBundle> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(Error::Parse(format!("checkpoint ended before {what}"))),
        }
    };
    let (_, magic) = next("header")?;
    if magic.trim() != MAGIC {
        return Err(Error::Parse(format!("not a checkpoint: {magic:?}")));
    }

    let mut specs: Vec<(Part, MlpSpec)> = Vec::new();
    let mut pending = None;
    loop {
        let (n, line) = match next("parameters") {
            Ok(l) => l,
            Err(_) if !specs.is_empty() => break,
            Err(e) => return Err(e),
        };
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("spec ") {
            let (part, spec) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("line {n}: malformed spec")))?;
            let part = Part::from_name(part).ok_or_else(|| Error::Parse(format!("line {n}: unknown part {part:?}")))?;
            specs.push((part, spec.parse()?));
        } else {
            pending = Some((n, line));
            break;
        }
    }

    let find = |p: Part| specs.iter().find(|(q, _)| *q == p).map(|(_, s)| s.clone());
    let missing = |p: Part| Error::Parse(format!("checkpoint lacks a {p} spec"));
    let spec = BundleSpec {
        extractor: find(Part::Extractor).ok_or_else(|| missing(Part::Extractor))?,
        predictor: find(Part::Predictor).ok_or_else(|| missing(Part::Predictor))?,
        decoder: find(Part::Decoder).ok_or_else(|| missing(Part::Decoder))?,
        discriminator: find(Part::Discriminator),
    };
    let mut bundle = ModelBundle::zeros(&spec)?;
    let expected: Vec<(String, Vec<usize>)> = bundle
        .named_params()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec()))
        .collect();

    let mut values_by_param = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let (n, header) = match pending.take() {
            Some(l) => l,
            None => next(name)?,
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        let ["param", got_name, dims] = fields.as_slice() else {
            return Err(Error::Parse(format!("line {n}: expected param header")));
        };
        if got_name != name {
            return Err(Error::Parse(format!("line {n}: expected {name}, found {got_name}")));
        }
        let got_shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Parse(format!("line {n}: bad shape"))))
            .collect::<Result<_>>()?;
        if &got_shape != shape {
            return Err(Error::Parse(format!(
                "line {n}: {name} has shape {got_shape:?}, spec implies {shape:?}"
            )));
        }
        let (n, body) = next(name)?;
        let values: Vec<f64> = body
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Parse(format!("line {n}: bad value {v:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Parse(format!("line {n}: wrong value count for {name}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "checkpoint" });
        }
        values_by_param.push(values);
    }

    let mut values = values_by_param.into_iter();
    for part in Part::ALL {
        if let Some(mlp) = bundle.part_mut(part) {
            for p in mlp.params_mut() {
                p.data_mut()
                    .copy_from_slice(&values.next().expect("one entry per param"));
            }
        }
    }
    Ok(bundle)
}

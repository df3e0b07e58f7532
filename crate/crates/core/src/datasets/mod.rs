//! Synthetic source/target datasets, standardization and batch pairing.
//!
//! A dataset carries two label sets: `labels`, visible to training, and
//! `eval_labels`, used only for scoring. Target datasets never have
//! training-visible labels, and [`DomainDataset::train_labels`] on them is a
//! hard error.

mod glyphs;
mod moons;


use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngState;

pub use glyphs::{gen_glyphs, glyph_templates, glyphs_task, GlyphConfig, ShiftKind};
pub use moons::{gen_moons, moons_task, rotate_about, MoonsConfig, MOONS_CENTROID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// 0 for source, 1 for target.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Parse(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    inputs: Vec<f64>,
    dim: usize,
    labels: Option<Vec<usize>>,
    eval_labels: Option<Vec<usize>>,
    domain: Domain,
}

impl DomainDataset {
    /// Source data: labels are visible to training and also used for scoring.
    pub fn source(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        let ds = DomainDataset {
            inputs,
            dim,
            eval_labels: Some(labels.clone()),
            labels: Some(labels),
            domain: Domain::Source,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Target data with optional held-back labels for scoring only.
    pub fn target(inputs: Vec<f64>, dim: usize, eval_labels: Option<Vec<usize>>) -> Result<Self> {
        let ds = DomainDataset {
            inputs,
            dim,
            labels: None,
            eval_labels,
            domain: Domain::Target,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.inputs.is_empty() || !self.inputs.len().is_multiple_of(self.dim) {
            return Err(Error::InvalidSpec(format!(
                "{} values do not form rows of width {}",
                self.inputs.len(),
                self.dim
            )));
        }
        if !self.inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "dataset" });
        }
        let n = self.len();
        for l in [&self.labels, &self.eval_labels].into_iter().flatten() {
            if l.len() != n {
                return Err(Error::InvalidSpec(format!("{} labels for {n} samples", l.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Labels a training path may read. Asking for them on target data is a
    /// leakage error, whether or not evaluation labels exist.
    pub fn train_labels(&self) -> Result<&[usize]> {
        match (&self.domain, &self.labels) {
            (Domain::Source, Some(l)) => Ok(l),
            _ => Err(Error::LabelLeakage),
        }
    }

    /// Labels for scoring. Not for use on any training path.
    pub fn eval_labels(&self) -> Option<&[usize]> {
        self.eval_labels.as_deref()
    }

    /// The same samples with evaluation labels removed.
    pub fn without_eval_labels(&self) -> Self {
        let mut out = self.clone();
        if out.domain == Domain::Target {
            out.eval_labels = None;
        }
        out
    }

    /// Every row as a `[N, d]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.inputs.clone()).expect("validated")
    }

    /// The selected rows as a `[idx.len(), d]` tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data).expect("validated")
    }

    pub fn gather_train_labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        let l = self.train_labels()?;
        Ok(idx.iter().map(|&i| l[i]).collect())
    }

    fn map_inputs(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        let d = self.dim;
        for (k, v) in out.inputs.iter_mut().enumerate() {
            *v = f(k % d, *v);
        }
        out
    }
}

/// Per-feature affine standardization fitted on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics per feature. A constant feature gets unit scale.
    pub fn fit(ds: &DomainDataset) -> Self {
        let (n, d) = (ds.len() as f64, ds.dim());
        let mut mean = vec![0.0; d];
        for i in 0..ds.len() {
            for (m, v) in mean.iter_mut().zip(ds.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..ds.len() {
            for ((s, v), m) in var.iter_mut().zip(ds.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let s = (s / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, ds: &DomainDataset) -> Result<DomainDataset> {
        self.check(ds.dim())?;
        Ok(ds.map_inputs(|j, v| (v - self.mean[j]) / self.std[j]))
    }

    /// Maps standardized row-major values back to the raw scale.
    pub fn invert(&self, values: &[f64]) -> Result<Vec<f64>> {
        let d = self.mean.len();
        if !values.len().is_multiple_of(d) {
            return Err(Error::shape("invert", format!("{} values, width {d}", values.len())));
        }
        Ok(values
            .iter()
            .enumerate()
            .map(|(k, v)| v * self.std[k % d] + self.mean[k % d])
            .collect())
    }

    fn check(&self, dim: usize) -> Result<()> {
        if dim != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("fitted on {} features, got {dim}", self.mean.len()),
            ));
        }
        Ok(())
    }
}

/// The four splits of one adaptation task, standardized with source-train
/// statistics.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub source_train: DomainDataset,
    pub target_train: DomainDataset,
    pub source_test: DomainDataset,
    pub target_test: DomainDataset,
    pub standardizer: Standardizer,
    pub classes: usize,
}

impl TaskData {
    pub(crate) fn standardized(raw: [DomainDataset; 4], classes: usize) -> Result<Self> {
        let st = Standardizer::fit(&raw[0]);
        let [a, b, c, d] = raw;
        Ok(TaskData {
            source_train: st.apply(&a)?,
            target_train: st.apply(&b)?,
            source_test: st.apply(&c)?,
            target_test: st.apply(&d)?,
            standardizer: st,
            classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.source_train.dim()
    }
}

/// Row indices for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One epoch of paired batches. Both domains are shuffled independently and
/// every step takes `batch_size` samples from each; the ragged tail of each
/// permutation is dropped.
pub fn paired_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Vec<BatchPair>> {
    if batch_size == 0 || batch_size > n_source.min(n_target) {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} must be in 1..={}",
            n_source.min(n_target)
        )));
    }
    let mut src: Vec<usize> = (0..n_source).collect();
    let mut tgt: Vec<usize> = (0..n_target).collect();
    src.shuffle(rng);
    tgt.shuffle(rng);
    let steps = n_source.min(n_target) / batch_size;
    Ok((0..steps)
        .map(|k| {
            let r = k * batch_size..(k + 1) * batch_size;
            BatchPair {
                source: src[r.clone()].to_vec(),
                target: tgt[r].to_vec(),
            }
        })
        .collect())
}

/// Writes rows as `x0..x{d-1},label,domain`. Labels not visible to training
/// are written as -1.
pub fn write_csv<W: Write>(sets: &[&DomainDataset], mut w: W) -> Result<()> {
    let d = match sets.first() {
        Some(s) => s.dim(),
        None => return Ok(()),
    };
    if sets.iter().any(|s| s.dim() != d) {
        return Err(Error::shape("write_csv", "datasets differ in width"));
    }
    let cols: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(w, "{},label,domain", cols.join(","))?;
    for s in sets {
        let labels = s.train_labels().ok();
        for i in 0..s.len() {
            for v in s.row(i) {
                write!(w, "{v},")?;
            }
            match labels {
                Some(l) => write!(w, "{}", l[i])?,
                None => write!(w, "-1")?,
            }
            writeln!(w, ",{}", s.domain())?;
        }
    }
    Ok(())
}

/// Reads the format of [`write_csv`], one dataset per domain in order of
/// first appearance.
pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<DomainDataset>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty csv".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.len().saturating_sub(2);
    if d == 0 || cols[d] != "label" || cols[d + 1] != "domain" {
        return Err(Error::Parse(format!("bad header `{header}`")));
    }
    let mut groups: Vec<(Domain, Vec<f64>, Vec<i64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::ConfigLine {
            line: n + 2,
            message: msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 2 {
            return Err(bad(format!("expected {} fields, got {}", d + 2, f.len())));
        }
        let domain: Domain = f[d + 1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let label: i64 = f[d].parse().map_err(|_| bad(format!("bad label `{}`", f[d])))?;
        let idx = match groups.iter().position(|g| g.0 == domain) {
            Some(i) => i,
            None => {
                groups.push((domain, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        for v in &f[..d] {
            groups[idx]
                .1
                .push(v.parse().map_err(|_| bad(format!("bad value `{v}`")))?);
        }
        groups[idx].2.push(label);
    }
    groups
        .into_iter()
        .map(|(domain, x, l)| match domain {
            Domain::Source => {
                let labels = l
                    .into_iter()
                    .map(|v| usize::try_from(v).map_err(|_| Error::Parse("source label -1".into())))
                    .collect::<Result<_>>()?;
                DomainDataset::source(x, d, labels)
            }
            Domain::Target => DomainDataset::target(x, d, None),
        })
        .collect()
}

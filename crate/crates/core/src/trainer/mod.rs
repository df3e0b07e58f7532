//! Training loops for MDAT and its baselines, evaluation, and epoch logs.
//!
//! Every step builds fresh graphs. Parameters outside the active update are
//! bound as constants, so they receive no gradient and stay untouched.

mod log;


use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::{Graph, Tensor};
use crate::datasets::{glyphs_task, moons_task, DomainDataset, GlyphConfig, MoonsConfig, TaskData};
use crate::error::{Error, Result};
use crate::losses::{dat_losses, decoder_objective, extractor_objective, source_recon_objective, task_nll, LossValues};
use crate::nn::{BundleSpec, ModelBundle, Part, SgdMomentum};
use crate::rng::{streams, RngState};

pub use log::{read_epoch_csv, write_epoch_csv, EpochLog, EPOCH_CSV_HEADER};

/// Any loss above this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Mdat,
    Dat,
    SourceOnly,
    ArnNoMdat,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mdat, Method::Dat, Method::SourceOnly, Method::ArnNoMdat];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mdat => "mdat",
            Method::Dat => "dat",
            Method::SourceOnly => "source_only",
            Method::ArnNoMdat => "arn_no_mdat",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Moons,
    Glyphs,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Moons => "moons",
            TaskKind::Glyphs => "glyphs",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(TaskKind::Moons),
            "glyphs" => Ok(TaskKind::Glyphs),
            other => Err(Error::Parse(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub task: TaskKind,
    /// Weight of the adversarial term in the extractor loss. Reconstruction
    /// error is averaged per feature, so useful weights and margins are
    /// much larger than they would be for a per-sample sum.
    pub alpha: f64,
    pub margin: f64,
    pub lr: f64,
    /// Learning rate in epoch `e` is `lr / (1 + lr_decay * e)`.
    pub lr_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds data generation, initialization and batch order.
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub disc_hidden: Vec<usize>,
    pub moons: MoonsConfig,
    pub glyphs: GlyphConfig,
    /// Record per-epoch wall time. Off by default so logs are reproducible
    /// byte for byte.
    pub timing: bool,
}

impl TrainConfig {
    /// Defaults for one task.
    pub fn for_task(task: TaskKind) -> Self {
        let base = TrainConfig {
            method: Method::Mdat,
            task,
            alpha: 1.0,
            margin: 0.5,
            lr: 0.01,
            lr_decay: 0.0,
            momentum: 0.9,
            epochs: 100,
            batch_size: 50,
            seed: 1,
            hidden: vec![64, 64],
            latent: 16,
            disc_hidden: vec![32],
            moons: MoonsConfig::default(),
            glyphs: GlyphConfig::default(),
            timing: false,
        };
        match task {
            TaskKind::Moons => base,
            TaskKind::Glyphs => TrainConfig {
                hidden: vec![128, 64],
                latent: 32,
                disc_hidden: vec![64],
                alpha: 0.3,
                margin: 1.0,
                lr: 0.05,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.method == Method::Mdat && !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail(format!("margin must be > 0 for mdat, got {}", self.margin));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return fail(format!("lr_decay must be >= 0, got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if self.latent == 0 || self.hidden.contains(&0) || self.disc_hidden.contains(&0) {
            return fail("layer widths must be >= 1".into());
        }
        match self.task {
            TaskKind::Moons => self.moons_config().validate(),
            TaskKind::Glyphs => self.glyph_config().validate(),
        }
    }

    pub fn moons_config(&self) -> MoonsConfig {
        MoonsConfig {
            seed: self.seed,
            ..self.moons.clone()
        }
    }

    pub fn glyph_config(&self) -> GlyphConfig {
        GlyphConfig {
            seed: self.seed,
            ..self.glyphs.clone()
        }
    }

    /// Generates the task's four standardized splits for this seed.
    pub fn task_data(&self) -> Result<TaskData> {
        match self.task {
            TaskKind::Moons => moons_task(&self.moons_config()),
            TaskKind::Glyphs => glyphs_task(&self.glyph_config()),
        }
    }

    /// Architecture for the given data shape. Only DAT gets a discriminator.
    pub fn bundle_spec(&self, input_dim: usize, classes: usize) -> Result<BundleSpec> {
        let disc = (self.method == Method::Dat).then_some(&self.disc_hidden[..]);
        BundleSpec::from_widths(input_dim, classes, &self.hidden, self.latent, disc)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / (1.0 + self.lr_decay * epoch as f64)
    }
}

/// Momentum buffers, one optimizer per part.
#[derive(Debug, Clone)]
pub struct OptStates {
    opts: [SgdMomentum; 4],
}

impl OptStates {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        let o = SgdMomentum::new(lr, momentum)?;
        Ok(OptStates {
            opts: [o.clone(), o.clone(), o.clone(), o],
        })
    }

    pub fn get(&self, part: Part) -> &SgdMomentum {
        &self.opts[part_index(part)]
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opts.iter_mut().for_each(|o| o.set_lr(lr));
    }

    fn step(&mut self, bundle: &mut ModelBundle, part: Part) -> Result<()> {
        let opt = &mut self.opts[part_index(part)];
        let mlp = bundle.part_mut(part).ok_or(Error::MissingDiscriminator)?;
        opt.step(&mut mlp.params_mut())
    }
}

fn part_index(part: Part) -> usize {
    Part::ALL.iter().position(|&p| p == part).expect("listed")
}

/// One step's worth of data. Target labels are not part of it.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub src_x: &'a Tensor,
    pub src_y: &'a [usize],
    pub tgt_x: &'a Tensor,
}

fn require_method(cfg: &TrainConfig, want: Method) -> Result<()> {
    if cfg.method != want {
        return Err(Error::InvalidConfig(format!(
            "{want} step called with method {}",
            cfg.method
        )));
    }
    Ok(())
}

/// Reversal weight of the progressive schedule at training progress `p`.
pub fn reversal_weight(p: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Extractor/predictor update on the source task loss plus `alpha` times
/// the target reconstruction error.
fn extractor_phase(bundle: &mut ModelBundle, batch: &Batch, alpha: f64, opts: &mut OptStates) -> Result<(f64, f64)> {
    const PARTS: [Part; 2] = [Part::Extractor, Part::Predictor];
    bundle.zero_grad();
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, &PARTS);
    let (xs, xt) = (g.constant(batch.src_x), g.constant(batch.tgt_x));
    let t = extractor_objective(&mut g, &bound, xs, batch.src_y, xt, alpha)?;
    g.backward(t.objective)?;
    bundle.collect_grads(&g, &bound)?;
    for p in PARTS {
        opts.step(bundle, p)?;
    }
    Ok((g.scalar(t.task_nll), g.scalar(t.recon_tgt)))
}

/// Decoder update on a fresh forward pass through the updated extractor.
fn decoder_phase(
    bundle: &mut ModelBundle,
    batch: &Batch,
    margin: Option<f64>,
    opts: &mut OptStates,
) -> Result<(f64, f64, Option<f64>)> {
    bundle.zero_grad();
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, &[Part::Decoder]);
    let (xs, xt) = (g.constant(batch.src_x), g.constant(batch.tgt_x));
    let t = match margin {
        Some(m) => decoder_objective(&mut g, &bound, xs, xt, m)?,
        None => source_recon_objective(&mut g, &bound, xs, xt)?,
    };
    g.backward(t.objective)?;
    bundle.collect_grads(&g, &bound)?;
    opts.step(bundle, Part::Decoder)?;
    Ok((
        g.scalar(t.objective),
        g.scalar(t.recon_src),
        t.hinge_tgt.map(|h| g.scalar(h)),
    ))
}

fn arn_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
    opts: &mut OptStates,
    margin: Option<f64>,
) -> Result<LossValues> {
    let (nll, recon_tgt) = extractor_phase(bundle, batch, cfg.alpha, opts)?;
    let (obj, recon_src, hinge) = decoder_phase(bundle, batch, margin, opts)?;
    Ok(LossValues {
        task_nll: nll,
        recon_src: Some(recon_src),
        recon_tgt: Some(recon_tgt),
        hinge_tgt: hinge,
        decoder_objective: Some(obj),
        extractor_adv: Some(recon_tgt),
        dat_domain: None,
    })
}

/// Extractor/predictor step, then decoder step on the same batch.
pub fn mdat_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
    opts: &mut OptStates,
) -> Result<LossValues> {
    require_method(cfg, Method::Mdat)?;
    arn_step(bundle, batch, cfg, opts, Some(cfg.margin))
}

/// As [`mdat_step`], but the decoder only learns to reconstruct source.
pub fn arn_no_mdat_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
    opts: &mut OptStates,
) -> Result<LossValues> {
    require_method(cfg, Method::ArnNoMdat)?;
    arn_step(bundle, batch, cfg, opts, None)
}

pub fn source_only_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
    opts: &mut OptStates,
) -> Result<LossValues> {
    require_method(cfg, Method::SourceOnly)?;
    const PARTS: [Part; 2] = [Part::Extractor, Part::Predictor];
    bundle.zero_grad();
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, &PARTS);
    let xs = g.constant(batch.src_x);
    let nll = task_nll(&mut g, &bound, xs, batch.src_y)?;
    g.backward(nll)?;
    bundle.collect_grads(&g, &bound)?;
    for p in PARTS {
        opts.step(bundle, p)?;
    }
    Ok(LossValues {
        task_nll: g.scalar(nll),
        ..LossValues::default()
    })
}

/// Joint update of extractor, predictor and discriminator on
/// `task_nll + alpha * L_d`, with the extractor's share of the domain
/// gradient reversed and weighted by the schedule at progress `p`.
pub fn dat_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
    opts: &mut OptStates,
    p: f64,
) -> Result<LossValues> {
    require_method(cfg, Method::Dat)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("progress must lie in [0, 1], got {p}")));
    }
    const PARTS: [Part; 3] = [Part::Extractor, Part::Predictor, Part::Discriminator];
    bundle.zero_grad();
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, &PARTS);
    let (xs, xt) = (g.constant(batch.src_x), g.constant(batch.tgt_x));
    let zs = bound.feature_extract(&mut g, xs)?;
    let logits = bound.predict(&mut g, zs)?;
    let nll = g.nll_loss(logits, batch.src_y)?;
    let zt = bound.feature_extract(&mut g, xt)?;
    let ld = dat_losses(&mut g, &bound, zs, zt, reversal_weight(p))?;
    let weighted = g.scale(ld, cfg.alpha)?;
    let total = g.add(nll, weighted)?;
    g.backward(total)?;
    bundle.collect_grads(&g, &bound)?;
    for part in PARTS {
        opts.step(bundle, part)?;
    }
    Ok(LossValues {
        task_nll: g.scalar(nll),
        dat_domain: Some(g.scalar(ld)),
        ..LossValues::default()
    })
}

/// Argmax class per row; ties go to the lowest class index.
pub fn predict(bundle: &ModelBundle, x: &Tensor) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, &[]);
    let xv = g.constant(x);
    let z = bound.feature_extract(&mut g, xv)?;
    let logits = bound.predict(&mut g, z)?;
    let k = g.shape(logits)[1];
    Ok(g.value(logits)
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect())
}

/// Fraction of rows whose argmax prediction matches the evaluation labels.
pub fn evaluate(bundle: &ModelBundle, ds: &DomainDataset) -> Result<f64> {
    let labels = ds
        .eval_labels()
        .ok_or_else(|| Error::InvalidSpec(format!("{} set has no evaluation labels", ds.domain())))?;
    let pred = predict(bundle, &ds.to_tensor())?;
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub bundle: ModelBundle,
    pub log: Vec<EpochLog>,
    pub config: TrainConfig,
    pub seed: u64,
    /// Accuracy on the held-out splits after the last epoch (or at
    /// initialization for zero epochs).
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub wall_seconds: f64,
}

fn check_losses(v: &LossValues, epoch: usize, step: usize) -> Result<()> {
    for (name, value) in v.present() {
        if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                epoch,
                step,
                detail: format!("{name} = {value}"),
            });
        }
    }
    Ok(())
}

#[derive(Default)]
struct EpochSums {
    n: f64,
    task_nll: f64,
    recon_src: Option<f64>,
    recon_tgt: Option<f64>,
    hinge_tgt: Option<f64>,
    decoder_obj: Option<f64>,
    dat_domain: Option<f64>,
}

impl EpochSums {
    fn add(&mut self, v: &LossValues) {
        fn acc(slot: &mut Option<f64>, v: Option<f64>) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        self.n += 1.0;
        self.task_nll += v.task_nll;
        acc(&mut self.recon_src, v.recon_src);
        acc(&mut self.recon_tgt, v.recon_tgt);
        acc(&mut self.hinge_tgt, v.hinge_tgt);
        acc(&mut self.decoder_obj, v.decoder_objective);
        acc(&mut self.dat_domain, v.dat_domain);
    }

    fn finish(self, epoch: usize, src_acc: f64, tgt_acc: f64, seconds: f64) -> EpochLog {
        let n = self.n;
        let mean = |v: Option<f64>| v.map(|s| s / n);
        EpochLog {
            epoch,
            task_nll: self.task_nll / n,
            recon_src: mean(self.recon_src),
            recon_tgt: mean(self.recon_tgt),
            hinge_tgt: mean(self.hinge_tgt),
            decoder_obj: mean(self.decoder_obj),
            dat_domain: mean(self.dat_domain),
            src_acc,
            tgt_acc,
            seconds,
        }
    }
}

/// Trains a freshly initialized bundle on `data` and scores it on the
/// held-out splits after every epoch. Target training data is handed to the
/// loop with its evaluation labels removed.
pub fn run_training(cfg: &TrainConfig, data: &TaskData) -> Result<TrainResult> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.bundle_spec(data.input_dim(), data.classes)?;
    let mut bundle = ModelBundle::init(&spec, &mut RngState::with_stream(cfg.seed, streams::INIT))?;
    let mut batch_rng = RngState::with_stream(cfg.seed, streams::BATCHES);
    let mut opts = OptStates::new(cfg.lr, cfg.momentum)?;

    let source = &data.source_train;
    let target = data.target_train.without_eval_labels();
    let steps_per_epoch = source.len().min(target.len()) / cfg.batch_size.max(1);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1) as f64;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        opts.set_lr(cfg.lr_at(epoch));
        let mut sums = EpochSums::default();
        let pairs = crate::datasets::paired_batches(source.len(), target.len(), cfg.batch_size, &mut batch_rng)?;
        for (step, pair) in pairs.iter().enumerate() {
            let src_x = source.gather(&pair.source);
            let src_y = source.gather_train_labels(&pair.source)?;
            let tgt_x = target.gather(&pair.target);
            let batch = Batch {
                src_x: &src_x,
                src_y: &src_y,
                tgt_x: &tgt_x,
            };
            let values = match cfg.method {
                Method::Mdat => mdat_step(&mut bundle, &batch, cfg, &mut opts),
                Method::ArnNoMdat => arn_no_mdat_step(&mut bundle, &batch, cfg, &mut opts),
                Method::SourceOnly => source_only_step(&mut bundle, &batch, cfg, &mut opts),
                Method::Dat => dat_step(&mut bundle, &batch, cfg, &mut opts, global as f64 / total_steps),
            }
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    epoch,
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            check_losses(&values, epoch, step)?;
            sums.add(&values);
            global += 1;
        }
        let src_acc = evaluate(&bundle, &data.source_test)?;
        let tgt_acc = evaluate(&bundle, &data.target_test)?;
        let seconds = if cfg.timing {
            epoch_start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.push(sums.finish(epoch, src_acc, tgt_acc, seconds));
    }
    let (source_accuracy, target_accuracy) = match log.last() {
        Some(l) => (l.src_acc, l.tgt_acc),
        None => (
            evaluate(&bundle, &data.source_test)?,
            evaluate(&bundle, &data.target_test)?,
        ),
    };
    Ok(TrainResult {
        bundle,
        log,
        config: cfg.clone(),
        seed: cfg.seed,
        source_accuracy,
        target_accuracy,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

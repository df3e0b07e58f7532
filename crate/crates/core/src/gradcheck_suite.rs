//! Finite-difference checks of every training objective on small random
//! models and batches.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{finite_diff_check, relative_error, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;
use crate::losses::{dat_losses, decoder_objective, extractor_objective, recon_mse, source_recon_objective, task_nll};
use crate::nn::{BoundBundle, BundleSpec, ModelBundle, Part};
use crate::rng::{streams, RngState};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const BATCH: usize = 4;

/// Objectives covered by the suite.
pub const OBJECTIVES: [&str; 7] = [
    "task_nll",
    "recon_mse",
    "margin_hinge",
    "decoder_objective",
    "source_recon_objective",
    "extractor_objective",
    "dat_objective",
];

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub objective: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

struct Case {
    spec: BundleSpec,
    params: Vec<Tensor>,
    src: Tensor,
    tgt: Tensor,
    labels: Vec<usize>,
    alpha: f64,
    margin: f64,
    lambda: f64,
}

impl Case {
    fn new(seed: u64) -> Result<Self> {
        let spec = BundleSpec::from_widths(3, 2, &[5], 3, Some(&[4]))?;
        let mut rng = RngState::with_stream(seed, streams::GRADCHECK);
        let bundle = ModelBundle::init(&spec, &mut rng)?;
        let mut params: Vec<Tensor> = bundle.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        // nonzero biases so no unit starts exactly at a kink
        for p in params.iter_mut().filter(|p| p.shape().len() == 1) {
            for v in p.data_mut() {
                *v = 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
        let batch = |rng: &mut RngState| {
            let data = (0..BATCH * 3).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::new(vec![BATCH, 3], data)
        };
        let src = batch(&mut rng)?;
        let tgt = batch(&mut rng)?;
        let labels = (0..BATCH).map(|_| rng.random_range(0..2)).collect();
        // a margin inside the observed error range keeps the hinge active
        // on some samples and saturated on others
        let margin = rng.random_range(0.3..1.5);
        Ok(Case {
            spec,
            params,
            src,
            tgt,
            labels,
            alpha: rng.random_range(0.05..1.0),
            margin,
            lambda: rng.random_range(0.1..1.0),
        })
    }

    fn check<F>(&mut self, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Case, &mut Graph, &BoundBundle) -> Result<Var>,
    {
        let mut params = std::mem::take(&mut self.params);
        let out = finite_diff_check(&mut params, STEP, TOLERANCE, |g, v| {
            let b = BoundBundle::from_vars(&self.spec, v)?;
            f(self, g, &b)
        });
        self.params = params;
        out
    }

    fn extractor_params(&self) -> usize {
        self.spec.param_counts()[0].1
    }
}

/// Domain loss plus task loss with the reversal in place. Finite
/// differences of this forward value see no reversal, so the analytic
/// gradient is compared per part against the objective each part
/// effectively descends: `nll + alpha L_d` upstream of the reversal is
/// seen by the extractor as `nll - alpha lambda L_d`.
fn dat_check(case: &mut Case) -> Result<GradCheckReport> {
    let with_reversal = case.check(|c, g, b| {
        let (xs, xt) = (g.constant(&c.src), g.constant(&c.tgt));
        let zs = b.feature_extract(g, xs)?;
        let zt = b.feature_extract(g, xt)?;
        let logits = b.predict(g, zs)?;
        let nll = g.nll_loss(logits, &c.labels)?;
        let ld = dat_losses(g, b, zs, zt, c.lambda)?;
        let w = g.scale(ld, c.alpha)?;
        g.add(nll, w)
    })?;
    let effective = |sign: f64| {
        move |c: &Case, g: &mut Graph, b: &BoundBundle| {
            let (xs, xt) = (g.constant(&c.src), g.constant(&c.tgt));
            let zs = b.feature_extract(g, xs)?;
            let zt = b.feature_extract(g, xt)?;
            let logits = b.predict(g, zs)?;
            let nll = g.nll_loss(logits, &c.labels)?;
            // reversal weight 0 keeps the forward value and blocks nothing
            // that finite differences could see
            let ld = dat_losses(g, b, zs, zt, 0.0)?;
            let w = g.scale(ld, c.alpha * sign)?;
            g.add(nll, w)
        }
    };
    let lambda = case.lambda;
    let upstream = case.check(effective(-lambda))?;
    let downstream = case.check(effective(1.0))?;
    let n_ext = case.extractor_params();
    let entries = with_reversal
        .entries
        .into_iter()
        .zip(upstream.entries.into_iter().zip(downstream.entries))
        .map(|(mut e, (up, down))| {
            let oracle = if e.param < n_ext { up } else { down };
            e.numeric = oracle.numeric;
            e.comparable = e.comparable && oracle.comparable;
            e.rel_error = relative_error(e.analytic, e.numeric);
            e
        });
    Ok(GradCheckReport::merge(
        [GradCheckReport {
            entries: entries.collect(),
            max_rel_error: 0.0,
            mean_rel_error: 0.0,
            compared: 0,
            excluded: 0,
            tolerance: TOLERANCE,
        }],
        TOLERANCE,
    ))
}

fn check_objective(case: &mut Case, objective: &str) -> Result<GradCheckReport> {
    match objective {
        "task_nll" => case.check(|c, g, b| {
            let xs = g.constant(&c.src);
            task_nll(g, b, xs, &c.labels)
        }),
        "recon_mse" => case.check(|c, g, b| {
            let xs = g.constant(&c.src);
            let z = b.feature_extract(g, xs)?;
            let xh = b.reconstruct(g, z)?;
            let r = recon_mse(g, xs, xh)?;
            g.mean(r)
        }),
        "margin_hinge" => case.check(|c, g, b| {
            let xt = g.constant(&c.tgt);
            let z = b.feature_extract(g, xt)?;
            let xh = b.reconstruct(g, z)?;
            let r = recon_mse(g, xt, xh)?;
            let h = crate::losses::margin_hinge(g, r, c.margin)?;
            g.mean(h)
        }),
        "decoder_objective" => case.check(|c, g, b| {
            let (xs, xt) = (g.constant(&c.src), g.constant(&c.tgt));
            Ok(decoder_objective(g, b, xs, xt, c.margin)?.objective)
        }),
        "source_recon_objective" => case.check(|c, g, b| {
            let (xs, xt) = (g.constant(&c.src), g.constant(&c.tgt));
            Ok(source_recon_objective(g, b, xs, xt)?.objective)
        }),
        "extractor_objective" => case.check(|c, g, b| {
            let (xs, xt) = (g.constant(&c.src), g.constant(&c.tgt));
            Ok(extractor_objective(g, b, xs, &c.labels, xt, c.alpha)?.objective)
        }),
        "dat_objective" => dat_check(case),
        other => Err(crate::Error::InvalidSpec(format!("unknown objective `{other}`"))),
    }
}

/// Runs every objective for each seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut case = Case::new(seed)?;
        for objective in OBJECTIVES {
            out.push(SuiteEntry {
                objective,
                seed,
                report: check_objective(&mut case, objective)?,
            });
        }
    }
    Ok(out)
}

/// Bundle part a suite parameter index belongs to, for diagnostics.
pub fn part_of(spec: &BundleSpec, mut param: usize) -> Option<Part> {
    for (part, n) in spec.param_counts() {
        if param < n {
            return Some(part);
        }
        param -= n;
    }
    None
}

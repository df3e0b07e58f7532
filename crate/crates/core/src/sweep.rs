//! One-parameter grids over repeated seeds.
//!
//! Runs are independent (own data, RNG streams and model), so they can be
//! spread over threads; results come back in grid order regardless of which
//! thread finished first. A margin of 0 is not a trainable config, so under
//! mdat it is run as the no-margin ablation (whose objective it equals) and
//! flagged degenerate.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{apply_key, KEYS};
use crate::error::{Error, Result};
use crate::trainer::{run_training, EpochLog, Method, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub param: String,
    /// Kept as written so output rows echo the user's spelling.
    pub values: Vec<String>,
}

impl GridSpec {
    /// Parses `param: v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let (param, values) = text
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("grid `{text}` is not `param: v1,v2,...`")))?;
        let param = param.trim().to_owned();
        if !KEYS.contains(&param.as_str()) || matches!(param.as_str(), "task" | "seed") {
            return Err(Error::InvalidConfig(format!("cannot sweep over `{param}`")));
        }
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_owned())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::InvalidConfig(format!("grid over `{param}` has no values")));
        }
        Ok(GridSpec { param, values })
    }

    /// Config for one grid point, plus whether it is the degenerate margin.
    pub fn point(&self, base: &TrainConfig, value: &str) -> Result<(TrainConfig, bool)> {
        let mut cfg = base.clone();
        apply_key(&mut cfg, &self.param, value)
            .map_err(|m| Error::InvalidConfig(format!("{} = {value}: {m}", self.param)))?;
        let degenerate = cfg.method == Method::Mdat && cfg.margin == 0.0;
        if degenerate {
            cfg.method = Method::ArnNoMdat;
        }
        cfg.validate()?;
        Ok((cfg, degenerate))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    /// NaN when the run diverged.
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub diverged: bool,
    pub degenerate: bool,
}

/// A finished run and its epoch log (empty when it diverged).
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub run: SweepRun,
    pub log: Vec<EpochLog>,
}

/// Runs every grid value for seeds `base.seed .. base.seed + repeats` on up
/// to `jobs` threads. Divergence is recorded, any other error aborts.
pub fn run_sweep(base: &TrainConfig, grid: &GridSpec, repeats: usize, jobs: usize) -> Result<Vec<SweepOutcome>> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be >= 1".into()));
    }
    let mut tasks = Vec::new();
    for value in &grid.values {
        let (cfg, degenerate) = grid.point(base, value)?;
        for r in 0..repeats as u64 {
            let mut cfg = cfg.clone();
            cfg.seed = base.seed + r;
            tasks.push((value.clone(), cfg, degenerate));
        }
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SweepOutcome>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((value, cfg, degenerate)) = tasks.get(i) else {
                    break;
                };
                let out = run_one(value, cfg, *degenerate);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|o| o.expect("every task slot is filled"))
        .collect()
}

fn run_one(value: &str, cfg: &TrainConfig, degenerate: bool) -> Result<SweepOutcome> {
    let data = cfg.task_data()?;
    let mut run = SweepRun {
        value: value.to_owned(),
        seed: cfg.seed,
        source_accuracy: f64::NAN,
        target_accuracy: f64::NAN,
        diverged: false,
        degenerate,
    };
    match run_training(cfg, &data) {
        Ok(r) => {
            run.source_accuracy = r.source_accuracy;
            run.target_accuracy = r.target_accuracy;
            Ok(SweepOutcome { run, log: r.log })
        }
        Err(Error::Divergence { .. }) => {
            run.diverged = true;
            Ok(SweepOutcome { run, log: Vec::new() })
        }
        Err(e) => Err(e),
    }
}

/// Mean and sample standard deviation over the finite runs of one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub value: String,
    /// Runs that finished; diverged ones are counted separately.
    pub finished: usize,
    pub diverged: usize,
    pub degenerate: bool,
    pub source_mean: f64,
    pub source_std: f64,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One aggregate per distinct value, in first-appearance order.
pub fn aggregate(runs: &[SweepRun]) -> Vec<Aggregate> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.value.as_str()) {
            order.push(&r.value);
        }
    }
    order
        .into_iter()
        .map(|value| {
            let group: Vec<&SweepRun> = runs.iter().filter(|r| r.value == value).collect();
            let ok: Vec<&&SweepRun> = group.iter().filter(|r| !r.diverged).collect();
            let (source_mean, source_std) = mean_std(&ok.iter().map(|r| r.source_accuracy).collect::<Vec<_>>());
            let (target_mean, target_std) = mean_std(&ok.iter().map(|r| r.target_accuracy).collect::<Vec<_>>());
            Aggregate {
                value: value.to_owned(),
                finished: ok.len(),
                diverged: group.len() - ok.len(),
                degenerate: group.iter().any(|r| r.degenerate),
                source_mean,
                source_std,
                target_mean,
                target_std,
            }
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "kind,param,value,seed,runs,diverged,degenerate,src_acc,tgt_acc,src_std,tgt_std";

/// Per-run rows (`kind = run`) followed by one `kind = mean` row per value.
/// Floats are written in shortest round-trip form.
pub fn write_sweep_csv<W: Write>(param: &str, runs: &[SweepRun], mut w: W) -> Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in runs {
        writeln!(
            w,
            "run,{param},{},{},1,{},{},{},{},,",
            r.value, r.seed, r.diverged as u8, r.degenerate as u8, r.source_accuracy, r.target_accuracy
        )?;
    }
    for a in aggregate(runs) {
        writeln!(
            w,
            "mean,{param},{},,{},{},{},{},{},{},{}",
            a.value,
            a.finished,
            a.diverged,
            a.degenerate as u8,
            a.source_mean,
            a.target_mean,
            a.source_std,
            a.target_std
        )?;
    }
    Ok(())
}

/// Reads back what [`write_sweep_csv`] wrote.
pub fn read_sweep_csv<R: BufRead>(r: R) -> Result<(Vec<SweepRun>, Vec<Aggregate>)> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref() != Some(SWEEP_CSV_HEADER) {
        return Err(Error::ConfigLine {
            line: 1,
            message: "not a sweep CSV header".into(),
        });
    }
    let (mut runs, mut aggs) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        let bad = |m: &str| Error::ConfigLine {
            line: i + 2,
            message: m.to_owned(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad("expected 11 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        match f[0] {
            "run" => runs.push(SweepRun {
                value: f[2].to_owned(),
                seed: f[3].parse().map_err(|_| bad("bad seed"))?,
                diverged: int(f[5])? != 0,
                degenerate: int(f[6])? != 0,
                source_accuracy: num(f[7])?,
                target_accuracy: num(f[8])?,
            }),
            "mean" => aggs.push(Aggregate {
                value: f[2].to_owned(),
                finished: int(f[4])?,
                diverged: int(f[5])?,
                degenerate: int(f[6])? != 0,
                source_mean: num(f[7])?,
                target_mean: num(f[8])?,
                source_std: num(f[9])?,
                target_std: num(f[10])?,
            }),
            _ => return Err(bad("kind must be run or mean")),
        }
    }
    Ok((runs, aggs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TaskKind;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::for_task(TaskKind::Moons);
        cfg.epochs = 2;
        cfg.moons.n_per_domain = 40;
        cfg.batch_size = 10;
        cfg.hidden = vec![6];
        cfg.latent = 3;
        cfg
    }

    fn run(value: &str, seed: u64, tgt: f64, diverged: bool) -> SweepRun {
        SweepRun {
            value: value.into(),
            seed,
            source_accuracy: 1.0 - tgt / 2.0,
            target_accuracy: tgt,
            diverged,
            degenerate: false,
        }
    }

    #[test]
    fn grid_parsing() {
        let g = GridSpec::parse("alpha: 0.01,0.03, 0.07 ,1.0").unwrap();
        assert_eq!(g.param, "alpha");
        assert_eq!(g.values, ["0.01", "0.03", "0.07", "1.0"]);
        for bad in ["alpha 0.1", "bogus: 1", "seed: 1,2", "alpha:", "task: moons"] {
            assert!(GridSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn zero_margin_is_degenerate_only_for_mdat() {
        let g = GridSpec::parse("margin: 0,0.5").unwrap();
        let base = tiny();
        let (cfg, deg) = g.point(&base, "0").unwrap();
        assert!(deg);
        assert_eq!(cfg.method, Method::ArnNoMdat);
        let (cfg, deg) = g.point(&base, "0.5").unwrap();
        assert!(!deg);
        assert_eq!(cfg.method, Method::Mdat);
        let mut dat = base.clone();
        dat.method = Method::Dat;
        assert!(!g.point(&dat, "0").unwrap().1);
        assert!(g.point(&base, "-1").is_err());
    }

    #[test]
    fn aggregates_use_sample_std_over_finished_runs() {
        let runs = [
            run("a", 1, 0.5, false),
            run("a", 2, 0.7, false),
            run("a", 3, f64::NAN, true),
            run("b", 1, 0.9, false),
        ];
        let agg = aggregate(&runs);
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].finished, agg[0].diverged), (2, 1));
        assert!((agg[0].target_mean - 0.6).abs() < 1e-15);
        assert!((agg[0].target_std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!((agg[1].target_mean, agg[1].target_std), (0.9, 0.0));
        let all_bad = aggregate(&[run("c", 1, f64::NAN, true)]);
        assert!(all_bad[0].target_mean.is_nan());
    }

    #[test]
    fn results_are_in_grid_order_for_any_job_count() {
        let g = GridSpec::parse("alpha: 0,0.5,1").unwrap();
        let one = run_sweep(&tiny(), &g, 2, 1).unwrap();
        let many = run_sweep(&tiny(), &g, 2, 4).unwrap();
        let keys: Vec<_> = one.iter().map(|o| (o.run.value.clone(), o.run.seed)).collect();
        assert_eq!(keys.len(), 6);
        assert_eq!(keys[0], ("0".to_owned(), 1));
        assert_eq!(keys[5], ("1".to_owned(), 2));
        for (a, b) in one.iter().zip(&many) {
            assert_eq!(a.run, b.run);
            assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn diverged_runs_are_recorded() {
        let g = GridSpec::parse("lr: 0.01,10000").unwrap();
        let out = run_sweep(&tiny(), &g, 1, 2).unwrap();
        assert!(!out[0].run.diverged);
        assert!(out[1].run.diverged && out[1].run.target_accuracy.is_nan() && out[1].log.is_empty());
    }

    #[test]
    fn csv_aggregates_recompute_from_run_rows() {
        let runs = [
            run("0.1", 1, 0.61, false),
            run("0.1", 2, 0.73, false),
            run("0.1", 3, 0.7000000000000001, false),
            run("0.3", 1, 0.8, false),
            run("0.3", 2, f64::NAN, true),
        ];
        let mut buf = Vec::new();
        write_sweep_csv("alpha", &runs, &mut buf).unwrap();
        let (back, aggs) = read_sweep_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), runs.len());
        let again = aggregate(&back);
        assert_eq!(again.len(), aggs.len());
        for (a, b) in again.iter().zip(&aggs) {
            assert_eq!((&a.value, a.finished, a.diverged), (&b.value, b.finished, b.diverged));
            for (x, y) in [
                (a.target_mean, b.target_mean),
                (a.target_std, b.target_std),
                (a.source_mean, b.source_mean),
                (a.source_std, b.source_std),
            ] {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
        assert!(read_sweep_csv("kind\n".as_bytes()).is_err());
    }
}

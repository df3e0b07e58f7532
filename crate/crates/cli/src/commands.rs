use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use serde_json::json;

use mdat_core::config::{parse_config, render_config};
use mdat_core::datasets::TaskData;
use mdat_core::gradcheck_suite::{run_suite, TOLERANCE};
use mdat_core::metrics::{
    boundary_grid, export_embeddings, input_images, reconstruct_images, write_boundary_csv, write_pgm, Bounds,
};
use mdat_core::nn::checkpoint::{read_checkpoint, write_checkpoint};
use mdat_core::nn::ModelBundle;
use mdat_core::sweep::{aggregate, run_sweep, write_sweep_csv, GridSpec};
use mdat_core::trainer::{run_training, write_epoch_csv, TaskKind, TrainConfig};

use crate::output::{create_file, create_run_dir, output_root, RunManifest};
use crate::{ConfigArgs, Export, Failure, OutArgs};

const BOUNDARY_RESOLUTION: usize = 101;
const IMAGES_PER_DOMAIN: usize = 8;

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_config(a: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let text = match &a.config {
        Some(p) => read_input(p)?,
        None => String::new(),
    };
    let mut overrides: Vec<(String, String)> = [
        ("task", &a.task),
        ("method", &a.method),
        ("alpha", &a.alpha),
        ("margin", &a.margin),
        ("epochs", &a.epochs),
        ("batch", &a.batch),
        ("seed", &a.seed),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_owned(), v.clone())))
    .collect();
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    if a.timing {
        overrides.push(("timing".into(), "true".into()));
    }
    let pairs: Vec<(&str, &str)> = overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    Ok(parse_config(&text, &pairs)?)
}

fn check_exports(task: TaskKind, exports: &[Export]) -> Result<(), Failure> {
    for e in exports {
        match (e, task) {
            (Export::Boundary, TaskKind::Glyphs) => {
                return Err(Failure::Config("boundary export needs the 2-D moons task".into()))
            }
            (Export::Reconstructions, TaskKind::Moons) => {
                return Err(Failure::Config("reconstruction images need the glyphs task".into()))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Writes the manifest whatever happened, then passes the outcome on.
fn finish(mut manifest: RunManifest, dir: &Path, result: Result<(), Failure>) -> Result<(), Failure> {
    if let Err(f) = &result {
        manifest.fail(f);
    }
    manifest.write(dir)?;
    println!("{}", dir.display());
    result
}

fn write_text(dir: &Path, rel: &str, text: &str, files: &mut Vec<String>) -> Result<(), Failure> {
    let mut w = create_file(dir, rel, files)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_exports(
    bundle: &ModelBundle,
    data: &TaskData,
    exports: &[Export],
    dir: &Path,
    files: &mut Vec<String>,
) -> Result<(), Failure> {
    for e in exports {
        match e {
            Export::Checkpoint => {
                if !files.iter().any(|f| f == "checkpoint.txt") {
                    let mut w = create_file(dir, "checkpoint.txt", files)?;
                    write_checkpoint(bundle, &mut w)?;
                    w.flush()?;
                }
            }
            Export::Boundary => {
                let grid = boundary_grid(bundle, &data.standardizer, Bounds::MOONS, BOUNDARY_RESOLUTION)?;
                let mut w = create_file(dir, "boundary.csv", files)?;
                write_boundary_csv(&grid, &mut w)?;
                w.flush()?;
            }
            Export::Embeddings => {
                let mut w = create_file(dir, "embeddings.csv", files)?;
                export_embeddings(bundle, &[&data.source_test, &data.target_test], &mut w)?;
                w.flush()?;
            }
            Export::Reconstructions => {
                for (name, ds) in [("source", &data.source_test), ("target", &data.target_test)] {
                    let idx: Vec<usize> = (0..IMAGES_PER_DOMAIN.min(ds.len())).collect();
                    let inputs = input_images(ds, &idx, &data.standardizer)?;
                    let recons = reconstruct_images(bundle, ds, &idx, &data.standardizer)?;
                    for (i, (x, r)) in inputs.iter().zip(&recons).enumerate() {
                        for (kind, img) in [("input", x), ("recon", r)] {
                            let mut w = create_file(dir, &format!("reconstructions/{name}_{i:02}_{kind}.pgm"), files)?;
                            write_pgm(img, &mut w)?;
                            w.flush()?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn train(a: &ConfigArgs, out: &OutArgs, exports: &[Export]) -> Result<(), Failure> {
    let cfg = load_config(a)?;
    check_exports(cfg.task, exports)?;
    let dir = create_run_dir(&output_root(out), "train")?;
    let rendered = render_config(&cfg);
    let mut manifest = RunManifest::new("train", &dir).with_config(&rendered);
    let result = train_into(&cfg, &rendered, exports, &dir, &mut manifest);
    finish(manifest, &dir, result)
}

fn train_into(
    cfg: &TrainConfig,
    rendered: &str,
    exports: &[Export],
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    write_text(dir, "config.txt", rendered, &mut manifest.files)?;
    let data = cfg.task_data()?;
    let r = run_training(cfg, &data)?;

    let mut w = create_file(dir, "epochs.csv", &mut manifest.files)?;
    write_epoch_csv(&r.log, &mut w)?;
    w.flush()?;
    let mut wanted = vec![Export::Checkpoint];
    wanted.extend_from_slice(exports);
    write_exports(&r.bundle, &data, &wanted, dir, &mut manifest.files)?;

    let last = r.log.last();
    manifest.results = json!({
        "task": cfg.task.to_string(),
        "method": cfg.method.to_string(),
        "seed": r.seed,
        "epochs": r.log.len(),
        "source_accuracy": r.source_accuracy,
        "target_accuracy": r.target_accuracy,
        "final_task_nll": last.map(|e| e.task_nll),
        "final_decoder_objective": last.and_then(|e| e.decoder_obj),
        "final_domain_loss": last.and_then(|e| e.dat_domain),
        "wall_seconds": cfg.timing.then_some(r.wall_seconds),
    });
    eprintln!(
        "{} on {}: source accuracy {:.4}, target accuracy {:.4}",
        cfg.method, cfg.task, r.source_accuracy, r.target_accuracy
    );
    Ok(())
}

fn path_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || ".-_".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn sweep(a: &ConfigArgs, out: &OutArgs, grid: &str, repeats: usize, jobs: usize) -> Result<(), Failure> {
    let base = load_config(a)?;
    let grid = GridSpec::parse(grid)?;
    if repeats == 0 || jobs == 0 {
        return Err(Failure::Config("--repeats and --jobs must be >= 1".into()));
    }
    for v in &grid.values {
        grid.point(&base, v)?;
    }
    let dir = create_run_dir(&output_root(out), "sweep")?;
    let rendered = render_config(&base);
    let mut manifest = RunManifest::new("sweep", &dir).with_config(&rendered);
    let result = sweep_into(&base, &rendered, &grid, repeats, jobs, &dir, &mut manifest);
    finish(manifest, &dir, result)
}

fn sweep_into(
    base: &TrainConfig,
    rendered: &str,
    grid: &GridSpec,
    repeats: usize,
    jobs: usize,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    write_text(dir, "config.txt", rendered, &mut manifest.files)?;
    let outcomes = run_sweep(base, grid, repeats, jobs)?;
    for o in outcomes.iter().filter(|o| !o.run.diverged) {
        let rel = format!(
            "runs/{}={}/seed-{}/epochs.csv",
            grid.param,
            path_safe(&o.run.value),
            o.run.seed
        );
        let mut w = create_file(dir, &rel, &mut manifest.files)?;
        write_epoch_csv(&o.log, &mut w)?;
        w.flush()?;
    }
    let runs: Vec<_> = outcomes.into_iter().map(|o| o.run).collect();
    let mut w = create_file(dir, "sweep.csv", &mut manifest.files)?;
    write_sweep_csv(&grid.param, &runs, &mut w)?;
    w.flush()?;

    let aggs = aggregate(&runs);
    for a in &aggs {
        eprintln!(
            "{} = {:<8} target {:.4} ± {:.4}  source {:.4}  ({} finished, {} diverged{})",
            grid.param,
            a.value,
            a.target_mean,
            a.target_std,
            a.source_mean,
            a.finished,
            a.diverged,
            if a.degenerate { ", degenerate" } else { "" }
        );
    }
    manifest.results = json!({
        "param": grid.param,
        "values": grid.values,
        "repeats": repeats,
        "jobs": jobs,
        "runs": runs.len(),
        "diverged": runs.iter().filter(|r| r.diverged).count(),
        "aggregates": aggs.iter().map(|a| json!({
            "value": a.value,
            "finished": a.finished,
            "diverged": a.diverged,
            "degenerate": a.degenerate,
            "target_mean": a.target_mean,
            "target_std": a.target_std,
            "source_mean": a.source_mean,
            "source_std": a.source_std,
        })).collect::<Vec<_>>(),
    });
    Ok(())
}

pub fn gradcheck(out: &OutArgs, seeds: u64) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::Config("--seeds must be >= 1".into()));
    }
    let dir = create_run_dir(&output_root(out), "gradcheck")?;
    let mut manifest = RunManifest::new("gradcheck", &dir);
    let result = gradcheck_into(seeds, &dir, &mut manifest);
    finish(manifest, &dir, result)
}

fn gradcheck_into(seeds: u64, dir: &Path, manifest: &mut RunManifest) -> Result<(), Failure> {
    let entries = run_suite(1..=seeds)?;
    let mut w = create_file(dir, "gradcheck.csv", &mut manifest.files)?;
    writeln!(w, "objective,seed,compared,excluded,max_rel_error,passed")?;
    for e in &entries {
        writeln!(
            w,
            "{},{},{},{},{:e},{}",
            e.objective,
            e.seed,
            e.report.compared,
            e.report.excluded,
            e.report.max_rel_error,
            e.report.passed()
        )?;
    }
    w.flush()?;
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.report.passed())
        .map(|e| format!("{} (seed {})", e.objective, e.seed))
        .collect();
    manifest.results = json!({
        "seeds": seeds,
        "checks": entries.len(),
        "tolerance": TOLERANCE,
        "max_rel_error": worst,
        "failed": failed,
    });
    eprintln!(
        "{} checks, max relative error {worst:.2e} (tolerance {TOLERANCE:e})",
        entries.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn export(checkpoint: &Path, config: Option<&Path>, out: &OutArgs, exports: &[Export]) -> Result<(), Failure> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("config.txt"),
    };
    let cfg = parse_config(&read_input(&cfg_path)?, &[])?;
    check_exports(cfg.task, exports)?;
    let file = fs::File::open(checkpoint).map_err(|e| Failure::Config(format!("{}: {e}", checkpoint.display())))?;
    let bundle = read_checkpoint(BufReader::new(file))?;
    let data = cfg.task_data()?;
    let spec = bundle.spec();
    if spec.input_dim() != data.input_dim() || spec.classes() != data.classes {
        return Err(Failure::Config(format!(
            "checkpoint expects {} inputs and {} classes, the config's task has {} and {}",
            spec.input_dim(),
            spec.classes(),
            data.input_dim(),
            data.classes
        )));
    }
    let dir = create_run_dir(&output_root(out), "export")?;
    let rendered = render_config(&cfg);
    let mut manifest = RunManifest::new("export", &dir).with_config(&rendered);
    manifest.results = json!({ "checkpoint": checkpoint.display().to_string() });
    let result = write_exports(&bundle, &data, exports, &dir, &mut manifest.files);
    finish(manifest, &dir, result)
}

//! End-to-end use of the public API: config text in, trained model out.

use mdat_core::config::{parse_config, render_config};
use mdat_core::nn::checkpoint::{read_checkpoint, write_checkpoint};
use mdat_core::trainer::{evaluate, predict, read_epoch_csv, run_training, write_epoch_csv, Method};

const SMALL: &str = "
# quick moons run
epochs = 15
batch = 20
moons_n = 100
hidden = 16
latent = 4
disc_hidden = 8
";

#[test]
fn every_method_trains_from_config_text() {
    for method in Method::ALL {
        let cfg = parse_config(SMALL, &[("method", method.name())]).unwrap();
        let data = cfg.task_data().unwrap();
        let r = run_training(&cfg, &data).unwrap();
        assert_eq!(r.log.len(), 15, "{method}");
        assert!(r.source_accuracy > 0.8, "{method}: {}", r.source_accuracy);
        assert!((0.0..=1.0).contains(&r.target_accuracy));
    }
}

#[test]
fn checkpoint_restores_the_same_predictions() {
    let cfg = parse_config(SMALL, &[]).unwrap();
    let data = cfg.task_data().unwrap();
    let r = run_training(&cfg, &data).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&r.bundle, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    let x = data.target_test.to_tensor();
    assert_eq!(predict(&r.bundle, &x).unwrap(), predict(&back, &x).unwrap());
    assert_eq!(evaluate(&back, &data.target_test).unwrap(), r.target_accuracy);
}

#[test]
fn rendered_config_and_log_reproduce_a_run() {
    let cfg = parse_config(SMALL, &[("seed", "4"), ("method", "dat")]).unwrap();
    let again = parse_config(&render_config(&cfg), &[]).unwrap();
    let a = run_training(&cfg, &cfg.task_data().unwrap()).unwrap();
    let b = run_training(&again, &again.task_data().unwrap()).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_epoch_csv(&a.log, &mut ca).unwrap();
    write_epoch_csv(&b.log, &mut cb).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(read_epoch_csv(ca.as_slice()).unwrap(), a.log);
}

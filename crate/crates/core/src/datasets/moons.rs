use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainDataset, TaskData};
use crate::error::{Error, Result};
use crate::rng::{streams, RngState};

/// Centroid of the noise-free two-moons distribution with balanced classes.
/// The upper moon has mean `(0, 2/pi)` and the lower `(1, 0.5 - 2/pi)`.
pub const MOONS_CENTROID: [f64; 2] = [0.5, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct MoonsConfig {
    pub n_per_domain: usize,
    pub noise: f64,
    pub rotation_degrees: f64,
    pub seed: u64,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        MoonsConfig {
            n_per_domain: 300,
            noise: 0.1,
            rotation_degrees: 30.0,
            seed: 1,
        }
    }
}

impl MoonsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_domain < 2 || !self.n_per_domain.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "moons n_per_domain must be even and >= 2, got {}",
                self.n_per_domain
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "moons noise must be >= 0, got {}",
                self.noise
            )));
        }
        if !self.rotation_degrees.is_finite() {
            return Err(Error::InvalidConfig("moons rotation must be finite".into()));
        }
        Ok(())
    }
}

/// Rotates `p` counter-clockwise by `degrees` about `center`.
pub fn rotate_about(p: [f64; 2], center: [f64; 2], degrees: f64) -> [f64; 2] {
    let (s, c) = degrees.to_radians().sin_cos();
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

pub(super) fn moon_point(class: usize, t: f64) -> [f64; 2] {
    if class == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

/// Classes alternate 0, 1, 0, ... so any prefix is balanced.
fn sample(n: usize, noise: f64, degrees: f64, rng: &mut RngState) -> (Vec<f64>, Vec<usize>) {
    let normal = Normal::new(0.0, noise).expect("noise validated");
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.random_range(0.0..=PI);
        let [a, b] = moon_point(class, t);
        let p = [a + normal.sample(rng), b + normal.sample(rng)];
        let p = if degrees == 0.0 {
            p
        } else {
            rotate_about(p, MOONS_CENTROID, degrees)
        };
        x.extend_from_slice(&p);
        y.push(class);
    }
    (x, y)
}

fn split(cfg: &MoonsConfig, stream: u64, degrees: f64) -> (Vec<f64>, Vec<usize>) {
    sample(
        cfg.n_per_domain,
        cfg.noise,
        degrees,
        &mut RngState::with_stream(cfg.seed, stream),
    )
}

/// Raw (unstandardized) source and target training sets. The target is a
/// fresh draw from the source generator, rotated about [`MOONS_CENTROID`].
pub fn gen_moons(cfg: &MoonsConfig) -> Result<(DomainDataset, DomainDataset)> {
    cfg.validate()?;
    let (xs, ys) = split(cfg, streams::SOURCE_TRAIN, 0.0);
    let (xt, yt) = split(cfg, streams::TARGET_TRAIN, cfg.rotation_degrees);
    Ok((
        DomainDataset::source(xs, 2, ys)?,
        DomainDataset::target(xt, 2, Some(yt))?,
    ))
}

/// Training and held-out splits of equal size, standardized with source
/// training statistics.
pub fn moons_task(cfg: &MoonsConfig) -> Result<TaskData> {
    let (src, tgt) = gen_moons(cfg)?;
    let (xs, ys) = split(cfg, streams::SOURCE_TEST, 0.0);
    let (xt, yt) = split(cfg, streams::TARGET_TEST, cfg.rotation_degrees);
    TaskData::standardized(
        [
            src,
            tgt,
            DomainDataset::source(xs, 2, ys)?,
            DomainDataset::target(xt, 2, Some(yt))?,
        ],
        2,
    )
}

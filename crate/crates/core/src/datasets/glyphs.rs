use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainDataset, TaskData};
use crate::error::{Error, Result};
use crate::rng::{streams, RngState};

/// Pixel-level change applied to target images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    /// `x -> min(1, x + s)`
    Brightness,
    /// `x -> 1 - x` on the top `round(s * grid)` rows; the whole image at
    /// `s = 1`.
    Inversion,
    /// `x -> clamp(x + N(0, s^2))`
    Noise,
}

impl ShiftKind {
    /// Shifts pixel value `x` lying in image row `row` of a `grid`-row image.
    pub fn apply(self, x: f64, strength: f64, row: usize, grid: usize, rng: &mut RngState) -> f64 {
        let y = match self {
            ShiftKind::Brightness => x + strength,
            ShiftKind::Inversion if (row as f64) < (strength * grid as f64).round() => 1.0 - x,
            ShiftKind::Inversion => x,
            ShiftKind::Noise if strength > 0.0 => x + Normal::new(0.0, strength).expect("finite").sample(rng),
            ShiftKind::Noise => x,
        };
        y.clamp(0.0, 1.0)
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::Brightness => "brightness",
            ShiftKind::Inversion => "inversion",
            ShiftKind::Noise => "noise",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(ShiftKind::Brightness),
            "inversion" => Ok(ShiftKind::Inversion),
            "noise" => Ok(ShiftKind::Noise),
            other => Err(Error::Parse(format!("unknown shift `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphConfig {
    /// Images are `grid x grid`.
    pub grid: usize,
    pub classes: usize,
    pub shift: ShiftKind,
    /// For inversion, the fraction of rows (from the top) that are flipped.
    pub strength: f64,
    /// Per-pixel Gaussian jitter of each sample around its template.
    pub jitter: f64,
    /// Templates are translated by up to this many pixels per sample.
    pub max_offset: usize,
    pub n_per_domain: usize,
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            grid: 8,
            classes: 4,
            shift: ShiftKind::Inversion,
            strength: 0.25,
            jitter: 0.2,
            max_offset: 1,
            n_per_domain: 400,
            seed: 1,
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.grid < 4 {
            return fail(format!("glyph grid must be >= 4, got {}", self.grid));
        }
        if self.classes < 2 {
            return fail(format!("glyph classes must be >= 2, got {}", self.classes));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(format!("glyph jitter must be >= 0, got {}", self.jitter));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return fail(format!("shift strength must be >= 0, got {}", self.strength));
        }
        if self.shift == ShiftKind::Inversion && self.strength > 1.0 {
            return fail(format!("inversion strength must be <= 1, got {}", self.strength));
        }
        if 2 * self.max_offset >= self.grid {
            return fail(format!("offset {} too large for grid {}", self.max_offset, self.grid));
        }
        if self.n_per_domain < self.classes {
            return fail(format!("need at least one sample per class, got {}", self.n_per_domain));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grid * self.grid
    }
}

/// Binary templates, one per class, pairwise differing in at least a
/// quarter of their pixels. Deterministic in the seed.
pub fn glyph_templates(cfg: &GlyphConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = RngState::with_stream(cfg.seed, streams::TEMPLATES);
    let d = cfg.dim();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for _ in 0..10_000 {
        if out.len() == cfg.classes {
            break;
        }
        let t: Vec<f64> = (0..d).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let far = out
            .iter()
            .all(|o| o.iter().zip(&t).filter(|(a, b)| a != b).count() * 4 >= d);
        if far {
            out.push(t);
        }
    }
    if out.len() < cfg.classes {
        return Err(Error::InvalidConfig(format!(
            "cannot place {} distinct templates on a {}x{} grid",
            cfg.classes, cfg.grid, cfg.grid
        )));
    }
    Ok(out)
}

fn sample(
    cfg: &GlyphConfig,
    templates: &[Vec<f64>],
    shift: Option<(ShiftKind, f64)>,
    rng: &mut RngState,
) -> (Vec<f64>, Vec<usize>) {
    let g = cfg.grid;
    let n = cfg.n_per_domain;
    let noise = Normal::new(0.0, cfg.jitter).expect("jitter validated");
    let off = cfg.max_offset as i64;
    let mut x = Vec::with_capacity(n * g * g);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        let (dr, dc) = (rng.random_range(-off..=off), rng.random_range(-off..=off));
        for r in 0..g as i64 {
            for c in 0..g as i64 {
                let (sr, sc) = (r - dr, c - dc);
                let base = if (0..g as i64).contains(&sr) && (0..g as i64).contains(&sc) {
                    templates[class][(sr * g as i64 + sc) as usize]
                } else {
                    0.0
                };
                let mut v = (base + noise.sample(rng)).clamp(0.0, 1.0);
                if let Some((kind, s)) = shift {
                    v = kind.apply(v, s, r as usize, g, rng);
                }
                x.push(v);
            }
        }
        y.push(class);
    }
    (x, y)
}

fn split(cfg: &GlyphConfig, t: &[Vec<f64>], stream: u64, shifted: bool) -> (Vec<f64>, Vec<usize>) {
    let shift = shifted.then_some((cfg.shift, cfg.strength));
    sample(cfg, t, shift, &mut RngState::with_stream(cfg.seed, stream))
}

/// Raw source and target training images with values in `[0, 1]`.
pub fn gen_glyphs(cfg: &GlyphConfig) -> Result<(DomainDataset, DomainDataset)> {
    let t = glyph_templates(cfg)?;
    let d = cfg.dim();
    let (xs, ys) = split(cfg, &t, streams::SOURCE_TRAIN, false);
    let (xt, yt) = split(cfg, &t, streams::TARGET_TRAIN, true);
    Ok((
        DomainDataset::source(xs, d, ys)?,
        DomainDataset::target(xt, d, Some(yt))?,
    ))
}

pub fn glyphs_task(cfg: &GlyphConfig) -> Result<TaskData> {
    let t = glyph_templates(cfg)?;
    let d = cfg.dim();
    let (src, tgt) = gen_glyphs(cfg)?;
    let (xs, ys) = split(cfg, &t, streams::SOURCE_TEST, false);
    let (xt, yt) = split(cfg, &t, streams::TARGET_TEST, true);
    TaskData::standardized(
        [
            src,
            tgt,
            DomainDataset::source(xs, d, ys)?,
            DomainDataset::target(xt, d, Some(yt))?,
        ],
        cfg.classes,
    )
}

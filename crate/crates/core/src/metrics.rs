//! Diagnostics on trained bundles: domain divergence, equilibrium gap,
//! decision-boundary and embedding exports, reconstruction images.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{sigmoid, Graph, Tensor};
use crate::datasets::{DomainDataset, Standardizer};
use crate::error::{Error, Result};
use crate::losses::{decoder_domain_label, recon_mse};
use crate::nn::ModelBundle;
use crate::rng::{streams, RngState};
use crate::trainer::{predict, EpochLog};

/// `2 (1 - 2 err)`: 0 for a coin flip, 2 for perfect separation.
pub fn proxy_distance(error: f64) -> f64 {
    2.0 * (1.0 - 2.0 * error)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// Thresholded decoder margin: source-like iff `[m - L_r]^+ > m / 2`.
    DecoderMargin,
    /// Logistic regression fitted on half of the frozen features and scored
    /// on the other half.
    FreshLogistic,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::DecoderMargin => "decoder_margin",
            ClassifierKind::FreshLogistic => "fresh_logistic",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder_margin" => Ok(ClassifierKind::DecoderMargin),
            "fresh_logistic" => Ok(ClassifierKind::FreshLogistic),
            other => Err(Error::Parse(format!("unknown classifier `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceReport {
    pub kind: ClassifierKind,
    /// Domain classification error on the scored samples.
    pub error: f64,
    pub proxy_distance: f64,
}

impl DivergenceReport {
    fn new(kind: ClassifierKind, error: f64) -> Self {
        DivergenceReport {
            kind,
            error,
            proxy_distance: proxy_distance(error),
        }
    }
}

fn features(bundle: &ModelBundle, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &[]);
    let xv = g.constant(x);
    let z = b.feature_extract(&mut g, xv)?;
    Ok(g.value(z).to_vec())
}

/// Per-sample reconstruction error of every row.
pub fn recon_errors(bundle: &ModelBundle, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &[]);
    let xv = g.constant(x);
    let z = b.feature_extract(&mut g, xv)?;
    let xh = b.reconstruct(&mut g, z)?;
    let r = recon_mse(&mut g, xv, xh)?;
    Ok(g.value(r).to_vec())
}

/// Estimates how separable the two domains are in the bundle's feature
/// space. `margin` is only read by the decoder classifier; `seed` only by
/// the logistic probe, which never touches the bundle.
pub fn proxy_divergence(
    bundle: &ModelBundle,
    src: &DomainDataset,
    tgt: &DomainDataset,
    kind: ClassifierKind,
    margin: f64,
    seed: u64,
) -> Result<DivergenceReport> {
    if src.len() != tgt.len() {
        return Err(Error::InvalidSpec(format!(
            "divergence needs equal counts, got {} and {}",
            src.len(),
            tgt.len()
        )));
    }
    match kind {
        ClassifierKind::DecoderMargin => {
            let mut wrong = 0usize;
            for (ds, source_like) in [(src, 1u8), (tgt, 0u8)] {
                let errs = recon_errors(bundle, &ds.to_tensor())?;
                wrong += errs
                    .iter()
                    .filter(|&&l| decoder_domain_label(l, margin) != source_like)
                    .count();
            }
            Ok(DivergenceReport::new(kind, wrong as f64 / (2 * src.len()) as f64))
        }
        ClassifierKind::FreshLogistic => {
            let d = bundle.spec().latent_dim();
            let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(2 * src.len());
            for (ds, y) in [(src, 0.0), (tgt, 1.0)] {
                let z = features(bundle, &ds.to_tensor())?;
                rows.extend(z.chunks(d).map(|c| (c.to_vec(), y)));
            }
            let error = logistic_probe_error(rows, seed)?;
            Ok(DivergenceReport::new(kind, error))
        }
    }
}

/// Shuffles the rows, fits on the first half, and returns the error on the
/// second half. Features are standardized with fitting-half statistics.
pub fn logistic_probe_error(mut rows: Vec<(Vec<f64>, f64)>, seed: u64) -> Result<f64> {
    const STEPS: usize = 500;
    const LR: f64 = 0.5;
    const L2: f64 = 1e-3;
    if rows.len() < 4 {
        return Err(Error::EmptyBatch("logistic probe"));
    }
    rows.shuffle(&mut RngState::with_stream(seed, streams::PROBE));
    let (fit, score) = rows.split_at(rows.len() / 2);
    let d = fit[0].0.len();
    let n = fit.len() as f64;
    let mut mean = vec![0.0; d];
    for (x, _) in fit {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; d];
    for (x, _) in fit {
        std.iter_mut()
            .zip(x)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    std.iter_mut()
        .for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let norm = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let fit: Vec<(Vec<f64>, f64)> = fit.iter().map(|(x, y)| (norm(x), *y)).collect();

    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..STEPS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &fit {
            let p = sigmoid(b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>());
            let e = (p - y) / n;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += e * v);
            gb += e;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= LR * (g + L2 * *wi));
        b -= LR * gb;
    }
    let wrong = score
        .iter()
        .filter(|(x, y)| {
            let s = b + w.iter().zip(norm(x)).map(|(a, c)| a * c).sum::<f64>();
            (s > 0.0) != (*y > 0.5)
        })
        .count();
    Ok(wrong as f64 / score.len() as f64)
}

/// `|V - m| / m` for the final epoch's decoder objective `V`.
pub fn equilibrium_gap(log: &[EpochLog], margin: f64) -> Result<f64> {
    let last = log.last().ok_or(Error::EmptyBatch("equilibrium_gap"))?;
    let v = last
        .decoder_obj
        .ok_or_else(|| Error::InvalidSpec("log has no decoder objective".into()))?;
    Ok(equilibrium_gap_value(v, margin))
}

pub fn equilibrium_gap_value(decoder_objective: f64, margin: f64) -> f64 {
    (decoder_objective - margin).abs() / margin
}

/// Axis-aligned rectangle in raw input coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x0: (f64, f64),
    pub x1: (f64, f64),
}

impl Bounds {
    /// Padded box around the two moons.
    pub const MOONS: Bounds = Bounds {
        x0: (-2.0, 3.0),
        x1: (-1.5, 2.0),
    };
}

/// Predicted class on a `resolution x resolution` lattice spanning `bounds`
/// (endpoints included). Points are given in raw coordinates and
/// standardized before prediction. Rows vary `x0` fastest.
pub fn boundary_grid(
    bundle: &ModelBundle,
    standardizer: &Standardizer,
    bounds: Bounds,
    resolution: usize,
) -> Result<Vec<(f64, f64, usize)>> {
    if bundle.spec().input_dim() != 2 || standardizer.mean.len() != 2 {
        return Err(Error::shape("boundary_grid", "needs 2-D inputs"));
    }
    if resolution < 2 {
        return Err(Error::InvalidConfig("grid resolution must be >= 2".into()));
    }
    let at = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let mut pts = Vec::with_capacity(resolution * resolution);
    let mut data = Vec::with_capacity(2 * resolution * resolution);
    for j in 0..resolution {
        for i in 0..resolution {
            let p = (at(bounds.x0, i), at(bounds.x1, j));
            data.push((p.0 - standardizer.mean[0]) / standardizer.std[0]);
            data.push((p.1 - standardizer.mean[1]) / standardizer.std[1]);
            pts.push(p);
        }
    }
    let classes = predict(bundle, &Tensor::new(vec![pts.len(), 2], data)?)?;
    Ok(pts.into_iter().zip(classes).map(|((a, b), c)| (a, b, c)).collect())
}

pub fn write_boundary_csv<W: Write>(grid: &[(f64, f64, usize)], mut w: W) -> Result<()> {
    writeln!(w, "x0,x1,class")?;
    for (a, b, c) in grid {
        writeln!(w, "{a},{b},{c}")?;
    }
    Ok(())
}

/// Writes `z0..z{d-1},domain,label` for every row of every set. Labels are
/// the evaluation labels, or -1 where none exist.
pub fn export_embeddings<W: Write>(bundle: &ModelBundle, sets: &[&DomainDataset], mut w: W) -> Result<()> {
    let d = bundle.spec().latent_dim();
    let cols: Vec<String> = (0..d).map(|j| format!("z{j}")).collect();
    writeln!(w, "{},domain,label", cols.join(","))?;
    for ds in sets {
        let z = features(bundle, &ds.to_tensor())?;
        for (i, row) in z.chunks(d).enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let label = ds.eval_labels().map_or(-1, |l| l[i] as i64);
            writeln!(w, "{},{},{label}", cells.join(","), ds.domain())?;
        }
    }
    Ok(())
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Maps raw values in `[0, 1]` to `0..=255`, clamping outside values.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                "image",
                format!("{} values for {width}x{height}", values.len()),
            ));
        }
        let pixels = values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Ok(GrayImage { width, height, pixels })
    }

    /// Mean intensity on the `[0, 1]` scale.
    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / (255.0 * self.pixels.len() as f64)
    }
}

/// Plain-text PGM (`P2`), one image row per line.
pub fn write_pgm<W: Write>(img: &GrayImage, mut w: W) -> Result<()> {
    writeln!(w, "P2\n{} {}\n255", img.width, img.height)?;
    for row in img.pixels.chunks(img.width) {
        let cells: Vec<String> = row.iter().map(u8::to_string).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

pub fn read_pgm<R: BufRead>(r: R) -> Result<GrayImage> {
    let mut tokens = Vec::new();
    for line in r.lines() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("");
        tokens.extend(body.split_whitespace().map(str::to_owned));
    }
    let mut it = tokens.into_iter();
    if it.next().as_deref() != Some("P2") {
        return Err(Error::Parse("not a plain PGM file".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        it.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad PGM {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let v = num("pixel")?;
        pixels.push(u8::try_from(v).map_err(|_| Error::Parse(format!("pixel {v} > 255")))?);
    }
    if num("pixel").is_ok() {
        return Err(Error::Parse("trailing PGM data".into()));
    }
    Ok(GrayImage { width, height, pixels })
}

/// Decoder outputs for the selected rows, mapped back to the raw scale and
/// rendered as square images.
pub fn reconstruct_images(
    bundle: &ModelBundle,
    ds: &DomainDataset,
    idx: &[usize],
    standardizer: &Standardizer,
) -> Result<Vec<GrayImage>> {
    let side = (ds.dim() as f64).sqrt().round() as usize;
    if side * side != ds.dim() {
        return Err(Error::shape(
            "reconstruct_images",
            format!("{} is not a square", ds.dim()),
        ));
    }
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &[]);
    let x = g.constant(&ds.gather(idx));
    let z = b.feature_extract(&mut g, x)?;
    let xh = b.reconstruct(&mut g, z)?;
    let raw = standardizer.invert(g.value(xh))?;
    raw.chunks(ds.dim())
        .map(|c| GrayImage::from_unit(side, side, c))
        .collect()
}

/// Raw-scale images of the selected rows themselves.
pub fn input_images(ds: &DomainDataset, idx: &[usize], standardizer: &Standardizer) -> Result<Vec<GrayImage>> {
    let side = (ds.dim() as f64).sqrt().round() as usize;
    if side * side != ds.dim() {
        return Err(Error::shape("input_images", format!("{} is not a square", ds.dim())));
    }
    let raw = standardizer.invert(ds.gather(idx).data())?;
    raw.chunks(ds.dim())
        .map(|c| GrayImage::from_unit(side, side, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_glyphs, GlyphConfig};
    use crate::nn::BundleSpec;
    use proptest::prelude::*;
    use rand::Rng;

    fn zero_bundle(d: usize) -> ModelBundle {
        ModelBundle::zeros(&BundleSpec::from_widths(d, 2, &[4], 3, None).unwrap()).unwrap()
    }

    #[test]
    fn proxy_distance_examples() {
        assert_eq!(proxy_distance(0.5), 0.0);
        assert_eq!(proxy_distance(0.0), 2.0);
        assert_eq!(proxy_distance(1.0), -2.0);
    }

    #[test]
    fn equilibrium_gap_examples() {
        assert_eq!(equilibrium_gap_value(5.0, 5.0), 0.0);
        assert!((equilibrium_gap_value(5.5, 5.0) - 0.1).abs() < 1e-12);
        assert!(equilibrium_gap(&[], 1.0).is_err());
        let mut e = EpochLog {
            epoch: 0,
            task_nll: 0.1,
            recon_src: None,
            recon_tgt: None,
            hinge_tgt: None,
            decoder_obj: None,
            dat_domain: None,
            src_acc: 1.0,
            tgt_acc: 1.0,
            seconds: 0.0,
        };
        assert!(equilibrium_gap(&[e.clone()], 1.0).is_err());
        e.decoder_obj = Some(0.9);
        assert!((equilibrium_gap(&[e], 1.0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn decoder_margin_separates_by_reconstruction_error() {
        // a zero decoder reconstructs everything as 0, so L_r = mean x^2
        let b = zero_bundle(2);
        let src = DomainDataset::source(vec![0.1, 0.0, 0.0, 0.2], 2, vec![0, 1]).unwrap();
        let tgt = DomainDataset::target(vec![3.0, 3.0, -2.0, 4.0], 2, None).unwrap();
        let r = proxy_divergence(&b, &src, &tgt, ClassifierKind::DecoderMargin, 1.0, 1).unwrap();
        assert_eq!((r.error, r.proxy_distance), (0.0, 2.0));
        let r = proxy_divergence(&b, &tgt, &src, ClassifierKind::DecoderMargin, 1.0, 1).unwrap();
        assert_eq!(r.error, 1.0);
        let short = DomainDataset::target(vec![0.0, 0.0], 2, None).unwrap();
        assert!(proxy_divergence(&b, &src, &short, ClassifierKind::DecoderMargin, 1.0, 1).is_err());
    }

    #[test]
    fn logistic_probe_on_separable_and_identical_clouds() {
        let mut rng = RngState::new(3);
        let mut sep = Vec::new();
        let mut same = Vec::new();
        for i in 0..200 {
            let y = f64::from(i % 2);
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            sep.push((vec![a + 4.0 * y, b], y));
            same.push((vec![a, b], y));
        }
        assert_eq!(logistic_probe_error(sep, 1).unwrap(), 0.0);
        let e = logistic_probe_error(same, 1).unwrap();
        assert!((0.35..=0.65).contains(&e), "{e}");
        assert!(logistic_probe_error(vec![(vec![0.0], 0.0)], 1).is_err());
    }

    #[test]
    fn probe_leaves_the_bundle_alone() {
        let spec = BundleSpec::from_widths(2, 2, &[4], 3, None).unwrap();
        let b = ModelBundle::init(&spec, &mut RngState::new(2)).unwrap();
        let before = b.clone();
        let mut rng = RngState::new(4);
        let pts: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let src = DomainDataset::source(pts[..20].to_vec(), 2, vec![0; 10]).unwrap();
        let tgt = DomainDataset::target(pts[20..].to_vec(), 2, None).unwrap();
        let r = proxy_divergence(&b, &src, &tgt, ClassifierKind::FreshLogistic, 1.0, 7).unwrap();
        assert!((-2.0..=2.0).contains(&r.proxy_distance));
        assert_eq!(b, before);
    }

    #[test]
    fn grid_size_and_constant_model() {
        let b = zero_bundle(2);
        let g = boundary_grid(&b, &Standardizer::identity(2), Bounds::MOONS, 100).unwrap();
        assert_eq!(g.len(), 10_000);
        assert!(g.iter().all(|&(_, _, c)| c == 0));
        assert_eq!((g[0].0, g[0].1), (-2.0, -1.5));
        assert_eq!((g[9_999].0, g[9_999].1), (3.0, 2.0));
        let mut buf = Vec::new();
        write_boundary_csv(&g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 10_001);
    }

    #[test]
    fn grid_is_pure_and_needs_2d() {
        let spec = BundleSpec::from_widths(2, 2, &[4], 3, None).unwrap();
        let b = ModelBundle::init(&spec, &mut RngState::new(9)).unwrap();
        let st = Standardizer::identity(2);
        assert_eq!(
            boundary_grid(&b, &st, Bounds::MOONS, 7).unwrap(),
            boundary_grid(&b, &st, Bounds::MOONS, 7).unwrap()
        );
        assert!(boundary_grid(&zero_bundle(3), &Standardizer::identity(3), Bounds::MOONS, 5).is_err());
    }

    #[test]
    fn embeddings_csv_layout() {
        let b = zero_bundle(2);
        let src = DomainDataset::source(vec![0.1, 0.0, 0.0, 0.2], 2, vec![0, 1]).unwrap();
        let tgt = DomainDataset::target(vec![3.0, 3.0], 2, None).unwrap();
        let mut buf = Vec::new();
        export_embeddings(&b, &[&src, &tgt], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "z0,z1,z2,domain,label");
        assert_eq!(lines[2], "0,0,0,source,1");
        assert_eq!(lines[3], "0,0,0,target,-1");
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 17, 255, 128, 3, 99],
        };
        let mut buf = Vec::new();
        write_pgm(&img, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "P2\n3 2\n255\n0 17 255\n128 3 99\n"
        );
        assert_eq!(read_pgm(&buf[..]).unwrap(), img);
        let commented = "P2\n# note\n1 1\n255\n7\n";
        assert_eq!(read_pgm(commented.as_bytes()).unwrap().pixels, vec![7]);
        assert!(read_pgm("P5\n1 1\n255\n7\n".as_bytes()).is_err());
        assert!(read_pgm("P2\n2 1\n255\n7\n".as_bytes()).is_err());
        assert!(read_pgm("P2\n1 1\n255\n300\n".as_bytes()).is_err());
    }

    #[test]
    fn unit_values_clamp_to_bytes() {
        let img = GrayImage::from_unit(2, 2, &[-0.5, 0.0, 0.5, 1.7]).unwrap();
        assert_eq!(img.pixels, vec![0, 0, 128, 255]);
        assert!(GrayImage::from_unit(2, 2, &[0.0]).is_err());
    }

    #[test]
    fn reconstructions_are_square_images() {
        let cfg = GlyphConfig::default();
        let (s, _) = gen_glyphs(&cfg).unwrap();
        let st = Standardizer::fit(&s);
        let s = st.apply(&s).unwrap();
        let spec = BundleSpec::from_widths(64, 4, &[8], 4, None).unwrap();
        let b = ModelBundle::init(&spec, &mut RngState::new(1)).unwrap();
        let imgs = reconstruct_images(&b, &s, &[0, 1, 2], &st).unwrap();
        assert_eq!(imgs.len(), 3);
        assert!(imgs.iter().all(|i| i.width == 8 && i.height == 8));
        let raw = input_images(&s, &[0], &st).unwrap();
        let (orig, _) = gen_glyphs(&cfg).unwrap();
        let want = GrayImage::from_unit(8, 8, orig.row(0)).unwrap();
        assert_eq!(raw[0], want);
        let flat = DomainDataset::source(vec![0.0; 6], 3, vec![0, 1]).unwrap();
        assert!(input_images(&flat, &[0], &Standardizer::identity(3)).is_err());
    }

    proptest! {
        #[test]
        fn proxy_distance_is_bounded_and_antisymmetric(e in 0.0f64..=1.0) {
            let d = proxy_distance(e);
            prop_assert!((-2.0..=2.0).contains(&d));
            prop_assert!((d + proxy_distance(1.0 - e)).abs() < 1e-12);
        }

        #[test]
        fn pgm_round_trips_any_image(w in 1usize..6, h in 1usize..6, seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let pixels = (0..w * h).map(|_| rng.random::<u8>()).collect();
            let img = GrayImage { width: w, height: h, pixels };
            let mut buf = Vec::new();
            write_pgm(&img, &mut buf).unwrap();
            prop_assert_eq!(read_pgm(&buf[..]).unwrap(), img);
        }
    }
}

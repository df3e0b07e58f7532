//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. The task is resolved first
//! (flags before file, default moons) because it selects the defaults the
//! other keys override. Unknown keys, malformed values and violated
//! invariants are errors naming the offending line.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::datasets::ShiftKind;
use crate::error::{Error, Result};
use crate::trainer::{TaskKind, TrainConfig};

/// Every accepted key, in the order [`render_config`] writes them.
pub const KEYS: &[&str] = &[
    "task",
    "method",
    "alpha",
    "margin",
    "lr",
    "lr_decay",
    "momentum",
    "epochs",
    "batch",
    "seed",
    "hidden",
    "latent",
    "disc_hidden",
    "timing",
    "moons_n",
    "moons_noise",
    "moons_rotation",
    "glyph_grid",
    "glyph_classes",
    "glyph_shift",
    "glyph_strength",
    "glyph_jitter",
    "glyph_offset",
    "glyph_n",
];

fn parse<T: FromStr>(value: &str, what: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("`{value}` is not a valid {what}"))
}

fn non_negative(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse(value, "number")?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite number >= 0, got {value}"))
    }
}

fn positive(value: &str) -> std::result::Result<f64, String> {
    let v = non_negative(value)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be > 0, got {value}"))
    }
}

fn widths(value: &str) -> std::result::Result<Vec<usize>, String> {
    let v: Vec<usize> = value
        .split(',')
        .map(|s| parse(s.trim(), "layer width"))
        .collect::<std::result::Result<_, _>>()?;
    if v.contains(&0) {
        return Err("layer widths must be >= 1".into());
    }
    Ok(v)
}

fn boolean(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{value}` is not a boolean")),
    }
}

/// Sets one key. The margin may be 0 here; whether that is usable is
/// decided by the caller.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let value = value.trim();
    match key {
        "task" => cfg.task = value.parse().map_err(|e: Error| e.to_string())?,
        "method" => cfg.method = value.parse().map_err(|e: Error| e.to_string())?,
        "alpha" => cfg.alpha = non_negative(value)?,
        "margin" => cfg.margin = non_negative(value)?,
        "lr" => cfg.lr = positive(value)?,
        "lr_decay" => cfg.lr_decay = non_negative(value)?,
        "momentum" => {
            let m = non_negative(value)?;
            if m >= 1.0 {
                return Err(format!("must lie in [0, 1), got {value}"));
            }
            cfg.momentum = m;
        }
        "epochs" => cfg.epochs = parse(value, "epoch count")?,
        "batch" => {
            cfg.batch_size = parse(value, "batch size")?;
            if cfg.batch_size == 0 {
                return Err("must be >= 1".into());
            }
        }
        "seed" => cfg.seed = parse(value, "seed")?,
        "hidden" => cfg.hidden = widths(value)?,
        "latent" => cfg.latent = widths(value)?.into_iter().next().unwrap_or(0),
        "disc_hidden" => cfg.disc_hidden = widths(value)?,
        "timing" => cfg.timing = boolean(value)?,
        "moons_n" => cfg.moons.n_per_domain = parse(value, "sample count")?,
        "moons_noise" => cfg.moons.noise = non_negative(value)?,
        "moons_rotation" => cfg.moons.rotation_degrees = parse(value, "angle")?,
        "glyph_grid" => cfg.glyphs.grid = parse(value, "grid size")?,
        "glyph_classes" => cfg.glyphs.classes = parse(value, "class count")?,
        "glyph_shift" => cfg.glyphs.shift = value.parse::<ShiftKind>().map_err(|e| e.to_string())?,
        "glyph_strength" => cfg.glyphs.strength = non_negative(value)?,
        "glyph_jitter" => cfg.glyphs.jitter = non_negative(value)?,
        "glyph_offset" => cfg.glyphs.max_offset = parse(value, "offset")?,
        "glyph_n" => cfg.glyphs.n_per_domain = parse(value, "sample count")?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// One `key = value` entry and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// 1-based line in the file; `None` for command-line overrides.
    pub line: Option<usize>,
    pub key: String,
    pub value: String,
}

impl Entry {
    fn error(&self, message: String) -> Error {
        match self.line {
            Some(line) => Error::ConfigLine {
                line,
                message: format!("{}: {message}", self.key),
            },
            None => Error::InvalidConfig(format!("--{}: {message}", self.key)),
        }
    }
}

/// Splits config text into entries without interpreting values.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push(Entry {
            line: Some(i + 1),
            key: k.trim().to_owned(),
            value: v.trim().to_owned(),
        });
    }
    Ok(out)
}

/// Builds a validated config from file text and overrides (which win).
pub fn parse_config(text: &str, overrides: &[(&str, &str)]) -> Result<TrainConfig> {
    let mut entries = parse_entries(text)?;
    entries.extend(overrides.iter().map(|(k, v)| Entry {
        line: None,
        key: (*k).to_owned(),
        value: (*v).to_owned(),
    }));
    let task_entry = entries.iter().rev().find(|e| e.key == "task");
    let task = match task_entry {
        Some(e) => e.value.parse::<TaskKind>().map_err(|err| e.error(err.to_string()))?,
        None => TaskKind::Moons,
    };
    let mut cfg = TrainConfig::for_task(task);
    for e in &entries {
        apply_key(&mut cfg, &e.key, &e.value).map_err(|m| e.error(m))?;
    }
    cfg.validate().map_err(|err| {
        // point at the entry that set the offending value when there is one
        let key = match &err {
            Error::InvalidConfig(m) if m.starts_with("margin") => Some("margin"),
            _ => None,
        };
        match key.and_then(|k| entries.iter().rev().find(|e| e.key == k)) {
            Some(e) => e.error(err.to_string()),
            None => err,
        }
    })?;
    Ok(cfg)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes every key; [`parse_config`] reads it back to an equal config.
pub fn render_config(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("task", cfg.task.to_string());
    put("method", cfg.method.to_string());
    put("alpha", cfg.alpha.to_string());
    put("margin", cfg.margin.to_string());
    put("lr", cfg.lr.to_string());
    put("lr_decay", cfg.lr_decay.to_string());
    put("momentum", cfg.momentum.to_string());
    put("epochs", cfg.epochs.to_string());
    put("batch", cfg.batch_size.to_string());
    put("seed", cfg.seed.to_string());
    put("hidden", join(&cfg.hidden));
    put("latent", cfg.latent.to_string());
    put("disc_hidden", join(&cfg.disc_hidden));
    put("timing", cfg.timing.to_string());
    put("moons_n", cfg.moons.n_per_domain.to_string());
    put("moons_noise", cfg.moons.noise.to_string());
    put("moons_rotation", cfg.moons.rotation_degrees.to_string());
    put("glyph_grid", cfg.glyphs.grid.to_string());
    put("glyph_classes", cfg.glyphs.classes.to_string());
    put("glyph_shift", cfg.glyphs.shift.to_string());
    put("glyph_strength", cfg.glyphs.strength.to_string());
    put("glyph_jitter", cfg.glyphs.jitter.to_string());
    put("glyph_offset", cfg.glyphs.max_offset.to_string());
    put("glyph_n", cfg.glyphs.n_per_domain.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Method;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("", &[]).unwrap(), TrainConfig::for_task(TaskKind::Moons));
        let cfg = parse_config("# nothing here\n\n", &[]).unwrap();
        assert_eq!(
            (cfg.lr, cfg.momentum, cfg.epochs, cfg.batch_size, cfg.seed),
            (0.01, 0.9, 100, 50, 1)
        );
    }

    #[test]
    fn file_values_override_defaults() {
        let cfg = parse_config("alpha = 0.3\n", &[]).unwrap();
        assert_eq!(cfg.alpha, 0.3);
        let cfg = parse_config("hidden = 8, 4  # comment\nlatent=2\n", &[]).unwrap();
        assert_eq!((cfg.hidden, cfg.latent), (vec![8, 4], 2));
    }

    #[test]
    fn flags_override_the_file() {
        let cfg = parse_config("alpha = 0.3\nseed = 4\n", &[("alpha", "0.7")]).unwrap();
        assert_eq!((cfg.alpha, cfg.seed), (0.7, 4));
    }

    #[test]
    fn task_selects_defaults_before_other_keys() {
        let cfg = parse_config("latent = 5\ntask = glyphs\n", &[]).unwrap();
        assert_eq!(cfg.task, TaskKind::Glyphs);
        assert_eq!(cfg.latent, 5);
        assert_eq!(cfg.hidden, TrainConfig::for_task(TaskKind::Glyphs).hidden);
        let cfg = parse_config("task = glyphs\n", &[("task", "moons")]).unwrap();
        assert_eq!(cfg.task, TaskKind::Moons);
    }

    #[test]
    fn dat_needs_no_margin() {
        let cfg = parse_config("method = dat\n", &[]).unwrap();
        assert_eq!(cfg.method, Method::Dat);
        parse_config("method = dat\nmargin = 0\n", &[]).unwrap();
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("alpha = 0.3\nbogus = 1\n", 2),
            ("alpha = abc\n", 1),
            ("\n\nalpha = -1\n", 3),
            ("method = dann\n", 1),
            ("seed = 1\njust words\n", 2),
            ("margin = 0\n", 1),
            ("momentum = 1\n", 1),
            ("task = cifar\n", 1),
        ];
        for (text, want) in cases {
            match parse_config(text, &[]) {
                Err(Error::ConfigLine { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        match parse_config("", &[("alpha", "x")]) {
            Err(Error::InvalidConfig(m)) => assert!(m.starts_with("--alpha")),
            other => panic!("{other:?}"),
        }
        assert!(parse_config("glyph_grid = 2\ntask = glyphs\n", &[]).is_err());
    }

    #[test]
    fn rendered_config_round_trips() {
        for task in [TaskKind::Moons, TaskKind::Glyphs] {
            let mut cfg = TrainConfig::for_task(task);
            cfg.method = Method::ArnNoMdat;
            cfg.alpha = 0.123456789;
            cfg.hidden = vec![7, 3];
            cfg.timing = true;
            cfg.glyphs.shift = ShiftKind::Noise;
            let text = render_config(&cfg);
            assert_eq!(parse_config(&text, &[]).unwrap(), cfg);
            assert_eq!(text.lines().count(), KEYS.len());
            for (line, key) in text.lines().zip(KEYS) {
                assert!(line.starts_with(&format!("{key} = ")));
            }
        }
    }
}

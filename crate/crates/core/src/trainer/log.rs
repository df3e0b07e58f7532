use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const EPOCH_CSV_HEADER: &str =
    "epoch,task_nll,recon_src,recon_tgt,hinge_tgt,decoder_obj,dat_domain,src_acc,tgt_acc,seconds";

/// Per-epoch means of the step losses plus held-out accuracies. Losses a
/// method does not compute are `None` and written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_nll: f64,
    pub recon_src: Option<f64>,
    pub recon_tgt: Option<f64>,
    pub hinge_tgt: Option<f64>,
    pub decoder_obj: Option<f64>,
    pub dat_domain: Option<f64>,
    pub src_acc: f64,
    pub tgt_acc: f64,
    /// Zero unless timing was requested.
    pub seconds: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_epoch_csv<W: Write>(log: &[EpochLog], mut w: W) -> Result<()> {
    writeln!(w, "{EPOCH_CSV_HEADER}")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.task_nll,
            cell(e.recon_src),
            cell(e.recon_tgt),
            cell(e.hinge_tgt),
            cell(e.decoder_obj),
            cell(e.dat_domain),
            e.src_acc,
            e.tgt_acc,
            e.seconds
        )?;
    }
    Ok(())
}

pub fn read_epoch_csv<R: BufRead>(r: R) -> Result<Vec<EpochLog>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref() != Some(EPOCH_CSV_HEADER) {
        return Err(Error::Parse("missing epoch log header".into()));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| Error::ConfigLine {
            line: n + 2,
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(format!("expected 10 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|_| bad(format!("bad epoch `{}`", f[0])))?,
            task_nll: num(f[1])?,
            recon_src: opt(f[2])?,
            recon_tgt: opt(f[3])?,
            hinge_tgt: opt(f[4])?,
            decoder_obj: opt(f[5])?,
            dat_domain: opt(f[6])?,
            src_acc: num(f[7])?,
            tgt_acc: num(f[8])?,
            seconds: num(f[9])?,
        });
    }
    Ok(out)
}

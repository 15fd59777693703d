//! CSV writers and readers for the command-line surfaces.
//!
//! All floating-point output goes through Rust's shortest-roundtrip `{}`
//! formatting, so re-parsing a dump reproduces the original 64-bit values
//! exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use tspace_core::dataset::LabeledSample;
use tspace_core::schedule::{LatentSubsequence, NoiseSchedule};
use tspace_core::Vec2;

use crate::CliError;

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))
}

/// Emit to a file or standard output.
pub fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Io(format!("writing stdout: {e}")))?;
            Ok(())
        }
    }
}

/// Schedule table `t,beta,alpha_bar,snr`, optionally restricted to a subsequence.
pub fn schedule_csv(schedule: &NoiseSchedule, taus: Option<&LatentSubsequence>) -> String {
    let mut out = String::from("t,beta,alpha_bar,snr\n");
    let mut push_row = |t: usize| {
        out.push_str(&format!(
            "{},{},{},{}\n",
            t,
            schedule.beta(t),
            schedule.alpha_bar(t),
            schedule.snr(t).expect("t in range")
        ));
    };
    match taus {
        Some(sub) => sub.taus().iter().copied().for_each(&mut push_row),
        None => (0..schedule.t_count()).for_each(&mut push_row),
    }
    out
}

/// Dataset dump `x,y,label` with an empty label column for unlabeled kinds.
pub fn dataset_csv(samples: &[LabeledSample]) -> String {
    let mut out = String::from("x,y,label\n");
    for s in samples {
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", s.x0[0], s.x0[1], label));
    }
    out
}

/// Generated points as `sample_id,x,y`.
pub fn samples_csv(points: &[Vec2]) -> String {
    let mut out = String::from("sample_id,x,y\n");
    for (i, p) in points.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i, p[0], p[1]));
    }
    out
}

/// Parse a `sample_id,x,y` file back into points.
pub fn parse_samples_csv(text: &str) -> Result<Vec<Vec2>, CliError> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CliError::Usage(format!(
                "sample row {lineno} has {} fields, expected 3",
                fields.len()
            )));
        }
        let x: f64 = fields[1]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad x in sample row {lineno}")))?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad y in sample row {lineno}")))?;
        points.push([x, y]);
    }
    if points.is_empty() {
        return Err(CliError::Usage("sample file contains no points".into()));
    }
    Ok(points)
}

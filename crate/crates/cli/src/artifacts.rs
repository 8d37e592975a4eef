//! Result files. Each is written to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use al4dvar::outer::ConvergenceRow;
use al4dvar::ScalingRow;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const CONVERGENCE_HEADER: &str =
    "iter,phase,cost,grad_norm,constraint_violation,cost_evals,grad_evals,elapsed_s";
pub const SCALING_HEADER: &str = "k,workers,cost_eval_ms,grad_eval_ms,solve_s";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from(CONVERGENCE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iter,
            r.phase.as_str(),
            fmt_f64(r.cost),
            fmt_f64(r.grad_norm),
            fmt_f64(r.constraint_violation),
            r.cost_evals,
            r.grad_evals,
            fmt_f64(r.elapsed_s)
        );
    }
    out
}

fn state_columns(out: &mut String, n: usize) {
    for i in 0..n {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
}

fn push_state(out: &mut String, state: &[f64]) {
    for v in state {
        out.push(',');
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
}

/// `time,background_error,analysis_error,x0..` with per-time RMS errors
/// against the reference.
pub fn trajectory_csv(
    times: &[f64],
    background_err: &[f64],
    analysis_err: &[f64],
    states: &[Vec<f64>],
) -> String {
    let n = states.first().map_or(0, Vec::len);
    let mut out = String::from("time,background_error,analysis_error");
    state_columns(&mut out, n);
    for (((t, b), a), s) in times
        .iter()
        .zip(background_err)
        .zip(analysis_err)
        .zip(states)
    {
        let _ = write!(out, "{},{},{}", fmt_f64(*t), fmt_f64(*b), fmt_f64(*a));
        push_state(&mut out, s);
    }
    out
}

/// One row per `(outer, interval, step)`: the sub-interval trajectories
/// started from each outer iterate's boundary states.
pub fn iterates_csv(segments: &[(usize, usize, f64, Vec<f64>)]) -> String {
    let n = segments.first().map_or(0, |s| s.3.len());
    let mut out = String::from("outer,interval,time");
    state_columns(&mut out, n);
    for (outer, interval, t, s) in segments {
        let _ = write!(out, "{outer},{interval},{}", fmt_f64(*t));
        push_state(&mut out, s);
    }
    out
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from(SCALING_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.k,
            r.workers,
            fmt_f64(r.cost_eval_ms),
            fmt_f64(r.grad_eval_ms),
            fmt_f64(r.solve_s)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            6.02214076e23,
            f64::MIN_POSITIVE,
            0.0,
        ] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn atomic_write_replaces_without_leftovers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "second");
        let names: Vec<_> = std::fs::read_dir(p.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn scaling_header_and_rows() {
        let row = ScalingRow {
            k: 2,
            workers: 2,
            oversubscribed: false,
            cost_eval_ms: 1.5,
            grad_eval_ms: 2.0,
            cost_eval_mean_ms: 1.5,
            grad_eval_mean_ms: 2.0,
            solve_s: 0.25,
            cost_value: 3.0,
            matches_sequential: true,
        };
        let csv = scaling_csv(&[row]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], SCALING_HEADER);
        assert_eq!(lines[1].split(',').count(), 5);
    }
}

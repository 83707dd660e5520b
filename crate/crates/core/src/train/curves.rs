use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,jaccard,dice,precision,recall,avd,ap,loss";

/// Parses a numeric CSV whose first column is `epoch`.
pub fn parse_metrics_csv(text: &str, source: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let err = |line: usize, msg: String| Error::Line {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    if cols.first().map(String::as_str) != Some("epoch") {
        return Err(err(1, format!("first column must be epoch, header is {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(err(i + 1, format!("{} fields, header has {}", fields.len(), cols.len())));
        }
        let row = fields
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(i + 1, format!("not a number: {e}")))?;
        rows.push(row);
    }
    Ok((cols, rows))
}

/// Non-overlapping window means; a shorter trailing window is kept. The
/// epoch column becomes the midpoint of each window's first and last epoch.
pub fn smooth_rows(rows: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    rows.chunks(window.max(1))
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mut out: Vec<f64> = (0..chunk[0].len())
                .map(|c| chunk.iter().map(|r| r[c]).sum::<f64>() / n)
                .collect();
            out[0] = 0.5 * (chunk[0][0] + chunk[chunk.len() - 1][0]);
            out
        })
        .collect()
}

/// Smooths a metrics CSV over windows of `window` rows.
pub fn smooth_curve(text: &str, window: usize, source: &Path) -> Result<String> {
    if window == 0 {
        return Err(Error::Config("smoothing window must be >= 1".into()));
    }
    let (cols, rows) = parse_metrics_csv(text, source)?;
    let mut out = cols.join(",");
    out.push('\n');
    for row in smooth_rows(&rows, window) {
        let mut fields = vec![format_epoch(row[0])];
        fields.extend(row[1..].iter().map(|v| v.to_string()));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

fn format_epoch(e: f64) -> String {
    if e.fract() == 0.0 {
        format!("{e:.0}")
    } else {
        format!("{e:.1}")
    }
}

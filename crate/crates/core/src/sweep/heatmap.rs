use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::SweepResult;
use crate::error::{Error, Result};

/// Rows are λp ascending, columns λr ascending. `(0, 0)` holds the base
/// model's value; failed or missing cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapMatrix {
    pub lambda_p: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn metric_matrix(result: &SweepResult, key: &str) -> Result<HeatmapMatrix> {
    let axis = result.meta.grid_values.clone();
    if axis.is_empty() {
        return Err(Error::Invalid("sweep result has no grid".into()));
    }
    let base = result.base_metrics.get(key)?;
    let mut values = vec![vec![None; axis.len()]; axis.len()];
    for (i, &p) in axis.iter().enumerate() {
        for (j, &r) in axis.iter().enumerate() {
            values[i][j] = if p == 0.0 && r == 0.0 {
                base
            } else {
                match result.cell(p, r).and_then(|c| c.metrics.as_ref()) {
                    Some(m) => m.get(key)?,
                    None => None,
                }
            };
        }
    }
    Ok(HeatmapMatrix {
        lambda_p: axis.clone(),
        lambda_r: axis,
        values,
    })
}

const BASE_LABEL: &str = "Base:";

/// Values are written with Rust's shortest round-trip float formatting.
pub fn heatmap_csv(m: &HeatmapMatrix) -> String {
    let mut out = String::from("lambda_p\\lambda_r");
    for r in &m.lambda_r {
        write!(out, ",{r}").unwrap();
    }
    out.push('\n');
    for (i, p) in m.lambda_p.iter().enumerate() {
        write!(out, "{p}").unwrap();
        for (j, v) in m.values[i].iter().enumerate() {
            out.push(',');
            if *p == 0.0 && m.lambda_r[j] == 0.0 {
                out.push_str(BASE_LABEL);
            }
            if let Some(v) = v {
                write!(out, "{v}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_heatmap_csv(text: &str) -> Result<HeatmapMatrix> {
    let bad = |line: usize, why: &str| Error::Invalid(format!("heatmap csv line {}: {why}", line + 1));
    let num = |s: &str, line: usize| s.parse::<f64>().map_err(|_| bad(line, &format!("bad number `{s}`")));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    let lambda_r = header
        .split(',')
        .skip(1)
        .map(|s| num(s, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut lambda_p = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        lambda_p.push(num(fields.next().unwrap_or(""), i + 1)?);
        let row = fields
            .map(|f| {
                let f = f.strip_prefix(BASE_LABEL).unwrap_or(f);
                if f.is_empty() {
                    Ok(None)
                } else {
                    num(f, i + 1).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != lambda_r.len() {
            return Err(bad(i + 1, "row width differs from header"));
        }
        values.push(row);
    }
    Ok(HeatmapMatrix {
        lambda_p,
        lambda_r,
        values,
    })
}

/// Blue (below the anchor) through white to red (above).
const PALETTE: [&str; 11] = [
    "#053061", "#2166ac", "#4393c3", "#92c5de", "#d1e5f0", "#f7f7f7", "#fddbc7", "#f4a582", "#d6604d", "#b2182b",
    "#67001f",
];
const MISSING: &str = "#bdbdbd";

/// Palette index per cell: gains relative to `anchor`, scaled by the
/// largest absolute gain so the anchor itself sits at the midpoint.
pub fn color_indices(m: &HeatmapMatrix, anchor: f64) -> Vec<Vec<Option<usize>>> {
    let gain = |v: f64| if anchor != 0.0 { (v - anchor) / anchor.abs() } else { v - anchor };
    let max = m
        .values
        .iter()
        .flatten()
        .flatten()
        .map(|&v| gain(v).abs())
        .fold(0.0, f64::max);
    m.values
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| {
                    v.map(|v| {
                        if max == 0.0 || !max.is_finite() {
                            5
                        } else {
                            (5.0 + (5.0 * gain(v) / max).round()).clamp(0.0, 10.0) as usize
                        }
                    })
                })
                .collect()
        })
        .collect()
}

pub fn heatmap_svg(m: &HeatmapMatrix, metric: &str) -> String {
    const CELL: usize = 64;
    const LEFT: usize = 72;
    const TOP: usize = 48;
    let anchor_at = |p: f64, r: f64| {
        let i = m.lambda_p.iter().position(|&x| x == p)?;
        let j = m.lambda_r.iter().position(|&x| x == r)?;
        m.values[i][j]
    };
    // fall back to the grid mean when the conventional cell is unavailable
    let anchor = anchor_at(0.0, 1.0).unwrap_or_else(|| {
        let vals: Vec<f64> = m.values.iter().flatten().flatten().copied().collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    });
    let colors = color_indices(m, anchor);
    let w = LEFT + CELL * m.lambda_r.len() + 16;
    let h = TOP + CELL * m.lambda_p.len() + 40;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<text x="{LEFT}" y="20" font-size="14">{metric}</text>"#).unwrap();
    for (j, r) in m.lambda_r.iter().enumerate() {
        let x = LEFT + j * CELL + CELL / 2;
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{r:.1}</text>"#, TOP - 6).unwrap();
    }
    for (i, p) in m.lambda_p.iter().enumerate() {
        let y = TOP + i * CELL;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{p:.1}</text>"#, LEFT - 8, y + CELL / 2 + 4).unwrap();
        for (j, v) in m.values[i].iter().enumerate() {
            let x = LEFT + j * CELL;
            let fill = colors[i][j].map_or(MISSING, |k| PALETTE[k]);
            writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"/>"##
            )
            .unwrap();
            let label = match v {
                Some(v) if *p == 0.0 && m.lambda_r[j] == 0.0 => format!("Base {v:.3}"),
                Some(v) => format!("{v:.3}"),
                None => "n/a".into(),
            };
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            )
            .unwrap();
        }
    }
    let by = TOP + CELL * m.lambda_p.len() + 24;
    writeln!(s, r#"<text x="{LEFT}" y="{by}">rows: prompt weight, columns: response weight</text>"#).unwrap();
    s.push_str("</svg>\n");
    s
}

pub fn emit_heatmap(result: &SweepResult, metric: &str, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if result.cells.is_empty() {
        return Err(Error::Invalid("sweep result has no cells".into()));
    }
    let m = metric_matrix(result, metric)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("heatmap_{metric}.csv"));
    let svg = dir.join(format!("heatmap_{metric}.svg"));
    fs::write(&csv, heatmap_csv(&m)).map_err(|e| Error::io(&csv, e))?;
    fs::write(&svg, heatmap_svg(&m, metric)).map_err(|e| Error::io(&svg, e))?;
    Ok((csv, svg))
}

//! Report files: CSV tables, stats JSON and PNG figures. Every file carries the
//! configuration hash and seed that produced it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnalyticsError, ConfusionMatrix};
use crate::saliency::SaliencySource;
use crate::stimuli::ExpressionLabel;
use crate::training::PairSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub pair: PairSpec,
    pub method: SaliencySource,
    pub dice: f64,
}

fn write_text(path: &Path, body: &str) -> Result<(), AnalyticsError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(body.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Comment line, header of predicted labels, then one row of counts per true label.
pub fn write_confusion_csv(
    path: impl AsRef<Path>,
    m: &ConfusionMatrix,
    prov: &Provenance,
) -> Result<(), AnalyticsError> {
    let mut s = prov.comment();
    s.push_str("true\\predicted");
    for l in ExpressionLabel::ALL {
        s.push_str(&format!(",{l}"));
    }
    s.push('\n');
    for (l, row) in ExpressionLabel::ALL.iter().zip(&m.counts) {
        s.push_str(&l.to_string());
        for c in row {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    write_text(path.as_ref(), &s)
}

/// Reads back the counts written by [`write_confusion_csv`].
pub fn read_confusion_csv(path: impl AsRef<Path>) -> Result<ConfusionMatrix, AnalyticsError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |d: &str| AnalyticsError::Shape(format!("confusion csv: {d}"));
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    if rows.len() != 8 {
        return Err(bad("expected 8 rows"));
    }
    let mut m = ConfusionMatrix::default();
    for (i, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').skip(1).collect();
        if cells.len() != 8 {
            return Err(bad("expected 8 columns"));
        }
        for (j, c) in cells.iter().enumerate() {
            m.counts[i][j] = c.trim().parse().map_err(|_| bad("non-integer count"))?;
        }
    }
    Ok(m)
}

pub fn write_dice_csv(
    path: impl AsRef<Path>,
    rows: &[DiceRow],
    prov: &Provenance,
) -> Result<(), AnalyticsError> {
    let mut s = prov.comment();
    s.push_str("pair,method,dice\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.pair, r.method.name(), r.dice));
    }
    write_text(path.as_ref(), &s)
}

/// Pretty JSON of `body` with a `provenance` field added at the top level.
pub fn write_stats_json(
    path: impl AsRef<Path>,
    body: &serde_json::Value,
    prov: &Provenance,
) -> Result<(), AnalyticsError> {
    let mut obj = match body {
        serde_json::Value::Object(o) => o.clone(),
        other => {
            let mut o = serde_json::Map::new();
            o.insert("result".into(), other.clone());
            o
        }
    };
    obj.insert("provenance".into(), serde_json::to_value(prov)?);
    write_text(path.as_ref(), &serde_json::to_string_pretty(&obj)?)
}

/// RGB raster with a `provenance` text chunk.
fn write_png(
    path: &Path,
    w: u32,
    h: u32,
    rgb: &[u8],
    prov: &Provenance,
    extra: &str,
) -> Result<(), AnalyticsError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("provenance".into(), serde_json::to_string(prov)?)?;
    if !extra.is_empty() {
        enc.add_text_chunk("description".into(), extra.into())?;
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    writer.finish()?;
    Ok(())
}

/// White to dark blue.
fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    [lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)]
}

const CELL: u32 = 32;

/// 8x8 heatmap of the square-rooted row-normalized matrix.
pub fn write_confusion_heatmap(
    path: impl AsRef<Path>,
    m: &ConfusionMatrix,
    prov: &Provenance,
) -> Result<(), AnalyticsError> {
    let side = 8 * CELL;
    let vals = m.sqrt_display();
    let mut rgb = Vec::with_capacity((side * side * 3) as usize);
    for y in 0..side {
        for x in 0..side {
            let (i, j) = ((y / CELL) as usize, (x / CELL) as usize);
            let border = x % CELL == 0 || y % CELL == 0;
            rgb.extend_from_slice(&if border {
                [200, 200, 200]
            } else {
                heat_color(vals[i][j])
            });
        }
    }
    let labels = ExpressionLabel::ALL.map(|l| l.to_string()).join(",");
    write_png(
        path.as_ref(),
        side,
        side,
        &rgb,
        prov,
        &format!("rows=true cols=predicted order={labels}"),
    )
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box plots on a shared vertical axis: box from the first to third quartile,
/// median line, whiskers to the extremes.
pub fn write_box_plot(
    path: impl AsRef<Path>,
    groups: &[(String, Vec<f64>)],
    prov: &Provenance,
) -> Result<(), AnalyticsError> {
    if groups.is_empty() || groups.iter().any(|(_, v)| v.is_empty()) {
        return Err(AnalyticsError::Empty(
            "box plot needs non-empty groups".into(),
        ));
    }
    let (col, h) = (96u32, 240u32);
    let w = col * groups.len() as u32;
    let all = groups.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let row_of = |v: f64| -> u32 {
        let t = (v - lo) / span;
        let pad = 12.0;
        (h as f64 - pad - t * (h as f64 - 2.0 * pad)).round() as u32
    };
    let mut rgb = vec![255u8; (w * h * 3) as usize];
    let mut put = |x: u32, y: u32, c: [u8; 3]| {
        if x < w && y < h {
            let i = ((y * w + x) * 3) as usize;
            rgb[i..i + 3].copy_from_slice(&c);
        }
    };
    for (g, (_, vals)) in groups.iter().enumerate() {
        let mut s = vals.clone();
        s.sort_by(f64::total_cmp);
        let [mn, q1, med, q3, mx] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|p| row_of(quantile(&s, p)));
        let (x0, x1, xc) = (
            g as u32 * col + 20,
            g as u32 * col + col - 20,
            g as u32 * col + col / 2,
        );
        for y in mx..=mn {
            put(xc, y, [60, 60, 60]);
        }
        for y in q3..=q1 {
            for x in x0..=x1 {
                let edge = x == x0 || x == x1 || y == q3 || y == q1;
                put(x, y, if edge { [30, 30, 30] } else { [158, 202, 225] });
            }
        }
        for x in x0..=x1 {
            put(x, med, [200, 30, 30]);
        }
        for x in xc - 8..=xc + 8 {
            put(x, mn, [60, 60, 60]);
            put(x, mx, [60, 60, 60]);
        }
    }
    let names: Vec<&str> = groups.iter().map(|(n, _)| n.as_str()).collect();
    write_png(
        path.as_ref(),
        w,
        h,
        &rgb,
        prov,
        &format!("groups={} range=[{lo},{hi}]", names.join(",")),
    )
}

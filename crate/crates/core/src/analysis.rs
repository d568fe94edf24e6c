//! Expert-utilization matrices, encoder/decoder overlap, checkpoint series,
//! and CSV/SVG heatmap export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{MoeModel, Side, Translator};
use crate::tasks::TaskId;

/// Gate mass per (row, expert) for one layer and side. Rows are labelled by
/// task key, or by pair when rows are resolved through a strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationMatrix {
    pub side: Side,
    pub layer: usize,
    pub rows: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl UtilizationMatrix {
    pub fn n_experts(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    /// Experts with nonzero gate mass in `row`.
    pub fn selected(&self, row: usize) -> BTreeSet<usize> {
        self.cells[row].iter().enumerate().filter(|(_, &g)| g > 0.0).map(|(e, _)| e).collect()
    }
}

/// One row per `(label, task)`: the routed gates scattered to their experts.
pub fn utilization(model: &MoeModel, layer: usize, side: Side, tasks: &[(String, TaskId)]) -> Result<UtilizationMatrix> {
    if !model.config().is_moe_layer(layer) || layer >= model.config().n_layers {
        return Err(Error::config(format!("layer {layer} of the {side} has no expert bank")));
    }
    let n = model.config().n_experts;
    let mut rows = Vec::with_capacity(tasks.len());
    let mut cells = Vec::with_capacity(tasks.len());
    for (label, task) in tasks {
        let r = model.route(layer, side, *task)?;
        let mut row = vec![0.0; n];
        for (e, g) in r.experts.iter().zip(r.gates) {
            row[*e] += g;
        }
        rows.push(label.clone());
        cells.push(row);
    }
    Ok(UtilizationMatrix { side, layer, rows, cells })
}

/// Every registry task, labelled by its key.
pub fn all_tasks(model: &MoeModel) -> Vec<(String, TaskId)> {
    model.registry().ids().map(|t| (model.registry().key(t).unwrap_or_default().to_string(), t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Experts shared by a row's encoder and decoder selections (0, 1 or 2).
    pub per_task: Vec<(String, usize)>,
    pub encoder_experts: BTreeSet<usize>,
    pub decoder_experts: BTreeSet<usize>,
    pub intersection: usize,
    pub jaccard: f64,
}

pub fn overlap_stats(enc: &UtilizationMatrix, dec: &UtilizationMatrix) -> Result<OverlapStats> {
    if enc.rows != dec.rows {
        return Err(Error::config("encoder and decoder matrices cover different rows"));
    }
    let mut per_task = Vec::new();
    let mut encoder_experts = BTreeSet::new();
    let mut decoder_experts = BTreeSet::new();
    for (i, label) in enc.rows.iter().enumerate() {
        let (a, b) = (enc.selected(i), dec.selected(i));
        per_task.push((label.clone(), a.intersection(&b).count()));
        encoder_experts.extend(a);
        decoder_experts.extend(b);
    }
    let intersection = encoder_experts.intersection(&decoder_experts).count();
    let union = encoder_experts.union(&decoder_experts).count();
    let jaccard = if union == 0 { 0.0 } else { intersection as f64 / union as f64 };
    Ok(OverlapStats {
        per_task,
        encoder_experts,
        decoder_experts,
        intersection,
        jaccard,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSeries {
    pub steps: Vec<u64>,
    pub matrices: Vec<UtilizationMatrix>,
    /// For each adjacent pair of snapshots, rows whose selected experts changed.
    pub changes: Vec<usize>,
}

/// Utilization at each checkpoint, ordered by training step. Rows are the
/// given task keys.
pub fn snapshot_series(paths: &[&Path], layer: usize, side: Side, task_keys: &[String]) -> Result<SnapshotSeries> {
    let mut snaps = Vec::new();
    for path in paths {
        let (model, state) = checkpoint::load_moe(path).map_err(|e| e.in_stage(format!("loading {}", path.display())))?;
        let tasks = task_keys
            .iter()
            .map(|k| {
                let id = model.registry().id(k).ok_or_else(|| Error::UnresolvedTask {
                    key: k.clone(),
                    reason: format!("not in the registry of {}", path.display()),
                })?;
                Ok((k.clone(), id))
            })
            .collect::<Result<Vec<_>>>()?;
        let step = state.map_or(0, |s| s.step);
        snaps.push((step, utilization(&model, layer, side, &tasks)?));
    }
    snaps.sort_by_key(|(s, _)| *s);
    let changes = snaps
        .windows(2)
        .map(|w| (0..w[0].1.rows.len()).filter(|&r| w[0].1.selected(r) != w[1].1.selected(r)).count())
        .collect();
    let (steps, matrices) = snaps.into_iter().unzip();
    Ok(SnapshotSeries { steps, matrices, changes })
}

pub fn to_csv(m: &UtilizationMatrix) -> String {
    let mut out = String::from("task");
    for e in 0..m.n_experts() {
        let _ = write!(out, ",{e}");
    }
    out.push('\n');
    for (label, row) in m.rows.iter().zip(&m.cells) {
        out.push_str(label);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses [`to_csv`] output back; side and layer are supplied by the caller.
pub fn from_csv(text: &str, side: Side, layer: usize) -> Result<UtilizationMatrix> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: "<csv>".into(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let width = header.split(',').count();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(i + 2, format!("{f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() + 1 != width {
            return Err(bad(i + 2, format!("expected {width} fields")));
        }
        rows.push(label);
        cells.push(values);
    }
    Ok(UtilizationMatrix { side, layer, rows, cells })
}

/// 0 maps to white, 1 to black.
pub fn gray_level(v: f64) -> u8 {
    (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8
}

const CELL: usize = 24;
const LEFT: usize = 90;
const TOP: usize = 40;

pub fn to_svg(m: &UtilizationMatrix) -> String {
    let (w, h) = (LEFT + CELL * m.n_experts() + 10, TOP + CELL * m.rows.len() + 10);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<text x=\"4\" y=\"14\">{} layer {}</text>", m.side, m.layer);
    for e in 0..m.n_experts() {
        let x = LEFT + e * CELL + CELL / 2;
        let _ = writeln!(s, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{e}</text>", TOP - 6);
    }
    for (r, (label, row)) in m.rows.iter().zip(&m.cells).enumerate() {
        let y = TOP + r * CELL;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", LEFT - 6, y + CELL / 2 + 4, escape(label));
        for (e, &v) in row.iter().enumerate() {
            let g = gray_level(v);
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({g},{g},{g})\" stroke=\"#999\"/>",
                LEFT + e * CELL
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn export_heatmap(m: &UtilizationMatrix, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ext, body) in [("csv", to_csv(m)), ("svg", to_svg(m))] {
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

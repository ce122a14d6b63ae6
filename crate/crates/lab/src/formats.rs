//! On-disk formats: dataset CSV and IDX, metrics CSV, checkpoints, reports
//! and slice grids.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file is a deterministic function of the values it holds.

use std::fs;
use std::path::Path;

use bsam_core::data::Provenance;
use bsam_core::probes::{LossSlice, SharpnessReport};
use bsam_core::train::EpochRecord;
use bsam_core::{Dataset, ParamVector, Segment, Tensor};

use crate::error::{LabError, Result};

pub const METRICS_HEADER: [&str; 13] = [
    "run_id",
    "seed",
    "epoch",
    "step",
    "lr",
    "rho_min",
    "train_loss",
    "test_loss",
    "test_acc",
    "grad_norm",
    "cos_g_gmin",
    "fwd_total",
    "bwd_total",
];

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub rho_min: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub grad_norm: f64,
    pub cos_g_gmin: Option<f64>,
    pub fwd_total: u64,
    pub bwd_total: u64,
}

impl MetricsRow {
    pub fn from_epoch(run_id: &str, seed: u64, r: &EpochRecord) -> Self {
        MetricsRow {
            run_id: run_id.to_string(),
            seed,
            epoch: r.epoch,
            step: r.step,
            lr: r.lr,
            rho_min: r.rho_min,
            train_loss: r.train_loss,
            test_loss: r.test_loss,
            test_acc: r.test_acc,
            grad_norm: r.grad_norm,
            cos_g_gmin: r.cos_g_gmin,
            fwd_total: r.fwd_total,
            bwd_total: r.bwd_total,
        }
    }

    fn fields(&self) -> [String; 13] {
        [
            self.run_id.clone(),
            self.seed.to_string(),
            self.epoch.to_string(),
            self.step.to_string(),
            self.lr.to_string(),
            self.rho_min.to_string(),
            self.train_loss.to_string(),
            opt(self.test_loss),
            opt(self.test_acc),
            self.grad_norm.to_string(),
            opt(self.cos_g_gmin),
            self.fwd_total.to_string(),
            self.bwd_total.to_string(),
        ]
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| LabError::Mismatch(format!("metrics encoding: {e}"));
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r.fields()).map_err(io)?;
    }
    w.into_inner().map_err(|e| LabError::Mismatch(format!("metrics encoding: {e}")))
}

fn parse_opt(s: &str) -> Option<f64> {
    if s.is_empty() {
        None
    } else {
        s.parse().ok()
    }
}

/// Reads a metrics file written by [`metrics_csv`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| LabError::format(path, 0, 0, e.to_string()))?;
    let header = r.headers().map_err(|e| LabError::format(path, 1, 0, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(LabError::format(path, 1, 0, "unexpected metrics header"));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| LabError::format(path, row, 0, e.to_string()))?;
        let num = |col: usize| -> Result<f64> {
            rec[col]
                .parse()
                .map_err(|_| LabError::format(path, row, col + 1, format!("bad number `{}`", &rec[col])))
        };
        let int = |col: usize| -> Result<u64> {
            rec[col]
                .parse()
                .map_err(|_| LabError::format(path, row, col + 1, format!("bad integer `{}`", &rec[col])))
        };
        rows.push(MetricsRow {
            run_id: rec[0].to_string(),
            seed: int(1)?,
            epoch: int(2)? as usize,
            step: int(3)? as usize,
            lr: num(4)?,
            rho_min: num(5)?,
            train_loss: num(6)?,
            test_loss: parse_opt(&rec[7]),
            test_acc: parse_opt(&rec[8]),
            grad_norm: num(9)?,
            cos_g_gmin: parse_opt(&rec[10]),
            fwd_total: int(11)?,
            bwd_total: int(12)?,
        });
    }
    Ok(rows)
}

/// Dataset CSV with header `f0,…,f{d−1},label`.
pub fn dataset_csv(data: &Dataset) -> Vec<u8> {
    let mut out = String::new();
    let d = data.dim();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..data.len() {
        for v in data.features().row(i) {
            out.push_str(&v.to_string());
            out.push(',');
        }
        out.push_str(&data.labels()[i].to_string());
        out.push('\n');
    }
    out.into_bytes()
}

pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| LabError::format(path, 0, 0, e.to_string()))?;
    let header = r.headers().map_err(|e| LabError::format(path, 1, 0, e.to_string()))?.clone();
    let d = header.len().saturating_sub(1);
    for (j, h) in header.iter().enumerate() {
        let want = if j == d { "label".to_string() } else { format!("f{j}") };
        if h != want {
            return Err(LabError::format(path, 1, j + 1, format!("expected header `{want}`, found `{h}`")));
        }
    }
    if d == 0 {
        return Err(LabError::format(path, 1, 1, "no feature columns"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| LabError::format(path, row, 0, e.to_string()))?;
        for j in 0..d {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| LabError::format(path, row, j + 1, format!("bad number `{}`", &rec[j])))?;
            if !v.is_finite() {
                return Err(LabError::format(path, row, j + 1, "non-finite feature"));
            }
            features.push(v);
        }
        let y: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| LabError::format(path, row, d + 1, format!("bad label `{}`", &rec[d])))?;
        if y >= classes {
            return Err(LabError::format(path, row, d + 1, format!("label {y} >= {classes} classes")));
        }
        labels.push(y);
    }
    let n = labels.len();
    let x = Tensor::matrix(n.max(1), d, if n == 0 { vec![0.0; d] } else { features })?;
    Ok(Dataset::new(x, labels, classes, Provenance::Csv)?)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LabError::format(path, 0, at, "truncated header"))
}

/// Reads an IDX3 image file and IDX1 label file. Pixels scale to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| LabError::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| LabError::io(labels, e))?;
    if be_u32(&img, 0, images)? != 0x0803 {
        return Err(LabError::format(images, 0, 0, "bad IDX3 magic"));
    }
    if be_u32(&lab, 0, labels)? != 0x0801 {
        return Err(LabError::format(labels, 0, 0, "bad IDX1 magic"));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let (rows, cols) = (be_u32(&img, 8, images)? as usize, be_u32(&img, 12, images)? as usize);
    if be_u32(&lab, 4, labels)? as usize != n {
        return Err(LabError::format(labels, 0, 4, "label count differs from image count"));
    }
    let d = rows * cols;
    let pixels = img
        .get(16..16 + n * d)
        .ok_or_else(|| LabError::format(images, 0, 16, "truncated pixel data"))?;
    let ys = lab
        .get(8..8 + n)
        .ok_or_else(|| LabError::format(labels, 0, 8, "truncated label data"))?;
    let mut y = Vec::with_capacity(n);
    for (i, &b) in ys.iter().enumerate() {
        if b as usize >= classes {
            return Err(LabError::format(labels, i + 1, 0, format!("label {b} >= {classes} classes")));
        }
        y.push(b as usize);
    }
    let x = Tensor::matrix(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Ok(Dataset::new(x, y, classes, Provenance::Idx)?)
}

/// Parameter checkpoint as plain text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run_id: String,
    pub seed: u64,
    pub model: String,
    pub params: ParamVector,
}

pub fn checkpoint_text(c: &Checkpoint) -> String {
    let mut s = String::from("# bsam checkpoint\n");
    s.push_str(&format!("run_id = {}\nseed = {}\nmodel = {}\n", c.run_id, c.seed, c.model));
    for seg in c.params.layout() {
        let shape: Vec<String> = seg.shape.iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("segment = {} {}\n", seg.name, shape.join("x")));
    }
    s.push_str("values\n");
    for v in c.params.values() {
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Checkpoint> {
    let bad = |line: usize, msg: &str| LabError::format(path, line, 0, msg.to_string());
    let (mut run_id, mut seed, mut model) = (None, None, None);
    let mut segments: Vec<(String, Vec<usize>)> = Vec::new();
    let mut values = Vec::new();
    let mut in_values = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if in_values {
            values.push(l.parse::<f64>().map_err(|_| bad(line, "bad value"))?);
            continue;
        }
        if l == "values" {
            in_values = true;
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| bad(line, "expected `key = value`"))?;
        let v = v.trim();
        match k.trim() {
            "run_id" => run_id = Some(v.to_string()),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad(line, "bad seed"))?),
            "model" => model = Some(v.to_string()),
            "segment" => {
                let (name, shape) = v.split_once(' ').ok_or_else(|| bad(line, "bad segment"))?;
                let dims = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(line, "bad segment shape"))?;
                segments.push((name.to_string(), dims));
            }
            _ => return Err(bad(line, "unknown checkpoint key")),
        }
    }
    let mut layout = Vec::new();
    let mut offset = 0;
    for (name, shape) in segments {
        let len: usize = shape.iter().product();
        layout.push(Segment { name, offset, shape });
        offset += len;
    }
    let params = ParamVector::new(values, layout).map_err(|e| bad(0, &e.to_string()))?;
    Ok(Checkpoint {
        run_id: run_id.ok_or_else(|| bad(0, "missing run_id"))?,
        seed: seed.ok_or_else(|| bad(0, "missing seed"))?,
        model: model.ok_or_else(|| bad(0, "missing model"))?,
        params,
    })
}

/// Flat `key = value` report.
pub fn report_text(run_id: &str, seed: u64, variant: &str, r: &SharpnessReport, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("run_id", run_id.to_string());
    kv("seed", seed.to_string());
    kv("variant", variant.to_string());
    kv("rho", r.rho_used.to_string());
    kv("probe_loss", r.loss.to_string());
    kv("max_s", r.max_s.to_string());
    kv("min_s", r.min_s.to_string());
    kv("bil_s", r.bil_s.to_string());
    kv("degenerate", r.degenerate.to_string());
    for (i, (l, res)) in r.eigenvalues.iter().zip(&r.eig_residuals).enumerate() {
        kv(&format!("lambda_{}", i + 1), l.to_string());
        kv(&format!("lambda_{}_residual", i + 1), res.to_string());
    }
    for (k, v) in extra {
        kv(k, v.clone());
    }
    s
}

/// Parses a flat `key = value` report into ordered pairs.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Tab-separated grid; the first row holds β coordinates, the first column α.
pub fn slice_tsv(s: &LossSlice) -> String {
    let mut out = String::from("alpha\\beta");
    for b in &s.coords {
        out.push('\t');
        out.push_str(&b.to_string());
    }
    out.push('\n');
    let g = s.grid();
    for (i, a) in s.coords.iter().enumerate() {
        out.push_str(&a.to_string());
        for j in 0..g {
            out.push('\t');
            out.push_str(&s.at(i, j).to_string());
        }
        out.push('\n');
    }
    out
}

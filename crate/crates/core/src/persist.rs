//! On-disk artifacts: checkpoints, logit dumps, reports and surface plots.
//!
//! A checkpoint is one line of compact UTF-8 JSON (architecture preset, seed,
//! and `{name, shape, dtype, byte_offset, byte_len}` per tensor, offsets
//! relative to the blob), a `\n`, then the raw little-endian f32 blob.
//! Every file is written through a temporary sibling and renamed into place.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::{NamedTensor, Network, WeightVector};
use crate::tensor::Tensor;

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub arch: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub seed: u64,
    pub weights: WeightVector,
}

pub fn encode_checkpoint(arch: &str, seed: u64, w: &WeightVector) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let entries = w
        .entries
        .iter()
        .map(|e| {
            let len = 4 * e.data.len() as u64;
            let m = ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: "f32".into(),
                byte_offset: offset,
                byte_len: len,
            };
            offset += len;
            m
        })
        .collect();
    let manifest = Manifest {
        arch: arch.to_string(),
        seed,
        entries,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    for e in &w.entries {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("manifest line is not terminated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let blob = &bytes[nl + 1..];
    let mut expected = 0u64;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "`{}` has unknown dtype `{}`",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != 4 * numel as u64 || e.byte_offset != expected {
            return Err(Error::Checkpoint(format!(
                "`{}`: byte range {}+{} does not fit shape {:?}",
                e.name, e.byte_offset, e.byte_len, e.shape
            )));
        }
        expected += e.byte_len;
        let start = e.byte_offset as usize;
        let raw = blob
            .get(start..start + e.byte_len as usize)
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "manifest/blob length mismatch: `{}` needs bytes up to {}, blob has {}",
                    e.name,
                    start + e.byte_len as usize,
                    blob.len()
                ))
            })?;
        entries.push(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        });
    }
    if blob.len() as u64 != expected {
        return Err(Error::Checkpoint(format!(
            "manifest/blob length mismatch: manifest covers {expected} bytes, blob has {}",
            blob.len()
        )));
    }
    Ok(Checkpoint {
        arch: manifest.arch,
        seed: manifest.seed,
        weights: WeightVector { entries },
    })
}

pub fn write_checkpoint(path: &Path, arch: &str, seed: u64, w: &WeightVector) -> Result<()> {
    atomic_write(path, &encode_checkpoint(arch, seed, w)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let arch = net
        .arch()
        .ok_or_else(|| Error::Checkpoint("only preset networks can be checkpointed".into()))?;
    write_checkpoint(path, arch, net.seed(), &net.weights())
}

/// Rebuilds the preset network named in the manifest and loads its weights.
pub fn load_network(path: &Path) -> Result<Network> {
    let ck = read_checkpoint(path)?;
    let mut net = Network::from_preset(&ck.arch, ck.seed)?;
    net.load_weights(&ck.weights)?;
    Ok(net)
}

/// Metadata stored next to a logit dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSidecar {
    pub model_id: String,
    pub split: String,
    pub seed: u64,
    pub rows: usize,
    pub classes: usize,
    pub tau_note: String,
}

/// Sidecar path for a dump: the CSV path with its extension replaced by `json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn logits_csv(logits: &Tensor, labels: &[usize]) -> Result<String> {
    let (n, c) = logits.as_matrix();
    if labels.len() != n {
        return Err(Error::shape("logit dump", logits.shape(), &[labels.len()]));
    }
    let mut s = String::from("example_id,label");
    for j in 0..c {
        s.push_str(&format!(",z_{j}"));
    }
    s.push('\n');
    for (i, row) in logits.data().chunks(c).enumerate() {
        s.push_str(&format!("{i},{}", labels[i]));
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_logit_dump(
    path: &Path,
    logits: &Tensor,
    labels: &[usize],
    sidecar: &LogitSidecar,
) -> Result<()> {
    atomic_write(path, logits_csv(logits, labels)?.as_bytes())?;
    atomic_write(
        &sidecar_path(path),
        (serde_json::to_string_pretty(sidecar)? + "\n").as_bytes(),
    )
}

pub fn read_logit_dump(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let text = read_text(path)?;
    let bad = |line: usize, why: String| Error::Parse {
        path: path.to_path_buf(),
        offset: line as u64,
        reason: why,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(0, "empty file".into()))?;
    let c = header.split(',').count().saturating_sub(2);
    if !header.starts_with("example_id,label") || c == 0 {
        return Err(bad(0, "bad header".into()));
    }
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c + 2 {
            return Err(bad(
                k + 1,
                format!("expected {} fields, found {}", c + 2, fields.len()),
            ));
        }
        labels.push(
            fields[1]
                .parse()
                .map_err(|e| bad(k + 1, format!("label: {e}")))?,
        );
        for f in &fields[2..] {
            data.push(
                f.parse::<f32>()
                    .map_err(|e| bad(k + 1, format!("logit: {e}")))?,
            );
        }
    }
    Ok((Tensor::new(vec![labels.len(), c], data)?, labels))
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.csv`.
pub fn write_report(dir: &Path, name: &str, report: &MetricsReport) -> Result<()> {
    atomic_write(
        &dir.join(format!("{name}.json")),
        report.to_json()?.as_bytes(),
    )?;
    atomic_write(&dir.join(format!("{name}.csv")), report.to_csv().as_bytes())
}

/// Any serializable artifact as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(
        path,
        (serde_json::to_string_pretty(value)? + "\n").as_bytes(),
    )
}

/// Every metrics report (`*.json` parsing as a [`MetricsReport`]) in `dir`,
/// keyed by file stem in name order.
pub fn collect_reports(dir: &Path) -> Result<Vec<(String, MetricsReport)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        if let Ok(r) = serde_json::from_str::<MetricsReport>(&read_text(&p)?) {
            if !r.metrics.is_empty() {
                out.push((
                    p.file_stem()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                    r,
                ));
            }
        }
    }
    Ok(out)
}

/// Summary table over several reports: one row per report, one column per metric.
pub fn summary_csv(reports: &[(String, MetricsReport)]) -> String {
    let names: BTreeSet<&String> = reports.iter().flat_map(|(_, r)| r.metrics.keys()).collect();
    let mut s = String::from("report");
    for n in &names {
        s.push_str(&format!(",{n}"));
    }
    s.push('\n');
    for (stem, r) in reports {
        s.push_str(stem);
        for n in &names {
            s.push(',');
            if let Some(v) = r.get(n) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

pub fn summary_json(reports: &[(String, MetricsReport)]) -> Result<String> {
    let map: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|(k, r)| Ok((k.clone(), serde_json::to_value(&r.metrics)?)))
        .collect::<Result<_>>()?;
    Ok(serde_json::to_string_pretty(&map)? + "\n")
}

/// Surface CSV rows, parsed back into a dense grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceCsv {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `loss[j][i]` at `(a[i], b[j])`.
    pub loss: Vec<Vec<f64>>,
}

pub fn parse_surface_csv(path: &Path) -> Result<SurfaceCsv> {
    let text = read_text(path)?;
    let bad = |line: usize, why: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: line as u64,
        reason: why.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some("a,b,loss,agreement") {
        return Err(bad(0, "expected header `a,b,loss,agreement`"));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let f: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(k + 1, "non-numeric field"))?;
        if f.len() != 4 || f.iter().any(|v| !v.is_finite()) {
            return Err(bad(k + 1, "expected four finite fields"));
        }
        rows.push((f[0], f[1], f[2]));
    }
    let mut a: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mut b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    for v in [&mut a, &mut b] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    if a.is_empty() || a.len() * b.len() != rows.len() {
        return Err(bad(0, "rows do not form a complete grid"));
    }
    let mut loss = vec![vec![f64::NAN; a.len()]; b.len()];
    for (x, y, l) in rows {
        let i = a.iter().position(|&v| v == x).expect("collected above");
        let j = b.iter().position(|&v| v == y).expect("collected above");
        if !loss[j][i].is_nan() {
            return Err(bad(0, "duplicate grid node"));
        }
        loss[j][i] = l;
    }
    Ok(SurfaceCsv { a, b, loss })
}

fn ramp(t: f64) -> String {
    // Dark blue through teal to yellow.
    const STOPS: [(f64, f64, f64); 3] = [
        (38.0, 24.0, 100.0),
        (33.0, 145.0, 140.0),
        (250.0, 230.0, 35.0),
    ];
    let t = t.clamp(0.0, 1.0) * 2.0;
    let k = (t.floor() as usize).min(1);
    let f = t - k as f64;
    let (p, q) = (STOPS[k], STOPS[k + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(p.0, q.0),
        mix(p.1, q.1),
        mix(p.2, q.2)
    )
}

/// SVG heatmap of a surface CSV with the anchors marked. The final-student
/// anchor is read from `<csv>.json` when that header file exists.
pub fn render_surface_svg(grid: &SurfaceCsv, final_anchor: Option<[f64; 2]>) -> String {
    const CELL: f64 = 20.0;
    const MARGIN: f64 = 40.0;
    let (na, nb) = (grid.a.len(), grid.b.len());
    let all = grid.loss.iter().flatten();
    let min = all.clone().copied().fold(f64::INFINITY, f64::min);
    let max = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let (w, h) = (
        2.0 * MARGIN + CELL * na as f64,
        2.0 * MARGIN + CELL * nb as f64,
    );
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <!-- distilab-surface min={min} max={max} cells={} -->\n",
        na * nb
    );
    for j in 0..nb {
        for i in 0..na {
            let x = MARGIN + CELL * i as f64;
            // b grows upward.
            let y = MARGIN + CELL * (nb - 1 - j) as f64;
            let v = grid.loss[j][i];
            s.push_str(&format!(
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"><title>a={} b={} loss={v}</title></rect>\n",
                ramp((v - min) / span),
                grid.a[i],
                grid.b[j]
            ));
        }
    }
    let to_px = |a: f64, b: f64| -> Option<(f64, f64)> {
        let step = |v: &[f64]| if v.len() > 1 { v[1] - v[0] } else { 1.0 };
        let (sa, sb) = (step(&grid.a), step(&grid.b));
        let x = MARGIN + CELL * ((a - grid.a[0]) / sa + 0.5);
        let y = MARGIN + CELL * (nb as f64 - 0.5 - (b - grid.b[0]) / sb);
        (x.is_finite() && y.is_finite()).then_some((x, y))
    };
    let mut anchors = vec![("teacher", [0.0, 0.0]), ("init", [1.0, 0.0])];
    if let Some(f) = final_anchor {
        anchors.push(("final", f));
    }
    for (name, [a, b]) in anchors {
        if let Some((x, y)) = to_px(a, b) {
            s.push_str(&format!(
                "<circle class=\"anchor\" data-name=\"{name}\" data-a=\"{a}\" data-b=\"{b}\" cx=\"{x}\" cy=\"{y}\" r=\"5\" fill=\"white\" stroke=\"black\"/>\n\
                 <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{name}</text>\n",
                x + 7.0,
                y - 7.0
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot_surface(csv_in: &Path, svg_out: &Path) -> Result<()> {
    let grid = parse_surface_csv(csv_in)?;
    let header = csv_in.with_extension("json");
    let final_anchor = if header.exists() {
        let v: serde_json::Value = serde_json::from_str(&read_text(&header)?)?;
        v["anchors"]["final"]
            .as_array()
            .and_then(|p| Some([p.first()?.as_f64()?, p.get(1)?.as_f64()?]))
    } else {
        None
    };
    atomic_write(svg_out, render_surface_svg(&grid, final_anchor).as_bytes())
}

/// `(min, max)` from the metadata comment of a rendered surface.
pub fn svg_scale(svg: &str) -> Option<(f64, f64)> {
    let line = svg.lines().find(|l| l.contains("distilab-surface"))?;
    let field = |key: &str| -> Option<f64> {
        let rest = &line[line.find(key)? + key.len()..];
        rest.split_whitespace().next()?.parse().ok()
    };
    Some((field("min=")?, field("max=")?))
}

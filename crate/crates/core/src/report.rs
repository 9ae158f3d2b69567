//! Run artifacts: CSV tables, a JSON manifest tying every emitted number to
//! the config hash and seed that produced it, and optional static SVG plots.
//! File names embed the config hash; identical config and seed produce
//! byte-identical metric files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{BenchRow, TIMING_CSV_HEADER};
use crate::error::{Error, Result};
use crate::shard::ShardBenchRow;
use crate::train::TrainReport;
use crate::verify::Check;

/// First 12 hex digits of the SHA-256 of the canonical config serialization.
pub fn config_hash(serialized_config: &str) -> String {
    let mut h = Sha256::new();
    h.update(serialized_config.as_bytes());
    let digest = h.finalize();
    digest.iter().take(6).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HostInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
}

impl HostInfo {
    pub fn current() -> Self {
        HostInfo {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub precision: String,
    pub host: HostInfo,
}

impl Manifest {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: u64, precision: &str) -> Self {
        let canonical = serde_json::to_string(&config).expect("config serializes");
        Manifest {
            subcommand: subcommand.to_string(),
            config_hash: config_hash(&canonical),
            config,
            seed,
            precision: precision.to_string(),
            host: HostInfo::current(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub header: String,
    pub rows: Vec<String>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.header.len() + self.rows.len() * 32);
        out.push_str(&self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct Plot {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub log_log: bool,
    /// (series name, points)
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

/// Everything a run emits.
pub struct Report {
    pub manifest: Manifest,
    pub tables: Vec<Table>,
    pub plots: Vec<Plot>,
}

impl Report {
    pub fn new(manifest: Manifest) -> Self {
        Report { manifest, tables: Vec::new(), plots: Vec::new() }
    }

    pub fn add_timing_rows(&mut self, name: &str, rows: &[BenchRow]) {
        self.tables.push(Table {
            name: name.to_string(),
            header: TIMING_CSV_HEADER.to_string(),
            rows: rows
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{:.6},{:.6},{:.6}",
                        r.variant, r.t, r.n_shards, r.median_ms, r.iqr_ms, r.slope
                    )
                })
                .collect(),
        });
    }

    pub fn add_shard_rows(&mut self, name: &str, rows: &[ShardBenchRow]) {
        self.tables.push(Table {
            name: name.to_string(),
            header: "variant,T,n_shards,mean_ms,std_ms".to_string(),
            rows: rows
                .iter()
                .map(|r| format!("{},{},{},{:.6},{:.6}", r.variant, r.t, r.n_shards, r.mean_ms, r.std_ms))
                .collect(),
        });
    }

    pub fn add_train_report(&mut self, name: &str, tr: &TrainReport) {
        self.tables.push(Table {
            name: name.to_string(),
            header: "stage,step,loss,accuracy".to_string(),
            rows: tr
                .points
                .iter()
                .map(|p| format!("{},{},{},{}", p.stage, p.step, p.loss, p.accuracy))
                .collect(),
        });
    }

    pub fn add_checks(&mut self, name: &str, checks: &[Check]) {
        self.tables.push(Table {
            name: name.to_string(),
            header: "suite,check,tolerance,observed,pass".to_string(),
            rows: checks
                .iter()
                .map(|c| {
                    format!("{},{},{},{},{}", c.suite, c.name, c.tolerance, c.observed, c.pass)
                })
                .collect(),
        });
    }

    pub fn add_loss_plot(&mut self, tr: &TrainReport) {
        let pts: Vec<(f64, f64)> = tr
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64, p.loss))
            .collect();
        let acc: Vec<(f64, f64)> = tr
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64, p.accuracy))
            .collect();
        self.plots.push(Plot {
            name: "loss_curve".into(),
            x_label: "eval point".into(),
            y_label: "value".into(),
            log_log: false,
            series: vec![("loss".into(), pts), ("accuracy".into(), acc)],
        });
    }

    pub fn add_scaling_plot(&mut self, rows: &[BenchRow]) {
        let mut plot = Plot {
            name: "time_vs_t".into(),
            x_label: "T".into(),
            y_label: "median ms".into(),
            log_log: true,
            series: Vec::new(),
        };
        for r in rows {
            match plot.series.iter_mut().find(|(n, _)| n == &r.variant) {
                Some((_, pts)) => pts.push((r.t as f64, r.median_ms)),
                None => plot.series.push((r.variant.clone(), vec![(r.t as f64, r.median_ms)])),
            }
        }
        self.plots.push(plot);
    }

    /// Write all files into `dir`; names embed the config hash. An empty
    /// metric set still writes the manifest.
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))?;
        let hash = &self.manifest.config_hash;
        let mut written = Vec::new();

        let manifest_path = dir.join(format!("manifest_{hash}.json"));
        let manifest_json =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, manifest_json)?;
        written.push(manifest_path);

        for table in &self.tables {
            let path = dir.join(format!("{}_{hash}.csv", table.name));
            std::fs::write(&path, table.to_csv())?;
            written.push(path);
        }
        for plot in &self.plots {
            let path = dir.join(format!("{}_{hash}.svg", plot.name));
            std::fs::write(&path, render_svg(plot))?;
            written.push(path);
        }
        Ok(written)
    }
}

// ----- minimal SVG line plots ---------------------------------------------------

const PALETTE: [&str; 8] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn render_svg(plot: &Plot) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 140.0, 30.0, 45.0);
    let tx = |v: f64| if plot.log_log { v.max(1e-12).ln() } else { v };

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (_, pts) in &plot.series {
        for &(x, y) in pts {
            xs.push(tx(x));
            ys.push(tx(y));
        }
    }
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let sx = |v: f64| ml + (tx(v) - x0) / (x1 - x0).max(1e-12) * (w - ml - mr);
    let sy = |v: f64| h - mb - (tx(v) - y0) / (y1 - y0).max(1e-12) * (h - mt - mb);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <text x=\"{2}\" y=\"{3}\" text-anchor=\"middle\">{4}{5}</text>\n\
         <text x=\"14\" y=\"{6}\" transform=\"rotate(-90 14 {6})\" text-anchor=\"middle\">{7}{5}</text>\n",
        h - mb,
        w - mr,
        (ml + w - mr) / 2.0,
        h - 10.0,
        plot.x_label,
        if plot.log_log { " (log)" } else { "" },
        (mt + h - mb) / 2.0,
        plot.y_label,
    );
    for (i, (name, pts)) in plot.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            );
        }
        let ly = mt + 16.0 * i as f64;
        let _ = write!(
            svg,
            "<rect x=\"{0}\" y=\"{1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{2}\" y=\"{3}\">{name}</text>\n",
            w - mr + 10.0,
            ly,
            w - mr + 24.0,
            ly + 9.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(vs: &[f64]) -> (f64, f64) {
    let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash("{\"d\":8}");
        let b = config_hash("{\"d\":8}");
        let c = config_hash("{\"d\":9}");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn timing_header_is_verbatim() {
        assert_eq!(TIMING_CSV_HEADER, "variant,T,n_shards,median_ms,iqr_ms,slope");
    }

    #[test]
    fn empty_report_emits_manifest_only() {
        let dir = std::env::temp_dir().join(format!("ttt-lab-report-{}", std::process::id()));
        let manifest = Manifest::new("bench", serde_json::json!({"x": 1}), 7, "f64");
        let report = Report::new(manifest);
        let files = report.emit(&dir).unwrap();
        assert_eq!(files.len(), 1);
        assert!(files[0].file_name().unwrap().to_string_lossy().starts_with("manifest_"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identical_runs_write_identical_bytes() {
        let base = std::env::temp_dir().join(format!("ttt-lab-det-{}", std::process::id()));
        let mk = |sub: &Path| {
            let manifest = Manifest::new("train", serde_json::json!({"seed": 3}), 3, "f64");
            let mut report = Report::new(manifest);
            report.tables.push(Table {
                name: "losses".into(),
                header: "step,loss".into(),
                rows: vec!["0,1.5".into(), "1,0.75".into()],
            });
            report.emit(sub).unwrap()
        };
        let f1 = mk(&base.join("a"));
        let f2 = mk(&base.join("b"));
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        std::fs::remove_dir_all(&base).ok();
    }

    #[test]
    fn svg_plot_renders_all_series() {
        let plot = Plot {
            name: "p".into(),
            x_label: "T".into(),
            y_label: "ms".into(),
            log_log: true,
            series: vec![
                ("a".into(), vec![(256.0, 1.0), (512.0, 2.0)]),
                ("b".into(), vec![(256.0, 3.0), (512.0, 12.0)]),
            ],
        };
        let svg = render_svg(&plot);
        assert!(svg.contains("<svg") && svg.contains("polyline"));
        assert!(svg.contains(">a</text>") && svg.contains(">b</text>"));
    }
}

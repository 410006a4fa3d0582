//! Metrics stream and export.
//!
//! A run writes `metrics.csv`: the config as `# ` comment lines, then the
//! column header, then one row per logging interval. Export strips the
//! comments, drops rows that do not parse, and writes a summary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "epoch,iter,loss_m,loss_c,loss_p,total,patch_entropy,class_entropy,m_rec,m_cl,lr,seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EXPORT_FILE: &str = "metrics_export.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    /// 1-based global iteration.
    pub iter: u64,
    pub loss_m: f32,
    pub loss_c: f32,
    pub loss_p: f32,
    pub total: f32,
    pub patch_entropy: f64,
    pub class_entropy: f64,
    pub m_rec: f64,
    pub m_cl: f64,
    pub lr: f32,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.iter,
            self.loss_m,
            self.loss_c,
            self.loss_p,
            self.total,
            self.patch_entropy,
            self.class_entropy,
            self.m_rec,
            self.m_cl,
            self.lr,
            self.seconds
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return None;
        }
        let row = Self {
            epoch: f[0].parse().ok()?,
            iter: f[1].parse().ok()?,
            loss_m: f[2].parse().ok()?,
            loss_c: f[3].parse().ok()?,
            loss_p: f[4].parse().ok()?,
            total: f[5].parse().ok()?,
            patch_entropy: f[6].parse().ok()?,
            class_entropy: f[7].parse().ok()?,
            m_rec: f[8].parse().ok()?,
            m_cl: f[9].parse().ok()?,
            lr: f[10].parse().ok()?,
            seconds: f[11].parse().ok()?,
        };
        Some(row)
    }

    /// The row without its wall-clock column, for run-to-run comparison.
    pub fn without_time(&self) -> String {
        let s = self.to_csv();
        s[..s.rfind(',').expect("12 columns")].to_string()
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates `dir/metrics.csv` with the config header, or appends to an
    /// existing one when `resume` is set.
    pub fn open(dir: &Path, config_toml: &str, resume: bool) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let file = if resume && path.is_file() {
            OpenOptions::new().append(true).open(&path)?
        } else {
            let mut f = File::create(&path)?;
            for line in config_toml.lines() {
                writeln!(f, "# {line}")?;
            }
            writeln!(f, "{HEADER}")?;
            f
        };
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Data rows of a metrics file and the number of lines that failed to parse.
pub fn read_metrics(path: &Path) -> Result<(Vec<MetricsRow>, usize)> {
    let text = fs::read_to_string(path).map_err(|_| Error::DataMissing(path.to_path_buf()))?;
    let mut rows = Vec::new();
    let mut bad = 0;
    for line in text.lines() {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') || l == HEADER {
            continue;
        }
        match MetricsRow::parse(l) {
            Some(r) => rows.push(r),
            None => bad += 1,
        }
    }
    Ok((rows, bad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub rows: usize,
    pub skipped: usize,
    pub last: Option<MetricsRow>,
    pub min_patch_entropy: Option<f64>,
    pub min_class_entropy: Option<f64>,
    pub lr_first_last: Option<(f32, f32)>,
    pub m_rec_first_last: Option<(f64, f64)>,
    pub m_cl_first_last: Option<(f64, f64)>,
}

impl MetricsSummary {
    pub fn from_rows(rows: &[MetricsRow], skipped: usize) -> Self {
        let min = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).reduce(f64::min);
        let ends = |f: fn(&MetricsRow) -> f64| Some((f(rows.first()?), f(rows.last()?)));
        Self {
            rows: rows.len(),
            skipped,
            last: rows.last().cloned(),
            min_patch_entropy: min(|r| r.patch_entropy),
            min_class_entropy: min(|r| r.class_entropy),
            lr_first_last: rows.first().zip(rows.last()).map(|(a, b)| (a.lr, b.lr)),
            m_rec_first_last: ends(|r| r.m_rec),
            m_cl_first_last: ends(|r| r.m_cl),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("rows: {}\nskipped_rows: {}\n", self.rows, self.skipped);
        if let Some(r) = &self.last {
            s += &format!(
                "final_epoch: {}\nfinal_iter: {}\nfinal_loss_m: {}\nfinal_loss_c: {}\nfinal_loss_p: {}\nfinal_total: {}\n",
                r.epoch, r.iter, r.loss_m, r.loss_c, r.loss_p, r.total
            );
        }
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        s += &format!("min_patch_entropy: {}\n", opt(self.min_patch_entropy));
        s += &format!("min_class_entropy: {}\n", opt(self.min_class_entropy));
        if let Some((a, b)) = self.lr_first_last {
            s += &format!("lr_first: {a}\nlr_last: {b}\n");
        }
        if let Some((a, b)) = self.m_rec_first_last {
            s += &format!("m_rec_first: {a}\nm_rec_last: {b}\n");
        }
        if let Some((a, b)) = self.m_cl_first_last {
            s += &format!("m_cl_first: {a}\nm_cl_last: {b}\n");
        }
        s
    }
}

/// Writes `metrics_export.csv` and `summary.txt` next to the run's
/// `metrics.csv` (or into `out` if given).
pub fn export_metrics(run_dir: &Path, out: Option<&Path>) -> Result<(MetricsSummary, PathBuf)> {
    let (rows, skipped) = read_metrics(&run_dir.join(METRICS_FILE))?;
    if skipped > 0 {
        log::warn!("export_metrics: skipped {skipped} corrupt rows");
    }
    let out_dir = out.unwrap_or(run_dir);
    fs::create_dir_all(out_dir)?;
    let csv = out_dir.join(EXPORT_FILE);
    let mut f = BufWriter::new(File::create(&csv)?);
    writeln!(f, "{HEADER}")?;
    for r in &rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    f.flush()?;
    let summary = MetricsSummary::from_rows(&rows, skipped);
    fs::write(out_dir.join(SUMMARY_FILE), summary.render())?;
    Ok((summary, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64) -> MetricsRow {
        MetricsRow {
            epoch: i / 4,
            iter: i + 1,
            loss_m: 0.5 / (i + 1) as f32,
            loss_c: 8.0 - i as f32 * 0.1,
            loss_p: 8.2,
            total: 16.0,
            patch_entropy: 8.0 - ((i * 7) % 5) as f64,
            class_entropy: 7.5,
            m_rec: 0.96,
            m_cl: 0.996 + i as f64 * 1e-4,
            lr: 1e-3,
            seconds: i as f64 * 0.25,
        }
    }

    #[test]
    fn rows_roundtrip() {
        let r = row(3);
        assert_eq!(MetricsRow::parse(&r.to_csv()).unwrap(), r);
        assert_eq!(HEADER.split(',').count(), 12);
    }

    #[test]
    fn empty_run_exports_header_only() {
        let dir = tempfile::tempdir().unwrap();
        drop(MetricsWriter::open(dir.path(), "seed = 1", false).unwrap());
        let (s, csv) = export_metrics(dir.path(), None).unwrap();
        assert_eq!(s.rows, 0);
        assert_eq!(fs::read_to_string(csv).unwrap(), format!("{HEADER}\n"));
    }

    #[test]
    fn export_counts_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::open(dir.path(), "seed = 1\n[loss]\nlambda_m = 1.0", false).unwrap();
        let rows: Vec<_> = (0..10).map(row).collect();
        for r in &rows {
            w.write(r).unwrap();
        }
        drop(w);
        let mut f = OpenOptions::new().append(true).open(dir.path().join(METRICS_FILE)).unwrap();
        writeln!(f, "1,2,garbage").unwrap();
        let (s, csv) = export_metrics(dir.path(), None).unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert_eq!((s.rows, s.skipped), (10, 1));
        let independent = rows.iter().map(|r| r.patch_entropy).fold(f64::INFINITY, f64::min);
        assert_eq!(s.min_patch_entropy, Some(independent));
        assert!(fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap().contains("min_patch_entropy: 4"));
    }
}

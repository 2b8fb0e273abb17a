//! Dataset statistics: summaries and histograms of keyframe counts and video
//! durations, written as CSV and SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::AnnotatedExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub q90: f64,
}

/// Linear-interpolation quantile of ascending `sorted`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    /// `None` for an empty input. Values are sorted first so the result does
    /// not depend on input order.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q25: quantile(&v, 0.25),
            q75: quantile(&v, 0.75),
            q90: quantile(&v, 0.9),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

/// Half-open bins `[start, end)`; the last bin also holds its upper edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
}

impl Histogram {
    pub fn with_edges(values: &[f64], edges: &[f64]) -> Self {
        let mut bins: Vec<Bin> = edges
            .windows(2)
            .map(|w| Bin {
                start: w[0],
                end: w[1],
                count: 0,
            })
            .collect();
        let last = bins.len() - 1;
        for &x in values {
            let i = bins
                .iter()
                .position(|b| x >= b.start && x < b.end)
                .unwrap_or(if x >= bins[last].end { last } else { 0 });
            bins[i].count += 1;
        }
        Self { bins }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{}", b.start, b.end, b.count);
        }
        out
    }

    /// Plain bar chart.
    pub fn to_svg(&self, title: &str, x_label: &str) -> String {
        let (w, h, pad) = (640.0, 360.0, 48.0);
        let peak = self.bins.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
        let bar_w = (w - 2.0 * pad) / self.bins.len().max(1) as f64;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            w / 2.0,
            escape(title)
        );
        for (i, b) in self.bins.iter().enumerate() {
            let bh = (h - 2.0 * pad) * b.count as f64 / peak;
            let x = pad + i as f64 * bar_w;
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#4c72b0\"><title>[{}, {}): {}</title></rect>",
                h - pad - bh,
                (bar_w - 1.0).max(0.5),
                b.start,
                b.end,
                b.count
            );
        }
        let _ = writeln!(
            svg,
            "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"black\"/>",
            w - pad,
            y = h - pad
        );
        if let (Some(first), Some(last)) = (self.bins.first(), self.bins.last()) {
            let _ = writeln!(svg, "<text x=\"{pad}\" y=\"{}\">{}</text>", h - pad + 16.0, first.start);
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                w - pad,
                h - pad + 16.0,
                last.end
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n<text x=\"{pad}\" y=\"{}\">max {}</text>\n</svg>",
            w / 2.0,
            h - 12.0,
            escape(x_label),
            pad - 8.0,
            peak
        );
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_examples: usize,
    pub keyframes: Summary,
    /// Share of records needing at most 10 frames.
    pub frac_at_most_10: f64,
    pub duration: Summary,
    pub keyframe_histogram: Histogram,
    pub duration_histogram: Histogram,
}

/// Duration bin width: 30 s, doubled until there are at most 40 bins.
fn duration_edges(max: f64) -> Vec<f64> {
    let mut width = 30.0;
    while max / width > 40.0 {
        width *= 2.0;
    }
    let n = ((max / width).floor() as usize + 1).max(1);
    (0..=n).map(|i| i as f64 * width).collect()
}

pub fn dataset_stats(records: &[AnnotatedExample]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let counts: Vec<f64> = records.iter().map(|r| r.num_selected_frames as f64).collect();
    let durations: Vec<f64> = records.iter().map(|r| r.duration).collect();
    let keyframes = Summary::of(&counts).expect("non-empty");
    let duration = Summary::of(&durations).expect("non-empty");
    let k_edges: Vec<f64> = (1..=keyframes.max as usize + 1).map(|k| k as f64).collect();
    Ok(DatasetStats {
        n_examples: records.len(),
        frac_at_most_10: counts.iter().filter(|&&c| c <= 10.0).count() as f64 / counts.len() as f64,
        keyframe_histogram: Histogram::with_edges(&counts, &k_edges),
        duration_histogram: Histogram::with_edges(&durations, &duration_edges(duration.max)),
        keyframes,
        duration,
    })
}

/// Writes `stats.json` plus CSV and SVG files for both histograms.
pub fn write_histograms(stats: &DatasetStats, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(stats)?)?;
    fs::write(dir.join("keyframe_counts.csv"), stats.keyframe_histogram.to_csv())?;
    fs::write(
        dir.join("keyframe_counts.svg"),
        stats
            .keyframe_histogram
            .to_svg("Selected keyframes per question", "number of keyframes"),
    )?;
    fs::write(dir.join("durations.csv"), stats.duration_histogram.to_csv())?;
    fs::write(
        dir.join("durations.svg"),
        stats.duration_histogram.to_svg("Video durations", "duration (s)"),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, k: usize, duration: f64) -> AnnotatedExample {
        AnnotatedExample {
            id,
            question: "q".into(),
            ground_truth_answer: "a".into(),
            video: "v".into(),
            keyframes_dir: "d".into(),
            duration,
            num_selected_frames: k,
            keyframe_indices: None,
        }
    }

    #[test]
    fn single_record() {
        let s = dataset_stats(&[record(0, 7, 12.0)]).unwrap();
        assert_eq!(s.keyframes.median, 7.0);
        assert_eq!(s.keyframes.mean, 7.0);
        assert_eq!(s.keyframe_histogram.total(), 1);
        assert_eq!(s.duration_histogram.total(), 1);
        assert!(dataset_stats(&[]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q25, 1.75);
    }

    #[test]
    fn histogram_rows_cover_every_record() {
        let recs: Vec<_> = (0..50)
            .map(|i| record(i, 1 + (i as usize * 7) % 30, i as f64 * 37.0))
            .collect();
        let s = dataset_stats(&recs).unwrap();
        assert_eq!(s.keyframe_histogram.total(), 50);
        assert_eq!(s.duration_histogram.total(), 50);
        let csv_total: usize = s
            .keyframe_histogram
            .to_csv()
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(csv_total, 50);
        let dir = tempfile::tempdir().unwrap();
        write_histograms(&s, dir.path()).unwrap();
        assert!(fs::read_to_string(dir.path().join("durations.svg"))
            .unwrap()
            .starts_with("<svg"));
    }
}

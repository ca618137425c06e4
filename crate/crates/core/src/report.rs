//! Run artifacts: metrics CSV, ROC-AUC, JSONL traces, and small SVG plots.
//! Every file starts with enough identity (config hash) to tie it back to
//! the run that produced it.

use serde::Serialize;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub stage: String,
    pub epoch: Option<u64>,
    pub loss: Option<f64>,
    pub loss_vocab: Option<f64>,
    pub loss_gate: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_t_llm: Option<f64>,
    pub mean_accepted_c: Option<f64>,
    pub reward: Option<f64>,
}

impl MetricRow {
    pub fn new(stage: &str, step: u64) -> MetricRow {
        MetricRow { step, stage: stage.to_string(), ..MetricRow::default() }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow], config_hash: &str) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# config {config_hash}")?;
    writeln!(w, "step,stage,epoch,loss,loss_vocab,loss_gate,accuracy,mean_t_llm,mean_accepted_c,reward")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.stage,
            r.epoch.map(|e| e.to_string()).unwrap_or_default(),
            opt(r.loss),
            opt(r.loss_vocab),
            opt(r.loss_gate),
            opt(r.accuracy),
            opt(r.mean_t_llm),
            opt(r.mean_accepted_c),
            opt(r.reward),
        )?;
    }
    w.flush()
}

/// JSON Lines with a leading meta object, one serialized row per line after.
pub fn write_jsonl<T: Serialize>(
    path: &Path,
    meta: &serde_json::Value,
    rows: impl IntoIterator<Item = T>,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, meta)?;
    w.write_all(b"\n")?;
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Rank-sum ROC-AUC with midranks for tied scores. None when either class
/// is absent.
pub fn roc_auc(samples: &[(f64, bool)]) -> Option<f64> {
    let n_pos = samples.iter().filter(|(_, y)| *y).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].0.partial_cmp(&samples[b].0).unwrap());
    let mut rank_pos_sum = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && samples[order[j + 1]].0 == samples[order[i]].0 {
            j += 1;
        }
        // ranks are 1-based; tied scores share the average rank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if samples[k].1 {
                rank_pos_sum += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_pos_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

/// Minimal line plot: one polyline per series over shared axes.
pub fn svg_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> std::io::Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 56.0;
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        title
    ));
    s.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    s.push_str(&format!("<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n", H - M));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            sx(fx),
            H - M + 18.0,
            fmt2(fx)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            M - 6.0,
            sy(fy) + 4.0,
            fmt2(fy)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        H - 12.0,
        x_label
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        y_label
    ));
    for (si, (name, points)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let path_pts: Vec<String> =
            points.iter().map(|(x, y)| format!("{},{}", sx(*x), sy(*y))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path_pts.join(" ")
        ));
        for (x, y) in points {
            s.push_str(&format!("<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n", sx(*x), sy(*y)));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - M + 4.0,
            M + 16.0 * si as f64,
            name
        ));
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)
}

/// Bar chart over labeled bins, e.g. accepted span lengths.
pub fn svg_histogram(path: &Path, title: &str, bins: &[(String, f64)]) -> std::io::Result<()> {
    const W: f64 = 560.0;
    const H: f64 = 380.0;
    const M: f64 = 56.0;
    let top = bins.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1.0);
    let bw = (W - 2.0 * M) / bins.len().max(1) as f64;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        title
    ));
    for (i, (label, v)) in bins.iter().enumerate() {
        let h = (H - 2.0 * M) * v / top;
        let x = M + i as f64 * bw;
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{h}\" fill=\"#1f77b4\"/>\n",
            x + bw * 0.1,
            H - M - h,
            bw * 0.8
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            x + bw / 2.0,
            H - M + 18.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v}</text>\n",
            x + bw / 2.0,
            H - M - h - 6.0
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    s.push_str("</svg>\n");
    std::fs::write(path, s)
}

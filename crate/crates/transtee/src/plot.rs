//! Self-contained SVG artifacts: ADRF curves, attention heatmaps, and
//! parameter-count charts, plus the attention CSV export.

use std::path::Path;

use crate::datagen::{true_response, Dataset};
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::Tensor;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 50.0;

fn svg_document(body: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: &[f64], ys: &[&[f64]]) -> Frame {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for &x in xs {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
        }
        for col in ys {
            for &y in *col {
                f.y0 = f.y0.min(y);
                f.y1 = f.y1.max(y);
            }
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y1 = f.y0 + 1.0;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn polyline(&self, xs: &[f64], ys: &[f64], stroke: &str) -> String {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        )
    }

    fn axes(&self) -> String {
        format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = H - MARGIN,
            t = MARGIN,
            r = W - MARGIN
        )
    }
}

/// The two ADRF curves on a shared treatment grid.
#[derive(Debug, Clone)]
pub struct AdrfCurves {
    pub t: Vec<f64>,
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
}

/// Average dose-response over the first `x_count` rows: true curve via
/// the oracle, estimated via `predict` (batch predictions at one t).
/// Writes an SVG with the two polylines and returns the curves.
pub fn plot_adrf<F>(
    predict: F,
    ds: &Dataset,
    x_count: usize,
    t_grid: &[f64],
    out: &Path,
) -> Result<AdrfCurves>
where
    F: FnMut(&Tensor, f64) -> Result<Vec<f64>>,
{
    plot_adrf_with(predict, |x, t| true_response(ds, x, t, None), ds, x_count, t_grid, out)
}

/// Like [`plot_adrf`] but with an explicit ground-truth closure, for
/// curves over something other than the dataset's own treatment axis
/// (e.g. the dosage of a fixed treatment).
pub fn plot_adrf_with<F, G>(
    mut predict: F,
    mut truth_at: G,
    ds: &Dataset,
    x_count: usize,
    t_grid: &[f64],
    out: &Path,
) -> Result<AdrfCurves>
where
    F: FnMut(&Tensor, f64) -> Result<Vec<f64>>,
    G: FnMut(&[f64], f64) -> Result<f64>,
{
    if t_grid.len() < 2 {
        return Err(Error::contract("t_grid needs at least 2 points"));
    }
    let n = x_count.min(ds.len()).max(1);
    let x = Tensor::new(vec![n, ds.p()], ds.x.data()[..n * ds.p()].to_vec())?;

    let mut truth = Vec::with_capacity(t_grid.len());
    let mut estimate = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut mu = 0.0;
        for i in 0..n {
            mu += truth_at(x.row(i), t)?;
        }
        truth.push(mu / n as f64);
        let yhat = predict(&x, t)?;
        estimate.push(yhat.iter().sum::<f64>() / yhat.len() as f64);
    }

    let frame = Frame::new(t_grid, &[&truth, &estimate]);
    let mut body = frame.axes();
    body.push_str(&frame.polyline(t_grid, &truth, "#1f77b4"));
    body.push_str(&frame.polyline(t_grid, &estimate, "#d62728"));
    body.push_str(
        "<text x=\"60\" y=\"30\" fill=\"#1f77b4\">true ADRF</text>\n\
         <text x=\"160\" y=\"30\" fill=\"#d62728\">estimate</text>\n",
    );
    std::fs::write(out, svg_document(&body))?;
    Ok(AdrfCurves {
        t: t_grid.to_vec(),
        truth,
        estimate,
    })
}

/// Number of maximal runs (length >= 2) of consecutive equal values —
/// the flat segments of a piecewise-constant curve sampled on a grid.
pub fn flat_segments(values: &[f64], tol: f64) -> usize {
    let mut count = 0;
    let mut run = 1;
    for w in values.windows(2) {
        if (w[0] - w[1]).abs() <= tol {
            run += 1;
        } else {
            if run >= 2 {
                count += 1;
            }
            run = 1;
        }
    }
    if run >= 2 {
        count += 1;
    }
    count
}

/// Per-covariate cross-attention weight averaged over traces, layers,
/// batch rows, and treatment tokens. Rows sum to 1, so the result
/// does too.
pub fn mean_attention_weights(traces: &[ForwardTrace]) -> Result<Vec<f64>> {
    let p = traces
        .first()
        .and_then(|t| t.cross_weights.first())
        .map(|w| w.shape()[2])
        .ok_or_else(|| Error::contract("need at least one trace with weights"))?;
    let mut acc = vec![0.0f64; p];
    let mut count = 0usize;
    for trace in traces {
        for layer in &trace.cross_weights {
            for row in layer.data().chunks(p) {
                for (a, &w) in acc.iter_mut().zip(row) {
                    *a += w;
                }
            }
            count += layer.shape()[0] * layer.shape()[1];
        }
    }
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    Ok(acc)
}

fn group_name(i: usize, total: usize) -> String {
    if total == 3 {
        ["w_con", "w_dis1", "w_dis2"][i].to_string()
    } else {
        format!("group{i}")
    }
}

/// Writes `attention.csv` (per-covariate means, then group sums when
/// groups are given) and `attention.svg` (one-row heatmap) under
/// `out_dir`. Returns the group sums, if any.
pub fn export_attention(
    traces: &[ForwardTrace],
    groups: Option<&[Vec<usize>]>,
    out_dir: &Path,
) -> Result<Option<Vec<f64>>> {
    let weights = mean_attention_weights(traces)?;
    let p = weights.len();

    let mut csv = String::from("kind,name,value\n");
    for (j, w) in weights.iter().enumerate() {
        csv.push_str(&format!("covariate,x{},{}\n", j + 1, w));
    }
    let sums = match groups {
        None => None,
        Some(groups) => {
            let sums: Vec<f64> = groups
                .iter()
                .map(|g| g.iter().map(|&j| weights[j]).sum())
                .collect();
            for (i, s) in sums.iter().enumerate() {
                csv.push_str(&format!("group,{},{}\n", group_name(i, sums.len()), s));
            }
            Some(sums)
        }
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("attention.csv"), csv)?;

    // one-row heatmap: darker = more weight
    let wmax = weights.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let cell = ((W - 2.0 * MARGIN) / p as f64).min(40.0);
    let mut body = String::new();
    for (j, w) in weights.iter().enumerate() {
        let shade = (255.0 * (1.0 - w / wmax)).round() as u8;
        body.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"rgb({shade},{shade},255)\" stroke=\"black\" stroke-width=\"0.5\"/>\n",
            MARGIN + j as f64 * cell,
            H / 2.0 - 20.0,
            cell,
            40.0
        ));
    }
    std::fs::write(out_dir.join("attention.svg"), svg_document(&body))?;
    Ok(sums)
}

/// Bar chart of trainable-parameter counts.
pub fn plot_param_counts(entries: &[(String, usize)], out: &Path) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::contract("nothing to plot"));
    }
    let max = entries.iter().map(|(_, c)| *c).max().unwrap().max(1) as f64;
    let bw = (W - 2.0 * MARGIN) / entries.len() as f64;
    let mut body = String::new();
    for (i, (label, count)) in entries.iter().enumerate() {
        let bh = *count as f64 / max * (H - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * bw;
        body.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#1f77b4\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{label}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{count}</text>\n",
            x + bw * 0.1,
            H - MARGIN - bh,
            bw * 0.8,
            bh,
            x + bw / 2.0,
            H - MARGIN + 16.0,
            x + bw / 2.0,
            (H - MARGIN - bh - 5.0).max(12.0),
        ));
    }
    std::fs::write(out, svg_document(&body))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_synthetic;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn adrf_svg_has_two_polylines_and_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adrf.svg");
        let ds = gen_synthetic(30, 0, 1.0, 1).unwrap();
        let curves = plot_adrf(
            |x, t| {
                (0..x.shape()[0])
                    .map(|i| true_response(&ds, x.row(i), t, None))
                    .collect()
            },
            &ds,
            20,
            &grid(33),
            &path,
        )
        .unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<?xml"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.trim_end().ends_with("</svg>"));
        // oracle-as-model: curves coincide
        for (a, b) in curves.truth.iter().zip(&curves.estimate) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_segment_counting() {
        assert_eq!(flat_segments(&[1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0], 1e-12), 3);
        assert_eq!(flat_segments(&[1.0, 2.0, 3.0], 1e-12), 0);
        assert_eq!(flat_segments(&[5.0; 10], 1e-12), 1);
    }

    #[test]
    fn attention_export_uniform_trace() {
        let dir = tempfile::tempdir().unwrap();
        let trace = ForwardTrace {
            predictions: vec![0.0; 2],
            cross_weights: vec![Tensor::full(&[2, 1, 25], 1.0 / 25.0)],
            propensity: None,
        };
        let groups = [
            (0..5).collect::<Vec<_>>(),
            (5..15).collect::<Vec<_>>(),
            (15..25).collect::<Vec<_>>(),
        ];
        let sums = export_attention(&[trace], Some(&groups), dir.path())
            .unwrap()
            .unwrap();
        assert!((sums.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((sums[0] - 0.2).abs() < 1e-12);
        let csv = std::fs::read_to_string(dir.path().join("attention.csv")).unwrap();
        assert!(csv.contains("group,w_con,"));
        assert_eq!(csv.lines().count(), 1 + 25 + 3);
        let svg = std::fs::read_to_string(dir.path().join("attention.svg")).unwrap();
        // flat heatmap: all 25 cells share one fill
        let first_fill = svg
            .lines()
            .find(|l| l.contains("fill=\"rgb"))
            .unwrap()
            .split("fill=")
            .nth(1)
            .unwrap()
            .to_string();
        assert_eq!(
            svg.matches(first_fill.split(' ').next().unwrap()).count(),
            25
        );
    }

    #[test]
    fn param_count_chart_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.svg");
        plot_param_counts(
            &[("transtee".into(), 1200), ("mlp".into(), 900), ("disc8".into(), 4000)],
            &path,
        )
        .unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<rect").count(), 1 + 3); // background + bars
        assert!(svg.contains("4000"));
    }
}

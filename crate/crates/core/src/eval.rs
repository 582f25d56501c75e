//! Pixel-level ROC analysis and model comparison reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::pipeline::{predict_slide, ProbabilityMap, TileConfig};
use crate::scalar::Scalar;
use crate::wsi::SlidePyramid;

/// Number of evenly spaced thresholds in `[0, 1]` used for reported curves.
pub const GRID_SIZE: usize = 101;

/// Points ordered by decreasing threshold, from the `(0, 0)` anchor (threshold
/// `+inf`) to the `(1, 1)` anchor (threshold `-inf`). Consecutive repeated
/// points are merged, keeping the first.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    /// `(fpr, tpr)` per threshold.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// `GRID_SIZE` thresholds `1.0, 0.99, ..., 0.0`.
pub fn grid_thresholds() -> Vec<f64> {
    (0..GRID_SIZE)
        .rev()
        .map(|i| i as f64 / (GRID_SIZE - 1) as f64)
        .collect()
}

/// Every distinct score, which makes the curve (and its area) exact.
pub fn exact_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// ROC of `scores` against binary `truth`, predicting positive where
/// `score >= t`. Thresholds may be given in any order.
pub fn roc(scores: &[f64], truth: &[bool], thresholds: &[f64]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} scores for {} truth pixels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("scores contain NaN".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "truth has a single class ({pos} positive, {neg} negative pixels); AUC is undefined"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ts = thresholds.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));

    let (pos_f, neg_f) = (pos as f64, neg as f64);
    let mut out_t = vec![f64::INFINITY];
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp, mut k) = (0usize, 0usize, 0usize);
    let push = |t: f64, tp: usize, fp: usize, out_t: &mut Vec<f64>, points: &mut Vec<(f64, f64)>| {
        let p = (fp as f64 / neg_f, tp as f64 / pos_f);
        if points.last() != Some(&p) {
            out_t.push(t);
            points.push(p);
        }
    };
    for &t in &ts {
        while k < order.len() && scores[order[k]] >= t {
            if truth[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        push(t, tp, fp, &mut out_t, &mut points);
    }
    push(f64::NEG_INFINITY, pos, neg, &mut out_t, &mut points);
    let auc = trapezoid(&points);
    Ok(RocCurve {
        thresholds: out_t,
        points,
        auc,
    })
}

/// Exact area under the ROC curve (ties count one half).
pub fn exact_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    Ok(roc(scores, truth, &exact_thresholds(scores))?.auc)
}

/// Pixels of several slides pooled into one sample (micro-averaging).
#[derive(Debug, Clone, Default)]
pub struct PooledPixels {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
}

impl PooledPixels {
    /// Appends a slide's map; its truth must contain both classes.
    pub fn add(&mut self, slide_id: &str, map: &ProbabilityMap, truth: &GrayImage) -> Result<()> {
        if (map.width as u32, map.height as u32) != truth.dimensions() {
            return Err(Error::Data(format!(
                "slide {slide_id}: map is {}x{}, truth is {:?}",
                map.width,
                map.height,
                truth.dimensions()
            )));
        }
        let raw = truth.as_raw();
        let pos = raw.iter().filter(|&&v| v > 0).count();
        if pos == 0 || pos == raw.len() {
            return Err(Error::Data(format!(
                "slide {slide_id}: truth has a single class; AUC is undefined"
            )));
        }
        self.scores.extend(map.values.iter().map(|&v| v as f64));
        self.truth.extend(raw.iter().map(|&v| v > 0));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelReport {
    pub name: String,
    /// Curve on the reporting grid.
    pub curve: RocCurve,
    /// Exact pooled AUC.
    pub auc: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub models: Vec<ModelReport>,
}

impl ComparisonReport {
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("model,threshold,fpr,tpr\n");
        for m in &self.models {
            for (t, (f, p)) in m.curve.thresholds.iter().zip(&m.curve.points) {
                writeln!(out, "{},{t:?},{f:?},{p:?}", m.name).unwrap();
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,auc\n");
        for m in &self.models {
            writeln!(out, "{},{:?}", m.name, m.auc).unwrap();
        }
        out
    }

    pub fn auc(&self, name: &str) -> Option<f64> {
        self.models.iter().find(|m| m.name == name).map(|m| m.auc)
    }

    /// Static SVG with one polyline per model and the chance diagonal.
    pub fn svg(&self) -> String {
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
        let (size, pad) = (400.0, 50.0);
        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#,
            w = size + 2.0 * pad + 160.0,
            h = size + 2.0 * pad
        )
        .unwrap();
        writeln!(
            s,
            r#"<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<line x1="{pad}" y1="{y}" x2="{x}" y2="{pad}" stroke="gray" stroke-dasharray="4"/>"#,
            y = pad + size,
            x = pad + size
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="middle">false positive rate</text>"#,
            x = pad + size / 2.0,
            y = size + pad + 35.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="15" y="{y}" transform="rotate(-90 15 {y})" text-anchor="middle">true positive rate</text>"#,
            y = pad + size / 2.0
        )
        .unwrap();
        for (i, m) in self.models.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = m
                .curve
                .points
                .iter()
                .map(|&(f, t)| format!("{:.2},{:.2}", pad + f * size, pad + (1.0 - t) * size))
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            )
            .unwrap();
            writeln!(
                s,
                r#"<text x="{x}" y="{y}" fill="{color}">{} (AUC {:.3})</text>"#,
                xml_escape(&m.name),
                m.auc,
                x = pad + size + 15.0,
                y = pad + 15.0 + 18.0 * i as f64
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for (name, text) in [
            ("roc.csv", self.roc_csv()),
            ("summary.csv", self.summary_csv()),
            ("roc.svg", self.svg()),
        ] {
            let path = out_dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Builds the report from already pooled pixels per model.
pub fn report_from_pixels(named: Vec<(String, PooledPixels)>) -> Result<ComparisonReport> {
    let models = named
        .into_iter()
        .map(|(name, px)| {
            let curve = roc(&px.scores, &px.truth, &grid_thresholds())?;
            let auc = exact_auc(&px.scores, &px.truth)?;
            Ok(ModelReport { name, curve, auc })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport { models })
}

/// Predicts every slide with every model, pools pixels per model, and
/// writes the curves, the summary and (when `out_dir` is given) per-slide
/// probability maps next to the slide image and its truth.
pub fn compare<T: Scalar>(
    models: &[(String, &Model<T>)],
    slides: &[SlidePyramid],
    tiles: &TileConfig,
    out_dir: Option<&Path>,
) -> Result<ComparisonReport> {
    if models.len() < 2 {
        return Err(Error::Config(format!(
            "comparison needs at least two models, got {}",
            models.len()
        )));
    }
    if slides.is_empty() {
        return Err(Error::Data("no evaluation slides".into()));
    }
    let mut names: Vec<&str> = models.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != models.len() {
        return Err(Error::Config("model names must be distinct".into()));
    }
    let mut pooled: Vec<PooledPixels> = vec![PooledPixels::default(); models.len()];
    for slide in slides {
        let slide_dir = out_dir.map(|d| d.join("maps").join(&slide.id));
        if let Some(dir) = &slide_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_png(slide.level(0), &dir.join("image.png"))?;
            let truth = GrayImage::from_raw(
                slide.mask().width(),
                slide.mask().height(),
                slide.mask().as_raw().iter().map(|&v| v * 255).collect(),
            )
            .expect("mask buffer");
            save_png(&truth, &dir.join("truth.png"))?;
        }
        for ((name, model), px) in models.iter().zip(pooled.iter_mut()) {
            let map = predict_slide(*model, slide, tiles)?;
            px.add(&slide.id, &map, slide.mask())?;
            if let Some(dir) = &slide_dir {
                map.write_png16(&dir.join(format!("{name}.png")))?;
            }
        }
    }
    let report = report_from_pixels(
        models
            .iter()
            .map(|(n, _)| n.clone())
            .zip(pooled)
            .collect(),
    )?;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

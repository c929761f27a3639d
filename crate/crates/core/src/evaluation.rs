//! IoU metrics, group-map rendering, output-space projections and group
//! diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grouping::{BnMode, ClassDistribution, GroupNet, GroupProbabilities};
use crate::imageio;
use crate::seg_model::{Domain, Image, SegModel, IGNORE};
use crate::tensor::Tensor;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("confusion matrix", classes * classes, counts.len()));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one label/prediction pair; ignore pixels are skipped.
    pub fn update(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion update", truth.len(), pred.len()));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::shape("confusion update", format!("labels < {}", self.classes), t.max(p)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` where the class has an empty union.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn compute_iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let c = cm.classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|u| {
            let tp = cm.get(u, u);
            let fn_: u64 = (0..c).map(|p| cm.get(u, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|t| cm.get(t, u)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("every class has an empty union".into()));
    }
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// Runs `seg` on each labelled sample and accumulates a confusion matrix.
pub fn evaluate_segmentation(seg: &SegModel, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(seg.config().classes);
    for s in samples {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Config("evaluation sample without labels".into()))?;
        let score = seg.forward_segmentation(&Image::batch(&[&s.image])?)?;
        cm.update(label.labels(), &score.predictions())?;
    }
    Ok(cm)
}

/// Fixed colors for group maps; larger K cycles through generated hues.
pub const GROUP_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [240, 50, 230],
];

pub fn group_palette(groups: usize) -> Vec<[u8; 3]> {
    (0..groups.clamp(1, 256))
        .map(|k| {
            GROUP_PALETTE.get(k).copied().unwrap_or_else(|| {
                let t = k as f64 * 0.618_034;
                let f = |phase: f64| ((t + phase).fract() * 200.0 + 40.0) as u8;
                [f(0.0), f(0.33), f(0.67)]
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedImage {
    pub width: usize,
    pub height: usize,
    pub indices: Vec<u8>,
    pub palette: Vec<[u8; 3]>,
}

impl IndexedImage {
    pub fn save(&self, path: &Path) -> Result<()> {
        imageio::write_indexed(path, self.width, self.height, &self.indices, &self.palette)
    }

    pub fn colors(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.indices.iter().map(|&i| self.palette[i as usize])
    }
}

/// Per-pixel argmax over groups of the first image; ties go to the lower index.
pub fn render_group_map(assign: &GroupProbabilities) -> Result<IndexedImage> {
    let (_, k, h, w) = assign.assign.dims4()?;
    if k > 256 {
        return Err(Error::Config(format!("cannot render {k} groups into an 8-bit palette")));
    }
    let a = assign.assign.data();
    let plane = h * w;
    let indices = (0..plane)
        .map(|p| {
            let mut best = 0;
            for g in 1..k {
                if a[g * plane + p] > a[best * plane + p] {
                    best = g;
                }
            }
            best as u8
        })
        .collect();
    Ok(IndexedImage {
        width: w,
        height: h,
        indices,
        palette: group_palette(k),
    })
}

/// Class-probability maps of one image for projection.
pub struct ProjectionInput<'a> {
    /// `[1, C, H, W]`
    pub prob: &'a Tensor,
    pub labels: &'a [u8],
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub class: u8,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Top two principal axes.
    pub components: [Vec<f64>; 2],
    pub points: Vec<ProjectedPoint>,
}

/// Projects a seeded pixel subsample of every image onto the top two
/// principal components of the pooled set.
pub fn project_outputs(inputs: &[ProjectionInput], per_image: usize, seed: u64) -> Result<Projection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut tags = Vec::new();
    let mut classes = 0;
    for input in inputs {
        let (n, c, h, w) = input.prob.dims4()?;
        if n != 1 || input.labels.len() != h * w {
            return Err(Error::shape("project_outputs", format!("[1, C, H, W] with {} labels", h * w), format!("{:?}", input.prob.shape())));
        }
        classes = c;
        let valid: Vec<usize> = (0..h * w).filter(|&p| input.labels[p] != IGNORE).collect();
        let take = per_image.min(valid.len());
        let mut chosen: Vec<usize> = sample(&mut rng, valid.len(), take).into_iter().map(|i| valid[i]).collect();
        chosen.sort_unstable();
        for p in chosen {
            rows.push((0..c).map(|u| input.prob.data()[u * h * w + p]).collect());
            tags.push((input.labels[p], input.domain));
        }
    }
    let distinct = rows.iter().any(|r| r != &rows[0]);
    if rows.len() < 2 || !distinct {
        return Err(Error::Undefined("projection needs at least two distinct points".into()));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..classes).map(|u| rows.iter().map(|r| r[u]).sum::<f64>() / n).collect();
    let centered = DMatrix::from_fn(rows.len(), classes, |i, u| rows[i][u] - mean[u]);
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |j: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[j.min(classes - 1)]);
        // deterministic sign: largest-magnitude entry positive
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|v| v * sign).collect()
    };
    let components = [axis(0), axis(1)];
    let points = rows
        .iter()
        .zip(tags)
        .map(|(r, (class, domain))| {
            let dot = |a: &[f64]| r.iter().zip(&mean).zip(a).map(|((v, m), e)| (v - m) * e).sum::<f64>();
            ProjectedPoint {
                x: dot(&components[0]),
                y: dot(&components[1]),
                class,
                domain,
            }
        })
        .collect();
    Ok(Projection { mean, components, points })
}

impl Projection {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e))?;
        w.write_record(["x", "y", "class", "domain"]).map_err(|e| Error::data(path, e))?;
        for p in &self.points {
            let domain = match p.domain {
                Domain::Source => "source",
                Domain::Target => "target",
            };
            w.write_record([p.x.to_string(), p.y.to_string(), p.class.to_string(), domain.to_string()])
                .map_err(|e| Error::data(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Scatter plot: color encodes class, circles are source and crosses target.
    pub fn render_svg(&self, palette: &[[u8; 3]]) -> String {
        let size = 480.0;
        let margin = 20.0;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &self.points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let sx = (size - 2.0 * margin) / (x1 - x0).max(1e-12);
        let sy = (size - 2.0 * margin) / (y1 - y0).max(1e-12);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        for p in &self.points {
            let cx = margin + (p.x - x0) * sx;
            let cy = size - margin - (p.y - y0) * sy;
            let [r, g, b] = palette.get(p.class as usize).copied().unwrap_or([128, 128, 128]);
            let color = format!("rgb({r},{g},{b})");
            match p.domain {
                Domain::Source => {
                    let _ = writeln!(svg, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>");
                }
                Domain::Target => {
                    let _ = writeln!(
                        svg,
                        "<path d=\"M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}\" stroke=\"{color}\" stroke-width=\"1.2\"/>",
                        cx - 2.5,
                        cy - 2.5,
                        cx + 2.5,
                        cy + 2.5,
                        cx - 2.5,
                        cy + 2.5,
                        cx + 2.5,
                        cy - 2.5
                    );
                }
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Share of total assignment mass above which one group counts as having
/// absorbed the image.
pub const COLLAPSE_SHARE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub q_source: Vec<Vec<f64>>,
    pub q_target: Vec<Vec<f64>>,
    /// `||Q_S^k - Q_T^k||` per group.
    pub distances: Vec<f64>,
    /// Cosine similarity between groups, computed on the domain-averaged Q.
    pub cosine: Vec<Vec<f64>>,
    pub pixel_share: Vec<f64>,
    pub collapsed: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + crate::losses::COSINE_EPS)
}

pub fn group_diagnostics(q_source: &[ClassDistribution], q_target: &[ClassDistribution], pixel_share: &[f64]) -> Result<GroupDiagnostics> {
    let k = q_source.len();
    if q_target.len() != k || pixel_share.len() != k || k == 0 {
        return Err(Error::shape("group_diagnostics", format!("{k} groups everywhere"), format!("{} target, {} shares", q_target.len(), pixel_share.len())));
    }
    let distances = q_source
        .iter()
        .zip(q_target)
        .map(|(s, t)| s.0.iter().zip(&t.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    let pooled: Vec<Vec<f64>> = q_source
        .iter()
        .zip(q_target)
        .map(|(s, t)| s.0.iter().zip(&t.0).map(|(a, b)| (a + b) / 2.0).collect())
        .collect();
    let cosine = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { cosine(&pooled[i], &pooled[j]) }).collect())
        .collect();
    let collapsed = k > 1 && pixel_share.iter().any(|&s| s >= COLLAPSE_SHARE);
    Ok(GroupDiagnostics {
        q_source: q_source.iter().map(|q| q.0.clone()).collect(),
        q_target: q_target.iter().map(|q| q.0.clone()).collect(),
        distances,
        cosine,
        pixel_share: pixel_share.to_vec(),
        collapsed,
    })
}

/// Averages per-image Q and soft pixel shares over both validation domains
/// with C's running statistics.
pub fn collect_group_diagnostics(seg: &SegModel, group: &GroupNet, source: &[Sample], target: &[Sample]) -> Result<GroupDiagnostics> {
    let k = group.groups();
    let c = seg.config().classes;
    let mut share = vec![0.0; k];
    let mut pixels = 0.0;
    let mut domain_q = |samples: &[Sample]| -> Result<Vec<ClassDistribution>> {
        let mut acc = vec![vec![0.0; c]; k];
        for s in samples {
            let score = seg.forward_segmentation(&Image::batch(&[&s.image])?)?;
            let assign = group.group_assign(&score, BnMode::Eval)?;
            let feats = crate::grouping::group_features(&score, &assign)?;
            for (kk, f) in feats.iter().enumerate() {
                let q = crate::grouping::class_distribution(f)?;
                for (a, v) in acc[kk].iter_mut().zip(q.0) {
                    *a += v / samples.len() as f64;
                }
            }
            let plane = assign.assign.numel() / k;
            for (kk, chunk) in assign.assign.data().chunks(plane).enumerate() {
                share[kk] += chunk.iter().sum::<f64>();
            }
            pixels += plane as f64;
        }
        Ok(acc.into_iter().map(ClassDistribution).collect())
    };
    let qs = domain_q(source)?;
    let qt = domain_q(target)?;
    let share: Vec<f64> = share.iter().map(|s| s / pixels.max(1.0)).collect();
    group_diagnostics(&qs, &qt, &share)
}

/// One row of a results table. Values are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    /// Free-form note, such as a failure reason.
    pub note: String,
}

impl ResultRow {
    pub fn from_report(name: impl Into<String>, report: &IouReport) -> Self {
        Self {
            name: name.into(),
            per_class: report.per_class.clone(),
            miou: Some(report.miou),
            note: String::new(),
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", v * 100.0))
}

/// Percentages with one decimal; undefined classes print as `n/a`.
pub fn format_table(rows: &[ResultRow], class_names: &[String]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).chain([6]).max().unwrap_or(6);
    let col_w = class_names.iter().map(|n| n.len()).chain([5]).max().unwrap_or(5);
    let mut out = format!("{:name_w$}", "config");
    for n in class_names {
        let _ = write!(out, " | {n:>col_w$}");
    }
    let _ = writeln!(out, " | {:>col_w$}", "mIoU");
    out.push_str(&"-".repeat(out.trim_end().len()));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:name_w$}", r.name);
        for u in 0..class_names.len() {
            let _ = write!(out, " | {:>col_w$}", pct(r.per_class.get(u).copied().flatten()));
        }
        let _ = write!(out, " | {:>col_w$}", pct(r.miou));
        if !r.note.is_empty() {
            let _ = write!(out, "  ({})", r.note);
        }
        out.push('\n');
    }
    out.push_str("IoU in %; classes with an empty union are n/a and excluded from mIoU.\n");
    out
}

pub fn write_table_csv(path: &Path, rows: &[ResultRow], class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e))?;
    let mut header = vec!["config".to_string()];
    header.extend(class_names.iter().cloned());
    header.extend(["miou".to_string(), "note".to_string()]);
    w.write_record(&header).map_err(|e| Error::data(path, e))?;
    for r in rows {
        let mut rec = vec![r.name.clone()];
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        rec.extend((0..class_names.len()).map(|u| cell(r.per_class.get(u).copied().flatten())));
        rec.push(cell(r.miou));
        rec.push(r.note.clone());
        w.write_record(&rec).map_err(|e| Error::data(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

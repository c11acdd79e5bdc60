//! PCK / PCKh scoring, comparison tables and convergence-curve records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Dataset;
use crate::hourglass::{NetError, StackedHourglassNet};
use crate::keypoints::{decode_heatmaps, to_heatmap, DecodedJoint, Heatmap, JointGroup, JointId, PoseAnnotation};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample {index}: {detail}")]
    Sample { index: usize, detail: String },
    #[error("{predictions} prediction sets for {annotations} annotations")]
    Count { predictions: usize, annotations: usize },
    #[error("reports cover different joint groups: `{first}` has {a:?}, `{other}` has {b:?}")]
    GroupMismatch {
        first: String,
        other: String,
        a: Vec<String>,
        b: Vec<String>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Per-sample distance normaliser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Head segment length (PCKh).
    Head,
    /// Longer side of the bounding box of the visible ground-truth joints.
    Bbox,
    /// Training-time accuracy: both points snap to their nearest heatmap cell
    /// (halves round up) and the cell distance is normalised by
    /// `heatmap_resolution / 10`.
    HeatmapTenth {
        image_resolution: usize,
        heatmap_resolution: usize,
    },
}

impl Normalization {
    fn label(&self) -> &'static str {
        match self {
            Normalization::Head => "head",
            Normalization::Bbox => "bbox",
            Normalization::HeatmapTenth { .. } => "heatmap/10",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub threshold: f64,
    pub normalization: Normalization,
}

impl MetricSpec {
    pub fn pckh(threshold: f64) -> Self {
        Self {
            threshold,
            normalization: Normalization::Head,
        }
    }

    pub fn name(&self) -> String {
        match self.normalization {
            Normalization::Head => format!("PCKh@{}", self.threshold),
            n => format!("PCK@{} ({})", self.threshold, n.label()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointCount {
    pub joint: JointId,
    pub correct: usize,
    pub total: usize,
}

impl JointCount {
    /// Percentage, or `None` when no instance was evaluated.
    pub fn score(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// In subset order.
    pub joints: Vec<JointCount>,
    pub sample_count: usize,
}

impl MetricReport {
    pub fn joint_score(&self, j: JointId) -> Option<f64> {
        self.joints.iter().find(|c| c.joint == j).and_then(JointCount::score)
    }

    /// Groups present in the subset, in table order, with counts pooled over
    /// both sides.
    pub fn groups(&self) -> Vec<(JointGroup, Option<f64>)> {
        JointGroup::ALL
            .iter()
            .filter_map(|&g| {
                let members: Vec<_> = self.joints.iter().filter(|c| c.joint.group() == g).collect();
                if members.is_empty() {
                    return None;
                }
                let correct: usize = members.iter().map(|c| c.correct).sum();
                let total: usize = members.iter().map(|c| c.total).sum();
                Some((g, (total > 0).then(|| 100.0 * correct as f64 / total as f64)))
            })
            .collect()
    }

    /// Mean of the per-joint scores, skipping pelvis, thorax and joints with
    /// no evaluated instance.
    pub fn average(&self) -> Option<f64> {
        let scores: Vec<f64> = self
            .joints
            .iter()
            .filter(|c| !c.joint.group().excluded_from_average())
            .filter_map(JointCount::score)
            .collect();
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Pools counts of reports over the same joints (e.g. several seeds).
    pub fn merge(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
        let first = reports
            .first()
            .ok_or_else(|| EvalError::Invalid("nothing to merge".into()))?;
        let mut out = first.clone();
        for r in &reports[1..] {
            let same = r.metric == first.metric
                && r.joints.len() == first.joints.len()
                && r.joints.iter().zip(&first.joints).all(|(a, b)| a.joint == b.joint);
            if !same {
                return Err(EvalError::Invalid(format!(
                    "cannot pool `{}` over different joints or metrics",
                    r.metric
                )));
            }
            for (o, c) in out.joints.iter_mut().zip(&r.joints) {
                o.correct += c.correct;
                o.total += c.total;
            }
            out.sample_count += r.sample_count;
        }
        Ok(out)
    }
}

fn normaliser(spec: &MetricSpec, ann: &PoseAnnotation, index: usize) -> Result<f64, EvalError> {
    let bad = |detail: &str| EvalError::Sample {
        index,
        detail: detail.into(),
    };
    let n = match spec.normalization {
        Normalization::Head => ann.head_len,
        Normalization::Bbox => {
            let vis: Vec<_> = ann.joints.iter().filter(|k| k.visible).collect();
            let span = |f: fn(&&crate::keypoints::Keypoint) -> f64| {
                let it = vis.iter().map(f);
                it.clone().fold(f64::MIN, f64::max) - it.fold(f64::MAX, f64::min)
            };
            if vis.len() < 2 {
                return Err(bad("bounding box needs at least two visible joints"));
            }
            span(|k| k.x).max(span(|k| k.y))
        }
        Normalization::HeatmapTenth { heatmap_resolution, .. } => heatmap_resolution as f64 / 10.0,
    };
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(bad(&format!("normaliser is {n}, must be positive")))
    }
}

fn distance(spec: &MetricSpec, p: &DecodedJoint, gx: f64, gy: f64) -> f64 {
    match spec.normalization {
        Normalization::HeatmapTenth {
            image_resolution,
            heatmap_resolution,
        } => {
            let last = (heatmap_resolution - 1) as f64;
            let h = |v: f64| to_heatmap(v, image_resolution, heatmap_resolution);
            let cell = |v: f64| h(v).round().clamp(0.0, last);
            (cell(p.x) - cell(gx)).hypot(cell(p.y) - cell(gy))
        }
        _ => (p.x - gx).hypot(p.y - gy),
    }
}

/// Counts a joint correct iff its distance is strictly below
/// `threshold × normaliser`. Hidden ground-truth joints are skipped.
pub fn pck(
    predictions: &[Vec<DecodedJoint>],
    annotations: &[PoseAnnotation],
    subset: &[JointId],
    spec: &MetricSpec,
) -> Result<MetricReport, EvalError> {
    if predictions.len() != annotations.len() {
        return Err(EvalError::Count {
            predictions: predictions.len(),
            annotations: annotations.len(),
        });
    }
    let mut joints: Vec<JointCount> = subset
        .iter()
        .map(|&joint| JointCount {
            joint,
            correct: 0,
            total: 0,
        })
        .collect();
    for (i, (pred, ann)) in predictions.iter().zip(annotations).enumerate() {
        let covers = pred.len() == subset.len() && pred.iter().zip(subset).all(|(p, &j)| p.joint == j);
        if !covers {
            return Err(EvalError::Sample {
                index: i,
                detail: "predictions do not cover exactly the evaluated joints".into(),
            });
        }
        if !(ann.head_len > 0.0) && spec.normalization == Normalization::Head {
            return Err(EvalError::Sample {
                index: i,
                detail: "annotation has no head segment length".into(),
            });
        }
        let norm = normaliser(spec, ann, i)?;
        for (count, p) in joints.iter_mut().zip(pred) {
            let gt = ann.joint(p.joint);
            if !gt.visible {
                continue;
            }
            count.total += 1;
            if distance(spec, p, gt.x, gt.y) < spec.threshold * norm {
                count.correct += 1;
            }
        }
    }
    Ok(MetricReport {
        metric: spec.name(),
        joints,
        sample_count: annotations.len(),
    })
}

pub fn pckh(
    predictions: &[Vec<DecodedJoint>],
    annotations: &[PoseAnnotation],
    subset: &[JointId],
    threshold: f64,
) -> Result<MetricReport, EvalError> {
    pck(predictions, annotations, subset, &MetricSpec::pckh(threshold))
}

const EVAL_BATCH: usize = 16;

/// Final-unit predictions for every sample, in dataset order.
pub fn predict_dataset(
    net: &StackedHourglassNet<f32>,
    dataset: &Dataset,
    subset: &[JointId],
) -> Result<Vec<Vec<DecodedJoint>>, EvalError> {
    let arch = net.arch();
    if dataset.resolution() != arch.input_resolution {
        return Err(EvalError::Invalid(format!(
            "dataset resolution {} does not match network input {}",
            dataset.resolution(),
            arch.input_resolution
        )));
    }
    let last = *net.head_channels().last().expect("at least one unit");
    if last != subset.len() {
        return Err(EvalError::Invalid(format!(
            "final head has {last} channels but {} joints are evaluated",
            subset.len()
        )));
    }
    let res = dataset.resolution();
    let hm = arch.heatmap_resolution;
    let chunks: Vec<_> = dataset.samples().chunks(EVAL_BATCH).collect();
    let decoded = chunks
        .par_iter()
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * 3 * res * res);
            for s in chunk.iter() {
                data.extend_from_slice(s.image.data());
            }
            let batch = Tensor::new(vec![chunk.len(), 3, res, res], data).expect("batch shape");
            let heads = net.predict(&batch)?;
            let out = heads.last().expect("at least one unit");
            let plane = last * hm * hm;
            Ok(out
                .data()
                .chunks(plane)
                .map(|d| {
                    let h = Heatmap {
                        joints: subset.to_vec(),
                        resolution: hm,
                        data: d.to_vec(),
                    };
                    decode_heatmaps(&h, res)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(decoded.into_iter().flatten().collect())
}

/// Eval-mode inference on `dataset`, scored on the final unit's heatmaps.
pub fn evaluate_model(
    net: &StackedHourglassNet<f32>,
    dataset: &Dataset,
    subset: &[JointId],
    spec: &MetricSpec,
) -> Result<MetricReport, EvalError> {
    let preds = predict_dataset(net, dataset, subset)?;
    let anns: Vec<PoseAnnotation> = dataset.samples().iter().map(|s| s.annotation.clone()).collect();
    pck(&preds, &anns, subset, spec)
}

/// A rendered comparison table in both layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub text: String,
    pub csv: String,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.1}"))
}

fn table_groups(r: &MetricReport) -> Vec<(JointGroup, Option<f64>)> {
    r.groups()
        .into_iter()
        .filter(|(g, _)| !g.excluded_from_average())
        .collect()
}

/// One row per configuration, one column per joint group plus the average.
/// Torso groups are left out, as they are from the average.
pub fn render_table(rows: &[(String, MetricReport)]) -> Result<Table, EvalError> {
    let (first_label, first) = rows
        .first()
        .ok_or_else(|| EvalError::Invalid("no reports to render".into()))?;
    let names = |r: &MetricReport| {
        table_groups(r)
            .iter()
            .map(|(g, _)| g.label().to_string())
            .collect::<Vec<_>>()
    };
    let header_groups = names(first);
    for (label, r) in &rows[1..] {
        if names(r) != header_groups {
            return Err(EvalError::GroupMismatch {
                first: first_label.clone(),
                other: label.clone(),
                a: header_groups,
                b: names(r),
            });
        }
    }
    let mut header = vec!["Configuration".to_string()];
    header.extend(header_groups.iter().cloned());
    header.push("Average".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.clone()];
            row.extend(table_groups(r).into_iter().map(|(_, s)| cell(s)));
            row.push(cell(r.average()));
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|r| r[c].len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut text = String::new();
    for (i, row) in std::iter::once(&header).chain(&body).enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        writeln!(text, "{}", line.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(
                text,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            )
            .unwrap();
        }
    }
    let mut csv = String::new();
    for row in std::iter::once(&header).chain(&body) {
        writeln!(csv, "{}", row.join(",")).unwrap();
    }
    Ok(Table { text, csv })
}

/// One point of a validation-accuracy curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub config: String,
    pub epoch: usize,
    pub accuracy: f64,
    pub learning_rate: f64,
}

pub const CURVE_HEADER: &str = "config,epoch,accuracy,learning_rate";

/// Comma-separated records with a header row. Numbers use the shortest
/// representation that parses back to the same value.
pub fn emit_curves(points: &[CurvePoint]) -> Result<String, EvalError> {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        if p.config.contains([',', '\n', '"']) {
            return Err(EvalError::Invalid(format!(
                "configuration label `{}` contains a separator",
                p.config
            )));
        }
        writeln!(out, "{},{},{},{}", p.config, p.epoch, p.accuracy, p.learning_rate).unwrap();
    }
    Ok(out)
}

pub fn parse_curves(text: &str) -> Result<Vec<CurvePoint>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(EvalError::Invalid(format!(
            "curve file must start with `{CURVE_HEADER}`"
        )));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = |what: &str| EvalError::Invalid(format!("curve line {}: {what}", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            let [config, epoch, acc, lr] = f[..] else {
                return Err(bad("expected 4 fields"));
            };
            Ok(CurvePoint {
                config: config.to_string(),
                epoch: epoch.parse().map_err(|_| bad("bad epoch"))?,
                accuracy: acc.parse().map_err(|_| bad("bad accuracy"))?,
                learning_rate: lr.parse().map_err(|_| bad("bad learning rate"))?,
            })
        })
        .collect()
}

/// Groups parsed curve points by configuration, preserving epoch order.
pub fn curves_by_config(points: Vec<CurvePoint>) -> BTreeMap<String, Vec<CurvePoint>> {
    let mut out: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for p in points {
        out.entry(p.config.clone()).or_default().push(p);
    }
    out
}

//! Pixel-level segmentation metrics (JA, DI, SE, SP, AC), evaluation
//! reports and the four-variant ablation table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::architecture::{CascadeModel, FusionMode};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::training::{self, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Pixel-wise confusion counts with foreground = 1. Both masks must have the
/// same shape and contain only 0 and 1.
pub fn confusion<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {} and ground truth {} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (as_bit(p, "prediction")?, as_bit(g, "ground truth")?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn as_bit<T: Element>(v: T, what: &str) -> Result<bool> {
    if v == T::zero() {
        Ok(false)
    } else if v == T::one() {
        Ok(true)
    } else {
        Err(Error::InvalidArgument(format!("{what} mask is not binary: found {v}")))
    }
}

/// The five challenge metrics as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ja: f64,
    pub di: f64,
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
}

impl Metrics {
    /// Column order of every rendered table.
    pub const COLUMNS: [&'static str; 5] = ["JA", "DI", "SE", "SP", "AC"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.ja, self.di, self.se, self.sp, self.ac]
    }

    fn from_array(v: [f64; 5]) -> Self {
        Metrics {
            ja: v[0],
            di: v[1],
            se: v[2],
            sp: v[3],
            ac: v[4],
        }
    }

    /// Unweighted mean of a non-empty list.
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [0.0; 5];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        Some(Self::from_array(acc.map(|a| a / items.len() as f64)))
    }

    /// Column-wise median (mean of the middle two for even counts).
    pub fn median(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let mut out = [0.0; 5];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut col: Vec<f64> = items.iter().map(|m| m.as_array()[k]).collect();
            col.sort_by(f64::total_cmp);
            let mid = col.len() / 2;
            *slot = if col.len() % 2 == 1 {
                col[mid]
            } else {
                0.5 * (col[mid - 1] + col[mid])
            };
        }
        Some(Self::from_array(out))
    }

    /// Percent, rounded to two decimals.
    pub fn percent(&self) -> Metrics {
        Self::from_array(self.as_array().map(|v| (v * 10_000.0).round() / 100.0))
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    // absent class on both sides counts as perfect agreement
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        ja: ratio(c.tp, c.tp + c.fn_ + c.fp),
        di: ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        ac: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    /// Unweighted per-image averages.
    pub means: Metrics,
}

impl MetricsReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Result<Self> {
        let all: Vec<Metrics> = images.iter().map(|i| i.metrics).collect();
        let means = Metrics::mean(&all)
            .ok_or_else(|| Error::Dataset("cannot report metrics over zero images".into()))?;
        Ok(MetricsReport { images, means })
    }

    /// JSON document with every value in percent (two decimals).
    pub fn to_json(&self) -> serde_json::Value {
        let row = |m: &Metrics| {
            let p = m.percent();
            serde_json::json!({ "JA": p.ja, "DI": p.di, "SE": p.se, "SP": p.sp, "AC": p.ac })
        };
        serde_json::json!({
            "images": self.images.iter().map(|i| {
                let mut v = row(&i.metrics);
                v["id"] = serde_json::Value::String(i.id.clone());
                v["counts"] = serde_json::json!({
                    "tp": i.counts.tp, "fp": i.counts.fp, "tn": i.counts.tn, "fn": i.counts.fn_
                });
                v
            }).collect::<Vec<_>>(),
            "means": row(&self.means),
        })
    }

    /// Plain-text grid: one row per image plus the mean row.
    pub fn render_text(&self) -> String {
        let mut rows: Vec<(String, Metrics)> =
            self.images.iter().map(|i| (i.id.clone(), i.metrics)).collect();
        rows.push(("mean".into(), self.means));
        render_grid("Image", &rows)
    }
}

fn render_grid(first: &str, rows: &[(String, Metrics)]) -> String {
    let width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain([first.len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{first:<width$}");
    for c in Metrics::COLUMNS {
        let _ = write!(out, "  {c:>6}");
    }
    out.push('\n');
    for (label, m) in rows {
        let _ = write!(out, "{label:<width$}");
        for v in m.percent().as_array() {
            let _ = write!(out, "  {v:>6.2}");
        }
        out.push('\n');
    }
    out
}

/// Per image: predict, threshold the last stage, count, score.
pub fn evaluate(
    model: &CascadeModel<f32>,
    config: &TrainConfig,
    dataset: &[SamplePair],
    threshold: f32,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    let stage_reports = training::evaluate_stages(model, config, dataset, threshold)?;
    Ok(stage_reports.into_iter().last().expect("at least one stage"))
}

/// One of the four fusion x supervision combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationVariant {
    pub fusion_mode: FusionMode,
    pub deep_supervision: bool,
}

impl AblationVariant {
    /// Row order of the ablation table.
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant {
            fusion_mode: FusionMode::ConcatInput,
            deep_supervision: false,
        },
        AblationVariant {
            fusion_mode: FusionMode::Cifs,
            deep_supervision: false,
        },
        AblationVariant {
            fusion_mode: FusionMode::ConcatInput,
            deep_supervision: true,
        },
        AblationVariant {
            fusion_mode: FusionMode::Cifs,
            deep_supervision: true,
        },
    ];

    pub fn label(&self) -> String {
        let mut s = format!("MSUN+{}", self.fusion_mode.label());
        if self.deep_supervision {
            s.push_str("+DS");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Metrics>,
    pub median: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Assembles the table from per-variant, per-seed evaluation reports.
/// Every one of the four variants must be present with at least one seed.
pub fn ablation_table(results: &[(AblationVariant, Vec<(u64, MetricsReport)>)]) -> Result<AblationTable> {
    let rows = AblationVariant::ALL
        .iter()
        .map(|v| {
            let (_, runs) = results
                .iter()
                .find(|(rv, _)| rv == v)
                .ok_or_else(|| Error::InvalidArgument(format!("missing ablation variant {}", v.label())))?;
            if runs.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "ablation variant {} has no evaluated seeds",
                    v.label()
                )));
            }
            let per_seed: Vec<Metrics> = runs.iter().map(|(_, r)| r.means).collect();
            Ok(AblationRow {
                variant: *v,
                seeds: runs.iter().map(|(s, _)| *s).collect(),
                median: Metrics::median(&per_seed).expect("non-empty"),
                per_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

impl AblationTable {
    /// Median rows in the fixed variant order, followed by per-seed rows.
    pub fn render_text(&self) -> String {
        let medians: Vec<(String, Metrics)> =
            self.rows.iter().map(|r| (r.variant.label(), r.median)).collect();
        let mut out = render_grid("Method", &medians);
        if self.rows.iter().any(|r| r.per_seed.len() > 1) {
            let per_seed: Vec<(String, Metrics)> = self
                .rows
                .iter()
                .flat_map(|r| {
                    r.seeds
                        .iter()
                        .zip(&r.per_seed)
                        .map(move |(s, m)| (format!("{} seed={s}", r.variant.label()), *m))
                })
                .collect();
            out.push('\n');
            out.push_str(&render_grid("Method / seed", &per_seed));
        }
        out
    }

    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8], w: usize) -> Tensor<f32> {
        Tensor::from_vec([1, 1, bits.len() / w, w], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let ones = mask(&[1, 1, 1, 1], 2);
        assert_eq!(
            confusion(&ones, &ones).unwrap(),
            ConfusionCounts { tp: 4, fp: 0, tn: 0, fn_: 0 }
        );
        let gt = mask(&[1, 1, 0, 0], 2);
        let pred = mask(&[1, 0, 0, 0], 2);
        assert_eq!(
            confusion(&pred, &gt).unwrap(),
            ConfusionCounts { tp: 1, fp: 0, tn: 2, fn_: 1 }
        );
        let c = confusion(&mask(&[0, 0, 1, 1], 2), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(confusion(&mask(&[1, 0], 2), &mask(&[1, 0, 0, 1], 2)).is_err());
        let soft = Tensor::from_vec([1, 1, 1, 2], vec![0.5f32, 1.0]).unwrap();
        assert!(confusion(&soft, &mask(&[1, 0], 2)).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&ConfusionCounts { tp: 1, fp: 0, tn: 2, fn_: 1 });
        assert_eq!(m.ja, 0.5);
        assert!((m.di - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.se, m.sp, m.ac), (0.5, 1.0, 0.75));

        let perfect = compute_metrics(&ConfusionCounts { tp: 3, fp: 0, tn: 5, fn_: 0 });
        assert_eq!(perfect.as_array(), [1.0; 5]);

        let empty = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 9, fn_: 0 });
        assert_eq!(empty.as_array(), [1.0; 5]);
    }

    fn record(id: &str, c: ConfusionCounts) -> ImageMetrics {
        ImageMetrics {
            id: id.into(),
            counts: c,
            metrics: compute_metrics(&c),
        }
    }

    #[test]
    fn report_means_and_json() {
        let one = record("a", ConfusionCounts { tp: 1, fp: 0, tn: 2, fn_: 1 });
        let r = MetricsReport::from_images(vec![one.clone()]).unwrap();
        assert_eq!(r.means, one.metrics);
        let json = r.to_json();
        assert_eq!(json["means"]["DI"], 66.67);
        assert_eq!(json["images"][0]["id"], "a");
        assert!(MetricsReport::from_images(vec![]).is_err());

        let text = r.render_text();
        let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, vec!["Image", "JA", "DI", "SE", "SP", "AC"]);
    }

    #[test]
    fn ablation_table_shape() {
        let rep = MetricsReport::from_images(vec![record("a", ConfusionCounts { tp: 2, fp: 1, tn: 5, fn_: 0 })]).unwrap();
        let results: Vec<_> = AblationVariant::ALL.iter().map(|v| (*v, vec![(1, rep.clone())])).collect();
        let table = ablation_table(&results).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert!(table.rows.windows(2).all(|w| w[0].median == w[1].median));
        let text = table.render_text();
        let labels: Vec<&str> = text.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(labels, vec!["MSUN+C", "MSUN+CIFS", "MSUN+C+DS", "MSUN+CIFS+DS"]);
        assert!(ablation_table(&results[..3]).is_err());
    }

    #[test]
    fn median_of_seeds() {
        let m = |v: f64| Metrics { ja: v, di: v, se: v, sp: v, ac: v };
        assert_eq!(Metrics::median(&[m(0.3), m(0.9), m(0.5)]).unwrap(), m(0.5));
        assert_eq!(Metrics::median(&[m(0.2), m(0.4)]).unwrap().ja, 0.30000000000000004);
    }

    proptest! {
        #[test]
        fn ja_never_exceeds_di(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let m = compute_metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            prop_assert!(m.ja <= m.di + 1e-15);
            prop_assert!(m.di <= 1.0);
            for v in m.as_array() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn means_ignore_order(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let images: Vec<ImageMetrics> = (0..7)
                .map(|i| record(&i.to_string(), ConfusionCounts {
                    tp: rng.random_range(0..20), fp: rng.random_range(0..20),
                    tn: rng.random_range(1..20), fn_: rng.random_range(0..20),
                }))
                .collect();
            let a = MetricsReport::from_images(images.clone()).unwrap().means;
            let mut shuffled = images;
            shuffled.shuffle(&mut rng);
            let b = MetricsReport::from_images(shuffled).unwrap().means;
            for (x, y) in a.as_array().iter().zip(b.as_array()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

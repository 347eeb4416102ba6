//! Scoring and evaluation.

mod bench;
mod heatmap;
mod toyset;

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

pub use bench::{benchmark, memory_scaling, BenchReport, HardwareInfo, LatencyStats, ScalingPoint};
pub use heatmap::{colormap, save_heatmap};
pub use toyset::{gen_toyset, paint_shape, synth_category, toy_samples, write_images, ShapeKind, SynthSpec, ToyRecord, ToySpec};

use crate::data_io::{load_image, load_mask, DatasetIndex, Image, Label};
use crate::error::{shape_err, Error, Result};
use crate::network::{AnomalyMap, SegModel};

/// Mean of the `k` largest values of the map.
pub fn image_score(map: &AnomalyMap, k: usize) -> Result<f64> {
    top_k_mean(map.probs.iter().copied(), k)
}

pub(crate) fn top_k_mean(values: impl Iterator<Item = f64>, k: usize) -> Result<f64> {
    let mut v: Vec<f64> = values.collect();
    if k == 0 || v.len() < k {
        return Err(Error::NotEnoughItems { needed: k.max(1), got: v.len() });
    }
    let idx = v.len() - k;
    v.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(v[idx..].iter().sum::<f64>() / k as f64)
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half.
///
/// Computed from midranks in exact integer arithmetic, so the result is the
/// correctly rounded value of the rational `(2·wins + ties) / (2·P·N)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AurocUndefined("both classes must be present"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::AurocUndefined("scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled rank sum of positives; a tie block over sorted positions
    // [i, j) has doubled midrank i + j + 1
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_sum += positives * (i + j + 1) as u128;
        i = j;
    }
    // 2U = 2R − P(P+1)
    let u2 = rank2_sum - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// One test image in memory.
#[derive(Clone, Debug)]
pub struct TestSample {
    pub name: String,
    pub image: Image,
    pub label: Label,
    /// Binary ground truth; `None` excludes the item from pixel AUROC
    /// (normal items get an implicit all-zero mask).
    pub mask: Option<Array2<f64>>,
}

impl TestSample {
    fn pixel_mask(&self) -> Option<Array2<f64>> {
        match self.label {
            Label::Normal => Some(Array2::zeros((self.image.height(), self.image.width()))),
            Label::Anomalous => self.mask.clone(),
        }
    }
}

/// Decode a test split at `size`.
pub fn load_test_set(index: &DatasetIndex, size: usize) -> Result<Vec<TestSample>> {
    index
        .items
        .iter()
        .map(|it| {
            let mask = match &it.mask {
                Some(p) => Some(load_mask(p, size)?),
                None => None,
            };
            let stem = it.image.file_stem().unwrap_or_default().to_string_lossy();
            Ok(TestSample {
                name: format!("{}/{}", it.defect, stem),
                image: load_image(&it.image, size)?,
                label: it.label,
                mask,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub name: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub image_auroc: f64,
    /// `None` when no anomalous item carries a mask.
    pub pixel_auroc: Option<f64>,
    pub scores: Vec<ImageScore>,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Items contributing pixels to pixel AUROC.
    pub n_pixel_images: usize,
    pub latency: Option<LatencyStats>,
    /// Free-form header lines (configuration, ablation switches).
    pub header: Vec<String>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            s.push_str(&format!("# {h}\n"));
        }
        s.push_str(&format!("image_auroc: {:.6}\n", self.image_auroc));
        match self.pixel_auroc {
            Some(p) => s.push_str(&format!("pixel_auroc: {p:.6}\n")),
            None => s.push_str("pixel_auroc: n/a\n"),
        }
        s.push_str(&format!(
            "images: {} normal, {} anomalous, {} with pixel labels\n",
            self.n_normal, self.n_anomalous, self.n_pixel_images
        ));
        if let Some(l) = &self.latency {
            s.push_str(&format!(
                "latency_s: mean {:.6} p50 {:.6} p95 {:.6} (n={})\n",
                l.mean, l.p50, l.p95, l.samples
            ));
        }
        s
    }

    /// Per-image scores as CSV (`name,label,score`), header lines first as
    /// `#` comments.
    pub fn write_scores_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for h in &self.header {
            body.push_str(&format!("# {h}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.scores {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        body.push_str(&String::from_utf8_lossy(&bytes));
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Metrics from precomputed maps (one per sample, same order).
pub fn evaluate_maps(maps: &[AnomalyMap], samples: &[TestSample], top_k: usize) -> Result<EvalReport> {
    if maps.len() != samples.len() {
        return Err(shape_err("one map per test sample required"));
    }
    let mut scores = Vec::with_capacity(maps.len());
    let mut pix_scores = Vec::new();
    let mut pix_labels = Vec::new();
    let mut n_pixel_images = 0;
    for (map, s) in maps.iter().zip(samples) {
        scores.push(ImageScore {
            name: s.name.clone(),
            label: s.label.as_int(),
            score: image_score(map, top_k)?,
        });
        if let Some(m) = s.pixel_mask() {
            if m.dim() != map.dim() {
                return Err(shape_err(format!("{}: mask {:?} vs map {:?}", s.name, m.dim(), map.dim())));
            }
            n_pixel_images += 1;
            pix_scores.extend(map.probs.iter().copied());
            pix_labels.extend(m.iter().map(|&v| v >= 0.5));
        } else {
            log::warn!("{} has no mask; excluded from pixel AUROC", s.name);
        }
    }
    let image_auroc = auroc(
        &scores.iter().map(|s| s.score).collect::<Vec<_>>(),
        &scores.iter().map(|s| s.label == 1).collect::<Vec<_>>(),
    )?;
    let pixel_auroc = if pix_labels.iter().any(|&l| l) {
        Some(auroc(&pix_scores, &pix_labels)?)
    } else {
        None
    };
    let n_anomalous = samples.iter().filter(|s| s.label == Label::Anomalous).count();
    Ok(EvalReport {
        image_auroc,
        pixel_auroc,
        scores,
        n_normal: samples.len() - n_anomalous,
        n_anomalous,
        n_pixel_images,
        latency: None,
        header: Vec::new(),
    })
}

/// Run the model on every sample (one image per forward pass, timed) and
/// compute metrics.
pub fn evaluate(model: &SegModel, samples: &[TestSample], top_k: usize) -> Result<EvalReport> {
    let mut maps = Vec::with_capacity(samples.len());
    let mut times = Vec::with_capacity(samples.len());
    for s in samples {
        let t0 = Instant::now();
        maps.push(model.predict(&s.image)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    let mut report = evaluate_maps(&maps, samples, top_k)?;
    report.latency = Some(LatencyStats::from_samples(&times));
    report.header.push(format!("encoder {}", model.encoder().tag()));
    report.header.push(format!("memory_size {}", model.pool().len()));
    report.header.push(format!("ablation {}", model.ablation().describe()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut twice_wins, mut pairs) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1;
                    twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice_wins as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::AurocUndefined(_))));
    }

    #[test]
    fn auroc_matches_pair_counting_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(auroc(&scores, &labels).unwrap(), brute(&scores, &labels));
        }
    }

    #[test]
    fn top_k_examples() {
        let mut m = Array2::zeros((20, 10));
        m.iter_mut().take(100).for_each(|v| *v = 1.0);
        assert_eq!(image_score(&AnomalyMap { probs: m }, 100).unwrap(), 1.0);
        let m = Array2::from_shape_fn((20, 10), |(y, _)| if y < 10 { 0.8 } else { 0.2 });
        assert!((image_score(&AnomalyMap { probs: m }, 100).unwrap() - 0.8).abs() < 1e-12);
        let c = AnomalyMap {
            probs: Array2::from_elem((16, 16), 0.37),
        };
        assert!((image_score(&c, 100).unwrap() - 0.37).abs() < 1e-12);
        assert!(image_score(&AnomalyMap { probs: Array2::zeros((5, 5)) }, 100).is_err());
    }

    fn sample(name: &str, label: Label, mask: Option<Array2<f64>>) -> TestSample {
        TestSample {
            name: name.into(),
            image: Image::filled(10, 10, [0.5; 3]),
            label,
            mask,
        }
    }

    #[test]
    fn oracle_and_constant_maps() {
        let gt = Array2::from_shape_fn((10, 10), |(y, x)| if y < 3 && x < 4 { 1.0 } else { 0.0 });
        let samples = vec![
            sample("good/0", Label::Normal, None),
            sample("bad/0", Label::Anomalous, Some(gt.clone())),
        ];
        let perfect = vec![AnomalyMap { probs: Array2::zeros((10, 10)) }, AnomalyMap { probs: gt }];
        let r = evaluate_maps(&perfect, &samples, 10).unwrap();
        assert_eq!(r.image_auroc, 1.0);
        assert_eq!(r.pixel_auroc, Some(1.0));
        let flat = vec![AnomalyMap { probs: Array2::from_elem((10, 10), 0.3) }; 2];
        assert_eq!(evaluate_maps(&flat, &samples, 10).unwrap().pixel_auroc, Some(0.5));
    }

    #[test]
    fn three_image_hand_computed() {
        // normal: max region 0.2; anomaly A: 0.9 on its mask; anomaly B: 0.1
        // everywhere (missed). Image scores (top 1): 0.2, 0.9, 0.1.
        let mk = |v: f64| AnomalyMap {
            probs: Array2::from_elem((10, 10), v),
        };
        let mut a = mk(0.0);
        let ma = Array2::from_shape_fn((10, 10), |(y, _)| if y == 0 { 1.0 } else { 0.0 });
        a.probs.row_mut(0).fill(0.9);
        let samples = vec![
            sample("good/0", Label::Normal, None),
            sample("a/0", Label::Anomalous, Some(ma)),
            sample("b/0", Label::Anomalous, None),
        ];
        let r = evaluate_maps(&[mk(0.2), a, mk(0.1)], &samples, 1).unwrap();
        // positives {0.9, 0.1} vs negative {0.2}: one win of two
        assert_eq!(r.image_auroc, 0.5);
        // pixels: 10 positives at 0.9; negatives 100 at 0.2 and 90 at 0.0
        assert_eq!(r.pixel_auroc, Some(1.0));
        assert_eq!(r.n_pixel_images, 2);
    }
}

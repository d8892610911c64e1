//! Segmentation scoring: cumulative IoU pools pixel counts over the whole
//! split, mean IoU averages per-image ratios, and A@t reports the fraction
//! of images at or above each IoU threshold.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::Mask;

pub const ACC_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub ciou: f64,
    pub miou: f64,
    /// Paired with ACC_THRESHOLDS, same order.
    pub acc: [f64; 3],
}

#[derive(Clone, Debug, Default)]
pub struct EvalRecord {
    inter: u64,
    union: u64,
    ious: Vec<f64>,
}

impl EvalRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.ious.len()
    }

    /// Adds one image: pixel counts into the pooled sums, the per-image
    /// ratio into the list. An image with two empty masks scores 1.0 and
    /// leaves the pooled sums unchanged.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "{}x{} vs {}x{}",
                    pred.height, pred.width, gt.height, gt.width
                ),
            ));
        }
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
            inter += (p & g) as u64;
            union += (p | g) as u64;
        }
        self.inter += inter;
        self.union += union;
        self.ious.push(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        });
        Ok(())
    }

    /// Associative merge, so shards can be scored independently and joined.
    pub fn merge(&mut self, other: EvalRecord) {
        self.inter += other.inter;
        self.union += other.union;
        self.ious.extend(other.ious);
    }

    pub fn finalize(&self) -> Result<Metrics> {
        if self.ious.is_empty() {
            return Err(Error::State("no images accumulated".into()));
        }
        let n = self.ious.len() as f64;
        // Pooled 0/0 follows the per-image convention: nothing to find,
        // nothing predicted.
        let ciou = if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        };
        let miou = self.ious.iter().sum::<f64>() / n;
        let mut acc = [0.0; 3];
        for (a, &t) in acc.iter_mut().zip(&ACC_THRESHOLDS) {
            *a = self.ious.iter().filter(|&&v| v >= t).count() as f64 / n;
        }
        Ok(Metrics { ciou, miou, acc })
    }
}

/// Flat JSON object, fixed key order, exactly four decimals per value.
pub fn metrics_json(m: &Metrics) -> String {
    format!(
        "{{\"ciou\":{:.4},\"miou\":{:.4},\"acc@0.3\":{:.4},\"acc@0.5\":{:.4},\"acc@0.7\":{:.4}}}",
        m.ciou, m.miou, m.acc[0], m.acc[1], m.acc[2]
    )
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<()> {
    fs::write(path, metrics_json(m) + "\n")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        detail: e.to_string(),
    })?;
    let get = |key: &str| -> Result<f64> {
        v.get(key).and_then(|x| x.as_f64()).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("missing numeric field {key:?}"),
        })
    };
    Ok(Metrics {
        ciou: get("ciou")?,
        miou: get("miou")?,
        acc: [get("acc@0.3")?, get("acc@0.5")?, get("acc@0.7")?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, bits: Vec<u8>) -> Mask {
        Mask::new(h, w, bits).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
        mask(h, w, (0..h * w).map(|_| rng.gen_range(0..2u8)).collect())
    }

    #[test]
    fn pooled_and_mean_disagree_by_design() {
        // Image 1: pred = gt = full. Image 2: pred full, gt empty.
        let full = mask(2, 2, vec![1; 4]);
        let empty = mask(2, 2, vec![0; 4]);
        let mut rec = EvalRecord::new();
        rec.accumulate(&full, &full).unwrap();
        rec.accumulate(&full, &empty).unwrap();
        let m = rec.finalize().unwrap();
        assert_eq!(m.ciou, 0.5);
        assert_eq!(m.miou, 0.5);
    }

    #[test]
    fn accuracy_threshold_is_inclusive() {
        let mut rec = EvalRecord::new();
        rec.ious = vec![0.6, 0.4, 0.5];
        rec.inter = 1;
        rec.union = 2;
        let m = rec.finalize().unwrap();
        assert!((m.acc[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.acc[0], 1.0);
        assert_eq!(m.acc[2], 0.0);
    }

    #[test]
    fn empty_record_is_an_error() {
        assert!(EvalRecord::new().finalize().is_err());
    }

    #[test]
    fn perfect_single_image() {
        let mut rng = seeded_rng(40);
        let p = random_mask(&mut rng, 3, 5);
        let mut rec = EvalRecord::new();
        rec.accumulate(&p, &p).unwrap();
        let m = rec.finalize().unwrap();
        assert_eq!(m, Metrics { ciou: 1.0, miou: 1.0, acc: [1.0; 3] });
    }

    #[test]
    fn matches_brute_force_pixel_counting() {
        let mut rng = seeded_rng(41);
        let (h, w) = (6, 7);
        let mut rec = EvalRecord::new();
        let mut pairs = Vec::new();
        for _ in 0..50 {
            let p = random_mask(&mut rng, h, w);
            let g = random_mask(&mut rng, h, w);
            rec.accumulate(&p, &g).unwrap();
            pairs.push((p, g));
        }
        let m = rec.finalize().unwrap();

        // Oracle: independent counting loops over the raw pixel arrays.
        let mut ti = 0usize;
        let mut tu = 0usize;
        let mut ious = Vec::new();
        for (p, g) in &pairs {
            let mut i = 0usize;
            let mut u = 0usize;
            for idx in 0..h * w {
                if p.bits[idx] == 1 && g.bits[idx] == 1 {
                    i += 1;
                }
                if p.bits[idx] == 1 || g.bits[idx] == 1 {
                    u += 1;
                }
            }
            ti += i;
            tu += u;
            ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        }
        assert!((m.ciou - ti as f64 / tu as f64).abs() < 1e-12);
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((m.miou - miou).abs() < 1e-12);
        for (k, t) in ACC_THRESHOLDS.iter().enumerate() {
            let frac = ious.iter().filter(|&&v| v >= *t).count() as f64 / ious.len() as f64;
            assert!((m.acc[k] - frac).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_ratio_stays_between_extreme_images_at_equal_union() {
        // Every image's union is exactly 12 cells; membership within the
        // union is random, so per-image IoUs differ.
        let mut rng = seeded_rng(42);
        let (h, w) = (4, 6);
        for _ in 0..20 {
            let mut rec = EvalRecord::new();
            let mut ious = Vec::new();
            for _ in 0..5 {
                let mut pred = vec![0u8; h * w];
                let mut gt = vec![0u8; h * w];
                let mut cells: Vec<usize> = (0..h * w).collect();
                for i in (1..cells.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    cells.swap(i, j);
                }
                for &c in cells.iter().take(12) {
                    match rng.gen_range(0..3) {
                        0 => pred[c] = 1,
                        1 => gt[c] = 1,
                        _ => {
                            pred[c] = 1;
                            gt[c] = 1;
                        }
                    }
                }
                let p = mask(h, w, pred);
                let g = mask(h, w, gt);
                ious.push(crate::inference::iou(&p, &g).unwrap());
                rec.accumulate(&p, &g).unwrap();
            }
            let m = rec.finalize().unwrap();
            let lo = ious.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(m.ciou >= lo - 1e-12 && m.ciou <= hi + 1e-12);
        }
    }

    #[test]
    fn merge_equals_sequential_accumulation() {
        let mut rng = seeded_rng(43);
        let imgs: Vec<(Mask, Mask)> = (0..8)
            .map(|_| (random_mask(&mut rng, 3, 3), random_mask(&mut rng, 3, 3)))
            .collect();
        let mut whole = EvalRecord::new();
        for (p, g) in &imgs {
            whole.accumulate(p, g).unwrap();
        }
        let mut left = EvalRecord::new();
        let mut right = EvalRecord::new();
        for (p, g) in &imgs[..3] {
            left.accumulate(p, g).unwrap();
        }
        for (p, g) in &imgs[3..] {
            right.accumulate(p, g).unwrap();
        }
        left.merge(right);
        assert_eq!(whole.finalize().unwrap(), left.finalize().unwrap());
    }

    #[test]
    fn json_shape_and_round_trip() {
        let m = Metrics {
            ciou: 0.123456,
            miou: 2.0 / 3.0,
            acc: [1.0, 0.5, 0.04],
        };
        let text = metrics_json(&m);
        assert_eq!(
            text,
            "{\"ciou\":0.1235,\"miou\":0.6667,\"acc@0.3\":1.0000,\"acc@0.5\":0.5000,\"acc@0.7\":0.0400}"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        write_metrics(&path, &m).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.ciou, 0.1235);
        assert_eq!(back.miou, 0.6667);
        assert_eq!(back.acc, [1.0, 0.5, 0.04]);
        assert!(read_metrics(&dir.path().join("missing.json")).is_err());
    }
}

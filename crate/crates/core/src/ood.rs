//! Out-of-distribution scores, threshold calibration, AUC and Dice.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::rotate_images;
use crate::error::{Error, Result};
use crate::net::MapShape;
use crate::numerics::DenseMatrix;
use crate::training::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreName {
    DistributionalEntropy,
    PredictiveEntropy,
    DistributionalVariance,
}

impl ScoreName {
    pub const ALL: [ScoreName; 3] =
        [ScoreName::DistributionalEntropy, ScoreName::PredictiveEntropy, ScoreName::DistributionalVariance];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreName::DistributionalEntropy => "distributional_entropy",
            ScoreName::PredictiveEntropy => "predictive_entropy",
            ScoreName::DistributionalVariance => "distributional_variance",
        }
    }
}

/// Scores of one kind on in-distribution and out-of-distribution examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub in_distribution: Vec<f64>,
    pub out_of_distribution: Vec<f64>,
    pub score_name: ScoreName,
}

fn check_scores(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::EmptyScores);
    }
    if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalIntegrity(format!("score {bad} is not finite")));
    }
    Ok(())
}

impl ScoreSet {
    pub fn new(in_distribution: Vec<f64>, out_of_distribution: Vec<f64>, score_name: ScoreName) -> Result<Self> {
        check_scores(&in_distribution)?;
        check_scores(&out_of_distribution)?;
        Ok(Self { in_distribution, out_of_distribution, score_name })
    }
}

/// The `(1 − fpr)` percentile of `in_scores`, linearly interpolated between
/// order statistics at rank `(1 − fpr)(n − 1)`. Examples are flagged when
/// their score exceeds it.
pub fn threshold_at_fpr(in_scores: &[f64], fpr: f64) -> Result<f64> {
    check_scores(in_scores)?;
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::Config(format!("fpr must lie in (0, 1), got {fpr}")));
    }
    let mut s = in_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (1.0 - fpr) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let frac = pos - lo as f64;
    Ok(s[lo] + frac * (s[hi] - s[lo]))
}

/// Fraction of `scores` strictly above `threshold`.
pub fn flag_rate(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s > threshold).count() as f64 / scores.len() as f64
}

/// Probability that an OOD score exceeds an in-distribution one, ties ½.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    let (a, b) = (&scores.in_distribution, &scores.out_of_distribution);
    check_scores(a)?;
    check_scores(b)?;
    // rank-sum form of Mann–Whitney U with midranks for ties
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, false)).chain(b.iter().map(|&v| (v, true))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_ood += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let (n_in, n_ood) = (a.len() as f64, b.len() as f64);
    Ok((rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0) / (n_in * n_ood))
}

/// `2|A∩B| / (|A| + |B|)`, one when both masks are empty.
pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dims(format!("masks of {} and {} entries", pred.len(), truth.len())));
    }
    let a = pred.iter().filter(|&&p| p).count();
    let b = truth.iter().filter(|&&t| t).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    let both = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Per-example scores of a model on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScores {
    pub distributional_entropy: Vec<f64>,
    pub predictive_entropy: Vec<f64>,
    pub distributional_variance: Vec<f64>,
}

impl ExampleScores {
    pub fn get(&self, name: ScoreName) -> &[f64] {
        match name {
            ScoreName::DistributionalEntropy => &self.distributional_entropy,
            ScoreName::PredictiveEntropy => &self.predictive_entropy,
            ScoreName::DistributionalVariance => &self.distributional_variance,
        }
    }

    pub fn len(&self) -> usize {
        self.distributional_variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn score_examples(model: &Model, x: &DenseMatrix, batch_size: usize, mc_samples: usize, seed: u64) -> Result<ExampleScores> {
    let p = model.predict(x, batch_size, mc_samples, seed)?;
    Ok(ExampleScores {
        distributional_entropy: p.distributional_entropy,
        predictive_entropy: p.predictive_entropy,
        distributional_variance: p.distributional,
    })
}

/// Mean uncertainties over a batch at one rotation angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub angle: f64,
    pub mean_predictive_entropy: f64,
    pub mean_distributional_entropy: f64,
    pub mean_distributional_variance: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Scores the batch rotated by each angle; angles run in parallel.
pub fn rotation_sweep(
    model: &Model,
    images: &DenseMatrix,
    shape: MapShape,
    angles: &[f64],
    batch_size: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<(UncertaintyReport, ExampleScores)>> {
    if let Some(a) = angles.iter().find(|a| !(0.0..360.0).contains(*a)) {
        return Err(Error::Config(format!("rotation angle {a} outside [0, 360)")));
    }
    angles
        .par_iter()
        .map(|&angle| {
            let x = rotate_images(images, shape, angle)?;
            let s = score_examples(model, &x, batch_size, mc_samples, seed)?;
            let r = UncertaintyReport {
                angle,
                mean_predictive_entropy: mean(&s.predictive_entropy),
                mean_distributional_entropy: mean(&s.distributional_entropy),
                mean_distributional_variance: mean(&s.distributional_variance),
            };
            Ok((r, s))
        })
        .collect()
}

/// Writes `example_id,score_name,value,split` rows.
pub fn write_scores_csv(path: &Path, parts: &[(&str, &ExampleScores)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(std::fs::File::create(path)?));
    w.write_record(["example_id", "score_name", "value", "split"])?;
    for (split, s) in parts {
        for name in ScoreName::ALL {
            for (i, v) in s.get(name).iter().enumerate() {
                w.write_record([i.to_string(), name.as_str().to_string(), format!("{v:e}"), split.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes any serialisable value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(a: &[f64], b: &[f64]) -> ScoreSet {
        ScoreSet::new(a.to_vec(), b.to_vec(), ScoreName::DistributionalEntropy).unwrap()
    }

    /// Pairwise comparison count.
    fn brute_auc(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += if y > x {
                    1.0
                } else if y == x {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (a.len() * b.len()) as f64
    }

    #[test]
    fn threshold_examples() {
        let s: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((threshold_at_fpr(&s, 0.05).unwrap() - 95.05).abs() < 1e-12);
        assert!((threshold_at_fpr(&s, 1e-15).unwrap() - 100.0).abs() < 1e-10);
        let c = vec![3.0; 10];
        let t = threshold_at_fpr(&c, 0.05).unwrap();
        assert_eq!(t, 3.0);
        assert_eq!(flag_rate(&c, t), 0.0);
        assert!(matches!(threshold_at_fpr(&[], 0.1), Err(Error::EmptyScores)));
        assert!(threshold_at_fpr(&s, 0.0).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.1, 0.2], &[0.3, 0.4])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[1.0, 3.0], &[2.0, 4.0])).unwrap(), 0.75);
        assert!(ScoreSet::new(vec![], vec![1.0], ScoreName::PredictiveEntropy).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = [true, true, false, true];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
        let p = [true, true, true, true, false, false];
        let t = [false, false, true, true, true, true];
        assert_eq!(dice(&p, &t).unwrap(), 0.5);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(matches!(dice(&[true], &[true, false]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn scores_csv_layout() {
        let s = ExampleScores {
            distributional_entropy: vec![0.5],
            predictive_entropy: vec![0.25],
            distributional_variance: vec![1.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores_csv(&p, &[("in", &s)]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "example_id,score_name,value,split");
        assert_eq!(lines[1], "0,distributional_entropy,5e-1,in");
        assert_eq!(lines.len(), 4);
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((-50i32..50).prop_map(|v| v as f64 / 4.0), 1..40)
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(a in scores(), b in scores()) {
            let got = auc(&set(&a, &b)).unwrap();
            prop_assert!((got - brute_auc(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn auc_is_invariant_under_increasing_maps(a in scores(), b in scores()) {
            let f = |v: &f64| (0.3 * v).exp() * 7.0 - 2.0;
            let before = auc(&set(&a, &b)).unwrap();
            let after = auc(&set(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>())).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }

        #[test]
        fn flag_rate_is_bounded(s in scores(), fpr in 0.001f64..0.999) {
            let t = threshold_at_fpr(&s, fpr).unwrap();
            let r = flag_rate(&s, t);
            prop_assert!(r >= 0.0 && r <= fpr + 1.0 / s.len() as f64);
        }

        #[test]
        fn dice_is_symmetric(a in prop::collection::vec(any::<bool>(), 0..30), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }
    }
}

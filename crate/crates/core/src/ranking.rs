//! Clipped relative errors against the expert annotation, the mean Patients
//! Relative Error (PRE), and model ordering.
//!
//! The reference value for DSC and LF1 is a perfect score of 1. For AVD and
//! ALD the expert value of the difference itself is 0, so the error is taken
//! relative to the ground-truth volume and lesion count instead; a control
//! patient (no lesion) scores 0 when the prediction is also empty and 1
//! otherwise. All errors are clipped to `[0, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub delta_dsc: f64,
    pub delta_avd: f64,
    pub delta_ald: f64,
    pub delta_lf1: f64,
}

impl RelativeErrors {
    pub fn mean(&self) -> f64 {
        (self.delta_dsc + self.delta_avd + self.delta_ald + self.delta_lf1) / 4.0
    }
}

fn clip(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn relative(diff: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        clip(diff / reference)
    } else if diff == 0.0 {
        0.0
    } else {
        1.0
    }
}

pub fn relative_errors(m: &SegmentationMetrics) -> RelativeErrors {
    RelativeErrors {
        delta_dsc: clip(1.0 - m.dsc),
        delta_avd: relative(m.avd_ml, m.gt_volume_ml),
        delta_ald: relative(m.ald as f64, m.gt_lesion_count as f64),
        delta_lf1: clip(1.0 - m.lf1),
    }
}

/// Mean over patients of the per-patient mean of the four errors.
pub fn pre(all_patients: &[RelativeErrors]) -> Result<f64> {
    if all_patients.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let total: f64 = all_patients.iter().map(RelativeErrors::mean).sum();
    Ok(total / all_patients.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub model: String,
    pub pre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    /// Ascending PRE; ties ordered by model name.
    pub entries: Vec<RankEntry>,
}

impl ModelRanking {
    pub fn position(&self, model: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.model == model)
    }

    pub fn pre_of(&self, model: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.model == model)
            .map(|e| e.pre)
    }
}

pub fn rank_models(scores: &BTreeMap<String, f64>) -> ModelRanking {
    let mut entries: Vec<RankEntry> = scores
        .iter()
        .map(|(model, &pre)| RankEntry {
            model: model.clone(),
            pre,
        })
        .collect();
    entries.sort_by(|a, b| a.pre.total_cmp(&b.pre).then_with(|| a.model.cmp(&b.model)));
    ModelRanking { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::LesionCategory;
    use proptest::prelude::*;

    fn metrics(
        dsc: f64,
        avd_ml: f64,
        ald: usize,
        lf1: f64,
        vol: f64,
        count: usize,
    ) -> SegmentationMetrics {
        SegmentationMetrics {
            dsc,
            avd_ml,
            ald,
            lf1,
            gt_volume_ml: vol,
            gt_lesion_count: count,
            category: crate::metrics::categorize(vol),
        }
    }

    fn errs(a: f64, b: f64, c: f64, d: f64) -> RelativeErrors {
        RelativeErrors {
            delta_dsc: a,
            delta_avd: b,
            delta_ald: c,
            delta_lf1: d,
        }
    }

    #[test]
    fn relative_error_examples() {
        let perfect = relative_errors(&metrics(1.0, 0.0, 0, 1.0, 12.0, 2));
        assert_eq!(perfect, errs(0.0, 0.0, 0.0, 0.0));

        let e = relative_errors(&metrics(0.72, 1.0, 1, 0.5, 10.0, 2));
        assert!((e.delta_dsc - 0.28).abs() < 1e-15);
        assert!((e.delta_avd - 0.1).abs() < 1e-15);
        assert_eq!(e.delta_ald, 0.5);
        assert_eq!(e.delta_lf1, 0.5);

        let clipped = relative_errors(&metrics(0.1, 25.0, 5, 0.0, 10.0, 1));
        assert_eq!(clipped.delta_avd, 1.0);
        assert_eq!(clipped.delta_ald, 1.0);
    }

    #[test]
    fn control_patient_conventions() {
        let clean = relative_errors(&metrics(1.0, 0.0, 0, 1.0, 0.0, 0));
        assert_eq!(clean, errs(0.0, 0.0, 0.0, 0.0));
        let fp = relative_errors(&metrics(0.0, 0.3, 1, 0.0, 0.0, 0));
        assert_eq!(fp, errs(1.0, 1.0, 1.0, 1.0));
        assert_eq!(fp.mean(), 1.0);
        let _ = LesionCategory::N;
    }

    #[test]
    fn pre_examples() {
        assert_eq!(pre(&[errs(0.0, 0.0, 0.0, 0.0); 5]).unwrap(), 0.0);
        assert!((pre(&[errs(0.3, 0.2, 0.0, 0.1)]).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(pre(&[errs(1.0, 1.0, 1.0, 1.0); 3]).unwrap(), 1.0);
        assert!(matches!(pre(&[]), Err(Error::EmptyCohort)));
    }

    #[test]
    fn ranking_examples() {
        let mut scores = BTreeMap::new();
        scores.insert("a".to_string(), 0.5);
        scores.insert("b".to_string(), 0.3);
        let r = rank_models(&scores);
        assert_eq!(
            r.entries
                .iter()
                .map(|e| e.model.as_str())
                .collect::<Vec<_>>(),
            ["b", "a"]
        );

        let mut tied = BTreeMap::new();
        for name in ["softmax", "beta", "fedavg"] {
            tied.insert(name.to_string(), 0.4);
        }
        let r = rank_models(&tied);
        assert_eq!(
            r.entries
                .iter()
                .map(|e| e.model.as_str())
                .collect::<Vec<_>>(),
            ["beta", "fedavg", "softmax"]
        );
        assert_eq!(r.position("softmax"), Some(2));
    }

    fn unit() -> impl Strategy<Value = f64> {
        0.0f64..=1.0
    }

    fn any_errs() -> impl Strategy<Value = RelativeErrors> {
        (unit(), unit(), unit(), unit()).prop_map(|(a, b, c, d)| errs(a, b, c, d))
    }

    proptest! {
        #[test]
        fn pre_ignores_patient_order(mut v in prop::collection::vec(any_errs(), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let before = pre(&v).unwrap();
            v.shuffle(&mut crate::seed::rng(seed));
            let after = pre(&v).unwrap();
            prop_assert!((before - after).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&before));
        }

        #[test]
        fn pre_is_monotone(v in prop::collection::vec(any_errs(), 1..20), idx in 0usize..20, field in 0usize..4, bump in 0.0f64..1.0) {
            let idx = idx % v.len();
            let mut worse = v.clone();
            let slot = match field {
                0 => &mut worse[idx].delta_dsc,
                1 => &mut worse[idx].delta_avd,
                2 => &mut worse[idx].delta_ald,
                _ => &mut worse[idx].delta_lf1,
            };
            *slot = (*slot + bump).min(1.0);
            prop_assert!(pre(&worse).unwrap() >= pre(&v).unwrap());
        }
    }
}

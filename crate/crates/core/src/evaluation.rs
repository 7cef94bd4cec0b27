//! MPJPE under root alignment, and dataset-level reports broken down by
//! action.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{root_align, Normalizer, PoseDataset, PoseSample, JOINTS};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;

/// Anything that maps standardized `[B, 16, 2]` inputs to standardized
/// `[B, 16, 3]` predictions.
pub trait Lifter {
    fn lift(&self, inputs: &Tensor) -> Result<Tensor>;
}

impl Lifter for Model {
    fn lift(&self, inputs: &Tensor) -> Result<Tensor> {
        self.predict(inputs)
    }
}

pub type Pose = [[f64; 3]; JOINTS];

/// Mean per-joint Euclidean distance after moving joint 0 of both poses to
/// the origin.
pub fn mpjpe(pred: &Pose, gt: &Pose) -> Result<f64> {
    check_finite(pred, gt)?;
    Ok(mean_distance(&root_align(pred), &root_align(gt)))
}

/// Mean per-joint distance without alignment.
pub fn mpjpe_unaligned(pred: &Pose, gt: &Pose) -> Result<f64> {
    check_finite(pred, gt)?;
    Ok(mean_distance(pred, gt))
}

fn check_finite(pred: &Pose, gt: &Pose) -> Result<()> {
    if pred.iter().chain(gt).flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("mpjpe input".into()))
    }
}

fn mean_distance(a: &Pose, b: &Pose) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let d: f64 = (0..3).map(|i| (p[i] - q[i]) * (p[i] - q[i])).sum();
            d.sqrt()
        })
        .sum::<f64>()
        / JOINTS as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub action: Option<u16>,
    pub mpjpe_mm: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_mpjpe_mm: f64,
    pub sample_count: usize,
    /// Sorted by action id; samples without one come first.
    pub per_action: Vec<ActionStats>,
}

impl EvalReport {
    /// Builds a report from per-sample errors.
    pub fn from_errors(errors: &[(Option<u16>, f64)]) -> Self {
        let mut groups: BTreeMap<Option<u16>, (f64, usize)> = BTreeMap::new();
        for &(a, e) in errors {
            let g = groups.entry(a).or_default();
            g.0 += e;
            g.1 += 1;
        }
        let total: f64 = errors.iter().map(|(_, e)| e).sum();
        Self {
            overall_mpjpe_mm: if errors.is_empty() {
                0.0
            } else {
                total / errors.len() as f64
            },
            sample_count: errors.len(),
            per_action: groups
                .into_iter()
                .map(|(action, (sum, count))| ActionStats {
                    action,
                    mpjpe_mm: sum / count as f64,
                    count,
                })
                .collect(),
        }
    }

    /// Tab-separated `action, count, mpjpe_mm` rows plus a final `all` row;
    /// samples without an action are listed as `-`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("action\tcount\tmpjpe_mm\n");
        for a in &self.per_action {
            let name = a.action.map_or("-".to_string(), |v| v.to_string());
            writeln!(s, "{name}\t{}\t{:.6}", a.count, a.mpjpe_mm).unwrap();
        }
        writeln!(
            s,
            "all\t{}\t{:.6}",
            self.sample_count, self.overall_mpjpe_mm
        )
        .unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Standardized predictions for `dataset`, `chunk` samples at a time.
pub fn predict_normalized(
    lifter: &dyn Lifter,
    dataset: &PoseDataset,
    normalizer: &Normalizer,
    chunk: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for batch in dataset.samples.chunks(chunk.max(1)) {
        let refs: Vec<&PoseSample> = batch.iter().collect();
        let pred = lifter.lift(&normalizer.inputs(&refs))?;
        if pred.shape() != [batch.len(), JOINTS, 3] {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "lifter returned {:?} for {} samples",
                    pred.shape(),
                    batch.len()
                ),
            ));
        }
        out.push(pred);
    }
    Ok(out)
}

/// Millimeter predictions `[N][16][3]`.
pub fn predict_mm(
    lifter: &dyn Lifter,
    dataset: &PoseDataset,
    normalizer: &Normalizer,
) -> Result<Vec<Pose>> {
    let mut poses = Vec::with_capacity(dataset.len());
    for pred in predict_normalized(lifter, dataset, normalizer, 256)? {
        let mm = normalizer.denormalize_targets(&pred)?;
        for row in mm.data().chunks(3 * JOINTS) {
            let mut p = [[0.0; 3]; JOINTS];
            for (dst, src) in p.iter_mut().zip(row.chunks(3)) {
                dst.copy_from_slice(src);
            }
            poses.push(p);
        }
    }
    Ok(poses)
}

/// Infer-mode MPJPE over a dataset, overall and per action.
pub fn evaluate(
    lifter: &dyn Lifter,
    dataset: &PoseDataset,
    normalizer: Option<&Normalizer>,
) -> Result<EvalReport> {
    let normalizer = normalizer.ok_or_else(|| {
        Error::Config("evaluation needs the normalizer the model was trained with".into())
    })?;
    evaluate_poses(&predict_mm(lifter, dataset, normalizer)?, dataset)
}

/// Scores millimeter predictions, one per sample in order.
pub fn evaluate_poses(preds: &[Pose], dataset: &PoseDataset) -> Result<EvalReport> {
    if preds.len() != dataset.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} samples",
            preds.len(),
            dataset.len()
        )));
    }
    let errors = preds
        .iter()
        .zip(&dataset.samples)
        .map(|(p, s)| Ok((s.action, mpjpe(p, &s.target3d)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_errors(&errors))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::{synth_generate, Camera};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let mut p = [[0.0; 3]; JOINTS];
        p.iter_mut()
            .flatten()
            .for_each(|v| *v = rng.gen_range(-500.0..500.0));
        p
    }

    #[test]
    fn identical_poses_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_pose(&mut rng);
        assert_eq!(mpjpe(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_cancels_only_with_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_pose(&mut rng);
        let pred = gt.map(|j| [j[0] + 3.0, j[1], j[2] + 4.0]);
        assert!(mpjpe(&pred, &gt).unwrap() < 1e-12);
        assert!((mpjpe_unaligned(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let mut total = 0.0;
            for j in 0..JOINTS {
                let mut sq = 0.0;
                for c in 0..3 {
                    let d = (a[j][c] - a[0][c]) - (b[j][c] - b[0][c]);
                    sq += d * d;
                }
                total += sq.sqrt();
            }
            assert!((mpjpe(&a, &b).unwrap() - total / 16.0).abs() < 1e-12);
            assert!((mpjpe(&a, &b).unwrap() - mpjpe(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = [[0.0; 3]; JOINTS];
        p[3][1] = f64::NAN;
        assert!(matches!(
            mpjpe(&p, &[[0.0; 3]; JOINTS]),
            Err(Error::NonFinite(_))
        ));
    }

    /// Returns the normalized targets of a fixed dataset.
    struct Oracle(Tensor);

    impl Lifter for Oracle {
        fn lift(&self, inputs: &Tensor) -> Result<Tensor> {
            assert_eq!(inputs.shape()[0], self.0.shape()[0]);
            Ok(self.0.clone())
        }
    }

    #[test]
    fn exact_stub_scores_zero_and_aggregates_consistently() {
        let data = synth_generate(40, 3, Camera::default()).unwrap().dataset;
        let norm = Normalizer::fit(&data).unwrap();
        let refs: Vec<&PoseSample> = data.samples.iter().collect();
        let report = evaluate(&Oracle(norm.targets(&refs)), &data, Some(&norm)).unwrap();
        assert!(report.overall_mpjpe_mm < 1e-9);
        assert_eq!(report.sample_count, 40);
        assert_eq!(report.per_action.iter().map(|a| a.count).sum::<usize>(), 40);
    }

    #[test]
    fn overall_is_weighted_mean_of_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let errors: Vec<(Option<u16>, f64)> = (0..50)
            .map(|i| {
                (
                    (i % 4 != 0).then_some(i as u16 % 3),
                    rng.gen_range(0.0..100.0),
                )
            })
            .collect();
        let r = EvalReport::from_errors(&errors);
        let weighted: f64 = r
            .per_action
            .iter()
            .map(|a| a.mpjpe_mm * a.count as f64)
            .sum::<f64>()
            / 50.0;
        assert!((weighted - r.overall_mpjpe_mm).abs() < 1e-9);
        assert_eq!(r.per_action[0].action, None);

        let single = EvalReport::from_errors(&[(Some(2), 1.0), (Some(2), 3.0)]);
        assert_eq!(single.per_action.len(), 1);
        assert_eq!(single.per_action[0].mpjpe_mm, single.overall_mpjpe_mm);
    }

    #[test]
    fn missing_normalizer_is_a_config_error() {
        let data = synth_generate(2, 0, Camera::default()).unwrap().dataset;
        let stub = Oracle(Tensor::zeros(&[2, 16, 3]));
        assert!(matches!(
            evaluate(&stub, &data, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_formats() {
        let r = EvalReport::from_errors(&[(None, 2.0), (Some(1), 4.0)]);
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.ends_with("all\t2\t3.000000\n"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}

//! Per-patient segmentation metrics: DSC, AVD, ALD and lesion-wise F1.
//!
//! Lesion instances are connected components of a binary mask. Both-empty
//! conventions apply: a correct empty prediction on a control patient scores
//! DSC = 1 and LF1 = 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

/// Volume boundaries in mL between S/M and M/L.
pub const SMALL_MAX_ML: f64 = 5.0;
pub const MEDIUM_MAX_ML: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LesionCategory {
    N,
    S,
    M,
    L,
}

impl LesionCategory {
    pub const ALL: [LesionCategory; 4] = [Self::N, Self::S, Self::M, Self::L];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::N => "N",
            Self::S => "S",
            Self::M => "M",
            Self::L => "L",
        }
    }
}

impl fmt::Display for LesionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LesionCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "N" => Ok(Self::N),
            "S" => Ok(Self::S),
            "M" => Ok(Self::M),
            "L" => Ok(Self::L),
            other => Err(format!("unknown lesion category {other:?}")),
        }
    }
}

/// Voxel spacing in millimetres. A 2-D study still carries a slice
/// thickness so that mask areas convert to volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub slice: f64,
}

impl Spacing {
    pub fn new(x: f64, y: f64, slice: f64) -> Self {
        Self { x, y, slice }
    }

    pub fn voxel_ml(&self) -> f64 {
        self.x * self.y * self.slice / 1000.0
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.slice]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (0, -1)],
            Self::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            other => Err(Error::InvalidConfig(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledComponents {
    pub labels: Grid<u32>,
    pub count: usize,
}

impl LabeledComponents {
    /// Voxel count per label, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in self.labels.as_slice() {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Two-pass union-find labelling. Labels are `1..=count` in raster order of
/// each component's first voxel.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> LabeledComponents {
    let (rows, cols) = mask.dims();
    let mut provisional = vec![0u32; rows * cols];
    // parent[0] is the background sentinel
    let mut parent: Vec<u32> = vec![0];

    for r in 0..rows {
        for c in 0..cols {
            if !*mask.get(r, c) {
                continue;
            }
            let mut label = 0u32;
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= cols as isize {
                    continue;
                }
                let n = provisional[nr as usize * cols + nc as usize];
                if n == 0 {
                    continue;
                }
                if label == 0 {
                    label = n;
                } else {
                    let (a, b) = (find(&mut parent, label), find(&mut parent, n));
                    if a != b {
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi as usize] = lo;
                    }
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            provisional[r * cols + c] = label;
        }
    }

    let mut relabel = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut out = vec![0u32; rows * cols];
    for (dst, &p) in out.iter_mut().zip(&provisional) {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if relabel[root] == 0 {
            count += 1;
            relabel[root] = count;
        }
        *dst = relabel[root];
    }

    LabeledComponents {
        labels: Grid::from_vec(rows, cols, out).expect("dims preserved"),
        count: count as usize,
    }
}

pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_dims(gt)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        a += p as usize;
        b += g as usize;
        both += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

pub fn volume_ml(mask: &Mask, spacing: Spacing) -> f64 {
    mask.count() as f64 * spacing.voxel_ml()
}

pub fn avd(pred: &Mask, gt: &Mask, spacing: Spacing) -> Result<f64> {
    pred.same_dims(gt)?;
    Ok((volume_ml(pred, spacing) - volume_ml(gt, spacing)).abs())
}

pub fn ald(pred: &Mask, gt: &Mask, connectivity: Connectivity) -> Result<usize> {
    pred.same_dims(gt)?;
    let p = connected_components(pred, connectivity).count;
    let g = connected_components(gt, connectivity).count;
    Ok(p.abs_diff(g))
}

/// Counts components of `labels` that hit `other`. A component counts when
/// it shares at least one voxel with `other` and that shared fraction of its
/// own voxels is at least `min_overlap`.
fn matched_components(labels: &LabeledComponents, other: &Mask, min_overlap: f64) -> usize {
    let sizes = labels.sizes();
    let mut hits = vec![0usize; labels.count];
    for (&l, &o) in labels.labels.as_slice().iter().zip(other.as_slice()) {
        if l > 0 && o {
            hits[l as usize - 1] += 1;
        }
    }
    hits.iter()
        .zip(&sizes)
        .filter(|(&h, &s)| h > 0 && h as f64 / s as f64 >= min_overlap)
        .count()
}

/// Lesion-wise F1 with any-voxel overlap matching.
pub fn lf1(pred: &Mask, gt: &Mask, connectivity: Connectivity) -> Result<f64> {
    lf1_with_overlap(pred, gt, connectivity, 0.0)
}

/// Lesion-wise F1 where a component only matches when at least
/// `min_overlap` of its voxels fall inside the other mask.
pub fn lf1_with_overlap(
    pred: &Mask,
    gt: &Mask,
    connectivity: Connectivity,
    min_overlap: f64,
) -> Result<f64> {
    pred.same_dims(gt)?;
    let pc = connected_components(pred, connectivity);
    let gc = connected_components(gt, connectivity);
    match (pc.count, gc.count) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let recall = matched_components(&gc, pred, min_overlap) as f64 / gc.count as f64;
    let precision = matched_components(&pc, gt, min_overlap) as f64 / pc.count as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn categorize(volume_ml: f64) -> LesionCategory {
    if volume_ml <= 0.0 {
        LesionCategory::N
    } else if volume_ml <= SMALL_MAX_ML {
        LesionCategory::S
    } else if volume_ml <= MEDIUM_MAX_ML {
        LesionCategory::M
    } else {
        LesionCategory::L
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub connectivity: Connectivity,
    /// Minimum overlap fraction for LF1 matching; 0 means any voxel.
    pub lf1_min_overlap: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            lf1_min_overlap: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dsc: f64,
    pub avd_ml: f64,
    pub ald: usize,
    pub lf1: f64,
    pub gt_volume_ml: f64,
    pub gt_lesion_count: usize,
    pub category: LesionCategory,
}

pub fn evaluate_patient(
    pred: &Mask,
    gt: &Mask,
    spacing: Spacing,
    config: &MetricsConfig,
) -> Result<SegmentationMetrics> {
    pred.same_dims(gt)?;
    let gt_volume_ml = volume_ml(gt, spacing);
    let pred_count = connected_components(pred, config.connectivity).count;
    let gt_lesion_count = connected_components(gt, config.connectivity).count;
    Ok(SegmentationMetrics {
        dsc: dsc(pred, gt)?,
        avd_ml: (volume_ml(pred, spacing) - gt_volume_ml).abs(),
        ald: pred_count.abs_diff(gt_lesion_count),
        lf1: lf1_with_overlap(pred, gt, config.connectivity, config.lf1_min_overlap)?,
        gt_volume_ml,
        gt_lesion_count,
        category: categorize(gt_volume_ml),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        let r = rows.len();
        let c = rows[0].len();
        Grid::from_fn(r, c, |i, j| rows[i].as_bytes()[j] == b'#')
    }

    #[test]
    fn components_basic() {
        let empty = mask(&["...", "..."]);
        assert_eq!(connected_components(&empty, Connectivity::Eight).count, 0);

        let diag = mask(&["#.", ".#"]);
        assert_eq!(connected_components(&diag, Connectivity::Eight).count, 1);
        assert_eq!(connected_components(&diag, Connectivity::Four).count, 2);

        // U shape merges two provisional labels
        let u = mask(&["#.#", "#.#", "###"]);
        let lc = connected_components(&u, Connectivity::Four);
        assert_eq!(lc.count, 1);
        assert!(lc.labels.as_slice().iter().all(|&l| l <= 1));
    }

    #[test]
    fn labels_are_gapless() {
        let m = mask(&["#.#.#", ".....", "#.#.#"]);
        let lc = connected_components(&m, Connectivity::Eight);
        assert_eq!(lc.count, 6);
        let mut seen: Vec<u32> = lc
            .labels
            .as_slice()
            .iter()
            .copied()
            .filter(|&l| l > 0)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, (1..=6).collect::<Vec<_>>());
    }

    #[test]
    fn dsc_examples() {
        let a = mask(&["##.", "..."]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask(&["...", ".##"]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let c = mask(&[".##", "..."]);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
        let e = mask(&["...", "..."]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert!(dsc(&a, &mask(&["##"])).is_err());
    }

    #[test]
    fn volume_examples() {
        let one = Spacing::new(1.0, 1.0, 1.0);
        assert_eq!(volume_ml(&Grid::filled(4, 4, false), one), 0.0);
        assert!((volume_ml(&Grid::filled(25, 40, true), one) - 1.0).abs() < 1e-12);
        let ten = Grid::from_fn(1, 20, |_, c| c < 10);
        let v = volume_ml(&ten, Spacing::new(0.93, 0.93, 6.0));
        assert!((v - 0.051894).abs() < 1e-9);
        assert!((v - 0.0519).abs() < 5e-5);
    }

    #[test]
    fn avd_examples() {
        let sp = Spacing::new(1.0, 1.0, 2.0);
        let p = Grid::from_fn(1, 12, |_, c| c < 10);
        let g = Grid::from_fn(1, 12, |_, c| c < 7);
        assert!((avd(&p, &g, sp).unwrap() - 0.006).abs() < 1e-15);
        assert_eq!(avd(&p, &g, sp).unwrap(), avd(&g, &p, sp).unwrap());
        assert_eq!(avd(&p, &p, sp).unwrap(), 0.0);
    }

    #[test]
    fn ald_examples() {
        let g = mask(&["##...", ".....", "....."]);
        let p = mask(&["##..#", ".....", "#.#.."]);
        assert_eq!(ald(&g, &g, Connectivity::Eight).unwrap(), 0);
        assert_eq!(ald(&p, &g, Connectivity::Four).unwrap(), 3);
        let p3 = mask(&["##..#", ".....", "..#.."]);
        assert_eq!(ald(&p3, &g, Connectivity::Eight).unwrap(), 2);
    }

    #[test]
    fn lf1_examples() {
        let g1 = mask(&["##...", ".....", "....."]);
        assert_eq!(lf1(&g1, &g1, Connectivity::Eight).unwrap(), 1.0);

        // gt: two lesions; pred: hits one, plus one pure false positive
        let gt = mask(&["##..##", "......", "......"]);
        let pred = mask(&[".#....", "......", "...##."]);
        assert!((lf1(&pred, &gt, Connectivity::Eight).unwrap() - 0.5).abs() < 1e-15);

        let empty = mask(&["......", "......", "......"]);
        assert_eq!(lf1(&empty, &gt, Connectivity::Eight).unwrap(), 0.0);
        assert_eq!(lf1(&gt, &empty, Connectivity::Eight).unwrap(), 0.0);
        assert_eq!(lf1(&empty, &empty, Connectivity::Eight).unwrap(), 1.0);
    }

    #[test]
    fn lf1_overlap_threshold() {
        let gt = mask(&["####", "...."]);
        let pred = mask(&["#...", "...."]);
        assert_eq!(
            lf1_with_overlap(&pred, &gt, Connectivity::Eight, 0.0).unwrap(),
            1.0
        );
        // the gt lesion is only 25% covered: recall 0, precision 1
        assert_eq!(
            lf1_with_overlap(&pred, &gt, Connectivity::Eight, 0.5).unwrap(),
            0.0
        );
        let half = mask(&["##..", "...."]);
        let f = lf1_with_overlap(&half, &gt, Connectivity::Eight, 0.5).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn categorize_boundaries() {
        use LesionCategory::*;
        let got: Vec<_> = [0.0, 4.999, 5.0, 5.000001, 5.001, 20.0, 20.001, 25.0]
            .iter()
            .map(|&v| categorize(v))
            .collect();
        assert_eq!(got, vec![N, S, S, M, M, M, L, L]);
    }

    #[test]
    fn evaluate_patient_examples() {
        let cfg = MetricsConfig::default();
        let sp = Spacing::new(1.0, 1.0, 2.0);
        let gt = mask(&["##..##", "......", "......"]);
        let m = evaluate_patient(&gt, &gt, sp, &cfg).unwrap();
        assert_eq!((m.dsc, m.avd_ml, m.ald, m.lf1), (1.0, 0.0, 0, 1.0));
        assert_eq!(m.gt_lesion_count, 2);
        assert_eq!(m.category, LesionCategory::S);

        let empty = mask(&["......", "......", "......"]);
        let c = evaluate_patient(&empty, &empty, sp, &cfg).unwrap();
        assert_eq!((c.dsc, c.avd_ml, c.ald, c.lf1), (1.0, 0.0, 0, 1.0));
        assert_eq!(c.category, LesionCategory::N);

        // composed: pred overlaps one gt lesion by 1 voxel and adds a false positive
        let pred = mask(&[".#....", "......", "...##."]);
        let w = evaluate_patient(&pred, &gt, sp, &cfg).unwrap();
        assert!((w.dsc - 2.0 * 1.0 / 7.0).abs() < 1e-15);
        assert!((w.avd_ml - 0.002).abs() < 1e-15);
        assert_eq!(w.ald, 0);
        assert!((w.lf1 - 0.5).abs() < 1e-15);
        assert!((w.gt_volume_ml - 0.008).abs() < 1e-15);
    }
}

//! Label algebra: argmax pseudo-labels, pixel-to-point transfer and
//! in-mask plurality voting.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::CorrespondenceSet;
use crate::scenesynth::{ClassEmbeddingTable, MaskMap, ScoreMap};

/// Label of elements excluded from votes, losses and metrics.
pub const IGNORE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelDomain {
    View { camera: u32, width: u32, height: u32 },
    Points { count: usize },
}

impl LabelDomain {
    pub fn len(&self) -> usize {
        match *self {
            LabelDomain::View { width, height, .. } => width as usize * height as usize,
            LabelDomain::Points { count } => count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSource {
    Clip,
    Net2d,
    Net3d,
    Refined(Box<LabelSource>),
    Gt,
}

impl LabelSource {
    pub fn refined(self) -> Self {
        LabelSource::Refined(Box::new(self))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub domain: LabelDomain,
    pub labels: Vec<i32>,
    pub source: LabelSource,
}

impl LabelMap {
    pub fn new(domain: LabelDomain, labels: Vec<i32>, source: LabelSource) -> Result<Self> {
        if labels.len() != domain.len() {
            return Err(Error::Shape(format!(
                "label map holds {} labels for a domain of {}",
                labels.len(),
                domain.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < IGNORE) {
            return Err(Error::Shape(format!("invalid label {bad}")));
        }
        Ok(LabelMap { domain, labels, source })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<usize> {
        to_class(self.labels[index])
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            Some(bad) => Err(Error::Shape(format!("label {bad} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }
}

pub fn to_class(label: i32) -> Option<usize> {
    (label >= 0).then_some(label as usize)
}

/// Index of the largest entry; ties go to the lowest index and NaN never wins.
pub fn argmax_index<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row argmax over a row-major `n x classes` score matrix.
pub fn argmax_rows<T: PartialOrd + Copy>(scores: &[T], classes: usize) -> Vec<i32> {
    assert!(classes >= 1, "argmax needs at least one class");
    scores.chunks_exact(classes).map(|r| argmax_index(r) as i32).collect()
}

pub fn argmax_label(scores: &ScoreMap, camera: u32) -> LabelMap {
    LabelMap {
        domain: LabelDomain::View {
            camera,
            width: scores.width,
            height: scores.height,
        },
        labels: argmax_rows(&scores.data, scores.classes),
        source: LabelSource::Clip,
    }
}

/// Dot-product scores of feature rows against every class embedding.
pub fn embedding_scores(features: &[f64], table: &ClassEmbeddingTable) -> Vec<f64> {
    features
        .chunks_exact(table.dim)
        .flat_map(|f| (0..table.classes).map(move |c| f.iter().zip(table.row(c)).map(|(a, b)| a * b).sum()))
        .collect()
}

/// How a point seen in several views picks its transferred label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransferRule {
    /// First labeled entry in ascending camera order.
    #[default]
    LowestCamera,
    /// Plurality over all labeled views, ties to the lowest class.
    Vote,
}

fn check_views(corr: &CorrespondenceSet, views: &[(u32, u32)]) -> Result<()> {
    for e in &corr.entries {
        let Some(&(w, h)) = views.get(e.camera as usize) else {
            return Err(Error::Shape(format!("no labels for view {}", e.camera)));
        };
        if e.u >= w || e.v >= h {
            return Err(Error::Shape(format!(
                "entry pixel ({}, {}) outside {w}x{h} view {}",
                e.u, e.v, e.camera
            )));
        }
    }
    Ok(())
}

/// Label of every correspondence entry read from its view's pixel map.
pub fn entry_labels(corr: &CorrespondenceSet, pixel_labels: &[LabelMap]) -> Result<Vec<i32>> {
    let dims: Vec<(u32, u32)> = pixel_labels
        .iter()
        .enumerate()
        .map(|(k, m)| match m.domain {
            LabelDomain::View { camera, width, height } if camera as usize == k => Ok((width, height)),
            _ => Err(Error::Shape(format!("label map {k} is not the pixel map of view {k}"))),
        })
        .collect::<Result<_>>()?;
    check_views(corr, &dims)?;
    Ok(corr
        .entries
        .iter()
        .map(|e| pixel_labels[e.camera as usize].labels[(e.v * dims[e.camera as usize].0 + e.u) as usize])
        .collect())
}

/// Merges entry-indexed labels onto points. Points without a labeled entry
/// keep `fallback[point]` (or IGNORE when no fallback is given).
pub fn merge_entries_to_points(
    corr: &CorrespondenceSet,
    entry_labels: &[i32],
    point_count: usize,
    rule: TransferRule,
    fallback: Option<&[i32]>,
) -> Vec<i32> {
    let mut out: Vec<i32> = match fallback {
        Some(f) => f.to_vec(),
        None => vec![IGNORE; point_count],
    };
    match rule {
        TransferRule::LowestCamera => {
            let mut done = vec![false; point_count];
            for (e, &l) in corr.entries.iter().zip(entry_labels) {
                let p = e.point as usize;
                if !done[p] && l != IGNORE {
                    out[p] = l;
                    done[p] = true;
                }
            }
        }
        TransferRule::Vote => {
            let mut votes: HashMap<u32, HashMap<i32, u32>> = HashMap::new();
            for (e, &l) in corr.entries.iter().zip(entry_labels) {
                if l != IGNORE {
                    *votes.entry(e.point).or_default().entry(l).or_default() += 1;
                }
            }
            for (p, hist) in votes {
                out[p as usize] = plurality(&hist);
            }
        }
    }
    out
}

fn plurality(hist: &HashMap<i32, u32>) -> i32 {
    let mut best = (0u32, IGNORE);
    for (&label, &count) in hist {
        if count > best.0 || (count == best.0 && label < best.1) {
            best = (count, label);
        }
    }
    best.1
}

/// Carries pixel labels to the points paired with them.
pub fn transfer_labels(
    corr: &CorrespondenceSet,
    pixel_labels: &[LabelMap],
    point_count: usize,
    rule: TransferRule,
) -> Result<LabelMap> {
    let per_entry = entry_labels(corr, pixel_labels)?;
    if let Some(bad) = corr.entries.iter().find(|e| e.point as usize >= point_count) {
        return Err(Error::Shape(format!(
            "entry references point {} of {point_count}",
            bad.point
        )));
    }
    let source = pixel_labels.first().map_or(LabelSource::Clip, |m| m.source.clone());
    LabelMap::new(
        LabelDomain::Points { count: point_count },
        merge_entries_to_points(corr, &per_entry, point_count, rule, None),
        source,
    )
}

/// Per-view mask id of every point; `None` where the point is not visible.
pub fn transfer_masks(
    corr: &CorrespondenceSet,
    masks: &[MaskMap],
    point_count: usize,
) -> Result<Vec<Vec<Option<u32>>>> {
    let dims: Vec<(u32, u32)> = masks.iter().map(|m| (m.width, m.height)).collect();
    check_views(corr, &dims)?;
    let mut out = vec![vec![None; point_count]; masks.len()];
    for e in &corr.entries {
        let m = &masks[e.camera as usize];
        out[e.camera as usize][e.point as usize] = Some(m.ids[(e.v * m.width + e.u) as usize]);
    }
    Ok(out)
}

/// Mask id of every correspondence entry.
pub fn entry_masks(corr: &CorrespondenceSet, masks: &[MaskMap]) -> Vec<u32> {
    corr.entries
        .iter()
        .map(|e| {
            let m = &masks[e.camera as usize];
            m.ids[(e.v * m.width + e.u) as usize]
        })
        .collect()
}

/// Replaces every labeled element by the plurality label of its mask.
///
/// IGNORE elements neither vote nor change; elements without a mask keep
/// their label; vote ties go to the lowest class.
pub fn refine_labels(labels: &[i32], mask_ids: &[Option<u32>]) -> Vec<i32> {
    assert_eq!(labels.len(), mask_ids.len(), "labels and mask ids must share a domain");
    let mut hist: HashMap<u32, HashMap<i32, u32>> = HashMap::new();
    for (&l, m) in labels.iter().zip(mask_ids) {
        if let (Some(m), true) = (m, l != IGNORE) {
            *hist.entry(*m).or_default().entry(l).or_default() += 1;
        }
    }
    let winners: HashMap<u32, i32> = hist.iter().map(|(&m, h)| (m, plurality(h))).collect();
    labels
        .iter()
        .zip(mask_ids)
        .map(|(&l, m)| match m {
            Some(m) if l != IGNORE => winners[m],
            _ => l,
        })
        .collect()
}

pub fn refine_by_masks(labels: &LabelMap, mask_ids: &[Option<u32>]) -> Result<LabelMap> {
    if mask_ids.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} mask ids for {} labels",
            mask_ids.len(),
            labels.len()
        )));
    }
    Ok(LabelMap {
        domain: labels.domain,
        labels: refine_labels(&labels.labels, mask_ids),
        source: labels.source.clone().refined(),
    })
}

/// Refines entry-indexed labels within each view's masks.
pub fn refine_entries(corr: &CorrespondenceSet, labels: &[i32], entry_mask_ids: &[u32]) -> Vec<i32> {
    // Mask ids are view-local: key them by (camera, id).
    let keyed: Vec<Option<u32>> = {
        let mut offsets = HashMap::new();
        let mut next = 0u32;
        corr.entries
            .iter()
            .zip(entry_mask_ids)
            .map(|(e, &m)| {
                let base = *offsets.entry(e.camera).or_insert_with(|| {
                    let b = next;
                    next = next.saturating_add(1 << 20);
                    b
                });
                Some(base + m)
            })
            .collect()
    };
    refine_labels(labels, &keyed)
}

/// Point labels refined per view through the transferred masks.
///
/// Returns the refined label of every entry (as seen in its own view) and the
/// per-point merge of those by `rule`; invisible points keep their input label.
pub fn refine_points_per_view(
    corr: &CorrespondenceSet,
    point_labels: &[i32],
    entry_mask_ids: &[u32],
    rule: TransferRule,
) -> (Vec<i32>, Vec<i32>) {
    let gathered: Vec<i32> = corr.entries.iter().map(|e| point_labels[e.point as usize]).collect();
    let per_entry = refine_entries(corr, &gathered, entry_mask_ids);
    let per_point = merge_entries_to_points(corr, &per_entry, point_labels.len(), rule, Some(point_labels));
    (per_entry, per_point)
}

/// Reverse transfer: every entry takes its point's label.
pub fn pull_back(corr: &CorrespondenceSet, point_labels: &[i32]) -> Vec<i32> {
    corr.entries.iter().map(|e| point_labels[e.point as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Correspondence;
    use crate::scenesynth::{mock_text_embeddings, TextEmbeddingConfig};
    use proptest::prelude::*;

    fn view(camera: u32, w: u32, h: u32, labels: Vec<i32>) -> LabelMap {
        LabelMap::new(
            LabelDomain::View {
                camera,
                width: w,
                height: h,
            },
            labels,
            LabelSource::Clip,
        )
        .unwrap()
    }

    fn entry(point: u32, camera: u32, u: u32, v: u32) -> Correspondence {
        Correspondence {
            point,
            camera,
            u,
            v,
            depth: 1.0,
        }
    }

    #[test]
    fn argmax_of_embedding_scores() {
        let cfg = TextEmbeddingConfig {
            orthogonalize: true,
            ..Default::default()
        };
        let t = mock_text_embeddings(4, 6, 3, &cfg).unwrap();
        let scores = embedding_scores(t.row(2), &t);
        assert_eq!(argmax_rows(&scores, 4), vec![2]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[0.5, 0.5], 2), vec![0]);
        assert_eq!(argmax_rows(&[0.1, 0.7, 0.7], 3), vec![1]);
        assert_eq!(argmax_rows(&[f64::NAN, 0.2], 2), vec![0]);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let classes = 5;
        let scores: Vec<f32> = (0..16 * classes)
            .map(|_| rng.random_range(0..4) as f32 * 0.25)
            .collect();
        let got = argmax_rows(&scores, classes);
        for (p, &g) in got.iter().enumerate() {
            let row = &scores[p * classes..(p + 1) * classes];
            let max = row.iter().cloned().fold(f32::MIN, f32::max);
            let first = row.iter().position(|&x| x == max).unwrap();
            assert_eq!(g as usize, first);
        }
    }

    #[test]
    fn single_view_transfer_is_identity() {
        let corr = CorrespondenceSet {
            entries: vec![entry(0, 0, 1, 0)],
        };
        let labels = view(0, 2, 1, vec![3, 5]);
        let t = transfer_labels(&corr, &[labels], 2, TransferRule::LowestCamera).unwrap();
        assert_eq!(t.labels, vec![5, IGNORE]);
    }

    #[test]
    fn lowest_camera_wins_and_vote_alternative() {
        let corr = CorrespondenceSet {
            entries: vec![entry(0, 0, 0, 0), entry(0, 1, 0, 0), entry(0, 2, 0, 0)],
        };
        let maps = vec![view(0, 1, 1, vec![4]), view(1, 1, 1, vec![2]), view(2, 1, 1, vec![2])];
        let low = transfer_labels(&corr, &maps, 1, TransferRule::LowestCamera).unwrap();
        assert_eq!(low.labels, vec![4]);
        let vote = transfer_labels(&corr, &maps, 1, TransferRule::Vote).unwrap();
        assert_eq!(vote.labels, vec![2]);
    }

    #[test]
    fn transfer_matches_grouped_rewalk() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (w, h, n) = (12u32, 10u32, 200u32);
        let mut entries = Vec::new();
        for cam in 0..2 {
            for v in 0..h {
                for u in 0..w {
                    if rng.random::<f64>() < 0.7 {
                        entries.push(entry(rng.random_range(0..n), cam, u, v));
                    }
                }
            }
        }
        let corr = CorrespondenceSet { entries };
        let maps: Vec<LabelMap> = (0..2)
            .map(|k| view(k, w, h, (0..w * h).map(|_| rng.random_range(0..6)).collect()))
            .collect();
        let got = transfer_labels(&corr, &maps, n as usize, TransferRule::LowestCamera).unwrap();

        // oracle: group by point, pick the minimal camera entry
        let groups = corr.by_point(n as usize);
        for (p, g) in groups.iter().enumerate() {
            let expected = g
                .iter()
                .map(|&i| corr.entries[i as usize])
                .min_by_key(|e| (e.camera, e.v, e.u))
                .map_or(IGNORE, |e| maps[e.camera as usize].labels[(e.v * w + e.u) as usize]);
            assert_eq!(got.labels[p], expected, "point {p}");
        }
    }

    #[test]
    fn mask_transfer_reads_pixel_ids() {
        let corr = CorrespondenceSet {
            entries: vec![entry(1, 0, 1, 1), entry(0, 1, 0, 0)],
        };
        let masks = vec![
            MaskMap {
                width: 2,
                height: 2,
                count: 8,
                ids: vec![0, 1, 2, 7],
            },
            MaskMap {
                width: 1,
                height: 1,
                count: 1,
                ids: vec![0],
            },
        ];
        let t = transfer_masks(&corr, &masks, 3).unwrap();
        assert_eq!(t[0], vec![None, Some(7), None]);
        assert_eq!(t[1], vec![Some(0), None, None]);
        for e in &corr.entries {
            let m = &masks[e.camera as usize];
            assert_eq!(
                t[e.camera as usize][e.point as usize],
                Some(m.ids[(e.v * m.width + e.u) as usize])
            );
        }
    }

    #[test]
    fn forced_plurality() {
        let out = refine_labels(&[2, 2, 5], &[Some(0), Some(0), Some(0)]);
        assert_eq!(out, vec![2, 2, 2]);
    }

    #[test]
    fn vote_tie_goes_low() {
        assert_eq!(refine_labels(&[2, 1], &[Some(3), Some(3)]), vec![1, 1]);
    }

    #[test]
    fn ignore_neither_votes_nor_changes() {
        let out = refine_labels(
            &[IGNORE, IGNORE, 4, 3, 3],
            &[Some(0), Some(0), Some(1), Some(1), Some(1)],
        );
        assert_eq!(out, vec![IGNORE, IGNORE, 3, 3, 3]);
    }

    #[test]
    fn refine_rejects_mismatched_domains() {
        let m = view(0, 2, 1, vec![0, 1]);
        assert!(refine_by_masks(&m, &[Some(0)]).is_err());
    }

    #[test]
    fn per_view_point_refinement_merges_by_camera() {
        let corr = CorrespondenceSet {
            entries: vec![
                entry(0, 0, 0, 0),
                entry(1, 0, 1, 0),
                entry(2, 0, 2, 0),
                entry(0, 1, 0, 0),
                entry(3, 1, 1, 0),
            ],
        };
        let labels = vec![1, 2, 2, 4, 0];
        // view 0: one mask over points 0,1,2 -> all 2; view 1: points 0,3 tie 1 vs 4 -> 1
        let masks = vec![0, 0, 0, 5, 5];
        let (per_entry, per_point) = refine_points_per_view(&corr, &labels, &masks, TransferRule::LowestCamera);
        assert_eq!(per_entry, vec![2, 2, 2, 1, 1]);
        assert_eq!(per_point, vec![2, 2, 2, 1, 0]);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<i32>, Vec<Option<u32>>)> {
        (1usize..200, 1u32..12, 1i32..8).prop_flat_map(|(n, masks, classes)| {
            (
                proptest::collection::vec(prop_oneof![1 => Just(IGNORE), 6 => 0..classes], n),
                proptest::collection::vec(proptest::option::weighted(0.9, 0..masks), n),
            )
        })
    }

    proptest! {
        #[test]
        fn refinement_is_idempotent((labels, masks) in arb_instance()) {
            let once = refine_labels(&labels, &masks);
            prop_assert_eq!(refine_labels(&once, &masks), once);
        }

        #[test]
        fn refined_masks_are_constant((labels, masks) in arb_instance()) {
            let out = refine_labels(&labels, &masks);
            let mut seen: HashMap<u32, i32> = HashMap::new();
            for (l, m) in out.iter().zip(&masks) {
                if let (Some(m), true) = (m, *l != IGNORE) {
                    prop_assert_eq!(*seen.entry(*m).or_insert(*l), *l);
                }
            }
        }

        #[test]
        fn pure_masks_are_a_fixpoint(
            classes in proptest::collection::vec(0i32..6, 1..10),
            assignment in proptest::collection::vec(0usize..100, 1..150),
        ) {
            let masks: Vec<Option<u32>> = assignment.iter().map(|&a| Some((a % classes.len()) as u32)).collect();
            let labels: Vec<i32> = masks.iter().map(|m| classes[m.unwrap() as usize]).collect();
            prop_assert_eq!(refine_labels(&labels, &masks), labels);
        }

        #[test]
        fn mask_relabeling_is_irrelevant((labels, masks) in arb_instance(), shift in 0u32..1000) {
            let permuted: Vec<Option<u32>> = masks.iter().map(|m| m.map(|m| (m * 7919 + shift) ^ 0x5a5a)).collect();
            prop_assert_eq!(refine_labels(&labels, &masks), refine_labels(&labels, &permuted));
        }
    }
}

use cns_core::eval::{confusion, latent_separation, median, miou};
use cns_core::pseudolabel::IGNORE;
use proptest::prelude::*;

#[test]
fn four_pixel_example() {
    let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    // rows are ground truth, columns predictions
    assert_eq!(cm.counts, vec![vec![1, 0], vec![1, 2]]);
    let (per_class, mean) = miou(&cm);
    assert_eq!(per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert!((mean.unwrap() - 7.0 / 12.0).abs() < 1e-15);
    assert_eq!(cm.error_rate(), Some(0.25));
}

#[test]
fn absent_class_is_left_out_of_the_mean() {
    let cm = confusion(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
    let (per_class, mean) = miou(&cm);
    assert_eq!(per_class, vec![Some(1.0), Some(1.0), None]);
    assert_eq!(mean, Some(1.0));
    assert_eq!(miou(&confusion(&[], &[], 3).unwrap()).1, None);
}

#[test]
fn ignored_ground_truth_is_skipped() {
    let cm = confusion(&[2, 0, 1], &[IGNORE, 0, 1], 3).unwrap();
    assert_eq!(cm.total(), 2);
    assert_eq!(cm.ignored, 1);
    assert!(confusion(&[IGNORE], &[0], 3).is_err());
    assert!(confusion(&[3], &[0], 3).is_err());
    assert!(confusion(&[0, 0], &[0], 3).is_err());
}

#[test]
fn merging_equals_concatenation() {
    let (p1, g1) = (vec![0, 1, 2, 2], vec![0, 2, 2, 1]);
    let (p2, g2) = (vec![1, 1], vec![1, 0]);
    let mut a = confusion(&p1, &g1, 3).unwrap();
    a.merge(&confusion(&p2, &g2, 3).unwrap());
    let b = confusion(&[p1, p2].concat(), &[g1, g2].concat(), 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn medians() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
}

/// Direct pair loop over all unordered pairs.
fn pairwise(latents: &[f64], dim: usize, objects: &[u32]) -> Option<(f64, f64)> {
    let unit: Vec<Vec<f64>> = latents
        .chunks(dim)
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
        })
        .collect();
    let (mut ws, mut wn, mut cs, mut cn) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if objects[i] == objects[j] {
                ws += c;
                wn += 1;
            } else {
                cs += c;
                cn += 1;
            }
        }
    }
    (wn > 0 && cn > 0).then(|| (ws / wn as f64, cs / cn as f64))
}

#[test]
fn separation_of_two_clusters() {
    let latents = [1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0];
    let (w, c) = latent_separation(&latents, 2, &[0, 0, 1, 1]).unwrap();
    assert!((w - 1.0).abs() < 1e-12 && c.abs() < 1e-12);
    assert_eq!(latent_separation(&latents, 2, &[0, 0, 0, 0]), None);
}

fn class_permutation() -> impl Strategy<Value = Vec<i32>> {
    Just((0..5).collect::<Vec<i32>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn separation_matches_pair_loop(
        rows in proptest::collection::vec((proptest::collection::vec(-2.0f64..2.0, 3), 0u32..4), 2..40)
    ) {
        let latents: Vec<f64> = rows.iter().flat_map(|(v, _)| v.clone()).collect();
        let objects: Vec<u32> = rows.iter().map(|(_, o)| *o).collect();
        let got = latent_separation(&latents, 3, &objects);
        let want = pairwise(&latents, 3, &objects);
        prop_assert_eq!(got.is_some(), want.is_some());
        if let (Some(g), Some(w)) = (got, want) {
            prop_assert!((g.0 - w.0).abs() < 1e-9 && (g.1 - w.1).abs() < 1e-9, "{:?} vs {:?}", g, w);
        }
    }

    #[test]
    fn miou_ignores_class_names_and_order(
        pairs in proptest::collection::vec((0i32..5, -1i32..5), 1..200),
        perm in class_permutation(),
        rotate in 0usize..200,
    ) {
        let pred: Vec<i32> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<i32> = pairs.iter().map(|p| p.1).collect();
        let (iou, mean) = miou(&confusion(&pred, &gt, 5).unwrap());

        let relabel = |v: &[i32]| -> Vec<i32> { v.iter().map(|&x| if x < 0 { x } else { perm[x as usize] }).collect() };
        let (iou_p, mean_p) = miou(&confusion(&relabel(&pred), &relabel(&gt), 5).unwrap());
        for c in 0..5 {
            prop_assert_eq!(iou[c], iou_p[perm[c] as usize]);
        }
        prop_assert_eq!(mean.map(|m| (m * 1e12).round()), mean_p.map(|m| (m * 1e12).round()));

        let k = rotate % pred.len();
        let (mut pr, mut gr) = (pred.clone(), gt.clone());
        pr.rotate_left(k);
        gr.rotate_left(k);
        prop_assert_eq!(miou(&confusion(&pr, &gr, 5).unwrap()).0, iou);
    }

    #[test]
    fn per_class_iou_matches_set_counts(pairs in proptest::collection::vec((0i32..4, 0i32..4), 1..100)) {
        let pred: Vec<i32> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<i32> = pairs.iter().map(|p| p.1).collect();
        let (iou, _) = miou(&confusion(&pred, &gt, 4).unwrap());
        for c in 0..4 {
            let inter = pairs.iter().filter(|p| p.0 == c && p.1 == c).count();
            let union = pairs.iter().filter(|p| p.0 == c || p.1 == c).count();
            let want = (union > 0).then(|| inter as f64 / union as f64);
            prop_assert_eq!(iou[c as usize], want);
        }
    }
}

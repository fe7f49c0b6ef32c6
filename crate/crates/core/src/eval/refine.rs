//! Raw versus mask-refined oracle labels, counted against rendered ground truth.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::Result;
use crate::pseudolabel::{argmax_label, refine_by_masks};
use crate::scenesynth::{OracleOutputs, RenderedScene, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRefineStats {
    pub camera: usize,
    /// Pixels with a visible point; only these are scored.
    pub pixels: u64,
    pub raw_errors: u64,
    pub refined_errors: u64,
    pub masks: u32,
    pub mean_mask_px: f64,
    /// Share of a mask's visible pixels that carry its most common class,
    /// averaged over masks with at least one visible pixel.
    pub mean_purity: f64,
    pub min_purity: f64,
    pub impure_masks: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub views: Vec<ViewRefineStats>,
    /// Refined label of every pixel, per view.
    pub refined: Vec<Vec<i32>>,
}

fn rate(errors: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| errors as f64 / total as f64)
}

impl RefineReport {
    pub fn pixels(&self) -> u64 {
        self.views.iter().map(|v| v.pixels).sum()
    }

    pub fn raw_error_rate(&self) -> Option<f64> {
        rate(self.views.iter().map(|v| v.raw_errors).sum(), self.pixels())
    }

    pub fn refined_error_rate(&self) -> Option<f64> {
        rate(self.views.iter().map(|v| v.refined_errors).sum(), self.pixels())
    }

    pub fn error_csv(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:.6}"));
        let mut out = String::from("view,pixels,raw_errors,refined_errors,raw_rate,refined_rate\n");
        for v in &self.views {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                v.camera,
                v.pixels,
                v.raw_errors,
                v.refined_errors,
                fmt(rate(v.raw_errors, v.pixels)),
                fmt(rate(v.refined_errors, v.pixels))
            );
        }
        let raw: u64 = self.views.iter().map(|v| v.raw_errors).sum();
        let refined: u64 = self.views.iter().map(|v| v.refined_errors).sum();
        let _ = writeln!(
            out,
            "all,{},{raw},{refined},{},{}",
            self.pixels(),
            fmt(self.raw_error_rate()),
            fmt(self.refined_error_rate())
        );
        out
    }

    pub fn purity_csv(&self) -> String {
        let mut out = String::from("view,masks,mean_mask_px,mean_purity,min_purity,impure_masks\n");
        for v in &self.views {
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.6},{:.6},{}",
                v.camera, v.masks, v.mean_mask_px, v.mean_purity, v.min_purity, v.impure_masks
            );
        }
        out
    }
}

/// Oracle argmax and its in-mask vote for every view.
pub fn refine_report(scene: &Scene, rendered: &RenderedScene, oracles: &OracleOutputs) -> Result<RefineReport> {
    oracles.validate(scene)?;
    let mut views = Vec::with_capacity(scene.cameras.len());
    let mut refined_all = Vec::with_capacity(scene.cameras.len());
    for k in 0..scene.cameras.len() {
        let raw = argmax_label(&oracles.scores[k], k as u32);
        let mask = &oracles.masks[k];
        let ids: Vec<Option<u32>> = mask.ids.iter().map(|&i| Some(i)).collect();
        let refined = refine_by_masks(&raw, &ids)?;
        let gt = rendered.gt_pixels(scene, k);

        let (mut pixels, mut raw_errors, mut refined_errors) = (0, 0, 0);
        let mut hist: HashMap<u32, HashMap<u32, u64>> = HashMap::new();
        for (p, g) in gt.iter().enumerate() {
            let Some(g) = *g else { continue };
            pixels += 1;
            raw_errors += u64::from(raw.labels[p] != g as i32);
            refined_errors += u64::from(refined.labels[p] != g as i32);
            *hist.entry(mask.ids[p]).or_default().entry(g).or_default() += 1;
        }
        let purities: Vec<f64> = hist
            .values()
            .map(|h| *h.values().max().unwrap() as f64 / h.values().sum::<u64>() as f64)
            .collect();
        views.push(ViewRefineStats {
            camera: k,
            pixels,
            raw_errors,
            refined_errors,
            masks: mask.count,
            mean_mask_px: mask.ids.len() as f64 / f64::from(mask.count.max(1)),
            mean_purity: if purities.is_empty() {
                1.0
            } else {
                purities.iter().sum::<f64>() / purities.len() as f64
            },
            min_purity: purities.iter().copied().fold(1.0, f64::min),
            impure_masks: purities.iter().filter(|&&p| p < 1.0).count() as u32,
        });
        refined_all.push(refined.labels);
    }
    Ok(RefineReport {
        views,
        refined: refined_all,
    })
}

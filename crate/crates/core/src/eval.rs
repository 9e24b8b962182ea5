//! Identity metrics and the two ablation protocols: matching accuracy by
//! temporal distance and the occlusion-extension sweep.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::assign::solve_max;
use crate::model::{embed_frame, match_matrix, ModelError, ModelParams};
use crate::mot::TrackEntry;
use crate::sim::{extend_occlusions, Scene};
use crate::tape::Mat;
use crate::track::{track_frames, TrackError, TrackerConfig};
use crate::types::iou;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// Temporal-distance buckets used by the matching-accuracy protocol.
pub const DISTANCE_BUCKETS: [(usize, usize); 5] = [(1, 4), (5, 8), (9, 16), (17, 32), (33, 48)];

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub idf1: f64,
    pub idsw: usize,
    /// Matching accuracy (percent) per distance bucket label.
    pub bucket_accuracy: BTreeMap<String, f64>,
    /// Occlusion sweep: L -> (tracker IDF1, IoU-baseline IDF1).
    pub l_curve: BTreeMap<usize, (f64, f64)>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        out.push_str(&format!("idf1,,{:.6}\n", self.idf1));
        out.push_str(&format!("idsw,,{}\n", self.idsw));
        for (bucket, acc) in &self.bucket_accuracy {
            out.push_str(&format!("bucket_accuracy,{bucket},{acc:.3}\n"));
        }
        for (l, (ours, baseline)) in &self.l_curve {
            out.push_str(&format!("l_curve_tracker,{l},{ours:.6}\n"));
            out.push_str(&format!("l_curve_baseline,{l},{baseline:.6}\n"));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "IDF1 {:.4}  IDsw {}", self.idf1, self.idsw)?;
        if !self.bucket_accuracy.is_empty() {
            writeln!(f, "matching accuracy by |t-r|:")?;
            for (bucket, acc) in &self.bucket_accuracy {
                writeln!(f, "  {bucket:>6}: {acc:6.2}%")?;
            }
        }
        if !self.l_curve.is_empty() {
            writeln!(f, "occlusion sweep (L: tracker / IoU baseline):")?;
            for (l, (ours, baseline)) in &self.l_curve {
                writeln!(f, "  L={l:<3} {ours:.4} / {baseline:.4}")?;
            }
        }
        Ok(())
    }
}

fn group_by_frame(entries: &[TrackEntry]) -> BTreeMap<usize, Vec<&TrackEntry>> {
    let mut map: BTreeMap<usize, Vec<&TrackEntry>> = BTreeMap::new();
    for e in entries {
        map.entry(e.frame).or_default().push(e);
    }
    map
}

/// IDF1 and identity switches between ground-truth and predicted tracks.
///
/// IDF1 follows the standard identity-metric construction: an optimal
/// one-to-one mapping between ground-truth identities and predicted track
/// ids maximizing per-frame overlap (IoU >= 0.5 counts as a match), then
/// `2*IDTP / (2*IDTP + IDFP + IDFN)`. Identity switches count label changes
/// between consecutive matched frames of each ground-truth identity under
/// per-frame matching.
pub fn idf1_tracks(gt: &[TrackEntry], pred: &[TrackEntry]) -> (f64, usize) {
    if gt.is_empty() && pred.is_empty() {
        return (1.0, 0);
    }
    if gt.is_empty() || pred.is_empty() {
        return (0.0, 0);
    }
    let gt_frames = group_by_frame(gt);
    let pred_frames = group_by_frame(pred);

    // ids in deterministic order
    let mut gt_ids: Vec<i64> = gt.iter().map(|e| e.track_id).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let mut pred_ids: Vec<i64> = pred.iter().map(|e| e.track_id).collect();
    pred_ids.sort_unstable();
    pred_ids.dedup();
    let gt_index: BTreeMap<i64, usize> = gt_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let pred_index: BTreeMap<i64, usize> =
        pred_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    // per-frame overlap counts + per-frame matching for switch counting
    let mut overlap: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut matched_seq: BTreeMap<i64, Vec<i64>> = BTreeMap::new(); // gt id -> pred ids in frame order
    for (frame, gts) in &gt_frames {
        let Some(preds) = pred_frames.get(frame) else {
            continue;
        };
        let mut scores = Mat::zeros(gts.len(), preds.len());
        for (i, g) in gts.iter().enumerate() {
            for (j, p) in preds.iter().enumerate() {
                let v = iou(&g.bbox, &p.bbox);
                *scores.at_mut(i, j) = if v >= 0.5 { v } else { 0.0 };
            }
        }
        for (i, g) in gts.iter().enumerate() {
            for (j, p) in preds.iter().enumerate() {
                if scores.at(i, j) >= 0.5 {
                    *overlap
                        .entry((gt_index[&g.track_id], pred_index[&p.track_id]))
                        .or_default() += 1;
                }
            }
        }
        let assignment = solve_max(&scores);
        for (i, assigned) in assignment.iter().enumerate() {
            if let Some(j) = assigned {
                if scores.at(i, *j) >= 0.5 {
                    matched_seq
                        .entry(gts[i].track_id)
                        .or_default()
                        .push(preds[*j].track_id);
                }
            }
        }
    }

    // optimal identity-level mapping by overlap count
    let mut id_scores = Mat::zeros(gt_ids.len(), pred_ids.len());
    for (&(gi, pj), &count) in &overlap {
        *id_scores.at_mut(gi, pj) = count as f64;
    }
    let mapping = solve_max(&id_scores);
    let idtp: f64 = mapping
        .iter()
        .enumerate()
        .filter_map(|(gi, pj)| pj.map(|pj| id_scores.at(gi, pj)))
        .sum();
    let idf1 = 2.0 * idtp / (gt.len() + pred.len()) as f64;

    // switches: changes along each gt identity's matched-frame sequence
    let mut idsw = 0usize;
    for seq in matched_seq.values() {
        idsw += seq.windows(2).filter(|w| w[0] != w[1]).count();
    }
    (idf1, idsw)
}

/// IDF1/IDsw of predicted tracks against a simulated scene's ground truth.
pub fn idf1(scene: &Scene, pred: &[TrackEntry]) -> (f64, usize) {
    idf1_tracks(&scene.gt_entries(), pred)
}

fn bucket_label(lo: usize, hi: usize) -> String {
    format!("{lo}-{hi}")
}

fn bucket_of(d: usize) -> Option<usize> {
    DISTANCE_BUCKETS.iter().position(|&(lo, hi)| d >= lo && d <= hi)
}

/// Matching-probability accuracy by temporal distance: over all
/// ground-truth-linked object pairs `(o at t, frame r)` with
/// `1 <= r - t <= 48`, a hit is scored when the argmax of the matching row
/// lands on the same identity's object at `r`, or on null when the identity
/// has no detection there. Returns percent accuracy per bucket; empty
/// buckets are absent.
pub fn match_accuracy_by_distance(
    params: &ModelParams,
    scene: &Scene,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let frames = &scene.clip.frames;
    let embeds: Vec<_> = frames
        .iter()
        .map(|f| embed_frame(params, f))
        .collect::<Result<Vec<_>, _>>()?;
    // identity -> local index per frame
    let index_of: Vec<BTreeMap<i64, usize>> = frames
        .iter()
        .map(|f| {
            f.real_detections()
                .iter()
                .map(|d| (d.gt_identity.expect("simulated detection carries identity"), d.local_index))
                .collect()
        })
        .collect();

    let max_d = DISTANCE_BUCKETS.last().unwrap().1;
    let mut hits = [0usize; DISTANCE_BUCKETS.len()];
    let mut totals = [0usize; DISTANCE_BUCKETS.len()];
    for t in 0..frames.len() {
        let hi = (t + max_d).min(frames.len() - 1);
        for r in (t + 1)..=hi {
            let Some(bucket) = bucket_of(r - t) else {
                continue;
            };
            let m = match_matrix(&embeds[t], &embeds[r]);
            let null_idx = frames[r].null_index();
            for d in frames[t].real_detections() {
                let g = d.gt_identity.expect("simulated detection carries identity");
                let target = index_of[r].get(&g).copied().unwrap_or(null_idx);
                let row = m.p.row(d.local_index);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                totals[bucket] += 1;
                hits[bucket] += (best == target) as usize;
            }
        }
    }

    let mut out = BTreeMap::new();
    for (b, &(lo, hi)) in DISTANCE_BUCKETS.iter().enumerate() {
        if totals[b] > 0 {
            out.insert(bucket_label(lo, hi), 100.0 * hits[b] as f64 / totals[b] as f64);
        }
    }
    Ok(out)
}

/// The occlusion-extension protocol: for every `L`, extend all occlusions
/// to at least `L` frames, run both the given tracker and the
/// `blend_weight = 0` IoU baseline on the detector view, and record IDF1
/// against the extended scene's own ground truth.
pub fn occlusion_sweep(
    params: &ModelParams,
    scene: &Scene,
    l_values: &[usize],
    config: &TrackerConfig,
) -> Result<BTreeMap<usize, (f64, f64)>, EvalError> {
    let baseline_config = TrackerConfig {
        blend_weight: 0.0,
        ..config.clone()
    };
    let mut curve = BTreeMap::new();
    for &l in l_values {
        let extended = extend_occlusions(scene, l);
        let frames = extended.detector_frames();
        let gt = extended.gt_entries();
        let (ours_entries, _) = track_frames(&frames, params, config)?;
        let (base_entries, _) = track_frames(&frames, params, &baseline_config)?;
        let (ours, _) = idf1_tracks(&gt, &ours_entries);
        let (baseline, _) = idf1_tracks(&gt, &base_entries);
        curve.insert(l, (ours, baseline));
    }
    Ok(curve)
}

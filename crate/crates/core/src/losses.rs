//! Training objectives: cross-relu mining losses, identity classification,
//! and bidirectional hinge ranking, plus their weighted combination.

use serde::{Deserialize, Serialize};

use crate::encoders::EncodedBatch;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::similarity::{BatchScores, Branches};

/// Slopes, biases, margins and mixing weights of every objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Slope of the matched-pair hinge.
    pub m1: f64,
    /// Bias of the matched-pair hinge; word scores must clear `b1/m1`.
    pub b1: f64,
    /// Slope of the mismatched-pair hinge.
    pub m2: f64,
    /// Bias of the mismatched-pair hinge; the weakest word must fall below `-b2/m2`.
    pub b2: f64,
    /// Weight of the local identity terms.
    pub lambda1: f64,
    /// Ranking margin.
    pub alpha: f64,
    /// Weight of the local ranking term.
    pub lambda2: f64,
    /// Weight of the local-negative ranking term.
    pub lambda3: f64,
    pub cross_relu_weight: f64,
    pub identity_weight: f64,
    pub ranking_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            m1: 1.0,
            b1: 0.001,
            m2: 1.0,
            b2: 0.15,
            lambda1: 0.5,
            alpha: 0.2,
            lambda2: 0.5,
            lambda3: 0.25,
            cross_relu_weight: 1.0,
            identity_weight: 1.0,
            ranking_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("m1", self.m1),
            ("b1", self.b1),
            ("m2", self.m2),
            ("b2", self.b2),
            ("lambda1", self.lambda1),
            ("alpha", self.alpha),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("cross_relu_weight", self.cross_relu_weight),
            ("identity_weight", self.identity_weight),
            ("ranking_weight", self.ranking_weight),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values; `total` is the weighted sum actually optimized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_m: f64,
    pub l_mm: f64,
    pub l_id: f64,
    pub l_r_global: f64,
    pub l_r_local: f64,
    pub l_r_localneg: f64,
    pub total: f64,
}

fn shift(tape: &mut Tape, scores: Var, boundary: Option<Var>) -> Result<Var> {
    match boundary {
        Some(tau) => tape.sub_scalar(scores, tau),
        None => Ok(scores),
    }
}

/// Mean over words of `max(-m1·s + b1, 0)` for one matched pair.
pub fn cross_relu_matched(tape: &mut Tape, word_scores: Var, w: &LossWeights) -> Result<Var> {
    let n = tape.value(word_scores).len();
    matched_hinge(tape, word_scores, std::slice::from_ref(&(0..n)), w, None)
}

/// `max(m2·min(s) + b2, 0)` for one mismatched pair.
pub fn cross_relu_mismatched(tape: &mut Tape, word_scores: Var, w: &LossWeights) -> Result<Var> {
    let n = tape.value(word_scores).len();
    mismatched_hinge(tape, word_scores, std::slice::from_ref(&(0..n)), w, None)
}

/// Matched hinge averaged within each segment, then across segments.
fn matched_hinge(
    tape: &mut Tape,
    scores: Var,
    segments: &[std::ops::Range<usize>],
    w: &LossWeights,
    boundary: Option<Var>,
) -> Result<Var> {
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Input("matched loss needs at least one word per pair".into()));
    }
    let shifted = shift(tape, scores, boundary)?;
    let scaled = tape.scale(shifted, -w.m1);
    let biased = tape.offset(scaled, w.b1);
    let hinge = tape.relu(biased);
    let pairs = segments.len() as f64;
    let mut weights = vec![0.0; tape.value(hinge).len()];
    for seg in segments {
        let wt = 1.0 / (pairs * seg.len() as f64);
        for slot in &mut weights[seg.clone()] {
            *slot = wt;
        }
    }
    tape.weighted_sum(hinge, &weights)
}

/// Mismatched hinge on each segment's minimum, averaged across segments.
fn mismatched_hinge(
    tape: &mut Tape,
    scores: Var,
    segments: &[std::ops::Range<usize>],
    w: &LossWeights,
    boundary: Option<Var>,
) -> Result<Var> {
    if segments.is_empty() {
        return Err(Error::Input("mismatched loss needs at least one pair".into()));
    }
    let mins = tape.segment_min(scores, segments)?;
    let shifted = shift(tape, mins, boundary)?;
    let scaled = tape.scale(shifted, w.m2);
    let biased = tape.offset(scaled, w.b2);
    let hinge = tape.relu(biased);
    tape.mean(hinge)
}

pub fn cross_relu_matched_value(word_scores: &[f64], w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(word_scores.to_vec())?);
    let l = cross_relu_matched(&mut tape, s, w)?;
    Ok(tape.scalar(l))
}

pub fn cross_relu_mismatched_value(word_scores: &[f64], w: &LossWeights) -> Result<f64> {
    if word_scores.is_empty() {
        return Err(Error::Input("mismatched loss needs at least one word".into()));
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(word_scores.to_vec())?);
    let l = cross_relu_mismatched(&mut tape, s, w)?;
    Ok(tape.scalar(l))
}

/// Mean cross-entropy of `softmax(x · W)` at the true labels.
///
/// `features` is `[N, D]`, `classifier` is `[D, classes]`.
pub fn identity_loss(tape: &mut Tape, features: Var, labels: &[usize], classifier: Var) -> Result<Var> {
    let logits = tape.matmul(features, classifier)?;
    tape.cross_entropy(logits, labels)
}

/// Bidirectional hinge for one matched pair and its two negatives.
pub fn ranking_loss(s_matched: f64, s_img_negtext: f64, s_negimg_text: f64, alpha: f64) -> f64 {
    (alpha - s_matched + s_img_negtext).max(0.0) + (alpha - s_matched + s_negimg_text).max(0.0)
}

/// `L_r(s_g) + λ2·L_r(s_l) + λ3·L_r(s_local_neg)`.
pub fn combined_ranking(global: f64, local: f64, local_neg: f64, w: &LossWeights) -> f64 {
    global + w.lambda2 * local + w.lambda3 * local_neg
}

/// Which images and texts a batch holds and how they pair up.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub image_identities: Vec<usize>,
    pub text_identities: Vec<usize>,
    /// `(image position, text position)` of same-identity pairs.
    pub matched: Vec<(usize, usize)>,
    /// `(image position, text position)` of cross-identity pairs.
    pub mismatched: Vec<(usize, usize)>,
}

/// Hardest-negative ranking loss over the matched pairs of a similarity grid.
///
/// For each matched pair the negative text is the highest-scoring in-batch
/// text of another identity, and the negative image likewise. A direction
/// without any candidate contributes nothing.
pub fn ranking_batch(tape: &mut Tape, sim: Var, layout: &BatchLayout, alpha: f64) -> Result<Var> {
    let t_count = layout.text_identities.len();
    let i_count = layout.image_identities.len();
    let n = layout.matched.len();
    if n == 0 {
        return Err(Error::Input("ranking loss needs matched pairs".into()));
    }
    let sim_t = tape.transpose(sim);
    let mut hinges = Vec::new();

    for image_side in [true, false] {
        let (grid, width) = if image_side { (sim, t_count) } else { (sim_t, i_count) };
        let mut rows = Vec::new();
        let mut pos_idx = Vec::new();
        let mut allowed = Vec::new();
        for &(i, t) in &layout.matched {
            let (anchor_row, anchor_id) = if image_side {
                (i, layout.image_identities[i])
            } else {
                (t, layout.text_identities[t])
            };
            let others = if image_side {
                &layout.text_identities
            } else {
                &layout.image_identities
            };
            if others.iter().all(|&id| id == anchor_id) {
                continue;
            }
            rows.push(anchor_row);
            pos_idx.push(i * t_count + t);
            allowed.extend(others.iter().map(|&id| id != anchor_id));
        }
        if rows.is_empty() {
            continue;
        }
        debug_assert_eq!(allowed.len(), rows.len() * width);
        let sel = tape.select_rows(grid, &rows)?;
        let neg = tape.masked_max_rows(sel, &allowed)?;
        let pos = tape.gather(sim, &pos_idx)?;
        let gap = tape.sub(neg, pos)?;
        let margin = tape.offset(gap, alpha);
        let hinge = tape.relu(margin);
        hinges.push(tape.sum(hinge));
    }

    let zero = tape.constant(Tensor::scalar(0.0));
    let mut total = zero;
    for h in hinges {
        total = tape.add(total, h)?;
    }
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Classifier handles for the identity loss.
#[derive(Clone, Copy, Debug)]
pub struct Classifiers {
    /// `[P, identities]`
    pub global: Var,
    /// `[K·P, identities]`
    pub local: Var,
}

/// Tape handles of every loss term.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub l_m: Option<Var>,
    pub l_mm: Option<Var>,
    pub l_id: Option<Var>,
    pub l_r_global: Option<Var>,
    pub l_r_local: Option<Var>,
    pub l_r_localneg: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossReport {
            l_m: val(self.l_m),
            l_mm: val(self.l_mm),
            l_id: val(self.l_id),
            l_r_global: val(self.l_r_global),
            l_r_local: val(self.l_r_local),
            l_r_localneg: val(self.l_r_localneg),
            total: tape.scalar(self.total),
        }
    }
}

/// What the objective includes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub branches: Branches,
    /// Rank on `s_local_neg` (only meaningful with the mining branch).
    pub local_neg_ranking: bool,
    /// Trainable boundary shifting the cross-relu hinges.
    pub boundary: Option<Var>,
}

/// Assembles every enabled objective for one batch.
///
/// Cross-relu terms are averaged within the matched and mismatched subsets;
/// identity and ranking terms are averaged over their samples and pairs.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    scores: &BatchScores,
    images: &EncodedBatch,
    texts: &EncodedBatch,
    layout: &BatchLayout,
    classifiers: Classifiers,
    spec: ObjectiveSpec,
    w: &LossWeights,
) -> Result<LossTerms> {
    let b = spec.branches;
    let mut terms: Vec<(Var, f64)> = Vec::new();

    let (mut l_m, mut l_mm) = (None, None);
    if let (true, Some(word_max)) = (b.fpm, scores.word_max) {
        let words = tape.value(word_max).cols();
        let gather_pairs = |pairs: &[(usize, usize)]| {
            let mut idx = Vec::new();
            let mut segs = Vec::new();
            for &(i, t) in pairs {
                let seg = &scores.word_segments[t];
                let start = idx.len();
                idx.extend(seg.clone().map(|c| i * words + c));
                segs.push(start..idx.len());
            }
            (idx, segs)
        };
        if !layout.matched.is_empty() {
            let (idx, segs) = gather_pairs(&layout.matched);
            let s = tape.gather(word_max, &idx)?;
            let l = matched_hinge(tape, s, &segs, w, spec.boundary)?;
            terms.push((l, w.cross_relu_weight));
            l_m = Some(l);
        }
        if !layout.mismatched.is_empty() {
            let (idx, segs) = gather_pairs(&layout.mismatched);
            let s = tape.gather(word_max, &idx)?;
            let l = mismatched_hinge(tape, s, &segs, w, spec.boundary)?;
            terms.push((l, w.cross_relu_weight));
            l_mm = Some(l);
        }
    }

    let mut id_parts: Vec<(Var, f64)> = Vec::new();
    if b.global {
        id_parts.push((identity_loss(tape, images.global, &layout.image_identities, classifiers.global)?, 1.0));
        id_parts.push((identity_loss(tape, texts.global, &layout.text_identities, classifiers.global)?, 1.0));
    }
    if b.local {
        id_parts.push((identity_loss(tape, images.local, &layout.image_identities, classifiers.local)?, w.lambda1));
        id_parts.push((identity_loss(tape, texts.local, &layout.text_identities, classifiers.local)?, w.lambda1));
    }
    let l_id = weighted(tape, &id_parts)?;
    if let Some(l) = l_id {
        terms.push((l, w.identity_weight));
    }

    let l_r_global = if b.global {
        Some(ranking_batch(tape, scores.s_g, layout, w.alpha)?)
    } else {
        None
    };
    let l_r_local = if b.local {
        Some(ranking_batch(tape, scores.s_l, layout, w.alpha)?)
    } else {
        None
    };
    let l_r_localneg = if b.fpm && spec.local_neg_ranking {
        Some(ranking_batch(tape, scores.s_local_neg, layout, w.alpha)?)
    } else {
        None
    };
    let mut rank_parts = Vec::new();
    if let Some(l) = l_r_global {
        rank_parts.push((l, w.ranking_weight));
    }
    if let Some(l) = l_r_local {
        rank_parts.push((l, w.ranking_weight * w.lambda2));
    }
    if let Some(l) = l_r_localneg {
        rank_parts.push((l, w.ranking_weight * w.lambda3));
    }
    terms.extend(rank_parts);

    let total = match weighted(tape, &terms)? {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(LossTerms {
        l_m,
        l_mm,
        l_id,
        l_r_global,
        l_r_local,
        l_r_localneg,
        total,
    })
}

fn weighted(tape: &mut Tape, parts: &[(Var, f64)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(v, wt) in parts {
        let scaled = if wt == 1.0 { v } else { tape.scale(v, wt) };
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc)
}

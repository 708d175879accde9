//! Global, local and false-positive-mining similarity branches.
//!
//! Two routes compute the same quantities:
//!
//! * per-pair value functions ([`SimilarityBreakdown::compute`] and the small
//!   helpers it is made of), used for evaluation and reports;
//! * [`score_batch`], which records every image×text pair of a batch on a
//!   tape so training can differentiate through it.
//!
//! Word features are stored one word per row (`[len, C]`), region features one
//! region per row (`[K, C]`). The projection matrices are stored as `C×M` and
//! applied on the right, i.e. `θ(v) = vᵀ·theta`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingBundle, EncodedBatch};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, NORM_EPS};
use crate::params::ParamSet;

/// Projections into the word-region comparison space.
#[derive(Clone, Debug, PartialEq)]
pub struct FpmParams {
    /// Region projection, `[C, M]`.
    pub theta: Tensor,
    /// Word projection, `[C, M]`.
    pub phi: Tensor,
}

impl FpmParams {
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        Ok(Self {
            theta: params.get("fpm.theta")?.clone(),
            phi: params.get("fpm.phi")?.clone(),
        })
    }
}

/// How mined word scores are turned into negative evidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningOptions {
    /// Keep only scores below the boundary; when false every score counts.
    pub mask: bool,
    /// Decision boundary separating matched from mismatched word scores.
    pub boundary: f64,
}

impl Default for MiningOptions {
    fn default() -> Self {
        Self {
            mask: true,
            boundary: 0.0,
        }
    }
}

/// Cosine with norms floored at [`NORM_EPS`], clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn global_similarity(v_g: &Tensor, t_g: &Tensor) -> Result<f64> {
    if v_g.len() != t_g.len() || v_g.is_empty() {
        return Err(Error::Dimension(format!(
            "global vectors of length {} and {}",
            v_g.len(),
            t_g.len()
        )));
    }
    Ok(cosine(v_g.data(), t_g.data()))
}

/// Cosine of the two `K×P` local matrices flattened region-major.
pub fn local_similarity(v_l: &Tensor, t_l: &Tensor) -> Result<f64> {
    if v_l.shape() != t_l.shape() {
        return Err(Error::Dimension(format!(
            "local representations {:?} and {:?}",
            v_l.shape(),
            t_l.shape()
        )));
    }
    Ok(cosine(v_l.data(), t_l.data()))
}

/// `[K, len]` matrix of cosines between projected regions and projected words.
pub fn word_region_scores(regions: &Tensor, words: &Tensor, fpm: &FpmParams) -> Result<Tensor> {
    let theta = regions.matmul(&fpm.theta)?;
    let phi = words.matmul(&fpm.phi)?;
    if theta.cols() != phi.cols() {
        return Err(Error::Dimension("projection widths differ".into()));
    }
    let (k, n) = (theta.rows(), phi.rows());
    let mut out = Vec::with_capacity(k * n);
    for r in 0..k {
        for w in 0..n {
            out.push(cosine(theta.row(r), phi.row(w)));
        }
    }
    Tensor::matrix(k, n, out)
}

/// Best score of each word over all regions, with the winning region
/// (lowest index among ties).
pub fn word_max_scores(scores: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let (k, n) = (scores.rows(), scores.cols());
    if k == 0 || n == 0 {
        return Err(Error::Dimension("empty score matrix".into()));
    }
    let mut best = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for w in 0..n {
        let mut b = (0, scores.get(0, w));
        for r in 1..k {
            let v = scores.get(r, w);
            if v > b.1 {
                b = (r, v);
            }
        }
        best.push(b.1);
        arg.push(b.0);
    }
    Ok((best, arg))
}

/// Zero for positive input (and for zero itself), identity for negative input.
pub fn mining_mask(s: f64) -> f64 {
    if s < 0.0 {
        s
    } else {
        0.0
    }
}

/// `(s_neg, s_local_neg)` from per-word scores and the local similarity.
pub fn negative_similarity(word_scores: &[f64], s_l: f64) -> Result<(f64, f64)> {
    negative_similarity_with(word_scores, s_l, MiningOptions::default())
}

pub fn negative_similarity_with(
    word_scores: &[f64],
    s_l: f64,
    opts: MiningOptions,
) -> Result<(f64, f64)> {
    if word_scores.is_empty() {
        return Err(Error::Input("negative similarity needs at least one word".into()));
    }
    let s_neg: f64 = word_scores
        .iter()
        .map(|&s| {
            let shifted = s - opts.boundary;
            if opts.mask {
                mining_mask(shifted)
            } else {
                shifted
            }
        })
        .sum();
    Ok((s_neg, s_l + s_neg))
}

/// Inference-time score: `s_g + s_l + s_local_neg`.
pub fn overall_similarity(s_g: f64, s_l: f64, s_local_neg: f64) -> f64 {
    s_g + s_l + s_local_neg
}

/// Every similarity quantity for one image-text pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub s_g: f64,
    pub s_l: f64,
    /// Per-word best score over regions.
    pub word_scores: Vec<f64>,
    /// Region that produced each word's best score.
    pub word_regions: Vec<usize>,
    pub s_neg: f64,
    pub s_local_neg: f64,
    pub s_overall: f64,
}

impl SimilarityBreakdown {
    /// Scores one pair. Without mining parameters the mining branch is off:
    /// no word scores, `s_neg = 0` and `s_local_neg = s_l`.
    pub fn compute(
        image: &EmbeddingBundle,
        text: &EmbeddingBundle,
        fpm: Option<&FpmParams>,
        opts: MiningOptions,
    ) -> Result<Self> {
        let s_g = global_similarity(&image.global, &text.global)?;
        let s_l = local_similarity(&image.local, &text.local)?;
        let (word_scores, word_regions, s_neg, s_local_neg) = match fpm {
            Some(fpm) => {
                let scores = word_region_scores(&image.parts, &text.parts, fpm)?;
                let (ws, wr) = word_max_scores(&scores)?;
                let (neg, local_neg) = negative_similarity_with(&ws, s_l, opts)?;
                (ws, wr, neg, local_neg)
            }
            None => (Vec::new(), Vec::new(), 0.0, s_l),
        };
        Ok(Self {
            s_g,
            s_l,
            word_scores,
            word_regions,
            s_neg,
            s_local_neg,
            s_overall: overall_similarity(s_g, s_l, s_local_neg),
        })
    }

    /// Score under a fusion rule.
    pub fn fused(&self, fusion: Fusion) -> f64 {
        match fusion {
            Fusion::Global => self.s_g,
            Fusion::Local => self.s_l,
            Fusion::GlobalLocal => self.s_g + self.s_l,
            Fusion::LocalFpm => self.s_l + self.s_local_neg,
            Fusion::Full => self.s_overall,
        }
    }
}

/// Unit-normalized representations of one sample, computed once so that
/// scoring a pair reduces to dot products.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSide {
    global: Vec<f64>,
    local: Vec<f64>,
    /// Projected, normalized part rows (regions or words), `parts × M`.
    parts: Vec<f64>,
    part_count: usize,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter().map(|x| x / n).collect()
}

impl PreparedSide {
    /// `projection` is `theta` for images and `phi` for texts.
    pub fn new(bundle: &EmbeddingBundle, projection: Option<&Tensor>) -> Result<Self> {
        let (parts, part_count) = match projection {
            Some(w) => {
                let proj = bundle.parts.matmul(w)?;
                let rows = proj.rows();
                ((0..rows).flat_map(|r| unit(proj.row(r))).collect(), rows)
            }
            None => (Vec::new(), 0),
        };
        Ok(Self {
            global: unit(bundle.global.data()),
            local: unit(bundle.local.data()),
            parts,
            part_count,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Same quantities as [`SimilarityBreakdown::compute`] from prepared sides.
pub fn breakdown_prepared(
    image: &PreparedSide,
    text: &PreparedSide,
    opts: Option<MiningOptions>,
) -> Result<SimilarityBreakdown> {
    if image.global.len() != text.global.len() || image.local.len() != text.local.len() {
        return Err(Error::Dimension("prepared sides disagree in width".into()));
    }
    let s_g = dot(&image.global, &text.global).clamp(-1.0, 1.0);
    let s_l = dot(&image.local, &text.local).clamp(-1.0, 1.0);
    let Some(opts) = opts else {
        return Ok(SimilarityBreakdown {
            s_g,
            s_l,
            word_scores: Vec::new(),
            word_regions: Vec::new(),
            s_neg: 0.0,
            s_local_neg: s_l,
            s_overall: overall_similarity(s_g, s_l, s_l),
        });
    };
    if image.part_count == 0 || text.part_count == 0 {
        return Err(Error::Contract("mining enabled but sides were prepared without projections".into()));
    }
    let m = image.parts.len() / image.part_count;
    let mut word_scores = Vec::with_capacity(text.part_count);
    let mut word_regions = Vec::with_capacity(text.part_count);
    for w in text.parts.chunks_exact(m) {
        let mut best = (0, f64::NEG_INFINITY);
        for (r, region) in image.parts.chunks_exact(m).enumerate() {
            let s = dot(region, w).clamp(-1.0, 1.0);
            if s > best.1 {
                best = (r, s);
            }
        }
        word_scores.push(best.1);
        word_regions.push(best.0);
    }
    let (s_neg, s_local_neg) = negative_similarity_with(&word_scores, s_l, opts)?;
    Ok(SimilarityBreakdown {
        s_g,
        s_l,
        word_scores,
        word_regions,
        s_neg,
        s_local_neg,
        s_overall: overall_similarity(s_g, s_l, s_local_neg),
    })
}

/// Which branch scores are summed for ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Global,
    Local,
    GlobalLocal,
    LocalFpm,
    Full,
}

impl Fusion {
    pub const ALL: [Fusion; 5] = [
        Fusion::Global,
        Fusion::Local,
        Fusion::GlobalLocal,
        Fusion::LocalFpm,
        Fusion::Full,
    ];

    pub fn uses_fpm(self) -> bool {
        matches!(self, Fusion::LocalFpm | Fusion::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Global => "global",
            Fusion::Local => "local",
            Fusion::GlobalLocal => "global+local",
            Fusion::LocalFpm => "local+fpm",
            Fusion::Full => "full",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|f| f.name() == s || format!("{f:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown fusion `{s}`")))
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which branches a model variant trains and scores with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Branches {
    pub global: bool,
    pub local: bool,
    pub fpm: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self::ALL
    }
}

impl Branches {
    pub const ALL: Branches = Branches {
        global: true,
        local: true,
        fpm: true,
    };

    /// The inference fusion matching these branches.
    pub fn fusion(self) -> Result<Fusion> {
        match (self.global, self.local, self.fpm) {
            (true, false, false) => Ok(Fusion::Global),
            (false, true, false) => Ok(Fusion::Local),
            (true, true, false) => Ok(Fusion::GlobalLocal),
            (false, true, true) => Ok(Fusion::LocalFpm),
            (true, true, true) => Ok(Fusion::Full),
            _ => Err(Error::Config(format!(
                "unsupported branch combination {self:?}; the mining branch modifies the local branch"
            ))),
        }
    }
}

/// Tape-recorded similarities for every image × text pair of a batch.
#[derive(Clone, Debug)]
pub struct BatchScores {
    /// `[I, T]`
    pub s_g: Var,
    /// `[I, T]`
    pub s_l: Var,
    /// `[I, Σlen]`: each word's best region score against each image;
    /// `None` when the mining branch is off.
    pub word_max: Option<Var>,
    /// `[I, T]`
    pub s_neg: Var,
    /// `[I, T]`
    pub s_local_neg: Var,
    /// Column range of each text inside `word_max`.
    pub word_segments: Vec<Range<usize>>,
}

/// Tape inputs of the mining branch.
#[derive(Clone, Copy, Debug)]
pub struct MiningVars {
    pub theta: Var,
    pub phi: Var,
    pub mask: bool,
    /// Trainable boundary; `None` means a fixed boundary at zero.
    pub boundary: Option<Var>,
}

/// Records all three branches for the full image × text grid of a batch.
pub fn score_batch(
    tape: &mut Tape,
    images: &EncodedBatch,
    texts: &EncodedBatch,
    mining: Option<MiningVars>,
    region_count: usize,
) -> Result<BatchScores> {
    let gi = tape.normalize_rows(images.global);
    let gt = tape.normalize_rows(texts.global);
    let s_g = tape.matmul_bt(gi, gt)?;

    let li = tape.normalize_rows(images.local);
    let lt = tape.normalize_rows(texts.local);
    let s_l = tape.matmul_bt(li, lt)?;

    let Some(mining) = mining else {
        let rows = tape.value(s_l).rows();
        let cols = tape.value(s_l).cols();
        let s_neg = tape.constant(Tensor::zeros(&[rows, cols]));
        let s_local_neg = tape.add(s_l, s_neg)?;
        return Ok(BatchScores {
            s_g,
            s_l,
            word_max: None,
            s_neg,
            s_local_neg,
            word_segments: texts.segments.clone(),
        });
    };
    let proj_regions = tape.matmul(images.parts, mining.theta)?;
    let proj_words = tape.matmul(texts.parts, mining.phi)?;
    let unit_regions = tape.normalize_rows(proj_regions);
    let unit_words = tape.normalize_rows(proj_words);
    let scores = tape.matmul_bt(unit_regions, unit_words)?;
    let word_max = tape.group_max_rows(scores, region_count)?;

    let shifted = match mining.boundary {
        Some(tau) => tape.sub_scalar(word_max, tau)?,
        None => word_max,
    };
    let evidence = if mining.mask {
        tape.min_zero(shifted)
    } else {
        shifted
    };
    let s_neg = tape.segment_sum_cols(evidence, &texts.segments)?;
    let s_local_neg = tape.add(s_l, s_neg)?;
    Ok(BatchScores {
        s_g,
        s_l,
        word_max: Some(word_max),
        s_neg,
        s_local_neg,
        word_segments: texts.segments.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn global_cases() {
        assert_eq!(global_similarity(&v(&[0.3, -2.0]), &v(&[0.3, -2.0])).unwrap(), 1.0);
        assert_eq!(global_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((global_similarity(&v(&[3.0, 4.0]), &v(&[4.0, 3.0])).unwrap() - 0.96).abs() < 1e-15);
        assert!(global_similarity(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn local_cases() {
        let a = t(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        assert!((local_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);

        let row = t(&[vec![3.0, 4.0]]);
        let other = t(&[vec![4.0, 3.0]]);
        assert_eq!(
            local_similarity(&row, &other).unwrap(),
            global_similarity(&v(&[3.0, 4.0]), &v(&[4.0, 3.0])).unwrap()
        );

        // independent flatten-then-cosine oracle
        let x = t(&[vec![0.2, -0.7], vec![1.1, 0.4]]);
        let y = t(&[vec![-0.3, 0.9], vec![0.5, 0.5]]);
        let fx = [0.2, -0.7, 1.1, 0.4];
        let fy = [-0.3, 0.9, 0.5, 0.5];
        let dot: f64 = fx.iter().zip(&fy).map(|(a, b)| a * b).sum();
        let nx = fx.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny = fy.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((local_similarity(&x, &y).unwrap() - dot / (nx * ny)).abs() < 1e-15);

        let three = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(local_similarity(&x, &three), Err(Error::Dimension(_))));
    }

    #[test]
    fn word_region_cases() {
        let fpm = FpmParams {
            theta: Tensor::eye(2),
            phi: Tensor::eye(2),
        };
        let regions = t(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let words = t(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        let s = word_region_scores(&regions, &words, &fpm).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, -1.0]);

        // 2×2 with non-trivial projections against a per-pair oracle
        let fpm = FpmParams {
            theta: t(&[vec![1.0, 2.0], vec![0.5, -1.0]]),
            phi: t(&[vec![-1.0, 0.0], vec![1.0, 1.0]]),
        };
        let regions = t(&[vec![0.3, 0.7], vec![-1.2, 0.4]]);
        let words = t(&[vec![2.0, -0.5], vec![0.1, 0.9]]);
        let s = word_region_scores(&regions, &words, &fpm).unwrap();
        let proj = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..2).map(|j| x[0] * w.get(0, j) + x[1] * w.get(1, j)).collect()
        };
        for r in 0..2 {
            for w in 0..2 {
                let a = proj(regions.row(r), &fpm.theta);
                let b = proj(words.row(w), &fpm.phi);
                let dot = a[0] * b[0] + a[1] * b[1];
                let want = dot / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
                assert!((s.get(r, w) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn word_max_cases() {
        let col = t(&[vec![0.2], vec![-0.5], vec![0.7]]);
        assert_eq!(word_max_scores(&col).unwrap(), (vec![0.7], vec![2]));
        let one = t(&[vec![0.3, -0.2]]);
        assert_eq!(word_max_scores(&one).unwrap().0, vec![0.3, -0.2]);
        let neg = t(&[vec![-0.4], vec![-0.1]]);
        assert_eq!(word_max_scores(&neg).unwrap().0, vec![-0.1]);
        let tie = t(&[vec![0.5], vec![0.5]]);
        assert_eq!(word_max_scores(&tie).unwrap().1, vec![0]);
    }

    #[test]
    fn mask_cases() {
        assert_eq!(mining_mask(0.5), 0.0);
        assert_eq!(mining_mask(-0.3), -0.3);
        assert_eq!(mining_mask(0.0), 0.0);
    }

    #[test]
    fn negative_similarity_cases() {
        let (neg, local_neg) = negative_similarity(&[0.4, -0.2, -0.1], 0.6).unwrap();
        assert!((neg + 0.3).abs() < 1e-15);
        assert!((local_neg - 0.3).abs() < 1e-15);
        assert_eq!(negative_similarity(&[0.1, 0.9], 0.4).unwrap(), (0.0, 0.4));
        assert_eq!(negative_similarity(&[-1.0], 1.0).unwrap(), (-1.0, 0.0));
        assert!(negative_similarity(&[], 1.0).is_err());

        let unmasked = MiningOptions {
            mask: false,
            boundary: 0.0,
        };
        let (neg, _) = negative_similarity_with(&[0.4, -0.2, -0.1], 0.6, unmasked).unwrap();
        assert!((neg - 0.1).abs() < 1e-15);
    }

    #[test]
    fn overall_cases() {
        assert!((overall_similarity(0.5, 0.6, 0.6 - 0.3) - 1.4).abs() < 1e-15);
        assert_eq!(overall_similarity(0.2, 0.3, 0.3), 0.2 + 2.0 * 0.3);
        assert_eq!(overall_similarity(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn fusion_names_round_trip() {
        for f in Fusion::ALL {
            assert_eq!(f.name().parse::<Fusion>().unwrap(), f);
        }
        assert!("bogus".parse::<Fusion>().is_err());
    }
}

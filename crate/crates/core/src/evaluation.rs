//! Text-to-image retrieval metrics, ablation tables and per-word evidence
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::similarity::{mining_mask, Fusion, SimilarityBreakdown};
use crate::training::{train, TrainConfig};

/// Cut-offs reported everywhere.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Gallery positions sorted by descending score; ties keep the lower index first.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Percentage of queries whose top `k` gallery entries contain the query's identity.
pub fn recall_at_k(
    rankings: &[Vec<usize>],
    query_identities: &[usize],
    gallery_identities: &[usize],
    k: usize,
) -> Result<f64> {
    if rankings.len() != query_identities.len() {
        return Err(Error::Dimension("one ranking per query required".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Input("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (ranking, &q) in rankings.iter().zip(query_identities) {
        let mut hit = false;
        for &g in ranking.iter().take(k) {
            let id = *gallery_identities
                .get(g)
                .ok_or_else(|| Error::Input(format!("ranking refers to gallery item {g}")))?;
            hit |= id == q;
        }
        hits += hit as usize;
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub fusion: Fusion,
    pub query_count: usize,
    pub gallery_count: usize,
    /// Recall@K in percent for each K in [`RECALL_KS`].
    pub recall: BTreeMap<usize, f64>,
    /// Per query, gallery positions best first.
    #[serde(skip)]
    pub rankings: Vec<Vec<usize>>,
}

impl RetrievalResult {
    pub fn r_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Recall keyed `r1`, `r5`, `r10`.
    pub fn recall_map(&self) -> BTreeMap<String, f64> {
        self.recall.iter().map(|(k, v)| (format!("r{k}"), *v)).collect()
    }
}

/// Ranks every gallery image for every caption query under several fusions
/// at once. `queries` and `gallery` are dataset sample indices.
pub fn evaluate_fusions(
    model: &Model,
    dataset: &Dataset,
    queries: &[usize],
    gallery: &[usize],
    fusions: &[Fusion],
) -> Result<Vec<RetrievalResult>> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Input("evaluation needs queries and a gallery".into()));
    }
    for f in fusions {
        if f.uses_fpm() && !model.spec.branches.fpm {
            return Err(Error::Config(format!(
                "fusion `{f}` needs the mining branch, which this model lacks"
            )));
        }
    }
    let samples = |idx: &[usize]| -> Result<Vec<&Sample>> {
        idx.iter()
            .map(|&i| {
                dataset
                    .samples
                    .get(i)
                    .ok_or_else(|| Error::Input(format!("sample {i} out of range")))
            })
            .collect()
    };
    let query_samples = samples(queries)?;
    let gallery_samples = samples(gallery)?;
    let texts = model.prepare_texts(&query_samples)?;
    let images = model.prepare_images(&gallery_samples)?;

    let per_query: Vec<Result<Vec<Vec<usize>>>> = texts
        .par_iter()
        .map(|text| {
            let breakdowns = images
                .iter()
                .map(|img| model.score_prepared(img, text))
                .collect::<Result<Vec<SimilarityBreakdown>>>()?;
            Ok(fusions
                .iter()
                .map(|&f| {
                    let scores: Vec<f64> = breakdowns.iter().map(|b| b.fused(f)).collect();
                    rank_scores(&scores)
                })
                .collect())
        })
        .collect();
    let mut rankings: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(queries.len()); fusions.len()];
    for q in per_query {
        for (slot, r) in rankings.iter_mut().zip(q?) {
            slot.push(r);
        }
    }

    let query_ids: Vec<usize> = query_samples.iter().map(|s| s.identity).collect();
    let gallery_ids: Vec<usize> = gallery_samples.iter().map(|s| s.identity).collect();
    fusions
        .iter()
        .zip(rankings)
        .map(|(&fusion, rankings)| {
            let recall = RECALL_KS
                .iter()
                .map(|&k| Ok((k, recall_at_k(&rankings, &query_ids, &gallery_ids, k)?)))
                .collect::<Result<_>>()?;
            Ok(RetrievalResult {
                fusion,
                query_count: queries.len(),
                gallery_count: gallery.len(),
                recall,
                rankings,
            })
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    queries: &[usize],
    gallery: &[usize],
    fusion: Fusion,
) -> Result<RetrievalResult> {
    Ok(evaluate_fusions(model, dataset, queries, gallery, &[fusion])?.remove(0))
}

/// Every caption of `indices` queries the images of the same samples.
pub fn evaluate_split(model: &Model, dataset: &Dataset, indices: &[usize], fusion: Fusion) -> Result<RetrievalResult> {
    evaluate(model, dataset, indices, indices, fusion)
}

/// How often the mining branch produces negative evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpmActivity {
    pub matched_pairs: usize,
    pub mismatched_pairs: usize,
    /// Fraction of matched pairs with `s_neg < 0`.
    pub matched_negative_fraction: f64,
    /// Fraction of mismatched pairs with `s_neg < 0`.
    pub mismatched_negative_fraction: f64,
    pub mean_s_neg_matched: f64,
    pub mean_s_neg_mismatched: f64,
}

/// Mining statistics over all image × caption pairs of `indices`.
pub fn fpm_activity(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<FpmActivity> {
    if !model.spec.branches.fpm {
        return Err(Error::Config("model has no mining branch".into()));
    }
    let refs: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
    let images = model.prepare_images(&refs)?;
    let texts = model.prepare_texts(&refs)?;
    let rows: Vec<Result<[f64; 6]>> = (0..images.len())
        .into_par_iter()
        .map(|i| {
            // [matched count, matched negative, matched sum, mismatched count, ...]
            let mut acc = [0.0; 6];
            for (t, text) in texts.iter().enumerate() {
                let s = model.score_prepared(&images[i], text)?.s_neg;
                let base = if refs[i].identity == refs[t].identity { 0 } else { 3 };
                acc[base] += 1.0;
                acc[base + 1] += (s < 0.0) as u8 as f64;
                acc[base + 2] += s;
            }
            Ok(acc)
        })
        .collect();
    let mut acc = [0.0; 6];
    for r in rows {
        for (a, b) in acc.iter_mut().zip(r?) {
            *a += b;
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(FpmActivity {
        matched_pairs: acc[0] as usize,
        mismatched_pairs: acc[3] as usize,
        matched_negative_fraction: ratio(acc[1], acc[0]),
        mismatched_negative_fraction: ratio(acc[4], acc[3]),
        mean_s_neg_matched: ratio(acc[2], acc[0]),
        mean_s_neg_mismatched: ratio(acc[5], acc[3]),
    })
}

/// One caption word's contribution to the negative similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordEvidence {
    pub position: usize,
    pub label: String,
    /// Best region score `s_i`.
    pub score: f64,
    /// What the word adds to `s_neg`.
    pub masked: f64,
    pub region: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeEvidenceReport {
    pub image_sample: usize,
    pub text_sample: usize,
    pub image_identity: usize,
    pub text_identity: usize,
    pub words: Vec<WordEvidence>,
    pub breakdown: SimilarityBreakdown,
}

impl NegativeEvidenceReport {
    /// Words whose masked contribution is strictly negative.
    pub fn negative_words(&self) -> impl Iterator<Item = &WordEvidence> {
        self.words.iter().filter(|w| w.masked < 0.0)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "image {} (identity {}) vs caption {} (identity {})\n",
            self.image_sample, self.image_identity, self.text_sample, self.text_identity
        );
        let b = &self.breakdown;
        let _ = writeln!(
            out,
            "s_g {:.4}  s_l {:.4}  s_neg {:.4}  s_local_neg {:.4}  overall {:.4}",
            b.s_g, b.s_l, b.s_neg, b.s_local_neg, b.s_overall
        );
        let _ = writeln!(out, "{:>4}  {:<12} {:>9} {:>9} {:>6}", "pos", "word", "score", "masked", "region");
        for w in &self.words {
            let _ = writeln!(
                out,
                "{:>4}  {:<12} {:>9.4} {:>9.4} {:>6}",
                w.position, w.label, w.score, w.masked, w.region
            );
        }
        out
    }
}

/// Explains which words of a caption act as evidence against an image.
///
/// Labels come from the dataset's synthetic ground truth when present and
/// fall back to `w{position}`.
pub fn negative_evidence_report(
    model: &Model,
    dataset: &Dataset,
    image_sample: usize,
    text_sample: usize,
) -> Result<NegativeEvidenceReport> {
    let opts = model
        .mining_options()
        .ok_or_else(|| Error::Config("model has no mining branch".into()))?;
    let get = |i: usize| {
        dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::Input(format!("sample {i} out of range")))
    };
    let (image, text) = (get(image_sample)?, get(text_sample)?);
    let breakdown = model.breakdown(image, text)?;
    let labels: Vec<String> = match &dataset.meta {
        Some(meta) => meta.word_labels(text_sample, text.identity),
        None => (0..text.text_len).map(|p| format!("w{p}")).collect(),
    };
    let words = breakdown
        .word_scores
        .iter()
        .zip(&breakdown.word_regions)
        .enumerate()
        .map(|(position, (&score, &region))| {
            let shifted = score - opts.boundary;
            WordEvidence {
                position,
                label: labels[position].clone(),
                score,
                masked: if opts.mask { mining_mask(shifted) } else { shifted },
                region,
            }
        })
        .collect();
    Ok(NegativeEvidenceReport {
        image_sample,
        text_sample,
        image_identity: image.identity,
        text_identity: text.identity,
        words,
        breakdown,
    })
}

/// A named training configuration compared in an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    fn from(base: &TrainConfig, name: &str, edit: impl FnOnce(&mut TrainConfig)) -> Self {
        let mut config = base.clone();
        edit(&mut config);
        Self {
            name: name.into(),
            config,
        }
    }
}

/// Branch combinations: global, local, global+local, local+mining, full.
pub fn branch_variants(base: &TrainConfig) -> Vec<Variant> {
    use crate::similarity::Branches;
    let mk = |global, local, fpm| Branches { global, local, fpm };
    [
        ("global", mk(true, false, false)),
        ("local", mk(false, true, false)),
        ("global+local", mk(true, true, false)),
        ("local+fpm", mk(false, true, true)),
        ("full", mk(true, true, true)),
    ]
    .into_iter()
    .map(|(name, b)| {
        Variant::from(base, name, |c| {
            c.model.branches = b;
            c.model.learnable_boundary = false;
        })
    })
    .collect()
}

/// Component removals on top of the full model.
pub fn component_variants(base: &TrainConfig) -> Vec<Variant> {
    use crate::similarity::Branches;
    vec![
        Variant::from(base, "baseline", |c| {
            c.model.branches = Branches {
                global: true,
                local: true,
                fpm: false,
            };
            c.model.learnable_boundary = false;
        }),
        Variant::from(base, "w/o local-neg ranking", |c| c.local_neg_ranking = false),
        Variant::from(base, "w/o mask", |c| c.model.mining_mask = false),
        Variant::from(base, "w/o balanced sampling", |c| c.balanced = false),
        Variant::from(base, "w/ learnable boundary", |c| c.model.learnable_boundary = true),
        Variant::from(base, "full", |c| c.model.learnable_boundary = false),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub fusion: Fusion,
    /// Median over seeds of Recall@K in percent.
    pub recall: BTreeMap<usize, f64>,
    /// Per seed, Recall@K in percent.
    pub per_seed: Vec<BTreeMap<usize, f64>>,
    /// Final boundary per seed (zero unless learned).
    pub boundary: Vec<f64>,
}

impl AblationRow {
    pub fn r_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(7);
        let mut out = format!("{:<width$}  {:>7} {:>7} {:>7}\n", "variant", "R@1", "R@5", "R@10");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.2} {:>7.2} {:>7.2}",
                r.name,
                r.r_at(1),
                r.r_at(5),
                r.r_at(10)
            );
        }
        let _ = writeln!(out, "median over seeds {:?}", self.seeds);
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains every variant under every seed and evaluates each on its held-out
/// identities with the variant's own fusion. Runs in parallel.
pub fn run_ablation(dataset: &Dataset, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<(BTreeMap<usize, f64>, f64)>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let config = TrainConfig {
                seed,
                ..variants[v].config.clone()
            };
            let (_, held_out) = dataset.split_by_identity(config.val_fraction)?;
            if held_out.is_empty() {
                return Err(Error::Config("ablation needs held-out identities".into()));
            }
            let (model, _) = train(dataset, config)?;
            let r = evaluate_split(&model, dataset, &held_out, model.fusion())?;
            Ok((r.recall, model.boundary()))
        })
        .collect();
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut per_seed = Vec::new();
        let mut boundary = Vec::new();
        for _ in seeds {
            let (r, b) = results.next().expect("one result per job")?;
            per_seed.push(r);
            boundary.push(b);
        }
        let recall = RECALL_KS
            .iter()
            .map(|&k| (k, median(per_seed.iter().map(|r| r[&k]).collect())))
            .collect();
        rows.push(AblationRow {
            name: variant.name.clone(),
            fusion: variant.config.model.branches.fusion()?,
            recall,
            per_seed,
            boundary,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

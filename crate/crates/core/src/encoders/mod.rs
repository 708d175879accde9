//! Toy encoders standing in for the visual and textual backbones.
//!
//! Both modalities produce the same three representation levels:
//!
//! * `global`: a `P`-vector from max-pooling part features then a linear map;
//! * `local`: `K` rows of `P` values, one linear head per region;
//! * `parts`: the per-region (image) or per-word (text) features of width `C`
//!   that feed word-region scoring.
//!
//! Image input is `K` horizontal strips of raw features. Text input is a dense
//! `n × d` token matrix with an explicit valid length; only the first `len`
//! rows ever reach a reduction.

mod dataset;
mod synthetic;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{scaled_normal, ParamSet, ParamVars};

pub use dataset::{Dataset, DatasetDims, Sample, DATASET_MAGIC, DATASET_VERSION};
pub use synthetic::{generate_synthetic_dataset, IdentityProfile, SyntheticConfig, SyntheticMeta};

/// Model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Part feature width `C`.
    pub feature_dim: usize,
    /// Shared embedding width `P`.
    pub shared_dim: usize,
    /// Word-region projection width `M`.
    pub projection_dim: usize,
    /// Horizontal regions per image `K`.
    pub region_count: usize,
    /// Maximum caption length `n`.
    pub max_words: usize,
    pub identity_count: usize,
    pub image_raw_dim: usize,
    pub text_raw_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            shared_dim: 32,
            projection_dim: 16,
            region_count: 6,
            max_words: 12,
            identity_count: 100,
            image_raw_dim: 24,
            text_raw_dim: 24,
        }
    }
}

impl EncoderConfig {
    /// Full-size dimensions (C=2048, P=1024, M=256, K=6, n=100).
    pub fn full_size(identity_count: usize) -> Self {
        Self {
            feature_dim: 2048,
            shared_dim: 1024,
            projection_dim: 256,
            region_count: 6,
            max_words: 100,
            identity_count,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("shared_dim", self.shared_dim),
            ("projection_dim", self.projection_dim),
            ("max_words", self.max_words),
            ("identity_count", self.identity_count),
            ("image_raw_dim", self.image_raw_dim),
            ("text_raw_dim", self.text_raw_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.region_count < 2 {
            return Err(Error::Config("region_count must be at least 2".into()));
        }
        Ok(())
    }

    /// Width of a flattened local representation, `K·P`.
    pub fn local_width(&self) -> usize {
        self.region_count * self.shared_dim
    }

    /// Adopts the raw input dimensions of a dataset.
    pub fn with_dataset_dims(mut self, dims: &DatasetDims) -> Self {
        self.region_count = dims.region_count;
        self.max_words = dims.max_words;
        self.image_raw_dim = dims.image_raw_dim;
        self.text_raw_dim = dims.text_raw_dim;
        self.identity_count = dims.identity_count;
        self
    }

    /// Fresh encoder parameters; biases start at zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, p) = (self.feature_dim, self.shared_dim);
        let mut ps = ParamSet::new();
        ps.insert("image.strip.weight", scaled_normal(&mut rng, self.image_raw_dim, c));
        ps.insert("image.strip.bias", Tensor::zeros(&[c]));
        ps.insert("image.global.weight", scaled_normal(&mut rng, c, p));
        for k in 0..self.region_count {
            ps.insert(local_head("image", k), scaled_normal(&mut rng, c, p));
        }
        ps.insert("text.token.weight", scaled_normal(&mut rng, self.text_raw_dim, c));
        ps.insert("text.token.bias", Tensor::zeros(&[c]));
        ps.insert("text.global.weight", scaled_normal(&mut rng, c, p));
        for k in 0..self.region_count {
            ps.insert(local_head("text", k), scaled_normal(&mut rng, c, p));
        }
        ps
    }
}

pub(crate) fn local_head(modality: &str, k: usize) -> String {
    format!("{modality}.local.{k}.weight")
}

/// One sample's representations for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    /// `[P]`
    pub global: Tensor,
    /// `[K, P]`
    pub local: Tensor,
    /// Region features `[K, C]`, or word features `[len, C]` (one row per word).
    pub parts: Tensor,
    /// Caption length for text, `None` for images.
    pub valid_len: Option<usize>,
}

/// Tape handles for a batch of encoded samples.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `[B, P]`
    pub global: Var,
    /// `[B, K·P]`, region-major.
    pub local: Var,
    /// Stacked part features; sample `b` owns rows `segments[b]`.
    pub parts: Var,
    pub segments: Vec<Range<usize>>,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Copies sample `b` out of the tape.
    pub fn bundle(&self, tape: &Tape, b: usize, cfg: &EncoderConfig, text: bool) -> EmbeddingBundle {
        let g = tape.value(self.global);
        let l = tape.value(self.local);
        let parts = tape.value(self.parts);
        let seg = self.segments[b].clone();
        let c = parts.cols();
        let part_rows = seg.len();
        EmbeddingBundle {
            global: Tensor::from_parts(vec![g.cols()], g.row(b).to_vec()),
            local: Tensor::from_parts(vec![cfg.region_count, cfg.shared_dim], l.row(b).to_vec()),
            parts: Tensor::from_parts(
                vec![part_rows, c],
                parts.data()[seg.start * c..seg.end * c].to_vec(),
            ),
            valid_len: text.then_some(part_rows),
        }
    }
}

/// Encodes a batch of images, each a `[K, image_raw_dim]` strip matrix.
pub fn encode_images_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    images: &[&Tensor],
    cfg: &EncoderConfig,
) -> Result<EncodedBatch> {
    let k = cfg.region_count;
    let d = cfg.image_raw_dim;
    let mut raw = Vec::with_capacity(images.len() * k * d);
    for img in images {
        if img.rows() != k || img.cols() != d || img.shape().len() != 2 {
            return Err(Error::dim(format!(
                "image must be {k}x{d} strips, got {:?}",
                img.shape()
            )));
        }
        raw.extend_from_slice(img.data());
    }
    let b = images.len();
    if b == 0 {
        return Err(Error::Input("empty image batch".into()));
    }
    let x = tape.constant(Tensor::from_parts(vec![b * k, d], raw));
    let strips = tape.matmul(x, vars.get("image.strip.weight")?)?;
    let parts = tape.add_row(strips, vars.get("image.strip.bias")?)?;

    let pooled = tape.group_max_rows(parts, k)?;
    let global = tape.matmul(pooled, vars.get("image.global.weight")?)?;

    let mut heads = Vec::with_capacity(k);
    for region in 0..k {
        let rows: Vec<usize> = (0..b).map(|i| i * k + region).collect();
        let sel = tape.select_rows(parts, &rows)?;
        heads.push(tape.matmul(sel, vars.get(&local_head("image", region))?)?);
    }
    let local = tape.concat_cols(&heads)?;
    Ok(EncodedBatch {
        global,
        local,
        parts,
        segments: (0..b).map(|i| i * k..(i + 1) * k).collect(),
    })
}

/// Encodes a batch of captions given as `(token matrix, valid length)`.
///
/// Rows past the valid length are never read, so padded and unpadded token
/// matrices encode identically.
pub fn encode_texts_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    texts: &[(&Tensor, usize)],
    cfg: &EncoderConfig,
) -> Result<EncodedBatch> {
    let d = cfg.text_raw_dim;
    if texts.is_empty() {
        return Err(Error::Input("empty text batch".into()));
    }
    let mut raw = Vec::new();
    let mut segments = Vec::with_capacity(texts.len());
    for (tokens, len) in texts {
        let len = *len;
        if len == 0 || len > cfg.max_words {
            return Err(Error::Input(format!(
                "caption length {len} outside 1..={}",
                cfg.max_words
            )));
        }
        if tokens.cols() != d || tokens.rows() < len || tokens.shape().len() != 2 {
            return Err(Error::dim(format!(
                "token matrix {:?} cannot hold {len} words of width {d}",
                tokens.shape()
            )));
        }
        let start = raw.len() / d;
        raw.extend_from_slice(&tokens.data()[..len * d]);
        segments.push(start..start + len);
    }
    let total = raw.len() / d;
    let x = tape.constant(Tensor::from_parts(vec![total, d], raw));
    let words = tape.matmul(x, vars.get("text.token.weight")?)?;
    let parts = tape.add_row(words, vars.get("text.token.bias")?)?;

    let pooled = tape.segment_max_rows(parts, &segments)?;
    let global = tape.matmul(pooled, vars.get("text.global.weight")?)?;
    let mut heads = Vec::with_capacity(cfg.region_count);
    for region in 0..cfg.region_count {
        heads.push(tape.matmul(pooled, vars.get(&local_head("text", region))?)?);
    }
    let local = tape.concat_cols(&heads)?;
    Ok(EncodedBatch {
        global,
        local,
        parts,
        segments,
    })
}

/// Encodes one image outside of training.
pub fn encode_image(raw: &Tensor, params: &ParamSet, cfg: &EncoderConfig) -> Result<EmbeddingBundle> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let batch = encode_images_on_tape(&mut tape, &vars, &[raw], cfg)?;
    Ok(batch.bundle(&tape, 0, cfg, false))
}

/// Encodes one caption outside of training.
pub fn encode_text(
    raw: &Tensor,
    len: usize,
    params: &ParamSet,
    cfg: &EncoderConfig,
) -> Result<EmbeddingBundle> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let batch = encode_texts_on_tape(&mut tape, &vars, &[(raw, len)], cfg)?;
    Ok(batch.bundle(&tape, 0, cfg, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            feature_dim: 5,
            shared_dim: 3,
            projection_dim: 2,
            region_count: 2,
            max_words: 4,
            identity_count: 3,
            image_raw_dim: 4,
            text_raw_dim: 3,
        }
    }

    fn zeroed_biases(cfg: &EncoderConfig) -> ParamSet {
        let mut p = cfg.init_params(1);
        *p.get_mut("image.strip.bias").unwrap() = Tensor::zeros(&[cfg.feature_dim]);
        *p.get_mut("text.token.bias").unwrap() = Tensor::zeros(&[cfg.feature_dim]);
        p
    }

    #[test]
    fn zero_input_gives_zero_bundle() {
        let cfg = small();
        let params = zeroed_biases(&cfg);
        let b = encode_image(&Tensor::zeros(&[2, 4]), &params, &cfg).unwrap();
        assert!(b.global.data().iter().chain(b.local.data()).chain(b.parts.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        let params = cfg.init_params(3);
        let img = encode_image(&Tensor::zeros(&[6, cfg.image_raw_dim]), &params, &cfg).unwrap();
        assert_eq!(img.global.shape(), &[32]);
        assert_eq!(img.local.shape(), &[6, 32]);
        assert_eq!(img.parts.shape(), &[6, 64]);
        assert_eq!(img.valid_len, None);

        let tokens = Tensor::zeros(&[12, cfg.text_raw_dim]);
        let txt = encode_text(&tokens, 5, &params, &cfg).unwrap();
        assert_eq!(txt.global.shape(), &[32]);
        assert_eq!(txt.local.shape(), &[6, 32]);
        assert_eq!(txt.parts.shape(), &[5, 64]);
        assert_eq!(txt.valid_len, Some(5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small();
        let params = cfg.init_params(0);
        assert!(matches!(
            encode_image(&Tensor::zeros(&[3, 4]), &params, &cfg),
            Err(Error::Dimension(_))
        ));
        let tokens = Tensor::zeros(&[4, 3]);
        assert!(matches!(encode_text(&tokens, 0, &params, &cfg), Err(Error::Input(_))));
        assert!(matches!(encode_text(&tokens, 5, &params, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn single_word_pools_are_identity() {
        let cfg = small();
        let params = cfg.init_params(4);
        let tokens = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let b = encode_text(&tokens, 1, &params, &cfg).unwrap();
        assert_eq!(b.parts.rows(), 1);
        let expected = Tensor::from_parts(vec![1, cfg.feature_dim], b.parts.data().to_vec())
            .matmul(params.get("text.global.weight").unwrap())
            .unwrap();
        assert_eq!(b.global.data(), expected.data());
    }

    #[test]
    fn padding_is_ignored() {
        let cfg = small();
        let params = cfg.init_params(9);
        let words = vec![vec![0.1, 0.2, 0.3], vec![-0.5, 1.0, 0.0]];
        let unpadded = Tensor::from_rows(&words).unwrap();
        let mut padded_rows = words.clone();
        padded_rows.push(vec![99.0, -99.0, 5.0]);
        padded_rows.push(vec![42.0, 42.0, 42.0]);
        let padded = Tensor::from_rows(&padded_rows).unwrap();
        let a = encode_text(&unpadded, 2, &params, &cfg).unwrap();
        let b = encode_text(&padded, 2, &params, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shapes_depend_only_on_config() {
        let cfg = small();
        let params = cfg.init_params(2);
        let a = encode_image(&Tensor::zeros(&[2, 4]), &params, &cfg).unwrap();
        let big = Tensor::matrix(2, 4, (0..8).map(|i| i as f64 * 1e3).collect()).unwrap();
        let b = encode_image(&big, &params, &cfg).unwrap();
        assert_eq!(a.global.shape(), b.global.shape());
        assert_eq!(a.local.shape(), b.local.shape());
        assert_eq!(a.parts.shape(), b.parts.shape());
    }
}

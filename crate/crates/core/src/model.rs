//! A complete matching model: encoders, mining projections, identity
//! classifiers and an optional trainable boundary, plus inference helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_images_on_tape, encode_texts_on_tape, EmbeddingBundle, EncoderConfig, Sample,
};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::params::{scaled_normal, ParamSet};
use crate::similarity::{
    breakdown_prepared, Branches, FpmParams, Fusion, MiningOptions, PreparedSide,
    SimilarityBreakdown,
};

pub const THETA: &str = "fpm.theta";
pub const PHI: &str = "fpm.phi";
pub const CLASSIFIER_GLOBAL: &str = "classifier.global";
pub const CLASSIFIER_LOCAL: &str = "classifier.local";
pub const BOUNDARY: &str = "boundary.tau";

/// Architecture and variant switches that determine the parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub branches: Branches,
    /// Apply `min(s, 0)` to word scores before summing negative evidence.
    pub mining_mask: bool,
    /// Learn the boundary between matched and mismatched word scores.
    pub learnable_boundary: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            branches: Branches::ALL,
            mining_mask: true,
            learnable_boundary: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.branches.fusion()?;
        if self.learnable_boundary && !self.branches.fpm {
            return Err(Error::Config(
                "a learnable boundary needs the mining branch".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

impl Model {
    /// Fresh parameters, deterministic in `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let enc = &spec.encoder;
        let mut params = enc.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        params.insert(THETA, scaled_normal(&mut rng, enc.feature_dim, enc.projection_dim));
        params.insert(PHI, scaled_normal(&mut rng, enc.feature_dim, enc.projection_dim));
        params.insert(
            CLASSIFIER_GLOBAL,
            scaled_normal(&mut rng, enc.shared_dim, enc.identity_count),
        );
        params.insert(
            CLASSIFIER_LOCAL,
            scaled_normal(&mut rng, enc.local_width(), enc.identity_count),
        );
        if spec.learnable_boundary {
            params.insert(BOUNDARY, Tensor::zeros(&[1]));
        }
        Ok(Self { spec, params })
    }

    /// Wraps existing parameters, checking that every required tensor is present.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let template = Model::init(spec.clone(), 0)?;
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn fusion(&self) -> Fusion {
        self.spec.branches.fusion().expect("validated at construction")
    }

    /// Current boundary value; zero unless it is learned.
    pub fn boundary(&self) -> f64 {
        self.params
            .get(BOUNDARY)
            .map(|t| t.data()[0])
            .unwrap_or(0.0)
    }

    /// Mining settings, or `None` when the mining branch is off.
    pub fn mining_options(&self) -> Option<MiningOptions> {
        self.spec.branches.fpm.then(|| MiningOptions {
            mask: self.spec.mining_mask,
            boundary: self.boundary(),
        })
    }

    pub fn fpm_params(&self) -> Result<FpmParams> {
        FpmParams::from_params(&self.params)
    }

    /// Encodes images in chunks on inference tapes, in parallel.
    pub fn embed_images(&self, samples: &[&Sample]) -> Result<Vec<EmbeddingBundle>> {
        let cfg = &self.spec.encoder;
        let chunks: Vec<Result<Vec<EmbeddingBundle>>> = samples
            .par_chunks(32)
            .map(|chunk| {
                let mut tape = Tape::new();
                let vars = self.params.register(&mut tape, false);
                let raws: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
                let batch = encode_images_on_tape(&mut tape, &vars, &raws, cfg)?;
                Ok((0..chunk.len()).map(|b| batch.bundle(&tape, b, cfg, false)).collect())
            })
            .collect();
        flatten(chunks)
    }

    pub fn embed_texts(&self, samples: &[&Sample]) -> Result<Vec<EmbeddingBundle>> {
        let cfg = &self.spec.encoder;
        let chunks: Vec<Result<Vec<EmbeddingBundle>>> = samples
            .par_chunks(32)
            .map(|chunk| {
                let mut tape = Tape::new();
                let vars = self.params.register(&mut tape, false);
                let raws: Vec<(&Tensor, usize)> =
                    chunk.iter().map(|s| (&s.tokens, s.text_len)).collect();
                let batch = encode_texts_on_tape(&mut tape, &vars, &raws, cfg)?;
                Ok((0..chunk.len()).map(|b| batch.bundle(&tape, b, cfg, true)).collect())
            })
            .collect();
        flatten(chunks)
    }

    pub fn prepare_images(&self, samples: &[&Sample]) -> Result<Vec<PreparedSide>> {
        let theta = self.spec.branches.fpm.then(|| self.params.get(THETA)).transpose()?;
        self.embed_images(samples)?
            .par_iter()
            .map(|b| PreparedSide::new(b, theta))
            .collect()
    }

    pub fn prepare_texts(&self, samples: &[&Sample]) -> Result<Vec<PreparedSide>> {
        let phi = self.spec.branches.fpm.then(|| self.params.get(PHI)).transpose()?;
        self.embed_texts(samples)?
            .par_iter()
            .map(|b| PreparedSide::new(b, phi))
            .collect()
    }

    /// Scores prepared sides with this model's mining settings.
    pub fn score_prepared(&self, image: &PreparedSide, text: &PreparedSide) -> Result<SimilarityBreakdown> {
        breakdown_prepared(image, text, self.mining_options())
    }

    /// Full breakdown for one image and one caption, via the per-pair route.
    pub fn breakdown(&self, image: &Sample, text: &Sample) -> Result<SimilarityBreakdown> {
        let img = self.embed_images(&[image])?.remove(0);
        let txt = self.embed_texts(&[text])?.remove(0);
        let fpm = self.spec.branches.fpm.then(|| self.fpm_params()).transpose()?;
        SimilarityBreakdown::compute(&img, &txt, fpm.as_ref(), self.mining_options().unwrap_or_default())
    }
}

fn flatten(chunks: Vec<Result<Vec<EmbeddingBundle>>>) -> Result<Vec<EmbeddingBundle>> {
    let mut out = Vec::new();
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{generate_synthetic_dataset, SyntheticConfig};

    fn spec(branches: Branches) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                identity_count: 5,
                ..EncoderConfig::default()
            },
            branches,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_complete() {
        let a = Model::init(spec(Branches::ALL), 4).unwrap();
        let b = Model::init(spec(Branches::ALL), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::init(spec(Branches::ALL), 5).unwrap());
        for name in [THETA, PHI, CLASSIFIER_GLOBAL, CLASSIFIER_LOCAL] {
            assert!(a.params.contains(name));
        }
        assert_eq!(a.params.get(CLASSIFIER_LOCAL).unwrap().shape(), &[6 * 32, 5]);
        assert!(!a.params.contains(BOUNDARY));
        assert_eq!(a.boundary(), 0.0);
    }

    #[test]
    fn invalid_variants_are_rejected() {
        let bad = Branches {
            global: true,
            local: false,
            fpm: true,
        };
        assert!(matches!(Model::init(spec(bad), 0), Err(Error::Config(_))));
        let s = ModelSpec {
            learnable_boundary: true,
            ..spec(Branches {
                global: true,
                local: true,
                fpm: false,
            })
        };
        assert!(matches!(Model::init(s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mining_off_means_no_negative_evidence() {
        let ds = generate_synthetic_dataset(2, 5, 2, &SyntheticConfig::default()).unwrap();
        let b = Branches {
            global: true,
            local: true,
            fpm: false,
        };
        let m = Model::init(spec(b), 1).unwrap();
        for t in &ds.samples {
            let br = m.breakdown(&ds.samples[0], t).unwrap();
            assert_eq!(br.s_neg, 0.0);
            assert_eq!(br.s_local_neg, br.s_l);
        }
    }

    #[test]
    fn prepared_route_matches_per_pair_route() {
        let ds = generate_synthetic_dataset(3, 5, 2, &SyntheticConfig::default()).unwrap();
        let m = Model::init(spec(Branches::ALL), 2).unwrap();
        let refs: Vec<&Sample> = ds.samples.iter().collect();
        let imgs = m.prepare_images(&refs).unwrap();
        let txts = m.prepare_texts(&refs).unwrap();
        for (i, img) in imgs.iter().enumerate().step_by(3) {
            for (t, txt) in txts.iter().enumerate() {
                let fast = m.score_prepared(img, txt).unwrap();
                let slow = m.breakdown(&ds.samples[i], &ds.samples[t]).unwrap();
                assert!((fast.s_overall - slow.s_overall).abs() < 1e-12);
                assert_eq!(fast.word_regions, slow.word_regions);
            }
        }
    }
}

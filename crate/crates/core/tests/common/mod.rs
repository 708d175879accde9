//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use fpmine_core::encoders::{generate_synthetic_dataset, EncodedBatch, EncoderConfig, SyntheticConfig};
use fpmine_core::losses::{
    cross_relu_matched, cross_relu_mismatched, identity_loss, ranking_batch, total_loss, BatchLayout,
    Classifiers, LossWeights, ObjectiveSpec,
};
use fpmine_core::model::ModelSpec;
use fpmine_core::numerics::{finite_difference_grad, relative_error, Tape, Tensor, Var};
use fpmine_core::similarity::{score_batch, Branches, MiningVars};
use fpmine_core::training::{gradcheck, GradcheckOptions, TrainConfig};
use fpmine_core::{BatchPlan, Dataset, Model, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Points whose inputs sit closer than this to a kink are redrawn.
pub const MIN_KINK_MARGIN: f64 = 1e-4;
const FLOOR: f64 = 1e-7;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn fixed_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i + 1) as f64 * 0.7).sin()).collect()
}

fn weighted_root(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    tape.weighted_sum(v, &fixed_weights(n))
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// A scalar function of several tensors whose gradient is checked.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Inputs,
    pub build: Build,
}

#[derive(Debug)]
pub struct CaseOutcome {
    pub name: String,
    pub points: usize,
    pub redrawn: usize,
    pub max_relative_error: f64,
}

fn image_batch(v: &[Var]) -> EncodedBatch {
    EncodedBatch {
        global: v[0],
        local: v[1],
        parts: v[2],
        segments: vec![0..3, 3..6],
    }
}

fn text_batch(v: &[Var]) -> EncodedBatch {
    EncodedBatch {
        global: v[3],
        local: v[4],
        parts: v[5],
        segments: vec![0..2, 2..3, 3..5],
    }
}

/// Two images (3 regions each) and three captions (2, 1, 2 words) with
/// `C = 5`, global width 4 and local width 6, then `theta`, `phi` and a
/// boundary. Only the scoring code sees these, so the widths need not come
/// from one encoder configuration.
fn batch_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        uniform(rng, &[2, 4], -1.0, 1.0),
        uniform(rng, &[2, 6], -1.0, 1.0),
        uniform(rng, &[6, 5], -1.0, 1.0),
        uniform(rng, &[3, 4], -1.0, 1.0),
        uniform(rng, &[3, 6], -1.0, 1.0),
        uniform(rng, &[5, 5], -1.0, 1.0),
        uniform(rng, &[5, 3], -1.0, 1.0),
        uniform(rng, &[5, 3], -1.0, 1.0),
        uniform(rng, &[1], -0.1, 0.1),
    ]
}

fn mining(v: &[Var], mask: bool, boundary: bool) -> Option<MiningVars> {
    Some(MiningVars {
        theta: v[6],
        phi: v[7],
        mask,
        boundary: boundary.then_some(v[8]),
    })
}

fn layout() -> BatchLayout {
    BatchLayout {
        image_identities: vec![0, 1],
        text_identities: vec![0, 1, 2],
        matched: vec![(0, 0), (1, 1)],
        mismatched: vec![(0, 2), (1, 0)],
    }
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "global cosine",
            inputs: |r| vec![uniform(r, &[8], -1.0, 1.0), uniform(r, &[8], -1.0, 1.0)],
            build: |t, v| t.cosine(v[0], v[1]),
        },
        GradCase {
            name: "global/local similarity grids",
            inputs: batch_inputs,
            build: |t, v| {
                let imgs = image_batch(v);
                let s = score_batch(t, &imgs, &text_batch(v), None, 3)?;
                let a = weighted_root(t, s.s_g)?;
                let b = weighted_root(t, s.s_l)?;
                t.add(a, b)
            },
        },
        GradCase {
            name: "word-region similarity",
            inputs: batch_inputs,
            build: |t, v| {
                let pr = t.matmul(v[2], v[6])?;
                let pw = t.matmul(v[5], v[7])?;
                let ur = t.normalize_rows(pr);
                let uw = t.normalize_rows(pw);
                let s = t.matmul_bt(ur, uw)?;
                weighted_root(t, s)
            },
        },
        GradCase {
            name: "word max over regions",
            inputs: batch_inputs,
            build: |t, v| {
                let imgs = image_batch(v);
                let s = score_batch(t, &imgs, &text_batch(v), mining(v, true, false), 3)?;
                weighted_root(t, s.word_max.expect("mining on"))
            },
        },
        GradCase {
            name: "masked negative similarity",
            inputs: batch_inputs,
            build: |t, v| {
                let imgs = image_batch(v);
                let s = score_batch(t, &imgs, &text_batch(v), mining(v, true, false), 3)?;
                let a = weighted_root(t, s.s_neg)?;
                let b = weighted_root(t, s.s_local_neg)?;
                t.add(a, b)
            },
        },
        GradCase {
            name: "unmasked negative similarity with boundary",
            inputs: batch_inputs,
            build: |t, v| {
                let imgs = image_batch(v);
                let s = score_batch(t, &imgs, &text_batch(v), mining(v, false, true), 3)?;
                weighted_root(t, s.s_local_neg)
            },
        },
        GradCase {
            name: "matched cross-relu",
            inputs: |r| vec![uniform(r, &[7], -0.3, 0.3)],
            build: |t, v| cross_relu_matched(t, v[0], &LossWeights::default()),
        },
        GradCase {
            name: "mismatched cross-relu",
            inputs: |r| vec![uniform(r, &[7], -0.3, 0.3)],
            build: |t, v| cross_relu_mismatched(t, v[0], &LossWeights::default()),
        },
        GradCase {
            name: "identity loss",
            inputs: |r| vec![uniform(r, &[4, 6], -1.0, 1.0), uniform(r, &[6, 5], -1.0, 1.0)],
            build: |t, v| identity_loss(t, v[0], &[0, 2, 4, 1], v[1]),
        },
        GradCase {
            name: "ranking loss",
            inputs: |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            build: |t, v| ranking_batch(t, v[0], &layout(), 0.2),
        },
        GradCase {
            name: "total objective",
            inputs: |r| {
                let mut v = batch_inputs(r);
                v.push(uniform(r, &[4, 3], -1.0, 1.0));
                v.push(uniform(r, &[6, 3], -1.0, 1.0));
                v
            },
            build: |t, v| {
                let imgs = image_batch(v);
                let txts = text_batch(v);
                let s = score_batch(t, &imgs, &txts, mining(v, true, true), 3)?;
                let terms = total_loss(
                    t,
                    &s,
                    &imgs,
                    &txts,
                    &layout(),
                    Classifiers {
                        global: v[9],
                        local: v[10],
                    },
                    ObjectiveSpec {
                        branches: Branches::ALL,
                        local_neg_ranking: true,
                        boundary: Some(v[8]),
                    },
                    &LossWeights::default(),
                )?;
                Ok(terms.total)
            },
        },
    ]
}

/// Relative error of one point, or `None` if it lies too close to a kink.
pub fn check_point(case: &GradCase, inputs: &[Tensor]) -> Option<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = (case.build)(&mut tape, &vars).expect("case builds");
    if tape.kink_margin() < MIN_KINK_MARGIN {
        return None;
    }
    let mut grads = tape.backward(root).expect("scalar root");
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[i]).expect("trainable input");
        let numeric = finite_difference_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, y)| t.constant(if j == i { probe.clone() } else { y.clone() }))
                    .collect();
                let r = (case.build)(&mut t, &vs).expect("case builds");
                t.scalar(r)
            },
            x,
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric, FLOOR));
    }
    Some(worst)
}

/// Checks `points` non-kink points of one case, redrawing kinked ones.
pub fn run_case(case: &GradCase, points: usize, seed: u64) -> CaseOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let mut redrawn = 0;
    let mut max_relative_error: f64 = 0.0;
    while done < points {
        let inputs = (case.inputs)(&mut rng);
        match check_point(case, &inputs) {
            Some(e) => {
                max_relative_error = max_relative_error.max(e);
                done += 1;
            }
            None => {
                redrawn += 1;
                assert!(redrawn < 50 * points, "{}: too many kinked draws", case.name);
            }
        }
    }
    CaseOutcome {
        name: case.name.into(),
        points,
        redrawn,
        max_relative_error,
    }
}

/// A tiny dataset and configuration for end-to-end objective checks.
pub fn tiny_setup(seed: u64) -> (Dataset, TrainConfig) {
    let syn = SyntheticConfig {
        region_count: 3,
        attribute_values: 4,
        latent_dim: 4,
        image_raw_dim: 5,
        text_raw_dim: 4,
        max_words: 5,
        min_words: 2,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic_dataset(seed, 6, 2, &syn).unwrap();
    let encoder = EncoderConfig {
        feature_dim: 6,
        shared_dim: 4,
        projection_dim: 3,
        ..EncoderConfig::default()
    }
    .with_dataset_dims(&ds.dims);
    let config = TrainConfig {
        model: ModelSpec {
            encoder,
            ..ModelSpec::default()
        },
        batch_size: 4,
        epochs: 2,
        val_fraction: 0.0,
        eval_every: 0,
        ..TrainConfig::default()
    };
    (ds, config)
}

/// Model-level gradient checks of the whole objective over every parameter
/// group, on `points` random (model, batch) draws away from kinks.
pub fn model_gradcheck(points: usize, seed: u64, learnable_boundary: bool) -> CaseOutcome {
    let (ds, mut config) = tiny_setup(seed);
    config.model.learnable_boundary = learnable_boundary;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions {
        step: FD_STEP,
        tolerance: GRAD_TOLERANCE,
        floor: FLOOR,
        min_kink_margin: MIN_KINK_MARGIN,
        coords_per_group: 6,
        seed,
    };
    let (mut done, mut redrawn, mut worst) = (0, 0, 0.0f64);
    while done < points {
        let mut model = Model::init(config.model.clone(), rng.random()).unwrap();
        if learnable_boundary {
            let tau = Tensor::vector(vec![rng.random_range(-0.05..0.05)]).unwrap();
            model.params.insert("boundary.tau", tau);
        }
        let n = ds.samples.len();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n);
        while ds.samples[b].identity == ds.samples[a].identity {
            b = rng.random_range(0..n);
        }
        let plan = BatchPlan {
            matched: vec![(a, a), (b, b)],
            mismatched: vec![(a, b), (b, a)],
            batch_size: 4,
        };
        match gradcheck(&model, &ds, &plan, &config, &GradcheckOptions { seed: rng.random(), ..opts }) {
            Ok(report) => {
                worst = worst.max(report.max_relative_error);
                done += 1;
            }
            Err(fpmine_core::Error::Numerical(_)) => {
                redrawn += 1;
                assert!(redrawn < 50 * points, "too many kinked model draws");
            }
            Err(e) => panic!("gradcheck failed: {e}"),
        }
    }
    CaseOutcome {
        name: if learnable_boundary {
            "full model with boundary".into()
        } else {
            "full model".into()
        },
        points,
        redrawn,
        max_relative_error: worst,
    }
}

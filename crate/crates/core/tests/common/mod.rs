#![allow(dead_code)]

use htr_core::augment::LabeledSample;
use htr_core::ctc::{
    ctc_brute_force, ctc_loss, ctc_loss_node, required_frames, LogitSequence, Vocabulary,
};
use htr_core::layers::{
    Blstm, Builder, Conv2d, ConvSpec, Dense, Gate, GateSpec, MaxPool2d, Norm, NormKind,
};
use htr_core::tensor::grad_check;
use htr_core::train::{synth_samples, SynthOptions};
use htr_core::{Error, Graph, Param, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 50;
const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Checked {
    Conv,
    SeparableConv,
    Pool,
    BatchNorm,
    LayerNorm,
    Gate,
    Lstm,
    Dense,
    Ctc,
}

impl Checked {
    pub const ALL: [Checked; 9] = [
        Checked::Conv,
        Checked::SeparableConv,
        Checked::Pool,
        Checked::BatchNorm,
        Checked::LayerNorm,
        Checked::Gate,
        Checked::Lstm,
        Checked::Dense,
        Checked::Ctc,
    ];
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_slice(shape, &data)
}

/// Distinct values at least 0.05 apart, so finite differences never flip a
/// max-pool winner.
fn spread_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_slice(shape, &levels)
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output component matters.
fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let r = g.input(weights.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Worst relative gradient error of one layer kind at one seed; the input
/// itself is checked alongside the layer's parameters.
pub fn layer_grad_error(which: Checked, seed: u64) -> Result<f64> {
    let mut r = rng(seed ^ 0xa11);
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, seed);
    match which {
        Checked::Conv | Checked::SeparableConv => {
            let spec = ConvSpec::new(2, 3).separable(which == Checked::SeparableConv);
            let layer = Conv2d::new(&mut b, "c", spec)?;
            let x = Param::new("x", random_tensor(&mut r, &[2, 2, 4, 5], 1.0));
            // biases start at zero; give them a value so their gradient path is exercised
            for p in layer.params() {
                let shape = p.shape();
                p.set_value(random_tensor(&mut r, &shape, 0.5))?;
            }
            let proj = random_tensor(&mut r, &[2, 3, 4, 5], 1.0);
            let mut params = layer.params();
            params.push(x.clone());
            grad_check(&params, EPS, |g| {
                let xv = g.param(&x);
                let y = layer.forward(g, xv)?;
                project(g, y, &proj)
            })
        }
        Checked::Pool => {
            let x = Param::new("x", spread_tensor(&mut r, &[2, 2, 4, 6]));
            let proj = random_tensor(&mut r, &[2, 2, 2, 3], 1.0);
            grad_check(std::slice::from_ref(&x), EPS, |g| {
                let xv = g.param(&x);
                let y = MaxPool2d::default().forward(g, xv)?;
                project(g, y, &proj)
            })
        }
        Checked::BatchNorm | Checked::LayerNorm => {
            let kind = if which == Checked::BatchNorm {
                NormKind::Batch
            } else {
                NormKind::Layer
            };
            let norm = Norm::new(&mut b, "n", 3, kind)?;
            norm.gamma().set_value(random_tensor(&mut r, &[3], 1.5))?;
            norm.beta().set_value(random_tensor(&mut r, &[3], 0.5))?;
            let x = Param::new("x", random_tensor(&mut r, &[3, 3, 2, 3], 2.0));
            let proj = random_tensor(&mut r, &[3, 3, 2, 3], 1.0);
            let mut params = norm.params();
            params.push(x.clone());
            grad_check(&params, EPS, |g| {
                let xv = g.param(&x);
                let y = norm.forward(g, xv)?;
                project(g, y, &proj)
            })
        }
        Checked::Gate => {
            let gate = Gate::new(&mut b, "g", GateSpec::new(4))?;
            for p in gate.params() {
                let shape = p.shape();
                let jitter = random_tensor(&mut r, &shape, 0.3);
                let moved = p.value().zip_map(&jitter, "jitter", |a, j| a + j)?;
                p.set_value(moved)?;
            }
            let x = Param::new("x", random_tensor(&mut r, &[3, 4, 2, 3], 2.0));
            let proj = random_tensor(&mut r, &[3, 2, 2, 3], 1.0);
            let mut params = gate.params();
            params.push(x.clone());
            grad_check(&params, EPS, |g| {
                let xv = g.param(&x);
                let y = gate.forward(g, xv)?;
                project(g, y, &proj)
            })
        }
        Checked::Lstm => {
            let blstm = Blstm::new(&mut b, "l", 3, 2)?;
            let x = Param::new("x", random_tensor(&mut r, &[4, 2, 3], 1.0));
            let proj = random_tensor(&mut r, &[4, 2, 4], 1.0);
            let mut params = blstm.params();
            params.push(x.clone());
            grad_check(&params, EPS, |g| {
                let xv = g.param(&x);
                let y = blstm.forward(g, xv)?;
                project(g, y, &proj)
            })
        }
        Checked::Dense => {
            let dense = Dense::new(&mut b, "d", 4, 3, true)?;
            let x = Param::new("x", random_tensor(&mut r, &[5, 4], 1.0));
            let proj = random_tensor(&mut r, &[5, 3], 1.0);
            let mut params = dense.params();
            params.push(x.clone());
            grad_check(&params, EPS, |g| {
                let xv = g.param(&x);
                let y = dense.forward(g, xv)?;
                project(g, y, &proj)
            })
        }
        Checked::Ctc => {
            let frames = r.gen_range(3..=6);
            let symbols = r.gen_range(1..=3);
            let label = random_label(&mut r, symbols, frames);
            let logits = Param::new("logits", random_tensor(&mut r, &[frames, symbols + 1], 2.0));
            grad_check(std::slice::from_ref(&logits), EPS, |g| {
                let z = g.param(&logits);
                let p = g.softmax(z, 1)?;
                ctc_loss_node(g, p, &label)
            })
        }
    }
}

/// A label over `symbols` classes that fits in `frames`.
pub fn random_label(r: &mut ChaCha8Rng, symbols: usize, frames: usize) -> Vec<usize> {
    loop {
        let len = r.gen_range(0..=frames);
        let label: Vec<usize> = (0..len).map(|_| r.gen_range(0..symbols)).collect();
        if required_frames(&label) <= frames {
            return label;
        }
    }
}

pub fn random_probs(r: &mut ChaCha8Rng, frames: usize, classes: usize) -> LogitSequence {
    let mut data = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| r.gen_range(0.01..1.0f64)).collect();
        let sum: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / sum));
    }
    LogitSequence::new(Tensor::from_slice(&[frames, classes], &data)).expect("rows are normalized")
}

/// Largest `|ctc_loss + ln P_brute|` over `cases` random problems with
/// `T ≤ 6` and at most three symbols. Unalignable labels must be rejected
/// and have zero enumerated probability.
pub fn ctc_oracle_worst(cases: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let frames = r.gen_range(1..=6);
        let symbols = r.gen_range(1..=3);
        let probs = random_probs(&mut r, frames, symbols + 1);
        let len = r.gen_range(0..=frames);
        let label: Vec<usize> = (0..len).map(|_| r.gen_range(0..symbols)).collect();
        let brute = ctc_brute_force(&probs, &label, 6)?;
        match ctc_loss(&probs, &label) {
            Ok(loss) => worst = worst.max((loss + brute.ln()).abs()),
            Err(Error::Unalignable { .. }) if brute == 0.0 => {}
            Err(e) => return Err(e),
        }
    }
    Ok(worst)
}

pub fn smoke_vocab() -> Vocabulary {
    Vocabulary::new("abcdefgh".chars()).unwrap()
}

/// The sixteen synthetic lines every smoke run overfits.
pub fn smoke_samples() -> Vec<LabeledSample> {
    synth_samples(
        &smoke_vocab(),
        &SynthOptions {
            count: 16,
            min_len: 2,
            max_len: 5,
            seed: 3,
            augment: None,
        },
    )
    .unwrap()
}

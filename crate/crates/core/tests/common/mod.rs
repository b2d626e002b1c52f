#![allow(dead_code)]

use tsa::data::{tokenize, Example};
use tsa::encoder::{EncoderConfig, PositionMode};
use tsa::fusion::PoolStrategy;
use tsa::numerics::{Rng, Tape, Tensor, Var};
use tsa::classifier::ModelConfig;
use tsa::Result;

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Worst relative error between the tape gradient of `f(x)` (which must be
/// scalar) and central differences with step `h`.
pub fn fd_check(x: &Tensor, h: f64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let loss = f(&mut tape, xv).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.variable(t.clone());
        let l = f(&mut tape, v).unwrap();
        tape.value(l).item()
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (eval(&p) - eval(&m)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Sums `f(x)` weighted by a fixed random tensor so every output entry
/// reaches the gradient with a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = random_tensor(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

const POSITIVE: &[&str] = &["good", "great", "lovely", "superb", "fine", "charming"];
const NEGATIVE: &[&str] = &["bad", "awful", "dull", "poor", "terrible", "boring"];
const FILLER: &[&str] = &["the", "movie", "was", "a", "plot", "and", "it", "film", "story", "cast"];

/// Balanced two-class sentences: filler words plus one polar cue word.
pub fn synthetic_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 1;
            let len = 2 + rng.below(7);
            let mut words: Vec<&str> = (0..len).map(|_| FILLER[rng.below(FILLER.len())]).collect();
            let cues = if positive { POSITIVE } else { NEGATIVE };
            words.insert(rng.below(words.len() + 1), cues[rng.below(cues.len())]);
            let text = words.join(" ");
            Example {
                label: if positive { "positive" } else { "negative" }.to_string(),
                tokens: tokenize(&text, false),
                text,
                line: i + 1,
            }
        })
        .collect()
}

pub fn small_model_config(input_dim: usize, input_layers: Option<usize>, num_classes: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        input_layers,
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            k_clip: 3,
            p_attn: 0.1,
            p_res: 0.2,
            ln_eps: 1e-6,
            position: PositionMode::Relative,
        },
        d_lstm: 12,
        d_ff_head: 16,
        pooling: PoolStrategy::ConcatBoth,
        p_emb: 0.5,
        p_drop: 0.1,
        eps_ls: 0.1,
        num_classes,
    }
}

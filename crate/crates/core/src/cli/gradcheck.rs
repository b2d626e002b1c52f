//! Finite-difference check of every analytic gradient in a tiny model.

use crate::classifier::{ModelConfig, TsaModel};
use crate::data::{collate, EmbeddedExample, LabelMap};
use crate::encoder::{EncoderConfig, PositionMode};
use crate::error::Result;
use crate::fusion::PoolStrategy;
use crate::numerics::{Fault, Mode, Rng, Tape, Tensor};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub position: PositionMode,
    pub pooling: PoolStrategy,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 7,
            fault: None,
            position: PositionMode::Relative,
            pooling: PoolStrategy::ConcatBoth,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    pub elements: usize,
    /// Elements whose perturbation moved a ReLU input across zero; the
    /// central difference is not a derivative estimate there.
    pub kink_skipped: usize,
    pub worst_rel_err: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < TOLERANCE && self.kink_skipped < self.elements
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed()).map(|g| g.name.as_str()).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn tiny_config(options: &GradcheckOptions, layers: usize, dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim: dim,
        input_layers: Some(layers),
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            d_ff: 12,
            k_clip: 3,
            p_attn: 0.1,
            p_res: 0.2,
            ln_eps: 1e-6,
            position: options.position,
        },
        d_lstm: 6,
        d_ff_head: 8,
        pooling: options.pooling,
        p_emb: 0.5,
        p_drop: 0.1,
        eps_ls: 0.1,
        num_classes: 3,
    }
}

/// Builds the tiny model and a padded two-sentence batch of synthetic
/// layered contextual vectors.
pub fn tiny_problem(options: &GradcheckOptions) -> Result<(TsaModel, crate::data::Batch)> {
    let (layers, dim) = (3, 5);
    let config = tiny_config(options, layers, dim);
    let labels = LabelMap::from_labels(["a", "b", "c"])?;
    let model = TsaModel::new(config, labels, options.seed)?;
    let mut rng = Rng::derive(options.seed, 99);
    let items: Vec<EmbeddedExample> = [(5usize, 2usize), (3, 0)]
        .iter()
        .enumerate()
        .map(|(i, &(len, label))| {
            let data = (0..layers * len * dim).map(|_| rng.normal()).collect();
            Ok(EmbeddedExample {
                input: Tensor::new(vec![layers, len, dim], data)?,
                label: Some(label),
                index: i,
            })
        })
        .collect::<Result<_>>()?;
    let batch = collate(&items.iter().collect::<Vec<_>>())?;
    Ok((model, batch))
}

/// Compares analytic gradients against central differences for every
/// parameter element.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let (mut model, batch) = tiny_problem(options)?;
    let mut rng = Rng::new(0);

    let eval = |model: &TsaModel| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &batch, Mode::Eval, &mut Rng::new(0))?;
        Ok((tape.value(loss).item(), tape.relu_pattern()))
    };
    let (_, base_pattern) = eval(&model)?;

    let mut tape = match options.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let loss = model.loss(&mut tape, &batch, Mode::Eval, &mut rng)?;
    model.params.zero_grad();
    tape.backward_into(loss, &mut model.params)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .map(|(_, p)| {
            let g = p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (p.name.clone(), g)
        })
        .collect();

    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut groups = Vec::with_capacity(ids.len());
    for (id, (name, grad)) in ids.into_iter().zip(analytic) {
        let n = model.params.get(id).value.numel();
        let mut worst = 0.0f64;
        let mut kink_skipped = 0;
        for e in 0..n {
            let orig = model.params.get(id).value.data()[e];
            model.params.get_mut(id).value.data_mut()[e] = orig + STEP;
            let (plus, plus_pattern) = eval(&model)?;
            model.params.get_mut(id).value.data_mut()[e] = orig - STEP;
            let (minus, minus_pattern) = eval(&model)?;
            model.params.get_mut(id).value.data_mut()[e] = orig;
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                kink_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grad[e], numeric));
        }
        groups.push(GroupResult {
            name,
            elements: n,
            kink_skipped,
            worst_rel_err: worst,
        });
    }
    Ok(GradcheckReport { groups })
}

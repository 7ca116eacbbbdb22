use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, total_loss_and_gradient, HarmonizerConfig, HarmonizerLossBreakdown};
use super::network::{accuracy, ToyBatch, ToyNetwork};
use super::pyramid::clip_levels;
use super::{HarmonizerError, ImportanceMap, MapSource, Result};

/// One batch of the training stream with its (optional) human maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedBatch {
    pub batch: ToyBatch,
    pub phi: Vec<Option<ImportanceMap>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: HarmonizerConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
}

impl TrainConfig {
    pub fn new(loss: HarmonizerConfig, learning_rate: f64, epochs: usize) -> Self {
        Self {
            loss,
            learning_rate,
            momentum: 0.9,
            epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained network.
    pub epoch: usize,
    pub loss: HarmonizerLossBreakdown,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: ToyNetwork,
    pub history: Vec<EpochRecord>,
    pub diverged: bool,
}

fn merged(stream: &[AnnotatedBatch]) -> AnnotatedBatch {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut phi = Vec::new();
    for b in stream {
        inputs.extend(b.batch.inputs.iter().cloned());
        labels.extend(b.batch.labels.iter().copied());
        phi.extend(b.phi.iter().cloned());
    }
    AnnotatedBatch {
        batch: ToyBatch { inputs, labels },
        phi,
    }
}

fn record(
    net: &ToyNetwork,
    all: &AnnotatedBatch,
    config: &HarmonizerConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    Ok(EpochRecord {
        epoch,
        loss: total_loss(net, &all.batch, &all.phi, config)?,
        accuracy: accuracy(net, &all.batch)?,
    })
}

/// Gradient descent with heavy-ball momentum over the batch stream. The
/// history holds one record per epoch, evaluated on the whole stream.
/// Training stops early, keeping the history so far, if the loss stops
/// being finite.
pub fn toy_harmonize_train(
    net: &ToyNetwork,
    stream: &[AnnotatedBatch],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(config.learning_rate > 0.0) {
        return Err(HarmonizerError::Invalid("learning rate must be > 0".into()));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(HarmonizerError::Invalid(
            "momentum must lie in [0, 1)".into(),
        ));
    }
    if stream.is_empty() {
        return Err(HarmonizerError::Invalid("empty training stream".into()));
    }
    let mut loss_cfg = config.loss;
    let (h, w) = net.input_shape;
    if stream.iter().any(|b| b.phi.iter().any(Option::is_some)) {
        loss_cfg.n_levels = clip_levels(h, w, loss_cfg.n_levels);
    }
    let all = merged(stream);
    let mut net = net.clone();
    let mut history = vec![record(&net, &all, &loss_cfg, 0)?];
    let mut velocity = vec![0.0; net.n_params()];
    let mut params = net.params_flat();
    for epoch in 1..=config.epochs {
        for b in stream {
            let (_, grad) = total_loss_and_gradient(&net, &b.batch, &b.phi, &loss_cfg)?;
            if grad.iter().any(|g| !g.is_finite()) {
                log::warn!("non-finite gradient at epoch {epoch}; stopping");
                return Ok(TrainOutcome {
                    net,
                    history,
                    diverged: true,
                });
            }
            for ((v, p), g) in velocity.iter_mut().zip(params.iter_mut()).zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
                *p += *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                log::warn!("non-finite parameters at epoch {epoch}; stopping");
                return Ok(TrainOutcome {
                    net,
                    history,
                    diverged: true,
                });
            }
            net.set_params_flat(&params)?;
        }
        let rec = record(&net, &all, &loss_cfg, epoch)?;
        let finite = rec.loss.total.is_finite();
        history.push(rec);
        if !finite {
            return Ok(TrainOutcome {
                net,
                history,
                diverged: true,
            });
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        diverged: false,
    })
}

/// Classification task whose label depends only on planted pixel regions:
/// the class is the template `M_c` with the largest inner product with the
/// input, and the human map of an item is the template of its class.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    pub templates: Vec<Array2<f64>>,
    pub train: Vec<AnnotatedBatch>,
    pub test: AnnotatedBatch,
}

pub const PLANTED_SIZE: usize = 8;

/// Two 3x3 blocks on opposite diagonals of an 8x8 canvas.
pub fn planted_templates() -> Vec<Array2<f64>> {
    let block = |r0: usize, c0: usize| {
        Array2::from_shape_fn((PLANTED_SIZE, PLANTED_SIZE), |(r, c)| {
            if (r0..r0 + 3).contains(&r) && (c0..c0 + 3).contains(&c) {
                1.0
            } else {
                0.0
            }
        })
    };
    vec![block(1, 1), block(4, 4)]
}

pub fn planted_label(templates: &[Array2<f64>], x: &Array2<f64>) -> usize {
    let scores: Vec<f64> = templates.iter().map(|m| (m * x).sum()).collect();
    scores
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &s)| if s > b.1 { (i, s) } else { b },
        )
        .0
}

fn planted_items<R: Rng>(
    rng: &mut R,
    templates: &[Array2<f64>],
    n: usize,
    offset: usize,
) -> AnnotatedBatch {
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for i in 0..n {
        let x = Array2::from_shape_fn((PLANTED_SIZE, PLANTED_SIZE), |_| rng.random::<f64>());
        let y = planted_label(templates, &x);
        phi.push(Some(
            ImportanceMap::new(
                MapSource::Human,
                format!("planted_{}", offset + i),
                templates[y].clone(),
            )
            .expect("templates are valid maps"),
        ));
        inputs.push(x);
        labels.push(y);
    }
    AnnotatedBatch {
        batch: ToyBatch { inputs, labels },
        phi,
    }
}

pub fn planted_saliency_task(
    n_train: usize,
    n_test: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PlantedTask> {
    if batch_size == 0 || n_train == 0 || n_test == 0 {
        return Err(HarmonizerError::Invalid("task sizes must be >= 1".into()));
    }
    let templates = planted_templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut made = 0;
    while made < n_train {
        let n = batch_size.min(n_train - made);
        train.push(planted_items(&mut rng, &templates, n, made));
        made += n;
    }
    let test = planted_items(&mut rng, &templates, n_test, n_train);
    Ok(PlantedTask {
        templates,
        train,
        test,
    })
}

/// Settings of the planted-saliency comparison between a baseline run
/// (alignment weight 0) and a harmonized run from the same initial network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSettings {
    pub n_train: usize,
    pub n_test: usize,
    pub batch_size: usize,
    pub task_seed: u64,
    pub init_seed: u64,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_levels: usize,
    pub label_smoothing: f64,
}

impl Default for PilotSettings {
    fn default() -> Self {
        Self {
            n_train: 2048,
            n_test: 512,
            batch_size: 32,
            task_seed: 7,
            init_seed: 8,
            hidden: vec![32],
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 40,
            lambda1: 2.0,
            lambda2: 1e-4,
            n_levels: 5,
            label_smoothing: super::DEFAULT_LABEL_SMOOTHING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotRun {
    pub lambda1: f64,
    pub diverged: bool,
    /// Mean training-set alignment before and after training.
    pub alignment_initial: f64,
    pub alignment_final: f64,
    pub alignment_ratio: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_cce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub settings: PilotSettings,
    pub baseline: PilotRun,
    pub harmonized: PilotRun,
}

pub fn planted_pilot(settings: &PilotSettings) -> Result<PilotReport> {
    let task = planted_saliency_task(
        settings.n_train,
        settings.n_test,
        settings.batch_size,
        settings.task_seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.init_seed);
    let net = ToyNetwork::random((PLANTED_SIZE, PLANTED_SIZE), &settings.hidden, 2, &mut rng)?;
    let run = |lambda1: f64| -> Result<PilotRun> {
        let config = TrainConfig {
            loss: HarmonizerConfig {
                lambda1,
                lambda2: settings.lambda2,
                n_levels: settings.n_levels,
                label_smoothing: settings.label_smoothing,
            },
            learning_rate: settings.learning_rate,
            momentum: settings.momentum,
            epochs: settings.epochs,
        };
        let out = toy_harmonize_train(&net, &task.train, &config)?;
        let first = &out.history[0];
        let last = out.history.last().expect("history has the initial record");
        Ok(PilotRun {
            lambda1,
            diverged: out.diverged,
            alignment_initial: first.loss.alignment,
            alignment_final: last.loss.alignment,
            alignment_ratio: last.loss.alignment / first.loss.alignment,
            train_accuracy: last.accuracy,
            test_accuracy: accuracy(&out.net, &task.test.batch)?,
            final_cce: last.loss.cce,
        })
    };
    Ok(PilotReport {
        settings: settings.clone(),
        baseline: run(0.0)?,
        harmonized: run(settings.lambda1)?,
    })
}

//! The hallucination probe: input → 256 → 128 → 64 → 1 with ReLU, dropout and
//! a sigmoid head, trained with AdamW on binary cross-entropy.

pub mod checkpoint;
pub mod early_stop;
pub mod mlp;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use early_stop::{early_stop, EpochRunner, StopError, StopOutcome};
pub use mlp::{AdamW, DimensionError, Layer, Mlp};

pub const HIDDEN: [usize; 3] = [256, 128, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub input_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold: f32,
    /// Z-score inputs with statistics from the training split.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            input_size: 0,
            learning_rate: 2.5e-6,
            weight_decay: 1e-5,
            dropout: 0.15,
            max_epochs: 800,
            patience: 30,
            batch_size: 128,
            seed: 0,
            threshold: 0.5,
            standardize: false,
        }
    }
}

impl ProbeConfig {
    pub fn new(input_size: usize) -> Self {
        Self { input_size, ..Self::default() }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size];
        s.extend(HIDDEN);
        s.push(1);
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Dimension(#[from] DimensionError),
    #[error(transparent)]
    Stop(#[from] StopError),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("labels must be 0 or 1, found {0}")]
    Label(f32),
    #[error("{rows} feature rows but {labels} labels")]
    Shape { rows: usize, labels: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature rows with 0/1 targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Array2<f32>,
    pub y: Array1<f32>,
}

impl Samples {
    pub fn new(x: Array2<f32>, y: Array1<f32>) -> Result<Self, ProbeError> {
        if x.nrows() != y.len() {
            return Err(ProbeError::Shape { rows: x.nrows(), labels: y.len() });
        }
        if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(ProbeError::Label(bad));
        }
        Ok(Self { x, y })
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: &[u8]) -> Result<Self, ProbeError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(DimensionError { expected: dim, got: r.len() }.into());
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let x = Array2::from_shape_vec((rows.len(), dim), flat).expect("row-major shape");
        Self::new(x, labels.iter().map(|&l| f32::from(l)).collect())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { x: self.x.select(Axis(0), rows), y: self.y.select(Axis(0), rows) }
    }
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f32>) -> Self {
        let n = x.nrows().max(1) as f64;
        let cols = x.ncols();
        let mut mean = vec![0f64; cols];
        let mut sq = vec![0f64; cols];
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                sq[j] += (f64::from(v) - mean[j]).powi(2);
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s as f32 } else { 1.0 }).collect();
        Self { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    pub fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// A trained network together with its configuration and input scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub config: ProbeConfig,
    pub standardizer: Option<Standardizer>,
    pub net: Mlp<f32>,
}

impl Probe {
    fn prepare(&self, x: &Array2<f32>) -> Array2<f32> {
        match &self.standardizer {
            Some(s) => s.apply(x),
            None => x.clone(),
        }
    }

    pub fn predict(&self, x: &Array2<f32>) -> Result<Array1<f32>, ProbeError> {
        Ok(self.net.predict(self.prepare(x).view())?)
    }

    pub fn predict_one(&self, x: &[f32]) -> Result<f32, ProbeError> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        Ok(self.predict(&row)?[0])
    }

    pub fn loss(&self, s: &Samples) -> Result<f32, ProbeError> {
        Ok(self.net.loss(self.prepare(&s.x).view(), s.y.view())?)
    }
}

/// Fraction of samples whose prediction (`p >= threshold` means 1) equals the
/// label.
pub fn evaluate(probe: &Probe, test: &Samples, threshold: f32) -> Result<f64, ProbeError> {
    if test.is_empty() {
        return Err(ProbeError::Empty("test"));
    }
    let p = probe.predict(&test.x)?;
    Ok(accuracy(&p, &test.y, threshold))
}

pub fn accuracy(probabilities: &Array1<f32>, labels: &Array1<f32>, threshold: f32) -> f64 {
    let hits = probabilities
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= threshold) == (y == 1.0))
        .count();
    hits as f64 / labels.len() as f64
}

struct Trainer<'a> {
    net: Mlp<f32>,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    train: &'a Samples,
    val: &'a Samples,
    order: Vec<usize>,
    batch_size: usize,
    dropout: f64,
}

impl EpochRunner for Trainer<'_> {
    type Checkpoint = Mlp<f32>;

    fn run_epoch(&mut self, _epoch: usize) -> f64 {
        self.order.shuffle(&mut self.rng);
        for batch in self.order.chunks(self.batch_size) {
            let x = self.train.x.select(Axis(0), batch);
            let y = self.train.y.select(Axis(0), batch);
            let trace = self
                .net
                .forward_trace(x.view(), Some((self.dropout, &mut self.rng)))
                .expect("dimensions checked before training");
            let (_, grads) = self.net.backward(&trace, y.view());
            self.opt.update(&mut self.net, &grads);
        }
        f64::from(self.net.loss(self.val.x.view(), self.val.y.view()).expect("dimensions checked"))
    }

    fn snapshot(&self) -> Mlp<f32> {
        self.net.clone()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: Probe,
    pub outcome: StopOutcome<()>,
}

/// Trains one network. The returned probe holds the parameters of the epoch
/// with the lowest validation loss.
pub fn train(train: &Samples, val: &Samples, config: &ProbeConfig) -> Result<TrainedProbe, ProbeError> {
    if train.is_empty() {
        return Err(ProbeError::Empty("training"));
    }
    if val.is_empty() {
        return Err(ProbeError::Empty("validation"));
    }
    for s in [train, val] {
        if s.dim() != config.input_size {
            return Err(DimensionError { expected: config.input_size, got: s.dim() }.into());
        }
    }
    let standardizer = config.standardize.then(|| Standardizer::fit(&train.x));
    let (train_s, val_s);
    let (train, val) = match &standardizer {
        Some(s) => {
            train_s = Samples { x: s.apply(&train.x), y: train.y.clone() };
            val_s = Samples { x: s.apply(&val.x), y: val.y.clone() };
            (&train_s, &val_s)
        }
        None => (train, val),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = Mlp::init(&config.layer_sizes(), &mut rng);
    let opt = AdamW::new(&net, config.learning_rate, config.weight_decay);
    let mut trainer = Trainer {
        net,
        opt,
        rng,
        train,
        val,
        order: (0..train.len()).collect(),
        batch_size: config.batch_size.max(1),
        dropout: config.dropout,
    };
    let out = early_stop(&mut trainer, config.max_epochs, config.patience)?;
    Ok(TrainedProbe {
        probe: Probe { config: config.clone(), standardizer, net: out.checkpoint },
        outcome: StopOutcome {
            best_epoch: out.best_epoch,
            best_val_loss: out.best_val_loss,
            stop_epoch: out.stop_epoch,
            checkpoint: (),
            val_losses: out.val_losses,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stop_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ProbeConfig,
    pub seeds: Vec<SeedResult>,
    /// Over seeds that completed.
    pub mean_accuracy: f64,
    /// Population standard deviation.
    pub std_accuracy: f64,
    pub completed: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains and tests one network per seed, in parallel. A seed that fails is
/// reported in its entry and left out of the aggregate.
pub fn train_seeds(
    train_set: &Samples,
    val: &Samples,
    test: &Samples,
    config: &ProbeConfig,
    seeds: &[u64],
) -> (TrainReport, Vec<Option<Probe>>) {
    let runs: Vec<(SeedResult, Option<Probe>)> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ProbeConfig { seed, ..config.clone() };
            let result = train(train_set, val, &cfg).and_then(|t| {
                let acc = evaluate(&t.probe, test, cfg.threshold)?;
                Ok((t, acc))
            });
            match result {
                Ok((t, acc)) => (
                    SeedResult {
                        seed,
                        test_accuracy: Some(acc),
                        best_val_loss: Some(t.outcome.best_val_loss),
                        best_epoch: Some(t.outcome.best_epoch),
                        stop_epoch: Some(t.outcome.stop_epoch),
                        error: None,
                    },
                    Some(t.probe),
                ),
                Err(e) => {
                    log::warn!("seed {seed}: {e}");
                    (
                        SeedResult {
                            seed,
                            test_accuracy: None,
                            best_val_loss: None,
                            best_epoch: None,
                            stop_epoch: None,
                            error: Some(e.to_string()),
                        },
                        None,
                    )
                }
            }
        })
        .collect();
    let (seeds, probes): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let accs: Vec<f64> = seeds.iter().filter_map(|s| s.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let report = TrainReport { config: config.clone(), completed: accs.len(), seeds, mean_accuracy, std_accuracy };
    (report, probes)
}

/// Seeds `base, base+1, …` for `count` runs.
pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

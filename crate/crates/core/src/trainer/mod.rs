//! Optimization loop, evaluation, curriculum bootstrap and L-sweep.

mod adam;
mod checkpoint;
mod samples;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, compute_beta2, global_norm, AdamParams, AdamState};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use samples::{
    feasibility_check, prepare_entry, prepare_image, prepare_split, PrepOptions, PreparedSample, Rejection,
};

use crate::ctc::{best_path_decode, ctc_loss_node};
use crate::data::{Manifest, Split, SymbolTable};
use crate::error::{Error, Result};
use crate::imageprep::{augment, AugmentParams};
use crate::metrics::{cer_str, CerReport, DEFAULT_Z};
use crate::model::{bootstrap_from_line_model, BootstrapReport, Model, ModelConfig, LINE_HEIGHT};
use crate::tensor::{BnObservation, Graph, Mode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    /// Derived from the number of batches per epoch when absent.
    pub beta2: Option<f64>,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: Option<AugmentParams>,
    pub clip_norm: f64,
    pub prep: PrepOptions,
    /// Line-model checkpoint to bootstrap a page model from.
    pub curriculum: Option<PathBuf>,
    /// Stop once validation CER (percent) drops below this.
    pub stop_at_cer: Option<f64>,
    pub z: f64,
    /// Append-only JSONL with one record per epoch.
    pub metrics_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: None,
            eps: 1e-8,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            augment: None,
            clip_norm: 5.0,
            prep: PrepOptions::default(),
            curriculum: None,
            stop_at_cer: None,
            z: DEFAULT_Z,
            metrics_log: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean pre-clipping global gradient norm.
    pub grad_norm: f64,
    pub val_cer: Option<f64>,
    pub val_uncertainty: Option<f64>,
    pub val_chars: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub rejected: Vec<Rejection>,
    /// First epoch whose validation CER fell below `stop_at_cer`.
    pub reached_target_at: Option<usize>,
    pub beta2: f64,
}

struct SampleGrad {
    loss: f64,
    grads: Vec<(usize, Vec<f64>)>,
    bn: Vec<BnObservation>,
}

fn mix(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 over the three words
    let mut z =
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn average_observations(per_sample: Vec<Vec<BnObservation>>) -> Vec<BnObservation> {
    let n = per_sample.len() as f64;
    let mut acc: BTreeMap<usize, BnObservation> = BTreeMap::new();
    for obs in per_sample.into_iter().flatten() {
        match acc.get_mut(&obs.tag) {
            Some(a) => {
                a.mean.iter_mut().zip(&obs.mean).for_each(|(x, y)| *x += y);
                a.var.iter_mut().zip(&obs.var).for_each(|(x, y)| *x += y);
            }
            None => {
                acc.insert(obs.tag, obs);
            }
        }
    }
    acc.into_values()
        .map(|mut o| {
            o.mean.iter_mut().for_each(|v| *v /= n);
            o.var.iter_mut().for_each(|v| *v /= n);
            o
        })
        .collect()
}

pub struct Trainer {
    model: Model,
    symbols: SymbolTable,
    cfg: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, symbols: SymbolTable, cfg: TrainConfig) -> Result<Self> {
        check_symbols(&model, &symbols)?;
        if cfg.batch_size == 0 || cfg.clip_norm.is_nan() || cfg.clip_norm <= 0.0 {
            return Err(Error::Config("batch size and clip norm must be positive".into()));
        }
        AdamParams {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2.unwrap_or(0.99),
            eps: cfg.eps,
        }
        .validate()?;
        let adam = AdamState::new(model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            symbols,
            cfg,
            adam,
            rng,
            epoch: 0,
        })
    }

    /// Resumes from a checkpoint's weights, moments, epoch and rng.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ckpt.model()?, ckpt.symbols.clone(), cfg)?;
        t.adam = ckpt.optimizer.clone();
        t.rng = ckpt.rng.restore()?;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            &self.symbols,
            self.adam.clone(),
            self.epoch,
            RngState::capture(&self.rng),
        )
    }

    fn sample_grad(&self, s: &PreparedSample, index: usize) -> Result<SampleGrad> {
        let key = mix(self.cfg.seed, self.epoch, index);
        let input = match &self.cfg.augment {
            Some(p) => augment(&s.input, &mut ChaCha8Rng::seed_from_u64(key), p)?,
            None => s.input.clone(),
        };
        let mut g = Graph::new(Mode::Train, key.rotate_left(17));
        let f = self.model.forward(&mut g, &input)?;
        let lp = g.log_softmax(f.logits)?;
        let loss = ctc_loss_node(&mut g, lp, &s.target, self.model.config().blank())?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grads = f
            .bindings
            .bound()
            .filter_map(|(i, v)| grads.take(v).map(|gr| (i, gr)))
            .collect();
        Ok(SampleGrad {
            loss: value,
            grads,
            bn: g.take_bn_observations(),
        })
    }

    /// Trains for `cfg.epochs` more epochs. `on_epoch` sees every epoch's
    /// metrics and may stop early.
    pub fn fit(
        &mut self,
        train: &[PreparedSample],
        validate: &[PreparedSample],
        on_epoch: &mut dyn FnMut(&EpochMetrics, &Trainer) -> Control,
    ) -> Result<TrainReport> {
        let (ok, rejected) = feasibility_check(self.model.config(), train);
        if ok.is_empty() && !train.is_empty() {
            return Err(samples::all_rejected(&rejected));
        }
        let mut indexed: Vec<(usize, &PreparedSample)> = ok.into_iter().enumerate().collect();
        let batches = indexed.len().div_ceil(self.cfg.batch_size).max(1);
        let hp = AdamParams {
            lr: self.cfg.lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2.unwrap_or_else(|| compute_beta2(batches)),
            eps: self.cfg.eps,
        };
        hp.validate()?;
        let mut report = TrainReport {
            rejected,
            beta2: hp.beta2,
            ..Default::default()
        };
        if indexed.is_empty() {
            return Ok(report);
        }
        let mut log = match &self.cfg.metrics_log {
            Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        for _ in 0..self.cfg.epochs {
            let last_good = (self.model.clone(), self.adam.clone());
            self.epoch += 1;
            indexed.sort_by_key(|(i, _)| *i);
            indexed.shuffle(&mut self.rng);
            let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
            for (b, batch) in indexed.chunks(self.cfg.batch_size).enumerate() {
                let results: Vec<Result<SampleGrad>> = batch.par_iter().map(|&(i, s)| self.sample_grad(s, i)).collect();
                let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.model.params().len()];
                let mut bn = Vec::with_capacity(batch.len());
                let mut batch_loss = 0.0;
                for r in results {
                    let r = r?;
                    batch_loss += r.loss;
                    for (i, g) in r.grads {
                        match &mut grads[i] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                            slot => *slot = Some(g),
                        }
                    }
                    bn.push(r.bn);
                }
                let scale = 1.0 / batch.len() as f64;
                grads
                    .iter_mut()
                    .flatten()
                    .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
                batch_loss *= scale;
                let norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
                let step = if batch_loss.is_finite() && norm.is_finite() {
                    adam_step(self.model.params_mut(), &grads, &mut self.adam, &hp)
                } else {
                    Err(Error::NonFinite(format!("batch loss {batch_loss}")))
                };
                if let Err(e) = step {
                    (self.model, self.adam) = last_good;
                    self.epoch -= 1;
                    return Err(Error::Training(format!(
                        "diverged in epoch {} batch {}: {e}; model restored to the end of epoch {}",
                        self.epoch + 1,
                        b + 1,
                        self.epoch
                    )));
                }
                self.model.apply_bn_observations(&average_observations(bn))?;
                loss_sum += batch_loss * batch.len() as f64;
                norm_sum += norm;
            }
            let mut m = EpochMetrics {
                epoch: self.epoch,
                train_loss: loss_sum / indexed.len() as f64,
                grad_norm: norm_sum / batches as f64,
                val_cer: None,
                val_uncertainty: None,
                val_chars: None,
            };
            if !validate.is_empty() {
                let r = evaluate(&self.model, &self.symbols, validate, self.cfg.z)?;
                m.val_cer = Some(r.cer.cer_percent);
                m.val_uncertainty = Some(r.cer.uncertainty_percent);
                m.val_chars = Some(r.cer.n_ref_chars);
            }
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&m)?)?;
            }
            let hit = matches!((m.val_cer, self.cfg.stop_at_cer), (Some(c), Some(t)) if c < t);
            let control = on_epoch(&m, self);
            report.epochs.push(m);
            if hit {
                report.reached_target_at = Some(self.epoch);
                break;
            }
            if control == Control::Stop {
                break;
            }
        }
        Ok(report)
    }
}

fn check_symbols(model: &Model, symbols: &SymbolTable) -> Result<()> {
    if model.config().n_symbols != symbols.n_symbols() {
        return Err(Error::SymbolMismatch {
            expected: format!("{} symbols", model.config().n_symbols),
            found: format!("{} symbols", symbols.n_symbols()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub name: String,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: CerReport,
    pub samples: Vec<DecodeRecord>,
    /// Inputs too small for the CNN stack; their hypothesis is empty.
    pub unreadable: usize,
}

/// Greedy best-path transcript of one prepared input.
pub fn decode(model: &Model, symbols: &SymbolTable, input: &Tensor) -> Result<String> {
    check_symbols(model, symbols)?;
    let logits = model.logits(input)?;
    Ok(symbols.decode(&best_path_decode(&logits, model.config().blank())))
}

/// Pooled CER of greedy decodes over `samples`.
pub fn evaluate(model: &Model, symbols: &SymbolTable, samples: &[PreparedSample], z: f64) -> Result<EvalReport> {
    check_symbols(model, symbols)?;
    let hyps: Vec<Result<Option<String>>> = samples
        .par_iter()
        .map(|s| match decode(model, symbols, &s.input) {
            Ok(h) => Ok(Some(h)),
            Err(Error::Config(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut records = Vec::with_capacity(samples.len());
    let mut unreadable = 0;
    for (s, h) in samples.iter().zip(hyps) {
        let h = h?;
        unreadable += usize::from(h.is_none());
        records.push(DecodeRecord {
            name: s.name.clone(),
            reference: s.transcript.clone(),
            hypothesis: h.unwrap_or_default(),
        });
    }
    let refs: Vec<String> = records.iter().map(|r| r.reference.clone()).collect();
    let hyps: Vec<String> = records.iter().map(|r| r.hypothesis.clone()).collect();
    Ok(EvalReport {
        cer: cer_str(&refs, &hyps, z)?,
        samples: records,
        unreadable,
    })
}

/// Page model initialized from a line checkpoint trained on the same
/// symbol table.
pub fn bootstrap_from_checkpoint(
    line: &Checkpoint,
    page_config: &ModelConfig,
    symbols: &SymbolTable,
    seed: u64,
) -> Result<(Model, BootstrapReport)> {
    bootstrap_from_line_model(
        &line.model()?,
        line.symbols.content_hash(),
        page_config,
        symbols.content_hash(),
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub l: usize,
    pub height: usize,
    pub cer: Option<CerReport>,
    pub epochs: usize,
    /// Training failure, if any; the row's CER then comes from the
    /// untrained model.
    pub train_error: Option<String>,
    pub eval_error: Option<String>,
}

/// Trains and evaluates one page model per oversample factor. Failures are
/// recorded per row and the sweep moves on.
pub fn l_sweep(
    manifest: &Manifest,
    symbols: &SymbolTable,
    base: &ModelConfig,
    cfg: &TrainConfig,
    ls: &[usize],
    eval_split: Split,
    on_epoch: &mut dyn FnMut(usize, &EpochMetrics) -> Control,
) -> Result<Vec<SweepRow>> {
    if ls.is_empty() {
        return Err(Error::Config("L-sweep needs at least one L".into()));
    }
    let mut rows = Vec::new();
    for &l in ls {
        let mut row = SweepRow {
            l,
            height: LINE_HEIGHT * l,
            cer: None,
            epochs: 0,
            train_error: None,
            eval_error: None,
        };
        let mut run = || -> Result<(Model, Result<TrainReport>, Vec<PreparedSample>)> {
            let opts = PrepOptions { l, ..cfg.prep.clone() };
            let train = prepare_split(manifest, Split::Train, symbols, &opts)?;
            let validate = prepare_split(manifest, Split::Validate, symbols, &opts)?;
            let test = prepare_split(manifest, eval_split, symbols, &opts)?;
            let model = Model::new(base.clone().with_oversample(l), cfg.seed)?;
            let mut t = Trainer::new(
                model,
                symbols.clone(),
                TrainConfig {
                    prep: opts,
                    ..cfg.clone()
                },
            )?;
            let report = t.fit(&train, &validate, &mut |m, _| on_epoch(l, m));
            Ok((t.into_model(), report, test))
        };
        match run() {
            Ok((model, report, test)) => {
                match report {
                    Ok(r) => row.epochs = r.epochs.len(),
                    Err(e) => row.train_error = Some(e.to_string()),
                }
                match evaluate(&model, symbols, &test, cfg.z) {
                    Ok(r) => row.cer = Some(r.cer),
                    Err(e) => row.eval_error = Some(e.to_string()),
                }
            }
            Err(e) => row.train_error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("L\tHeight\terr[%]\n");
    for r in rows {
        let err = match &r.cer {
            Some(c) => format!("{:.2} +/- {:.2}", c.cer_percent, c.uncertainty_percent),
            None => "n/a".into(),
        };
        let _ = write!(s, "{}\t{}\t{err}", r.l, r.height);
        if let Some(e) = &r.train_error {
            let _ = write!(s, "\t(training failed: {e})");
        }
        s.push('\n');
    }
    s
}

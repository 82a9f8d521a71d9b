//! Losses, optimizer, augmentation and the training loop.

mod ablation;
mod adamw;
mod augment;

pub use ablation::{ablate_t, final_sparsity, AblationRow, ABLATION_FILE};
pub use adamw::{AdamW, AdamWConfig};
pub use augment::{augment, augment_with, Augmentation};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{batch, Case, Dataset};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{evaluate, EvalReport};
use crate::rng::{stream, Stream};
use crate::segnet::{save_checkpoint, SegNet, SegNetConfig};
use crate::tensor::{Mode, Scalar};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Random flips and quarter turns of training cases.
    pub augment: bool,
    /// Network shape; `model.iterations` holds the ML-block T of each stage.
    pub model: SegNetConfig,
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed: 42,
            ce_weight: 0.5,
            dice_weight: 0.5,
            augment: true,
            model: SegNetConfig::default(),
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        // lr = 0 is accepted: it freezes the weights, which the tests rely on.
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!(
                "lr must be finite and nonnegative, got {}",
                self.lr
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            ));
        }
        let (ce, dice) = (self.ce_weight, self.dice_weight);
        if !ce.is_finite() || !dice.is_finite() || ce < 0.0 || dice < 0.0 || ce + dice <= 0.0 {
            return bad(format!(
                "loss weights must be nonnegative with a positive sum, got {ce} and {dice}"
            ));
        }
        self.model.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_dice: f64,
    pub val_dsc: f64,
    pub val_hd95: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_ce,train_dice,val_dsc,val_hd95";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_ce,
            self.train_dice,
            self.val_dsc,
            self.val_hd95
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// Validation report of the kept weights.
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

/// Weighted cross-entropy plus Dice loss of a batch. Returns the total and its two parts.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &[u8],
    n_classes: usize,
    ce_weight: f64,
    dice_weight: f64,
) -> Result<(Var, Var, Var)> {
    let ce = tape.cross_entropy(logits, target)?;
    let dice = tape.dice_loss(logits, target, n_classes, DICE_EPS)?;
    let a = tape.scale(ce, T::lit(ce_weight));
    let b = tape.scale(dice, T::lit(dice_weight));
    Ok((tape.add(a, b)?, ce, dice))
}

/// The training state that advances one batch at a time.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub net: SegNet<T>,
    pub opt: AdamW<T>,
    n_classes: usize,
    shuffle: rand_xoshiro::SplitMix64,
    augment: rand_xoshiro::SplitMix64,
}

/// Running sums over an epoch, weighted by batch size.
#[derive(Default)]
struct Sums {
    loss: f64,
    ce: f64,
    dice: f64,
    n: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.n_classes != n_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {n_classes}",
                cfg.model.n_classes
            )));
        }
        let net = SegNet::new(cfg.model.clone(), &mut stream(cfg.seed, Stream::Init))?;
        let opt = AdamW::new(cfg.optimizer(), net.params());
        Ok(Self {
            shuffle: stream(cfg.seed, Stream::Shuffle),
            augment: stream(cfg.seed, Stream::Augment),
            cfg,
            net,
            opt,
            n_classes,
        })
    }

    /// One optimizer update on `cases`; returns `(loss, ce, dice)` of the batch.
    pub fn step(&mut self, cases: &[&Case], epoch: usize) -> Result<(f64, f64, f64)> {
        let items: Vec<(Vec<f32>, Mask)> = cases
            .iter()
            .map(|c| {
                if self.cfg.augment {
                    augment(&c.image, &c.mask, &mut self.augment)
                } else {
                    (c.image.clone(), c.mask.clone())
                }
            })
            .collect();
        let refs: Vec<(&[f32], &Mask)> = items.iter().map(|(i, m)| (i.as_slice(), m)).collect();
        let (x, target) = batch::<T>(&refs)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let logits = self.net.forward(&mut tape, xv, Mode::Train)?;
        let (loss, ce, dice) = segmentation_loss(
            &mut tape,
            logits,
            &target,
            self.n_classes,
            self.cfg.ce_weight,
            self.cfg.dice_weight,
        )?;
        let value = |v: Var| tape.value(v).data()[0].to_f64_lossy();
        let parts = (value(loss), value(ce), value(dice));
        if !parts.0.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let grads = tape.backward(loss)?;
        let params = self.net.params_mut();
        params.zero_grad();
        grads.accumulate_into(params)?;
        drop(tape);
        self.opt.step(params)?;
        if !params.iter().all(|p| p.value.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        Ok(parts)
    }

    /// One pass over `train` in a freshly shuffled order; returns the
    /// size-weighted mean `(loss, ce, dice)`.
    pub fn epoch(&mut self, train: &[Case], epoch: usize) -> Result<(f64, f64, f64)> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut sums = Sums::default();
        for chunk in order.chunks(self.cfg.batch_size) {
            let cases: Vec<&Case> = chunk.iter().map(|&i| &train[i]).collect();
            let (l, c, d) = self.step(&cases, epoch)?;
            let k = cases.len() as f64;
            sums.loss += l * k;
            sums.ce += c * k;
            sums.dice += d * k;
            sums.n += cases.len();
        }
        let n = sums.n.max(1) as f64;
        Ok((sums.loss / n, sums.ce / n, sums.dice / n))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

/// Trains on `cfg.data`, writing into `cfg.out`: the effective config, the
/// per-epoch loss trace, the best-validation checkpoint and its report.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::open(&cfg.data)?;
    train_on(cfg, &data)
}

/// [`train`] on an already loaded dataset; `cfg.data` is only echoed.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("both dataset splits must be non-empty".into()));
    }
    let mut trainer = Trainer::<f32>::new(cfg.clone(), data.n_classes())?;
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join(CONFIG_FILE), cfg)?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let mut csv = BufWriter::new(File::create(cfg.out.join(LOSS_FILE))?);
    writeln!(csv, "{}", EpochRecord::CSV_HEADER)?;
    csv.flush()?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalReport)> = None;
    for epoch in 1..=cfg.epochs {
        let (train_loss, train_ce, train_dice) = trainer.epoch(&data.train, epoch)?;
        let report = evaluate(&mut trainer.net, &data.val, data.n_classes())?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_ce,
            train_dice,
            val_dsc: report.mean_dsc,
            val_hd95: report.mean_hd95,
        };
        writeln!(csv, "{}", record.csv_row())?;
        csv.flush()?;
        history.push(record);
        if best
            .as_ref()
            .is_none_or(|(_, b)| report.mean_dsc > b.mean_dsc)
        {
            save_checkpoint(&trainer.net, &checkpoint)?;
            best = Some((epoch, report));
        }
    }
    let (best_epoch, report) = best.expect("at least one epoch");
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        report,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorParams};

    fn tiny_data(dir: &Path) -> Dataset {
        let params = GeneratorParams {
            seed: 3,
            n_cases: 10,
            size: 16,
            n_classes: 3,
            noise_sigma: 0.05,
        };
        generate(&params, dir).unwrap();
        Dataset::open(dir).unwrap()
    }

    fn tiny_cfg(data: &Path, out: &Path) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 3,
            lr: 1e-3,
            model: SegNetConfig {
                n_classes: 3,
                encoder_channels: vec![4, 4, 8, 8],
                decoder_channels: vec![4, 4, 4],
                ..SegNetConfig::default()
            },
            data: data.to_path_buf(),
            out: out.to_path_buf(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(&dir.path().join("data"));
        let a = train_on(&tiny_cfg(&data.root, &dir.path().join("a")), &data).unwrap();
        let b = train_on(&tiny_cfg(&data.root, &dir.path().join("b")), &data).unwrap();
        assert_eq!(a.history, b.history);
        for f in [LOSS_FILE, CHECKPOINT_FILE, REPORT_FILE] {
            let read = |run: &str| fs::read(dir.path().join(run).join(f)).unwrap();
            assert_eq!(read("a"), read("b"), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("a").join(LOSS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), EpochRecord::CSV_HEADER);
    }

    #[test]
    fn training_lowers_the_loss() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(&dir.path().join("data"));
        let cfg = TrainConfig {
            epochs: 8,
            lr: 3e-3,
            ..tiny_cfg(&data.root, &dir.path().join("run"))
        };
        let out = train_on(&cfg, &data).unwrap();
        let (first, last) = (&out.history[0], out.history.last().unwrap());
        assert!(last.train_loss < first.train_loss, "{first:?} -> {last:?}");
    }

    #[test]
    fn zero_learning_rate_freezes_weights_and_loss() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(&dir.path().join("data"));
        // A single full-batch epoch with no augmentation sees the same inputs
        // every time, so only summation order could move the loss.
        let cfg = TrainConfig {
            lr: 0.0,
            augment: false,
            batch_size: data.train.len(),
            ..tiny_cfg(&data.root, &dir.path().join("run"))
        };
        let mut trainer = Trainer::<f32>::new(cfg.clone(), 3).unwrap();
        let before: Vec<_> = trainer
            .net
            .params()
            .iter()
            .map(|p| p.value.clone())
            .collect();
        let losses: Vec<f64> = (1..=3)
            .map(|e| trainer.epoch(&data.train, e).unwrap().0)
            .collect();
        let after: Vec<_> = trainer
            .net
            .params()
            .iter()
            .map(|p| p.value.clone())
            .collect();
        assert_eq!(before, after);
        for l in &losses[1..] {
            assert!((l - losses[0]).abs() <= 1e-6 * losses[0], "{losses:?}");
        }
    }

    #[test]
    fn total_gradient_is_the_weighted_sum_of_the_parts() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(&dir.path().join("data"));
        let cfg = tiny_cfg(&data.root, &dir.path().join("run"));
        let mut net = SegNet::<f64>::new(cfg.model.clone(), &mut stream(1, Stream::Init)).unwrap();
        let items: Vec<(&[f32], &Mask)> = data.train[..2]
            .iter()
            .map(|c| (c.image.as_slice(), &c.mask))
            .collect();
        let (x, target) = batch::<f64>(&items).unwrap();
        let grads_of = |net: &mut SegNet<f64>, w: (f64, f64)| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = net.forward(&mut tape, xv, Mode::Eval).unwrap();
            let (l, _, _) = segmentation_loss(&mut tape, y, &target, 3, w.0, w.1).unwrap();
            let g = tape.backward(l).unwrap();
            net.params()
                .ids()
                .map(|id| g.param(id).cloned())
                .collect::<Vec<_>>()
        };
        let total = grads_of(&mut net, (0.3, 0.7));
        let ce = grads_of(&mut net, (1.0, 0.0));
        let dice = grads_of(&mut net, (0.0, 1.0));
        for ((t, c), d) in total.iter().zip(&ce).zip(&dice) {
            let (t, c, d) = (
                t.as_ref().unwrap(),
                c.as_ref().unwrap(),
                d.as_ref().unwrap(),
            );
            let scale = t.max_abs().max(1e-12);
            for ((a, b), e) in t.data().iter().zip(c.data()).zip(d.data()) {
                assert!((a - (0.3 * b + 0.7 * e)).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn non_finite_loss_reports_divergence_with_the_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(&dir.path().join("data"));
        let cfg = tiny_cfg(&data.root, &dir.path().join("run"));
        let mut trainer = Trainer::<f32>::new(cfg, 3).unwrap();
        let id = trainer.net.params().id_of("head.b").unwrap();
        trainer.net.params_mut().get_mut(id).value.data_mut()[0] = f32::NAN;
        match trainer.epoch(&data.train, 2) {
            Err(Error::TrainingDiverged { epoch }) => assert_eq!(epoch, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_errors() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
            TrainConfig {
                lr: -1.0,
                ..ok.clone()
            },
            TrainConfig {
                ce_weight: 0.0,
                dice_weight: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert!(matches!(Trainer::<f32>::new(ok, 3), Err(Error::Config(_))));
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("nowhere"), &dir.path().join("run"));
        assert!(matches!(train(&cfg), Err(Error::Data(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let partial: TrainConfig =
            serde_json::from_str(r#"{"epochs": 2, "model": {"iterations": [1, 1, 1]}}"#).unwrap();
        assert_eq!(partial.epochs, 2);
        assert_eq!(partial.model.iterations, vec![1, 1, 1]);
        assert_eq!(partial.lr, 1e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 2}"#).is_err());
    }
}

//! Adam with polynomial learning-rate decay, the epoch loop, checkpoints
//! with resumable optimizer state, and volume-level evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{model_checkpoint, restore_model, Checkpoint, Record};
use crate::data::{batch_iter, collate, make_triplets, SliceTriplet, Volume, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{seg_loss, total_loss, LossValues};
use crate::metrics::{evaluate_volume_lenient, reports_to_csv, BinaryMask, Confusion, MetricsReport};
use crate::model::{EaaNet, Fusion, NetworkConfig};
use crate::tensor::{no_grad, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const LR_POWER: f64 = 0.9;

pub const LOG_HEADER: &str = "epoch,lr,loss_a,loss_s,loss_b,loss_c,total,train_dsc";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.eaac";

/// `base_lr · (1 − epoch/epochs)^0.9` for `0 ≤ epoch ≤ epochs`.
pub fn lr_schedule(epoch: usize, epochs: usize, base_lr: f64) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if epoch > epochs {
        return Err(Error::Config(format!("epoch {epoch} is past the last epoch {epochs}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / epochs as f64).powf(LR_POWER))
}

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update of `params` from `grads`; increments `state.t`.
pub fn adam_step(params: &[Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::Shape(format!("param {i}: {} values, grad {}", p.numel(), g.len())));
        }
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.data_mut();
        for j in 0..g.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Which losses drive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// All four terms of the multi-task loss.
    Full,
    /// Only the basic branch's segmentation loss: a plain U-Net baseline.
    BasicOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    pub network: NetworkConfig,
    pub fusion: Fusion,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 2e-3,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
            network: NetworkConfig::default(),
            fusion: Fusion::I2,
            objective: Objective::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.network.validate()
    }

    /// Parses flat `key = value` text. Blank lines and `#` comments are
    /// skipped; unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for {key}"))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "depth" => self.network.depth = num(key, value)?,
            "base_channels" => self.network.base_channels = num(key, value)?,
            "recon_fraction" => self.network.recon_fraction = num(key, value)?,
            "num_classes" => self.network.num_classes = num(key, value)?,
            "se_reduction" => self.network.se_reduction = num(key, value)?,
            "height" => self.network.height = num(key, value)?,
            "width" => self.network.width = num(key, value)?,
            "fusion" => {
                self.fusion = match value {
                    "i2" => Fusion::I2,
                    "passthrough" => Fusion::PassThrough,
                    _ => return Err(format!("fusion must be i2 or passthrough, got `{value}`")),
                }
            }
            "objective" => {
                self.objective = match value {
                    "full" => Objective::Full,
                    "basic" => Objective::BasicOnly,
                    _ => return Err(format!("objective must be full or basic, got `{value}`")),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

/// One row of the training log. `epoch` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossValues,
    pub train_dsc: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, l.loss_a, l.loss_s, l.loss_b, l.loss_c, l.total, self.train_dsc
        )
    }

    fn to_values(self) -> [f64; 8] {
        let l = self.losses;
        [
            self.epoch as f64,
            self.lr,
            l.loss_a,
            l.loss_s,
            l.loss_b,
            l.loss_c,
            l.total,
            self.train_dsc,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            epoch: v[0] as usize,
            lr: v[1],
            losses: LossValues {
                loss_a: v[2],
                loss_s: v[3],
                loss_b: v[4],
                loss_c: v[5],
                total: v[6],
            },
            train_dsc: v[7],
        }
    }
}

pub fn log_to_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Foreground mask from class scores `[N, K, H, W]`: pixels whose argmax is
/// class 1. Ties go to the lower class.
pub fn argmax_foreground(scores: &Tensor) -> Result<Vec<u8>> {
    let s = scores.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::Shape(format!("expected [N, K>=2, H, W] scores, got {s:?}")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + i] > d[(b * k + best) * hw + i] {
                    best = c;
                }
            }
            out.push(u8::from(best == 1));
        }
    }
    Ok(out)
}

fn accumulate(c: &mut Confusion, pred: &[u8], label: &Tensor) {
    let s = label.shape();
    let hw = s[2] * s[3];
    let d = label.data();
    for b in 0..s[0] {
        for i in 0..hw {
            let g = d[(b * NUM_CLASSES + 1) * hw + i] > 0.5;
            match (pred[b * hw + i] == 1, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
}

/// Training state: network, optimizer, and the epochs run so far.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: EaaNet,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = EaaNet::with_fusion(cfg.network.clone(), cfg.fusion, cfg.seed)?;
        let opt = AdamState::new(&net.params());
        Ok(Self {
            net,
            opt,
            cfg,
            log: Vec::new(),
        })
    }

    /// Epochs completed so far.
    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    /// Runs the next epoch over `triplets` and appends its log row.
    pub fn run_epoch(&mut self, triplets: &[SliceTriplet]) -> Result<EpochLog> {
        let epoch = self.epochs_done();
        if epoch >= self.cfg.epochs {
            return Err(Error::Config(format!("all {} epochs already run", self.cfg.epochs)));
        }
        let lr = lr_schedule(epoch, self.cfg.epochs, self.cfg.lr)?;
        let batches = batch_iter(triplets.len(), self.cfg.batch_size, self.cfg.seed, epoch)?;
        let params = self.net.params();
        let mut sums = LossValues::default();
        let mut seen = 0.0;
        let mut confusion = Confusion::default();
        for (step, idx) in batches.iter().enumerate() {
            let members: Vec<&SliceTriplet> = idx.iter().map(|&i| &triplets[i]).collect();
            let batch = collate(&members)?;
            self.net.zero_grad();
            let (values, loss, scores) = match self.cfg.objective {
                Objective::Full => {
                    let out = self.net.forward(&batch.prev, &batch.curr, &batch.next, Mode::Train)?;
                    let bundle = total_loss(&out, &batch.curr, &batch.label)?;
                    (bundle.values(), bundle.total, out.seg_complete)
                }
                Objective::BasicOnly => {
                    let scores = self.net.forward_basic(&batch.curr, Mode::Train)?;
                    let loss = seg_loss(&scores, &batch.label)?;
                    let v = loss.item();
                    let values = LossValues {
                        loss_b: v,
                        total: v,
                        ..LossValues::default()
                    };
                    (values, loss, scores)
                }
            };
            if let Some(term) = values.non_finite_term() {
                return Err(Error::NonFiniteLoss {
                    term,
                    epoch: epoch + 1,
                    step,
                });
            }
            loss.backward()?;
            let grads: Vec<Vec<f64>> = params.iter().map(Tensor::grad_or_zeros).collect();
            adam_step(&params, &grads, &mut self.opt, lr)?;

            let w = members.len() as f64;
            seen += w;
            sums.loss_a += w * values.loss_a;
            sums.loss_s += w * values.loss_s;
            sums.loss_b += w * values.loss_b;
            sums.loss_c += w * values.loss_c;
            sums.total += w * values.total;
            accumulate(&mut confusion, &argmax_foreground(&scores)?, &batch.label);
        }
        self.net.zero_grad();
        let row = EpochLog {
            epoch: epoch + 1,
            lr,
            losses: LossValues {
                loss_a: sums.loss_a / seen,
                loss_s: sums.loss_s / seen,
                loss_b: sums.loss_b / seen,
                loss_c: sums.loss_c / seen,
                total: sums.total / seen,
            },
            train_dsc: confusion.dsc(),
        };
        self.log.push(row);
        Ok(row)
    }

    /// Runs the remaining epochs. With an output directory, writes the log
    /// after every epoch, periodic checkpoints, and a final checkpoint.
    pub fn fit(&mut self, triplets: &[SliceTriplet]) -> Result<()> {
        if triplets.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let out_dir = self.cfg.out_dir.clone();
        if let Some(dir) = &out_dir {
            fs::create_dir_all(dir)?;
        }
        while self.epochs_done() < self.cfg.epochs {
            let row = self.run_epoch(triplets)?;
            if let Some(dir) = &out_dir {
                fs::write(dir.join(LOG_FILE), log_to_csv(&self.log))?;
                let every = self.cfg.checkpoint_every;
                if every > 0 && row.epoch % every == 0 && row.epoch < self.cfg.epochs {
                    self.checkpoint()?.save(&dir.join(format!("checkpoint_epoch{:03}.eaac", row.epoch)))?;
                }
            }
        }
        if let Some(dir) = &out_dir {
            self.checkpoint()?.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }

    /// Model records plus everything needed to resume bit-exactly.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&self.net);
        let objective = match self.cfg.objective {
            Objective::Full => 0.0,
            Objective::BasicOnly => 1.0,
        };
        let seed = self.cfg.seed;
        ck.push(Record::new(
            "trainer.state",
            &[7],
            vec![
                self.cfg.epochs as f64,
                self.cfg.lr,
                self.cfg.batch_size as f64,
                (seed >> 32) as f64,
                (seed & 0xFFFF_FFFF) as f64,
                self.opt.t as f64,
                objective,
            ],
        )?);
        let rows: Vec<f64> = self.log.iter().flat_map(|r| r.to_values()).collect();
        ck.push(Record::new("trainer.log", &[self.log.len(), 8], rows)?);
        for ((name, _), (m, v)) in self.net.named_params().iter().zip(self.opt.m.iter().zip(&self.opt.v)) {
            ck.push(Record::new(format!("adam.m.{name}"), &[m.len()], m.clone())?);
            ck.push(Record::new(format!("adam.v.{name}"), &[v.len()], v.clone())?);
        }
        Ok(ck)
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output. `out_dir` and
    /// `checkpoint_every` are not stored and come from the caller.
    pub fn resume(ck: &Checkpoint, out_dir: Option<PathBuf>, checkpoint_every: usize) -> Result<Self> {
        let net = restore_model(ck)?;
        let st = &ck.require("trainer.state")?.data;
        if st.len() != 7 {
            return Err(Error::Validation("malformed trainer.state record".into()));
        }
        let cfg = TrainConfig {
            epochs: st[0] as usize,
            lr: st[1],
            batch_size: st[2] as usize,
            seed: ((st[3] as u64) << 32) | st[4] as u64,
            checkpoint_every,
            out_dir,
            network: net.config().clone(),
            fusion: net.fusion(),
            objective: if st[6] == 0.0 {
                Objective::Full
            } else {
                Objective::BasicOnly
            },
        };
        let log_rec = ck.require("trainer.log")?;
        let log = log_rec.data.chunks(8).map(EpochLog::from_values).collect();
        let mut opt = AdamState::new(&net.params());
        opt.t = st[5] as u64;
        for (i, (name, _)) in net.named_params().iter().enumerate() {
            let m = &ck.require(&format!("adam.m.{name}"))?.data;
            let v = &ck.require(&format!("adam.v.{name}"))?.data;
            if m.len() != opt.m[i].len() || v.len() != opt.v[i].len() {
                return Err(Error::Shape(format!("optimizer moments for {name} do not match")));
            }
            opt.m[i].clone_from(m);
            opt.v[i].clone_from(v);
        }
        Ok(Self { net, opt, cfg, log })
    }
}

/// Builds a network from `cfg.seed` and trains it on the triplets of `volumes`.
pub fn train(volumes: &[Volume], cfg: TrainConfig) -> Result<Trainer> {
    let mut triplets = Vec::new();
    for (id, v) in volumes.iter().enumerate() {
        triplets.extend(make_triplets(v, id)?);
    }
    let mut t = Trainer::new(cfg)?;
    t.fit(&triplets)?;
    Ok(t)
}

/// Which segmentation head to read predictions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Basic,
    Complete,
}

/// Eval-mode foreground masks for the interior slices `1..=depth-2`.
pub fn predict_volume(net: &EaaNet, v: &Volume, head: Head) -> Result<Vec<BinaryMask>> {
    let _guard = no_grad();
    let triplets = make_triplets(v, 0)?;
    let members: Vec<&SliceTriplet> = triplets.iter().collect();
    let batch = collate(&members)?;
    let scores = match head {
        Head::Basic => net.forward_basic(&batch.curr, Mode::Eval)?,
        Head::Complete => net.forward(&batch.prev, &batch.curr, &batch.next, Mode::Eval)?.seg_complete,
    };
    let fg = argmax_foreground(&scores)?;
    let plane = v.height * v.width;
    fg.chunks(plane)
        .map(|m| BinaryMask::new(&[v.height, v.width], m.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

impl Evaluation {
    /// One row per volume under the metrics CSV header.
    pub fn to_csv(&self) -> String {
        reports_to_csv(&self.rows)
    }
}

/// Scores every volume's interior slices against its labels.
pub fn evaluate(net: &EaaNet, volumes: &[Volume], head: Head) -> Result<Evaluation> {
    let mut rows = Vec::with_capacity(volumes.len());
    for v in volumes {
        let pred = predict_volume(net, v, head)?;
        let gt: Vec<BinaryMask> = (1..v.depth - 1).map(|i| v.label_mask(i)).collect();
        rows.push(evaluate_volume_lenient(&pred, &gt)?);
    }
    let mean = MetricsReport::mean(&rows).ok_or_else(|| Error::Validation("no volumes to evaluate".into()))?;
    Ok(Evaluation { rows, mean })
}

//! Unsupervised pretraining, supervised fine-tuning and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse, parse_list};
use crate::data::AnnotatedSequence;
use crate::diff::{clip_grad_norm, lr_at, Container, Graph, OptimizerConfig, ParamStore, Tensor2D};
use crate::error::{Error, Result};
use crate::model::{
    self, init_pretrain_params, make_mask, pretrain_forward, Batch, ClassifierHead, LossWeights, MaskMode, MaskSpec,
    NetConfig, Quantize, ENCODER,
};
use crate::quantizer::{residual_inputs, rvq_quantize, usage_stats, Codebook, QuantizerConfig};

pub const CLASS_CODEBOOK: &str = "codebook_class";
pub const RESIDUAL_CODEBOOK: &str = "codebook_residual";

/// Everything a pretraining or fine-tuning run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub quantizer: QuantizerConfig,
    pub mask: MaskSpec,
    pub loss: LossWeights,
    pub pretrain: OptimizerConfig,
    pub finetune: OptimizerConfig,
    /// Batches per code-usage window; dead codes are re-seeded at the end of each.
    pub usage_window: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-size network and schedule.
    pub fn paper() -> Self {
        Self {
            net: NetConfig::default(),
            quantizer: QuantizerConfig::default(),
            mask: MaskSpec::default(),
            loss: LossWeights::default(),
            pretrain: OptimizerConfig::default(),
            finetune: OptimizerConfig::default(),
            usage_window: 256,
            seed: 0,
            eval_every: 0,
        }
    }

    /// Reduced widths and schedule that run on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.net.joints = 24;
        cfg.set_feature_dim(64);
        cfg.pretrain = OptimizerConfig {
            warmup_epochs: 2,
            decay_epochs: vec![40],
            total_epochs: 50,
            batch_size: 16,
            ..OptimizerConfig::default()
        };
        cfg.finetune = OptimizerConfig {
            warmup_epochs: 2,
            decay_epochs: vec![40],
            total_epochs: 50,
            batch_size: 128,
            ..OptimizerConfig::default()
        };
        cfg.usage_window = 32;
        cfg
    }

    pub fn set_feature_dim(&mut self, d: usize) {
        self.net.feature_dim = d;
        self.quantizer.feature_dim = d;
    }

    pub fn set_code_dim(&mut self, d: usize) {
        self.net.code_dim = d;
        self.quantizer.code_dim = d;
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.quantizer.validate()?;
        self.mask.validate()?;
        self.loss.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.net.feature_dim != self.quantizer.feature_dim || self.net.code_dim != self.quantizer.code_dim {
            return Err(Error::Config("network and quantizer dimensions disagree".into()));
        }
        if self.pretrain.total_epochs == 0 || self.finetune.total_epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.usage_window == 0 {
            return Err(Error::Config("usage_window must be positive".into()));
        }
        Ok(())
    }

    /// Flat `section.key` view, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("model.joints".into(), self.net.joints.to_string()),
            ("model.feature_dim".into(), self.net.feature_dim.to_string()),
            ("model.num_stages".into(), self.net.num_stages.to_string()),
            ("model.dilations".into(), list(&self.net.dilations)),
            ("model.kernel".into(), self.net.kernel.to_string()),
            ("quantizer.K_class".into(), self.quantizer.k_class.to_string()),
            ("quantizer.K_residual".into(), self.quantizer.k_residual.to_string()),
            (
                "quantizer.num_rvq_layers".into(),
                self.quantizer.num_rvq_layers.to_string(),
            ),
            ("quantizer.code_dim".into(), self.quantizer.code_dim.to_string()),
            ("quantizer.ema_decay".into(), self.quantizer.ema_decay.to_string()),
            (
                "quantizer.dead_code_threshold".into(),
                self.quantizer.dead_code_threshold.to_string(),
            ),
            ("quantizer.normalize".into(), self.net.normalize_codes.to_string()),
            ("quantizer.usage_window".into(), self.usage_window.to_string()),
            ("mask.ratio".into(), self.mask.ratio.to_string()),
            ("mask.span_len".into(), self.mask.span_len.to_string()),
            ("mask.mode".into(), self.mask.mode.to_string()),
            ("loss.lambda_bound".into(), self.loss.lambda_bound.to_string()),
            ("loss.lambda_com".into(), self.loss.lambda_com.to_string()),
            ("loss.interior_weight".into(), self.loss.interior_weight.to_string()),
        ];
        for (section, o) in [("optim", &self.pretrain), ("finetune", &self.finetune)] {
            out.extend([
                (format!("{section}.base_lr"), o.base_lr.to_string()),
                (format!("{section}.beta1"), o.adam.beta1.to_string()),
                (format!("{section}.beta2"), o.adam.beta2.to_string()),
                (format!("{section}.epsilon"), o.adam.epsilon.to_string()),
                (format!("{section}.weight_decay"), o.adam.weight_decay.to_string()),
                (format!("{section}.clip_norm"), o.clip_norm.to_string()),
                (format!("{section}.warmup_epochs"), o.warmup_epochs.to_string()),
                (format!("{section}.decay_epochs"), list(&o.decay_epochs)),
                (format!("{section}.decay_factor"), o.decay_factor.to_string()),
                (format!("{section}.epochs"), o.total_epochs.to_string()),
                (format!("{section}.batch_size"), o.batch_size.to_string()),
            ]);
        }
        out.push(("train.eval_every".into(), self.eval_every.to_string()));
        out
    }

    /// Applies one `section.key = value` setting. Returns `false` for keys
    /// this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.joints" => self.net.joints = parse(key, v)?,
            "model.feature_dim" => self.set_feature_dim(parse(key, v)?),
            "model.num_stages" => self.net.num_stages = parse(key, v)?,
            "model.dilations" => self.net.dilations = parse_list(key, v)?,
            "model.kernel" => self.net.kernel = parse(key, v)?,
            "quantizer.normalize" => self.net.normalize_codes = parse(key, v)?,
            "quantizer.K_class" => self.quantizer.k_class = parse(key, v)?,
            "quantizer.K_residual" => self.quantizer.k_residual = parse(key, v)?,
            "quantizer.num_rvq_layers" => self.quantizer.num_rvq_layers = parse(key, v)?,
            "quantizer.code_dim" => self.set_code_dim(parse(key, v)?),
            "quantizer.ema_decay" => self.quantizer.ema_decay = parse(key, v)?,
            "quantizer.dead_code_threshold" => self.quantizer.dead_code_threshold = parse(key, v)?,
            "quantizer.usage_window" => self.usage_window = parse(key, v)?,
            "mask.ratio" => self.mask.ratio = parse(key, v)?,
            "mask.span_len" => self.mask.span_len = parse(key, v)?,
            "mask.mode" => self.mask.mode = v.parse::<MaskMode>()?,
            "loss.lambda_bound" => self.loss.lambda_bound = parse(key, v)?,
            "loss.lambda_com" => self.loss.lambda_com = parse(key, v)?,
            "loss.interior_weight" => self.loss.interior_weight = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            _ => {
                let Some((section, field)) = key.split_once('.') else {
                    return Ok(false);
                };
                let o = match section {
                    "optim" => &mut self.pretrain,
                    "finetune" => &mut self.finetune,
                    _ => return Ok(false),
                };
                match field {
                    "base_lr" => o.base_lr = parse(key, v)?,
                    "beta1" => o.adam.beta1 = parse(key, v)?,
                    "beta2" => o.adam.beta2 = parse(key, v)?,
                    "epsilon" => o.adam.epsilon = parse(key, v)?,
                    "weight_decay" => o.adam.weight_decay = parse(key, v)?,
                    "clip_norm" => o.clip_norm = parse(key, v)?,
                    "warmup_epochs" => o.warmup_epochs = parse(key, v)?,
                    "decay_epochs" => o.decay_epochs = parse_list(key, v)?,
                    "decay_factor" => o.decay_factor = parse(key, v)?,
                    "epochs" => o.total_epochs = parse(key, v)?,
                    "batch_size" => o.batch_size = parse(key, v)?,
                    _ => return Ok(false),
                }
            }
        }
        Ok(true)
    }

    /// Rebuilds a config from [`TrainConfig::entries`] output.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::paper();
        for (k, v) in entries {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub class: Codebook<f32>,
    pub residual: Codebook<f32>,
}

/// Trained parameters plus the state needed to reproduce or resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore<f32>,
    pub codebooks: Option<Codebooks>,
    pub head: Option<ClassifierHead>,
    pub config: TrainConfig,
    pub epoch: usize,
    /// Seed of the stream the next epoch would draw from.
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn joints(&self) -> usize {
        self.config.net.joints
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.store.write_into(&mut c)?;
        if let Some(cb) = &self.codebooks {
            cb.class.write_into(&mut c, CLASS_CODEBOOK)?;
            cb.residual.write_into(&mut c, RESIDUAL_CODEBOOK)?;
        }
        for (k, v) in self.config.entries() {
            c.set_meta(format!("config.{k}"), v);
        }
        c.set_meta("epoch", self.epoch);
        c.set_meta("rng_state", self.rng_state);
        if let Some(h) = &self.head {
            c.set_meta("classifier.num_outputs", h.num_outputs);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = TrainConfig::from_entries(
            c.meta
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k, v.as_str()))),
        )?;
        let store = ParamStore::read_from(c, |n| !n.starts_with("codebook_"))?;
        let codebooks = if c.array(CLASS_CODEBOOK).is_some() {
            Some(Codebooks {
                class: Codebook::read_from(c, CLASS_CODEBOOK)?,
                residual: Codebook::read_from(c, RESIDUAL_CODEBOOK)?,
            })
        } else {
            None
        };
        let meta = |k: &str| -> Result<u64> {
            c.meta(k)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{k}`")))
                .and_then(|v| parse(k, v))
        };
        let head = match c.meta("classifier.num_outputs") {
            Some(v) => Some(ClassifierHead {
                num_outputs: parse("classifier.num_outputs", v)?,
            }),
            None => None,
        };
        Ok(Self {
            store,
            codebooks,
            head,
            config,
            epoch: meta("epoch")? as usize,
            rng_state: meta("rng_state")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Fails with a shape error when `joints` differs from the checkpoint's.
    pub fn check_joints(&self, joints: usize) -> Result<()> {
        if joints != self.joints() {
            return Err(Error::Shape(format!(
                "checkpoint expects {} channels per frame, data has {joints}",
                self.joints()
            )));
        }
        Ok(())
    }

    pub fn class_codes(&self, seq: &AnnotatedSequence) -> Result<Vec<usize>> {
        let cb = self
            .codebooks
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no codebooks".into()))?;
        self.check_joints(seq.sequence.joints())?;
        model::infer_codes(&self.store, &self.config.net, &cb.class, seq)
    }

    /// `(C + 1) x T` frame probabilities.
    pub fn predict(&self, seq: &AnnotatedSequence) -> Result<Tensor2D<f32>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no classifier head".into()))?;
        self.check_joints(seq.sequence.joints())?;
        model::predict_probs(&self.store, &self.config.net, head, seq)
    }
}

/// Epoch means of the pretraining loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub interior: f64,
    pub boundary: f64,
    pub commitment: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch interior boundary commitment total lr";

    pub fn line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.epoch, self.interior, self.boundary, self.commitment, self.total, self.lr
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::Config(format!("malformed log line `{line}`")));
        }
        Ok(Self {
            epoch: parse("epoch", f[0])?,
            interior: parse("interior", f[1])?,
            boundary: parse("boundary", f[2])?,
            commitment: parse("commitment", f[3])?,
            total: parse("total", f[4])?,
            lr: parse("lr", f[5])?,
        })
    }
}

/// Class-codebook usage over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageLog {
    pub epoch: usize,
    pub class_perplexity: f64,
    pub class_dead: usize,
    pub residual_perplexity: f64,
    pub residual_dead: usize,
    pub reinitialized: usize,
}

impl UsageLog {
    pub const HEADER: &'static str =
        "epoch class_perplexity class_dead residual_perplexity residual_dead reinitialized";

    pub fn line(&self) -> String {
        format!(
            "{} {:.4} {} {:.4} {} {}",
            self.epoch,
            self.class_perplexity,
            self.class_dead,
            self.residual_perplexity,
            self.residual_dead,
            self.reinitialized
        )
    }
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub usage: Vec<UsageLog>,
}

// Independent seeded streams for the different consumers of randomness.
fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_CODEBOOK: u64 = 3;
const TAG_HEAD: u64 = 4;
const TAG_FINETUNE: u64 = 5;

fn valid_columns(t: &Tensor2D<f32>, batch: &Batch<f32>) -> Tensor2D<f32> {
    let cols: Vec<usize> = batch.spans().flatten().collect();
    Tensor2D::from_fn(t.rows(), cols.len(), |r, c| t.get(r, cols[c]))
}

fn encode_low(store: &ParamStore<f32>, cfg: &NetConfig, batch: &Batch<f32>) -> Result<Tensor2D<f32>> {
    let mut g = Graph::new(batch.seq_len);
    let x = g.constant(batch.inputs.clone());
    let f = model::encode(&mut g, store, cfg, x)?;
    let low = crate::quantizer::project_down(&mut g, store, f, cfg.normalize_codes)?;
    Ok(g.value(low).clone())
}

/// Seeds both codebooks from encoder features of one batch.
fn init_codebooks(store: &ParamStore<f32>, cfg: &TrainConfig, batch: &Batch<f32>, seed: u64) -> Result<Codebooks> {
    let q = &cfg.quantizer;
    let feats = valid_columns(&encode_low(store, &cfg.net, batch)?, batch);
    let class = Codebook::from_samples(q.k_class, &feats, q.ema_decay, seed)?;
    let b = rvq_quantize(&feats, &class, &class, 0)?;
    let mut resid = feats.clone();
    for (v, &z) in resid.data_mut().iter_mut().zip(b.z0.data()) {
        *v -= z;
    }
    let residual = Codebook::from_samples(q.k_residual, &resid, q.ema_decay, seed.wrapping_add(1))?;
    Ok(Codebooks { class, residual })
}

/// Masks for every sequence of a batch, concatenated.
fn batch_mask(spec: &MaskSpec, batch: &Batch<f32>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut mask = Vec::with_capacity(batch.frames());
    for _ in 0..batch.lengths.len() {
        let s = MaskSpec {
            seed: rng.next_u64(),
            ..spec.clone()
        };
        mask.extend(make_mask::<f32>(batch.seq_len, &s));
    }
    mask
}

/// Algorithm of the unsupervised stage: encode, quantize, decode masked
/// interiors and segment boundaries, Adam on network weights, EMA on codebooks.
pub fn pretrain(train: &[&AnnotatedSequence], cfg: &TrainConfig) -> Result<PretrainResult> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training sequences".into()))?;
    if first.sequence.joints() != cfg.net.joints {
        return Err(Error::Shape(format!(
            "config expects {} channels per frame, data has {}",
            cfg.net.joints,
            first.sequence.joints()
        )));
    }
    let opt = &cfg.pretrain;
    let q = &cfg.quantizer;
    let mut store = init_pretrain_params::<f32>(&cfg.net, stream(cfg.seed, TAG_INIT, 0).next_u64());
    let mut codebooks: Option<Codebooks> = None;
    let mut history = Vec::with_capacity(opt.total_epochs);
    let mut usage = Vec::with_capacity(opt.total_epochs);
    let mut window_class: Vec<usize> = Vec::new();
    let mut window_residual: Vec<usize> = Vec::new();
    let mut window_batches = 0usize;
    let mut window_index = 0u64;

    for epoch in 0..opt.total_epochs {
        let mut rng = stream(cfg.seed, TAG_EPOCH, epoch as u64);
        let lr = lr_at(epoch, opt);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut si, mut sb, mut sc) = (0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        let mut epoch_class: Vec<usize> = Vec::new();
        let mut epoch_residual: Vec<usize> = Vec::new();
        let mut reinitialized = 0usize;

        for chunk in order.chunks(opt.batch_size) {
            let seqs: Vec<&AnnotatedSequence> = chunk.iter().map(|&i| train[i]).collect();
            let batch = Batch::<f32>::from_sequences(&seqs, 0)?;
            if codebooks.is_none() {
                codebooks = Some(init_codebooks(
                    &store,
                    cfg,
                    &batch,
                    stream(cfg.seed, TAG_CODEBOOK, 0).next_u64(),
                )?);
            }
            let cb = codebooks.as_mut().expect("initialized above");
            let mask = batch_mask(&cfg.mask, &batch, &mut rng);
            let mut g = Graph::new(batch.seq_len);
            let pass = pretrain_forward(
                &mut g,
                &store,
                &cfg.net,
                &batch,
                &mask,
                Quantize::Codebooks {
                    class: &cb.class,
                    residual: &cb.residual,
                    layers: q.num_rvq_layers,
                },
                &cfg.loss,
            )?;
            let get = |v: Option<crate::diff::Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
            let (li, lb, lc) = (get(pass.interior), get(pass.boundary), get(Some(pass.commitment)));
            let total = g.value(pass.total).item() as f64;
            if !total.is_finite() || !li.is_finite() || !lb.is_finite() || !lc.is_finite() {
                let cls = pass.bundle.class_indices.clone();
                let stats = usage_stats(&cls, q.k_class, q.dead_code_threshold)?;
                let max_abs = pass.features_low.data().iter().fold(0f32, |m, v| m.max(v.abs()));
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {n_batches}: interior {li}, boundary {lb}, \
                     commitment {lc}, total {total}; max |F_low| {max_abs}; class-code perplexity {:.3}, \
                     {} dead of {}",
                    stats.perplexity,
                    stats.dead.len(),
                    q.k_class
                )));
            }
            g.backward(pass.total)?;
            let mut grads = g.param_grads();
            clip_grad_norm(&mut grads, opt.clip_norm);
            store.adam_step(&grads, lr, &opt.adam)?;

            // EMA on valid frames only
            let cols: Vec<usize> = batch.spans().flatten().collect();
            let feats = &pass.features_low;
            let b = &pass.bundle;
            let fcols: Vec<Vec<f32>> = cols.iter().map(|&c| feats.column(c)).collect();
            cb.class.ema_update(
                cols.iter()
                    .zip(&fcols)
                    .map(|(&c, f)| (b.class_indices[c], f.as_slice())),
            )?;
            let rin = residual_inputs(feats, b);
            let mut rcols: Vec<(usize, Vec<f32>)> = Vec::new();
            for (l, r) in rin.iter().enumerate() {
                for &c in &cols {
                    rcols.push((b.residual_indices[l][c], r.column(c)));
                    window_residual.push(b.residual_indices[l][c]);
                    epoch_residual.push(b.residual_indices[l][c]);
                }
            }
            if !rcols.is_empty() {
                cb.residual.ema_update(rcols.iter().map(|(k, f)| (*k, f.as_slice())))?;
            }
            for &c in &cols {
                window_class.push(b.class_indices[c]);
                epoch_class.push(b.class_indices[c]);
            }
            window_batches += 1;
            if window_batches == cfg.usage_window {
                // re-seed from the current batch
                let cand = Tensor2D::from_fn(q.code_dim, fcols.len(), |r, c| fcols[c][r]);
                let dead = usage_stats(&window_class, q.k_class, q.dead_code_threshold)?.dead;
                let seed = stream(cfg.seed, TAG_CODEBOOK, 1 + window_index).next_u64();
                cb.class.reinit_dead_codes(&dead, &cand, seed)?;
                reinitialized += dead.len();
                if !rcols.is_empty() {
                    let rdead = usage_stats(&window_residual, q.k_residual, q.dead_code_threshold)?.dead;
                    let rc = Tensor2D::from_fn(q.code_dim, rcols.len(), |r, c| rcols[c].1[r]);
                    cb.residual.reinit_dead_codes(&rdead, &rc, seed ^ 1)?;
                    reinitialized += rdead.len();
                }
                window_class.clear();
                window_residual.clear();
                window_batches = 0;
                window_index += 1;
            }

            si += li;
            sb += lb;
            sc += lc;
            n_batches += 1;
        }
        let n = n_batches as f64;
        let (interior, boundary, commitment) = (si / n, sb / n, sc / n);
        history.push(EpochLog {
            epoch,
            interior,
            boundary,
            commitment,
            total: model::total_loss(interior, boundary, commitment, &cfg.loss)?,
            lr,
        });
        let cu = usage_stats(&epoch_class, q.k_class, q.dead_code_threshold)?;
        let (rp, rd) = if epoch_residual.is_empty() {
            (0.0, 0)
        } else {
            let ru = usage_stats(&epoch_residual, q.k_residual, q.dead_code_threshold)?;
            (ru.perplexity, ru.dead.len())
        };
        usage.push(UsageLog {
            epoch,
            class_perplexity: cu.perplexity,
            class_dead: cu.dead.len(),
            residual_perplexity: rp,
            residual_dead: rd,
            reinitialized,
        });
    }
    Ok(PretrainResult {
        checkpoint: Checkpoint {
            store,
            codebooks,
            head: None,
            config: cfg.clone(),
            epoch: opt.total_epochs,
            rng_state: stream(cfg.seed, TAG_EPOCH, opt.total_epochs as u64).next_u64(),
        },
        history,
        usage,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

impl FinetuneLog {
    pub const HEADER: &'static str = "epoch loss accuracy lr";

    pub fn line(&self) -> String {
        format!("{} {} {} {}", self.epoch, self.loss, self.accuracy, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<FinetuneLog>,
}

/// Where the fine-tuned encoder starts from.
pub enum EncoderInit<'a> {
    Pretrained(&'a Checkpoint),
    /// Random weights from the configured seed.
    Scratch,
}

/// Frame classification with an added head. The encoder trains jointly;
/// codebooks, projections and decoders are carried over untouched.
pub fn finetune(
    init: EncoderInit<'_>,
    labeled: &[&AnnotatedSequence],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled sequences to fine-tune on".into()));
    }
    let background = num_classes;
    for s in labeled {
        if let Some(seg) = s.segments.iter().find(|seg| seg.label >= num_classes) {
            return Err(Error::Annotation(format!(
                "label {} out of range for {num_classes} classes",
                seg.label
            )));
        }
    }
    let (net, mut store, codebooks) = match init {
        EncoderInit::Pretrained(ck) => {
            ck.check_joints(labeled[0].sequence.joints())?;
            let mut store = ck.store.clone();
            store.remove_prefix(model::CLASSIFIER);
            store.reset_optimizer_state();
            (ck.config.net.clone(), store, ck.codebooks.clone())
        }
        EncoderInit::Scratch => {
            if labeled[0].sequence.joints() != cfg.net.joints {
                return Err(Error::Shape(format!(
                    "config expects {} channels per frame, data has {}",
                    cfg.net.joints,
                    labeled[0].sequence.joints()
                )));
            }
            let full = init_pretrain_params::<f32>(&cfg.net, stream(cfg.seed, TAG_INIT, 0).next_u64());
            let mut store = ParamStore::new();
            store.copy_prefix_from(&full, ENCODER);
            (cfg.net.clone(), store, None)
        }
    };
    let head = ClassifierHead {
        num_outputs: num_classes + 1,
    };
    head.init(&mut store, &net, &mut stream(cfg.seed, TAG_HEAD, 0));
    let opt = &cfg.finetune;
    let trainable = |name: &str| name.starts_with(ENCODER) || name.starts_with(model::CLASSIFIER);
    let mut history = Vec::with_capacity(opt.total_epochs);
    for epoch in 0..opt.total_epochs {
        let mut rng = stream(cfg.seed, TAG_FINETUNE, epoch as u64);
        let lr = lr_at(epoch, opt);
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut correct, mut frames) = (0usize, 0usize);
        for chunk in order.chunks(opt.batch_size) {
            let seqs: Vec<&AnnotatedSequence> = chunk.iter().map(|&i| labeled[i]).collect();
            let batch = Batch::<f32>::from_sequences(&seqs, background)?;
            let mut g = Graph::new(batch.seq_len);
            let x = g.constant(batch.inputs.clone());
            let f = model::encode(&mut g, &store, &net, x)?;
            let logits = head.logits(&mut g, &store, &net, f)?;
            let loss = g.cross_entropy(logits, &batch.labels, &batch.valid)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite fine-tuning loss at epoch {epoch}, batch {batches}"
                )));
            }
            let lg = g.value(logits);
            for c in batch.spans().flatten() {
                let col = lg.column(c);
                let pred = argmax(&col);
                correct += usize::from(pred == batch.labels[c]);
                frames += 1;
            }
            g.backward(loss)?;
            let mut grads = g.param_grads().into_iter().filter(|(k, _)| trainable(k)).collect();
            clip_grad_norm(&mut grads, opt.clip_norm);
            store.adam_step(&grads, lr, &opt.adam)?;
            loss_sum += lv;
            batches += 1;
        }
        history.push(FinetuneLog {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / frames.max(1) as f64,
            lr,
        });
    }
    let mut config = cfg.clone();
    config.net = net;
    Ok(FinetuneResult {
        checkpoint: Checkpoint {
            store,
            codebooks,
            head: Some(head),
            config,
            epoch: opt.total_epochs,
            rng_state: stream(cfg.seed, TAG_FINETUNE, opt.total_epochs as u64).next_u64(),
        },
        history,
    })
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pretraining variants compared by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Base-layer codes only (`L = 0`).
    NoRvq,
    /// Interior decoder sees unmasked features.
    NoMask,
    /// Interior-decoding loss dropped.
    NoInterior,
    /// Boundary-decoding loss dropped.
    NoBoundary,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoRvq,
        Ablation::NoMask,
        Ablation::NoInterior,
        Ablation::NoBoundary,
    ];

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRvq => "w/o RVQ",
            Ablation::NoMask => "w/o M",
            Ablation::NoInterior => "w/o U",
            Ablation::NoBoundary => "w/o B",
        }
    }

    /// Command-line and directory name.
    pub fn slug(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRvq => "wo-rvq",
            Ablation::NoMask => "wo-m",
            Ablation::NoInterior => "wo-u",
            Ablation::NoBoundary => "wo-b",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::Full => {}
            Ablation::NoRvq => cfg.quantizer.num_rvq_layers = 0,
            Ablation::NoMask => cfg.mask.ratio = 0.0,
            Ablation::NoInterior => cfg.loss.interior_weight = 0.0,
            Ablation::NoBoundary => cfg.loss.lambda_bound = 0.0,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.slug() == s || a.label() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown ablation variant `{s}` (expected one of full, wo-rvq, wo-m, wo-u, wo-b)"
                ))
            })
    }
}

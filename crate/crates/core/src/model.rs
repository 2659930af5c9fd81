//! The BID network: temporal-convolutional encoder, interior and boundary
//! decoders, classifier head, masks, pre-action segments and losses.
//!
//! All tensors are channel-major: `channels x (batch * seq_len)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ActionSegment, AnnotatedSequence};
use crate::diff::{softmax_columns, Graph, ParamStore, Real, Reduction, Tensor2D, Var};
use crate::error::{Error, Result};
use crate::quantizer::{self, rvq_quantize, Codebook, LatentBundle};

pub const ENCODER: &str = "encoder";
pub const DECODER_U: &str = "decoder_u";
pub const DECODER_B: &str = "decoder_b";
pub const CLASSIFIER: &str = "classifier";

/// Widths and block layout shared by the encoder and both decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub joints: usize,
    pub feature_dim: usize,
    pub code_dim: usize,
    pub num_stages: usize,
    /// Dilations of the residual blocks inside each stage.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    /// Scale projected features to unit length before quantization.
    pub normalize_codes: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            joints: crate::data::DEFAULT_JOINTS,
            feature_dim: 256,
            code_dim: 16,
            num_stages: 2,
            dilations: vec![9, 3, 1],
            kernel: 3,
            normalize_codes: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.feature_dim == 0 || self.code_dim == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.code_dim > self.feature_dim {
            return Err(Error::Config("code_dim exceeds feature_dim".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        Ok(())
    }
}

fn conv_param<S: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    name: &str,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    rng: &mut R,
) {
    let fan_in = c_in * kernel;
    store.insert_uniform(format!("{name}.weight"), &[c_out, c_in, kernel], fan_in, rng);
    store.insert_uniform(format!("{name}.bias"), &[c_out], fan_in, rng);
}

fn init_res_block<S: Real, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, cfg: &NetConfig, rng: &mut R) {
    let d = cfg.feature_dim;
    conv_param(store, &format!("{prefix}.dilated"), d, d, cfg.kernel, rng);
    conv_param(store, &format!("{prefix}.pointwise"), d, d, 1, rng);
}

fn init_stages<S: Real, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, cfg: &NetConfig, rng: &mut R) {
    let d = cfg.feature_dim;
    for s in 0..cfg.num_stages {
        conv_param(store, &format!("{prefix}.stage{s}.conv"), d, d, cfg.kernel, rng);
        for b in 0..cfg.dilations.len() {
            init_res_block(store, &format!("{prefix}.stage{s}.res{b}"), cfg, rng);
        }
    }
}

pub fn init_encoder<S: Real, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &NetConfig, rng: &mut R) {
    conv_param(
        store,
        &format!("{ENCODER}.input"),
        cfg.feature_dim,
        cfg.joints,
        cfg.kernel,
        rng,
    );
    init_stages(store, ENCODER, cfg, rng);
}

pub fn init_decoder<S: Real, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, cfg: &NetConfig, rng: &mut R) {
    let d = cfg.feature_dim;
    conv_param(store, &format!("{prefix}.fuse"), d, 2 * d, 1, rng);
    init_stages(store, prefix, cfg, rng);
    conv_param(store, &format!("{prefix}.hidden"), d, d, 1, rng);
    conv_param(store, &format!("{prefix}.output"), cfg.joints, d, 1, rng);
}

/// Encoder, projections and both decoders.
pub fn init_pretrain_params<S: Real>(cfg: &NetConfig, seed: u64) -> ParamStore<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_encoder(&mut store, cfg, &mut rng);
    quantizer::init_projections(&mut store, cfg.feature_dim, cfg.code_dim, &mut rng);
    init_decoder(&mut store, DECODER_U, cfg, &mut rng);
    init_decoder(&mut store, DECODER_B, cfg, &mut rng);
    store
}

struct Layers<'a, S> {
    store: &'a ParamStore<S>,
    cfg: &'a NetConfig,
}

impl<S: Real> Layers<'_, S> {
    fn conv(&self, g: &mut Graph<S>, name: &str, x: Var, dilation: usize) -> Result<Var> {
        let w = g.param(self.store, &format!("{name}.weight"))?;
        let b = g.param(self.store, &format!("{name}.bias"))?;
        g.conv1d(x, w, Some(b), dilation)
    }

    /// `x + pointwise(relu(dilated(relu(x))))`
    fn res_block(&self, g: &mut Graph<S>, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
        let h = g.relu(x);
        let h = self.conv(g, &format!("{prefix}.dilated"), h, dilation)?;
        let h = g.relu(h);
        let h = self.conv(g, &format!("{prefix}.pointwise"), h, 1)?;
        g.add(x, h)
    }

    fn stages(&self, g: &mut Graph<S>, prefix: &str, mut x: Var) -> Result<Var> {
        for s in 0..self.cfg.num_stages {
            x = self.conv(g, &format!("{prefix}.stage{s}.conv"), x, 1)?;
            for (b, &dil) in self.cfg.dilations.iter().enumerate() {
                x = self.res_block(g, &format!("{prefix}.stage{s}.res{b}"), x, dil)?;
            }
        }
        Ok(x)
    }
}

/// `J x N -> D x N`.
pub fn encode<S: Real>(g: &mut Graph<S>, store: &ParamStore<S>, cfg: &NetConfig, x: Var) -> Result<Var> {
    if g.value(x).rows() != cfg.joints {
        return Err(Error::Shape(format!(
            "encoder expects {} channels per frame, got {}",
            cfg.joints,
            g.value(x).rows()
        )));
    }
    let l = Layers { store, cfg };
    let h = l.conv(g, &format!("{ENCODER}.input"), x, 1)?;
    let h = g.relu(h);
    l.stages(g, ENCODER, h)
}

/// `[features ; codes]` (`2D x N`) `-> J x N`.
pub fn decode<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cfg: &NetConfig,
    prefix: &str,
    features: Var,
    codes_up: Var,
) -> Result<Var> {
    let l = Layers { store, cfg };
    let x = g.concat(features, codes_up)?;
    let h = l.conv(g, &format!("{prefix}.fuse"), x, 1)?;
    let h = l.stages(g, prefix, h)?;
    let h = l.conv(g, &format!("{prefix}.hidden"), h, 1)?;
    let h = g.relu(h);
    l.conv(g, &format!("{prefix}.output"), h, 1)
}

/// `U(F ∘ M, Z)`: masked features plus unmasked codes.
pub fn interior_decode<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cfg: &NetConfig,
    features: Var,
    mask: &[S],
    codes_up: Var,
) -> Result<Var> {
    let masked = g.mask_frames(features, mask)?;
    decode(g, store, cfg, DECODER_U, masked, codes_up)
}

pub fn boundary_decode<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cfg: &NetConfig,
    features: Var,
    codes_up: Var,
) -> Result<Var> {
    decode(g, store, cfg, DECODER_B, features, codes_up)
}

/// Residual block plus a pointwise map to per-frame class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// Action classes plus background.
    pub num_outputs: usize,
}

impl ClassifierHead {
    pub fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, cfg: &NetConfig, rng: &mut R) {
        init_res_block(store, &format!("{CLASSIFIER}.res"), cfg, rng);
        conv_param(
            store,
            &format!("{CLASSIFIER}.output"),
            self.num_outputs,
            cfg.feature_dim,
            1,
            rng,
        );
    }

    /// `D x N -> (C + 1) x N` logits.
    pub fn logits<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        cfg: &NetConfig,
        features: Var,
    ) -> Result<Var> {
        let l = Layers { store, cfg };
        let h = l.res_block(g, &format!("{CLASSIFIER}.res"), features, 1)?;
        let h = g.relu(h);
        let out = l.conv(g, &format!("{CLASSIFIER}.output"), h, 1)?;
        if g.value(out).rows() != self.num_outputs {
            return Err(Error::Shape("classifier output width does not match the head".into()));
        }
        Ok(out)
    }

    pub fn num_outputs_in(store: &ParamStore<impl Real>) -> Option<usize> {
        store.shape(&format!("{CLASSIFIER}.output.weight")).map(|s| s[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Contiguous zero spans of `span_len` frames.
    Span,
    /// Independent per-frame drops.
    Bernoulli,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(Self::Span),
            "bernoulli" => Ok(Self::Bernoulli),
            _ => Err(Error::Config(format!("unknown mask mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Span => "span",
            Self::Bernoulli => "bernoulli",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub span_len: usize,
    pub mode: MaskMode,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            span_len: 8,
            mode: MaskMode::Span,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.ratio)));
        }
        if self.span_len == 0 {
            return Err(Error::Config("mask span_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Binary keep-mask of length `t` (`0` = masked).
///
/// Span mode masks exactly `round(ratio * t)` frames in `ceil(masked / span_len)`
/// separated spans (the last one possibly shorter).
pub fn make_mask<S: Real>(t: usize, spec: &MaskSpec) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![S::one(); t];
    match spec.mode {
        MaskMode::Bernoulli => {
            for m in mask.iter_mut() {
                if rng.random::<f64>() < spec.ratio {
                    *m = S::zero();
                }
            }
        }
        MaskMode::Span => {
            let masked = ((spec.ratio * t as f64).round() as usize).min(t);
            if masked == 0 {
                return mask;
            }
            let spans = masked.div_ceil(spec.span_len);
            let free = t - masked;
            // mandatory one-frame gaps between spans when room allows
            let gaps_needed = (spans - 1).min(free);
            let extra = free - gaps_needed;
            let mut cuts: Vec<usize> = (0..spans).map(|_| rng.random_range(0..=extra)).collect();
            cuts.sort_unstable();
            let mut pos = 0;
            let mut prev_cut = 0;
            for (i, &cut) in cuts.iter().enumerate() {
                pos += cut - prev_cut;
                prev_cut = cut;
                if i > 0 && i <= gaps_needed {
                    pos += 1;
                }
                let len = if i + 1 == spans {
                    masked - i * spec.span_len
                } else {
                    spec.span_len
                };
                for m in &mut mask[pos..pos + len] {
                    *m = S::zero();
                }
                pos += len;
            }
        }
    }
    mask
}

/// Maximal runs of equal codes as 1-based inclusive segments labeled by code.
pub fn segments_from_codes(codes: &[usize]) -> Vec<ActionSegment> {
    let mut out: Vec<ActionSegment> = Vec::new();
    for (i, &c) in codes.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == c => s.end = i + 1,
            _ => out.push(ActionSegment::new(i + 1, i + 1, c)),
        }
    }
    out
}

pub fn run_length_decode(segments: &[ActionSegment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

/// End-state targets: every frame of a segment takes that segment's last frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTargets<S> {
    /// `T x J`, one row per frame.
    pub target: Tensor2D<S>,
    /// 1-based end frame of the segment containing each frame.
    pub boundary_map: Vec<usize>,
}

pub fn boundary_map(segments: &[ActionSegment], t: usize) -> Result<Vec<usize>> {
    let mut map = Vec::with_capacity(t);
    let mut next = 1;
    for s in segments {
        if s.begin != next || s.end < s.begin {
            break;
        }
        map.extend(std::iter::repeat_n(s.end, s.len()));
        next = s.end + 1;
    }
    if next != t + 1 || map.len() != t {
        return Err(Error::InvalidArgument(format!("segments do not tile frames 1..={t}")));
    }
    Ok(map)
}

/// `frames` is `T x J` (one row per frame).
pub fn boundary_targets<S: Real>(frames: &Tensor2D<S>, segments: &[ActionSegment]) -> Result<BoundaryTargets<S>> {
    let map = boundary_map(segments, frames.rows())?;
    let target = Tensor2D::from_fn(frames.rows(), frames.cols(), |i, j| frames.get(map[i] - 1, j));
    Ok(BoundaryTargets {
        target,
        boundary_map: map,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_bound: f64,
    pub lambda_com: f64,
    /// `0` drops the interior decoder.
    pub interior_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bound: 1.0,
            lambda_com: 0.05,
            interior_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda_bound) && ok(self.lambda_com) && ok(self.interior_weight)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub fn total_loss(interior: f64, boundary: f64, commitment: f64, w: &LossWeights) -> Result<f64> {
    if !(interior.is_finite() && boundary.is_finite() && commitment.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite loss component (interior {interior}, boundary {boundary}, commitment {commitment})"
        )));
    }
    Ok(w.interior_weight * interior + w.lambda_bound * boundary + w.lambda_com * commitment)
}

/// Sequences packed channel-major and zero-padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    /// `J x (B * seq_len)`.
    pub inputs: Tensor2D<S>,
    /// 1 for real frames, 0 for padding.
    pub valid: Vec<S>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
    /// Per-frame class ids (background on padding).
    pub labels: Vec<usize>,
}

impl<S: Real> Batch<S> {
    pub fn from_sequences(seqs: &[&AnnotatedSequence], background: usize) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let joints = first.sequence.joints();
        let seq_len = seqs.iter().map(|s| s.num_frames()).max().unwrap_or(0);
        let n = seqs.len() * seq_len;
        let mut inputs = Tensor2D::zeros(joints, n);
        let mut valid = vec![S::zero(); n];
        let mut labels = vec![background; n];
        for (b, s) in seqs.iter().enumerate() {
            if s.sequence.joints() != joints {
                return Err(Error::Shape(format!(
                    "batch mixes {joints}- and {}-channel sequences",
                    s.sequence.joints()
                )));
            }
            let base = b * seq_len;
            for t in 0..s.num_frames() {
                for (j, &v) in s.sequence.frame(t).iter().enumerate() {
                    inputs.set(j, base + t, S::from_f32(v));
                }
                valid[base + t] = S::one();
            }
            labels[base..base + s.num_frames()].copy_from_slice(&s.frame_labels(background));
        }
        Ok(Self {
            inputs,
            valid,
            lengths: seqs.iter().map(|s| s.num_frames()).collect(),
            seq_len,
            labels,
        })
    }

    pub fn joints(&self) -> usize {
        self.inputs.rows()
    }

    pub fn frames(&self) -> usize {
        self.inputs.cols()
    }

    /// Column ranges of the real frames of each sequence.
    pub fn spans(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| b * self.seq_len..b * self.seq_len + len)
    }
}

/// Where the per-frame codes of a pretraining pass come from.
pub enum Quantize<'a, S> {
    Codebooks {
        class: &'a Codebook<S>,
        residual: &'a Codebook<S>,
        layers: usize,
    },
    /// Fixed assignments for gradient checks. `base` is the `F_low` the bundle
    /// was computed from; the code offset `z_sum - base` stays fixed, so the
    /// quantized value moves one-to-one with `F_low`.
    Frozen {
        bundle: &'a LatentBundle<S>,
        base: &'a Tensor2D<S>,
    },
}

pub struct PretrainPass<S> {
    pub total: Var,
    pub interior: Option<Var>,
    pub boundary: Option<Var>,
    pub commitment: Var,
    /// Low-dimensional features before quantization, `d x N`.
    pub features_low: Tensor2D<S>,
    pub bundle: LatentBundle<S>,
}

/// Builds the full pretraining objective on `g`. `mask` has one entry per
/// batch frame. Disabled terms (zero weight) are not built.
pub fn pretrain_forward<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cfg: &NetConfig,
    batch: &Batch<S>,
    mask: &[S],
    quant: Quantize<'_, S>,
    weights: &LossWeights,
) -> Result<PretrainPass<S>> {
    let x = g.constant(batch.inputs.clone());
    let f = encode(g, store, cfg, x)?;
    let f_low = quantizer::project_down(g, store, f, cfg.normalize_codes)?;
    let features_low = g.value(f_low).clone();
    let (bundle, z) = match quant {
        Quantize::Codebooks {
            class,
            residual,
            layers,
        } => {
            let b = rvq_quantize(&features_low, class, residual, layers)?;
            let z = quantizer::straight_through(g, f_low, &b)?;
            (b, z)
        }
        Quantize::Frozen { bundle, base } => {
            let mut offset = bundle.z_sum.clone();
            for (o, &v) in offset.data_mut().iter_mut().zip(base.data()) {
                *o -= v;
            }
            let offset = g.constant(offset);
            (bundle.clone(), g.add(f_low, offset)?)
        }
    };
    let z_up = quantizer::project_up(g, store, z)?;
    let commitment = g.squared_error(f_low, &bundle.z_sum, &batch.valid, Reduction::MeanFrames)?;
    let mut terms = vec![(commitment, weights.lambda_com)];

    let interior = if weights.interior_weight > 0.0 {
        let pred = interior_decode(g, store, cfg, f, mask, z_up)?;
        let loss = g.squared_error(pred, &batch.inputs, &batch.valid, Reduction::MeanElements)?;
        terms.insert(0, (loss, weights.interior_weight));
        Some(loss)
    } else {
        None
    };

    let boundary = if weights.lambda_bound > 0.0 {
        let target = batch_boundary_targets(batch, &bundle.class_indices)?;
        let pred = boundary_decode(g, store, cfg, f, z_up)?;
        let loss = g.squared_error(pred, &target, &batch.valid, Reduction::MeanElements)?;
        let at = if interior.is_some() { 1 } else { 0 };
        terms.insert(at, (loss, weights.lambda_bound));
        Some(loss)
    } else {
        None
    };

    let total = g.weighted_sum(&terms)?;
    Ok(PretrainPass {
        total,
        interior,
        boundary,
        commitment,
        features_low,
        bundle,
    })
}

/// Boundary targets for every sequence of a batch from its class codes,
/// `J x N`; padded columns keep their own (zero) input.
pub fn batch_boundary_targets<S: Real>(batch: &Batch<S>, class_indices: &[usize]) -> Result<Tensor2D<S>> {
    let mut target = batch.inputs.clone();
    for span in batch.spans() {
        let segs = segments_from_codes(&class_indices[span.clone()]);
        let map = boundary_map(&segs, span.len())?;
        for (i, &end) in map.iter().enumerate() {
            let src = span.start + end - 1;
            for j in 0..batch.joints() {
                target.set(j, span.start + i, batch.inputs.get(j, src));
            }
        }
    }
    Ok(target)
}

/// Per-frame class-code ids of one sequence under trained parameters.
pub fn infer_codes<S: Real>(
    store: &ParamStore<S>,
    cfg: &NetConfig,
    class_cb: &Codebook<S>,
    seq: &AnnotatedSequence,
) -> Result<Vec<usize>> {
    let batch = Batch::<S>::from_sequences(&[seq], 0)?;
    let mut g = Graph::new(batch.seq_len);
    let x = g.constant(batch.inputs.clone());
    let f = encode(&mut g, store, cfg, x)?;
    let f_low = quantizer::project_down(&mut g, store, f, cfg.normalize_codes)?;
    let feats = g.value(f_low);
    (0..feats.cols())
        .map(|c| quantizer::nearest_code(&feats.column(c), class_cb).map(|(k, _)| k))
        .collect()
}

/// `(C + 1) x T` class probabilities for one sequence.
pub fn predict_probs<S: Real>(
    store: &ParamStore<S>,
    cfg: &NetConfig,
    head: &ClassifierHead,
    seq: &AnnotatedSequence,
) -> Result<Tensor2D<S>> {
    let batch = Batch::<S>::from_sequences(&[seq], 0)?;
    let mut g = Graph::new(batch.seq_len);
    let x = g.constant(batch.inputs.clone());
    let f = encode(&mut g, store, cfg, x)?;
    let logits = head.logits(&mut g, store, cfg, f)?;
    Ok(softmax_columns(g.value(logits)))
}

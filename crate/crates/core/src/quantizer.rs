//! Two-codebook residual vector quantization.
//!
//! Layer 0 quantizes the low-dimensional feature with the class codebook;
//! its indices are the pre-action classes. Layers `1..=L` quantize the
//! remaining residual with one shared residual codebook. Codebooks learn
//! only through exponential moving averages; the encoder side learns through
//! the commitment loss and a straight-through gradient.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Container, Graph, ParamStore, Real, Tensor2D, Var};
use crate::error::{Error, Result};

/// EMA normalization constant.
pub const EMA_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    pub k_class: usize,
    pub k_residual: usize,
    pub num_rvq_layers: usize,
    pub code_dim: usize,
    pub feature_dim: usize,
    pub ema_decay: f64,
    /// Codes used fewer times than this over one usage window are dead.
    pub dead_code_threshold: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            k_class: 64,
            k_residual: 256,
            num_rvq_layers: 4,
            code_dim: 16,
            feature_dim: 256,
            ema_decay: 0.99,
            dead_code_threshold: 1.0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_class == 0 || self.k_residual == 0 || self.code_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("codebook sizes and dimensions must be positive".into()));
        }
        if self.code_dim > self.feature_dim {
            return Err(Error::Config(format!(
                "code_dim {} exceeds feature_dim {}",
                self.code_dim, self.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.dead_code_threshold >= 0.0) {
            return Err(Error::Config("dead_code_threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// `K x d` code matrix with EMA accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S> {
    entries: Tensor2D<S>,
    ema_cluster_size: Vec<S>,
    ema_sum: Tensor2D<S>,
    pub decay: f64,
    pub trainable: bool,
}

impl<S: Real> Codebook<S> {
    /// Accumulators start as if every code had absorbed one unit of mass at its
    /// current value.
    pub fn new(entries: Tensor2D<S>, decay: f64) -> Result<Self> {
        if entries.rows() == 0 || entries.cols() == 0 {
            return Err(Error::InvalidArgument("codebook must be non-empty".into()));
        }
        if !entries.all_finite() {
            return Err(Error::InvalidArgument("codebook entries must be finite".into()));
        }
        Ok(Self {
            ema_cluster_size: vec![S::one(); entries.rows()],
            ema_sum: entries.clone(),
            entries,
            decay,
            trainable: true,
        })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random(size: usize, dim: usize, scale: f64, decay: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = Tensor2D::from_fn(size, dim, |_, _| S::from_f64(rng.random_range(-scale..=scale)));
        Self::new(entries, decay)
    }

    /// Entries copied from randomly chosen candidate columns (`d x M`).
    pub fn from_samples(size: usize, candidates: &Tensor2D<S>, decay: f64, seed: u64) -> Result<Self> {
        if candidates.cols() == 0 {
            return Err(Error::InvalidArgument("no candidate features".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..candidates.cols())).collect();
        let entries = Tensor2D::from_fn(size, candidates.rows(), |k, r| candidates.get(r, idx[k]));
        Self::new(entries, decay)
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor2D<S> {
        &self.entries
    }

    pub fn code(&self, k: usize) -> &[S] {
        self.entries.row(k)
    }

    pub fn ema_cluster_size(&self) -> &[S] {
        &self.ema_cluster_size
    }

    pub fn ema_sum(&self) -> &Tensor2D<S> {
        &self.ema_sum
    }

    /// Exponential-moving-average re-estimation from `(index, feature)` pairs:
    /// `n_k <- decay n_k + (1 - decay) count_k`,
    /// `m_k <- decay m_k + (1 - decay) sum_k`, `c_k <- m_k / (n_k + eps)`.
    /// Codes whose size is exactly zero keep their entry.
    pub fn ema_update<'a>(&mut self, assignments: impl IntoIterator<Item = (usize, &'a [S])>) -> Result<()> {
        if !self.trainable {
            return Err(Error::InvalidArgument("codebook is frozen".into()));
        }
        let (k, d) = (self.size(), self.dim());
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (idx, f) in assignments {
            if idx >= k || f.len() != d {
                return Err(Error::Shape(format!(
                    "assignment to code {idx} of {k} with a {}-d feature (codebook is {d}-d)",
                    f.len()
                )));
            }
            counts[idx] += 1.0;
            for (s, &v) in sums[idx * d..(idx + 1) * d].iter_mut().zip(f) {
                *s += v.as_f64();
            }
        }
        let decay = self.decay;
        for c in 0..k {
            let size = decay * self.ema_cluster_size[c].as_f64() + (1.0 - decay) * counts[c];
            self.ema_cluster_size[c] = S::from_f64(size);
            for r in 0..d {
                let m = decay * self.ema_sum.get(c, r).as_f64() + (1.0 - decay) * sums[c * d + r];
                self.ema_sum.set(c, r, S::from_f64(m));
            }
            let size = self.ema_cluster_size[c].as_f64();
            if size > 0.0 {
                for r in 0..d {
                    let v = self.ema_sum.get(c, r).as_f64() / (size + EMA_EPSILON);
                    self.entries.set(c, r, S::from_f64(v));
                }
            }
        }
        Ok(())
    }

    /// Replaces each code in `dead` with a seeded random candidate column
    /// (`d x M`) and resets its accumulators. Other codes are untouched.
    pub fn reinit_dead_codes(&mut self, dead: &[usize], candidates: &Tensor2D<S>, seed: u64) -> Result<()> {
        if dead.is_empty() {
            return Ok(());
        }
        if candidates.cols() == 0 || candidates.rows() != self.dim() {
            return Err(Error::Shape("candidate features must be non-empty d x M".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<usize> = (0..candidates.cols()).collect();
        for &k in dead {
            if k >= self.size() {
                return Err(Error::InvalidArgument(format!("dead code {k} out of range")));
            }
            let &col = cols.choose(&mut rng).expect("non-empty");
            for r in 0..self.dim() {
                let v = candidates.get(r, col);
                self.entries.set(k, r, v);
                self.ema_sum.set(k, r, v);
            }
            self.ema_cluster_size[k] = S::one();
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let s = |v: S| S::from_f64(v.as_f64() * alpha);
        Self {
            entries: self.entries.map(s),
            ema_cluster_size: self.ema_cluster_size.clone(),
            ema_sum: self.ema_sum.map(s),
            decay: self.decay,
            trainable: self.trainable,
        }
    }

    /// Stores entries and accumulators as `<name>`, `<name>.ema_cluster_size`
    /// and `<name>.ema_sum`.
    pub fn write_into(&self, container: &mut Container, name: &str) -> Result<()> {
        let f = |t: &Tensor2D<S>| t.data().iter().map(|v| v.as_f32()).collect::<Vec<_>>();
        container.push_array(name, vec![self.size(), self.dim()], f(&self.entries))?;
        container.push_array(
            format!("{name}.ema_cluster_size"),
            vec![self.size()],
            self.ema_cluster_size.iter().map(|v| v.as_f32()).collect(),
        )?;
        container.push_array(
            format!("{name}.ema_sum"),
            vec![self.size(), self.dim()],
            f(&self.ema_sum),
        )?;
        container.set_meta(format!("{name}.decay"), self.decay);
        Ok(())
    }

    pub fn read_from(container: &Container, name: &str) -> Result<Self> {
        let get = |n: &str| {
            container
                .array(n)
                .ok_or_else(|| Error::Shape(format!("checkpoint has no array `{n}`")))
        };
        let entries = get(name)?;
        let sizes = get(&format!("{name}.ema_cluster_size"))?;
        let sums = get(&format!("{name}.ema_sum"))?;
        let (k, d) = match entries.shape[..] {
            [k, d] => (k, d),
            _ => return Err(Error::Shape(format!("`{name}` must be 2-d"))),
        };
        if sizes.shape != [k] || sums.shape != [k, d] {
            return Err(Error::Shape(format!("accumulators of `{name}` do not match {k}x{d}")));
        }
        let conv = |v: &[f32]| v.iter().map(|&x| S::from_f32(x)).collect::<Vec<_>>();
        let decay = container
            .meta(&format!("{name}.decay"))
            .and_then(|s| s.parse().ok())
            .unwrap_or(0.99);
        Ok(Self {
            entries: Tensor2D::from_vec(k, d, conv(&entries.data))?,
            ema_cluster_size: conv(&sizes.data),
            ema_sum: Tensor2D::from_vec(k, d, conv(&sums.data))?,
            decay,
            trainable: true,
        })
    }
}

fn sq_dist<S: Real>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Index of the code minimizing the squared distance to `f`; ties go to the
/// smallest index.
pub fn nearest_code<'a, S: Real>(f: &[S], codebook: &'a Codebook<S>) -> Result<(usize, &'a [S])> {
    if f.len() != codebook.dim() {
        return Err(Error::Shape(format!(
            "{}-d feature against a {}-d codebook",
            f.len(),
            codebook.dim()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature passed to the quantizer".into()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.size() {
        let d = sq_dist(f, codebook.code(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok((best, codebook.code(best)))
}

/// Per-frame codes of a `d x N` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle<S> {
    pub class_indices: Vec<usize>,
    /// One index vector per residual layer.
    pub residual_indices: Vec<Vec<usize>>,
    pub z0: Tensor2D<S>,
    pub residuals: Vec<Tensor2D<S>>,
    pub z_sum: Tensor2D<S>,
    /// `||F - Z||^2` summed over channels, averaged over frames.
    pub commitment: f64,
}

impl<S: Real> LatentBundle<S> {
    pub fn num_layers(&self) -> usize {
        self.residuals.len()
    }

    /// Mean per-frame squared quantization error after each layer
    /// (`0` = class layer only, `l` = class plus `l` residual layers).
    pub fn layer_errors(&self, features: &Tensor2D<S>) -> Vec<f64> {
        let n = features.cols();
        let mut partial = self.z0.clone();
        let mut errs = Vec::with_capacity(self.residuals.len() + 1);
        let err = |p: &Tensor2D<S>| (0..n).map(|c| sq_dist(&features.column(c), &p.column(c))).sum::<f64>() / n as f64;
        errs.push(err(&partial));
        for r in &self.residuals {
            partial.add_assign(r);
            errs.push(err(&partial));
        }
        errs
    }
}

/// Quantizes every column of `features` (`d x N`): class codebook on layer
/// 0, then `layers` rounds of the shared residual codebook on what remains.
pub fn rvq_quantize<S: Real>(
    features: &Tensor2D<S>,
    class_cb: &Codebook<S>,
    residual_cb: &Codebook<S>,
    layers: usize,
) -> Result<LatentBundle<S>> {
    let (d, n) = features.shape();
    if class_cb.dim() != d || residual_cb.dim() != d {
        return Err(Error::Shape(format!(
            "{d}-d features against {}-d / {}-d codebooks",
            class_cb.dim(),
            residual_cb.dim()
        )));
    }
    let mut z0 = Tensor2D::zeros(d, n);
    let mut class_indices = Vec::with_capacity(n);
    let mut residual_left = features.clone();
    for c in 0..n {
        let f = features.column(c);
        let (k, code) = nearest_code(&f, class_cb)?;
        class_indices.push(k);
        z0.set_column(c, code);
        for r in 0..d {
            residual_left.set(r, c, f[r] - code[r]);
        }
    }
    let mut residuals = Vec::with_capacity(layers);
    let mut residual_indices = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut q = Tensor2D::zeros(d, n);
        let mut idx = Vec::with_capacity(n);
        for c in 0..n {
            let r = residual_left.column(c);
            let (k, code) = nearest_code(&r, residual_cb)?;
            idx.push(k);
            q.set_column(c, code);
            for i in 0..d {
                residual_left.set(i, c, r[i] - code[i]);
            }
        }
        residuals.push(q);
        residual_indices.push(idx);
    }
    let mut z_sum = z0.clone();
    for r in &residuals {
        z_sum.add_assign(r);
    }
    let commitment = (0..n)
        .map(|c| sq_dist(&features.column(c), &z_sum.column(c)))
        .sum::<f64>()
        / n as f64;
    Ok(LatentBundle {
        class_indices,
        residual_indices,
        z0,
        residuals,
        z_sum,
        commitment,
    })
}

/// Forward value `bundle.z_sum`, identity gradient to `features`.
pub fn straight_through<S: Real>(g: &mut Graph<S>, features: Var, bundle: &LatentBundle<S>) -> Result<Var> {
    g.straight_through(features, bundle.z_sum.clone())
}

/// Residual inputs seen by each residual layer, for the EMA update of the
/// shared residual codebook: `(layer l, frame c) -> features - z0 - sum_{i<l} R^i`.
pub fn residual_inputs<S: Real>(features: &Tensor2D<S>, bundle: &LatentBundle<S>) -> Vec<Tensor2D<S>> {
    let mut out = Vec::with_capacity(bundle.residuals.len());
    let mut partial = bundle.z0.clone();
    for r in &bundle.residuals {
        let mut left = features.clone();
        for (v, &p) in left.data_mut().iter_mut().zip(partial.data()) {
            *v -= p;
        }
        out.push(left);
        partial.add_assign(r);
    }
    out
}

pub const DOWN_WEIGHT: &str = "quantizer.down.weight";
pub const DOWN_BIAS: &str = "quantizer.down.bias";
pub const UP_WEIGHT: &str = "quantizer.up.weight";
pub const UP_BIAS: &str = "quantizer.up.bias";

/// Learned `D -> d` and `d -> D` pointwise maps around the quantizer.
pub fn init_projections<S: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    feature_dim: usize,
    code_dim: usize,
    rng: &mut R,
) {
    store.insert_uniform(DOWN_WEIGHT, &[code_dim, feature_dim, 1], feature_dim, rng);
    store.insert_uniform(DOWN_BIAS, &[code_dim], feature_dim, rng);
    store.insert_uniform(UP_WEIGHT, &[feature_dim, code_dim, 1], code_dim, rng);
    store.insert_uniform(UP_BIAS, &[feature_dim], code_dim, rng);
}

/// `D x N -> d x N`.
/// With `normalize`, every frame is then scaled to unit length.
pub fn project_down<S: Real>(g: &mut Graph<S>, store: &ParamStore<S>, features: Var, normalize: bool) -> Result<Var> {
    let w = g.param(store, DOWN_WEIGHT)?;
    let b = g.param(store, DOWN_BIAS)?;
    let low = g.linear(features, w, Some(b))?;
    Ok(if normalize { g.normalize_frames(low) } else { low })
}

/// `d x N -> D x N`.
pub fn project_up<S: Real>(g: &mut Graph<S>, store: &ParamStore<S>, codes: Var) -> Result<Var> {
    let w = g.param(store, UP_WEIGHT)?;
    let b = g.param(store, UP_BIAS)?;
    g.linear(codes, w, Some(b))
}

/// Code usage over a window of assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    pub counts: Vec<usize>,
    /// `exp(H)` of the empirical code distribution.
    pub perplexity: f64,
    pub dead: Vec<usize>,
}

pub fn usage_stats(indices: &[usize], codebook_size: usize, dead_code_threshold: f64) -> Result<UsageStats> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("usage history is empty".into()));
    }
    let mut counts = vec![0usize; codebook_size];
    for &i in indices {
        if i >= codebook_size {
            return Err(Error::InvalidArgument(format!("code {i} out of range {codebook_size}")));
        }
        counts[i] += 1;
    }
    let total = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    let dead = (0..codebook_size)
        .filter(|&k| (counts[k] as f64) < dead_code_threshold)
        .collect();
    Ok(UsageStats {
        counts,
        perplexity: entropy.exp(),
        dead,
    })
}

//! Softmax output layer over random features, optionally through a bottleneck.
//!
//! Seen as a network, the random projection bank is a fixed first layer with
//! cosine units and this module is everything trainable above it:
//!
//! ```text
//! h = φ                      (no bottleneck)
//! h = U φ                    (linear: low-rank factorization of θ)
//! h = logistic(U φ + β)      (sigmoid: learned output code)
//! p(c | x) = softmax_c(θ h)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, CowArray, Ix2, Zip};
use rand_distr::{Distribution, Normal};

use crate::binio;
use crate::error::{Error, Result};
use crate::rff::{BankBlock, KernelFamily, KernelSpec, ProjectionBank};
use crate::rng::{self, Stream};

const MODEL_MAGIC: &str = "RKSM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    None,
    Linear(usize),
    Sigmoid(usize),
}

impl Bottleneck {
    pub fn width(&self) -> Option<usize> {
        match *self {
            Bottleneck::None => None,
            Bottleneck::Linear(w) | Bottleneck::Sigmoid(w) => Some(w),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Bottleneck::None => 0,
            Bottleneck::Linear(_) => 1,
            Bottleneck::Sigmoid(_) => 2,
        }
    }
}

impl std::fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bottleneck::None => write!(f, "none"),
            Bottleneck::Linear(w) => write!(f, "linear:{w}"),
            Bottleneck::Sigmoid(w) => write!(f, "sigmoid:{w}"),
        }
    }
}

impl std::str::FromStr for Bottleneck {
    type Err = Error;

    /// Parses `none`, `linear:W` or `sigmoid:W`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("bad bottleneck {s:?}"));
        if s == "none" {
            return Ok(Bottleneck::None);
        }
        let (kind, width) = s.split_once(':').ok_or_else(bad)?;
        let width: usize = width.parse().map_err(|_| bad())?;
        match kind {
            "linear" => Ok(Bottleneck::Linear(width)),
            "sigmoid" => Ok(Bottleneck::Sigmoid(width)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub bottleneck: Bottleneck,
}

impl ModelConfig {
    pub fn new(num_classes: usize, feature_dim: usize, bottleneck: Bottleneck) -> Self {
        Self {
            num_classes,
            feature_dim,
            bottleneck,
        }
    }

    /// Width of the layer feeding the softmax.
    pub fn hidden_dim(&self) -> usize {
        self.bottleneck.width().unwrap_or(self.feature_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidParameter("feature_dim must be positive".into()));
        }
        if let Some(w) = self.bottleneck.width() {
            if w == 0 || w >= self.feature_dim {
                return Err(Error::InvalidParameter(format!(
                    "bottleneck width {w} must be in 1..{}",
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }
}

/// Trainable parameters. Also used for gradients and momentum buffers, which
/// share the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// θ, `C × H`.
    pub weights: Array2<f64>,
    /// U, `W × D`; present with any bottleneck.
    pub projection: Option<Array2<f64>>,
    /// β, length `W`; present with a sigmoid bottleneck.
    pub bias: Option<Array1<f64>>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            weights: Array2::zeros(other.weights.raw_dim()),
            projection: other.projection.as_ref().map(|u| Array2::zeros(u.raw_dim())),
            bias: other.bias.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
            + self.projection.as_ref().map_or(0, |u| u.len())
            + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view order: θ row-major, then U row-major, then β.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .chain(self.projection.iter().flat_map(|u| u.iter()))
            .chain(self.bias.iter().flat_map(|b| b.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.projection.iter_mut().flat_map(|u| u.iter_mut()))
            .chain(self.bias.iter_mut().flat_map(|b| b.iter_mut()))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum()
    }

    /// `self = alpha * self + beta * other`, elementwise.
    pub fn combine(&mut self, alpha: f64, beta: f64, other: &Params) {
        Zip::from(&mut self.weights)
            .and(&other.weights)
            .for_each(|a, &b| *a = alpha * *a + beta * b);
        if let (Some(a), Some(b)) = (self.projection.as_mut(), other.projection.as_ref()) {
            Zip::from(a).and(b).for_each(|a, &b| *a = alpha * *a + beta * b);
        }
        if let (Some(a), Some(b)) = (self.bias.as_mut(), other.bias.as_ref()) {
            Zip::from(a).and(b).for_each(|a, &b| *a = alpha * *a + beta * b);
        }
    }

    fn same_shape(&self, other: &Params) -> bool {
        self.weights.dim() == other.weights.dim()
            && self.projection.as_ref().map(|u| u.dim()) == other.projection.as_ref().map(|u| u.dim())
            && self.bias.as_ref().map(|b| b.dim()) == other.bias.as_ref().map(|b| b.dim())
    }
}

/// Which projection bank produced the model's input features.
///
/// Stored by kernel, seed and size of each block so a checkpoint stays small and
/// the bank is resampled on load.
#[derive(Debug, Clone, PartialEq)]
pub struct BankRef {
    pub input_dim: usize,
    pub blocks: Vec<BankBlock>,
}

impl BankRef {
    pub fn of(bank: &ProjectionBank) -> Self {
        Self {
            input_dim: bank.input_dim(),
            blocks: bank.blocks().to_vec(),
        }
    }

    pub fn reconstruct(&self) -> Result<ProjectionBank> {
        ProjectionBank::reconstruct(&self.blocks, self.input_dim)
    }

    fn num_features(&self) -> usize {
        self.blocks.iter().map(|b| b.num_features).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    bank: Option<BankRef>,
}

/// Predicted class distribution for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub probs: Array1<f64>,
}

impl Posterior {
    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.probs.view())
    }
}

pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-place row softmax with max subtraction. Returns per-row log-normalizers.
fn softmax_rows(scores: &mut Array2<f64>) -> Result<Array1<f64>> {
    let mut log_norm = Array1::zeros(scores.nrows());
    for (mut row, ln) in scores.rows_mut().into_iter().zip(log_norm.iter_mut()) {
        if row.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("class scores"));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum: f64 = row.sum();
        row /= sum;
        *ln = max + sum.ln();
    }
    Ok(log_norm)
}

/// Softmax in place and return the mean of `logsumexp(s) − s_y`, taken from
/// the raw scores so it stays exact when `p(y)` underflows.
fn softmax_cross_entropy(scores: &mut Array2<f64>, labels: &[usize]) -> Result<f64> {
    let picked: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| scores[[i, y]]).collect();
    let log_norm = softmax_rows(scores)?;
    let total: f64 = log_norm.iter().zip(&picked).map(|(ln, s)| ln - s).sum();
    Ok(total / labels.len() as f64)
}

/// Builds a model with zero output weights. A bottleneck projection is drawn
/// from Normal(0, 1/D); the sigmoid bias starts at zero.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.feature_dim;
    let projection = match config.bottleneck.width() {
        Some(w) => {
            let normal = Normal::new(0.0, (1.0 / d as f64).sqrt())
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let mut rng = rng::seeded(seed, Stream::ModelInit);
            let mut u = Array2::zeros((w, d));
            for v in u.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            Some(u)
        }
        None => None,
    };
    let bias = match config.bottleneck {
        Bottleneck::Sigmoid(w) => Some(Array1::zeros(w)),
        _ => None,
    };
    Ok(Model {
        config,
        params: Params {
            weights: Array2::zeros((config.num_classes, config.hidden_dim())),
            projection,
            bias,
        },
        bank: None,
    })
}

impl Model {
    /// Assemble a model from explicit parameters, checking shapes against `config`.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expect = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{what} has the wrong shape for {config:?}")))
            }
        };
        expect(
            "weights",
            params.weights.dim() == (config.num_classes, config.hidden_dim()),
        )?;
        expect(
            "projection",
            params.projection.as_ref().map(|u| u.dim())
                == config.bottleneck.width().map(|w| (w, config.feature_dim)),
        )?;
        expect(
            "bias",
            params.bias.as_ref().map(|b| b.len())
                == match config.bottleneck {
                    Bottleneck::Sigmoid(w) => Some(w),
                    _ => None,
                },
        )?;
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Self {
            config,
            params,
            bank: None,
        })
    }

    /// Attach the provenance of the bank that feeds this model.
    pub fn with_bank(mut self, bank: &ProjectionBank) -> Result<Self> {
        if bank.num_features() != self.config.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.feature_dim,
                actual: bank.num_features(),
            });
        }
        self.bank = Some(BankRef::of(bank));
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn bank_ref(&self) -> Option<&BankRef> {
        self.bank.as_ref()
    }

    /// Replace the parameters; shapes must match.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        if !self.params.same_shape(&params) {
            return Err(Error::InvalidParameter("parameter shapes differ".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Overwrite parameters from a flat slice in [`Params::iter`] order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: flat.len(),
            });
        }
        for (p, &v) in self.params.iter_mut().zip(flat) {
            *p = v;
        }
        Ok(())
    }

    /// The same model with every parameter rounded to f32, i.e. exactly what
    /// a checkpoint file stores.
    pub fn rounded_to_f32(&self) -> Model {
        let mut out = self.clone();
        for p in out.params.iter_mut() {
            *p = f64::from(*p as f32);
        }
        out
    }

    fn check_features(&self, cols: usize) -> Result<()> {
        if cols != self.config.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.feature_dim,
                actual: cols,
            });
        }
        Ok(())
    }

    /// Bottleneck activations for a batch of feature rows (`B × H`).
    fn hidden_batch<'a>(&self, phi: ArrayView2<'a, f64>) -> CowArray<'a, f64, Ix2> {
        match self.config.bottleneck {
            Bottleneck::None => phi.into(),
            Bottleneck::Linear(_) => phi.dot(&self.projection().t()).into(),
            Bottleneck::Sigmoid(_) => {
                let mut z = phi.dot(&self.projection().t());
                let bias = self.params.bias.as_ref().expect("sigmoid bias");
                for mut row in z.rows_mut() {
                    Zip::from(&mut row).and(bias).for_each(|v, &b| *v = logistic(*v + b));
                }
                z.into()
            }
        }
    }

    fn projection(&self) -> &Array2<f64> {
        self.params.projection.as_ref().expect("bottleneck projection")
    }

    /// Layer below the softmax for one feature vector.
    pub fn hidden(&self, phi: ArrayView1<'_, f32>) -> Result<Array1<f64>> {
        self.check_features(phi.len())?;
        let row = phi.mapv(f64::from).insert_axis(Axis(0));
        Ok(self.hidden_batch(row.view()).row(0).to_owned())
    }

    /// Raw class scores `θ h` for a batch (`B × C`).
    pub fn logits_batch(&self, features: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
        self.check_features(features.ncols())?;
        let phi = features.mapv(f64::from);
        let h = self.hidden_batch(phi.view());
        Ok(h.dot(&self.params.weights.t()))
    }

    pub fn posterior(&self, phi: ArrayView1<'_, f32>) -> Result<Posterior> {
        let probs = self.posteriors_batch(phi.insert_axis(Axis(0)))?;
        Ok(Posterior {
            probs: probs.row(0).to_owned(),
        })
    }

    /// Posterior rows for a batch of feature rows (`B × C`).
    pub fn posteriors_batch(&self, features: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
        let mut scores = self.logits_batch(features)?;
        softmax_rows(&mut scores)?;
        Ok(scores)
    }

    /// Mean cross-entropy of `labels` (0-based) plus `(l2/2)·‖params‖²`.
    pub fn loss(&self, features: ArrayView2<'_, f32>, labels: &[usize], l2: f64) -> Result<f64> {
        self.check_batch(features, labels)?;
        let mut scores = self.logits_batch(features)?;
        let data = softmax_cross_entropy(&mut scores, labels)?;
        Ok(data + 0.5 * l2 * self.params.squared_norm())
    }

    fn check_batch(&self, features: ArrayView2<'_, f32>, labels: &[usize]) -> Result<()> {
        self.check_features(features.ncols())?;
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= self.config.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.config.num_classes,
            });
        }
        Ok(())
    }

    /// Objective of [`Model::loss`] and its exact gradient for every trainable
    /// parameter (θ, and U and β when a bottleneck is present).
    pub fn loss_and_grad(
        &self,
        features: ArrayView2<'_, f32>,
        labels: &[usize],
        l2: f64,
    ) -> Result<(f64, Params)> {
        self.check_batch(features, labels)?;
        let n = labels.len() as f64;
        let phi = features.mapv(f64::from);
        let hidden = self.hidden_batch(phi.view());
        let mut probs = hidden.dot(&self.params.weights.t());
        let loss = softmax_cross_entropy(&mut probs, labels)? + 0.5 * l2 * self.params.squared_norm();

        // dL/ds = (p − onehot(y)) / n
        let mut dscores = probs;
        for (mut row, &y) in dscores.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        dscores /= n;

        let mut grads = Params::zeros_like(&self.params);
        grads.weights = dscores.t().dot(&hidden);
        match self.config.bottleneck {
            Bottleneck::None => {}
            Bottleneck::Linear(_) => {
                let dhidden = dscores.dot(&self.params.weights);
                grads.projection = Some(dhidden.t().dot(&phi));
            }
            Bottleneck::Sigmoid(_) => {
                let mut dz = dscores.dot(&self.params.weights);
                Zip::from(&mut dz).and(&hidden).for_each(|g, &h| *g *= h * (1.0 - h));
                grads.projection = Some(dz.t().dot(&phi));
                grads.bias = Some(dz.sum_axis(Axis(0)));
            }
        }
        if l2 != 0.0 {
            grads.combine(1.0, l2, &self.params);
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite("loss or gradient"));
        }
        Ok((loss, grads))
    }

    /// Serialize to `.rksm` (little-endian):
    ///
    /// ```text
    /// "RKSM" version:u32 C:u32 D:u32 kind:u8 width:u32
    /// has_bank:u8 [input_dim:u32 blocks:u32 {family:u8 σ:f64 D_j:u32 seed:u64}*]
    /// θ:f32[C·H] U:f32[W·D] β:f32[W]
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC.as_bytes())?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u32::<LittleEndian>(self.config.num_classes as u32)?;
        w.write_u32::<LittleEndian>(self.config.feature_dim as u32)?;
        w.write_u8(self.config.bottleneck.code())?;
        w.write_u32::<LittleEndian>(self.config.bottleneck.width().unwrap_or(0) as u32)?;
        match &self.bank {
            None => w.write_u8(0)?,
            Some(bank) => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(bank.input_dim as u32)?;
                w.write_u32::<LittleEndian>(bank.blocks.len() as u32)?;
                for block in &bank.blocks {
                    w.write_u8(block.spec.family().code())?;
                    w.write_f64::<LittleEndian>(block.spec.bandwidth())?;
                    w.write_u32::<LittleEndian>(block.num_features as u32)?;
                    w.write_u64::<LittleEndian>(block.seed)?;
                }
            }
        }
        binio::write_f32s(w, self.params.iter().map(|&v| v as f32))?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, MODEL_MAGIC)?;
        let version = binio::read_u32(r, "version")?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let num_classes = binio::read_u32(r, "num_classes")? as usize;
        let feature_dim = binio::read_u32(r, "feature_dim")? as usize;
        let kind = binio::read_u8(r, "bottleneck kind")?;
        let width = binio::read_u32(r, "bottleneck width")? as usize;
        let bottleneck = match kind {
            0 => Bottleneck::None,
            1 => Bottleneck::Linear(width),
            2 => Bottleneck::Sigmoid(width),
            other => {
                return Err(Error::InvalidParameter(format!("unknown bottleneck kind {other}")))
            }
        };
        let bank = match binio::read_u8(r, "bank flag")? {
            0 => None,
            1 => {
                let input_dim = binio::read_u32(r, "bank input_dim")? as usize;
                let count = binio::read_u32(r, "bank block count")? as usize;
                let mut blocks = Vec::with_capacity(count);
                for _ in 0..count {
                    let family = KernelFamily::from_code(binio::read_u8(r, "family")?)?;
                    let sigma = binio::read_f64(r, "bandwidth")?;
                    let num_features = binio::read_u32(r, "num_features")? as usize;
                    let seed = binio::read_u64(r, "seed")?;
                    blocks.push(BankBlock {
                        spec: KernelSpec::new(family, sigma)?,
                        num_features,
                        seed,
                    });
                }
                Some(BankRef { input_dim, blocks })
            }
            other => return Err(Error::InvalidParameter(format!("bad bank flag {other}"))),
        };
        let config = ModelConfig::new(num_classes, feature_dim, bottleneck);
        config.validate()?;
        if let Some(bank) = &bank {
            if bank.num_features() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    actual: bank.num_features(),
                });
            }
        }
        let mut model = init_model(config, 0)?;
        let flat = binio::read_f32_vec(r, model.params.len(), "parameters")?;
        for (p, v) in model.params.iter_mut().zip(flat) {
            *p = f64::from(v);
        }
        if !model.params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        model.bank = bank;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

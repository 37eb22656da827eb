//! Shift-invariant kernels and their random Fourier feature approximations.
//!
//! A [`ProjectionBank`] holds `D` frequencies `ω_i ∈ R^d` drawn from the
//! spectral density of a kernel together with phases `b_i ~ U[0, 2π)`. The
//! feature map
//!
//! ```text
//! φ_i(x) = sqrt(2/D) · cos(ω_iᵀx + b_i)
//! ```
//!
//! satisfies `E[φ(x)ᵀφ(z)] = k(x − z)`.
//!
//! | kernel     | k(x, z)                  | frequency density        |
//! |------------|--------------------------|--------------------------|
//! | Gaussian   | exp(−‖x−z‖₂² / 2σ²)      | Normal(0, σ⁻²) per coord |
//! | Laplacian  | exp(−‖x−z‖₁ / σ)         | Cauchy(0, 1/σ) per coord |

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::Open01;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const BANK_MAGIC: &str = "RFFB";
/// Single sampled bank, laid out exactly as documented on [`ProjectionBank::write_to`].
const BANK_VERSION_SINGLE: u32 = 1;
/// Concatenation of several sampled banks.
const BANK_VERSION_COMBINED: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    GaussianRbf,
    Laplacian,
}

impl KernelFamily {
    pub fn code(self) -> u8 {
        match self {
            KernelFamily::GaussianRbf => 0,
            KernelFamily::Laplacian => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(KernelFamily::GaussianRbf),
            1 => Ok(KernelFamily::Laplacian),
            other => Err(Error::InvalidParameter(format!(
                "unknown kernel family code {other}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::GaussianRbf => "rbf",
            KernelFamily::Laplacian => "laplacian",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" | "gaussian" => Ok(KernelFamily::GaussianRbf),
            "lap" | "laplacian" => Ok(KernelFamily::Laplacian),
            other => Err(Error::InvalidParameter(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Kernel family plus bandwidth σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::GaussianRbf, bandwidth)
    }

    pub fn laplacian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplacian, bandwidth)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Kernel value as a function of the difference vector, accumulated in f64.
    fn eval_diff(&self, diffs: impl Iterator<Item = f64>) -> f64 {
        match self.family {
            KernelFamily::GaussianRbf => {
                let sq: f64 = diffs.map(|d| d * d).sum();
                (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Laplacian => {
                let l1: f64 = diffs.map(f64::abs).sum();
                (-l1 / self.bandwidth).exp()
            }
        }
    }

    /// One frequency coordinate drawn from the kernel's spectral density.
    fn sample_frequency<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.family {
            KernelFamily::GaussianRbf => {
                let z: f64 = rng.sample(StandardNormal);
                z / self.bandwidth
            }
            KernelFamily::Laplacian => {
                // Inverse CDF of Cauchy(0, 1/σ).
                let u: f64 = rng.sample(Open01);
                (PI * (u - 0.5)).tan() / self.bandwidth
            }
        }
    }
}

/// Exact kernel value `k(x, z)`; always in `(0, 1]` for finite inputs.
pub fn kernel_exact<T>(spec: &KernelSpec, x: &[T], z: &[T]) -> Result<f64>
where
    T: Copy + Into<f64>,
{
    if x.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: z.len(),
        });
    }
    Ok(spec.eval_diff(
        x.iter()
            .zip(z)
            .map(|(&a, &b)| a.into() - b.into()),
    ))
}

/// Provenance of one sampled block of frequencies inside a bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankBlock {
    pub spec: KernelSpec,
    pub num_features: usize,
    pub seed: u64,
}

/// Sampled frequencies Ω (`D × d`) and phases `b` defining a random feature map.
///
/// A bank built by [`combine_banks`] carries one [`BankBlock`] per member.
/// Because each member block is rescaled by `sqrt(D_j / ΣD)`, every feature of
/// a combined bank shares the same amplitude `sqrt(2 / ΣD)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBank {
    blocks: Vec<BankBlock>,
    input_dim: usize,
    frequencies: Array2<f32>,
    phases: Array1<f32>,
}

/// Largest f32 strictly below 2π when rounding would land on or above it.
fn phase_to_f32(phase: f64) -> f32 {
    let mut b = phase as f32;
    while f64::from(b) >= TAU {
        b = f32::from_bits(b.to_bits() - 1);
    }
    b
}

/// Round to f32 without letting the magnitude exceed `amplitude`.
fn clamp_to_amplitude(v: f64, amplitude: f64) -> f32 {
    let f = v as f32;
    if f64::from(f).abs() > amplitude {
        f32::from_bits(f.to_bits() - 1)
    } else {
        f
    }
}

/// Draw a bank for `spec`. Ω is filled row-major first, then `b`, all from one
/// seeded ChaCha stream.
pub fn sample_projection_bank(
    spec: KernelSpec,
    input_dim: usize,
    num_features: usize,
    seed: u64,
) -> Result<ProjectionBank> {
    if input_dim == 0 || num_features == 0 {
        return Err(Error::InvalidParameter(format!(
            "bank dimensions must be positive (input_dim={input_dim}, num_features={num_features})"
        )));
    }
    if u32::try_from(input_dim).is_err() || u32::try_from(num_features).is_err() {
        return Err(Error::InvalidParameter("bank dimensions exceed u32".into()));
    }
    let mut rng = rng::seeded(seed, Stream::Bank);
    let mut frequencies = Array2::<f32>::zeros((num_features, input_dim));
    for w in frequencies.iter_mut() {
        *w = spec.sample_frequency(&mut rng) as f32;
    }
    let phases = (0..num_features)
        .map(|_| phase_to_f32(rng.gen::<f64>() * TAU))
        .collect::<Array1<f32>>();
    Ok(ProjectionBank {
        blocks: vec![BankBlock {
            spec,
            num_features,
            seed,
        }],
        input_dim,
        frequencies,
        phases,
    })
}

/// Concatenate banks into one map approximating the uniform average of the
/// member kernels.
pub fn combine_banks(banks: &[ProjectionBank]) -> Result<ProjectionBank> {
    let first = banks
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot combine an empty list of banks".into()))?;
    for bank in banks {
        if bank.input_dim != first.input_dim {
            return Err(Error::DimensionMismatch {
                expected: first.input_dim,
                actual: bank.input_dim,
            });
        }
    }
    let blocks = banks.iter().flat_map(|b| b.blocks.iter().copied()).collect();
    let freq_views: Vec<_> = banks.iter().map(|b| b.frequencies.view()).collect();
    let phase_views: Vec<_> = banks.iter().map(|b| b.phases.view()).collect();
    Ok(ProjectionBank {
        blocks,
        input_dim: first.input_dim,
        frequencies: concatenate(Axis(0), &freq_views)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?,
        phases: concatenate(Axis(0), &phase_views)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?,
    })
}

impl ProjectionBank {
    /// Rebuild a bank from block provenance alone by resampling every block.
    pub fn reconstruct(blocks: &[BankBlock], input_dim: usize) -> Result<Self> {
        let banks = blocks
            .iter()
            .map(|b| sample_projection_bank(b.spec, input_dim, b.num_features, b.seed))
            .collect::<Result<Vec<_>>>()?;
        if banks.len() == 1 {
            Ok(banks.into_iter().next().expect("one bank"))
        } else {
            combine_banks(&banks)
        }
    }

    pub fn blocks(&self) -> &[BankBlock] {
        &self.blocks
    }

    /// Kernel spec of the first block; the only one for a non-combined bank.
    pub fn spec(&self) -> KernelSpec {
        self.blocks[0].spec
    }

    pub fn seed(&self) -> u64 {
        self.blocks[0].seed
    }

    pub fn is_combined(&self) -> bool {
        self.blocks.len() > 1
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_features(&self) -> usize {
        self.phases.len()
    }

    pub fn frequencies(&self) -> ArrayView2<'_, f32> {
        self.frequencies.view()
    }

    pub fn phases(&self) -> ArrayView1<'_, f32> {
        self.phases.view()
    }

    /// Common amplitude `sqrt(2 / D)` of every feature.
    pub fn amplitude(&self) -> f64 {
        (2.0 / self.num_features() as f64).sqrt()
    }

    /// Build a bank from explicit parameters. Used for hand-constructed maps in tests
    /// and tools; `spec` and `seed` are recorded as provenance only.
    pub fn from_parts(
        spec: KernelSpec,
        seed: u64,
        frequencies: Array2<f32>,
        phases: Array1<f32>,
    ) -> Result<Self> {
        let (rows, input_dim) = frequencies.dim();
        if rows != phases.len() {
            return Err(Error::DimensionMismatch {
                expected: rows,
                actual: phases.len(),
            });
        }
        if rows == 0 || input_dim == 0 {
            return Err(Error::InvalidParameter("empty bank".into()));
        }
        if phases.iter().any(|&b| !(0.0..TAU).contains(&f64::from(b))) {
            return Err(Error::InvalidParameter("phase outside [0, 2π)".into()));
        }
        if frequencies.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("frequencies"));
        }
        Ok(Self {
            blocks: vec![BankBlock {
                spec,
                num_features: rows,
                seed,
            }],
            input_dim,
            frequencies,
            phases,
        })
    }

    fn map_into<T: Copy + Into<f64>>(&self, x: ArrayView1<'_, T>, out: ndarray::ArrayViewMut1<'_, f32>) {
        let amplitude = self.amplitude();
        Zip::from(out)
            .and(self.frequencies.rows())
            .and(&self.phases)
            .for_each(|o, omega, &b| {
                let mut acc = f64::from(b);
                for (&w, &xj) in omega.iter().zip(x.iter()) {
                    acc += f64::from(w) * xj.into();
                }
                *o = clamp_to_amplitude(amplitude * acc.cos(), amplitude);
            });
    }

    /// `φ(x)` for one input vector.
    pub fn feature_map<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<Array1<f32>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        let mut out = Array1::<f32>::zeros(self.num_features());
        self.map_into(ArrayView1::from(x), out.view_mut());
        Ok(out)
    }

    /// Row-wise `φ` of an `N × d` matrix; rows are computed in parallel and
    /// are bit-identical to [`ProjectionBank::feature_map`].
    pub fn feature_map_batch<T>(&self, xs: ArrayView2<'_, T>) -> Result<Array2<f32>>
    where
        T: Copy + Into<f64> + Send + Sync,
    {
        if xs.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: xs.ncols(),
            });
        }
        let mut out = Array2::<f32>::zeros((xs.nrows(), self.num_features()));
        Zip::from(out.rows_mut())
            .and(xs.rows())
            .par_for_each(|o, x| self.map_into(x, o));
        Ok(out)
    }

    /// Serialize to the `.rffb` layout (little-endian):
    ///
    /// ```text
    /// version 1: "RFFB" u32=1 family:u8 σ:f64 d:u32 D:u32 seed:u64 Ω:f32[D·d] b:f32[D]
    /// version 2: "RFFB" u32=2 d:u32 blocks:u32 {family:u8 σ:f64 D:u32 seed:u64}* Ω b
    /// ```
    ///
    /// Version 2 is written only for combined banks.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BANK_MAGIC.as_bytes())?;
        if let [block] = self.blocks.as_slice() {
            w.write_u32::<LittleEndian>(BANK_VERSION_SINGLE)?;
            w.write_u8(block.spec.family.code())?;
            w.write_f64::<LittleEndian>(block.spec.bandwidth)?;
            w.write_u32::<LittleEndian>(self.input_dim as u32)?;
            w.write_u32::<LittleEndian>(block.num_features as u32)?;
            w.write_u64::<LittleEndian>(block.seed)?;
        } else {
            w.write_u32::<LittleEndian>(BANK_VERSION_COMBINED)?;
            w.write_u32::<LittleEndian>(self.input_dim as u32)?;
            w.write_u32::<LittleEndian>(self.blocks.len() as u32)?;
            for block in &self.blocks {
                w.write_u8(block.spec.family.code())?;
                w.write_f64::<LittleEndian>(block.spec.bandwidth)?;
                w.write_u32::<LittleEndian>(block.num_features as u32)?;
                w.write_u64::<LittleEndian>(block.seed)?;
            }
        }
        binio::write_f32s(w, self.frequencies.iter().copied())?;
        binio::write_f32s(w, self.phases.iter().copied())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, BANK_MAGIC)?;
        let version = binio::read_u32(r, "version")?;
        let (input_dim, blocks) = match version {
            BANK_VERSION_SINGLE => {
                let family = KernelFamily::from_code(binio::read_u8(r, "family")?)?;
                let sigma = binio::read_f64(r, "bandwidth")?;
                let d = binio::read_u32(r, "input_dim")? as usize;
                let n = binio::read_u32(r, "num_features")? as usize;
                let seed = binio::read_u64(r, "seed")?;
                (
                    d,
                    vec![BankBlock {
                        spec: KernelSpec::new(family, sigma)?,
                        num_features: n,
                        seed,
                    }],
                )
            }
            BANK_VERSION_COMBINED => {
                let d = binio::read_u32(r, "input_dim")? as usize;
                let count = binio::read_u32(r, "block count")? as usize;
                let mut blocks = Vec::with_capacity(count);
                for _ in 0..count {
                    let family = KernelFamily::from_code(binio::read_u8(r, "family")?)?;
                    let sigma = binio::read_f64(r, "bandwidth")?;
                    let n = binio::read_u32(r, "num_features")? as usize;
                    let seed = binio::read_u64(r, "seed")?;
                    blocks.push(BankBlock {
                        spec: KernelSpec::new(family, sigma)?,
                        num_features: n,
                        seed,
                    });
                }
                (d, blocks)
            }
            other => return Err(Error::UnsupportedVersion(other)),
        };
        let total: usize = blocks.iter().map(|b| b.num_features).sum();
        if input_dim == 0 || total == 0 {
            return Err(Error::InvalidParameter("empty bank".into()));
        }
        let omega = binio::read_f32_vec(r, total * input_dim, "frequencies")?;
        let phases = binio::read_f32_vec(r, total, "phases")?;
        let frequencies = Array2::from_shape_vec((total, input_dim), omega)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        if phases.iter().any(|&b| !(0.0..TAU).contains(&f64::from(b))) {
            return Err(Error::InvalidParameter("phase outside [0, 2π)".into()));
        }
        Ok(Self {
            blocks,
            input_dim,
            frequencies,
            phases: Array1::from(phases),
        })
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

/// `φ(x)ᵀφ(z)` accumulated in f64.
pub fn feature_dot(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&p, &q)| f64::from(p) * f64::from(q))
        .sum()
}

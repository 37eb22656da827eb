//! Frame datasets: file formats, splitting, the bandwidth heuristic and
//! synthetic generators.
//!
//! Labels are 1-based in every file and 0-based in memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const FRDS_MAGIC: &str = "FRDS";
const FRDS_VERSION: u32 = 1;

/// Default number of frames sampled by [`median_pairwise_distance`].
pub const DEFAULT_MEDIAN_SUBSAMPLE: usize = 2_000;

/// Dense feature rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset {
    features: Array2<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl FrameDataset {
    /// `labels` are 0-based.
    pub fn new(features: Array2<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidParameter("features have zero columns".into()));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label: label + 1, num_classes });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn frame(&self, i: usize) -> (ArrayView1<'_, f32>, usize) {
        (self.features.row(i), self.labels[i])
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> FrameDataset {
        FrameDataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Write the `.frds` layout (little-endian):
    /// `"FRDS" version:u32 N:u64 d:u32 C:u32 features:f32[N·d] labels:u32[N]`,
    /// labels 1-based.
    pub fn write_frds<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FRDS_MAGIC.as_bytes())?;
        w.write_u32::<LittleEndian>(FRDS_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)?;
        binio::write_f32s(w, self.features.iter().copied())?;
        for &y in &self.labels {
            w.write_u32::<LittleEndian>(y as u32 + 1)?;
        }
        Ok(())
    }

    pub fn read_frds<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, FRDS_MAGIC)?;
        Self::read_frds_body(r)
    }

    fn read_frds_body<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_u32(r, "version")?;
        if version != FRDS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = binio::read_u64(r, "frame count")? as usize;
        let d = binio::read_u32(r, "dim")? as usize;
        let c = binio::read_u32(r, "num_classes")? as usize;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let features = binio::read_f32_vec(r, n * d, "features")?;
        let raw = binio::read_u32_vec(r, n, "labels")?;
        let mut labels = Vec::with_capacity(n);
        for (row, &y) in raw.iter().enumerate() {
            if y == 0 || y as usize > c {
                return Err(Error::Parse {
                    path: "<frds>".into(),
                    row: row + 1,
                    message: format!("label {y} outside 1..={c}"),
                });
            }
            labels.push(y as usize - 1);
        }
        let features = Array2::from_shape_vec((n, d), features)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Self::new(features, labels, c)
    }

    pub fn save_frds(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_frds(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// CSV with a header row: `d` feature columns, then the 1-based label.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_io)?;
        for (row, &y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push((y + 1).to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidParameter(format!("csv: {other:?}")),
    }
}

/// Load a `.frds` file, or a CSV file if the magic bytes are absent.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FrameDataset> {
    load_dataset_with_classes(path, None)
}

/// Like [`load_dataset`]; for CSV input `num_classes` fixes C, otherwise C is
/// the largest label seen. Ignored for `.frds`, whose header carries C.
pub fn load_dataset_with_classes(
    path: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<FrameDataset> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    let got = read_up_to(&mut r, &mut magic)?;
    if got == 4 && magic == FRDS_MAGIC.as_bytes() {
        return FrameDataset::read_frds_body(&mut r).map_err(|e| match e {
            Error::Parse { row, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                row,
                message,
            },
            other => other,
        });
    }
    load_csv(path, num_classes)
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            k => filled += k,
        }
    }
    Ok(filled)
}

fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<FrameDataset> {
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let width = reader.headers().map_err(csv_io)?.len();
    if width < 2 {
        return Err(parse_err(0, "need at least one feature column and a label column".into()));
    }
    let dim = width - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row numbers count data rows from 1; the header is row 0.
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(row, format!("expected {width} fields, got {}", record.len())));
        }
        for field in record.iter().take(dim) {
            let v: f32 = field
                .parse()
                .map_err(|_| parse_err(row, format!("bad feature value {field:?}")))?;
            features.push(v);
        }
        let label_field = &record[dim];
        let label: usize = label_field
            .parse()
            .map_err(|_| parse_err(row, format!("bad label {label_field:?}")))?;
        if label == 0 {
            return Err(parse_err(row, "labels are 1-based; got 0".into()));
        }
        if let Some(c) = num_classes {
            if label > c {
                return Err(parse_err(row, format!("label {label} outside 1..={c}")));
            }
        }
        labels.push(label - 1);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    let features = Array2::from_shape_vec((labels.len(), dim), features)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    FrameDataset::new(features, labels, c)
}

/// Seeded shuffle, then the first `ceil(N·fraction)` frames become held-out.
pub fn split_heldout(
    dataset: &FrameDataset,
    fraction: f64,
    seed: u64,
) -> Result<(FrameDataset, FrameDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "held-out fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    // The small slack keeps products such as 10 × 0.1 from rounding up to 2.
    let held = ((n as f64 * fraction) - 1e-9).ceil().max(0.0) as usize;
    if held == 0 || held >= n {
        return Err(Error::InvalidParameter(format!(
            "fraction {fraction} of {n} frames leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed, Stream::Split));
    let (heldout, train) = order.split_at(held);
    Ok((dataset.select(train), dataset.select(heldout)))
}

/// Median Euclidean distance over all pairs of a seeded subsample of at most
/// `subsample` frames. With `subsample >= N` every frame is used.
pub fn median_pairwise_distance(dataset: &FrameDataset, subsample: usize, seed: u64) -> Result<f64> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "median pairwise distance needs at least 2 frames, got {n}"
        )));
    }
    if subsample < 2 {
        return Err(Error::InvalidParameter("subsample must be at least 2".into()));
    }
    let rows: Vec<usize> = if subsample >= n {
        (0..n).collect()
    } else {
        index::sample(&mut rng::seeded(seed, Stream::Subsample), n, subsample).into_vec()
    };
    let x = dataset.features();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let sq: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
                .sum();
            dists.push(sq.sqrt());
        }
    }
    Ok(median(&mut dists))
}

/// Median of a non-empty slice; mean of the two middle values for even length.
fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Two classes on circles of radius `inner_radius` and `outer_radius`,
    /// with Gaussian radial noise of std `noise`. Always 2-D.
    ConcentricCircles,
    /// `num_classes` isotropic Gaussians with std `noise`, means drawn from
    /// Normal(0, mean_spread²) per coordinate. Uniform class prior.
    GaussianMixture,
    /// A Gaussian mixture where each label is, with probability `flip`,
    /// replaced by a uniformly drawn class.
    NoisyLabels,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub num_frames: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub noise: f64,
    pub mean_spread: f64,
    pub flip: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_frames: 1_000,
            num_classes: 2,
            dim: 2,
            inner_radius: 1.0,
            outer_radius: 2.0,
            noise: 0.1,
            mean_spread: 3.0,
            flip: 0.0,
        }
    }
}

impl SynthParams {
    fn validate(&self, kind: SynthKind) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.num_frames == 0 {
            return bad("num_frames must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        match kind {
            SynthKind::ConcentricCircles => {
                if self.num_classes != 2 || self.dim != 2 {
                    return bad("concentric circles are 2-class and 2-D");
                }
                if !(0.0 <= self.inner_radius && self.inner_radius < self.outer_radius) {
                    return bad("need 0 <= inner_radius < outer_radius");
                }
            }
            SynthKind::GaussianMixture | SynthKind::NoisyLabels => {
                if self.num_classes < 2 || self.dim == 0 {
                    return bad("mixture needs >= 2 classes and dim >= 1");
                }
                if !(self.mean_spread > 0.0 && self.mean_spread.is_finite()) {
                    return bad("mean_spread must be positive");
                }
            }
        }
        if kind == SynthKind::NoisyLabels && !(0.0..=1.0).contains(&self.flip) {
            return bad("flip must be in [0, 1]");
        }
        Ok(())
    }
}

/// Generate a synthetic dataset. Deterministic per `(kind, params, seed)`.
pub fn synth_dataset(kind: SynthKind, params: &SynthParams, seed: u64) -> Result<FrameDataset> {
    params.validate(kind)?;
    let n = params.num_frames;
    let mut rng = rng::seeded(seed, Stream::Synth);
    match kind {
        SynthKind::ConcentricCircles => {
            let mut features = Array2::zeros((n, 2));
            let mut labels = Vec::with_capacity(n);
            for mut row in features.rows_mut() {
                let y: usize = rng.gen_range(0..2);
                let angle = rng.gen::<f64>() * std::f64::consts::TAU;
                let z: f64 = rng.sample(StandardNormal);
                let base = if y == 0 { params.inner_radius } else { params.outer_radius };
                let r = base + params.noise * z;
                row[0] = (r * angle.cos()) as f32;
                row[1] = (r * angle.sin()) as f32;
                labels.push(y);
            }
            FrameDataset::new(features, labels, 2)
        }
        SynthKind::GaussianMixture | SynthKind::NoisyLabels => {
            let means = draw_means(params, &mut rng);
            let mut features = Array2::zeros((n, params.dim));
            let mut labels = Vec::with_capacity(n);
            for mut row in features.rows_mut() {
                let y = rng.gen_range(0..params.num_classes);
                for (v, &mu) in row.iter_mut().zip(means.row(y)) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (mu + params.noise * z) as f32;
                }
                labels.push(y);
            }
            if kind == SynthKind::NoisyLabels && params.flip > 0.0 {
                let mut flips = rng::seeded(seed, Stream::LabelFlip);
                for y in labels.iter_mut() {
                    if flips.gen::<f64>() < params.flip {
                        *y = flips.gen_range(0..params.num_classes);
                    }
                }
            }
            FrameDataset::new(features, labels, params.num_classes)
        }
    }
}

fn draw_means<R: Rng>(params: &SynthParams, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((params.num_classes, params.dim), |_| {
        params.mean_spread * rng.sample::<f64, _>(StandardNormal)
    })
}

/// The exact generating distribution of a mixture dataset, usable as a
/// Bayes-optimal classifier.
#[derive(Debug, Clone)]
pub struct MixtureOracle {
    means: Array2<f64>,
    noise: f64,
    flip: f64,
}

impl MixtureOracle {
    /// Recover the mixture behind `synth_dataset(kind, params, seed)`.
    pub fn new(kind: SynthKind, params: &SynthParams, seed: u64) -> Result<Self> {
        params.validate(kind)?;
        if kind == SynthKind::ConcentricCircles {
            return Err(Error::InvalidParameter("circles have no mixture oracle".into()));
        }
        if params.noise <= 0.0 {
            return Err(Error::InvalidParameter("oracle needs noise > 0".into()));
        }
        let means = draw_means(params, &mut rng::seeded(seed, Stream::Synth));
        Ok(Self {
            means,
            noise: params.noise,
            flip: if kind == SynthKind::NoisyLabels { params.flip } else { 0.0 },
        })
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    /// Exact posterior over observed labels, including the label flips.
    pub fn posterior(&self, x: ArrayView1<'_, f32>) -> Array1<f64> {
        let c = self.means.nrows();
        let log_lik: Array1<f64> = self
            .means
            .rows()
            .into_iter()
            .map(|mu| {
                let sq: f64 = mu
                    .iter()
                    .zip(x.iter())
                    .map(|(&m, &v)| (f64::from(v) - m).powi(2))
                    .sum();
                -sq / (2.0 * self.noise * self.noise)
            })
            .collect();
        let max = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = log_lik.mapv(|l| (l - max).exp());
        let s = p.sum();
        p /= s;
        p.mapv(|q| (1.0 - self.flip) * q + self.flip / c as f64)
    }

    /// Bayes decision; ties go to the lowest class index.
    pub fn classify(&self, x: ArrayView1<'_, f32>) -> usize {
        crate::model::argmax(self.posterior(x).view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> FrameDataset {
        FrameDataset::new(
            array![[0.0f32, 1.5], [-2.25, 3.0], [1e-8, -7.0]],
            vec![0, 2, 1],
            3,
        )
        .unwrap()
    }

    #[test]
    fn frds_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.frds");
        let ds = synth_dataset(
            SynthKind::GaussianMixture,
            &SynthParams { num_frames: 57, num_classes: 4, dim: 3, ..Default::default() },
            5,
        )
        .unwrap();
        ds.save_frds(&path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let a: Vec<u32> = ds.features().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.features().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn frds_header_layout() {
        let mut buf = Vec::new();
        tiny().write_frds(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FRDS");
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 4 + 3 * 2 * 4 + 3 * 4);
        // First label is written 1-based.
        let first_label = u32::from_le_bytes(buf[buf.len() - 12..buf.len() - 8].try_into().unwrap());
        assert_eq!(first_label, 1);
    }

    #[test]
    fn frds_errors_are_distinct() {
        let mut buf = Vec::new();
        tiny().write_frds(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            FrameDataset::read_frds(&mut bad_magic.as_slice()),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = buf.clone();
        bad_version[4] = 7;
        assert!(matches!(
            FrameDataset::read_frds(&mut bad_version.as_slice()),
            Err(Error::UnsupportedVersion(7))
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            FrameDataset::read_frds(&mut &truncated[..]),
            Err(Error::Truncated(_))
        ));

        let mut bad_label = buf.clone();
        let at = bad_label.len() - 4;
        bad_label[at] = 9;
        assert!(matches!(
            FrameDataset::read_frds(&mut bad_label.as_slice()),
            Err(Error::Parse { row: 3, .. })
        ));

        let mut empty = Vec::new();
        empty.extend_from_slice(b"FRDS");
        empty.extend_from_slice(&1u32.to_le_bytes());
        empty.extend_from_slice(&0u64.to_le_bytes());
        empty.extend_from_slice(&2u32.to_le_bytes());
        empty.extend_from_slice(&3u32.to_le_bytes());
        let err = FrameDataset::read_frds(&mut empty.as_slice()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = tiny();
        ds.save_csv(&path).unwrap();
        assert_eq!(load_dataset_with_classes(&path, Some(3)).unwrap(), ds);
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let bad = dir.path().join("bad.csv");
        let mut f = File::create(&bad).unwrap();
        writeln!(f, "a,b,label\n0.1,0.2,1\n0.3,0.4,4\n").unwrap();
        drop(f);
        let err = load_dataset_with_classes(&bad, Some(3)).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        assert!(err.to_string().contains("row 2"));

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "a,label\n").unwrap();
        assert!(matches!(load_dataset(&empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = synth_dataset(
            SynthKind::GaussianMixture,
            &SynthParams { num_frames: 10, num_classes: 3, dim: 2, ..Default::default() },
            1,
        )
        .unwrap();
        let (train, held) = split_heldout(&ds, 0.1, 4).unwrap();
        assert_eq!((train.len(), held.len()), (9, 1));

        let mut union: Vec<(Vec<u32>, usize)> = train
            .features()
            .rows()
            .into_iter()
            .zip(train.labels())
            .chain(held.features().rows().into_iter().zip(held.labels()))
            .map(|(r, &y)| (r.iter().map(|v| v.to_bits()).collect(), y))
            .collect();
        let mut orig: Vec<(Vec<u32>, usize)> = ds
            .features()
            .rows()
            .into_iter()
            .zip(ds.labels())
            .map(|(r, &y)| (r.iter().map(|v| v.to_bits()).collect(), y))
            .collect();
        union.sort();
        orig.sort();
        assert_eq!(union, orig);

        assert_eq!(split_heldout(&ds, 0.3, 4).unwrap(), split_heldout(&ds, 0.3, 4).unwrap());
        assert_ne!(split_heldout(&ds, 0.3, 4).unwrap(), split_heldout(&ds, 0.3, 5).unwrap());
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let ds = tiny();
        assert!(split_heldout(&ds, 0.0, 1).is_err());
        assert!(split_heldout(&ds, 1.0, 1).is_err());
        assert!(split_heldout(&ds, 0.99, 1).is_err());
    }

    #[test]
    fn median_distance_examples() {
        let two = FrameDataset::new(array![[0.0f32, 0.0], [3.0, 0.0]], vec![0, 1], 2).unwrap();
        assert_eq!(median_pairwise_distance(&two, 2_000, 0).unwrap(), 3.0);

        let three = FrameDataset::new(array![[0.0f32], [1.0], [3.0]], vec![0, 1, 0], 2).unwrap();
        assert_eq!(median_pairwise_distance(&three, 2_000, 0).unwrap(), 2.0);

        let four = FrameDataset::new(array![[0.0f32], [1.0], [3.0], [7.0]], vec![0, 1, 0, 1], 2).unwrap();
        // distances {1, 3, 7, 2, 6, 4}: middle two are 3 and 4
        assert_eq!(median_pairwise_distance(&four, 10, 0).unwrap(), 3.5);

        let one = FrameDataset::new(array![[0.0f32]], vec![0], 2).unwrap();
        assert!(median_pairwise_distance(&one, 10, 0).is_err());
    }

    #[test]
    fn median_distance_exact_subsample_is_permutation_invariant() {
        let ds = synth_dataset(
            SynthKind::GaussianMixture,
            &SynthParams { num_frames: 60, num_classes: 3, dim: 4, ..Default::default() },
            8,
        )
        .unwrap();
        let full = median_pairwise_distance(&ds, 60, 1).unwrap();
        let mut order: Vec<usize> = (0..60).rev().collect();
        order.rotate_left(17);
        assert_eq!(median_pairwise_distance(&ds.select(&order), 1_000, 2).unwrap(), full);
        let sub = median_pairwise_distance(&ds, 30, 3).unwrap();
        assert_eq!(sub, median_pairwise_distance(&ds, 30, 3).unwrap());
    }

    #[test]
    fn circles_without_noise_split_by_radius() {
        let params = SynthParams { num_frames: 500, noise: 0.0, ..Default::default() };
        let ds = synth_dataset(SynthKind::ConcentricCircles, &params, 3).unwrap();
        for i in 0..ds.len() {
            let (x, y) = ds.frame(i);
            let r = (f64::from(x[0]).powi(2) + f64::from(x[1]).powi(2)).sqrt();
            assert_eq!(usize::from(r > 1.5), y);
        }
    }

    #[test]
    fn noisy_labels_without_flips_is_the_mixture() {
        let params = SynthParams { num_frames: 300, num_classes: 5, dim: 3, flip: 0.0, ..Default::default() };
        assert_eq!(
            synth_dataset(SynthKind::NoisyLabels, &params, 11).unwrap(),
            synth_dataset(SynthKind::GaussianMixture, &params, 11).unwrap()
        );
        let noisy = SynthParams { flip: 0.5, ..params };
        let a = synth_dataset(SynthKind::NoisyLabels, &noisy, 11).unwrap();
        let b = synth_dataset(SynthKind::GaussianMixture, &noisy, 11).unwrap();
        assert_eq!(a.features(), b.features());
        let changed = a.labels().iter().zip(b.labels()).filter(|(p, q)| p != q).count();
        // Expected fraction changed is 0.5 · 4/5 = 0.4.
        assert!((80..160).contains(&changed), "{changed}");
    }

    #[test]
    fn generators_are_deterministic_and_validated() {
        let p = SynthParams::default();
        assert_eq!(
            synth_dataset(SynthKind::ConcentricCircles, &p, 1).unwrap(),
            synth_dataset(SynthKind::ConcentricCircles, &p, 1).unwrap()
        );
        assert!(synth_dataset(SynthKind::ConcentricCircles, &SynthParams { dim: 3, ..p }, 1).is_err());
        assert!(synth_dataset(SynthKind::NoisyLabels, &SynthParams { flip: 1.5, ..p }, 1).is_err());
        assert!(synth_dataset(SynthKind::GaussianMixture, &SynthParams { num_frames: 0, ..p }, 1).is_err());
        assert!(synth_dataset(
            SynthKind::ConcentricCircles,
            &SynthParams { inner_radius: 2.0, outer_radius: 1.0, ..p },
            1
        )
        .is_err());
    }

    #[test]
    fn mixture_oracle_matches_generator() {
        let params = SynthParams { num_frames: 2_000, num_classes: 4, dim: 2, noise: 0.5, ..Default::default() };
        let ds = synth_dataset(SynthKind::GaussianMixture, &params, 21).unwrap();
        let oracle = MixtureOracle::new(SynthKind::GaussianMixture, &params, 21).unwrap();
        let correct = (0..ds.len())
            .filter(|&i| {
                let (x, y) = ds.frame(i);
                oracle.classify(x) == y
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.9);
        let p = oracle.posterior(ds.frame(0).0);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }
}

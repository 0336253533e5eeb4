//! Dataset ingestion, synthetic generation, and splits.
//!
//! Every ingestion path either produces values in [0, 1] or fails loudly —
//! there is no silent clamping. Image I/O uses binary PGM (P5) only: it is
//! trivially parseable and bit-exact, so any grayscale corpus converted to
//! PGM slots in. Odd feature counts can be zero-padded to the even width the
//! flow requires; the original width is recorded so outputs can be stripped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::rng::RngStream;
use crate::diffcore::tensor::Tensor;
use crate::error::CoreError;

/// A loaded or generated dataset: [n, d] values in [0, 1] plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    data: Tensor,
    /// (height, width) when samples are images.
    original_shape: Option<(usize, usize)>,
    /// Feature count before any zero-padding.
    original_dim: usize,
    /// Where the data came from: file path or generator spec.
    provenance: String,
}

impl Dataset {
    pub fn new(
        data: Tensor,
        original_shape: Option<(usize, usize)>,
        provenance: impl Into<String>,
    ) -> Result<Self, CoreError> {
        if data.ndim() != 2 {
            return Err(CoreError::contract("dataset needs an [n, d] matrix"));
        }
        if let Some(&bad) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::contract(format!(
                "dataset value {bad} outside [0, 1]"
            )));
        }
        if let Some((h, w)) = original_shape {
            if h * w != data.cols() {
                return Err(CoreError::contract(
                    "image shape does not match feature count",
                ));
            }
        }
        let original_dim = data.cols();
        Ok(Self {
            data,
            original_shape,
            original_dim,
            provenance: provenance.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn d(&self) -> usize {
        self.data.cols()
    }

    pub fn original_dim(&self) -> usize {
        self.original_dim
    }

    pub fn original_shape(&self) -> Option<(usize, usize)> {
        self.original_shape
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    /// Appends a zero column when d is odd (the coupling flow needs an even
    /// width); `original_dim` keeps the pre-padding width.
    pub fn padded_to_even(self) -> Dataset {
        if self.d() % 2 == 0 {
            return self;
        }
        let n = self.n();
        let d = self.d();
        let mut padded = Tensor::zeros(vec![n, d + 1]);
        for i in 0..n {
            padded.row_mut(i)[..d].copy_from_slice(self.data.row(i));
        }
        Dataset {
            data: padded,
            original_shape: self.original_shape,
            original_dim: self.original_dim,
            provenance: self.provenance,
        }
    }

    /// Drops any padding columns from a d-length vector.
    pub fn strip_padding<'a>(&self, row: &'a [f64]) -> &'a [f64] {
        &row[..self.original_dim.min(row.len())]
    }

    /// Seeded shuffle, then prefix split: disjoint and exhaustive.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), CoreError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(CoreError::contract(
                "train_fraction must lie strictly between 0 and 1",
            ));
        }
        let n = self.n();
        let mut rng = RngStream::new(seed);
        let perm = rng.permutation(n);
        let n_train = ((train_fraction * n as f64) + 0.5).floor() as usize;
        let n_train = n_train.min(n);
        let (train_idx, test_idx) = perm.split_at(n_train);
        let mk = |idx: &[usize], tag: &str| Dataset {
            data: self.data.select_rows(idx),
            original_shape: self.original_shape,
            original_dim: self.original_dim,
            provenance: format!("{}[{}]", self.provenance, tag),
        };
        Ok((mk(train_idx, "train"), mk(test_idx, "test")))
    }
}

// ---- PGM (P5) ---------------------------------------------------------

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> ByteCursor<'a> {
    fn err(&self, reason: impl Into<String>) -> CoreError {
        CoreError::PgmParse {
            path: self.path.to_string(),
            reason: reason.into(),
            offset: self.pos,
        }
    }

    fn next(&mut self) -> Option<u8> {
        let b = self.bytes.get(self.pos).copied();
        if b.is_some() {
            self.pos += 1;
        }
        b
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `#`-to-end-of-line comments.
    fn skip_separators(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => {
                    self.pos += 1;
                }
                Some(b'#') => {
                    while let Some(b) = self.next() {
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize, CoreError> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(b) = self.peek() {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| self.err(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        Ok(value)
    }
}

/// Loads a binary PGM (P5) image as a single-sample dataset, pixel values
/// divided by maxval.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Dataset, CoreError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| CoreError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut cur = ByteCursor {
        bytes: &bytes,
        pos: 0,
        path: &path_str,
    };

    if cur.next() != Some(b'P') || cur.next() != Some(b'5') {
        cur.pos = 0;
        return Err(cur.err("not a binary PGM (missing P5 magic)"));
    }
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.err(format!("maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match cur.next() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            return Err(cur.err("expected single whitespace before pixel data"));
        }
    }

    let pixels = width * height;
    let wide = maxval > 255;
    let needed = pixels * if wide { 2 } else { 1 };
    let available = bytes.len() - cur.pos;
    if available < needed {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "truncated payload: need {needed} pixel bytes, have {available}"
        )));
    }
    let mut data = Tensor::zeros(vec![1, pixels]);
    let row = data.row_mut(0);
    for (i, v) in row.iter_mut().enumerate() {
        let raw = if wide {
            let hi = bytes[cur.pos + 2 * i] as usize;
            let lo = bytes[cur.pos + 2 * i + 1] as usize;
            (hi << 8) | lo
        } else {
            bytes[cur.pos + i] as usize
        };
        if raw > maxval {
            cur.pos += if wide { 2 * i } else { i };
            return Err(cur.err(format!("pixel value {raw} exceeds maxval {maxval}")));
        }
        *v = raw as f64 / maxval as f64;
    }

    Dataset::new(data, Some((height, width)), path_str)
}

/// Writes one [0, 1] sample as a binary PGM (P5) image, quantizing with
/// round-half-up.
pub fn save_pgm(
    values: &[f64],
    height: usize,
    width: usize,
    maxval: usize,
    path: impl AsRef<Path>,
) -> Result<(), CoreError> {
    if values.len() != height * width {
        return Err(CoreError::LengthMismatch {
            context: "save_pgm",
            expected: height * width,
            actual: values.len(),
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(CoreError::contract("maxval must lie in 1..=65535"));
    }
    if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CoreError::contract(format!(
            "pixel value {bad} outside [0, 1]"
        )));
    }
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    for &v in values {
        let level = ((v * maxval as f64) + 0.5).floor() as usize;
        let level = level.min(maxval);
        if maxval > 255 {
            out.push((level >> 8) as u8);
            out.push((level & 0xFF) as u8);
        } else {
            out.push(level as u8);
        }
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|source| CoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---- CSV --------------------------------------------------------------

/// Loads a rectangular numeric CSV (one sample per row, `.` decimal, `,`
/// separator). `has_header` skips the first line. Values outside [0, 1] are
/// an error, never clamped.
pub fn load_csv_matrix(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset, CoreError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
        path: path_str.clone(),
        source,
    })?;
    let csv_err = |line: usize, reason: String| CoreError::CsvParse {
        path: path_str.clone(),
        line,
        reason,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if has_header && idx == 0 {
            continue;
        }
        let line = raw_line.trim();
        if line.is_empty() {
            // Allow a trailing blank line only.
            if text.lines().skip(idx + 1).any(|l| !l.trim().is_empty()) {
                return Err(csv_err(line_no, "empty line inside data".to_string()));
            }
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let cell = cell.trim();
            let value: f64 = cell
                .parse()
                .map_err(|_| csv_err(line_no, format!("non-numeric cell '{cell}'")))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(csv_err(line_no, format!("value {value} outside [0, 1]")));
            }
            row.push(value);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(csv_err(
                    line_no,
                    format!("ragged row: {} cells, expected {w}", row.len()),
                ));
            }
            _ => {}
        }
    rows.push(row);
    }
    let d = width.ok_or_else(|| csv_err(1, "no data rows".to_string()))?;
    let n = rows.len();
    let mut data = Tensor::zeros(vec![n, d]);
    for (i, row) in rows.into_iter().enumerate() {
        data.row_mut(i).copy_from_slice(&row);
    }
    Dataset::new(data, None, path_str)
}

/// Writes an [n, d] matrix as CSV using the shortest exact decimal form of
/// each value, so a read-back reproduces the numbers bit-for-bit.
pub fn save_csv_matrix(data: &Tensor, path: impl AsRef<Path>) -> Result<(), CoreError> {
    let mut out = String::new();
    for i in 0..data.rows() {
        let mut first = true;
        for v in data.row(i) {
            if !first {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
            first = false;
        }
        out.push('\n');
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|source| CoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---- synthetic manifolds ----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    /// Random sinusoidal features of a k-dimensional uniform latent.
    Sinusoidal,
    /// Square images that sum 1–3 Gaussian bumps.
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldSpec {
    pub n: usize,
    pub d: usize,
    /// Latent dimension k of the generating manifold.
    pub intrinsic_dim: usize,
    pub seed: u64,
    pub kind: ManifoldKind,
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        Self {
            n: 2048,
            d: 64,
            intrinsic_dim: 2,
            seed: 0,
            kind: ManifoldKind::Sinusoidal,
        }
    }
}

/// Where a run's data comes from: a generator spec or a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Manifold(ManifoldSpec),
    Csv {
        path: String,
        #[serde(default)]
        has_header: bool,
    },
    Pgm {
        path: String,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Manifold(ManifoldSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, CoreError> {
        match self {
            DataSource::Manifold(spec) => gen_manifold(spec),
            DataSource::Csv { path, has_header } => load_csv_matrix(path, *has_header),
            DataSource::Pgm { path } => load_pgm(path),
        }
    }
}

/// Generates a synthetic dataset lying on (or near) a k-dimensional
/// nonlinear manifold embedded in [0, 1]^d.
pub fn gen_manifold(spec: &ManifoldSpec) -> Result<Dataset, CoreError> {
    if spec.intrinsic_dim == 0 || spec.intrinsic_dim >= spec.d {
        return Err(CoreError::contract(
            "intrinsic_dim must satisfy 1 <= k < d",
        ));
    }
    if spec.n == 0 {
        return Err(CoreError::contract("need at least one sample"));
    }
    let provenance = format!(
        "{}(n={}, d={}, k={}, seed={})",
        match spec.kind {
            ManifoldKind::Sinusoidal => "sinusoidal",
            ManifoldKind::Blobs => "blobs",
        },
        spec.n,
        spec.d,
        spec.intrinsic_dim,
        spec.seed
    );
    let mut rng = RngStream::new(spec.seed);
    match spec.kind {
        ManifoldKind::Sinusoidal => {
            let k = spec.intrinsic_dim;
            // Fixed random frequencies and phases per output coordinate:
            // x_j = 0.5 + 0.5·sin(ω_j·u + φ_j) maps [0,1]^k into [0,1].
            let freqs: Vec<Vec<f64>> = (0..spec.d)
                .map(|_| (0..k).map(|_| rng.uniform(1.0, 6.0)).collect())
                .collect();
            let phases: Vec<f64> = (0..spec.d)
                .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
                .collect();
            let mut data = Tensor::zeros(vec![spec.n, spec.d]);
            for i in 0..spec.n {
                let u: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
                for (j, x) in data.row_mut(i).iter_mut().enumerate() {
                    let arg: f64 =
                        freqs[j].iter().zip(&u).map(|(w, ui)| w * ui).sum::<f64>() + phases[j];
                    *x = 0.5 + 0.5 * arg.sin();
                }
            }
            Dataset::new(data, None, provenance)
        }
        ManifoldKind::Blobs => {
            let side = (spec.d as f64).sqrt().round() as usize;
            if side * side != spec.d {
                return Err(CoreError::contract(
                    "blobs needs d to be a perfect square (h = w = sqrt(d))",
                ));
            }
            let mut data = Tensor::zeros(vec![spec.n, spec.d]);
            for i in 0..spec.n {
                let bumps = 1 + rng.next_below(3) as usize;
                let row = data.row_mut(i);
                for _ in 0..bumps {
                    let amp = rng.uniform(0.4, 0.9);
                    let cx = rng.uniform(0.0, side as f64);
                    let cy = rng.uniform(0.0, side as f64);
                    let sigma = rng.uniform(side as f64 / 8.0, side as f64 / 3.0);
                    for y in 0..side {
                        for x in 0..side {
                            let dx = x as f64 + 0.5 - cx;
                            let dy = y as f64 + 0.5 - cy;
                            row[y * side + x] +=
                                amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
                for v in row.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            Dataset::new(data, Some((side, side)), provenance)
        }
    }
}

//! Binary volume/sinogram files, 16-bit PGM export, and CSV tables.
//!
//! Both binary formats share a 12-byte preamble: a four-byte magic, then the
//! format version and dtype tag as little-endian `u32`. All integers and
//! floats are little-endian; payloads are row-major with the last axis
//! fastest.
//!
//! ```text
//! volume:   "MORE" ver dtype C H W                        f32[C*H*W]
//! sinogram: "SINO" ver dtype C views det H W f64[views]   f32[C*views*det]
//! ```

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use gift_core::grid::ProjectionGeometry;
use gift_core::optimizer::TracePoint;
use gift_core::{CoreError, Sinogram, VolumeGrid};
use thiserror::Error;

pub const VOLUME_MAGIC: [u8; 4] = *b"MORE";
pub const SINOGRAM_MAGIC: [u8; 4] = *b"SINO";
pub const FORMAT_VERSION: u32 = 1;
/// Dtype tag for little-endian IEEE binary32.
pub const DTYPE_F32_LE: u32 = 1;

const VOLUME_HEADER_LEN: usize = 24;
const SINOGRAM_FIXED_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u32),
    #[error("truncated header: need {needed} bytes, have {found}")]
    TruncatedHeader { needed: usize, found: usize },
    #[error("truncated payload: need {needed} bytes, have {found}")]
    TruncatedPayload { needed: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("dimension {0} does not fit in the header")]
    DimensionOverflow(usize),
    #[error("invalid contents: {0}")]
    Invalid(#[from] CoreError),
}

impl FormatError {
    fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io { path: path.to_path_buf(), source }
    }
}

/// A sinogram file: the measurements plus the geometry they were taken with.
#[derive(Debug, Clone, PartialEq)]
pub struct SinogramFile {
    pub sinogram: Sinogram,
    pub geometry: ProjectionGeometry,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn dim_u32(n: usize) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::DimensionOverflow(n))
}

fn check_preamble(bytes: &[u8], magic: [u8; 4], header_len: usize) -> Result<(), FormatError> {
    if bytes.len() >= 4 {
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
    }
    if bytes.len() < header_len {
        return Err(FormatError::TruncatedHeader { needed: header_len, found: bytes.len() });
    }
    let mut c = Cursor { buf: bytes, pos: 4 };
    let version = c.u32();
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dtype = c.u32();
    if dtype != DTYPE_F32_LE {
        return Err(FormatError::UnsupportedDtype(dtype));
    }
    Ok(())
}

fn put_preamble(out: &mut Vec<u8>, magic: [u8; 4]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
}

fn put_payload(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn take_payload(c: &mut Cursor<'_>, count: usize) -> Result<Vec<f64>, FormatError> {
    let needed = count.checked_mul(4).ok_or(FormatError::DimensionOverflow(count))?;
    let found = c.remaining();
    if found < needed {
        return Err(FormatError::TruncatedPayload { needed, found });
    }
    if found > needed {
        return Err(FormatError::TrailingBytes(found - needed));
    }
    Ok(c.take(needed).chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
}

/// Serializes a volume. Values are stored as `f32`, so only grids whose
/// samples are exactly representable in single precision round-trip bitwise.
pub fn encode_volume(grid: &VolumeGrid) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + grid.len() * 4);
    put_preamble(&mut out, VOLUME_MAGIC);
    for d in grid.dims() {
        out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    put_payload(&mut out, grid.data());
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeGrid, FormatError> {
    check_preamble(bytes, VOLUME_MAGIC, VOLUME_HEADER_LEN)?;
    let mut c = Cursor { buf: bytes, pos: 12 };
    let dims = [c.u32() as usize, c.u32() as usize, c.u32() as usize];
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(FormatError::DimensionOverflow(dims[0]))?;
    let data = take_payload(&mut c, count)?;
    Ok(VolumeGrid::from_vec(dims, data)?)
}

pub fn encode_sinogram(file: &SinogramFile) -> Result<Vec<u8>, FormatError> {
    let SinogramFile { sinogram, geometry } = file;
    geometry.check_sinogram(sinogram)?;
    let mut out = Vec::with_capacity(SINOGRAM_FIXED_HEADER_LEN + geometry.views() * 8 + sinogram.len() * 4);
    put_preamble(&mut out, SINOGRAM_MAGIC);
    let [h, w] = geometry.slice_dims();
    for d in [sinogram.slices(), sinogram.views(), sinogram.detectors(), h, w] {
        out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    for &a in geometry.angles() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    put_payload(&mut out, sinogram.data());
    Ok(out)
}

pub fn decode_sinogram(bytes: &[u8]) -> Result<SinogramFile, FormatError> {
    check_preamble(bytes, SINOGRAM_MAGIC, SINOGRAM_FIXED_HEADER_LEN)?;
    let mut c = Cursor { buf: bytes, pos: 12 };
    let slices = c.u32() as usize;
    let views = c.u32() as usize;
    let detectors = c.u32() as usize;
    let h = c.u32() as usize;
    let w = c.u32() as usize;
    let needed = SINOGRAM_FIXED_HEADER_LEN + views * 8;
    if bytes.len() < needed {
        return Err(FormatError::TruncatedHeader { needed, found: bytes.len() });
    }
    let angles: Vec<f64> = (0..views).map(|_| c.f64()).collect();
    let geometry = ProjectionGeometry::from_parts(angles, detectors, [h, w])?;
    let count = slices
        .checked_mul(views)
        .and_then(|n| n.checked_mul(detectors))
        .ok_or(FormatError::DimensionOverflow(slices))?;
    let data = take_payload(&mut c, count)?;
    let sinogram = Sinogram::from_vec(slices, views, detectors, data)?;
    Ok(SinogramFile { sinogram, geometry })
}

fn read_all(path: &Path) -> Result<Vec<u8>, FormatError> {
    let mut buf = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| FormatError::io(path, e))?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeGrid, FormatError> {
    decode_volume(&read_all(path.as_ref())?)
}

pub fn write_volume(path: impl AsRef<Path>, grid: &VolumeGrid) -> Result<(), FormatError> {
    write_all(path.as_ref(), &encode_volume(grid)?)
}

pub fn read_sinogram(path: impl AsRef<Path>) -> Result<SinogramFile, FormatError> {
    decode_sinogram(&read_all(path.as_ref())?)
}

pub fn write_sinogram(path: impl AsRef<Path>, file: &SinogramFile) -> Result<(), FormatError> {
    write_all(path.as_ref(), &encode_sinogram(file)?)
}

/// Intensity window mapped onto the 16-bit gray range.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Window {
    #[default]
    MinMax,
    Fixed { lo: f64, hi: f64 },
}

const PGM_MAX: u16 = u16::MAX;
const PGM_MID: u16 = 32768;

/// Encodes every slice of `grid` as a 16-bit binary PGM, slices stacked
/// top to bottom. A window with `hi <= lo` renders mid-gray.
pub fn encode_pgm(grid: &VolumeGrid, window: Window) -> Vec<u8> {
    let [c, h, w] = grid.dims();
    let (lo, hi) = match window {
        Window::MinMax => grid.min_max(),
        Window::Fixed { lo, hi } => (lo, hi),
    };
    let mut out = format!("P5\n{w} {}\n{PGM_MAX}\n", c * h).into_bytes();
    out.reserve(grid.len() * 2);
    for &v in grid.data() {
        let level = if hi > lo {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            (t * PGM_MAX as f64).round() as u16
        } else {
            PGM_MID
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, grid: &VolumeGrid, window: Window) -> Result<(), FormatError> {
    write_all(path.as_ref(), &encode_pgm(grid, window))
}

pub const METRICS_HEADER: [&str; 8] = ["method", "phantom", "views", "psnr_db", "ssim", "iters", "wall_seconds", "seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub phantom: String,
    pub views: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub iters: usize,
    pub wall_seconds: f64,
    pub seed: u64,
}

fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

impl MetricsRow {
    fn record(&self) -> [String; 8] {
        [
            self.method.clone(),
            self.phantom.clone(),
            self.views.to_string(),
            format_float(self.psnr_db),
            format_float(self.ssim),
            self.iters.to_string(),
            format!("{:.3}", self.wall_seconds),
            self.seed.to_string(),
        ]
    }
}

/// Appends rows to a metrics CSV, writing the header first when the file is
/// new or empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<(), FormatError> {
    let path = path.as_ref();
    let io = |e| FormatError::io(path, e);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let fresh = file.metadata().map_err(io)?.len() == 0;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| FormatError::io(path, e.into());
    if fresh {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    for row in rows {
        w.write_record(row.record()).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

pub const TRACE_HEADER: [&str; 5] = ["iteration", "loss", "l1", "ssim", "tv"];

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TracePoint]) -> Result<(), FormatError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| FormatError::io(path, e.into());
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for p in trace {
        w.write_record([
            p.iteration.to_string(),
            format_float(p.loss),
            format_float(p.l1),
            format_float(p.ssim),
            format_float(p.tv),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| FormatError::io(path, e.into_error()))?.flush().map_err(|e| FormatError::io(path, e))
}

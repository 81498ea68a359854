//! Binary tensor and mask files, observation sampling, netpbm import and run
//! reports.
//!
//! File layout (little-endian):
//!
//! ```text
//! "FCTN" | version u32 = 1 | element code u32 | order u32 | extents u64 × order | payload
//! ```
//!
//! Element code 1 is an `f64` payload, code 2 a one-byte `{0,1}` mask
//! payload. Payloads use the first-index-fastest linearization.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::QualityReport;
use crate::solver::{IterationRecord, Mask};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"FCTN";
pub const FORMAT_VERSION: u32 = 1;
pub const ELEMENT_F64: u32 = 1;
pub const ELEMENT_MASK: u32 = 2;

fn encode_header(code: u32, shape: &[usize], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out
}

pub fn encode_tensor(t: &DenseTensor) -> Vec<u8> {
    let mut out = encode_header(ELEMENT_F64, t.shape(), 8 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let mut out = encode_header(ELEMENT_MASK, m.shape(), m.bits().len());
    out.extend(m.bits().iter().map(|&b| b as u8));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Returns `(element code, shape, payload)`.
fn decode_header(bytes: &[u8]) -> Result<(u32, Vec<usize>, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not an FCTN tensor file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let code = r.u32()?;
    let order = r.u32()? as usize;
    if order == 0 {
        return Err(Error::Format("order must be ≥ 1".into()));
    }
    let shape = (0..order)
        .map(|_| {
            let e = r.u64()?;
            usize::try_from(e).ok().filter(|&e| e > 0).ok_or_else(|| Error::Format(format!("bad extent {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("extent product overflows".into()))?;
    let width = match code {
        ELEMENT_F64 => 8,
        ELEMENT_MASK => 1,
        other => return Err(Error::Format(format!("unknown element code {other}"))),
    };
    let payload = &bytes[r.pos..];
    if Some(payload.len()) != count.checked_mul(width) {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count.saturating_mul(width)
        )));
    }
    Ok((code, shape, payload))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DenseTensor> {
    let (code, shape, payload) = decode_header(bytes)?;
    if code != ELEMENT_F64 {
        return Err(Error::Format(format!("expected a real tensor (code 1), got code {code}")));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseTensor::new(shape, data)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let (code, shape, payload) = decode_header(bytes)?;
    if code != ELEMENT_MASK {
        return Err(Error::Format(format!("expected a mask (code 2), got code {code}")));
    }
    let bits = payload
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask entry {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(shape, bits)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn write_tensor(path: &Path, t: &DenseTensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_atomic(path, &encode_mask(m))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path)?)
}

/// Exactly `round(sr · ∏shape)` entries set, drawn uniformly without
/// replacement from a generator seeded with `seed`.
pub fn sample_mask(shape: &[usize], sr: f64, seed: u64) -> Result<Mask> {
    if !(sr > 0.0 && sr <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate must lie in (0,1], got {sr}")));
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(format!("mask shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    let count = ((sr * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, count) {
        bits[i] = true;
    }
    Mask::new(shape.to_vec(), bits)
}

/// A decoded netpbm image, values scaled to `[0, 1]` by `maxval`.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved, as stored in the file.
    pub samples: Vec<f64>,
}

impl PnmImage {
    pub fn sample(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.samples[(row * self.width + col) * self.channels + channel]
    }
}

/// Parses P2/P3 (ASCII) and P5/P6 (binary) images.
pub fn parse_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("unexpected end of netpbm data".into()));
        }
        Ok(&bytes[start..pos])
    };
    let number = |t: &[u8]| -> Result<usize> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad netpbm number {:?}", String::from_utf8_lossy(t))))
    };

    let magic = token()?.to_vec();
    let (channels, binary) = match magic.as_slice() {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        other => {
            return Err(Error::Format(format!(
                "unsupported netpbm magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = number(token()?)?;
    let height = number(token()?)?;
    let maxval = number(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad netpbm header {width}×{height}, maxval {maxval}")));
    }
    let count = width * height * channels;
    let scale = 1.0 / maxval as f64;
    let raw: Vec<usize> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let width_bytes = if maxval > 255 { 2 } else { 1 };
        let raster = bytes
            .get(start..start + count * width_bytes)
            .ok_or_else(|| Error::Format("truncated netpbm raster".into()))?;
        if width_bytes == 1 {
            raster.iter().map(|&b| b as usize).collect()
        } else {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize).collect()
        }
    } else {
        (0..count).map(|_| token().and_then(number)).collect::<Result<_>>()?
    };
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(Error::Format(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        samples: raw.into_iter().map(|v| v as f64 * scale).collect(),
    })
}

/// Stacks every `.pgm`/`.ppm`/`.pnm` file of `dir` (sorted by file name)
/// into a `height × width × channels × frames` tensor.
pub fn import_frames(dir: &Path) -> Result<DenseTensor> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
    });
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no netpbm frames in {}", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| parse_pnm(&fs::read(p)?).map_err(|e| Error::Format(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    let first = &frames[0];
    for (p, f) in paths.iter().zip(&frames) {
        if (f.width, f.height, f.channels) != (first.width, first.height, first.channels) {
            return Err(Error::ShapeMismatch(format!(
                "{} is {}×{}×{}, first frame is {}×{}×{}",
                p.display(),
                f.height,
                f.width,
                f.channels,
                first.height,
                first.width,
                first.channels
            )));
        }
    }
    let shape = [first.height, first.width, first.channels, frames.len()];
    Ok(DenseTensor::from_fn(&shape, |i| frames[i[3]].sample(i[0], i[1], i[2])))
}

/// Per-iteration trace columns written by [`render_report`].
pub const REPORT_HEADER: &str = "iter,objective,rel_change,wall_ms,flops,cache_hits,rank";

/// Columns whose values depend on the clock.
pub const TIMING_COLUMNS: &[&str] = &["wall_ms"];

/// Trace as CSV. `config` pairs and the summary are emitted as `# key=value`
/// comment lines before and after the table; the summary line carries the
/// total wall time.
pub fn render_report(
    config: &[(String, String)],
    trace: &[IterationRecord],
    quality: Option<&QualityReport>,
    converged: bool,
    total_ms: f64,
) -> String {
    let mut out = String::new();
    for (k, v) in config {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(out, "{REPORT_HEADER}");
    for r in trace {
        let rank: Vec<String> = r.rank.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:.3},{},{},{}",
            r.iter,
            r.objective,
            r.rel_change,
            r.wall_ms,
            r.flops.total(),
            r.cache_hits,
            rank.join(";")
        );
    }
    let _ = write!(out, "# iterations={} converged={converged}", trace.len());
    if let Some(q) = quality {
        let off = q.rel_err_off_mask.map_or_else(|| "NaN".to_string(), |v| format!("{v:e}"));
        let _ = write!(
            out,
            " psnr={:e} ssim={:e} rel_err={:e} rel_err_off_mask={off}",
            q.psnr, q.ssim, q.rel_err
        );
    }
    let _ = writeln!(out, " total_ms={total_ms:.3}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FlopCounter;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = DenseTensor::from_fn(&[3, 1, 2], |i| (i[0] as f64 - 1.3) * 1e-300 + i[2] as f64 * -0.1);
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout() {
        let t = DenseTensor::from_fn(&[2], |i| i[0] as f64);
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"FCTN");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..24], &2u64.to_le_bytes());
        assert_eq!(b.len(), 24 + 16);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let t = DenseTensor::from_fn(&[2, 2], |_| 1.0);
        let good = encode_tensor(&t);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_tensor(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode_tensor(&bad_version).is_err());
        assert!(decode_tensor(&good[..good.len() - 1]).is_err());
        assert!(decode_tensor(&good[..10]).is_err());
        assert!(decode_mask(&good).is_err());

        let m = Mask::new(vec![2], vec![true, false]).unwrap();
        let mut enc = encode_mask(&m);
        assert_eq!(decode_mask(&enc).unwrap(), m);
        *enc.last_mut().unwrap() = 2;
        assert!(decode_mask(&enc).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join(format!("fctn-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let t = DenseTensor::from_fn(&[2, 3], |i| i[0] as f64 - i[1] as f64);
        let p = dir.join("t.fctn");
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        let m = sample_mask(&[2, 3], 0.5, 1).unwrap();
        let pm = dir.join("m.fctn");
        write_mask(&pm, &m).unwrap();
        assert_eq!(read_mask(&pm).unwrap(), m);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn sampling_counts_are_exact() {
        assert_eq!(sample_mask(&[4, 5], 1.0, 3).unwrap().count(), 20);
        assert_eq!(sample_mask(&[10, 10], 0.2, 7).unwrap().count(), 20);
        assert_eq!(sample_mask(&[10, 10, 3], 0.3, 7).unwrap().count(), 90);
        assert!(sample_mask(&[4], 0.0, 1).is_err());
        assert!(sample_mask(&[4], 1.5, 1).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let mut differing = 0;
        for seed in 0..100u64 {
            let a = sample_mask(&[10, 10], 0.2, seed).unwrap();
            assert_eq!(a, sample_mask(&[10, 10], 0.2, seed).unwrap());
            if a != sample_mask(&[10, 10], 0.2, seed + 1000).unwrap() {
                differing += 1;
            }
        }
        assert_eq!(differing, 100);
    }

    #[test]
    fn pnm_ascii_and_binary() {
        let ascii = b"P2\n# comment\n3 2\n4\n0 1 2\n3 4 0\n";
        let img = parse_pnm(ascii).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 1));
        assert_eq!(img.sample(1, 0, 0), 0.75);

        let mut binary = b"P6 1 2 255\n".to_vec();
        binary.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
        let img = parse_pnm(&binary).unwrap();
        assert_eq!(img.sample(0, 0, 0), 1.0);
        assert_eq!(img.sample(1, 0, 2), 0.4);

        let mut wide = b"P5 1 1 65535\n".to_vec();
        wide.extend_from_slice(&[0x80, 0x00]);
        assert!((parse_pnm(&wide).unwrap().samples[0] - 32768.0 / 65535.0).abs() < 1e-15);

        assert!(parse_pnm(b"P4 1 1\n0").is_err());
        assert!(parse_pnm(b"P2 2 1 3\n1 9\n").is_err());
        assert!(parse_pnm(b"P5 2 2 255\n\x00").is_err());
    }

    #[test]
    fn report_rows_and_summary() {
        let rec = IterationRecord {
            iter: 1,
            objective: 2.5,
            rel_change: 0.125,
            wall_ms: 3.0,
            flops: FlopCounter { leave_one_out: 10, compose: 5 },
            cache_hits: 2,
            rank: vec![1, 2, 3],
            update_order: vec![0, 1, 2],
            rank_increased: false,
            rank_capped: false,
            sufficient_decrease: true,
            extrapolated: false,
            x_norm: 1.0,
            factor_norms: vec![1.0; 3],
        };
        let csv = render_report(&[("lambda".into(), "0.35".into())], &[rec], None, true, 4.0);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# lambda=0.35");
        assert_eq!(lines[1], REPORT_HEADER);
        assert_eq!(lines[2], "1,2.5e0,1.25e-1,3.000,15,2,1;2;3");
        assert_eq!(lines[3], "# iterations=1 converged=true total_ms=4.000");
    }
}

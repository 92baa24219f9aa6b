//! Run configuration, output writers, kernel cache and manifests.

use crate::error::{Error, Result};
use crate::{Mat3, C64};
use crate::dephasing::{CoherencePoint, CoherenceTrace};
use crate::spectrum::NoiseSpectrum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// SHA-256 (hex) of the canonical JSON serialization of a value.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// SHA-256 (hex) of raw bytes.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The contracted kernel result for one (q, ω): the 3×3 dissipative form
/// 𝕃₀ℙ𝒯𝕏̃𝒯ᴴℙᴴ𝕃₀ᴴ plus solver statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CachedForm {
    /// Angular frequency in rad/s.
    pub omega: f64,
    /// Dissipative form (rad²/m², before the spectral prefactor).
    pub form: Mat3,
    /// Operator applications spent on the solves.
    pub iterations: u64,
    /// Worst relative residual of the solves.
    pub residual: f64,
}

const CACHE_MAGIC: &[u8; 8] = b"SNKCACHE";
const CACHE_VERSION: u32 = 1;

/// On-disk cache of solved kernel contractions, one file per key.
///
/// Records are little-endian binary and store every float bit-exactly, so a
/// warm-cache run reproduces a cold-cache run to the last bit. Files are
/// written to a temporary name and renamed, so concurrent writers never
/// expose partial records; unreadable or mismatched files count as misses.
#[derive(Debug, Clone)]
pub struct KernelCache {
    dir: PathBuf,
}

impl KernelCache {
    /// Opens (creating if needed) a cache directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    /// Cache directory.
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    /// Loads the records stored under `key`, if present and well formed.
    pub fn load(&self, key: &str) -> Option<Vec<CachedForm>> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        decode_records(&bytes)
    }

    /// Stores records under `key`.
    pub fn store(&self, key: &str, records: &[CachedForm]) -> Result<()> {
        let path = self.path(key);
        let tmp = self.dir.join(format!("{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, encode_records(records))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

fn encode_records(records: &[CachedForm]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + records.len() * 168);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.omega.to_le_bytes());
        for i in 0..3 {
            for j in 0..3 {
                out.extend_from_slice(&r.form[(i, j)].re.to_le_bytes());
                out.extend_from_slice(&r.form[(i, j)].im.to_le_bytes());
            }
        }
        out.extend_from_slice(&r.iterations.to_le_bytes());
        out.extend_from_slice(&r.residual.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        s.try_into().ok()
    }

    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }
}

fn decode_records(bytes: &[u8]) -> Option<Vec<CachedForm>> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<8>()? != CACHE_MAGIC || u32::from_le_bytes(r.take::<4>()?) != CACHE_VERSION {
        return None;
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let omega = r.f64()?;
        let mut form = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let re = r.f64()?;
                form[(i, j)] = C64::new(re, r.f64()?);
            }
        }
        let iterations = r.u64()?;
        let residual = r.f64()?;
        out.push(CachedForm { omega, form, iterations, residual });
    }
    (r.pos == bytes.len()).then_some(out)
}

/// Formats a float in shortest round-trip scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// One written output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Path relative to the output directory.
    pub path: String,
    /// SHA-256 of the contents.
    pub sha256: String,
    /// Size in bytes.
    pub bytes: u64,
}

/// Run summary written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    /// Crate version that produced the outputs.
    pub artifact_version: String,
    /// Subcommand.
    pub command: String,
    /// SHA-256 of the canonical configuration.
    pub config_hash: String,
    /// Files written, in write order.
    pub outputs: Vec<OutputRecord>,
    /// Wall-clock time in seconds.
    pub wall_clock_seconds: f64,
    /// Total Krylov operator applications.
    pub solver_iterations: u64,
    /// Worst relative residual of the solves.
    pub max_residual: f64,
    /// Momentum nodes served from the kernel cache.
    pub cache_hits: usize,
}

/// Single writer for the files of one run; records a checksum per file.
#[derive(Debug)]
pub struct OutputSink {
    dir: PathBuf,
    records: Vec<OutputRecord>,
}

impl OutputSink {
    /// Creates (if needed) and opens an output directory.
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, records: Vec::new() })
    }

    /// Output directory.
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Files written so far.
    pub fn records(&self) -> &[OutputRecord] {
        &self.records
    }

    /// Writes raw bytes under `name`.
    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.records.push(OutputRecord { path: name.to_string(), sha256: hash_bytes(bytes), bytes: bytes.len() as u64 });
        Ok(path)
    }

    /// Writes a CSV table.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        self.write_bytes(name, &csv_bytes(header, rows)?)
    }

    /// Writes pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes an 8-bit binary PGM heatmap.
    pub fn write_pgm(&mut self, name: &str, width: usize, height: usize, values: &[f64]) -> Result<PathBuf> {
        self.write_bytes(name, &pgm_bytes(width, height, values)?)
    }
}

/// CSV serialization of a header and rows.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::DimensionMismatch { expected: header.len(), got: r.len() });
        }
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

/// Binary PGM (P5, maxval 255) of row-major values with row 0 at the
/// bottom of the image; linear scale from 0 to the maximum.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch { expected: width * height, got: values.len() });
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in (0..height).rev() {
        for col in 0..width {
            let v = values[row * width + col];
            let level = if max > 0.0 { (255.0 * (v / max).clamp(0.0, 1.0)).round() as u8 } else { 0 };
            out.push(level);
        }
    }
    Ok(out)
}

/// Spectrum table: frequency_hz, omega_rad_per_s, j_per_s, est_error_per_s.
pub fn spectrum_rows(s: &NoiseSpectrum) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["frequency_hz", "omega_rad_per_s", "j_per_s", "est_error_per_s"];
    let rows = (0..s.len())
        .map(|k| {
            vec![
                fmt_f64(s.omega[k] / (2.0 * std::f64::consts::PI)),
                fmt_f64(s.omega[k]),
                fmt_f64(s.values[k]),
                fmt_f64(s.errors[k]),
            ]
        })
        .collect();
    (header, rows)
}

/// Reads a coherence trace CSV with header columns `N`, `t_seconds`, `C`
/// and optional `sigma_C` (any order, case-insensitive). Every malformed
/// row is reported.
pub fn read_trace_csv(path: &Path) -> Result<CoherenceTrace> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| Error::Io(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(cn), Some(ct), Some(cc)) = (col("N"), col("t_seconds"), col("C")) else {
        return Err(Error::Config(vec![format!(
            "{}: trace header must contain N, t_seconds, C (optional sigma_C), found {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )]));
    };
    let cs = col("sigma_C");
    let mut points = Vec::new();
    let mut errors = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let get = |c: usize| rec.get(c).unwrap_or("");
        let n = get(cn).parse::<usize>();
        let t = get(ct).parse::<f64>();
        let c = get(cc).parse::<f64>();
        let sigma = match cs.map(get) {
            None | Some("") => Ok(None),
            Some(v) => v.parse::<f64>().map(Some),
        };
        match (n, t, c, sigma) {
            (Ok(n), Ok(t), Ok(c), Ok(sigma)) => points.push(CoherencePoint { pulses: n, time: t, coherence: c, sigma }),
            _ => errors.push(format!("line {line}: expected integer N and numeric t_seconds, C, sigma_C")),
        }
    }
    if errors.is_empty() {
        Ok(CoherenceTrace { points })
    } else {
        Err(Error::Config(errors.into_iter().map(|e| format!("{}: {e}", path.display())).collect()))
    }
}

/// Trace table matching [`read_trace_csv`].
pub fn trace_rows(trace: &CoherenceTrace) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let rows = trace
        .points
        .iter()
        .map(|p| {
            vec![p.pulses.to_string(), fmt_f64(p.time), fmt_f64(p.coherence), p.sigma.map(fmt_f64).unwrap_or_default()]
        })
        .collect();
    (vec!["N", "t_seconds", "C", "sigma_C"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_records_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cache = KernelCache::open(dir.path()).unwrap();
        let rec = CachedForm {
            omega: 2.0 * std::f64::consts::PI * 1e6,
            form: Mat3::from_fn(|i, j| C64::new(0.1 + i as f64 / 3.0, -(j as f64).sqrt())),
            iterations: 321,
            residual: 4.2e-9,
        };
        cache.store("abc", &[rec, rec]).unwrap();
        let back = cache.load("abc").unwrap();
        assert_eq!(back, vec![rec, rec]);
        assert!(cache.load("missing").is_none());
        std::fs::write(dir.path().join("bad.bin"), b"SNKCACHE\x01").unwrap();
        assert!(cache.load("bad").is_none());
    }

    #[test]
    fn trace_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let trace = CoherenceTrace {
            points: vec![
                CoherencePoint { pulses: 8, time: 1.25e-6, coherence: 0.9, sigma: None },
                CoherencePoint { pulses: 16, time: 3e-6, coherence: 0.5, sigma: Some(0.01) },
            ],
        };
        let mut sink = OutputSink::create(dir.path()).unwrap();
        let (h, rows) = trace_rows(&trace);
        let path = sink.write_csv("trace.csv", &h, &rows).unwrap();
        assert_eq!(read_trace_csv(&path).unwrap(), trace);
        assert_eq!(sink.records()[0].sha256, hash_bytes(&std::fs::read(&path).unwrap()));
    }

    #[test]
    fn malformed_trace_rows_are_all_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "N,t_seconds,C\nx,1e-6,0.5\n8,1e-6,0.5\n4,bad,0.5\n").unwrap();
        let Err(Error::Config(list)) = read_trace_csv(&path) else { panic!("expected config error") };
        assert_eq!(list.len(), 2);
    }

    #[test]
    fn pgm_header_and_orientation() {
        let b = pgm_bytes(2, 2, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        // Top image row is the last data row.
        assert_eq!(&b[11..], &[128, 255, 0, 64]);
    }
}

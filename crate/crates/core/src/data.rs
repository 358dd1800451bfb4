//! Embedding datasets: in-memory representation, the `GIDE` binary format,
//! JSON-lines interchange and seeded synthetic generation.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, validation, Error, Result};
use crate::rng;

pub const MAGIC: [u8; 4] = *b"GIDE";
pub const VERSION: u32 = 1;
pub const FLAG_HAS_LABELS: u32 = 1;
pub const FLAG_HAS_DOMAINS: u32 = 1 << 1;
/// Header size in bytes: magic + version + n_samples + dim + flags.
pub const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4;

const UNLABELED: i64 = -1;
const NO_DOMAIN: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Binary,
    Jsonl,
}

impl Format {
    /// Guess from the file extension; anything but `.jsonl` is binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Format::Jsonl,
            _ => Format::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub vector: Vec<f32>,
    pub label: Option<usize>,
    pub domain: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub samples: Vec<SampleRecord>,
    pub label_names: Option<BTreeMap<usize, String>>,
    pub domain_names: Option<BTreeMap<u32, String>>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, samples: Vec<SampleRecord>) -> Result<Self> {
        let ds = EmbeddingDataset {
            dim,
            samples,
            label_names: None,
            domain_names: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.samples.iter().any(|s| s.label.is_some())
    }

    pub fn has_domains(&self) -> bool {
        self.samples.iter().any(|s| s.domain.is_some())
    }

    /// Check every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(validation!("dataset dim must be positive"));
        }
        let mut ids = HashSet::with_capacity(self.samples.len());
        for (row, s) in self.samples.iter().enumerate() {
            if s.vector.len() != self.dim {
                return Err(validation!(
                    "sample {} (row {row}) has {} components, expected {}",
                    s.id,
                    s.vector.len(),
                    self.dim
                ));
            }
            if let Some(c) = s.vector.iter().position(|v| !v.is_finite()) {
                return Err(validation!(
                    "sample {} (row {row}) has non-finite component at {c}",
                    s.id
                ));
            }
            if let (Some(label), Some(names)) = (s.label, &self.label_names) {
                if label >= names.len() {
                    return Err(validation!(
                        "sample {} has label {label} outside the {} named labels",
                        s.id,
                        names.len()
                    ));
                }
            }
            if s.domain == Some(NO_DOMAIN) {
                return Err(validation!("sample {} uses the reserved domain id", s.id));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(validation!("duplicate sample id {}", s.id));
            }
        }
        Ok(())
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.samples.iter().filter_map(|s| s.label).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    /// The ids the binary format assigns when no sidecar overrides them.
    fn has_default_ids(&self) -> bool {
        self.samples
            .iter()
            .enumerate()
            .all(|(i, s)| s.id == i.to_string())
    }
}

/// Path of the JSON names sidecar for a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".names.json");
    PathBuf::from(os)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_names: Option<BTreeMap<usize, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain_names: Option<BTreeMap<u32, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ids: Option<Vec<String>>,
}

pub fn load_dataset(path: &Path, format: Format) -> Result<EmbeddingDataset> {
    let mut ds = match format {
        Format::Binary => read_binary(path)?,
        Format::Jsonl => read_jsonl(path)?,
    };
    let side = sidecar_path(path);
    if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let car: Sidecar = serde_json::from_str(&text)?;
        ds.label_names = car.label_names;
        ds.domain_names = car.domain_names;
        if let Some(ids) = car.ids {
            if ids.len() != ds.samples.len() {
                return Err(Error::format(
                    &side,
                    format!("{} ids for {} samples", ids.len(), ds.samples.len()),
                ));
            }
            for (s, id) in ds.samples.iter_mut().zip(ids) {
                s.id = id;
            }
        }
    }
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &EmbeddingDataset, path: &Path, format: Format) -> Result<()> {
    ds.validate()?;
    match format {
        Format::Binary => write_binary(ds, path)?,
        Format::Jsonl => write_jsonl(ds, path)?,
    }
    let car = Sidecar {
        label_names: ds.label_names.clone(),
        domain_names: ds.domain_names.clone(),
        ids: (format == Format::Binary && !ds.has_default_ids())
            .then(|| ds.samples.iter().map(|s| s.id.clone()).collect()),
    };
    let side = sidecar_path(path);
    if car.label_names.is_some() || car.domain_names.is_some() || car.ids.is_some() {
        let text = serde_json::to_string_pretty(&car)?;
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))?;
    } else if side.exists() {
        // a stale sidecar would rename samples on the next load
        std::fs::remove_file(&side).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Byte length of a binary dataset file.
pub fn binary_len(n: usize, dim: usize, has_labels: bool, has_domains: bool) -> usize {
    HEADER_LEN
        + n * dim * 4
        + if has_labels { n * 8 } else { 0 }
        + if has_domains { n * 4 } else { 0 }
}

fn write_binary(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut flags = 0u32;
    if ds.has_labels() {
        flags |= FLAG_HAS_LABELS;
    }
    if ds.has_domains() {
        flags |= FLAG_HAS_DOMAINS;
    }
    let mut buf = Vec::with_capacity(binary_len(
        ds.len(),
        ds.dim,
        flags & FLAG_HAS_LABELS != 0,
        flags & FLAG_HAS_DOMAINS != 0,
    ));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.dim as u64).to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    for s in &ds.samples {
        for v in &s.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if flags & FLAG_HAS_LABELS != 0 {
        for s in &ds.samples {
            let l = s.label.map_or(UNLABELED, |l| l as i64);
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    if flags & FLAG_HAS_DOMAINS != 0 {
        for s in &ds.samples {
            buf.extend_from_slice(&s.domain.unwrap_or(NO_DOMAIN).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_binary(path: &Path) -> Result<EmbeddingDataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected GIDE"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = u64_at(8) as usize;
    let dim = u64_at(16) as usize;
    let flags = u32_at(24);
    if flags & !(FLAG_HAS_LABELS | FLAG_HAS_DOMAINS) != 0 {
        return Err(Error::format(path, format!("unknown flag bits {flags:#x}")));
    }
    let has_labels = flags & FLAG_HAS_LABELS != 0;
    let has_domains = flags & FLAG_HAS_DOMAINS != 0;
    let expected = n
        .checked_mul(dim)
        .map(|_| binary_len(n, dim, has_labels, has_domains));
    if expected != Some(bytes.len()) {
        return Err(Error::format(
            path,
            format!(
                "length {} does not match header (n={n}, dim={dim}, flags={flags})",
                bytes.len()
            ),
        ));
    }

    let mut off = HEADER_LEN;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let vector = bytes[off..off + dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += dim * 4;
        samples.push(SampleRecord {
            id: i.to_string(),
            vector,
            label: None,
            domain: None,
        });
    }
    if has_labels {
        for s in samples.iter_mut() {
            let l = i64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
            s.label = match l {
                UNLABELED => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(Error::format(path, format!("invalid label {l}"))),
            };
        }
    }
    if has_domains {
        for s in samples.iter_mut() {
            let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            off += 4;
            s.domain = (d != NO_DOMAIN).then_some(d);
        }
    }
    Ok(EmbeddingDataset {
        dim,
        samples,
        label_names: None,
        domain_names: None,
    })
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    id: String,
    embedding: Vec<f32>,
    label: Option<usize>,
    domain: Option<u32>,
}

fn write_jsonl(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &ds.samples {
        let row = JsonlRow {
            id: s.id.clone(),
            embedding: s.vector.clone(),
            label: s.label,
            domain: s.domain,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl(path: &Path) -> Result<EmbeddingDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        samples.push(SampleRecord {
            id: row.id,
            vector: row.embedding,
            label: row.label,
            domain: row.domain,
        });
    }
    let dim = match samples.first() {
        Some(s) => s.vector.len(),
        None => return Err(Error::format(path, "empty JSONL file, dimension unknown")),
    };
    Ok(EmbeddingDataset {
        dim,
        samples,
        label_names: None,
        domain_names: None,
    })
}

/// SHA-256 of a file's bytes, lowercase hex.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parameters of a Gaussian-blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Distance between class means, in units of `within_class_std`.
    pub class_separation: f64,
    pub within_class_std: f64,
    /// Partition of class ids into domain groups.
    pub domains: Option<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.dim == 0 {
            return Err(config_err!(
                "num_classes, samples_per_class and dim must be positive"
            ));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(config_err!("class_separation must be positive"));
        }
        // zero spread is allowed: every sample then sits on its class mean
        if !(self.within_class_std >= 0.0 && self.within_class_std.is_finite()) {
            return Err(config_err!("within_class_std must be non-negative"));
        }
        if let Some(groups) = &self.domains {
            let mut seen = vec![false; self.num_classes];
            for &c in groups.iter().flatten() {
                if c >= self.num_classes || seen[c] {
                    return Err(config_err!(
                        "domains must partition classes 0..{}",
                        self.num_classes
                    ));
                }
                seen[c] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(config_err!("domains leave some class unassigned"));
            }
        }
        Ok(())
    }

    /// Class means. Pairwise distances equal `class_separation * within_class_std`
    /// exactly when `num_classes <= dim` (scaled orthonormal directions), and
    /// approximately otherwise (scaled random unit directions).
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::derive(self.seed, 0);
        let radius = self.class_separation * self.within_class_std / std::f64::consts::SQRT_2;
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(self.num_classes);
        while dirs.len() < self.num_classes {
            let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            if dirs.len() < self.dim {
                for d in &dirs {
                    let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            dirs.push(v);
        }
        dirs.into_iter()
            .map(|d| d.into_iter().map(|a| a * radius).collect())
            .collect()
    }
}

/// Draw a labeled Gaussian-blob dataset; rows are class-major with ids `0..n`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let means = spec.class_means();
    let mut domain_of = vec![None; spec.num_classes];
    if let Some(groups) = &spec.domains {
        for (d, g) in groups.iter().enumerate() {
            for &c in g {
                domain_of[c] = Some(d as u32);
            }
        }
    }
    let mut rng = rng::derive(spec.seed, 1);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let vector = mean
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + spec.within_class_std * z) as f32
                })
                .collect();
            samples.push(SampleRecord {
                id: samples.len().to_string(),
                vector,
                label: Some(c),
                domain: domain_of[c],
            });
        }
    }
    let mut ds = EmbeddingDataset::new(spec.dim, samples)?;
    ds.label_names = Some(
        (0..spec.num_classes)
            .map(|c| (c, format!("class_{c}")))
            .collect(),
    );
    if let Some(groups) = &spec.domains {
        ds.domain_names = Some(
            (0..groups.len() as u32)
                .map(|d| (d, format!("domain_{d}")))
                .collect(),
        );
    }
    Ok(ds)
}

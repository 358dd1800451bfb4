//! Benchmark construction: partition a labeled dataset into IND classes with
//! labels and OOD classes without, plus the imbalance and noise variants.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, SampleRecord};
use crate::error::{config_err, data_err, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Random class split of a single-domain corpus.
    SingleDomain,
    /// Random class split ignoring domains; IND and OOD may share a domain.
    MultiDomainOverlapping,
    /// Whole domains go to IND or OOD.
    CrossDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Fraction of classes (of domains in cross-domain mode) made OOD.
    pub ood_ratio: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Keep at most this many labeled training samples per IND class.
    pub ind_samples_per_class: Option<usize>,
}

impl SplitConfig {
    pub fn new(mode: SplitMode, ood_ratio: f64, seed: u64) -> Self {
        SplitConfig {
            mode,
            ood_ratio,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed,
            ind_samples_per_class: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.ood_ratio > 0.0 && self.ood_ratio < 1.0) {
            return Err(config_err!("ood_ratio must be in (0, 1), got {}", self.ood_ratio));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if !(self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(config_err!(
                "test_fraction must be positive with val_fraction + test_fraction < 1"
            ));
        }
        if self.ind_samples_per_class == Some(0) {
            return Err(config_err!("ind_samples_per_class must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceConfig {
    /// n_max / n_min across OOD training classes.
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Samples that belong to no class (out-of-scope queries).
    OodNoise,
    /// Held-out IND samples mixed into the unlabeled OOD pool.
    IndNoise,
}

#[derive(Debug, Clone)]
pub struct NoiseConfig<'a> {
    pub kind: NoiseKind,
    /// Number of noise samples as a fraction of the OOD training count.
    pub ratio: f64,
    pub pool: &'a EmbeddingDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Imbalance { rho: f64, seed: u64 },
    Noise { noise: NoiseKind, ratio: f64, added: usize, seed: u64 },
}

/// Partitioned benchmark. Labels in IND partitions and in `test` are joint
/// class positions: IND classes occupy `[0, N)` and OOD classes `[N, N+M)`.
#[derive(Debug)]
pub struct GidSplit {
    pub n_ind_classes: usize,
    pub n_ood_classes: usize,
    pub ind_train: Vec<SampleRecord>,
    pub ind_val: Vec<SampleRecord>,
    pub ood_train: Vec<SampleRecord>,
    pub ood_val: Vec<SampleRecord>,
    test: Vec<SampleRecord>,
    /// Original class id → joint position.
    pub class_mapping: BTreeMap<usize, usize>,
    pub config: SplitConfig,
    pub variants: Vec<Variant>,
    /// Original labels of injected IND-noise samples, for diagnostics.
    pub noise_gold: BTreeMap<String, usize>,
    hidden_gold: BTreeMap<String, usize>,
    test_reads: AtomicUsize,
}

impl Clone for GidSplit {
    fn clone(&self) -> Self {
        GidSplit {
            n_ind_classes: self.n_ind_classes,
            n_ood_classes: self.n_ood_classes,
            ind_train: self.ind_train.clone(),
            ind_val: self.ind_val.clone(),
            ood_train: self.ood_train.clone(),
            ood_val: self.ood_val.clone(),
            test: self.test.clone(),
            class_mapping: self.class_mapping.clone(),
            config: self.config.clone(),
            variants: self.variants.clone(),
            noise_gold: self.noise_gold.clone(),
            hidden_gold: self.hidden_gold.clone(),
            test_reads: AtomicUsize::new(0),
        }
    }
}

impl GidSplit {
    pub fn n_classes(&self) -> usize {
        self.n_ind_classes + self.n_ood_classes
    }

    /// The labeled test partition. Every call is counted so callers can
    /// check that training never looked at it.
    pub fn test(&self) -> &[SampleRecord] {
        self.test_reads.fetch_add(1, Ordering::SeqCst);
        &self.test
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::SeqCst)
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }

    /// Gold joint position of an unlabeled sample, when it has one. Only for
    /// diagnostics such as pseudo-label purity; trainers must not use it.
    pub fn hidden_gold(&self, id: &str) -> Option<usize> {
        self.hidden_gold.get(id).copied()
    }

    pub fn ood_train_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts: BTreeMap<usize, usize> = (self.n_ind_classes..self.n_classes()).map(|c| (c, 0)).collect();
        for s in &self.ood_train {
            if let Some(g) = self.hidden_gold(&s.id) {
                if g >= self.n_ind_classes {
                    *counts.entry(g).or_default() += 1;
                }
            }
        }
        counts
    }

    pub fn partitions(&self) -> [(&'static str, &[SampleRecord]); 5] {
        [
            ("ind_train", &self.ind_train),
            ("ind_val", &self.ind_val),
            ("ood_train", &self.ood_train),
            ("ood_val", &self.ood_val),
            ("test", &self.test),
        ]
    }

    fn all_ids(&self) -> HashSet<&str> {
        self.partitions()
            .iter()
            .flat_map(|(_, p)| p.iter().map(|s| s.id.as_str()))
            .collect()
    }

    pub fn to_manifest(&self, dataset: DatasetRef, pools: Vec<DatasetRef>) -> Manifest {
        Manifest {
            n_ind_classes: self.n_ind_classes,
            n_ood_classes: self.n_ood_classes,
            class_mapping: self.class_mapping.clone(),
            partitions: self
                .partitions()
                .iter()
                .map(|(name, p)| (name.to_string(), p.iter().map(|s| s.id.clone()).collect()))
                .collect(),
            provenance: Provenance {
                seed: self.config.seed,
                config: self.config.clone(),
                variants: self.variants.clone(),
            },
            dataset,
            pools,
            noise_gold: self.noise_gold.clone(),
        }
    }

    /// Rebuild a split from a manifest; ids are looked up in `dataset` first,
    /// then in each pool.
    pub fn from_manifest(
        manifest: &Manifest,
        dataset: &EmbeddingDataset,
        pools: &[EmbeddingDataset],
    ) -> Result<GidSplit> {
        let sources: Vec<(&EmbeddingDataset, BTreeMap<&str, usize>)> = std::iter::once(dataset)
            .chain(pools)
            .map(|d| (d, d.index_by_id()))
            .collect();
        let lookup = |id: &str| -> Result<&SampleRecord> {
            sources
                .iter()
                .find_map(|(d, idx)| idx.get(id).map(|&i| &d.samples[i]))
                .ok_or_else(|| data_err!("manifest references unknown sample id {id}"))
        };
        let n = manifest.n_ind_classes;
        let mapping = &manifest.class_mapping;
        let position = |s: &SampleRecord| s.label.and_then(|l| mapping.get(&l).copied());
        let part = |name: &str| -> Result<&Vec<String>> {
            manifest
                .partitions
                .get(name)
                .ok_or_else(|| data_err!("manifest lacks partition {name}"))
        };
        let labeled = |name: &str, ind_only: bool| -> Result<Vec<SampleRecord>> {
            part(name)?
                .iter()
                .map(|id| {
                    let s = lookup(id)?;
                    let pos = position(s)
                        .filter(|&p| !ind_only || p < n)
                        .ok_or_else(|| data_err!("sample {id} in {name} has no usable label"))?;
                    Ok(SampleRecord {
                        label: Some(pos),
                        ..s.clone()
                    })
                })
                .collect()
        };
        let mut hidden_gold = BTreeMap::new();
        let mut unlabeled = |name: &str| -> Result<Vec<SampleRecord>> {
            part(name)?
                .iter()
                .map(|id| {
                    let s = lookup(id)?;
                    if let Some(p) = position(s) {
                        hidden_gold.insert(id.clone(), p);
                    }
                    Ok(SampleRecord {
                        label: None,
                        ..s.clone()
                    })
                })
                .collect()
        };
        let ood_train = unlabeled("ood_train")?;
        let ood_val = unlabeled("ood_val")?;
        let split = GidSplit {
            n_ind_classes: n,
            n_ood_classes: manifest.n_ood_classes,
            ind_train: labeled("ind_train", true)?,
            ind_val: labeled("ind_val", true)?,
            ood_train,
            ood_val,
            test: labeled("test", false)?,
            class_mapping: mapping.clone(),
            config: manifest.provenance.config.clone(),
            variants: manifest.provenance.variants.clone(),
            noise_gold: manifest.noise_gold.clone(),
            hidden_gold,
            test_reads: AtomicUsize::new(0),
        };
        Ok(split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SplitConfig,
    pub seed: u64,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

/// On-disk description of a split: sample ids per partition plus the data
/// files they come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_ind_classes: usize,
    pub n_ood_classes: usize,
    pub class_mapping: BTreeMap<usize, usize>,
    pub partitions: BTreeMap<String, Vec<String>>,
    pub provenance: Provenance,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub pools: Vec<DatasetRef>,
    #[serde(default)]
    pub noise_gold: BTreeMap<String, usize>,
}

fn count_for(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

pub fn build_split(dataset: &EmbeddingDataset, config: &SplitConfig) -> Result<GidSplit> {
    config.validate()?;
    if let Some(s) = dataset.samples.iter().find(|s| s.label.is_none()) {
        return Err(data_err!("sample {} has no label; splits need a fully labeled dataset", s.id));
    }
    let classes = dataset.classes();
    let mut rng = rng::seeded(config.seed);

    let ood_classes: BTreeSet<usize> = match config.mode {
        SplitMode::SingleDomain | SplitMode::MultiDomainOverlapping => {
            let m = count_for(classes.len(), config.ood_ratio);
            if m == 0 || m == classes.len() {
                return Err(config_err!(
                    "ood_ratio {} over {} classes leaves N = {} and M = {m}",
                    config.ood_ratio,
                    classes.len(),
                    classes.len() - m
                ));
            }
            classes.choose_multiple(&mut rng, m).copied().collect()
        }
        SplitMode::CrossDomain => {
            let mut domain_of_class: BTreeMap<usize, u32> = BTreeMap::new();
            for s in &dataset.samples {
                let d = s
                    .domain
                    .ok_or_else(|| config_err!("cross-domain split needs domain tags (sample {})", s.id))?;
                let l = s.label.expect("checked above");
                if *domain_of_class.entry(l).or_insert(d) != d {
                    return Err(data_err!("class {l} spans more than one domain"));
                }
            }
            let domains: Vec<u32> = domain_of_class
                .values()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let m = count_for(domains.len(), config.ood_ratio);
            if m == 0 || m == domains.len() {
                return Err(config_err!(
                    "ood_ratio {} over {} domains leaves no IND or no OOD domain",
                    config.ood_ratio,
                    domains.len()
                ));
            }
            let ood_domains: BTreeSet<u32> = domains.choose_multiple(&mut rng, m).copied().collect();
            domain_of_class
                .iter()
                .filter(|(_, d)| ood_domains.contains(d))
                .map(|(&c, _)| c)
                .collect()
        }
    };

    let ind_classes: Vec<usize> = classes.iter().copied().filter(|c| !ood_classes.contains(c)).collect();
    let n = ind_classes.len();
    let class_mapping: BTreeMap<usize, usize> = ind_classes
        .iter()
        .chain(ood_classes.iter())
        .enumerate()
        .map(|(pos, &c)| (c, pos))
        .collect();

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label.expect("checked")).or_default().push(i);
    }
    let (mut ind_train, mut ind_val, mut ood_train, mut ood_val, mut test) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_test = count_for(idx.len(), config.test_fraction);
        let n_val = count_for(idx.len(), config.val_fraction);
        let (t, rest) = idx.split_at(n_test.min(idx.len()));
        let (v, tr) = rest.split_at(n_val.min(rest.len()));
        test.extend_from_slice(t);
        let mut tr = tr.to_vec();
        if ood_classes.contains(&class) {
            ood_val.extend_from_slice(v);
            ood_train.extend(tr);
        } else {
            if let Some(cap) = config.ind_samples_per_class {
                if tr.len() > cap {
                    tr.shuffle(&mut rng);
                    tr.truncate(cap);
                }
            }
            ind_val.extend_from_slice(v);
            ind_train.extend(tr);
        }
    }

    let mut hidden_gold = BTreeMap::new();
    let mut make = |mut idx: Vec<usize>, keep_label: bool| -> Vec<SampleRecord> {
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| {
                let s = &dataset.samples[i];
                let pos = class_mapping[&s.label.expect("checked")];
                if !keep_label {
                    hidden_gold.insert(s.id.clone(), pos);
                }
                SampleRecord {
                    label: keep_label.then_some(pos),
                    ..s.clone()
                }
            })
            .collect()
    };
    let ind_train = make(ind_train, true);
    let ind_val = make(ind_val, true);
    let ood_train = make(ood_train, false);
    let ood_val = make(ood_val, false);
    let test = make(test, true);

    Ok(GidSplit {
        n_ind_classes: n,
        n_ood_classes: ood_classes.len(),
        ind_train,
        ind_val,
        ood_train,
        ood_val,
        test,
        class_mapping,
        config: config.clone(),
        variants: Vec::new(),
        noise_gold: BTreeMap::new(),
        hidden_gold,
        test_reads: AtomicUsize::new(0),
    })
}

/// Per-class OOD training targets `floor(n_min · ρ^((j-1)/M))`, j = 1..M,
/// with `n_min = n_max / ρ`.
pub fn imbalance_counts(n_max: usize, rho: f64, m: usize) -> Vec<usize> {
    let n_min = n_max as f64 / rho;
    (0..m)
        .map(|j| (n_min * rho.powf(j as f64 / m as f64)).floor() as usize)
        .collect()
}

/// Downsample each OOD training class to a geometric size profile over the
/// classes in ascending original-id order. IND partitions, `ood_val` and
/// `test` are untouched; samples without a gold class (noise) are kept.
pub fn apply_imbalance(split: &GidSplit, config: &ImbalanceConfig, seed: u64) -> Result<GidSplit> {
    if !(config.rho >= 1.0 && config.rho.is_finite()) {
        return Err(config_err!("rho must be >= 1, got {}", config.rho));
    }
    let counts = split.ood_train_class_counts();
    let n_max = counts.values().copied().max().unwrap_or(0);
    // joint positions of OOD classes ascend with the original class id
    let targets = imbalance_counts(n_max, config.rho, counts.len());
    let original_of: BTreeMap<usize, usize> = split.class_mapping.iter().map(|(&o, &p)| (p, o)).collect();
    let mut rng = rng::seeded(seed);
    let mut keep: HashSet<&str> = HashSet::new();
    for ((&class, &have), &want) in counts.iter().zip(&targets) {
        if have < want {
            return Err(data_err!(
                "OOD class {} has {have} training samples, imbalance needs {want}",
                original_of.get(&class).copied().unwrap_or(class)
            ));
        }
        let members: Vec<&str> = split
            .ood_train
            .iter()
            .filter(|s| split.hidden_gold(&s.id) == Some(class))
            .map(|s| s.id.as_str())
            .collect();
        keep.extend(members.choose_multiple(&mut rng, want).copied());
    }
    let mut out = split.clone();
    out.ood_train = split
        .ood_train
        .iter()
        .filter(|s| match split.hidden_gold(&s.id) {
            Some(g) if g >= split.n_ind_classes => keep.contains(s.id.as_str()),
            _ => true,
        })
        .cloned()
        .collect();
    out.variants.push(Variant::Imbalance {
        rho: config.rho,
        seed,
    });
    Ok(out)
}

/// Append `round(ratio · |ood_train|)` unlabeled pool samples to `ood_train`.
pub fn apply_noise(split: &GidSplit, config: &NoiseConfig<'_>, seed: u64) -> Result<GidSplit> {
    if !(config.ratio >= 0.0 && config.ratio.is_finite()) {
        return Err(config_err!("noise ratio must be >= 0, got {}", config.ratio));
    }
    let count = (config.ratio * split.ood_train.len() as f64).round() as usize;
    let mut out = split.clone();
    if count == 0 {
        return Ok(out);
    }
    if config.pool.dim != split.ood_train.first().map_or(config.pool.dim, |s| s.vector.len()) {
        return Err(data_err!("noise pool dimension {} does not match the split", config.pool.dim));
    }
    let taken = split.all_ids();
    if let Some(s) = config.pool.samples.iter().find(|s| taken.contains(s.id.as_str())) {
        return Err(data_err!("noise pool sample {} already belongs to the split", s.id));
    }
    if config.pool.len() < count {
        return Err(data_err!(
            "noise pool has {} samples, {count} requested",
            config.pool.len()
        ));
    }
    let mut rng = rng::seeded(seed);
    let mut picked: Vec<usize> = (0..config.pool.len()).collect::<Vec<_>>().choose_multiple(&mut rng, count).copied().collect();
    picked.sort_unstable();
    for i in picked {
        let s = &config.pool.samples[i];
        if let Some(l) = s.label {
            if config.kind == NoiseKind::IndNoise {
                out.noise_gold.insert(s.id.clone(), l);
            }
            if let Some(&pos) = split.class_mapping.get(&l) {
                out.hidden_gold.insert(s.id.clone(), pos);
            }
        }
        out.ood_train.push(SampleRecord {
            label: None,
            ..s.clone()
        });
    }
    out.variants.push(Variant::Noise {
        noise: config.kind,
        ratio: config.ratio,
        added: count,
        seed,
    });
    Ok(out)
}

/// IND-class samples of `dataset` that the split left out of every partition
/// (for example those dropped by `ind_samples_per_class`).
pub fn held_out_ind(dataset: &EmbeddingDataset, split: &GidSplit) -> EmbeddingDataset {
    let used = split.all_ids();
    let samples = dataset
        .samples
        .iter()
        .filter(|s| !used.contains(s.id.as_str()))
        .filter(|s| {
            s.label
                .and_then(|l| split.class_mapping.get(&l))
                .is_some_and(|&p| p < split.n_ind_classes)
        })
        .cloned()
        .collect();
    EmbeddingDataset {
        dim: dataset.dim,
        samples,
        label_names: dataset.label_names.clone(),
        domain_names: dataset.domain_names.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn dataset(classes: usize, per: usize, domains: Option<usize>) -> EmbeddingDataset {
        let spec = SyntheticSpec {
            num_classes: classes,
            samples_per_class: per,
            dim: 4,
            class_separation: 4.0,
            within_class_std: 1.0,
            domains: domains.map(|d| (0..d).map(|g| (0..classes).filter(|c| c % d == g).collect()).collect()),
            seed: 1,
        };
        generate_synthetic(&spec).unwrap()
    }

    fn clinc_like() -> SplitConfig {
        SplitConfig {
            val_fraction: 0.1,
            test_fraction: 0.1,
            ..SplitConfig::new(SplitMode::MultiDomainOverlapping, 0.4, 7)
        }
    }

    #[test]
    fn clinc_shaped_counts() {
        let ds = dataset(150, 150, Some(10));
        let split = build_split(&ds, &clinc_like()).unwrap();
        assert_eq!((split.n_ind_classes, split.n_ood_classes), (90, 60));
        assert_eq!(split.ind_train.len(), 10_800);
        assert_eq!(split.ood_train.len(), 7_200);
        assert_eq!((split.ind_val.len(), split.ood_val.len()), (1_350, 900));
        assert_eq!(split.test_len(), 2_250);
    }

    #[test]
    fn banking_shaped_class_counts() {
        let ds = dataset(77, 10, None);
        let split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 3)).unwrap();
        assert_eq!((split.n_ind_classes, split.n_ood_classes), (46, 31));
    }

    #[test]
    fn degenerate_ratio_rejected() {
        let ds = dataset(3, 10, None);
        let err = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.1, 0));
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn cross_domain_needs_domains_and_keeps_them_whole() {
        let ds = dataset(12, 10, None);
        assert!(matches!(
            build_split(&ds, &SplitConfig::new(SplitMode::CrossDomain, 0.5, 0)),
            Err(crate::Error::Config(_))
        ));
        let ds = dataset(12, 10, Some(4));
        let split = build_split(&ds, &SplitConfig::new(SplitMode::CrossDomain, 0.5, 0)).unwrap();
        assert_eq!(split.n_ood_classes, 6);
        let ind_domains: BTreeSet<_> = split.ind_train.iter().map(|s| s.domain).collect();
        let ood_domains: BTreeSet<_> = split.ood_train.iter().map(|s| s.domain).collect();
        assert!(ind_domains.is_disjoint(&ood_domains));
    }

    #[test]
    fn partitions_are_disjoint_and_ood_unlabeled() {
        let ds = dataset(10, 30, None);
        let split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 9)).unwrap();
        let mut seen = HashSet::new();
        for (_, p) in split.partitions() {
            for s in p {
                assert!(seen.insert(s.id.clone()));
            }
        }
        assert!(split.ood_train.iter().chain(&split.ood_val).all(|s| s.label.is_none()));
        let test_classes: BTreeSet<_> = split.test.iter().map(|s| s.label.unwrap()).collect();
        assert_eq!(test_classes.len(), 10);
        assert!(split.ind_train.iter().all(|s| s.label.unwrap() < split.n_ind_classes));
    }

    #[test]
    fn deterministic_given_config() {
        let ds = dataset(10, 20, None);
        let c = SplitConfig::new(SplitMode::SingleDomain, 0.4, 5);
        let a = build_split(&ds, &c).unwrap();
        let b = build_split(&ds, &c).unwrap();
        assert_eq!(a.class_mapping, b.class_mapping);
        assert_eq!(a.ood_train, b.ood_train);
    }

    #[test]
    fn ind_cap_limits_train_per_class() {
        let ds = dataset(6, 40, None);
        let mut c = SplitConfig::new(SplitMode::SingleDomain, 0.5, 5);
        c.ind_samples_per_class = Some(7);
        let split = build_split(&ds, &c).unwrap();
        assert_eq!(split.ind_train.len(), 3 * 7);
        assert_eq!(held_out_ind(&ds, &split).len(), 3 * (28 - 7));
    }

    #[test]
    fn imbalance_identity_and_profile() {
        let ds = dataset(10, 50, None);
        let split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 2)).unwrap();
        let same = apply_imbalance(&split, &ImbalanceConfig { rho: 1.0 }, 0).unwrap();
        assert_eq!(same.ood_train, split.ood_train);

        let skewed = apply_imbalance(&split, &ImbalanceConfig { rho: 2.0 }, 0).unwrap();
        let counts: Vec<usize> = skewed.ood_train_class_counts().values().copied().collect();
        assert_eq!(counts, imbalance_counts(35, 2.0, 4));
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(skewed.ind_train, split.ind_train);
        assert_eq!(skewed.test, split.test);
    }

    #[test]
    fn imbalance_formula_values() {
        let c = imbalance_counts(120, 2.0, 60);
        assert_eq!(c[0], 60);
        assert_eq!(c[59], 118);
    }

    #[test]
    fn imbalance_insufficient_class_names_it() {
        let ds = dataset(10, 50, None);
        let mut split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 2)).unwrap();
        // starve the last OOD class
        let last = split.n_classes() - 1;
        let mut dropped = 0;
        split.ood_train.retain(|s| {
            let g = split.hidden_gold.get(&s.id).copied();
            if g == Some(last) && dropped < 30 {
                dropped += 1;
                false
            } else {
                true
            }
        });
        let err = apply_imbalance(&split, &ImbalanceConfig { rho: 1.2 }, 0).unwrap_err();
        assert!(matches!(err, crate::Error::Data(ref m) if m.contains("OOD class")), "{err}");
    }

    fn pool(n: usize, labeled: bool) -> EmbeddingDataset {
        let samples = (0..n)
            .map(|i| SampleRecord {
                id: format!("oos-{i}"),
                vector: vec![0.5; 4],
                label: labeled.then_some(0),
                domain: None,
            })
            .collect();
        EmbeddingDataset::new(4, samples).unwrap()
    }

    #[test]
    fn noise_zero_ratio_is_identity() {
        let ds = dataset(10, 20, None);
        let split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 2)).unwrap();
        let p = pool(5, false);
        let out = apply_noise(&split, &NoiseConfig { kind: NoiseKind::OodNoise, ratio: 0.0, pool: &p }, 1).unwrap();
        assert_eq!(out.ood_train, split.ood_train);
    }

    #[test]
    fn noise_appends_rounded_count() {
        let ds = dataset(10, 50, None);
        let split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 2)).unwrap();
        let before = split.ood_train.len();
        assert_eq!(before, 140);
        let p = pool(100, true);
        let out = apply_noise(&split, &NoiseConfig { kind: NoiseKind::IndNoise, ratio: 0.05, pool: &p }, 1).unwrap();
        assert_eq!(out.ood_train.len(), before + 7);
        assert!(out.ood_train.iter().all(|s| s.label.is_none()));
        assert_eq!(out.noise_gold.len(), 7);
        assert_eq!(out.ind_train, split.ind_train);
        assert_eq!(out.test, split.test);
    }

    #[test]
    fn noise_pool_too_small() {
        let ds = dataset(10, 50, None);
        let split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 2)).unwrap();
        let p = pool(3, false);
        let err = apply_noise(&split, &NoiseConfig { kind: NoiseKind::OodNoise, ratio: 0.5, pool: &p }, 1);
        assert!(matches!(err, Err(crate::Error::Data(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let ds = dataset(8, 20, None);
        let split = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.5, 4)).unwrap();
        let p = pool(10, false);
        let noisy = apply_noise(&split, &NoiseConfig { kind: NoiseKind::OodNoise, ratio: 0.1, pool: &p }, 2).unwrap();
        let r = DatasetRef { path: "d.gide".into(), sha256: "x".into() };
        let m = noisy.to_manifest(r.clone(), vec![r]);
        let text = serde_json::to_string(&m).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        let rebuilt = GidSplit::from_manifest(&back, &ds, &[p]).unwrap();
        assert_eq!(rebuilt.ood_train, noisy.ood_train);
        assert_eq!(rebuilt.ind_train, noisy.ind_train);
        assert_eq!(rebuilt.test, noisy.test);
        assert_eq!(rebuilt.ood_train_class_counts(), noisy.ood_train_class_counts());
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gid_core::benchmark::{held_out_ind, DatasetRef, Manifest};
use gid_core::data::content_hash;
use gid_core::evaluation::evaluate_gid_with;
use gid_core::neural::{load_checkpoint, save_checkpoint};
use gid_core::trainers::EpochRecord;
use gid_core::*;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::pca;
use crate::{
    EstimateKArgs, EvalArgs, FormatArg, HyperArgs, KindArg, ModeArg, ReportArgs, SplitArgs,
    SynthArgs, TrainArgs, VariantArgs,
};

/// A bad combination of flags; exits like a parse error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    load_dataset(path, Format::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

fn dataset_ref(path: &Path) -> Result<DatasetRef> {
    Ok(DatasetRef {
        path: path.to_string_lossy().into_owned(),
        sha256: content_hash(path)?,
    })
}

/// Relative references are tried against the working directory, then
/// against the manifest's directory.
fn resolve(reference: &str, manifest: &Path) -> PathBuf {
    let p = PathBuf::from(reference);
    if p.is_absolute() || p.exists() {
        return p;
    }
    manifest.parent().map(|d| d.join(&p)).filter(|q| q.exists()).unwrap_or(p)
}

fn load_checked(r: &DatasetRef, manifest: &Path) -> Result<EmbeddingDataset> {
    let path = resolve(&r.path, manifest);
    let hash = content_hash(&path)?;
    if hash != r.sha256 {
        bail!("{} has changed since the manifest was written (sha256 {hash}, expected {})", path.display(), r.sha256);
    }
    load(&path)
}

fn load_split(path: &Path) -> Result<(Manifest, GidSplit)> {
    let (m, _, split) = load_split_with_data(path)?;
    Ok((m, split))
}

fn load_split_with_data(path: &Path) -> Result<(Manifest, EmbeddingDataset, GidSplit)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    let dataset = load_checked(&manifest.dataset, path)?;
    let pools = manifest
        .pools
        .iter()
        .map(|r| load_checked(r, path))
        .collect::<Result<Vec<_>>>()?;
    let split = GidSplit::from_manifest(&manifest, &dataset, &pools)?;
    Ok((manifest, dataset, split))
}

fn partition_sizes(m: &Manifest) -> BTreeMap<&str, usize> {
    m.partitions.iter().map(|(k, v)| (k.as_str(), v.len())).collect()
}

fn manifest_summary(m: &Manifest) -> serde_json::Value {
    json!({
        "n_ind_classes": m.n_ind_classes,
        "n_ood_classes": m.n_ood_classes,
        "partitions": partition_sizes(m),
    })
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let domains = match a.domains {
        None => None,
        Some(d) if d == 0 || d > a.classes => {
            bail!("--domains must be between 1 and the class count, got {d}")
        }
        Some(d) => Some(
            (0..d)
                .map(|g| (0..a.classes).filter(|c| c * d / a.classes == g).collect())
                .collect(),
        ),
    };
    let spec = SyntheticSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        dim: a.dim,
        class_separation: a.sep,
        within_class_std: a.std,
        domains,
        seed: a.seed,
    };
    let mut ds = generate_synthetic(&spec)?;
    if let Some(prefix) = &a.id_prefix {
        ds.samples.iter_mut().for_each(|s| s.id = format!("{prefix}{}", s.id));
    }
    if a.unlabeled {
        ds.samples.iter_mut().for_each(|s| s.label = None);
        ds.label_names = None;
    }
    let format = match a.format {
        Some(FormatArg::Binary) => Format::Binary,
        Some(FormatArg::Jsonl) => Format::Jsonl,
        None => Format::from_path(&a.out),
    };
    save_dataset(&ds, &a.out, format)?;
    let summary = json!({
        "path": a.out.to_string_lossy(),
        "samples": ds.len(),
        "dim": ds.dim,
        "classes": a.classes,
        "sha256": content_hash(&a.out)?,
    });
    print!("{}", to_json(&summary)?);
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let mode = match a.mode {
        ModeArg::Sd => SplitMode::SingleDomain,
        ModeArg::Md => SplitMode::MultiDomainOverlapping,
        ModeArg::Cd => SplitMode::CrossDomain,
    };
    let config = SplitConfig {
        val_fraction: a.val_fraction,
        test_fraction: a.test_fraction,
        ind_samples_per_class: a.ind_samples_per_class,
        ..SplitConfig::new(mode, a.ood_ratio, a.seed)
    };
    let split = build_split(&ds, &config)?;
    let manifest = split.to_manifest(dataset_ref(&a.data)?, Vec::new());
    write_text(&a.out, &to_json(&manifest)?)?;
    let mut summary = manifest_summary(&manifest);
    if let Some(path) = &a.held_out {
        let held = held_out_ind(&ds, &split);
        save_dataset(&held, path, Format::from_path(path))?;
        summary["held_out"] = json!(held.len());
    }
    print!("{}", to_json(&summary)?);
    Ok(())
}

pub fn variant(a: &VariantArgs) -> Result<()> {
    let (manifest, dataset, split) = load_split_with_data(&a.manifest)?;
    let mut pools = manifest.pools.clone();
    let out = match a.kind {
        KindArg::Imbalance => {
            let rho = a.rho.ok_or_else(|| usage("--kind imbalance needs --rho"))?;
            apply_imbalance(&split, &ImbalanceConfig { rho }, a.seed)?
        }
        KindArg::OodNoise | KindArg::IndNoise => {
            let ratio = a.ratio.ok_or_else(|| usage("noise variants need --ratio"))?;
            let kind = if a.kind == KindArg::OodNoise {
                NoiseKind::OodNoise
            } else {
                NoiseKind::IndNoise
            };
            let pool = match (&a.pool, kind) {
                (Some(path), _) => {
                    let r = dataset_ref(path)?;
                    if !pools.iter().any(|p| p.sha256 == r.sha256) {
                        pools.push(r);
                    }
                    load(path)?
                }
                // IND samples the split left unused; they live in the main dataset
                (None, NoiseKind::IndNoise) => {
                    let pool = held_out_ind(&dataset, &split);
                    if pool.is_empty() {
                        return Err(usage(
                            "the split leaves no IND samples out; pass --pool or split with --ind-samples-per-class",
                        ));
                    }
                    pool
                }
                (None, NoiseKind::OodNoise) => return Err(usage("--kind ood-noise needs --pool")),
            };
            apply_noise(&split, &NoiseConfig { kind, ratio, pool: &pool }, a.seed)?
        }
    };
    let next = out.to_manifest(manifest.dataset.clone(), pools);
    write_text(&a.out, &to_json(&next)?)?;
    print!("{}", to_json(&manifest_summary(&next))?);
    Ok(())
}

fn train_config(method: Method, seed: u64, h: &HyperArgs) -> TrainConfig {
    let mut c = TrainConfig::new(method, seed);
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = h.$flag { c.$($field).+ = v; })*
        };
    }
    set!(
        epochs => epochs,
        batch_size => batch_size,
        lr_base => schedule.lr_base,
        lr_min => schedule.lr_min,
        warmup_epochs => schedule.warmup_epochs,
        dropout_p => dropout_p,
        epsilon => epsilon,
        sk_iters => sk_iters,
        momentum => momentum,
        weight_decay => weight_decay,
        patience => patience,
        kmeans_restarts => kmeans_restarts,
        encoder_layers => encoder_layers,
        hard_pseudo_labels => hard_pseudo_labels,
        sk_standardize => sk_standardize,
        mix_gold_ind => mix_gold_ind,
    );
    if h.pretrain_epochs.is_some() {
        c.pretrain_epochs = h.pretrain_epochs;
    }
    if h.repr_dim.is_some() {
        c.repr_dim = h.repr_dim;
    }
    c
}

fn curve_rows(out: &mut String, prefix: &str, stage: &str, curve: &[EpochRecord]) {
    for e in curve {
        let sc = e.val_sc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{prefix}{stage},{},{},{},{sc}", e.epoch, e.loss, e.lr);
    }
}

fn loss_curve_csv(r: &RunReport) -> String {
    let mut out = String::from("stage,epoch,loss,lr,val_sc\n");
    curve_rows(&mut out, "", "pretrain", &r.pretrain_curve);
    curve_rows(&mut out, "", "main", &r.loss_curve);
    out
}

fn predictions_csv(p: &trainers::TestPredictions) -> String {
    let mut out = String::from("id,gold,predicted\n");
    for ((id, g), q) in p.ids.iter().zip(&p.gold).zip(&p.predicted) {
        let _ = writeln!(out, "{id},{g},{q}");
    }
    out
}

const AGGREGATED: [&str; 6] = ["ind_acc", "ind_f1", "ood_acc", "ood_f1", "all_acc", "all_f1"];

fn metric(m: &MetricsReport, name: &str) -> f64 {
    match name {
        "ind_acc" => m.ind_acc,
        "ind_f1" => m.ind_f1,
        "ood_acc" => m.ood_acc,
        "ood_f1" => m.ood_f1,
        "all_acc" => m.all_acc,
        _ => m.all_f1,
    }
}

/// Mean and sample standard deviation (0 for a single run) per metric.
fn aggregate(reports: &[RunReport]) -> serde_json::Value {
    let n = reports.len() as f64;
    let mut metrics = serde_json::Map::new();
    for name in AGGREGATED {
        let xs: Vec<f64> = reports.iter().map(|r| metric(&r.metrics, name)).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        metrics.insert(name.to_string(), json!({ "mean": mean, "std": std }));
    }
    json!({ "n_runs": reports.len(), "metrics": metrics })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (_, split) = load_split(&a.manifest)?;
    let seeds = match &a.seeds {
        Some(s) if s.is_empty() => return Err(usage("--seeds is empty")),
        Some(s) => s.clone(),
        None => vec![a.seed.unwrap_or(0)],
    };
    let mut uniq = seeds.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != seeds.len() {
        return Err(usage("--seeds lists a seed twice"));
    }
    let configs: Vec<TrainConfig> = seeds.iter().map(|&s| train_config(a.method, s, &a.hyper)).collect();
    configs[0].validate()?;

    let one = |cfg: &TrainConfig| -> Result<RunOutput> {
        log::info!("training {} with seed {}", cfg.method, cfg.seed);
        let mut out = run(&split.clone(), cfg)?;
        if let Some(dir) = &a.out_dir {
            let dir = dir.join(format!("seed-{}", cfg.seed));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let ckpt = dir.join("model.ckpt");
            save_checkpoint(&out.model, &ckpt, cfg.seed, out.report.selected_epoch.unwrap_or(0))?;
            out.report.checkpoint = Some("model.ckpt".into());
            write_text(&dir.join("report.json"), &to_json(&json!({ "config": cfg, "report": &out.report }))?)?;
            write_text(&dir.join("loss_curve.csv"), &loss_curve_csv(&out.report))?;
            write_text(&dir.join("predictions.csv"), &predictions_csv(&out.predictions))?;
        }
        Ok(out)
    };
    let outputs: Vec<RunOutput> = if a.parallel {
        configs.par_iter().map(one).collect::<Result<_>>()?
    } else {
        configs.iter().map(one).collect::<Result<_>>()?
    };

    let reports: Vec<RunReport> = outputs.into_iter().map(|o| o.report).collect();
    let runs: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "metrics": r.metrics.headline().iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
                "selected_epoch": r.selected_epoch,
            })
        })
        .collect();
    let summary = json!({
        "method": a.method,
        "manifest": dataset_ref(&a.manifest)?,
        "config": { "seeds": seeds, "base": &configs[0] },
        "runs": runs,
        "aggregate": aggregate(&reports),
    });
    let text = to_json(&summary)?;
    if let Some(dir) = &a.out_dir {
        write_text(&dir.join("summary.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

struct PredictionRow {
    id: String,
    gold: usize,
    predicted: usize,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = lines
        .next()
        .map(|(_, l)| l.split(',').map(str::trim).collect())
        .unwrap_or_default();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(gi), Some(pi)) = (col("gold"), col("predicted")) else {
        bail!("{}: header must name gold and predicted columns", path.display());
    };
    let ii = col("id");
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let field = |i: usize| -> Result<usize> {
            f.get(i)
                .and_then(|v| v.parse().ok())
                .with_context(|| format!("{}:{}: bad or missing class id", path.display(), n + 1))
        };
        rows.push(PredictionRow {
            id: ii.and_then(|i| f.get(i)).map_or_else(|| rows.len().to_string(), |s| s.to_string()),
            gold: field(gi)?,
            predicted: field(pi)?,
        });
    }
    Ok(rows)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let rows = read_predictions(&a.predictions)?;
    let gold: Vec<usize> = rows.iter().map(|r| r.gold).collect();
    let pred: Vec<usize> = rows.iter().map(|r| r.predicted).collect();
    let scope = if a.map_all { MappingScope::All } else { MappingScope::Ood };
    let report = evaluate_gid_with(&pred, &gold, a.n_ind, a.n_ood, scope)?;
    if let Some(path) = &a.confusion {
        write_text(path, &report.confusion_csv())?;
    }
    let text = to_json(&report)?;
    if let Some(path) = &a.out {
        write_text(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn matrix(samples: &[SampleRecord], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((samples.len(), dim), |(i, j)| samples[i].vector[j] as f64)
}

fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn encoded(model: &JointModel, x: &Array2<f64>, what: &Path) -> Result<Array2<f64>> {
    if model.dims.input != x.ncols() {
        bail!("{}: model expects {}-dimensional input, data has {}", what.display(), model.dims.input, x.ncols());
    }
    Ok(model.encode(x)?)
}

pub fn estimate_k(a: &EstimateKArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let mut x = matrix(&ds.samples, ds.dim);
    if let Some(path) = &a.checkpoint {
        let (model, _) = load_checkpoint(path)?;
        x = encoded(&model, &x, path)?;
    }
    let cfg = KEstimateConfig {
        k_prime: a.k_prime,
        threshold: a.threshold,
        restarts: a.restarts,
    };
    println!("{}", gid_core::estimate_k(&rows(&x), &cfg, a.seed)?);
    Ok(())
}

#[derive(serde::Deserialize)]
struct SavedRun {
    report: RunReport,
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.to_string_lossy().into_owned(), |n| n.to_string_lossy().into_owned())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let (_, split) = load_split(&a.manifest)?;
    let test = split.test().to_vec();
    let dim = test.first().map_or(0, |s| s.vector.len());
    let x = matrix(&test, dim);
    let gold: BTreeMap<&str, usize> = test.iter().map(|s| (s.id.as_str(), s.label.unwrap_or(0))).collect();

    let mut metrics = String::from("run,method,seed,ind_acc,ind_f1,ood_acc,ood_f1,all_acc,all_f1,selected_epoch\n");
    let mut curves = String::from("run,stage,epoch,loss,lr,val_sc\n");
    let mut domain_sc = String::from("run,domain_a,domain_b,sc\n");
    let mut written = vec!["metrics.csv".to_string(), "loss_curves.csv".to_string()];
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    for (i, dir) in a.runs.iter().enumerate() {
        let name = run_name(dir);
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let saved: SavedRun = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let r = &saved.report;
        let m = &r.metrics;
        let _ = writeln!(
            metrics,
            "{name},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.seed,
            m.ind_acc,
            m.ind_f1,
            m.ood_acc,
            m.ood_f1,
            m.all_acc,
            m.all_f1,
            r.selected_epoch.map(|e| e.to_string()).unwrap_or_default()
        );
        curve_rows(&mut curves, &format!("{name},"), "pretrain", &r.pretrain_curve);
        curve_rows(&mut curves, &format!("{name},"), "main", &r.loss_curve);

        let ckpt = dir.join(r.checkpoint.as_deref().unwrap_or("model.ckpt"));
        let (model, _) = load_checkpoint(&ckpt)?;
        let repr = encoded(&model, &x, &ckpt)?;
        let predicted: BTreeMap<String, usize> = read_predictions(&dir.join("predictions.csv"))?
            .into_iter()
            .map(|p| (p.id, p.predicted))
            .collect();
        let proj = pca::project(&repr, 2);
        let mut csv = String::from("id,x,y,gold,predicted\n");
        for (s, row) in test.iter().zip(proj.rows()) {
            let p = predicted
                .get(&s.id)
                .with_context(|| format!("{}: no prediction for test sample {}", dir.display(), s.id))?;
            let y = row.get(1).copied().unwrap_or(0.0);
            let _ = writeln!(csv, "{},{},{},{},{p}", s.id, row[0], y, gold[s.id.as_str()]);
        }
        let file = format!("projection_{i}.csv");
        write_text(&a.out_dir.join(&file), &csv)?;
        written.push(file);

        if a.domain_sc {
            let mut by_domain: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (k, s) in test.iter().enumerate() {
                let d = s.domain.context("--domain-sc needs a dataset with domain ids")?;
                by_domain.entry(d).or_default().push(k);
            }
            let doms: Vec<(&u32, &Vec<usize>)> = by_domain.iter().collect();
            for (p, (da, ia)) in doms.iter().enumerate() {
                for (db, ib) in &doms[p + 1..] {
                    let data: Vec<Vec<f64>> = ia.iter().chain(ib.iter()).map(|&k| repr.row(k).to_vec()).collect();
                    let labels: Vec<usize> = ia.iter().map(|_| 0).chain(ib.iter().map(|_| 1)).collect();
                    let sc = silhouette(&data, &labels)?;
                    let _ = writeln!(domain_sc, "{name},{da},{db},{sc}");
                }
            }
        }
    }
    write_text(&a.out_dir.join("metrics.csv"), &metrics)?;
    write_text(&a.out_dir.join("loss_curves.csv"), &curves)?;
    if a.domain_sc {
        write_text(&a.out_dir.join("domain_sc.csv"), &domain_sc)?;
        written.push("domain_sc.csv".into());
    }
    print!("{}", to_json(&json!({ "out_dir": a.out_dir.to_string_lossy(), "files": written }))?);
    Ok(())
}

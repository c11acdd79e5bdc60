use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kptransfer::datasets::{
    append_results, generate_synthetic, load_checkpoint, load_dataset, load_mpii, read_results, results_path,
    save_checkpoint, save_dataset, split_train_val, Checkpoint, Dataset, ResultRecord,
};
use kptransfer::eval::{
    emit_curves, evaluate_model, render_table, CurvePoint, MetricReport, MetricSpec, Normalization,
};
use kptransfer::hourglass::StackedHourglassNet;
use kptransfer::training::{run_training, EpochRecord, TrainError};
use kptransfer::transfer::{assemble, train_stage1, AssemblyInput, SplitRef, Stage1, StrategyRegistry, TransferMode};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::descriptor::{DataSection, RunDescriptor};
use crate::error::CliError;
use crate::{MetricArg, SubsetArg};

pub const DESCRIPTOR_FILE: &str = "descriptor.toml";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORT_FILE: &str = "report.json";
pub const STAGE1_CACHE: &str = "stage1-cache";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Missing(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn gen_data(seed: u64, count: usize, resolution: usize, out: &Path) -> Result<(), CliError> {
    let ds = generate_synthetic(seed, count, resolution)?;
    save_dataset(&ds, out)?;
    println!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

/// Loads the dataset and returns it with a digest of its source files.
fn load_data(data: &DataSection) -> Result<(Dataset, String), CliError> {
    let mut h = Sha256::new();
    let ds = if let Some(dir) = &data.dir {
        let ds = load_dataset(dir)?;
        let mut files = vec![dir.join("manifest.json")];
        let images = dir.join("images");
        let mut listed: Vec<PathBuf> = fs::read_dir(&images)
            .map_err(|e| io(&images, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| io(&images, e)))
            .collect::<Result<_, _>>()?;
        listed.sort();
        files.extend(listed);
        for f in files {
            h.update(f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().as_bytes());
            h.update(fs::read(&f).map_err(|e| io(&f, e))?);
        }
        ds
    } else {
        let ann = data.mpii_annotations.as_ref().expect("validated");
        let res = data.resolution.expect("validated");
        let ds = load_mpii(ann, data.images.as_ref().expect("validated"), res)?;
        h.update(fs::read(ann).map_err(|e| io(ann, e))?);
        h.update(res.to_le_bytes());
        ds
    };
    Ok((ds, hex(&h.finalize())))
}

fn logger<'a>(
    log: &'a Path,
    run_id: &'a str,
    split_tag: &'a str,
    mode: &'a str,
) -> impl FnMut(&EpochRecord) -> Result<(), TrainError> + 'a {
    move |r| {
        let metrics = BTreeMap::from([
            ("train_loss".to_string(), r.train_loss),
            ("val_pck".to_string(), r.val_pck),
        ]);
        append_results(
            log,
            &ResultRecord {
                run_id: run_id.into(),
                epoch: r.epoch,
                split_tag: split_tag.into(),
                mode: mode.into(),
                metrics,
                learning_rate: r.learning_rate,
                wall_time: r.wall_seconds,
            },
        )?;
        Ok(())
    }
}

pub fn train(config: &Path, root: &Path, force: bool) -> Result<(), CliError> {
    let text = fs::read_to_string(config).map_err(|e| io(config, e))?;
    let desc = RunDescriptor::parse(&text, config)?;
    let exp = &desc.experiment;
    let split = exp.validate()?;
    let tag = exp.split.tag();

    let run_dir = root.join(&desc.run_id);
    if run_dir.exists() {
        if !force {
            return Err(CliError::Usage(format!(
                "run `{}` already exists in {}; pass --force to replace it",
                desc.run_id,
                root.display()
            )));
        }
        fs::remove_dir_all(&run_dir).map_err(|e| io(&run_dir, e))?;
    }

    let (dataset, data_digest) = load_data(&desc.data)?;
    if dataset.resolution() != exp.arch.input_resolution {
        return Err(CliError::Usage(format!(
            "dataset resolution {} does not match arch input_resolution {}",
            dataset.resolution(),
            exp.arch.input_resolution
        )));
    }
    let (train, val) = split_train_val(&dataset, desc.data.val_count, exp.seed)?;

    let needs_stage1 = StrategyRegistry::builtin().get(exp.mode.name())?.requires_stage1();
    let stage1 = if needs_stage1 {
        Some(obtain_stage1(&desc, &split, &data_digest, root, &train, &val)?)
    } else {
        None
    };
    let assembled = assemble(
        exp.mode,
        &AssemblyInput {
            split: &split,
            stage1: stage1.as_ref().map(|(net, id)| Stage1 { net, id }),
            arch: &exp.arch,
            seed: exp.seed,
            head_policy: exp.head_policy,
        },
    )?;

    fs::create_dir_all(&run_dir).map_err(|e| io(&run_dir, e))?;
    let descriptor_copy = run_dir.join(DESCRIPTOR_FILE);
    fs::write(&descriptor_copy, &text).map_err(|e| io(&descriptor_copy, e))?;
    let log = results_path(&run_dir);
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let mut log_epoch = logger(&log, &desc.run_id, &tag, exp.mode.name());
    let descriptor_json = serde_json::to_value(exp).expect("descriptor serializes");
    let stage1_id = assembled.stage1_id.clone();
    let mut observer = |r: &EpochRecord, best: Option<&StackedHourglassNet<f32>>| {
        log_epoch(r)?;
        if let Some(net) = best {
            let metadata = json!({
                "run_id": desc.run_id,
                "epoch": r.epoch,
                "val_pck": r.val_pck,
                "stage1_id": stage1_id,
                "descriptor": descriptor_json,
            });
            save_checkpoint(
                &Checkpoint {
                    net: net.clone(),
                    metadata,
                },
                &ckpt,
            )?;
        }
        println!(
            "{} epoch {:>3}  loss {:.5}  val {:5.1}  lr {:e}",
            desc.run_id, r.epoch, r.train_loss, r.val_pck, r.learning_rate
        );
        Ok(())
    };
    let outcome = run_training(assembled.job(), &train, &val, &exp.stage2_training(), &mut observer)?;
    write_json(&run_dir.join(HISTORY_FILE), &outcome.history)?;
    let report = evaluate_model(&outcome.best, &val, split.s2(), &MetricSpec::pckh(0.5))?;
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    println!(
        "{}: best val {:.1} at epoch {} of {}; {} average {}",
        desc.run_id,
        outcome.history.best_val_pck(),
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        report.metric,
        report.average().map_or_else(|| "n/a".into(), |a| format!("{a:.1}")),
    );
    Ok(())
}

/// Loads the configured stage-1 checkpoint, or trains one and caches it
/// under a key derived from everything that determines it.
fn obtain_stage1(
    desc: &RunDescriptor,
    split: &kptransfer::keypoints::JointSubsetSplit,
    data_digest: &str,
    root: &Path,
    train: &Dataset,
    val: &Dataset,
) -> Result<(StackedHourglassNet<f32>, String), CliError> {
    let exp = &desc.experiment;
    if let Some(path) = &exp.stage1_checkpoint {
        let ck = load_checkpoint(path)?;
        let id = path
            .file_name()
            .map_or_else(|| "stage1".into(), |n| n.to_string_lossy().into_owned());
        return Ok((ck.net, id));
    }
    let arch = exp.stage1_arch(split).expect("validated");
    let config = exp.stage1_training().expect("validated");
    let key_doc = json!({
        "split": split.to_json(),
        "arch": arch,
        "training": config,
        "data": data_digest,
        "val_count": desc.data.val_count,
    });
    let key = hex(&Sha256::digest(key_doc.to_string().as_bytes())[..12]);
    let id = format!("stage1-{key}");
    let dir = root.join(STAGE1_CACHE).join(&key);
    let path = dir.join(CHECKPOINT_FILE);
    if path.exists() {
        println!("stage 1: using cached {}", path.display());
        return Ok((load_checkpoint(&path)?.net, id));
    }
    let tmp = root.join(STAGE1_CACHE).join(format!(".{key}.{}", std::process::id()));
    fs::create_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
    let log = results_path(&tmp);
    let tag = exp.split.tag();
    let outcome = {
        let mut log_epoch = logger(&log, &id, &tag, "stage1");
        let mut observer = |r: &EpochRecord, _: Option<&StackedHourglassNet<f32>>| {
            log_epoch(r)?;
            println!(
                "stage 1 epoch {:>3}  loss {:.5}  val {:5.1}",
                r.epoch, r.train_loss, r.val_pck
            );
            Ok(())
        };
        train_stage1(split, &arch, train, val, &config, &mut observer)?
    };
    let metadata = json!({ "stage1_id": id.as_str(), "key": key_doc });
    save_checkpoint(
        &Checkpoint {
            net: outcome.best.clone(),
            metadata,
        },
        tmp.join(CHECKPOINT_FILE),
    )?;
    write_json(&tmp.join(HISTORY_FILE), &outcome.history)?;
    match fs::rename(&tmp, &dir) {
        Ok(()) => {}
        // another process finished the same stage 1 first; theirs is identical
        Err(_) if path.exists() => {
            let _ = fs::remove_dir_all(&tmp);
        }
        Err(e) => return Err(io(&dir, e)),
    }
    Ok((outcome.best, id))
}

fn resolve_split(arg: &str) -> SplitRef {
    if Path::new(arg).is_file() {
        SplitRef::File { file: arg.into() }
    } else {
        SplitRef::Tag(arg.into())
    }
}

pub fn eval(
    checkpoint: &Path,
    dataset: &Path,
    split: &str,
    metric: MetricArg,
    threshold: f64,
    subset: SubsetArg,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if !(threshold > 0.0) {
        return Err(CliError::Usage(format!("threshold must be positive, got {threshold}")));
    }
    let split = resolve_split(split)
        .resolve()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let joints = match subset {
        SubsetArg::S1 => split.s1(),
        SubsetArg::S2 => split.s2(),
    };
    let normalization = match metric {
        MetricArg::Pckh => Normalization::Head,
        MetricArg::PckBbox => Normalization::Bbox,
        MetricArg::PckHeatmap => Normalization::HeatmapTenth {
            image_resolution: ds.resolution(),
            heatmap_resolution: ck.net.arch().heatmap_resolution,
        },
    };
    let report = evaluate_model(
        &ck.net,
        &ds,
        joints,
        &MetricSpec {
            threshold,
            normalization,
        },
    )?;
    let label = checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    print!("{}", render_table(&[(label, report.clone())])?.text);
    let out = out.unwrap_or_else(|| {
        let mut p = checkpoint.as_os_str().to_owned();
        p.push(".eval.json");
        p.into()
    });
    write_json(&out, &report)?;
    println!(
        "{} over {} samples written to {}",
        report.metric,
        report.sample_count,
        out.display()
    );
    Ok(())
}

/// Run directories under `runs`, sorted by name.
fn run_dirs(runs: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)
        .map_err(|e| io(runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(DESCRIPTOR_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Missing(format!("no runs found in {}", runs.display())));
    }
    Ok(dirs)
}

fn read_descriptor(dir: &Path) -> Result<RunDescriptor, CliError> {
    let path = dir.join(DESCRIPTOR_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let d: RunDescriptor = toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    Ok(d)
}

pub fn report(runs: &Path, split: Option<&str>, csv: bool) -> Result<(), CliError> {
    let mut by_mode: BTreeMap<TransferMode, Vec<MetricReport>> = BTreeMap::new();
    for dir in run_dirs(runs)? {
        let desc = read_descriptor(&dir)?;
        if split.is_some_and(|s| s != desc.experiment.split.tag()) {
            continue;
        }
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        let r: MetricReport =
            serde_json::from_str(&text).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
        by_mode.entry(desc.experiment.mode).or_default().push(r);
    }
    if by_mode.is_empty() {
        return Err(CliError::Missing(format!(
            "no runs on split `{}` in {}",
            split.unwrap_or_default(),
            runs.display()
        )));
    }
    let rows = by_mode
        .iter()
        .map(|(m, reports)| Ok((m.label().to_string(), MetricReport::merge(reports)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let table = render_table(&rows)?;
    print!("{}", if csv { table.csv } else { table.text });
    Ok(())
}

pub fn curves(runs: &Path) -> Result<(), CliError> {
    let mut points = Vec::new();
    for dir in run_dirs(runs)? {
        let path = results_path(&dir);
        for r in read_results(&path)? {
            let accuracy = *r
                .metrics
                .get("val_pck")
                .ok_or_else(|| CliError::Missing(format!("{}: epoch {} has no val_pck", path.display(), r.epoch)))?;
            points.push(CurvePoint {
                config: r.run_id,
                epoch: r.epoch,
                accuracy,
                learning_rate: r.learning_rate,
            });
        }
    }
    print!("{}", emit_curves(&points)?);
    Ok(())
}

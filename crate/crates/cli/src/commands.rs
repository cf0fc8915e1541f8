use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use shrimpnet::adversarial::{robustness_sweep, SweepRow, DEFAULT_EPSILONS};
use shrimpnet::datapipe::{
    generate_synthetic, load_dataset, load_prepared, save_prepared, split, write_image_tree, BackgroundMode,
    DatasetSplit, PreparedInfo, Sample, SplitKind, IMAGE_EXTENSIONS,
};
use shrimpnet::explain::{heatmap, overlay_file_name, render_overlay, CamMethod};
use shrimpnet::metrics::{sweep_table, EvalReport};
use shrimpnet::model::{Checkpoint, ModelSpec};
use shrimpnet::rng;
use shrimpnet::trainer::{evaluate as run_eval, grid_search, Grid, TrainConfig, Trainer, CONFIG_KEYS};

use crate::manifest::RunManifest;
use crate::{
    AttackArgs, CheckpointArgs, EvalArgs, ExplainArgs, GridArgs, PrepareArgs, ReportArgs, SynthArgs, TrainArgs,
    TrainOptions,
};

const PREPARED_FILE: &str = "data.bin";

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory `{}`", dir.display()))
}

fn write(path: PathBuf, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("cannot write `{}`", path.display()))
}

fn json(value: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut manifest = RunManifest::start("synth");
    manifest.seed = Some(a.seed);
    let set = generate_synthetic(a.per_class, a.classes, a.size, a.seed)?;
    create_out(&a.out)?;
    write_image_tree(&set.samples, &a.out)?;
    let mut boxes = String::from("source_id\ty0\tx0\ty1\tx1\n");
    for (s, b) in set.samples.iter().zip(&set.boxes) {
        let _ = writeln!(boxes, "{}\t{}\t{}\t{}\t{}", s.source_id, b.y0, b.x0, b.y1, b.x1);
    }
    write(a.out.join("boxes.tsv"), boxes)?;
    manifest.finish(&a.out)?;
    println!("wrote {} images in {} classes to {}", set.samples.len(), set.class_names.len(), a.out.display());
    Ok(())
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let mut manifest = RunManifest::start("prepare");
    manifest.seed = Some(a.seed);
    let size = (a.size[0], a.size[1]);
    let background = BackgroundMode::parse(&a.bg, a.bg_cutoff)?;
    let (samples, class_names) = load_dataset(&a.data, size, background)?;
    manifest.input_tree(&a.data, &IMAGE_EXTENSIONS)?;
    let sp = split(samples, &class_names, a.seed)?;
    let info = PreparedInfo {
        image_size: size,
        background: background.name().to_string(),
        split_seed: a.seed,
        class_names: class_names.clone(),
    };
    create_out(&a.out)?;
    save_prepared(&sp, &info, &a.out.join(PREPARED_FILE))?;
    write(a.out.join("split.tsv"), sp.manifest())?;
    write(a.out.join("classes.txt"), class_names.join("\n") + "\n")?;
    let counts: BTreeMap<&str, BTreeMap<&str, usize>> = SplitKind::ALL
        .iter()
        .map(|&k| {
            let mut per_class: BTreeMap<&str, usize> = class_names.iter().map(|c| (c.as_str(), 0)).collect();
            for s in sp.part(k) {
                *per_class.get_mut(class_names[s.label].as_str()).expect("known class") += 1;
            }
            (k.as_str(), per_class)
        })
        .collect();
    write(
        a.out.join("summary.json"),
        json(&serde_json::json!({ "info": info, "counts": counts }))?,
    )?;
    manifest.finish(&a.out)?;
    println!(
        "prepared {} images: {} train / {} validation / {} test",
        sp.len(),
        sp.train.len(),
        sp.validation.len(),
        sp.test.len()
    );
    Ok(())
}

fn load_data(dir: &Path, manifest: &mut RunManifest) -> Result<(DatasetSplit, PreparedInfo)> {
    let path = dir.join(PREPARED_FILE);
    if !path.is_file() {
        bail!(
            "`{}` is not a prepared dataset directory (missing {PREPARED_FILE}; run `shrimpnet prepare` first)",
            dir.display()
        );
    }
    manifest.input(&path)?;
    Ok(load_prepared(&path)?)
}

fn load_checkpoint(path: &Path, manifest: &mut RunManifest) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!("checkpoint `{}` does not exist", path.display());
    }
    manifest.input(path)?;
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint `{}`", path.display()))
}

fn check_compatible(spec: &ModelSpec, info: &PreparedInfo) -> Result<()> {
    if spec.input_size != info.image_size {
        bail!(
            "checkpoint expects {}x{} inputs but the data was prepared at {}x{}",
            spec.input_size.0,
            spec.input_size.1,
            info.image_size.0,
            info.image_size.1
        );
    }
    if spec.num_classes != info.class_names.len() {
        bail!(
            "checkpoint has {} classes but the data has {} ({})",
            spec.num_classes,
            info.class_names.len(),
            info.class_names.join(", ")
        );
    }
    if spec.in_channels != 3 {
        bail!("checkpoint expects {} input channels; prepared images are RGB", spec.in_channels);
    }
    Ok(())
}

/// Defaults, then the config file, then explicit flags.
fn build_config(o: &TrainOptions, fallback_file: Option<&Path>) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = o.config.as_deref().or(fallback_file) {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config `{}`", path.display()))?;
        config
            .apply_text(&text)
            .with_context(|| format!("in config file `{}`", path.display()))?;
    }
    let flags: [(&str, Option<String>); 14] = [
        ("epochs", o.epochs.map(|v| v.to_string())),
        ("batch_size", o.batch_size.map(|v| v.to_string())),
        ("initial_lr", o.lr.map(|v| v.to_string())),
        ("step_size", o.step_size.map(|v| v.to_string())),
        ("gamma", o.gamma.map(|v| v.to_string())),
        ("patience", o.patience.map(|v| v.to_string())),
        ("freeze_depth", o.freeze.map(|v| v.to_string())),
        ("seed", o.seed.map(|v| v.to_string())),
        ("mixup_alpha", o.mixup_alpha.map(|v| v.to_string())),
        ("cutmix_alpha", o.cutmix_alpha.map(|v| v.to_string())),
        ("augment_probability", o.augment_prob.map(|v| v.to_string())),
        ("fgsm_epsilon", o.fgsm_eps.map(|v| v.to_string())),
        ("adversarial_fraction", o.adv_fraction.map(|v| v.to_string())),
        ("filters", o.filters.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config
                .set(key, &v)
                .map_err(|e| anyhow::anyhow!("--{}: {e}", key.replace('_', "-")))?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn config_map(config: &TrainConfig) -> BTreeMap<String, String> {
    CONFIG_KEYS
        .iter()
        .filter_map(|k| config.get(k).map(|v| (k.to_string(), v)))
        .collect()
}

fn input_size(split: &DatasetSplit) -> (usize, usize) {
    split.train[0].image.shape()[1..3].try_into().map(|s: [usize; 2]| (s[0], s[1])).expect("C,H,W images")
}

fn best_checkpoint(spec: &ModelSpec, params: &shrimpnet::model::Params<f32>, config: &TrainConfig) -> Checkpoint {
    Checkpoint::new(
        spec.clone(),
        params.clone(),
        config.freeze_depth,
        &rng::derive(config.seed, 0, 0),
    )
}

pub fn train(a: TrainArgs) -> Result<()> {
    let o = &a.options;
    let mut manifest = RunManifest::start("train");
    let (sp, info) = load_data(&o.data, &mut manifest)?;
    if sp.train.is_empty() || sp.validation.is_empty() {
        bail!("the prepared dataset needs non-empty train and validation splits");
    }
    let resume_config = a
        .resume
        .as_deref()
        .and_then(Path::parent)
        .map(|d| d.join("config.txt"))
        .filter(|p| p.is_file());
    let config = build_config(o, resume_config.as_deref())?;
    let mut trainer = if let Some(path) = &a.resume {
        let ck = load_checkpoint(path, &mut manifest)?;
        check_compatible(&ck.spec, &info)?;
        Trainer::resume(config.clone(), ck)?
    } else {
        let spec = config.model.spec(sp.num_classes(), input_size(&sp));
        match &a.init {
            Some(path) => {
                let ck = load_checkpoint(path, &mut manifest)?;
                check_compatible(&ck.spec, &info)?;
                if ck.spec != spec {
                    bail!(
                        "the architecture in `{}` does not match the configured model (filters {:?})",
                        path.display(),
                        config.model.filters
                    );
                }
                Trainer::with_params(config.clone(), spec, ck.params)?
            }
            None => Trainer::new(config.clone(), spec)?,
        }
    };
    manifest.seed = Some(config.seed);
    manifest.config = Some(config_map(&config));
    create_out(&o.out)?;
    write(o.out.join("config.txt"), config.to_text())?;

    let augment_path = o.out.join("augment.log");
    let mut augment_text = if a.resume.is_some() {
        fs::read_to_string(&augment_path).unwrap_or_default()
    } else {
        String::new()
    };
    let mut logged = 0;
    while let Some(record) = trainer.step_epoch(&sp)? {
        println!("{}", record.log_line());
        let history = trainer.history().expect("history after an epoch");
        let log: String = history.epochs.iter().map(|r| r.log_line() + "\n").collect();
        write(o.out.join("train.log"), log)?;
        for e in &trainer.augment_log()[logged..] {
            augment_text.push_str(&e.log_line());
            augment_text.push('\n');
        }
        logged = trainer.augment_log().len();
        write(augment_path.clone(), &augment_text)?;
        trainer.checkpoint().save(&o.out.join("last.ckpt"))?;
    }
    let outcome = trainer.outcome();
    best_checkpoint(trainer.spec(), &outcome.best_params, &config).save(&o.out.join("model.ckpt"))?;
    write(
        o.out.join("history.json"),
        json(&serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "stopped_early": outcome.stopped_early,
            "epochs": outcome.history.epochs,
        }))?,
    )?;
    manifest.finish(&o.out)?;
    println!(
        "best epoch {} (val loss {:.6}); {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        if outcome.stopped_early { "stopped early" } else { "ran all epochs" }
    );
    Ok(())
}

fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .with_context(|| format!("--axis `{spec}` must look like key=v1,v2"))?;
    let sep = if key.trim() == "filters" { ';' } else { ',' };
    let values = values.split(sep).map(|v| v.trim().to_string()).collect();
    Ok((key.trim().to_string(), values))
}

pub fn gridsearch(a: GridArgs) -> Result<()> {
    let o = &a.options;
    let mut manifest = RunManifest::start("gridsearch");
    let (sp, _) = load_data(&o.data, &mut manifest)?;
    if sp.train.is_empty() || sp.validation.is_empty() {
        bail!("the prepared dataset needs non-empty train and validation splits");
    }
    let base = build_config(o, None)?;
    let mut grid = match &a.grid {
        Some(path) => {
            manifest.input(path)?;
            let text = fs::read_to_string(path).with_context(|| format!("cannot read grid `{}`", path.display()))?;
            Grid::parse(&text).with_context(|| format!("in grid file `{}`", path.display()))?
        }
        None => Grid::default(),
    };
    for spec in &a.axes {
        let (key, values) = parse_axis(spec)?;
        grid.push(&key, values)?;
    }
    if grid.axes.is_empty() {
        grid = grid.with_default_axes(&base);
    }
    manifest.seed = Some(base.seed);
    manifest.config = Some(config_map(&base));
    create_out(&o.out)?;
    let outcome = grid_search(&grid, &base, &sp, |cell| {
        let desc: Vec<String> = cell.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "cell {}: {} -> best val acc {:.4}, best val loss {:.6}",
            cell.index,
            desc.join(" "),
            cell.best_val_acc,
            cell.best_val_loss
        );
    })?;
    write(o.out.join("grid.tsv"), outcome.to_tsv())?;
    write(o.out.join("best_config.txt"), outcome.best_config.to_text())?;
    let spec = outcome.best_config.model.spec(sp.num_classes(), input_size(&sp));
    best_checkpoint(&spec, &outcome.best_outcome.best_params, &outcome.best_config)
        .save(&o.out.join("model.ckpt"))?;
    manifest.finish(&o.out)?;
    Ok(())
}

struct Loaded {
    manifest: RunManifest,
    ck: Checkpoint,
    split: DatasetSplit,
}

fn load_model_and_data(command: &str, c: &CheckpointArgs) -> Result<Loaded> {
    let mut manifest = RunManifest::start(command);
    let ck = load_checkpoint(&c.checkpoint, &mut manifest)?;
    let (split, info) = load_data(&c.data, &mut manifest)?;
    check_compatible(&ck.spec, &info)?;
    if c.batch_size == 0 {
        bail!("--batch-size must be positive");
    }
    create_out(&c.out)?;
    Ok(Loaded { manifest, ck, split })
}

fn parse_split(name: &str) -> Result<SplitKind> {
    SplitKind::ALL
        .into_iter()
        .find(|k| k.as_str() == name)
        .with_context(|| format!("unknown split `{name}` (expected train, validation or test)"))
}

fn build_report(
    l: &Loaded,
    samples: &[Sample],
    batch_size: usize,
    iterations: usize,
    z: f64,
    seed: u64,
) -> Result<(EvalReport, String)> {
    if samples.is_empty() {
        bail!("the selected split is empty");
    }
    let ev = run_eval(&l.ck.spec, &l.ck.params, samples, batch_size)?;
    let probs: Vec<f64> = ev.probabilities.data().iter().map(|&p| f64::from(p)).collect();
    let report = EvalReport::build(
        &l.split.class_names,
        &ev.labels,
        &ev.predictions,
        &probs,
        iterations,
        z,
        seed,
    )?;
    let k = l.split.num_classes();
    let mut tsv = String::from("source_id\tlabel\tprediction");
    for c in &l.split.class_names {
        let _ = write!(tsv, "\tp_{c}");
    }
    tsv.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let _ = write!(
            tsv,
            "{}\t{}\t{}",
            s.source_id, l.split.class_names[ev.labels[i]], l.split.class_names[ev.predictions[i]]
        );
        for p in &probs[i * k..(i + 1) * k] {
            let _ = write!(tsv, "\t{p:.6}");
        }
        tsv.push('\n');
    }
    Ok((report, tsv))
}

fn write_report(out: &Path, report: &EvalReport, predictions: &str) -> Result<()> {
    write(out.join("report.json"), report.to_json()?)?;
    write(out.join("report.txt"), report.to_text())?;
    write(out.join("predictions.tsv"), predictions)
}

pub fn evaluate(a: EvalArgs) -> Result<()> {
    let kind = parse_split(&a.split)?;
    let mut l = load_model_and_data("evaluate", &a.common)?;
    l.manifest.seed = Some(a.seed);
    let (report, tsv) = build_report(
        &l,
        l.split.part(kind),
        a.common.batch_size,
        a.bootstrap_iterations,
        a.z,
        a.seed,
    )?;
    write_report(&a.common.out, &report, &tsv)?;
    print!("{}", report.to_text());
    l.manifest.finish(&a.common.out)
}

fn sweep(l: &Loaded, eps: &[f64], clip: bool, batch_size: usize) -> Result<Vec<SweepRow>> {
    if l.split.test.is_empty() {
        bail!("the test split is empty");
    }
    let validation = (!l.split.validation.is_empty()).then_some(l.split.validation.as_slice());
    Ok(robustness_sweep(&l.ck.spec, &l.ck.params, &l.split.test, validation, eps, clip, batch_size)?)
}

fn write_sweep(out: &Path, rows: &[SweepRow]) -> Result<()> {
    write(out.join("sweep.tsv"), sweep_table(rows))?;
    write(out.join("sweep.json"), json(&rows)?)
}

pub fn attack(a: AttackArgs) -> Result<()> {
    let eps = a.eps_list.unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
    let l = load_model_and_data("attack", &a.common)?;
    let rows = sweep(&l, &eps, !a.no_clip, a.common.batch_size)?;
    write_sweep(&a.common.out, &rows)?;
    print!("{}", sweep_table(&rows));
    l.manifest.finish(&a.common.out)
}

fn parse_methods(name: &str) -> Result<Vec<CamMethod>> {
    if name == "all" {
        return Ok(CamMethod::ALL.to_vec());
    }
    name.parse::<CamMethod>()
        .map(|m| vec![m])
        .map_err(|_| anyhow::anyhow!("unknown CAM method `{name}` (expected gradcam, gradcampp, xgradcam or all)"))
}

fn explain_images(
    l: &Loaded,
    images: &[&Sample],
    methods: &[CamMethod],
    class: Option<usize>,
    out: &Path,
    dump_text: bool,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for s in images {
        let target = match class {
            Some(c) => c,
            None => run_eval(&l.ck.spec, &l.ck.params, std::slice::from_ref(*s), 1)?.predictions[0],
        };
        let class_name = &l.split.class_names[target];
        for &m in methods {
            let h = heatmap(&l.ck.spec, &l.ck.params, &s.image, target, m)?;
            let path = out.join(overlay_file_name(&s.source_id, m, class_name));
            render_overlay(&h, &s.image, &path)?;
            if dump_text {
                write(path.with_extension("txt"), h.to_text())?;
            }
            written.push(path);
        }
    }
    Ok(written)
}

fn find_sample<'a>(split: &'a DatasetSplit, id: &str) -> Result<&'a Sample> {
    SplitKind::ALL
        .iter()
        .flat_map(|&k| split.part(k))
        .find(|s| s.source_id == id)
        .with_context(|| format!("no image with source id `{id}` in the prepared dataset"))
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let methods = parse_methods(&a.method)?;
    let l = load_model_and_data("explain", &a.common)?;
    let class = match &a.class {
        Some(name) => Some(l.split.class_names.iter().position(|c| c == name).with_context(|| {
            format!("unknown class `{name}` (valid: {})", l.split.class_names.join(", "))
        })?),
        None => None,
    };
    let images: Vec<&Sample> = if a.images.is_empty() {
        l.split.test.iter().take(a.limit).collect()
    } else {
        a.images.iter().map(|id| find_sample(&l.split, id)).collect::<Result<_>>()?
    };
    for p in explain_images(&l, &images, &methods, class, &a.common.out, a.dump_text)? {
        println!("{}", p.display());
    }
    l.manifest.finish(&a.common.out)
}

pub fn report(a: ReportArgs) -> Result<()> {
    let eps = a.eps_list.unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
    let mut l = load_model_and_data("report", &a.common)?;
    l.manifest.seed = Some(a.seed);
    let out = &a.common.out;
    let (mut report, tsv) = build_report(
        &l,
        &l.split.test,
        a.common.batch_size,
        a.bootstrap_iterations,
        shrimpnet::metrics::DEFAULT_Z,
        a.seed,
    )?;
    let rows = sweep(&l, &eps, true, a.common.batch_size)?;
    write_sweep(out, &rows)?;
    report.robustness = Some(rows);
    write_report(out, &report, &tsv)?;
    let cams = out.join("cams");
    create_out(&cams)?;
    let images: Vec<&Sample> = l.split.test.iter().take(a.limit).collect();
    explain_images(&l, &images, &CamMethod::ALL, None, &cams, false)?;
    print!("{}", report.to_text());
    l.manifest.finish(out)
}

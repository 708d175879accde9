use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fpmine_core::encoders::generate_synthetic_dataset;
use fpmine_core::evaluation::{
    branch_variants, component_variants, evaluate_fusions, fpm_activity, negative_evidence_report,
    run_ablation, AblationTable, Variant,
};
use fpmine_core::training::{gradcheck, GradcheckOptions, GradcheckReport, LogRecord};
use fpmine_core::{Checkpoint, Dataset, Error, Fusion, Model, Sampler, SyntheticConfig, TrainConfig, Trainer};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::args::{AblateArgs, EvalArgs, GenDataArgs, GradcheckArgs, Split, Table, TrainArgs, TrainOverrides};
use crate::error::{CliError, CliResult};
use crate::manifest::{
    prepare_run_dir, write_atomic, AblateSettings, EvalSettings, GenDataSettings, GradcheckSettings,
    RunManifest, Settings, TrainSettings, ABLATION, CHECKPOINT, LOG, RESULTS,
};

/// Identities and samples per identity of the stand-in gradcheck dataset.
const GRADCHECK_DATA: (usize, usize) = (8, 2);

pub struct Context {
    pub quiet: bool,
}

impl Context {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Reads a TOML or JSON settings file; absent keys keep their defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    fs::canonicalize(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        Error::Config(m) | Error::Input(m) => CliError::Data(m),
        other => other.into(),
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("results serialize");
    v.push(b'\n');
    v
}

fn apply_overrides(mut c: TrainConfig, o: &TrainOverrides) -> TrainConfig {
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = o.val_fraction {
        c.val_fraction = v;
    }
    if let Some(v) = o.eval_every {
        c.eval_every = v;
    }
    if o.max_grad_norm.is_some() {
        c.max_grad_norm = o.max_grad_norm;
    }
    let b = &mut c.model.branches;
    b.global &= !o.no_global;
    b.local &= !o.no_local;
    b.fpm &= !o.no_fpm;
    c.model.mining_mask &= !o.no_mask;
    c.local_neg_ranking &= !o.no_local_neg_ranking;
    c.balanced &= !o.unbalanced;
    c.model.learnable_boundary |= o.learnable_boundary;
    c
}

/// Fits the encoder to the dataset's raw dimensions and validates.
fn fit_to_dataset(mut c: TrainConfig, ds: &Dataset) -> CliResult<TrainConfig> {
    c.model.encoder = c.model.encoder.with_dataset_dims(&ds.dims);
    c.validate()?;
    Ok(c)
}

pub fn gen_data(args: GenDataArgs, ctx: &Context) -> CliResult<()> {
    let mut synthetic: SyntheticConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.hard_negative_fraction {
        synthetic.hard_negative_fraction = v;
    }
    if let Some(v) = args.noise {
        synthetic.noise = v;
    }
    if let Some(v) = args.nuisance {
        synthetic.nuisance = v;
    }
    synthetic.validate()?;
    let settings = GenDataSettings {
        seed: args.seed,
        identities: args.identities,
        per_identity: args.per_identity,
        synthetic,
        binary: args.binary,
    };
    run_gen_data(settings, &args.out, ctx)
}

pub fn run_gen_data(s: GenDataSettings, out: &Path, ctx: &Context) -> CliResult<()> {
    let dir = prepare_run_dir(out)?;
    let mut manifest = RunManifest::begin(Settings::GenData(s.clone()), &[])?;
    manifest.write(&dir)?;
    let ds = generate_synthetic_dataset(s.seed, s.identities, s.per_identity, &s.synthetic)?;
    let name = if s.binary { "dataset.bin" } else { "dataset.json" };
    let mut bytes = Vec::new();
    if s.binary {
        ds.write_to(&mut bytes)?;
    } else {
        serde_json::to_writer(&mut bytes, &ds).map_err(Error::from)?;
    }
    write_atomic(&dir.join(name), &bytes)?;
    manifest.finish(&dir, &[name])?;
    ctx.progress(format!(
        "wrote {} samples of {} identities to {}",
        ds.samples.len(),
        s.identities,
        dir.join(name).display()
    ));
    Ok(())
}

pub fn train(args: TrainArgs, ctx: &Context) -> CliResult<()> {
    let data = absolute(&args.data)?;
    let ds = load_dataset(&data)?;
    let file: TrainConfig = load_config(args.config.as_deref())?;
    let config = fit_to_dataset(apply_overrides(file, &args.overrides), &ds)?;
    let settings = TrainSettings {
        data,
        config,
        resume: args.resume,
    };
    run_train(settings, &args.out, ctx)
}

pub fn run_train(s: TrainSettings, out: &Path, ctx: &Context) -> CliResult<()> {
    let dir = prepare_run_dir(out)?;
    let ds = load_dataset(&s.data)?;
    let mut manifest = RunManifest::begin(Settings::Train(s.clone()), &[("data", &s.data)])?;
    manifest.write(&dir)?;

    let ckpt_path = dir.join(CHECKPOINT);
    let resuming = s.resume && ckpt_path.exists();
    let mut trainer = if resuming {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.config != s.config {
            return Err(CliError::Config(
                "the existing checkpoint was trained with a different config".into(),
            ));
        }
        ctx.progress(format!("resuming at step {}", ckpt.step));
        Trainer::from_checkpoint(&ds, ckpt)?
    } else {
        Trainer::new(&ds, s.config.clone())?
    };

    let log_path = dir.join(LOG);
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(log_file);
    let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", log_path.display()));
    let epochs = s.config.epochs;
    while !trainer.is_finished() {
        trainer.step_once()?;
        for rec in std::mem::take(&mut trainer.log) {
            serde_json::to_writer(&mut log, &rec).map_err(Error::from)?;
            log.write_all(b"\n").map_err(io)?;
            if let LogRecord::Epoch { epoch, mean_loss, validation, .. } = &rec {
                log.flush().map_err(io)?;
                trainer.checkpoint().save(&ckpt_path)?;
                let val = validation
                    .as_ref()
                    .map(|v| format!("  val R@1 {:.2}", v.get("r1").copied().unwrap_or(f64::NAN)))
                    .unwrap_or_default();
                ctx.progress(format!("epoch {}/{epochs}  loss {mean_loss:.4}{val}", epoch + 1));
            }
        }
    }
    log.flush().map_err(io)?;
    trainer.checkpoint().save(&ckpt_path)?;

    let held_out = trainer.val_indices().to_vec();
    let model = &trainer.model;
    let validation = if held_out.is_empty() {
        None
    } else {
        Some(evaluate_fusions(model, &ds, &held_out, &held_out, &[model.fusion()])?.remove(0))
    };
    let results = json!({
        "step": trainer.step,
        "epochs": epochs,
        "boundary": model.boundary(),
        "held_out_samples": held_out.len(),
        "validation": validation,
    });
    write_atomic(&dir.join(RESULTS), &to_json(&results))?;
    manifest.finish(&dir, &[CHECKPOINT, LOG, RESULTS])?;
    ctx.progress(format!("checkpoint written to {}", ckpt_path.display()));
    Ok(())
}

fn parse_fusions(names: &[String], model: &Model) -> CliResult<Vec<Fusion>> {
    if names.is_empty() {
        return Ok(vec![model.fusion()]);
    }
    if names.iter().any(|n| n == "all") {
        return Ok(Fusion::ALL
            .into_iter()
            .filter(|f| model.spec.branches.fpm || !f.uses_fpm())
            .collect());
    }
    names.iter().map(|n| Ok(n.parse::<Fusion>()?)).collect()
}

fn parse_pair(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Config(format!("`{s}` is not an IMAGE,TEXT pair of sample indices"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn eval(args: EvalArgs, ctx: &Context) -> CliResult<()> {
    let checkpoint = absolute(&args.checkpoint)?;
    let model = Checkpoint::load(&checkpoint)?.model()?;
    let settings = EvalSettings {
        data: absolute(&args.data)?,
        checkpoint,
        fusions: parse_fusions(&args.fusion, &model)?,
        split: args.split,
        reports: args.report.iter().map(|r| parse_pair(r)).collect::<CliResult<_>>()?,
    };
    run_eval(settings, &args.out, ctx)
}

pub fn run_eval(s: EvalSettings, out: &Path, ctx: &Context) -> CliResult<()> {
    let dir = prepare_run_dir(out)?;
    let mut manifest = RunManifest::begin(
        Settings::Eval(s.clone()),
        &[("checkpoint", &s.checkpoint), ("data", &s.data)],
    )?;
    manifest.write(&dir)?;
    let ckpt = Checkpoint::load(&s.checkpoint)?;
    let model = ckpt.model()?;
    let ds = load_dataset(&s.data)?;
    if model.spec.encoder.clone().with_dataset_dims(&ds.dims) != model.spec.encoder {
        return Err(CliError::Data("dataset dimensions do not match the checkpoint".into()));
    }
    let indices = match s.split {
        Split::All => (0..ds.samples.len()).collect(),
        Split::HeldOut => {
            let (_, held) = ds.split_by_identity(ckpt.config.val_fraction)?;
            if held.is_empty() {
                return Err(CliError::Config(
                    "the checkpoint's config holds out no identities; use --split all".into(),
                ));
            }
            held
        }
    };
    let results = evaluate_fusions(&model, &ds, &indices, &indices, &s.fusions)?;
    let activity = model
        .spec
        .branches
        .fpm
        .then(|| fpm_activity(&model, &ds, &indices))
        .transpose()?;
    let reports = s
        .reports
        .iter()
        .map(|&(i, t)| negative_evidence_report(&model, &ds, i, t))
        .collect::<fpmine_core::Result<Vec<_>>>()?;

    println!("{:<14} {:>7} {:>7} {:>7}", "fusion", "R@1", "R@5", "R@10");
    for r in &results {
        println!("{:<14} {:>7.2} {:>7.2} {:>7.2}", r.fusion.name(), r.r_at(1), r.r_at(5), r.r_at(10));
    }
    println!("{} queries, {} gallery images", indices.len(), indices.len());
    if let Some(a) = &activity {
        println!(
            "s_neg < 0 on {:.1}% of mismatched and {:.1}% of matched pairs",
            100.0 * a.mismatched_negative_fraction,
            100.0 * a.matched_negative_fraction
        );
    }
    for r in &reports {
        print!("\n{}", r.to_text());
    }

    let out_json = json!({
        "split": s.split,
        "results": results,
        "fpm_activity": activity,
        "evidence": reports,
    });
    write_atomic(&dir.join(RESULTS), &to_json(&out_json))?;
    manifest.finish(&dir, &[RESULTS])?;
    ctx.progress(format!("results written to {}", dir.join(RESULTS).display()));
    Ok(())
}

pub fn ablate(args: AblateArgs, ctx: &Context) -> CliResult<()> {
    let data = absolute(&args.data)?;
    let ds = load_dataset(&data)?;
    let mut base: TrainConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        base.epochs = v;
    }
    if let Some(v) = args.batch_size {
        base.batch_size = v;
    }
    if let Some(v) = args.val_fraction {
        base.val_fraction = v;
    }
    let base = fit_to_dataset(base, &ds)?;
    if args.seeds.is_empty() {
        return Err(CliError::Config("--seeds needs at least one seed".into()));
    }
    let settings = AblateSettings {
        data,
        base,
        seeds: args.seeds,
        table: args.table,
    };
    run_ablate(settings, &args.out, ctx)
}

pub fn run_ablate(s: AblateSettings, out: &Path, ctx: &Context) -> CliResult<()> {
    let dir = prepare_run_dir(out)?;
    let ds = load_dataset(&s.data)?;
    let mut manifest = RunManifest::begin(Settings::Ablate(s.clone()), &[("data", &s.data)])?;
    manifest.write(&dir)?;

    let tables: Vec<(&str, Vec<Variant>)> = match s.table {
        Table::Branches => vec![("branches", branch_variants(&s.base))],
        Table::Components => vec![("components", component_variants(&s.base))],
        Table::All => vec![
            ("branches", branch_variants(&s.base)),
            ("components", component_variants(&s.base)),
        ],
    };
    // Identical configs under different names are trained once.
    let mut unique: Vec<Variant> = Vec::new();
    for v in tables.iter().flat_map(|(_, vs)| vs) {
        if !unique.iter().any(|u| u.config == v.config) {
            unique.push(v.clone());
        }
    }
    ctx.progress(format!(
        "training {} variants x {} seeds, {} epochs each",
        unique.len(),
        s.seeds.len(),
        s.base.epochs
    ));
    let trained = run_ablation(&ds, &unique, &s.seeds)?;

    let mut text = String::new();
    let mut json_tables = serde_json::Map::new();
    for (name, variants) in &tables {
        let rows = variants
            .iter()
            .map(|v| {
                let at = unique.iter().position(|u| u.config == v.config).expect("variant was trained");
                let mut row = trained.rows[at].clone();
                row.name = v.name.clone();
                row
            })
            .collect();
        let table = AblationTable {
            seeds: s.seeds.clone(),
            rows,
        };
        text.push_str(&format!("[{name}]\n{}\n", table.to_text()));
        json_tables.insert(name.to_string(), serde_json::to_value(&table).map_err(Error::from)?);
    }
    print!("{text}");
    write_atomic(&dir.join(ABLATION), text.as_bytes())?;
    write_atomic(&dir.join(RESULTS), &to_json(&json_tables))?;
    manifest.finish(&dir, &[ABLATION, RESULTS])?;
    Ok(())
}

pub fn gradcheck_cmd(args: GradcheckArgs, ctx: &Context) -> CliResult<()> {
    let data = args.data.as_deref().map(absolute).transpose()?;
    let ds = match &data {
        Some(p) => load_dataset(p)?,
        None => gradcheck_dataset(args.seed)?,
    };
    let mut config: TrainConfig = load_config(args.config.as_deref())?;
    config.batch_size = args.batch_size;
    let config = fit_to_dataset(config, &ds)?;
    if !(args.tolerance > 0.0 && args.step > 0.0) {
        return Err(CliError::Config("--tolerance and --step must be positive".into()));
    }
    if args.attempts == 0 {
        return Err(CliError::Config("--attempts must be at least 1".into()));
    }
    let settings = GradcheckSettings {
        config,
        data,
        options: GradcheckOptions {
            step: args.step,
            tolerance: args.tolerance,
            seed: args.seed,
            ..GradcheckOptions::default()
        },
        attempts: args.attempts,
    };
    run_gradcheck(settings, args.out.as_deref(), ctx)
}

fn gradcheck_dataset(seed: u64) -> CliResult<Dataset> {
    let (ids, per) = GRADCHECK_DATA;
    Ok(generate_synthetic_dataset(seed, ids, per, &SyntheticConfig::default())?)
}

pub fn run_gradcheck(s: GradcheckSettings, out: Option<&Path>, ctx: &Context) -> CliResult<()> {
    let dir = out.map(prepare_run_dir).transpose()?;
    let ds = match &s.data {
        Some(p) => load_dataset(p)?,
        None => gradcheck_dataset(s.options.seed)?,
    };
    let mut manifest = match &s.data {
        Some(p) => RunManifest::begin(Settings::Gradcheck(s.clone()), &[("data", p)])?,
        None => RunManifest::begin(Settings::Gradcheck(s.clone()), &[])?,
    };
    if let Some(d) = &dir {
        manifest.write(d)?;
    }
    let config = &s.config;
    let sampler = Sampler::new(
        (0..ds.samples.len()).collect(),
        ds.samples.iter().map(|x| x.identity).collect(),
        config.batch_size,
        config.balanced,
        s.options.seed,
    )?;

    let mut report: Option<GradcheckReport> = None;
    for attempt in 0..s.attempts {
        let model = Model::init(config.model.clone(), s.options.seed.wrapping_add(attempt as u64))?;
        let plan = sampler.epoch(attempt).swap_remove(0);
        match gradcheck(&model, &ds, &plan, config, &s.options) {
            Ok(r) => {
                report = Some(r);
                break;
            }
            Err(Error::Numerical(m)) => ctx.progress(format!("attempt {}: {m}", attempt + 1)),
            Err(e) => return Err(e.into()),
        }
    }
    let Some(report) = report else {
        return Err(CliError::Numerical(format!(
            "no evaluation point away from kinks in {} attempts",
            s.attempts
        )));
    };

    println!("{:<24} {:>6} {:>12}", "parameter", "coords", "rel. error");
    for g in &report.groups {
        println!("{:<24} {:>6} {:>12.3e}", g.name, g.coordinates.len(), g.relative_error);
    }
    println!(
        "max relative error {:.3e} (tolerance {:.1e}): {}",
        report.max_relative_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(d) = &dir {
        write_atomic(&d.join(RESULTS), &to_json(&report))?;
        manifest.finish(d, &[RESULTS])?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_relative_error, report.tolerance
        )))
    }
}

pub fn replay(manifest_path: &Path, out: &Path, ctx: &Context) -> CliResult<()> {
    let manifest = RunManifest::load(manifest_path)?;
    manifest.verify_inputs()?;
    match manifest.settings {
        Settings::GenData(s) => run_gen_data(s, out, ctx),
        Settings::Train(s) => run_train(s, out, ctx),
        Settings::Eval(s) => run_eval(s, out, ctx),
        Settings::Ablate(s) => run_ablate(s, out, ctx),
        Settings::Gradcheck(s) => run_gradcheck(s, Some(out), ctx),
    }
}

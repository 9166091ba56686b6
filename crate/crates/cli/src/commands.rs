use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use salience::config::ExperimentConfig;
use salience::datasets::{generate_synthetic, load_dataset, LabeledSample, SyntheticSpec};
use salience::evaluation::{evaluate_checkpoint, subset_report, MethodRuns, Report, RunResult};
use salience::render::{render_samples, save_png, RenderOptions};
use salience::training::{train_sweep, Checkpoint};
use salience::{Error, LossVariant, LossWeights};

use crate::{Common, RenderArgs};

const EVAL_DIR: &str = "eval";
const METHOD_FILE: &str = "method.txt";

/// A message and the process exit code it maps to.
pub struct Failure {
    pub message: String,
    pub code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            message: e.to_string(),
            code,
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        message: message.into(),
        code: 2,
    }
}

type CmdResult = Result<(), Failure>;

/// Malformed or unreadable config files are usage errors.
fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(&common.config, &common.overrides).map_err(|e| usage(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        message: format!("cannot create {}: {e}", dir.display()),
        code: 1,
    })
}

pub fn synth_data(common: &Common) -> CmdResult {
    let config = load(common)?;
    let synth = config
        .synthetic
        .as_ref()
        .ok_or_else(|| usage("synth-data needs a [synthetic] table"))?;
    let train_root = common
        .out
        .clone()
        .unwrap_or_else(|| config.train.dataset_root.clone());
    for t in &synth.test_sets {
        if t.shift_mode == synth.spec.shift_mode && t.seed == synth.seed {
            return Err(usage(format!(
                "test set {} repeats the training shift mode and seed",
                t.name
            )));
        }
    }
    let train = generate_synthetic(
        &synth.spec,
        synth.count_per_class,
        synth.seed,
        Some(&train_root),
    )?;
    println!(
        "wrote {} training samples to {}",
        train.samples.len(),
        train_root.display()
    );
    for t in &synth.test_sets {
        let spec = SyntheticSpec {
            shift_mode: t.shift_mode,
            ..synth.spec.clone()
        };
        let set = generate_synthetic(&spec, t.count_per_class, t.seed, Some(&t.root))?;
        println!(
            "wrote {} {} samples to {}",
            set.samples.len(),
            t.name,
            t.root.display()
        );
    }
    Ok(())
}

pub fn train(common: &Common, fooling: bool) -> CmdResult {
    let mut config = load(common)?;
    if let Some(out) = &common.out {
        config.train.output_dir = out.clone();
    }
    if fooling {
        // passive fooling trains the baseline objective on the edge map
        if config.train.variant != LossVariant::Baseline {
            println!(
                "fool: using the baseline objective instead of {}",
                config.train.variant
            );
            config.train.variant = LossVariant::Baseline;
            config.train.weights = LossWeights::default_for(LossVariant::Baseline);
        }
        config.train.fooling = true;
        config.train.validate().map_err(|e| usage(e.to_string()))?;
    }
    let dataset = load_dataset(&config.train.dataset_root)?;
    create_dir(&config.train.output_dir)?;
    let resolved = config.to_toml_string()?;
    let path = config.train.output_dir.join("config.toml");
    fs::write(&path, resolved).map_err(|e| Error::Io { path, source: e })?;
    let runs = train_sweep(&config.train, &dataset)?;
    for r in runs {
        println!(
            "seed {}: final train loss {:.6}, train accuracy {:.3}, checkpoint {}",
            r.seed,
            r.per_epoch_train_loss.last().copied().unwrap_or(f64::NAN),
            r.final_train_accuracy,
            r.final_checkpoint.display()
        );
    }
    Ok(())
}

fn test_set_dir(output_dir: &Path, name: &str) -> PathBuf {
    output_dir.join(EVAL_DIR).join(name)
}

pub fn eval(common: &Common) -> CmdResult {
    let mut config = load(common)?;
    if let Some(out) = &common.out {
        config.train.output_dir = out.clone();
    }
    let test_sets = config.test_sets();
    if test_sets.is_empty() {
        return Err(usage(
            "no test sets: add [evaluation] test_sets or [synthetic] test_sets",
        ));
    }
    let output_dir = config.train.output_dir.clone();
    let output_dir = &output_dir;
    let checkpoints = config
        .train
        .seeds
        .iter()
        .map(|&s| Checkpoint::load(&config.train.seed_dir(s)))
        .collect::<Result<Vec<_>, _>>()?;
    // `fool` runs are labelled by what they trained, not by the config file.
    if let Some(ck) = checkpoints.iter().find(|c| c.manifest.fooling) {
        config.train.fooling = true;
        config.train.variant = ck.manifest.variant;
    }
    create_dir(&output_dir.join(EVAL_DIR))?;
    let method_path = output_dir.join(EVAL_DIR).join(METHOD_FILE);
    fs::write(&method_path, config.method_label()).map_err(|e| Error::Io {
        path: method_path,
        source: e,
    })?;
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary
        .write_record(["test_set", "seed", "auroc"])
        .expect("in-memory csv");
    for set in &test_sets {
        let data = load_dataset(&set.root)?;
        let dir = test_set_dir(output_dir, &set.name);
        create_dir(&dir)?;
        for ck in &checkpoints {
            let result = evaluate_checkpoint(ck, config.train.model_arch, &data)?;
            result.save_csv(&dir.join(format!("seed_{}.csv", ck.manifest.seed)))?;
            let auroc = result.auroc()?;
            println!("{} seed {}: AUROC {auroc:.4}", set.name, ck.manifest.seed);
            summary
                .write_record([
                    set.name.clone(),
                    ck.manifest.seed.to_string(),
                    format!("{auroc:.17e}"),
                ])
                .expect("in-memory csv");
        }
    }
    let path = output_dir.join(EVAL_DIR).join("auroc.csv");
    let bytes = summary.into_inner().expect("in-memory csv");
    fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

/// Reads the scored runs under `run_dir/eval`, keyed by test set.
fn read_scores(run_dir: &Path) -> Result<(String, BTreeMap<String, Vec<RunResult>>), Failure> {
    let eval_dir = run_dir.join(EVAL_DIR);
    let method_path = eval_dir.join(METHOD_FILE);
    let method = fs::read_to_string(&method_path).map_err(|e| Failure {
        message: format!(
            "{} has no scored runs ({e}); run `eval` first",
            run_dir.display()
        ),
        code: 1,
    })?;
    let mut by_set = BTreeMap::new();
    let mut entries: Vec<_> = fs::read_dir(&eval_dir)
        .map_err(|e| Error::Io {
            path: eval_dir.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for dir in entries {
        let name = dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        let mut runs = files
            .iter()
            .map(|f| RunResult::load_csv(f))
            .collect::<Result<Vec<_>, _>>()?;
        runs.sort_by_key(|r| r.seed);
        by_set.insert(name, runs);
    }
    Ok((method.trim().to_string(), by_set))
}

pub fn report(common: &Common) -> CmdResult {
    let config = load(common)?;
    let mut per_set: BTreeMap<String, Vec<MethodRuns>> = BTreeMap::new();
    for dir in config.run_dirs() {
        let (method, by_set) = read_scores(&dir)?;
        for (set, runs) in by_set {
            per_set.entry(set).or_default().push(MethodRuns {
                method: method.clone(),
                runs,
            });
        }
    }
    if per_set.is_empty() {
        return Err(Failure {
            message: "no scored test sets found".into(),
            code: 1,
        });
    }
    let mut report = Report::default();
    for (set, methods) in &per_set {
        report.extend(subset_report(
            set,
            methods,
            config.report.subsets.as_deref(),
        )?);
    }
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| config.train.output_dir.join("report"));
    create_dir(&out)?;
    report.save_csv(&out.join("report.csv"))?;
    report.save_text(&out.join("report.txt"))?;
    print!("{report}");
    Ok(())
}

pub fn render(args: &RenderArgs) -> CmdResult {
    let config = load(&args.common)?;
    let checkpoint_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.train.seed_dir(config.train.seeds[0]));
    let checkpoint = Checkpoint::load(&checkpoint_path)?;
    let root = args
        .dataset
        .clone()
        .unwrap_or_else(|| config.train.dataset_root.clone());
    let dataset: Vec<LabeledSample> = load_dataset(&root)?;
    let options = RenderOptions {
        panel_size: args.panel_size,
        ..RenderOptions::default()
    };
    let image = render_samples(&checkpoint.model, &dataset, &args.samples, &options)?;
    let out = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| config.train.output_dir.join("cam_grid.png"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_png(&image, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

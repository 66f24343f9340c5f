use crate::figures;
use crate::manifest::{beside, ManifestBuilder};
use crate::{
    ConfigError, ControlModeArg, EmulateArgs, EvalArgs, EvalSplit, GenArgs, Generator, ReportArgs, ScreenArgs,
    TrainArgs, TrainOverrides,
};
use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};
use stedr::data::{
    generate_synthetic_a, generate_synthetic_b, ihdp_like_covariates, meta_path, read_covariate_csv, read_dataset,
    simulate_response_surface_b, write_dataset, DatasetFile,
};
use stedr::emulation::{
    attention_summary, build_trial, emulate_trial, generate_claims, oracle_path, read_corpus, run_screen, trial_seed,
    write_attention_csv, write_corpus, write_report_csv, write_report_json, ClaimsConfig, ControlMode, ScreenConfig,
    TrialSpec,
};
use stedr::model::{evaluate, load_checkpoint, save_checkpoint, train as fit, TrainConfig, TrainingData};

/// Prints a line, ignoring a closed stdout.
fn say(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

/// Parses a JSON config file; any failure is a configuration error.
fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_json)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(format!("no such file: {}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("gen", a.config.as_deref(), Some(a.seed));
    let n = a.n;
    let need_n = || n.ok_or_else(|| config_error("--n is required for this generator"));
    match a.generator {
        Generator::A | Generator::B => {
            let file = if a.generator == Generator::A {
                DatasetFile::Static(generate_synthetic_a(need_n()?, a.seed)?)
            } else {
                DatasetFile::Sequential(generate_synthetic_b(need_n()?, a.seed)?)
            };
            write_dataset(&a.out, &file)?;
            m.config(serde_json::json!({ "generator": format!("{:?}", a.generator).to_lowercase(), "n": n }))?;
        }
        Generator::Surface => {
            let mut table = match &a.covariates {
                Some(path) => {
                    require_file(path)?;
                    m.input(path);
                    read_covariate_csv(path, &a.treatment_column)?
                }
                None => ihdp_like_covariates(a.seed),
            };
            if let Some(n) = n {
                if n == 0 || n > table.rows.len() {
                    return Err(config_error(format!("--n must be in 1..={}", table.rows.len())));
                }
                table.rows.truncate(n);
                if let Some(t) = table.treatment.as_mut() {
                    t.truncate(n);
                }
            }
            let ds = simulate_response_surface_b(&table, None, a.seed)?;
            write_dataset(&a.out, &DatasetFile::Static(ds))?;
            m.config(serde_json::json!({ "generator": "surface", "n": table.rows.len() }))?;
        }
        Generator::Claims => {
            let mut config: ClaimsConfig = load_or_default(a.config.as_deref())?;
            if let Some(n) = n {
                config.n_patients = n;
            }
            config.seed = a.seed;
            let corpus = generate_claims(&config)?;
            write_corpus(&corpus, &a.out)?;
            m.output(&oracle_path(&a.out));
            m.config(&config)?;
        }
    }
    m.output(&a.out).output(&meta_path(&a.out));
    m.write(&beside(&a.out))
}

fn training_data(path: &Path) -> Result<TrainingData> {
    require_file(path)?;
    Ok(match read_dataset(path)? {
        DatasetFile::Static(d) => TrainingData::from_samples(&d.samples)?,
        DatasetFile::Sequential(d) => TrainingData::from_samples(&d.samples)?,
    })
}

fn apply_overrides(config: &mut TrainConfig, o: &TrainOverrides, seed: Option<u64>) {
    if let Some(v) = o.k {
        config.k = v;
    }
    if let Some(v) = o.alpha {
        config.alpha = v;
    }
    if let Some(v) = o.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = o.max_epochs {
        config.max_epochs = v;
    }
    if let Some(v) = o.patience {
        config.patience = v;
    }
    config.ablate_gmm |= o.ablate_gmm;
    config.ablate_attention |= o.ablate_attention;
    if let Some(s) = seed {
        config.seed = s;
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = load_or_default(a.config.as_deref())?;
    apply_overrides(&mut config, &a.overrides, a.seed);
    config.validate()?;
    let data = training_data(&a.data)?;
    let mut m = ManifestBuilder::start("train", a.config.as_deref(), Some(config.seed));
    m.input(&a.data).config(&config)?;
    let model = fit(&config, &data)?;
    save_checkpoint(&model, &a.out)?;
    let history = history_path(&a.out);
    let mut w = csv::Writer::from_path(&history)?;
    for record in &model.history {
        w.serialize(record)?;
    }
    w.flush()?;
    m.output(&a.out).output(&history);
    m.write(&beside(&a.out))
}

fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.csv");
    s.into()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.model)?;
    let model = load_checkpoint(&a.model)?;
    let data = training_data(&a.data)?;
    let idx: Vec<usize> = match a.split {
        EvalSplit::All => (0..data.len()).collect(),
        EvalSplit::Test => {
            if model.split.test.iter().any(|&i| i >= data.len()) {
                return Err(config_error("dataset is smaller than the one the model was trained on"));
            }
            model.split.test.clone()
        }
    };
    let report = evaluate(&model, &data, &idx)?;
    let out = a.out.unwrap_or_else(|| {
        let mut s = a.model.as_os_str().to_owned();
        s.push(".metrics.json");
        s.into()
    });
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&out, format!("{json}\n")).with_context(|| format!("writing {}", out.display()))?;
    say(&json);
    let mut m = ManifestBuilder::start("eval", None, Some(model.config.seed));
    m.input(&a.model).input(&a.data).output(&out);
    m.config(serde_json::json!({ "split": format!("{:?}", a.split).to_lowercase() }))?;
    m.write(&beside(&out))
}

fn screen_config(path: Option<&Path>, seed: Option<u64>) -> Result<ScreenConfig> {
    let mut config: ScreenConfig = load_or_default(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.train.validate()?;
    Ok(config)
}

pub fn emulate(a: EmulateArgs) -> Result<()> {
    let config = screen_config(a.config.as_deref(), a.seed)?;
    require_file(&a.corpus)?;
    let corpus = read_corpus(&a.corpus)?;
    create_dir(&a.out_dir)?;
    let spec = TrialSpec {
        drug: a.drug,
        trial_index: a.trial_index,
        control_mode: match a.control_mode {
            ControlModeArg::Random => ControlMode::Random,
            ControlModeArg::SameClass => ControlMode::SameClass,
        },
        seed: trial_seed(config.seed, a.drug, a.trial_index),
    };
    let mut m = ManifestBuilder::start("emulate", a.config.as_deref(), Some(config.seed));
    m.input(&a.corpus).config(&config)?;
    let cohort = build_trial(&corpus.db, &corpus.catalog, spec, &config.criteria)?;
    let (result, model) = emulate_trial(&corpus.db, &cohort, &config.train)?;

    let trial_path = a.out_dir.join("trial.json");
    std::fs::write(&trial_path, serde_json::to_vec_pretty(&result)?)?;
    let ckpt = a.out_dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    m.output(&trial_path).output(&ckpt);
    if !model.config.ablate_attention {
        let seqs = cohort.training_data(&corpus.db)?.seqs;
        let table = attention_summary(&model, &seqs, model.config.effective_k())?;
        let path = a.out_dir.join("attention.csv");
        write_attention_csv(&table, &path)?;
        m.output(&path);
    }
    say(&format!(
        "drug {} trial {}: {} cases, {} controls, overall effect {:.4} [{:.4}, {:.4}], balanced {}",
        a.drug,
        a.trial_index,
        result.case_ids.len(),
        result.control_ids.len(),
        result.overall_ate,
        result.overall_ci.0,
        result.overall_ci.1,
        result.balance.balanced
    ));
    m.write(&a.out_dir.join("manifest.json"))
}

/// Flag, then `STEDR_THREADS`, then the config file.
fn resolve_threads(flag: Option<usize>, config: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("STEDR_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .map(Some)
            .ok_or_else(|| config_error(format!("STEDR_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(config),
    }
}

pub fn screen(a: ScreenArgs) -> Result<()> {
    let mut config = screen_config(a.config.as_deref(), a.seed)?;
    if let Some(n) = a.n_trials {
        config.n_trials = n;
    }
    config.threads = resolve_threads(a.threads, config.threads)?;
    require_file(&a.corpus)?;
    let corpus = read_corpus(&a.corpus)?;
    let drugs = a.drugs.clone().unwrap_or_else(|| (0..corpus.catalog.len()).collect());
    create_dir(&a.out_dir)?;
    let mut m = ManifestBuilder::start("screen", a.config.as_deref(), Some(config.seed));
    // The thread count never changes results, so it stays out of the echoed config.
    m.input(&a.corpus).config(ScreenConfig {
        threads: None,
        ..config.clone()
    })?;
    let report = run_screen(&corpus.db, &corpus.catalog, &drugs, &config)?;
    let json = a.out_dir.join("report.json");
    let csv = a.out_dir.join("report.csv");
    write_report_json(&report, &json)?;
    write_report_csv(&report, &csv)?;
    for r in &report.reports {
        say(&format!(
            "drug {:>3}: {:<20} balanced trials {}/{}",
            r.drug,
            r.verdict.as_str(),
            r.n_balanced_trials,
            r.n_trials_run
        ));
    }
    m.output(&json).output(&csv);
    m.write(&a.out_dir.join("manifest.json"))
}

pub fn report(a: ReportArgs) -> Result<()> {
    if a.screen_csv.is_none() && a.attention_csv.is_none() {
        return Err(config_error("give --screen-csv, --attention-csv or both"));
    }
    create_dir(&a.out_dir)?;
    let mut m = ManifestBuilder::start("report", None, None);
    if let Some(path) = &a.screen_csv {
        require_file(path)?;
        let rows = figures::read_forest_rows(path)?;
        let out = a.out_dir.join("forest.svg");
        std::fs::write(&out, figures::forest_svg(&rows))?;
        m.input(path).output(&out);
    }
    if let Some(path) = &a.attention_csv {
        require_file(path)?;
        let cells = figures::read_attention_cells(path)?;
        let out = a.out_dir.join("attention.svg");
        std::fs::write(&out, figures::heatmap_svg(&cells))?;
        m.input(path).output(&out);
    }
    m.write(&a.out_dir.join("manifest.json"))
}

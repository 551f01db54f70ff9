use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use colabel::corroborate::{build_team, evaluate_stages, integrate, train_member, FeatureEmbedder, IntegrationPlan, StageRow};
use colabel::net::{build_model, cascade_predict, train_cascade, CascadeHeads, Model, ModelConfig, Variant};
use colabel::synth::{generate_datasets, load_dataset, save_dataset, AnnotationKind, Dataset, GenerationConfig, KnowledgeBase};
use colabel::train::{
    accuracy_of, compare_convergence, match_correct, match_from, save_run, train, write_corrections, RunHistory,
    RunManifest, TrainConfig,
};
use colabel::metrics::accuracy;
use serde::{Deserialize, Serialize};

use crate::config::{self, AblateConfig, EvalConfig, IntegrateConfig, MemberRunConfig, TrainRunConfig};
use crate::error::{CliError, CliResult};

/// Where a command reads from and writes to, plus the global overrides.
#[derive(Clone, Debug)]
pub struct Context {
    /// Relative paths inside configs resolve against this directory.
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
}

impl Context {
    fn dataset(&self, path: &Path) -> CliResult<Dataset> {
        Ok(load_dataset(config::existing(&self.base, path)?)?)
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub fn generate(ctx: &Context, config_path: &Path) -> CliResult<()> {
    let mut config: GenerationConfig = config::load(config_path)?;
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    let datasets = generate_datasets(&config)?;
    let out = ctx.out_dir()?;
    for d in &datasets {
        save_dataset(d, out.join(&d.name))?;
        log::info!("generated {} ({} records)", d.name, d.len());
    }
    write_json(&out.join("generation.json"), &config)
}

#[derive(Serialize)]
struct StageTable {
    kind: AnnotationKind,
    target: String,
    rows: Vec<StageRow>,
}

pub fn integrate_cmd(ctx: &Context, config_path: &Path) -> CliResult<()> {
    let mut config: IntegrateConfig = config::load(config_path)?;
    if let Some(seed) = ctx.seed {
        config.plan.seed = seed;
    }
    let datasets: Vec<Dataset> = config.datasets.iter().map(|p| ctx.dataset(p)).collect::<CliResult<_>>()?;
    let (completed, coverage) = integrate(&datasets, &config.plan)?;
    let out = ctx.out_dir()?;
    for d in &completed {
        save_dataset(d, out.join(&d.name))?;
    }
    write_json(&out.join("coverage_report.json"), &coverage)?;
    if config.stage_table {
        write_json(&out.join("stages.json"), &stage_tables(&datasets, &config.plan)?)?;
    }
    for (kind, c) in &coverage {
        log::info!("{kind}: labeled {:.3}, precision {:?}", c.labeled_fraction, c.accepted_precision);
    }
    Ok(())
}

fn stage_tables(datasets: &[Dataset], plan: &IntegrationPlan) -> CliResult<Vec<StageTable>> {
    let embedder = FeatureEmbedder::new(&plan.embedder);
    let by_name = |n: &String| datasets.iter().find(|d| &d.name == n);
    let mut tables = Vec::new();
    for route in plan.routing(datasets)? {
        let sources: Vec<&Dataset> = route.sources.iter().filter_map(by_name).collect();
        let targets: Vec<&Dataset> = route
            .targets
            .iter()
            .filter_map(by_name)
            .filter(|t| t.records.iter().all(|r| r.truth.is_some()))
            .collect();
        if sources.is_empty() || targets.is_empty() {
            continue;
        }
        let team = build_team(&sources, route.kind, plan, &embedder)?;
        for target in targets {
            let rows = evaluate_stages(&team, target, plan, &embedder)?;
            tables.push(StageTable { kind: route.kind, target: target.name.clone(), rows });
        }
    }
    Ok(tables)
}

pub fn train_member_cmd(ctx: &Context, config_path: &Path) -> CliResult<()> {
    let mut config: MemberRunConfig = config::load(config_path)?;
    if let Some(seed) = ctx.seed {
        config.member.seed = seed;
    }
    let train_set = ctx.dataset(&config.train)?;
    let validation: Vec<Dataset> = config.validation.iter().map(|p| ctx.dataset(p)).collect::<CliResult<_>>()?;
    let refs: Vec<&Dataset> = validation.iter().collect();
    let member = train_member(&train_set, &refs, config.kind, &train_set.schema, &config.member)?;
    let out = ctx.out_dir()?;
    ndgrad::save_params(&member.selected.store, out.join("member_params.bin"))?;
    write_json(&out.join("early_stop.json"), &member.trace)?;
    log::info!("member for {} on {}: best epoch {}", config.kind, train_set.name, member.trace.best_epoch);
    Ok(())
}

/// Trains one run into `out`: history, manifest, weights and, for the cascade, its heads.
fn train_one(train_set: &Dataset, val: &Dataset, model_config: &ModelConfig, training: &TrainConfig, cascade: &colabel::net::CascadeConfig, out: &Path) -> CliResult<RunHistory> {
    let mut model = build_model(model_config, training.seed)?;
    let history = train(&mut model, train_set, val, training)?;
    fs::create_dir_all(out)?;
    save_run(out, &history, &RunManifest::new(&model, train_set, val, training, &history))?;
    write_json(&out.join("model_config.json"), &model.config)?;
    ndgrad::save_params(&model.store, out.join("params.bin"))?;
    if model.variant() == Variant::TwoStageCascade {
        let kb = KnowledgeBase::from_catalog(&model.config.schema);
        let config = colabel::net::CascadeConfig { seed: training.seed, ..cascade.clone() };
        let heads = train_cascade(&model, train_set, &kb, &config)?;
        ndgrad::save_params(&heads.store, out.join("cascade_params.bin"))?;
    }
    Ok(history)
}

pub fn train_cmd(ctx: &Context, config_path: &Path) -> CliResult<()> {
    let mut config: TrainRunConfig = config::load(config_path)?;
    if let Some(seed) = ctx.seed {
        config.training.seed = seed;
    }
    if let Some(v) = ctx.variant {
        config.model.variant = v;
    }
    config.model.validate()?;
    let train_set = ctx.dataset(&config.train)?;
    let val = ctx.dataset(&config.validation)?;
    let history = train_one(&train_set, &val, &config.model, &config.training, &config.cascade, ctx.out_dir()?)?;
    log::info!("{}: final model accuracy {:?}", history.variant, history.final_accuracy("model"));
    Ok(())
}

/// Worker count from `COLABEL_THREADS` (default 1).
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var("COLABEL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::validation(format!("COLABEL_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

pub fn ablate(ctx: &Context, config_path: &Path) -> CliResult<()> {
    let mut config: AblateConfig = config::load(config_path)?;
    if let Some(seed) = ctx.seed {
        config.seeds = vec![seed];
    }
    if let Some(v) = ctx.variant {
        config.variants = vec![v];
    }
    if config.variants.is_empty() || config.seeds.is_empty() {
        return Err(CliError::validation("ablate needs at least one variant and one seed"));
    }
    for v in &config.variants {
        ModelConfig { variant: *v, ..config.model.clone() }.validate()?;
    }
    let train_set = ctx.dataset(&config.train)?;
    let val = ctx.dataset(&config.validation)?;
    let out = ctx.out_dir()?.to_path_buf();
    let jobs: Vec<(Variant, u64)> =
        config.variants.iter().flat_map(|&v| config.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Mutex<BTreeMap<(Variant, u64), CliResult<RunHistory>>> = Mutex::new(BTreeMap::new());
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..thread_cap().unwrap_or(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let job = {
                    let mut n = next.lock().expect("job counter");
                    let j = jobs.get(*n).copied();
                    *n += 1;
                    j
                };
                let Some((variant, seed)) = job else { break };
                let model = ModelConfig { variant, ..config.model.clone() };
                let training = TrainConfig { seed, ..config.training.clone() };
                let dir = out.join(variant.name()).join(format!("seed{seed}"));
                let r = train_one(&train_set, &val, &model, &training, &config.cascade, &dir);
                results.lock().expect("results").insert((variant, seed), r);
            });
        }
    });
    let results = results.into_inner().expect("results");
    let mut histories = BTreeMap::new();
    for ((variant, seed), r) in results {
        histories.insert((variant, seed), r?);
    }
    for &seed in &config.seeds {
        let runs: Vec<(&str, &RunHistory)> =
            config.variants.iter().map(|v| (v.name(), &histories[&(*v, seed)])).collect();
        let report = compare_convergence(&runs, &config.head, 0.9)?;
        fs::write(out.join(format!("convergence_seed{seed}.csv")), report.to_csv())?;
        fs::write(out.join(format!("convergence_seed{seed}.md")), report.threshold_table())?;
    }
    Ok(())
}

/// A trained run read back from its directory.
struct LoadedRun {
    model: Model,
    cascade: Option<CascadeHeads>,
}

fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    let model_config: ModelConfig = read_json(&dir.join("model_config.json"))?;
    let manifest: RunManifest = read_json(&dir.join("run_manifest.json"))?;
    let mut model = build_model(&model_config, manifest.train.seed)?;
    let params = ndgrad::load_params(dir.join("params.bin"))?;
    ndgrad::assign_params(&mut model.store, &params)?;
    let cascade_path = dir.join("cascade_params.bin");
    let cascade = if cascade_path.exists() {
        let kb = KnowledgeBase::from_catalog(&model_config.schema);
        Some(CascadeHeads::from_store(ndgrad::load_params(cascade_path)?, &kb)?)
    } else {
        None
    };
    Ok(LoadedRun { model, cascade })
}

/// Test-set accuracies of one run, including the Match and cascade readings where they apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub variant: String,
    pub dataset: String,
    pub accuracy: BTreeMap<String, f64>,
}

fn evaluate_run(run: &LoadedRun, dataset: &Dataset, tau: f64) -> CliResult<(Evaluation, Vec<colabel::train::CorrectionEntry>)> {
    let images: Vec<_> = dataset.records.iter().map(|r| &r.image).collect();
    let records: Vec<_> = dataset.records.iter().collect();
    let outputs = run.model.predict_chunked(&images, 64)?;
    let mut acc = BTreeMap::new();
    for head in std::iter::once(AnnotationKind::Model).chain(run.model.config.branches.iter().copied()) {
        if outputs.head(head).is_some() {
            acc.insert(head.name().to_string(), accuracy_of(&outputs, &records, head)?);
        }
    }
    let truth: Vec<Option<usize>> = records.iter().map(|r| r.labels.get(AnnotationKind::Model)).collect();
    let score = |pred: &[usize]| {
        let (p, t): (Vec<usize>, Vec<usize>) = pred.iter().zip(&truth).filter_map(|(&p, t)| t.map(|t| (p, t))).unzip();
        accuracy(&p, &t)
    };
    let kb = KnowledgeBase::from_catalog(&run.model.config.schema);
    let mut log = Vec::new();
    let has_branches = outputs.head(AnnotationKind::Make).is_some() && outputs.head(AnnotationKind::Type).is_some();
    if has_branches {
        let (corrected, entries) = match_correct(&outputs, &kb, tau)?;
        acc.insert("model_match".into(), score(&corrected));
        log = entries;
    }
    if let Some(heads) = &run.cascade {
        let cascade = cascade_predict(&outputs, heads)?.argmax_rows();
        acc.insert("model_cascade".into(), score(&cascade));
        let (corrected, entries) = match_from(&outputs, &cascade, &kb, tau)?;
        acc.insert("model_cascade_match".into(), score(&corrected));
        log = entries;
    }
    for (entry, record) in log.iter_mut().zip(&dataset.records) {
        entry.id = Some(record.id.clone());
    }
    let evaluation = Evaluation { variant: run.model.variant().to_string(), dataset: dataset.name.clone(), accuracy: acc };
    Ok((evaluation, log))
}

pub fn eval(ctx: &Context, config_path: &Path) -> CliResult<()> {
    let config: EvalConfig = config::load(config_path)?;
    let run = load_run(&config::existing(&ctx.base, &config.run)?)?;
    let dataset = ctx.dataset(&config.dataset)?;
    let (evaluation, _) = evaluate_run(&run, &dataset, config.tau)?;
    write_json(&ctx.out_dir()?.join("evaluation.json"), &evaluation)?;
    log::info!("{} on {}: {:?}", evaluation.variant, evaluation.dataset, evaluation.accuracy);
    Ok(())
}

pub fn correct(ctx: &Context, config_path: &Path) -> CliResult<()> {
    let config: EvalConfig = config::load(config_path)?;
    let run = load_run(&config::existing(&ctx.base, &config.run)?)?;
    let dataset = ctx.dataset(&config.dataset)?;
    let (evaluation, log) = evaluate_run(&run, &dataset, config.tau)?;
    if log.is_empty() {
        return Err(CliError::validation(format!("variant {} has no make and type heads to correct with", evaluation.variant)));
    }
    let out = ctx.out_dir()?;
    write_corrections(out.join("corrections.jsonl"), &log)?;
    write_json(&out.join("evaluation.json"), &evaluation)?;
    Ok(())
}

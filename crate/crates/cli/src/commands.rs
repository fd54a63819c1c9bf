use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use reactpref::checkpoint::{decode_judge, decode_model, encode_judge, encode_model};
use reactpref::dataset::{parse_dataset, Dataset, Mode, Split};
use reactpref::evaluation::{
    evaluate_generation, metrics_from_scores, score_generation, win_rate, Aggregate, GroupScores, MetricsReport,
    Origin, ScoredCandidate,
};
use reactpref::judge::{judge_scores, train_judge_until, JudgeParams, JudgeTrainState};
use reactpref::preference::{ordering_rate, train_until, PreferenceConfig, TrainState};
use reactpref::rng::{derive_seed, stream, tag};
use reactpref::seq_model::ModelParams;
use reactpref::synth::oracle::brute_force_metrics;
use reactpref::synth::{generate_world, planted_judge_from, TierCounts, WorldConfig, WorldStructure};
use reactpref::vocab::VocabSpec;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, PLANTED};
use crate::output::{Manifest, OutputDir};
use crate::ConfigError;

pub const DATASET: &str = "dataset.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const WORLD: &str = "world.json";
pub const STRUCTURE: &str = "structure.json";
pub const FEATURES: &str = "features.json";
pub const COUNTS: &str = "counts.json";
pub const CONFIG_ECHO: &str = "config.json";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const JUDGE_CKPT: &str = "judge.ckpt";
pub const SWEEP_TABLE: &str = "sweep.jsonl";

/// Per-command output directory under the root.
pub fn command_dir(root: &Path, command: &str) -> PathBuf {
    root.join(command)
}

/// File name of the report for `mode`, e.g. `report-T+A.json`.
pub fn report_name(prefix: &str, mode: Mode) -> String {
    format!("{prefix}-{mode}.json")
}

fn open_output(cfg: &RunConfig, root: &Path, command: &str) -> Result<OutputDir> {
    let mut out = OutputDir::create(command_dir(root, command), command)?;
    out.write_json(CONFIG_ECHO, cfg)?;
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

/// A dataset directory written by `synth`.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub dataset: Dataset,
    pub world: WorldConfig,
    pub structure: WorldStructure,
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<DataDir> {
        let vocab: VocabSpec = read_json(&dir.join(VOCAB))?;
        let path = dir.join(DATASET);
        let file = File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
        let dataset =
            parse_dataset(BufReader::new(file), &vocab).with_context(|| format!("invalid dataset {}", path.display()))?;
        Ok(DataDir {
            dataset,
            world: read_json(&dir.join(WORLD))?,
            structure: read_json(&dir.join(STRUCTURE))?,
        })
    }

    /// The judge named by `spec`: a checkpoint path or `"planted"`.
    pub fn judge(&self, spec: &str) -> Result<JudgeParams> {
        if spec == PLANTED {
            return Ok(planted_judge_from(&self.world, &self.structure)?);
        }
        let state = decode_judge(&read(Path::new(spec))?).with_context(|| format!("cannot load judge {spec}"))?;
        Ok(state.params)
    }
}

fn data_dir(explicit: &Option<PathBuf>, root: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| command_dir(root, "synth"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: TierCounts,
    pub val: TierCounts,
    pub test: TierCounts,
    pub groups: [usize; 3],
    pub dominant_motion: Option<String>,
}

pub fn synth(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let start = Instant::now();
    let world_cfg = WorldConfig {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let world = generate_world(&world_cfg).map_err(|e| match e {
        reactpref::Error::Infeasible(_) => anyhow::Error::new(ConfigError(e.to_string())),
        other => other.into(),
    })?;
    let mut out = open_output(cfg, root, "synth")?;
    out.write(DATASET, &world.dataset.to_jsonl())?;
    out.write_json(VOCAB, &world.dataset.vocab)?;
    out.write_json(WORLD, &world.config)?;
    out.write(STRUCTURE, &world.structure_json())?;
    out.write(FEATURES, &world.features_json())?;
    let counts = SplitCounts {
        train: world.tier_counts(Split::Train),
        val: world.tier_counts(Split::Val),
        test: world.tier_counts(Split::Test),
        groups: [world.dataset.train.len(), world.dataset.val.len(), world.dataset.test.len()],
        dominant_motion: world.structure.dominant_motion.clone(),
    };
    out.write_json(COUNTS, &counts)?;
    out.finish(start.elapsed())
}

/// Fresh sequence-model parameters for `seed`.
pub fn init_model(vocab: &VocabSpec, d: usize, init_scale: f64, seed: u64) -> ModelParams {
    ModelParams::random(vocab, d, init_scale, &mut stream(seed, &[tag::INIT, 0]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub step: u64,
    pub ordering_train: f64,
    pub ordering_val: Option<f64>,
    pub ordering_test: Option<f64>,
}

fn ordering_of(params: &ModelParams, groups: &[reactpref::dataset::Group]) -> Result<Option<f64>> {
    if groups.is_empty() {
        return Ok(None);
    }
    Ok(Some(ordering_rate(params, groups)?))
}

pub fn train(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let start = Instant::now();
    let t = &cfg.train;
    let data = DataDir::load(&data_dir(&t.data, root))?;
    let vocab = data.dataset.vocab;
    let state = match &t.resume {
        Some(p) => decode_model(&read(p)?).with_context(|| format!("cannot load checkpoint {}", p.display()))?,
        None => TrainState::new(init_model(&vocab, t.d, t.init_scale, cfg.seed)),
    };
    ensure!(state.params.vocab() == &vocab, "checkpoint vocabulary does not match the dataset");
    let until = t.steps.unwrap_or(t.trainer.optimizer.total_steps);
    let (state, log) = train_until(state, &data.dataset, &t.trainer, cfg.seed, until)?;
    let summary = TrainSummary {
        step: state.step,
        ordering_train: ordering_rate(&state.params, &data.dataset.train)?,
        ordering_val: ordering_of(&state.params, &data.dataset.val)?,
        ordering_test: ordering_of(&state.params, &data.dataset.test)?,
    };
    let mut out = open_output(cfg, root, "train")?;
    out.write(MODEL_CKPT, &encode_model(&state))?;
    out.write_jsonl("train_log.jsonl", &log)?;
    out.write_json("summary.json", &summary)?;
    out.finish(start.elapsed())
}

/// Mean-aggregated win rates of the annotated tiers under `mode`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct SeparationRow {
    pub mode: Mode,
    pub win_G_gt_N: f64,
    pub win_S_gt_N: f64,
    pub win_G_gt_S: f64,
}

fn annotated_scores(judge: &JudgeParams, groups: &[reactpref::dataset::Group], mode: Mode) -> Result<Vec<GroupScores>> {
    groups
        .iter()
        .map(|g| {
            let motions: Vec<_> = g.candidates.iter().map(|c| &c.motion).collect();
            let scores = judge_scores(judge, &g.condition, &motions, mode)?;
            Ok(GroupScores {
                group_id: g.group_id.clone(),
                candidates: g
                    .candidates
                    .iter()
                    .zip(scores)
                    .map(|(c, score)| ScoredCandidate {
                        id: c.motion.motion_id.clone(),
                        origin: Origin::from(c.tier),
                        score,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Judge separation on `groups` for every evaluation mode.
pub fn separation(judge: &JudgeParams, groups: &[reactpref::dataset::Group]) -> Result<Vec<SeparationRow>> {
    Mode::EVAL_MODES
        .iter()
        .map(|&mode| {
            let scored = annotated_scores(judge, groups, mode)?;
            let win = |l, r| win_rate(&scored, l, r, Aggregate::Mean);
            Ok(SeparationRow {
                mode,
                win_G_gt_N: win(Origin::Gold, Origin::Negative)?,
                win_S_gt_N: win(Origin::Silver, Origin::Negative)?,
                win_G_gt_S: win(Origin::Gold, Origin::Silver)?,
            })
        })
        .collect()
}

pub fn train_judge(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let start = Instant::now();
    let j = &cfg.judge;
    let data = DataDir::load(&data_dir(&j.data, root))?;
    let vocab = data.dataset.vocab;
    let state = match &j.resume {
        Some(p) => decode_judge(&read(p)?).with_context(|| format!("cannot load checkpoint {}", p.display()))?,
        None => JudgeTrainState::new(j.trainer.init_params(&vocab, cfg.seed)),
    };
    ensure!(state.params.vocab() == &vocab, "checkpoint vocabulary does not match the dataset");
    let until = j.steps.unwrap_or(j.trainer.optimizer.total_steps);
    let (state, log) = train_judge_until(state, &data.dataset, &j.trainer, cfg.seed, until)?;
    let held_out = if data.dataset.test.is_empty() { &data.dataset.val } else { &data.dataset.test };
    let mut out = open_output(cfg, root, "train-judge")?;
    out.write(JUDGE_CKPT, &encode_judge(&state))?;
    out.write_jsonl("judge_log.jsonl", &log)?;
    if !held_out.is_empty() {
        out.write_json("separation.json", &separation(&state.params, held_out)?)?;
    }
    out.finish(start.elapsed())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Checks an oracle report against the production one: every rate exactly,
/// FID to 1e-8 and diversity exactly.
pub fn oracle_agrees(prod: &MetricsReport, oracle: &MetricsReport) -> Result<()> {
    for ((name, a), (_, b)) in prod.rates().iter().zip(oracle.rates().iter()) {
        ensure!(a == b, "oracle disagrees on {name}: {a:?} vs {b:?}");
    }
    match (prod.fid, oracle.fid) {
        (Some(a), Some(b)) => ensure!(close(a, b, 1e-8), "oracle disagrees on fid: {a} vs {b}"),
        (None, None) => {}
        (a, b) => bail!("oracle disagrees on fid: {a:?} vs {b:?}"),
    }
    ensure!(
        prod.diversity == oracle.diversity,
        "oracle disagrees on diversity: {:?} vs {:?}",
        prod.diversity,
        oracle.diversity
    );
    ensure!(prod.n_groups == oracle.n_groups, "oracle disagrees on the group count");
    Ok(())
}

fn resolve_judge(spec: &Option<String>, root: &Path) -> String {
    spec.clone()
        .unwrap_or_else(|| command_dir(root, "train-judge").join(JUDGE_CKPT).display().to_string())
}

pub fn eval(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let start = Instant::now();
    let e = &cfg.eval;
    let modes = cfg.eval_modes()?;
    let data = DataDir::load(&data_dir(&e.data, root))?;
    let model_path = e.model.clone().unwrap_or_else(|| command_dir(root, "train").join(MODEL_CKPT));
    let model = decode_model(&read(&model_path)?)
        .with_context(|| format!("cannot load model {}", model_path.display()))?
        .params;
    let judge = data.judge(&resolve_judge(&e.judge, root))?;
    ensure!(model.vocab() == &data.dataset.vocab, "model checkpoint vocabulary does not match the dataset");
    ensure!(judge.vocab() == &data.dataset.vocab, "judge checkpoint vocabulary does not match the dataset");
    let groups = data.dataset.split(e.split);
    let mut out = open_output(cfg, root, "eval")?;
    for mode in modes {
        let metrics = reactpref::evaluation::EvalConfig {
            mode,
            ..e.metrics.clone()
        };
        let run = score_generation(&model, &judge, groups, Some(&data.structure.motion), &metrics, cfg.seed)?;
        let report = metrics_from_scores(&run.groups, &run.real, &run.generated, &metrics, cfg.seed)?;
        out.write_json(&report_name("report", mode), &report)?;
        if e.oracle {
            let brute = brute_force_metrics(&run.groups, &run.real, &run.generated, &metrics, cfg.seed)?;
            oracle_agrees(&report, &brute).with_context(|| format!("mode {mode}"))?;
            out.write_json(&report_name("oracle", mode), &brute)?;
        }
    }
    out.finish(start.elapsed())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub margin: f64,
    pub lambda_rank: f64,
    pub lambda_gn: f64,
    pub seed: u64,
    pub error: Option<String>,
    pub ordering_train: Option<f64>,
    pub ordering_test: Option<f64>,
    pub metrics: Option<MetricsReport>,
}

struct SweepCtx<'a> {
    cfg: &'a RunConfig,
    data: &'a DataDir,
    judge: &'a JudgeParams,
    mode: Mode,
    split: Split,
}

fn sweep_cell(ctx: &SweepCtx, cell: usize, trainer: &PreferenceConfig) -> SweepRow {
    let seed = derive_seed(ctx.cfg.seed, &[tag::SWEEP_CELL, cell as u64]);
    let mut row = SweepRow {
        cell,
        margin: trainer.margin,
        lambda_rank: trainer.lambda_rank,
        lambda_gn: trainer.lambda_gn,
        seed,
        error: None,
        ordering_train: None,
        ordering_test: None,
        metrics: None,
    };
    let run = || -> reactpref::Result<(f64, Option<f64>, MetricsReport)> {
        let t = &ctx.cfg.train;
        let dataset = &ctx.data.dataset;
        let params = init_model(&dataset.vocab, t.d, t.init_scale, seed);
        let (state, _) = train_until(TrainState::new(params), dataset, trainer, seed, trainer.optimizer.total_steps)?;
        let metrics = reactpref::evaluation::EvalConfig {
            mode: ctx.mode,
            ..ctx.cfg.eval.metrics.clone()
        };
        let groups = dataset.split(ctx.split);
        let report = evaluate_generation(&state.params, ctx.judge, groups, Some(&ctx.data.structure.motion), &metrics, seed)?;
        let test = if dataset.test.is_empty() { None } else { Some(ordering_rate(&state.params, &dataset.test)?) };
        Ok((ordering_rate(&state.params, &dataset.train)?, test, report))
    };
    match run() {
        Ok((train, test, report)) => {
            row.ordering_train = Some(train);
            row.ordering_test = test;
            row.metrics = Some(report);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Trains and evaluates every grid cell. Failed cells are reported in
/// their row and do not stop the sweep.
pub fn run_sweep(cfg: &RunConfig, data: &DataDir, judge: &JudgeParams) -> Result<Vec<SweepRow>> {
    let ctx = SweepCtx {
        cfg,
        data,
        judge,
        mode: cfg.sweep_mode()?,
        split: cfg.eval.split,
    };
    let cells = cfg.sweep_cells();
    let workers = cfg.sweep.parallelism.min(cells.len()).max(1);
    if workers == 1 {
        return Ok(cells.iter().enumerate().map(|(i, c)| sweep_cell(&ctx, i, c)).collect());
    }
    let next = AtomicUsize::new(0);
    let rows: Mutex<BTreeMap<usize, SweepRow>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = cells.get(i) else { break };
                let row = sweep_cell(&ctx, i, c);
                rows.lock().expect("no worker panics while holding the lock").insert(i, row);
            });
        }
    });
    Ok(rows.into_inner().expect("workers finished").into_values().collect())
}

pub fn sweep(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let start = Instant::now();
    let data = DataDir::load(&data_dir(&cfg.sweep.data, root))?;
    let judge = data.judge(&cfg.sweep.judge)?;
    ensure!(judge.vocab() == &data.dataset.vocab, "judge checkpoint vocabulary does not match the dataset");
    let rows = run_sweep(cfg, &data, &judge)?;
    let mut out = open_output(cfg, root, "sweep")?;
    out.write_jsonl(SWEEP_TABLE, &rows)?;
    out.finish(start.elapsed())
}

fn fmt_cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn table_header(first: &[&str]) -> String {
    let names: Vec<&str> = MetricsReport::rates(&empty_report()).iter().map(|r| r.0).collect();
    let cols: Vec<&str> = first.iter().copied().chain(names).chain(["fid", "diversity"]).collect();
    format!("| {} |\n|{}\n", cols.join(" | "), "---|".repeat(cols.len()))
}

fn empty_report() -> MetricsReport {
    MetricsReport {
        win_g_gt_n: None,
        win_g_gt_s: None,
        win_g_gt_g: None,
        win_G_gt_S: 0.0,
        win_G_gt_N: 0.0,
        win_S_gt_N: 0.0,
        gen_at_k: None,
        mrr_gold: 0.0,
        ndcg_at_3: 0.0,
        ndcg_at_5: 0.0,
        ndcg_at_10: 0.0,
        fid: None,
        diversity: None,
        n_groups: 0,
        config: serde_json::Value::Null,
    }
}

fn metric_cells(r: &MetricsReport) -> Vec<String> {
    r.rates()
        .iter()
        .map(|(_, v)| fmt_cell(*v))
        .chain([fmt_cell(r.fid), fmt_cell(r.diversity)])
        .collect()
}

/// Markdown table of the reports or sweep rows found in `dir`.
pub fn report(dir: &Path) -> Result<String> {
    let sweep = dir.join(SWEEP_TABLE);
    if sweep.exists() {
        let text = String::from_utf8(read(&sweep)?)?;
        let mut out = table_header(&["cell", "m", "λ_rank", "λ_gn", "error"]);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: SweepRow = serde_json::from_str(line).with_context(|| format!("bad row in {}", sweep.display()))?;
            let mut cells = vec![
                row.cell.to_string(),
                row.margin.to_string(),
                row.lambda_rank.to_string(),
                row.lambda_gn.to_string(),
                row.error.clone().unwrap_or_default(),
            ];
            cells.extend(metric_cells(row.metrics.as_ref().unwrap_or(&empty_report())));
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        return Ok(out);
    }
    let mut reports = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(mode) = name.strip_prefix("report-").and_then(|n| n.strip_suffix(".json")) {
            reports.push((mode.to_string(), read_json::<MetricsReport>(&dir.join(&name))?));
        }
    }
    ensure!(!reports.is_empty(), "no reports or sweep table in {}", dir.display());
    reports.sort_by_key(|(m, _)| m.parse::<Mode>().map(|m| m.index()).unwrap_or(usize::MAX));
    let mut out = table_header(&["mode"]);
    for (mode, r) in &reports {
        let cells: Vec<String> = std::iter::once(mode.clone()).chain(metric_cells(r)).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    Ok(out)
}

//! The six subcommands. Each reads and writes files under the config's
//! `out_dir`.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pialab_core::attacks::{score_targets, AttackMethod, AttackScore, MethodKind, Target};
use pialab_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use pialab_core::data::{self, Dataset, Split};
use pialab_core::eval::{auc, log_roc_export, roc_curve, tpr_at_fpr, MetricsReport};
use pialab_core::model::{EpsilonModel, NoisePredictor};
use pialab_core::parallel::Execution;
use pialab_core::schedule::NoiseSchedule;
use pialab_core::scores::{format_time, parse_time, read_scores, write_scores};
use pialab_core::train::{train, LossTrace};
use pialab_core::{Tensor, Time};

use crate::config::ExperimentConfig;
use crate::manifest::{Manifest, ManifestEntry};
use crate::CliError;

pub const SWEEP_HEADER: &str = "t,p,method,auc,tpr_at_1pct_fpr,tpr_at_01pct_fpr";

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            dir: cfg.out_dir.clone(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.bin")
    }
    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn loss(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
    pub fn scores(&self) -> PathBuf {
        self.dir.join("scores.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }
    pub fn roc_dir(&self) -> PathBuf {
        self.dir.join("roc")
    }
    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.md")
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub n_samples: usize,
    pub n_members: usize,
    pub n_holdout: usize,
}

/// Generates the dataset and member/holdout split, and records the resolved
/// config next to them.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenSummary, CliError> {
    let paths = RunPaths::new(cfg);
    ensure_dir(&paths.dir)?;
    let d = &cfg.dataset;
    let ds = data::gen_dataset(d.kind, d.n, d.dim, d.seed)
        .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
    let sp = data::split(&ds, cfg.split.fraction, cfg.split.seed)
        .map_err(|e| CliError::Config(format!("split.fraction: {e}")))?;
    data::save_dataset(&ds, &paths.dataset())?;
    data::save_split(&sp, &paths.split())?;
    write_file(&paths.config(), cfg.to_toml())?;
    Ok(GenSummary {
        n_samples: ds.len(),
        n_members: sp.member_ids.len(),
        n_holdout: sp.holdout_ids.len(),
    })
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Split), CliError> {
    let paths = RunPaths::new(cfg);
    let ds = data::load_dataset(&paths.dataset())?;
    let sp = data::load_split(&paths.split())?;
    if ds.dim != cfg.dataset.dim || ds.len() != cfg.dataset.n {
        return Err(CliError::Config(format!(
            "dataset: {} holds {} samples of dim {}, config says {} of dim {}; rerun gen",
            paths.dataset().display(),
            ds.len(),
            ds.dim,
            cfg.dataset.n,
            cfg.dataset.dim
        )));
    }
    if let Some(&i) = sp.member_ids.iter().chain(&sp.holdout_ids).find(|&&i| i >= ds.len()) {
        return Err(CliError::Config(format!("split: sample id {i} out of range")));
    }
    Ok((ds, sp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub start_epoch: usize,
    pub epochs_trained: usize,
    pub trace: LossTrace,
    pub wall_time_seconds: f64,
}

/// Trains on the members and writes `model.ckpt` and `loss.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    let paths = RunPaths::new(cfg);
    let (ds, sp) = load_data(cfg)?;
    let sched = cfg.schedule()?;
    let spec = cfg.schedule.spec();
    let arch = cfg.arch();
    let members: Vec<Tensor> = sp.member_ids.iter().map(|&i| ds.samples[i].clone()).collect();

    let (model, start) = if cfg.training.resume && paths.checkpoint().exists() {
        let ck = load_checkpoint(&paths.checkpoint())?;
        if ck.meta.arch != arch || ck.meta.schedule != spec {
            return Err(CliError::Config(
                "training.resume: checkpoint architecture or schedule differs from config".into(),
            ));
        }
        (ck.model, ck.meta.epochs_trained)
    } else {
        (EpsilonModel::new(arch.clone(), cfg.model.seed)?, 0)
    };
    let mut tc = cfg.train_config();
    tc.start_epoch = start;
    tc.epochs = cfg.training.epochs.saturating_sub(start);

    let started = Instant::now();
    let budget = Duration::from_secs(cfg.training.budget_secs);
    let (model, trace) = train(model, &members, &sched, &tc, Some(budget))?;
    let wall = started.elapsed().as_secs_f64();

    let mut meta = CheckpointMeta::new(arch, spec, cfg.model.seed, cfg.training.seed);
    meta.epochs_trained = start + tc.epochs;
    save_checkpoint(&Checkpoint { meta, model }, &paths.checkpoint())?;

    let mut csv = String::new();
    if start == 0 || !paths.loss().exists() {
        csv.push_str("epoch,loss\n");
    }
    for (i, l) in trace.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l:.16e}", start + i);
    }
    if start == 0 {
        write_file(&paths.loss(), csv)?;
    } else {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(paths.loss())
            .map_err(|e| CliError::io(paths.loss(), e))?;
        f.write_all(csv.as_bytes()).map_err(|e| CliError::io(paths.loss(), e))?;
    }
    Ok(TrainSummary {
        start_epoch: start,
        epochs_trained: start + tc.epochs,
        trace,
        wall_time_seconds: wall,
    })
}

/// Loads the checkpoint, dataset and split of a run.
pub fn load_run(
    cfg: &ExperimentConfig,
) -> Result<(Checkpoint, NoiseSchedule, Dataset, Split), CliError> {
    let paths = RunPaths::new(cfg);
    let ck = load_checkpoint(&paths.checkpoint())?;
    let sched = ck.meta.schedule.build()?;
    let (ds, sp) = load_data(cfg)?;
    if ck.meta.arch.sample_dim != ds.dim {
        return Err(CliError::Config(format!(
            "checkpoint expects dim {}, dataset has {}",
            ck.meta.arch.sample_dim, ds.dim
        )));
    }
    Ok((ck, sched, ds, sp))
}

/// Members first, then holdouts.
pub fn targets<'a>(ds: &'a Dataset, sp: &Split) -> Vec<Target<'a>> {
    let member = sp.member_ids.iter().map(|&i| (i, true));
    let holdout = sp.holdout_ids.iter().map(|&i| (i, false));
    member
        .chain(holdout)
        .map(|(i, is_member)| Target {
            sample_id: i,
            is_member,
            x0: &ds.samples[i],
        })
        .collect()
}

/// Scores every target with `method`, returning the scores and the
/// queries the model counted.
fn run_method(
    model: &EpsilonModel,
    targets: &[Target<'_>],
    method: &AttackMethod,
    sched: &NoiseSchedule,
) -> Result<(Vec<AttackScore>, u64, f64), CliError> {
    let before = model.query_count();
    let started = Instant::now();
    let scores = score_targets(model, targets, method, sched, Execution::Parallel)?;
    let wall = started.elapsed().as_secs_f64();
    let spent = model.query_count() - before;
    let expected = method.query_cost() * targets.len() as u64;
    if spent != expected {
        return Err(CliError::Core(pialab_core::Error::UnsupportedOperation(format!(
            "{} spent {spent} queries on {} samples, contract is {expected}",
            method.kind,
            targets.len()
        ))));
    }
    Ok((scores, spent, wall))
}

fn manifest_entry(command: &str, m: &AttackMethod, samples: usize, queries: u64, wall: f64) -> ManifestEntry {
    ManifestEntry {
        command: command.into(),
        method: m.kind.tag().into(),
        t: format_time(m.t),
        p: m.p,
        samples,
        queries,
        wall_time_seconds: wall,
    }
}

/// Runs every configured attack, writes `scores.csv` and appends the query
/// totals to `manifest.json`.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<Vec<AttackScore>, CliError> {
    let paths = RunPaths::new(cfg);
    if cfg.attacks.is_empty() {
        return Err(CliError::Config("attacks: no attack configured".into()));
    }
    let (ck, sched, ds, sp) = load_run(cfg)?;
    let methods: Vec<AttackMethod> = cfg.attacks.iter().map(|a| a.method()).collect();
    for (i, m) in methods.iter().enumerate() {
        m.validate(&sched)
            .map_err(|e| CliError::Config(format!("attacks[{i}]: {e}")))?;
    }
    let tg = targets(&ds, &sp);
    let mut all = Vec::new();
    let mut entries = Vec::new();
    for m in &methods {
        let (scores, queries, wall) = run_method(&ck.model, &tg, m, &sched)?;
        entries.push(manifest_entry("attack", m, tg.len(), queries, wall));
        all.extend(scores);
    }
    write_scores(&all, &paths.scores())?;
    Manifest::append(&paths.manifest(), entries)?;
    Ok(all)
}

fn time_cmp(a: Time, b: Time) -> Ordering {
    match (a, b) {
        (Time::Step(x), Time::Step(y)) => x.cmp(&y),
        (Time::Continuous(x), Time::Continuous(y)) => x.total_cmp(&y),
        (Time::Step(_), Time::Continuous(_)) => Ordering::Less,
        (Time::Continuous(_), Time::Step(_)) => Ordering::Greater,
    }
}

/// File stem for one (method, t, p) group.
pub fn group_stem(method: MethodKind, t: Time, p: f64) -> String {
    format!("{}_t{}_p{p:?}", method.tag(), format_time(t))
}

/// Groups scores by (method, t, p) in canonical order.
pub fn group_scores(scores: &[AttackScore]) -> Vec<Vec<AttackScore>> {
    let mut keys: Vec<(MethodKind, Time, f64)> = Vec::new();
    for s in scores {
        if !keys.iter().any(|&(m, t, p)| m == s.method && t == s.t && p == s.p) {
            keys.push((s.method, s.t, s.p));
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(time_cmp(a.1, b.1)).then(a.2.total_cmp(&b.2)));
    keys.into_iter()
        .map(|(m, t, p)| {
            scores
                .iter()
                .filter(|s| s.method == m && s.t == t && s.p == p)
                .cloned()
                .collect()
        })
        .collect()
}

/// Reads `scores.csv`, writes `metrics.json` and a log-scale ROC curve per
/// (method, t, p) group.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>, CliError> {
    let paths = RunPaths::new(cfg);
    let scores = read_scores(&paths.scores())?;
    if scores.is_empty() {
        return Err(CliError::Config(format!("{} holds no scores", paths.scores().display())));
    }
    let roc_dir = paths.roc_dir();
    ensure_dir(&roc_dir)?;
    let mut reports = Vec::new();
    for group in group_scores(&scores) {
        let report = MetricsReport::from_scores(&group, 0.0)?;
        let curve = roc_curve(&group)?;
        let stem = group_stem(group[0].method, group[0].t, group[0].p);
        log_roc_export(
            &curve,
            &roc_dir.join(format!("{stem}.csv")),
            &roc_dir.join(format!("{stem}.svg")),
        )?;
        reports.push(report);
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write_file(&paths.metrics(), json + "\n")?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t: Time,
    pub p: f64,
    pub method: MethodKind,
    pub auc: f64,
    pub tpr_at_1pct_fpr: f64,
    pub tpr_at_01pct_fpr: f64,
}

impl SweepRow {
    fn key(&self) -> (String, String, &'static str) {
        (format_time(self.t), format!("{:?}", self.p), self.method.tag())
    }

    fn line(&self) -> String {
        format!(
            "{},{:?},{},{:.16e},{:.16e},{:.16e}",
            format_time(self.t),
            self.p,
            self.method.tag(),
            self.auc,
            self.tpr_at_1pct_fpr,
            self.tpr_at_01pct_fpr
        )
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        time_cmp(self.t, other.t)
            .then(self.p.total_cmp(&other.p))
            .then(self.method.cmp(&other.method))
    }
}

/// Reads a sweep table written by [`cmd_sweep`].
pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let fmt_err = |field: String, reason: String| {
        CliError::Core(pialab_core::Error::Format {
            path: path.to_path_buf(),
            field,
            reason,
        })
    };
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(fmt_err("header".into(), format!("expected `{SWEEP_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let row = i + 1;
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 6 {
                return Err(fmt_err(format!("row {row}"), "expected 6 columns".into()));
            }
            let num = |j: usize, name: &str| {
                c[j].parse::<f64>()
                    .map_err(|e| fmt_err(format!("row {row} {name}"), e.to_string()))
            };
            Ok(SweepRow {
                t: parse_time(c[0]).map_err(|e| fmt_err(format!("row {row} t"), e.to_string()))?,
                p: num(1, "p")?,
                method: c[2]
                    .parse()
                    .map_err(|e: pialab_core::Error| fmt_err(format!("row {row} method"), e.to_string()))?,
                auc: num(3, "auc")?,
                tpr_at_1pct_fpr: num(4, "tpr_at_1pct_fpr")?,
                tpr_at_01pct_fpr: num(5, "tpr_at_01pct_fpr")?,
            })
        })
        .collect()
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&r.line());
        out.push('\n');
    }
    out
}

/// Default t grid: every hundredth of the time range, endpoints excluded.
pub fn default_t_grid(sched: &NoiseSchedule) -> Vec<Time> {
    match sched {
        NoiseSchedule::Discrete(s) => {
            let stride = (s.steps() / 100).max(1);
            (1..)
                .map(|i| i * stride)
                .take_while(|&t| t < s.steps())
                .map(Time::Step)
                .collect()
        }
        NoiseSchedule::Continuous(_) => (1..100).map(|i| Time::Continuous(i as f64 / 100.0)).collect(),
    }
}

/// Metrics of one sweep point.
pub fn sweep_point(scores: &[AttackScore], method: &AttackMethod) -> Result<SweepRow, CliError> {
    let curve = roc_curve(scores)?;
    Ok(SweepRow {
        t: method.t,
        p: method.p,
        method: method.kind,
        auc: auc(&curve),
        tpr_at_1pct_fpr: tpr_at_fpr(&curve, 0.01)?,
        tpr_at_01pct_fpr: tpr_at_fpr(&curve, 0.001)?,
    })
}

/// Evaluates every (t, p, method) grid point and writes `sweep.csv`.
///
/// Each finished point is appended to the table immediately; on rerun,
/// points already present are skipped.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let paths = RunPaths::new(cfg);
    let (ck, sched, ds, sp) = load_run(cfg)?;
    let sw = &cfg.sweep;
    let times: Vec<Time> = match &sw.t {
        Some(ts) => ts.iter().map(|&t| t.into()).collect(),
        None => default_t_grid(&sched),
    };
    if times.is_empty() || sw.p.is_empty() || sw.methods.is_empty() {
        return Err(CliError::Config("sweep: grid is empty".into()));
    }
    let mut grid = Vec::new();
    for &t in &times {
        for &p in &sw.p {
            for &kind in &sw.methods {
                let m = AttackMethod::new(kind, t, p).with_k_steps(sw.k_steps).with_seed(sw.seed);
                m.validate(&sched)
                    .map_err(|e| CliError::Config(format!("sweep: {kind} at t={t}, p={p}: {e}")))?;
                grid.push(m);
            }
        }
    }

    let path = paths.sweep();
    let mut rows = if path.exists() { read_sweep(&path)? } else { Vec::new() };
    if !path.exists() {
        write_file(&path, format!("{SWEEP_HEADER}\n"))?;
    }
    let mut file = OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))?;
    let tg = targets(&ds, &sp);
    let mut entries = Vec::new();
    for m in &grid {
        let probe = SweepRow {
            t: m.t,
            p: m.p,
            method: m.kind,
            auc: 0.0,
            tpr_at_1pct_fpr: 0.0,
            tpr_at_01pct_fpr: 0.0,
        };
        if rows.iter().any(|r| r.key() == probe.key()) {
            continue;
        }
        let (scores, queries, wall) = run_method(&ck.model, &tg, m, &sched)?;
        let row = sweep_point(&scores, m)?;
        writeln!(file, "{}", row.line()).map_err(|e| CliError::io(&path, e))?;
        file.flush().map_err(|e| CliError::io(&path, e))?;
        entries.push(manifest_entry("sweep", m, tg.len(), queries, wall));
        rows.push(row);
    }
    drop(file);
    rows.sort_by(SweepRow::cmp_key);
    write_file(&path, sweep_csv(&rows))?;
    if !entries.is_empty() {
        Manifest::append(&paths.manifest(), entries)?;
    }
    Ok(rows)
}

fn read_loss(path: &Path) -> Option<Vec<f64>> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(1)?.parse().ok())
        .collect()
}

/// Writes `report.md` from whatever artifacts the run directory holds.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let paths = RunPaths::new(cfg);
    ensure_dir(&paths.dir)?;
    let mut md = String::from("# pialab report\n\n## Configuration\n\n");
    let d = &cfg.dataset;
    let _ = writeln!(md, "- dataset: {} with n = {}, dim = {}, seed {}", d.kind, d.n, d.dim, d.seed);
    let _ = writeln!(md, "- split: fraction {}, seed {}", cfg.split.fraction, cfg.split.seed);
    let _ = writeln!(md, "- schedule: `{}`", serde_json::to_string(&cfg.schedule.spec()).expect("spec serializes"));
    let tr = &cfg.training;
    let _ = writeln!(
        md,
        "- training: {} epochs, batch {}, {} noise draws, lr {}, seed {}",
        tr.epochs, tr.batch_size, tr.noise_draws, tr.lr, tr.seed
    );

    md.push_str("\n## Training\n\n");
    match read_loss(&paths.loss()) {
        Some(l) if !l.is_empty() => {
            let _ = writeln!(
                md,
                "{} epochs logged; loss {:.4} at the first epoch, {:.4} at the last.",
                l.len(),
                l[0],
                l[l.len() - 1]
            );
        }
        _ => md.push_str("No loss trace.\n"),
    }

    md.push_str("\n## Attack metrics\n\n");
    if paths.metrics().exists() {
        let text = fs::read_to_string(paths.metrics()).map_err(|e| CliError::io(paths.metrics(), e))?;
        let reports: Vec<MetricsReport> = serde_json::from_str(&text).map_err(|e| {
            CliError::Core(pialab_core::Error::Format {
                path: paths.metrics(),
                field: "reports".into(),
                reason: e.to_string(),
            })
        })?;
        md.push_str("| method | t | p | AUC | TPR@1%FPR | TPR@0.1%FPR | queries |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for r in &reports {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |",
                r.method, r.t, r.p, r.auc, r.tpr_at_1pct_fpr, r.tpr_at_01pct_fpr, r.total_queries
            );
        }
    } else {
        md.push_str("No metrics; run `attack` and `eval`.\n");
    }

    md.push_str("\n## Sweep\n\n");
    if paths.sweep().exists() {
        let rows = read_sweep(&paths.sweep())?;
        if let Some(best) = rows.iter().max_by(|a, b| a.auc.total_cmp(&b.auc)) {
            let _ = writeln!(
                md,
                "Best AUC {:.4} for {} at t = {}, p = {}.\n",
                best.auc,
                best.method,
                format_time(best.t),
                best.p
            );
        }
        md.push_str("| t | p | method | AUC | TPR@1%FPR | TPR@0.1%FPR |\n|---|---|---|---|---|---|\n");
        for r in &rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                format_time(r.t),
                r.p,
                r.method,
                r.auc,
                r.tpr_at_1pct_fpr,
                r.tpr_at_01pct_fpr
            );
        }
    } else {
        md.push_str("No sweep.\n");
    }

    md.push_str("\n## Queries\n\n");
    let manifest = Manifest::load(&paths.manifest())?;
    if manifest.entries.is_empty() {
        md.push_str("No queries recorded.\n");
    } else {
        md.push_str("| command | method | t | p | samples | queries |\n|---|---|---|---|---|---|\n");
        for e in &manifest.entries {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} |",
                e.command, e.method, e.t, e.p, e.samples, e.queries
            );
        }
        let _ = writeln!(md, "\nTotal: {} queries.", manifest.total_queries);
    }
    write_file(&paths.report(), md)?;
    Ok(paths.report())
}

//! Command implementations behind the CLI. Each command reads the artifacts
//! of the previous ones from the configured directories and refuses any that
//! were produced under a different config hash.
//!
//! Layout:
//!
//! ```text
//! data/        interactions.txt  catalog.tsv  split.tsv  templates.tsv  manifest.tsv
//! checkpoints/ cf.ckpt  stage1.ckpt  stage2.ckpt  baseline.ckpt
//! reports/     cf_objective.tsv  train_<model>.jsonl  eval_<model>_<which>.tsv
//!              rankings_<model>_<which>.tsv  summary.tsv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::TensorFile;
use crate::config::{sha256_hex, RunConfig};
use crate::corpus::{
    build_catalog, generate_synthetic, leave_one_out_split, load_interactions, parse_interactions,
    DatasetSplit, EvalTarget, InteractionLog, ItemCatalog,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, ranking_dump_tsv, which_name, EvalReport, METRIC_NAMES};
use crate::prompts::{Regime, Task, TemplateSet, Vocabulary, DEFAULT_TEMPLATES};
use crate::recommender::Recommender;
use crate::train::{self, LogRecord, StageConfig, TrainState};
use crate::wals::{fit_wals_traced, CfModel, Interactions};

/// Which trained model a command refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Stage1,
    Stage2,
    Baseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Stage1, ModelKind::Stage2, ModelKind::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Stage1 => "stage1",
            ModelKind::Stage2 => "stage2",
            ModelKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown model {s:?}; expected stage1, stage2 or baseline"
                ))
            })
    }
}

pub fn parse_which(s: &str) -> Result<EvalTarget> {
    match s {
        "val" => Ok(EvalTarget::Val),
        "test" => Ok(EvalTarget::Test),
        _ => Err(Error::invalid(format!(
            "unknown split {s:?}; expected val or test"
        ))),
    }
}

pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Paths {
            data: cfg.paths.data_dir.clone(),
            checkpoints: cfg.paths.checkpoint_dir.clone(),
            reports: cfg.paths.report_dir.clone(),
        }
    }

    pub fn interactions(&self) -> PathBuf {
        self.data.join("interactions.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join("manifest.tsv")
    }

    pub fn templates(&self) -> PathBuf {
        self.data.join("templates.tsv")
    }

    pub fn cf(&self) -> PathBuf {
        self.checkpoints.join("cf.ckpt")
    }

    pub fn model(&self, kind: ModelKind) -> PathBuf {
        self.checkpoints.join(format!("{}.ckpt", kind.name()))
    }

    pub fn eval_report(&self, kind: ModelKind, which: EvalTarget) -> PathBuf {
        self.reports
            .join(format!("eval_{}_{}.tsv", kind.name(), which_name(which)))
    }

    pub fn rankings(&self, kind: ModelKind, which: EvalTarget) -> PathBuf {
        self.reports.join(format!(
            "rankings_{}_{}.tsv",
            kind.name(),
            which_name(which)
        ))
    }

    pub fn train_log(&self, kind: ModelKind) -> PathBuf {
        self.reports.join(format!("train_{}.jsonl", kind.name()))
    }

    pub fn summary(&self) -> PathBuf {
        self.reports.join("summary.tsv")
    }
}

fn header(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    vec![
        ("config_hash", cfg.hash()),
        ("seed", cfg.run.seed.to_string()),
    ]
}

fn header_text(cfg: &RunConfig) -> String {
    header(cfg)
        .iter()
        .map(|(k, v)| format!("# {k}={v}\n"))
        .collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_required(path: &Path, hint: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            path: path.to_owned(),
            hint: hint.to_owned(),
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn check_hash(found: Option<&str>, cfg: &RunConfig, what: &Path) -> Result<()> {
    let want = cfg.hash();
    match found {
        Some(h) if h == want => Ok(()),
        Some(h) => Err(Error::invalid(format!(
            "{} was produced under config hash {h}, the current config hashes to {want}; rerun the upstream commands",
            what.display()
        ))),
        None => Err(Error::invalid(format!("{} carries no config hash", what.display()))),
    }
}

fn header_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    let prefix = format!("# {key}=");
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix(prefix.as_str()))
}

/// Everything downstream commands need from `prepare`.
pub struct Prepared {
    pub log: InteractionLog,
    pub catalog: ItemCatalog,
    pub split: DatasetSplit,
    pub templates: TemplateSet,
    pub vocab: Vocabulary,
    /// SHA-256 of the canonical interaction file; stamped on every
    /// downstream artifact next to the config hash.
    pub digest: String,
}

impl Prepared {
    fn build(log: InteractionLog, templates: TemplateSet) -> Result<Self> {
        let digest = sha256_hex(log.to_canonical_string().as_bytes());
        let catalog = build_catalog(&log);
        let split = leave_one_out_split(&log, &catalog)?;
        let vocab = Vocabulary::build(
            &templates,
            catalog.len(),
            &log.dataset_name,
            split.n_users(),
        )?;
        Ok(Prepared {
            log,
            catalog,
            split,
            templates,
            vocab,
            digest,
        })
    }
}

fn source_templates(cfg: &RunConfig) -> Result<(TemplateSet, String)> {
    let text = match &cfg.data.templates {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::io(format!("reading templates {}", p.display()), e))?,
        None => DEFAULT_TEMPLATES.to_owned(),
    };
    Ok((TemplateSet::parse(&text)?, text))
}

/// Writes the canonical interaction file, catalog, split manifest, the
/// template set in use and a data manifest.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let log = match (&cfg.data.interactions, &cfg.data.synthetic) {
        (Some(p), _) => load_interactions(p)?,
        (None, Some(s)) => generate_synthetic(s)?,
        (None, None) => return Err(Error::invalid("no data source configured")),
    };
    let (templates, template_text) = source_templates(cfg)?;
    let data = Prepared::build(log, templates)?;
    let interactions = data.log.to_canonical_string();
    let head = header_text(cfg);

    write_file(&paths.interactions(), interactions.as_bytes())?;
    write_file(&paths.templates(), template_text.as_bytes())?;
    write_file(
        &paths.data.join("catalog.tsv"),
        format!(
            "{head}index\titem_id\n{}",
            data.catalog.to_manifest_string()
        )
        .as_bytes(),
    )?;
    write_file(
        &paths.data.join("split.tsv"),
        format!(
            "{head}user\ttrain\tval\ttest\n{}",
            data.split.to_manifest_string()
        )
        .as_bytes(),
    )?;
    let mut manifest = head;
    for (k, v) in [
        ("dataset", data.log.dataset_name.clone()),
        ("n_users", data.split.n_users().to_string()),
        ("n_items", data.catalog.len().to_string()),
        ("n_interactions", data.log.n_interactions().to_string()),
        ("vocab_size", data.vocab.len().to_string()),
        ("interactions_sha256", sha256_hex(interactions.as_bytes())),
        ("templates_sha256", sha256_hex(template_text.as_bytes())),
    ] {
        let _ = writeln!(manifest, "{k}\t{v}");
    }
    write_file(&paths.manifest(), manifest.as_bytes())?;
    log::info!(
        "prepared {} users, {} items, {} interactions",
        data.split.n_users(),
        data.catalog.len(),
        data.log.n_interactions()
    );
    Ok(())
}

/// Reloads prepared data, verifying the config hash and file digests.
pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let paths = Paths::new(cfg);
    let manifest_path = paths.manifest();
    let manifest = read_required(&manifest_path, "run `prepare` first")?;
    check_hash(header_value(&manifest, "config_hash"), cfg, &manifest_path)?;
    let field = |key: &str| {
        manifest
            .lines()
            .filter(|l| !l.starts_with('#'))
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
            .ok_or_else(|| Error::invalid(format!("{} lacks {key}", manifest_path.display())))
    };
    let interactions_path = paths.interactions();
    let interactions = read_required(&interactions_path, "run `prepare` first")?;
    let templates_text = read_required(&paths.templates(), "run `prepare` first")?;
    if sha256_hex(interactions.as_bytes()) != field("interactions_sha256")?
        || sha256_hex(templates_text.as_bytes()) != field("templates_sha256")?
    {
        return Err(Error::invalid(format!(
            "files in {} changed since `prepare`",
            paths.data.display()
        )));
    }
    let log = parse_interactions(
        &interactions,
        field("dataset")?,
        &interactions_path.display().to_string(),
    )?;
    Prepared::build(log, TemplateSet::parse(&templates_text)?)
}

fn stamp(f: &mut TensorFile, cfg: &RunConfig, data: &Prepared) {
    for (k, v) in header(cfg) {
        f.set_meta(k, v);
    }
    f.set_meta("data_sha256", &data.digest);
}

fn read_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    data: &Prepared,
    hint: &str,
) -> Result<TensorFile> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            path: path.to_owned(),
            hint: hint.to_owned(),
        });
    }
    let f = TensorFile::read(path)?;
    check_hash(f.meta("config_hash"), cfg, path)?;
    if f.meta("data_sha256") != Some(data.digest.as_str()) {
        return Err(Error::invalid(format!(
            "{} was built from different data; rerun the upstream commands",
            path.display()
        )));
    }
    Ok(f)
}

/// Fits WALS on the training split; logs every half-sweep objective.
pub fn cmd_cf_fit(cfg: &RunConfig) -> Result<()> {
    let data = load_prepared(cfg)?;
    let paths = Paths::new(cfg);
    let train = Interactions::from_train_split(&data.split)?;
    let (model, trace) = fit_wals_traced(&train, &cfg.wals)?;
    let mut f = model.to_tensor_file();
    stamp(&mut f, cfg, &data);
    write_file(&paths.cf(), &f.to_bytes())?;
    let mut log_text = header_text(cfg);
    log_text.push_str("half_sweep\tobjective\n");
    for (i, o) in trace.objectives.iter().enumerate() {
        let _ = writeln!(log_text, "{i}\t{o}");
    }
    write_file(&paths.reports.join("cf_objective.tsv"), log_text.as_bytes())?;
    log::info!(
        "wals objective {:.4} after {} half-sweeps",
        trace.objectives.last().copied().unwrap_or(f64::NAN),
        trace.objectives.len()
    );
    Ok(())
}

pub fn load_cf(cfg: &RunConfig, data: &Prepared) -> Result<CfModel> {
    let paths = Paths::new(cfg);
    CfModel::from_tensor_file(&read_checkpoint(
        &paths.cf(),
        cfg,
        data,
        "run `cf-fit` first",
    )?)
}

/// Loads a trained model checkpoint together with the inputs it needs.
pub fn load_model(cfg: &RunConfig, kind: ModelKind, data: &Prepared) -> Result<Recommender> {
    let paths = Paths::new(cfg);
    let hint = match kind {
        ModelKind::Stage1 => "run `train --stage 1` first",
        ModelKind::Stage2 => "run `train --stage 2` first",
        ModelKind::Baseline => "run `train --baseline` first",
    };
    let f = read_checkpoint(&paths.model(kind), cfg, data, hint)?;
    let cf = match kind {
        ModelKind::Baseline => None,
        _ => Some(load_cf(cfg, data)?),
    };
    Recommender::from_tensor_file(&f, data.vocab.clone(), cf)
}

fn save_model(
    cfg: &RunConfig,
    data: &Prepared,
    model: &Recommender,
    kind: ModelKind,
    path: &Path,
    step: usize,
) -> Result<()> {
    let mut f = model.to_tensor_file();
    stamp(&mut f, cfg, data);
    f.set_meta("model", kind.name());
    f.set_meta("step", step);
    write_file(path, &f.to_bytes())
}

fn run_training(
    cfg: &RunConfig,
    kind: ModelKind,
    stage_cfg: &StageConfig,
    data: &Prepared,
    start: Recommender,
) -> Result<Recommender> {
    let paths = Paths::new(cfg);
    let mut log_text = String::new();
    let mut observe = |r: &LogRecord, s: &TrainState| -> Result<()> {
        log_text.push_str(&serde_json::to_string(r).expect("log record serializes"));
        log_text.push('\n');
        let every = stage_cfg.checkpoint_every;
        if every > 0 && s.step.is_multiple_of(every) && s.step < stage_cfg.steps {
            let p = paths
                .checkpoints
                .join(format!("{}_step{}.ckpt", kind.name(), s.step));
            save_model(cfg, data, &s.model, kind, &p, s.step)?;
        }
        Ok(())
    };
    let state = match kind {
        ModelKind::Stage1 => {
            train::train_stage1(start, &data.split, &data.templates, stage_cfg, &mut observe)?
        }
        ModelKind::Stage2 => {
            train::train_stage2(start, &data.split, &data.templates, stage_cfg, &mut observe)?
        }
        ModelKind::Baseline => {
            train::train_baseline(start, &data.split, &data.templates, stage_cfg, &mut observe)?
        }
    };
    write_file(&paths.train_log(kind), log_text.as_bytes())?;
    save_model(
        cfg,
        data,
        &state.model,
        kind,
        &paths.model(kind),
        state.step,
    )?;
    Ok(state.model)
}

/// Stage 1 from a fresh backbone and projectors, Stage 2 from the Stage 1
/// checkpoint, or the text-only baseline from a fresh backbone.
pub fn cmd_train(cfg: &RunConfig, kind: ModelKind) -> Result<()> {
    let data = load_prepared(cfg)?;
    let start = match kind {
        ModelKind::Stage1 => {
            let cf = load_cf(cfg, &data)?;
            Recommender::with_embeddings(
                data.vocab.clone(),
                &cfg.model,
                cf,
                cfg.d_hidden(),
                cfg.projectors.seed,
            )?
        }
        ModelKind::Stage2 => {
            let m = load_model(cfg, ModelKind::Stage1, &data)?;
            if m.lora.is_some() || m.embedding.is_none() {
                return Err(Error::invalid("stage1.ckpt does not hold a stage 1 model"));
            }
            m
        }
        ModelKind::Baseline => Recommender::text_only(data.vocab.clone(), &cfg.model)?,
    };
    let stage_cfg = match kind {
        ModelKind::Stage1 => cfg.stage1.clone(),
        ModelKind::Stage2 => cfg.stage2.clone(),
        ModelKind::Baseline => cfg.baseline_stage(),
    };
    run_training(cfg, kind, &stage_cfg, &data, start)?;
    log::info!("trained {} for {} steps", kind.name(), stage_cfg.steps);
    Ok(())
}

/// Evaluates one model on both tasks under both template regimes.
pub fn cmd_eval(
    cfg: &RunConfig,
    kind: ModelKind,
    which: EvalTarget,
    dump_rankings: bool,
) -> Result<EvalReport> {
    let data = load_prepared(cfg)?;
    let model = load_model(cfg, kind, &data)?;
    let paths = Paths::new(cfg);
    let (report, dump) = evaluate_all(
        &model,
        &data.split,
        &data.templates,
        which,
        cfg.eval_max_history(),
    )?;
    let mut head = header(cfg);
    head.push(("data_sha256", data.digest.clone()));
    head.push(("model", kind.name().to_owned()));
    write_file(
        &paths.eval_report(kind, which),
        report.to_tsv(&head).as_bytes(),
    )?;
    if dump_rankings {
        let mut text = header_text(cfg);
        text.push_str(&ranking_dump_tsv(&dump));
        write_file(&paths.rankings(kind, which), text.as_bytes())?;
    }
    for s in &report.slices {
        log::info!(
            "{} {} {}: HR@10 {:.4}",
            kind.name(),
            s.task.name(),
            s.regime.name(),
            s.hr10()
        );
    }
    Ok(report)
}

/// One parsed record of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub task: Task,
    pub regime: Regime,
    pub metric: String,
    pub value: f64,
    pub n_users: usize,
}

pub fn parse_eval_report(text: &str, source: &Path) -> Result<Vec<ReportRecord>> {
    let bad = |line: usize, message: String| Error::Parse {
        path: source.display().to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("task\t") || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let regime = Regime::ALL
            .into_iter()
            .find(|r| r.name() == f[1])
            .ok_or_else(|| bad(i + 1, format!("unknown regime {:?}", f[1])))?;
        out.push(ReportRecord {
            task: f[0].parse().map_err(|e: Error| bad(i + 1, e.to_string()))?,
            regime,
            metric: f[2].to_owned(),
            value: f[3]
                .parse()
                .map_err(|_| bad(i + 1, format!("bad value {:?}", f[3])))?,
            n_users: f[4]
                .parse()
                .map_err(|_| bad(i + 1, format!("bad user count {:?}", f[4])))?,
        });
    }
    Ok(out)
}

/// Collects the test-split evaluation reports into one table with a column
/// per model. Needs at least the Stage 2 report.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let paths = Paths::new(cfg);
    let which = EvalTarget::Test;
    let mut models = vec![ModelKind::Stage1, ModelKind::Stage2];
    if cfg.run.baseline {
        models.push(ModelKind::Baseline);
    }
    let mut columns = Vec::new();
    for kind in models {
        let path = paths.eval_report(kind, which);
        if !path.exists() && kind != ModelKind::Stage2 {
            continue;
        }
        let hint = format!("run `eval --model {} --which test` first", kind.name());
        let text = read_required(&path, &hint)?;
        check_hash(header_value(&text, "config_hash"), cfg, &path)?;
        columns.push((kind, parse_eval_report(&text, &path)?));
    }
    let mut out = header_text(cfg);
    out.push_str("# which=test\ntask\tregime\tmetric");
    for (kind, _) in &columns {
        let _ = write!(out, "\t{}", kind.name());
    }
    out.push('\n');
    for task in Task::ALL {
        for regime in Regime::ALL {
            for metric in METRIC_NAMES {
                let _ = write!(out, "{}\t{}\t{metric}", task.name(), regime.name());
                for (_, records) in &columns {
                    let v = records
                        .iter()
                        .find(|r| r.task == task && r.regime == regime && r.metric == metric)
                        .map(|r| format!("{:.4}", r.value))
                        .unwrap_or_else(|| "-".into());
                    let _ = write!(out, "\t{v}");
                }
                out.push('\n');
            }
        }
    }
    write_file(&paths.summary(), out.as_bytes())?;
    Ok(out)
}

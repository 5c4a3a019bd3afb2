use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use ptcmil::bagfile::{read_bags, write_bags};
use ptcmil::checkpoint::{Checkpoint, CheckpointError};
use ptcmil::data::{
    gen_classification_bags, gen_survival_bags, manifest, split_bags, BagRecord, DataError, Label, TaskKind,
};
use ptcmil::heads::SurvivalLabel;
use ptcmil::metrics::MetricError;
use ptcmil::model::{Model, ModelError, Task};
use ptcmil::nn::xavier_uniform_init;
use ptcmil::tensor::finite_diff_check_with;
use ptcmil::train::{evaluate, few_shot_adapt, fit, history_csv, Evaluation, TrainError};

use crate::config::{ConfigError, RunConfig, SEED_ENV};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig { key, reason } => CliError::Config(ConfigError::Invalid {
                key: key.into(),
                value: String::new(),
                reason,
            }),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { key, reason } => CliError::Config(ConfigError::Invalid {
                key: key.into(),
                value: String::new(),
                reason,
            }),
            ModelError::NonFiniteLoss | ModelError::Optim(_) | ModelError::Tensor(_) => {
                CliError::Numeric(e.to_string())
            }
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::FrozenChanged(_) => CliError::Numeric(e.to_string()),
            TrainError::Metric(_) | TrainError::EmptySplit(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Ordered `key: value` lines.
#[derive(Debug, Default)]
struct Report(Vec<(String, String)>);

impl Report {
    fn add(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    fn evaluation(&mut self, prefix: &str, e: &Evaluation) -> &mut Self {
        self.add(&format!("{prefix}{}", e.metric_name), e.metric);
        if let Some(a) = e.accuracy {
            self.add(&format!("{prefix}accuracy"), a);
        }
        self.add(&format!("{prefix}loss"), e.mean_loss)
    }

    fn emit(&self, out: Option<&Path>, file: &str) -> Result<()> {
        let text: String = self.0.iter().map(|(k, v)| format!("{k}: {v}\n")).collect();
        print!("{text}");
        if let Some(dir) = out {
            write(&dir.join(file), text.as_bytes())?;
        }
        Ok(())
    }
}

fn load_config(overrides: &[(String, String)], path: Option<&Path>, required: &[&str]) -> Result<RunConfig> {
    Ok(RunConfig::load(
        path,
        overrides,
        std::env::var(SEED_ENV).ok(),
        required,
    )?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<BagRecord>> {
    read_bags(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Model(m) => m.into(),
        e => CliError::Data(format!("{}: {e}", path.display())),
    })
}

fn check_width(model: &Model, bags: &[BagRecord], path: &Path) -> Result<()> {
    if let Some(b) = bags.iter().find(|b| b.dim() != model.config.d_in) {
        return Err(CliError::Data(format!(
            "{}: bag {} has {} features, model expects {}",
            path.display(),
            b.id,
            b.dim(),
            model.config.d_in
        )));
    }
    Ok(())
}

fn task_name(task: Task) -> &'static str {
    match task.kind() {
        TaskKind::Classification => "classification",
        TaskKind::Survival => "survival",
    }
}

pub fn gen_data(overrides: &[(String, String)], config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(overrides, config, &["task", "seed"])?;
    let task = cfg.task()?;
    let (bags, hash) = match task {
        TaskKind::Classification => {
            let c = cfg.class_data()?;
            (gen_classification_bags(&c)?, c.hash())
        }
        TaskKind::Survival => {
            let c = cfg.surv_data()?;
            (gen_survival_bags(&c)?, c.hash())
        }
    };
    let sizes = cfg.split_sizes(bags.len())?;
    let splits = split_bags(bags, sizes, cfg.seed()?)?;
    create_dir(out)?;
    let mut report = Report::default();
    report
        .add("task", task)
        .add("seed", cfg.seed()?)
        .add("config_hash", format!("{hash:016x}"));
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_bags(&out.join(format!("{name}.ptcb")), part)?;
        write(&out.join(format!("{name}.txt")), manifest(part).as_bytes())?;
        report.add(&format!("{name}_bags"), part.len());
        let positive = part
            .iter()
            .filter(|b| match b.label {
                Label::Class(c) => c == 1,
                Label::Survival(s) => s.censored,
            })
            .count();
        let key = match task {
            TaskKind::Classification => "positive",
            TaskKind::Survival => "censored",
        };
        report.add(&format!("{name}_{key}"), positive);
    }
    report.emit(Some(out), "gen_report.txt")
}

pub fn train(overrides: &[(String, String)], config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(overrides, config, &["task", "seed"])?;
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let train = read(&data.join("train.ptcb"))?;
    let val = read(&data.join("val.ptcb"))?;
    let test_path = data.join("test.ptcb");
    let test = if test_path.exists() {
        Some(read(&test_path)?)
    } else {
        None
    };
    let model = Model::new(model_cfg.clone(), cfg.seed()?)?;
    check_width(&model, &train, &data.join("train.ptcb"))?;
    check_width(&model, &val, &data.join("val.ptcb"))?;
    let params = model.param_count();
    let result = fit(model, &train, &val, &train_cfg)?;
    create_dir(out)?;
    Checkpoint {
        model: result.model.clone(),
        optimizer: result.optimizer.clone(),
    }
    .save(&out.join("checkpoint.ptck"))?;
    write(&out.join("history.csv"), history_csv(&result.history).as_bytes())?;
    let mut report = Report::default();
    report
        .add("variant", model_cfg.variant())
        .add("task", task_name(model_cfg.task))
        .add("seed", train_cfg.seed)
        .add("params", params)
        .add("epochs", train_cfg.epochs)
        .add(
            "best_epoch",
            result.best_epoch.map_or("none".to_string(), |e| e.to_string()),
        );
    report.evaluation("val_", &evaluate(&result.model, &val)?);
    report.evaluation("train_", &evaluate(&result.model, &train)?);
    if let Some(test) = &test {
        check_width(&result.model, test, &test_path)?;
        report.evaluation("test_", &evaluate(&result.model, test)?);
    }
    report.emit(Some(out), "report.txt")
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let bags = read(data)?;
    check_width(&ck.model, &bags, data)?;
    let e = evaluate(&ck.model, &bags)?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let mut report = Report::default();
    report
        .add("variant", ck.model.config.variant())
        .add("task", task_name(ck.model.config.task))
        .add("bags", e.bags);
    report.evaluation("", &e);
    report.emit(out, "eval_report.txt")
}

pub fn adapt(
    overrides: &[(String, String)],
    config: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = load_config(overrides, config, &["seed"])?;
    let mut plan = cfg.adaptation()?;
    let pool = read(data)?;
    if ck.model.config.task.kind() == TaskKind::Classification {
        plan.classes = pool
            .iter()
            .filter_map(|b| match b.label {
                Label::Class(c) => Some(c + 1),
                Label::Survival(_) => None,
            })
            .max()
            .map(|k| k.max(2));
    }
    check_width(&ck.model, &pool, data)?;
    let val_bags = val.map(read).transpose()?;
    let adapted = few_shot_adapt(&ck.model, &ck.optimizer, &pool, &plan)?;
    create_dir(out)?;
    Checkpoint {
        model: adapted.model.clone(),
        optimizer: adapted.optimizer.clone(),
    }
    .save(&out.join("adapted.ptck"))?;
    let mut counts = std::collections::BTreeMap::new();
    for id in &adapted.selected {
        let b = pool.iter().find(|b| &b.id == id).expect("selected from pool");
        let key = match b.label {
            Label::Class(c) => c,
            Label::Survival(s) => usize::from(s.censored),
        };
        *counts.entry(key).or_insert(0usize) += 1;
    }
    let mut report = Report::default();
    report
        .add("shots", adapted.selected.len())
        .add(
            "selected_class_counts",
            counts.values().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        )
        .add("selected", adapted.selected.join(","))
        .add("trainable", adapted.trainable.join(","))
        .add("frozen_arrays", adapted.frozen_verified)
        .add("frozen_arrays_unchanged", true)
        .add("epochs", plan.epochs);
    if let Some(v) = &val_bags {
        check_width(&ck.model, v, val.expect("val path"))?;
        report.evaluation("before_", &evaluate(&ck.model, v)?);
        report.evaluation("after_", &evaluate(&adapted.model, v)?);
    }
    report.emit(Some(out), "adapt_report.txt")
}

pub fn export_clusters(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    if !ck.model.config.clustering {
        return Err(CliError::Config(ConfigError::Invalid {
            key: "clustering".into(),
            value: "off".into(),
            reason: "checkpoint has no prompt clusters to export".into(),
        }));
    }
    let bags = read(data)?;
    check_width(&ck.model, &bags, data)?;
    let c = ck.model.config.clusters;
    let mut rows = String::from("bag_id,patch_index,cluster_index,max_probability\n");
    let mut hist = String::from("bag_id");
    for k in 0..c {
        hist.push_str(&format!(",cluster_{k}"));
    }
    hist.push('\n');
    for b in &bags {
        let outp = ck.model.forward(&b.features, false, None)?;
        let a = outp.assignment.expect("clustering model assigns");
        let part = outp.partition.expect("clustering model partitions");
        for (i, &k) in part.labels.iter().enumerate() {
            rows.push_str(&format!("{},{},{},{}\n", b.id, i, k, a.row(i)[k]));
        }
        hist.push_str(&b.id);
        for g in &part.groups {
            hist.push_str(&format!(",{}", g.len()));
        }
        hist.push('\n');
    }
    create_dir(out)?;
    write(&out.join("clusters.csv"), rows.as_bytes())?;
    write(&out.join("cluster_histogram.csv"), hist.as_bytes())?;
    let mut report = Report::default();
    report.add("bags", bags.len()).add("clusters", c);
    report.emit(Some(out), "export_report.txt")
}

pub fn gradcheck(
    overrides: &[(String, String)],
    config: Option<&Path>,
    inject_fault: bool,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(overrides, config, &["task", "seed"])?;
    let model_cfg = cfg.model()?;
    let seed = cfg.seed()?;
    let n: usize = cfg.get("gradcheck_instances")?;
    if n == 0 {
        return Err(ConfigError::Invalid {
            key: "gradcheck_instances".into(),
            value: "0".into(),
            reason: "need at least one instance".into(),
        }
        .into());
    }
    let model = Model::new(model_cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let label = match model_cfg.task {
        Task::Classification { classes } => Label::Class(1 % classes),
        Task::Survival { bins } => Label::Survival(SurvivalLabel {
            time_bin: bins / 2,
            censored: false,
        }),
    };
    let bag = BagRecord::new("gradcheck", xavier_uniform_init(n, model_cfg.d_in, &mut rng), label)?;
    let report_err = |e: ModelError| CliError::from(e);
    let rep = finite_diff_check_with(
        &model.store.values(),
        GRADCHECK_EPS,
        model.loss_closure(&bag),
        |grads| {
            if inject_fault {
                inject(grads);
            }
        },
    )
    .map_err(report_err)?;
    let names = model.store.names();
    let pass = rep.max_rel_error < GRADCHECK_TOL;
    let mut report = Report::default();
    report
        .add("task", task_name(model_cfg.task))
        .add("variant", model_cfg.variant())
        .add("instances", n)
        .add("checked_scalars", rep.checked)
        .add("max_rel_error", format!("{:e}", rep.max_rel_error))
        .add(
            "worst_parameter",
            format!("{}[{}]", names[rep.worst_leaf], rep.worst_element),
        )
        .add("tolerance", format!("{GRADCHECK_TOL:e}"))
        .add("fault_injected", inject_fault)
        .add("status", if pass { "pass" } else { "fail" });
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    report.emit(out, "gradcheck_report.txt")?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:e} >= {GRADCHECK_TOL:e}",
            rep.max_rel_error
        )))
    }
}

/// Doubles the largest-magnitude entry of the first array with a
/// non-negligible gradient.
fn inject(grads: &mut [ptcmil::tensor::Tensor]) {
    for g in grads.iter_mut() {
        let data = g.data_mut();
        let (idx, max) = data.iter().enumerate().fold(
            (0, 0.0f64),
            |(bi, bm), (i, v)| if v.abs() > bm { (i, v.abs()) } else { (bi, bm) },
        );
        if max > 1e-6 {
            data[idx] *= 2.0;
            return;
        }
    }
}

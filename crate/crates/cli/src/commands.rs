use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use qme_core::baselines::{NormalizationStats, WeightedSum};
use qme_core::experiment::{
    baseline_table, qme_table, train_qme, train_quality_estimator, AblationSetting, Baselines, Method, ScoreSet,
    ABLATION_GRID,
};
use qme_core::fusion::{FusionCheckpoint, FusionModel, FusionTrainReport, Gating, LossKind};
use qme_core::io;
use qme_core::metrics::{spearman, ScoreTable};
use qme_core::quality::{QeCheckpoint, QeTrainReport, QualityEstimator};
use qme_core::report::{evaluate, histogram, write_comparison, EvalReport};
use qme_core::synth::{generate, SynthDataset};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{read_checked, Artifact};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::runlog::RunLog;

pub const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub modality_order: Vec<String>,
    pub train_queries: usize,
    pub test_queries: usize,
    pub templates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QeArtifact {
    pub checkpoint: QeCheckpoint,
    pub report: QeTrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionArtifact {
    pub setting: AblationSetting,
    pub checkpoint: FusionCheckpoint,
    pub report: FusionTrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub baseline_stats: NormalizationStats,
    pub weighted_sum: WeightedSum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub report: EvalReport,
}

/// Switches parsed from `--ablation`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_score_loss: bool,
    pub no_qe: bool,
    pub z1: bool,
}

impl AblationFlags {
    pub fn parse(list: Option<&str>) -> CliResult<Self> {
        let mut f = Self::default();
        for item in list.unwrap_or("").split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "no-score-loss" => f.no_score_loss = true,
                "no-qe" => f.no_qe = true,
                "z1" => f.z1 = true,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown ablation flag {other:?} (expected no-score-loss, no-qe, z1)"
                    )))
                }
            }
        }
        Ok(f)
    }

    pub fn any(&self) -> bool {
        self.no_score_loss || self.no_qe || self.z1
    }

    /// The configured model with these switches applied.
    pub fn setting(&self, cfg: &RunConfig) -> AblationSetting {
        let f = &cfg.experiment.fusion;
        AblationSetting {
            score_loss: !self.no_score_loss && f.loss == LossKind::ScoreTriplet,
            quality_gating: !self.no_qe && f.gating == Gating::Quality,
            experts: if self.z1 { 1 } else { f.experts },
        }
    }

    /// Rows of the ablation grid reachable by turning off the listed components.
    pub fn grid(&self) -> Vec<AblationSetting> {
        ABLATION_GRID
            .iter()
            .copied()
            .filter(|s| (self.no_score_loss || s.score_loss) && (self.no_qe || s.quality_gating) && (self.z1 || s.experts == 2))
            .collect()
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
    pub log: RunLog,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf, command: &str) -> Self {
        let hash = cfg.hash();
        let log = RunLog::open(&out, command, &hash, cfg.seed());
        Self { cfg, out, hash, log }
    }

    fn dataset_dir(&self) -> PathBuf {
        self.cfg.dataset_dir.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    fn qe_path(&self) -> PathBuf {
        self.out.join("qe.json")
    }

    fn fusion_path(&self) -> PathBuf {
        self.out.join("fusion.json")
    }

    fn baselines_path(&self) -> PathBuf {
        self.out.join("baselines.json")
    }

    fn write<T: Serialize>(&mut self, kind: &str, path: &Path, payload: T) -> CliResult<()> {
        Artifact::new(kind, &self.hash, self.cfg.seed(), payload).write(path)?;
        self.log.artifact(path);
        Ok(())
    }

    fn note_file(&mut self, path: &Path) {
        self.log.artifact(path);
    }

    fn load_dataset(&self) -> CliResult<SynthDataset> {
        let dir = self.dataset_dir();
        read_checked::<DatasetInfo>(&dir.join("dataset.json"), &self.hash, "generate")?;
        Ok(io::load(&dir)?)
    }

    fn load_qe(&self) -> CliResult<QualityEstimator> {
        let a = read_checked::<QeArtifact>(&self.qe_path(), &self.hash, "train-qe")?;
        Ok(QualityEstimator::from_checkpoint(&a.payload.checkpoint)?)
    }

    fn load_fusion(&self) -> CliResult<FusionModel> {
        let a = read_checked::<FusionArtifact>(&self.fusion_path(), &self.hash, "train-fusion")?;
        Ok(FusionModel::from_checkpoint(&a.payload.checkpoint)?)
    }

    fn load_baselines(&self) -> CliResult<Baselines> {
        let a = read_checked::<BaselineArtifact>(&self.baselines_path(), &self.hash, "train-fusion")?;
        Ok(Baselines {
            stats: a.payload.baseline_stats,
            weighted_sum: a.payload.weighted_sum,
        })
    }
}

pub fn generate_cmd(ctx: &mut Context) -> CliResult<()> {
    let ds = generate(&ctx.cfg.experiment.synth)?;
    let dir = ctx.dataset_dir();
    io::emit(&ds, &dir)?;
    let info = DatasetInfo {
        modality_order: ds.channels.iter().map(|c| c.modality_id.clone()).collect(),
        train_queries: ds.train.queries.len(),
        test_queries: ds.test.queries.len(),
        templates: ds.test.gallery.len(),
    };
    ctx.write("dataset", &dir.join("dataset.json"), &info)?;
    println!(
        "generated {} train / {} test queries in {}",
        info.train_queries,
        info.test_queries,
        dir.display()
    );
    Ok(())
}

pub fn train_qe_cmd(ctx: &mut Context) -> CliResult<()> {
    let ds = ctx.load_dataset()?;
    let (qe, report) = train_quality_estimator(&ds, &ctx.cfg.experiment)?;
    ctx.log.losses("qe", report.initial_loss, &report.epoch_losses);
    let last = report.epoch_losses.last().copied().unwrap_or(report.initial_loss);
    let path = ctx.qe_path();
    ctx.write(
        "qe",
        &path,
        QeArtifact {
            checkpoint: qe.to_checkpoint(),
            report,
        },
    )?;
    println!("quality estimator ({}) final loss {last:.6}", qe.modality_id);
    Ok(())
}

pub fn train_fusion_cmd(ctx: &mut Context, flags: AblationFlags) -> CliResult<()> {
    let setting = flags.setting(&ctx.cfg);
    let fusion_cfg = setting.apply(&ctx.cfg.experiment.fusion);
    let ds = ctx.load_dataset()?;
    let qe = if setting.quality_gating { Some(ctx.load_qe()?) } else { None };
    let (model, report) = train_qme(&ds, qe.as_ref(), &ctx.cfg.experiment, &fusion_cfg)?;
    ctx.log.losses("fusion", report.initial_loss, &report.epoch_losses);
    let last = report.epoch_losses.last().copied().unwrap_or(report.initial_loss);
    let path = ctx.fusion_path();
    ctx.write(
        "fusion",
        &path,
        FusionArtifact {
            setting,
            checkpoint: model.to_checkpoint(),
            report,
        },
    )?;

    let channels = ctx.cfg.experiment.channels_in_order()?;
    let train = ScoreSet::build(&ds.train, &channels, None)?;
    let b = Baselines::fit(&train, &ctx.cfg.experiment.weighted_sum)?;
    let path = ctx.baselines_path();
    ctx.write(
        "baselines",
        &path,
        BaselineArtifact {
            baseline_stats: b.stats,
            weighted_sum: b.weighted_sum,
        },
    )?;
    println!("fusion model {} final loss {last:.6}", setting.label());
    Ok(())
}

/// Loaded state shared by `evaluate` and `compare`.
struct EvalState {
    qe: Option<QualityEstimator>,
    test: ScoreSet,
    dataset: SynthDataset,
}

fn eval_state(ctx: &Context, qe: Option<QualityEstimator>) -> CliResult<EvalState> {
    let dataset = ctx.load_dataset()?;
    let test = ScoreSet::build(&dataset.test, &ctx.cfg.experiment.channels_in_order()?, qe.as_ref())?;
    Ok(EvalState { qe, test, dataset })
}

fn method_table(ctx: &Context, method: &Method, test: &ScoreSet, model: Option<&FusionModel>) -> CliResult<ScoreTable> {
    Ok(match method {
        Method::Qme => qme_table(model.expect("model loaded for qme"), test)?,
        Method::Single(_) => baseline_table(method, test, &dummy_baselines(test))?,
        m => baseline_table(m, test, &ctx.load_baselines()?)?,
    })
}

/// Single-modality tables never read the baseline statistics.
fn dummy_baselines(test: &ScoreSet) -> Baselines {
    Baselines {
        stats: NormalizationStats::default(),
        weighted_sum: WeightedSum::uniform(test.matrices.len()),
    }
}

fn write_histograms(path: &Path, tables: &[(String, &ScoreTable)]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    w.write_record(["method", "series", "lo", "hi", "count"]).map_err(qme_core::Error::from)?;
    for (method, table) in tables {
        let (matches, non_matches) = table.pooled_pairs();
        for (series, values) in [("match", &matches), ("non_match", &non_matches)] {
            for b in histogram(values, HISTOGRAM_BINS) {
                w.write_record([method.as_str(), series, &b.lo.to_string(), &b.hi.to_string(), &b.count.to_string()])
                    .map_err(qme_core::Error::from)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_report(ctx: &mut Context, report: &EvalReport, table: &ScoreTable) -> CliResult<()> {
    let dir = ctx.out.join("reports");
    fs::create_dir_all(&dir)?;
    let name = &report.method;
    ctx.write("report", &dir.join(format!("{name}.json")), report)?;
    let csv_path = dir.join(format!("{name}.csv"));
    report.write_csv(BufWriter::new(fs::File::create(&csv_path)?))?;
    ctx.note_file(&csv_path);
    let hist = dir.join(format!("{name}_hist.csv"));
    write_histograms(&hist, &[(name.clone(), table)])?;
    ctx.note_file(&hist);
    Ok(())
}

fn summary(r: &EvalReport) -> String {
    let tar = r.tar.first().map(|p| format!(" TAR@{}={:.4}", p.far, p.tar)).unwrap_or_default();
    let fnir = r.fnir.first().map(|p| format!(" FNIR@{}={:.4}", p.fpir, p.median)).unwrap_or_default();
    format!(
        "{:<14} Rank1={:.4} mAP={:.4}{tar}{fnir}",
        r.method,
        r.rank(1).unwrap_or(f64::NAN),
        r.map
    )
}

fn load_model_and_qe(ctx: &Context) -> CliResult<(FusionModel, Option<QualityEstimator>)> {
    let model = ctx.load_fusion()?;
    let qe = if model.router.uses_quality() { Some(ctx.load_qe()?) } else { None };
    Ok((model, qe))
}

pub fn evaluate_cmd(ctx: &mut Context, method: &str) -> CliResult<()> {
    let method = Method::parse(method, &ctx.cfg.experiment.modality_order).map_err(|e| CliError::Config(e.to_string()))?;
    let (model, qe) = match method {
        Method::Qme => {
            let (m, q) = load_model_and_qe(ctx)?;
            (Some(m), q)
        }
        _ => (None, None),
    };
    let state = eval_state(ctx, qe)?;
    let table = method_table(ctx, &method, &state.test, model.as_ref())?;
    let report = evaluate(&method.name(), &table, &ctx.cfg.experiment.targets)?;
    write_report(ctx, &report, &table)?;
    println!("{}", summary(&report));
    Ok(())
}

pub fn compare_cmd(ctx: &mut Context, flags: AblationFlags) -> CliResult<()> {
    let (model, qe) = load_model_and_qe(ctx)?;
    let ablation_needs_qe = flags.any() && flags.grid().iter().any(|s| s.quality_gating);
    let qe = match qe {
        None if ablation_needs_qe || ctx.qe_path().exists() => Some(ctx.load_qe()?),
        q => q,
    };
    let state = eval_state(ctx, qe)?;
    let methods = Method::all(&ctx.cfg.experiment.modality_order);
    let mut reports = Vec::new();
    let mut tables = Vec::new();
    for m in &methods {
        let table = method_table(ctx, m, &state.test, Some(&model))?;
        let report = evaluate(&m.name(), &table, &ctx.cfg.experiment.targets)?;
        write_report(ctx, &report, &table)?;
        println!("{}", summary(&report));
        reports.push(report);
        tables.push((m.name(), table));
    }

    let path = ctx.out.join("compare.csv");
    write_comparison(&reports, BufWriter::new(fs::File::create(&path)?))?;
    ctx.note_file(&path);
    let path = ctx.out.join("compare.json");
    ctx.write("comparison", &path, &reports)?;
    let path = ctx.out.join("distributions.csv");
    let refs: Vec<(String, &ScoreTable)> = tables.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_histograms(&path, &refs)?;
    ctx.note_file(&path);

    if let Some(qe) = &state.qe {
        write_quality_pairs(ctx, qe, &state)?;
    }

    if flags.any() {
        run_ablation_grid(ctx, flags, state.qe.as_ref())?;
    }
    Ok(())
}

fn write_quality_pairs(ctx: &mut Context, qe: &QualityEstimator, state: &EvalState) -> CliResult<()> {
    let path = ctx.out.join("qe_weights.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(&path)?));
    w.write_record(["query_id", "predicted_weight", "quality_factor"]).map_err(qme_core::Error::from)?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (i, q) in state.dataset.test.queries.iter().enumerate() {
        if let (Some(p), Some(t)) = (state.test.weights[i], state.dataset.test.quality_of(i, &qe.modality_id)) {
            w.write_record([q.query_id.clone(), p.to_string(), t.to_string()]).map_err(qme_core::Error::from)?;
            pred.push(p);
            truth.push(t);
        }
    }
    w.flush()?;
    ctx.note_file(&path);
    if pred.len() >= 2 {
        let rho = spearman(&pred, &truth)?;
        ctx.log.event("qe_spearman", json!({ "modality": qe.modality_id, "spearman": rho }));
        println!("quality estimator spearman vs ground truth: {rho:.4}");
    }
    Ok(())
}

fn run_ablation_grid(ctx: &mut Context, flags: AblationFlags, qe: Option<&QualityEstimator>) -> CliResult<()> {
    let ds = ctx.load_dataset()?;
    let channels = ctx.cfg.experiment.channels_in_order()?;
    let mut rows = Vec::new();
    for s in flags.grid() {
        let fusion_cfg = s.apply(&ctx.cfg.experiment.fusion);
        let q = if s.quality_gating { qe } else { None };
        let (model, report) = train_qme(&ds, q, &ctx.cfg.experiment, &fusion_cfg)?;
        ctx.log.losses(&format!("ablation_{}", s.label()), report.initial_loss, &report.epoch_losses);
        let test = ScoreSet::build(&ds.test, &channels, q)?;
        let table = qme_table(&model, &test)?;
        let r = evaluate(&s.label(), &table, &ctx.cfg.experiment.targets)?;
        println!("ablation {}", summary(&r));
        rows.push(AblationRow { setting: s, report: r });
    }
    let path = ctx.out.join("ablation.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(&path)?));
    w.write_record(["setting", "score_loss", "quality_gating", "experts", "rank1", "map", "tar", "far"])
        .map_err(qme_core::Error::from)?;
    for row in &rows {
        let s = row.setting;
        let tar = row.report.tar.first();
        w.write_record([
            s.label(),
            s.score_loss.to_string(),
            s.quality_gating.to_string(),
            s.experts.to_string(),
            row.report.rank(1).map(|v| v.to_string()).unwrap_or_default(),
            row.report.map.to_string(),
            tar.map(|p| p.tar.to_string()).unwrap_or_default(),
            tar.map(|p| p.far.to_string()).unwrap_or_default(),
        ])
        .map_err(qme_core::Error::from)?;
    }
    w.flush()?;
    ctx.note_file(&path);
    let path = ctx.out.join("ablation.json");
    ctx.write("ablation", &path, &rows)?;
    Ok(())
}

//! Accuracy metric and the modality-ablation study: a fixed 17-row grid
//! over fusion strategies and stream subsets, trained from shared
//! pretrained stream weights and rendered as CSV or markdown.

use crate::data_model::{Modality, ModalityMask, Prediction};
use crate::encoders::MetadataEncoderSpec;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel, FusionStrategy};
use crate::preprocess::{NormalizerStats, PreparedSample};
use crate::training::{load_stream_into, pretrain_stream, train_fusion, TrainConfig};
use serde::{Deserialize, Serialize};

/// Fraction of argmax-correct predictions; ties argmax to class 0.
pub fn accuracy(predictions: &[Prediction], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &l)| p.argmax() as u8 == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// One grid row: which streams participate and, when more than one content
/// stream is present, the level-1 strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub mask: ModalityMask,
    pub strategy: Option<FusionStrategy>,
}

fn mask_of(title: bool, comments: bool, image: bool, metadata: bool) -> ModalityMask {
    ModalityMask { use_title: title, use_comments: comments, use_image: image, use_metadata: metadata }
}

/// The canonical 17-row grid: the full set under three strategies, every
/// three- and two-stream subset under concatenation, then the four
/// monomodal baselines.
pub fn default_grid() -> Vec<AblationRow> {
    let c = Some(FusionStrategy::Concat);
    let rows: Vec<(ModalityMask, Option<FusionStrategy>)> = vec![
        (ModalityMask::full(), Some(FusionStrategy::Sum)),
        (ModalityMask::full(), Some(FusionStrategy::Concat)),
        (ModalityMask::full(), Some(FusionStrategy::Max)),
        (mask_of(true, true, true, false), c),
        (mask_of(false, true, true, true), c),
        (mask_of(true, false, true, true), c),
        (mask_of(true, true, false, true), c),
        (mask_of(true, false, true, false), c),
        (mask_of(true, true, false, false), c),
        (mask_of(true, false, false, true), None),
        (mask_of(false, true, false, true), None),
        (mask_of(false, false, true, true), None),
        (mask_of(false, true, true, false), c),
        (ModalityMask::only(Modality::Title), None),
        (ModalityMask::only(Modality::Comments), None),
        (ModalityMask::only(Modality::Image), None),
        (ModalityMask::only(Modality::Metadata), None),
    ];
    rows.into_iter()
        .enumerate()
        .map(|(i, (mask, strategy))| AblationRow { index: i + 1, mask, strategy })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub row: AblationRow,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub pretrain: TrainConfig,
    pub fusion_train: TrainConfig,
    pub embed_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl AblationConfig {
    fn fusion_config(&self, strategy: FusionStrategy) -> FusionConfig {
        let mut cfg = FusionConfig::desk(strategy);
        cfg.embed_dim = self.embed_dim;
        cfg.dropout_rate = self.dropout_rate;
        cfg
    }
}

/// Run the grid. Each of the four streams is pretrained once; every cell
/// assembles a fresh model, copies the shared stream weights in, trains
/// only the fusion stack, and reports test accuracy. A failing cell is
/// recorded in its row, not propagated.
pub fn run_ablation(
    grid: &[AblationRow],
    train: &[PreparedSample],
    validation: &[PreparedSample],
    test: &[PreparedSample],
    stats: &NormalizerStats,
    meta_spec: &MetadataEncoderSpec,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    let mut pretrained = Vec::new();
    for modality in Modality::ALL {
        let (model, _) = pretrain_stream(
            modality,
            cfg.embed_dim,
            meta_spec.clone(),
            stats,
            train,
            validation,
            &cfg.pretrain,
        )?;
        pretrained.push(model);
    }

    let mut cells = Vec::with_capacity(grid.len());
    for row in grid {
        let result = run_cell(row, &mut pretrained, train, validation, test, stats, meta_spec, cfg);
        cells.push(match result {
            Ok((val, test)) => AblationCell {
                row: row.clone(),
                val_accuracy: Some(val),
                test_accuracy: Some(test),
                error: None,
            },
            Err(e) => AblationCell {
                row: row.clone(),
                val_accuracy: None,
                test_accuracy: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(AblationReport { seed: cfg.seed, cells })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    row: &AblationRow,
    pretrained: &mut [crate::training::PretrainModel],
    train: &[PreparedSample],
    validation: &[PreparedSample],
    test: &[PreparedSample],
    stats: &NormalizerStats,
    meta_spec: &MetadataEncoderSpec,
    cfg: &AblationConfig,
) -> Result<(f64, f64)> {
    let strategy = row.strategy.unwrap_or(FusionStrategy::Concat);
    let mut model = FusionModel::assemble(
        row.mask,
        cfg.fusion_config(strategy),
        meta_spec.clone(),
        stats.clone(),
        cfg.seed ^ (row.index as u64),
    )?;
    for pm in pretrained.iter_mut() {
        let wanted = match pm.encoder.modality() {
            Modality::Title => row.mask.use_title,
            Modality::Comments => row.mask.use_comments,
            Modality::Image => row.mask.use_image,
            Modality::Metadata => row.mask.use_metadata,
        };
        if wanted {
            load_stream_into(&mut model, pm)?;
        }
    }
    let mut fusion_cfg = cfg.fusion_train.clone();
    fusion_cfg.seed = cfg.seed ^ (row.index as u64).rotate_left(17);
    train_fusion(&mut model, train, validation, &fusion_cfg)?;
    let set_accuracy = |set: &[PreparedSample]| -> Result<f64> {
        let predictions = model.forward_batch(set)?;
        let labels: Vec<u8> = set.iter().map(|s| s.label).collect();
        accuracy(&predictions, &labels)
    };
    Ok((set_accuracy(validation)?, set_accuracy(test)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s {
            "csv" => Some(ReportFormat::Csv),
            "markdown" | "md" => Some(ReportFormat::Markdown),
            _ => None,
        }
    }
}

fn strategy_label(row: &AblationRow) -> &'static str {
    match row.strategy {
        Some(s) if row.mask.content_count() > 1 => s.table_label(),
        _ => "-",
    }
}

fn cell_result(cell: &AblationCell) -> (String, String) {
    match (cell.val_accuracy, cell.test_accuracy, &cell.error) {
        (Some(val), Some(test), _) => (format!("{val:.4}"), format!("{test:.4}")),
        (_, _, Some(e)) => (format!("error: {e}"), format!("error: {e}")),
        _ => ("error".into(), "error".into()),
    }
}

/// Render the report with stream x-marks, one row per cell. Output is a
/// deterministic function of the report contents.
pub fn render_report(report: &AblationReport, format: ReportFormat) -> String {
    let mut out = String::new();
    let mark = |b: bool| if b { "x" } else { "" };
    match format {
        ReportFormat::Csv => {
            out.push_str("row,title,comments,image,metadata,fusion,val_accuracy,test_accuracy\n");
            for cell in &report.cells {
                let m = &cell.row.mask;
                let (val, test) = cell_result(cell);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    cell.row.index,
                    mark(m.use_title),
                    mark(m.use_comments),
                    mark(m.use_image),
                    mark(m.use_metadata),
                    strategy_label(&cell.row),
                    val,
                    test,
                ));
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Row | Title | Comments | Image | Metadata | Fusion | Val acc. | Test acc. |\n");
            out.push_str("|---|---|---|---|---|---|---|---|\n");
            for cell in &report.cells {
                let m = &cell.row.mask;
                let (val, test) = cell_result(cell);
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    cell.row.index,
                    mark(m.use_title),
                    mark(m.use_comments),
                    mark(m.use_image),
                    mark(m.use_metadata),
                    strategy_label(&cell.row),
                    val,
                    test,
                ));
            }
        }
    }
    out
}

//! Ablation matrices: component knockouts at the base head ordering, plus
//! the plan-first / generation-first comparison on the full model. Every
//! cell trains from the same seed and the same dataset; cells whose
//! checkpoints cannot be produced or read are reported absent rather than
//! filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use uwm_model::layout::HeadOrder;
use uwm_world::Episode;

use crate::config::RunConfig;
use crate::report::{evaluate, write_reports, ReportError, VariantOutcome, VariantRow};
use crate::trainer::{run_stage, Pipeline, Stage, TrainError};
use crate::eval::horizons;

/// One component knockout of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub use_detection: bool,
    pub use_planning: bool,
    pub use_generation: bool,
}

pub const FULL: Variant = Variant {
    name: "full",
    use_detection: true,
    use_planning: true,
    use_generation: true,
};

/// Rows of the component table: the full model and one knockout per head.
pub fn component_matrix() -> Vec<Variant> {
    vec![
        FULL,
        Variant { name: "no_detection", use_detection: false, ..FULL },
        Variant { name: "no_planning", use_planning: false, ..FULL },
        Variant { name: "no_image_gen", use_generation: false, ..FULL },
    ]
}

/// One trainable cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub variant: Variant,
    pub order: HeadOrder,
}

pub fn order_str(order: HeadOrder) -> &'static str {
    match order {
        HeadOrder::PlanFirst => "plan_first",
        HeadOrder::GenerationFirst => "generation_first",
    }
}

fn other_order(order: HeadOrder) -> HeadOrder {
    match order {
        HeadOrder::PlanFirst => HeadOrder::GenerationFirst,
        HeadOrder::GenerationFirst => HeadOrder::PlanFirst,
    }
}

/// The unique cells behind both tables: every component row at the base
/// ordering, plus the full model at the opposite ordering.
pub fn ablation_cells(base_order: HeadOrder) -> Vec<Cell> {
    let mut cells: Vec<Cell> = component_matrix()
        .into_iter()
        .map(|variant| Cell { variant, order: base_order })
        .collect();
    cells.push(Cell { variant: FULL, order: other_order(base_order) });
    cells
}

pub fn cell_name(cell: &Cell) -> String {
    format!("{}_{}", order_str(cell.order), cell.variant.name)
}

/// The base config with exactly this cell's switches flipped.
pub fn cell_config(base: &RunConfig, cell: &Cell) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train.order = cell.order;
    cfg.train.use_detection = cell.variant.use_detection;
    cfg.train.use_planning = cell.variant.use_planning;
    cfg.train.use_generation = cell.variant.use_generation;
    cfg
}

/// Run every training stage the config calls for, in order, into `dir`.
pub fn train_chain(
    cfg: &RunConfig,
    episodes: &[Episode],
    dir: &Path,
    seed: u64,
) -> Result<PathBuf, TrainError> {
    let mut stages = vec![Stage::PretrainTokenizer];
    if cfg.train.use_detection {
        stages.push(Stage::PretrainPerception);
    }
    stages.push(Stage::Stage1);
    stages.push(Stage::Stage2);
    let mut last = PathBuf::new();
    for stage in stages {
        last = run_stage(stage, cfg, episodes, dir, seed)?;
    }
    Ok(last)
}

/// Both report tables plus the flat row list the CSV is written from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub horizons: Vec<usize>,
    pub seed: u64,
    /// Component knockouts at the base ordering.
    pub component_table: Vec<VariantRow>,
    /// Full model under both head orderings.
    pub ordering_table: Vec<VariantRow>,
}

fn cell_dir(out_dir: &Path, cell: &Cell) -> PathBuf {
    out_dir.join("variants").join(cell_name(cell))
}

fn evaluate_cell(episodes: &[Episode], out_dir: &Path, cell: &Cell) -> VariantRow {
    let path = cell_dir(out_dir, cell).join(Stage::Stage2.artifact());
    let outcome = if !path.exists() {
        VariantOutcome::Absent { reason: format!("checkpoint {} not found", path.display()) }
    } else {
        match Pipeline::load(&path, false)
            .map_err(ReportError::from)
            .and_then(|pipe| evaluate(&pipe, episodes, true))
        {
            Ok(report) => VariantOutcome::Evaluated(report),
            Err(e) => VariantOutcome::Absent { reason: e.to_string() },
        }
    };
    VariantRow {
        variant: cell.variant.name.into(),
        order: order_str(cell.order).into(),
        outcome,
    }
}

/// Build the two tables from whatever checkpoints exist under `out_dir`.
pub fn collect_report(
    base: &RunConfig,
    episodes: &[Episode],
    out_dir: &Path,
    seed: u64,
) -> AblationReport {
    let base_order = base.train.order;
    let component_table: Vec<VariantRow> = component_matrix()
        .into_iter()
        .map(|variant| evaluate_cell(episodes, out_dir, &Cell { variant, order: base_order }))
        .collect();
    let flipped =
        evaluate_cell(episodes, out_dir, &Cell { variant: FULL, order: other_order(base_order) });
    let ordering_table = vec![component_table[0].clone(), flipped];
    AblationReport {
        horizons: horizons(base.world.horizon),
        seed,
        component_table,
        ordering_table,
    }
}

/// Train every cell that has no finished checkpoint yet, evaluate all of
/// them, and write `metrics.json` / `metrics.csv` under `out_dir`. Cells
/// that fail to train are carried as absent rows with the failure text.
pub fn run_ablation(
    base: &RunConfig,
    episodes: &[Episode],
    out_dir: &Path,
    seed: u64,
) -> Result<AblationReport, ReportError> {
    for cell in ablation_cells(base.train.order) {
        let dir = cell_dir(out_dir, &cell);
        if dir.join(Stage::Stage2.artifact()).exists() {
            continue;
        }
        let cfg = cell_config(base, &cell);
        if let Err(e) = train_chain(&cfg, episodes, &dir, seed) {
            eprintln!("variant {} failed to train: {e}", cell_name(&cell));
        }
    }
    let report = collect_report(base, episodes, out_dir, seed);
    let mut rows = report.component_table.clone();
    rows.push(report.ordering_table[1].clone());
    write_reports(out_dir, &serde_json::to_value(&report)?, &rows, &report.horizons)?;
    Ok(report)
}

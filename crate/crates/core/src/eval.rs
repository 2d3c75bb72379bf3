//! Gallery/probe rank-1 evaluation, per-condition × per-angle result tables,
//! and the preprocessing/aggregation ablation harness.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Condition, PoseSequence, Window, VIEW_ANGLES};
use crate::model::{AggregationMode, Model};
use crate::nnkernel::ParamStore;
use crate::train::{self, embed_batched, preprocess, DataConfig, TrainSetup};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// NM sequences with index up to this value form the gallery.
    pub gallery_max_index: u32,
    /// Skip gallery entries recorded at the probe's own view angle.
    pub exclude_same_view: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gallery_max_index: 4,
            exclude_same_view: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub embedding: Vec<f64>,
    pub subject_id: String,
    pub condition: Condition,
    pub sequence_index: u32,
    pub view_angle: u32,
}

/// Unit-norm embeddings with their sequence metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        if let Some(first) = entries.first() {
            let dim = first.embedding.len();
            for (i, e) in entries.iter().enumerate() {
                if e.embedding.len() != dim {
                    return Err(Error::shape("EmbeddingIndex", format!("entry {i} has dimension {}, expected {dim}", e.embedding.len())));
                }
                let norm = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::shape("EmbeddingIndex", format!("entry {i} has norm {norm}")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Embeds every sequence through the deterministic evaluation path:
/// confidence filtering (falling back to all frames if none survive),
/// normalisation, centred window, eval-mode forward pass.
pub fn embed_all(
    sequences: &[PoseSequence],
    model: &Model,
    params: &ParamStore,
    data_cfg: &DataConfig,
) -> Result<EmbeddingIndex> {
    if sequences.is_empty() {
        return Ok(EmbeddingIndex::default());
    }
    let target = model.config().num_frames;
    let shaped = sequences
        .iter()
        .map(|s| data::fixed_length(&preprocess(s, data_cfg, true)?, target, Window::Centered))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PoseSequence> = shaped.iter().collect();
    let emb = embed_batched(model, params, &refs)?;
    let entries = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| IndexEntry {
            embedding: emb.row(i).to_vec(),
            subject_id: s.subject_id.clone(),
            condition: s.condition,
            sequence_index: s.sequence_index,
            view_angle: s.view_angle,
        })
        .collect();
    EmbeddingIndex::new(entries)
}

/// Splits a corpus into the NM gallery (indices `1..=gallery_max_index`) and
/// the probe set (everything else).
pub fn split_gallery_probe(seqs: &[PoseSequence], cfg: &EvalConfig) -> (Vec<PoseSequence>, Vec<PoseSequence>) {
    seqs.iter()
        .cloned()
        .partition(|s| s.condition == Condition::NM && s.sequence_index <= cfg.gallery_max_index)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the nearest gallery entry (cosine distance) for each probe;
/// ties go to the lowest gallery index. `None` when same-view exclusion
/// leaves no candidate.
pub fn rank1_predictions(
    probe: &EmbeddingIndex,
    gallery: &EmbeddingIndex,
    exclude_same_view: bool,
) -> Result<Vec<Option<usize>>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if let (Some(p), Some(g)) = (probe.entries.first(), gallery.entries.first()) {
        if p.embedding.len() != g.embedding.len() {
            return Err(Error::shape("rank1", "probe and gallery dimensions differ"));
        }
    }
    Ok(probe
        .entries
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gallery.entries.iter().enumerate() {
                if exclude_same_view && g.view_angle == p.view_angle {
                    continue;
                }
                let d = 1.0 - dot(&p.embedding, &g.embedding);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((gi, d));
                }
            }
            best.map(|b| b.0)
        })
        .collect())
}

/// One row of a [`ResultTable`]: rank-1 accuracy in percent per view angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    /// Aligned with [`VIEW_ANGLES`]; `None` where no probe was recorded.
    pub cells: Vec<Option<f64>>,
    /// Mean of the present cells.
    pub mean: Option<f64>,
}

/// Rank-1 accuracy per probe condition (NM, BG, CL) and view angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ConditionRow>,
}

fn mean_of(cells: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = cells.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

impl ResultTable {
    /// Builds a table from cells, computing the means.
    pub fn from_cells(cells: [[Option<f64>; 11]; 3]) -> Self {
        Self {
            rows: Condition::ALL
                .iter()
                .zip(cells)
                .map(|(&condition, c)| ConditionRow {
                    condition,
                    mean: mean_of(&c),
                    cells: c.to_vec(),
                })
                .collect(),
        }
    }

    pub fn row(&self, condition: Condition) -> &ConditionRow {
        self.rows.iter().find(|r| r.condition == condition).expect("all conditions present")
    }

    /// Mean over the per-condition means that exist.
    pub fn mean_accuracy(&self) -> Option<f64> {
        mean_of(&self.rows.iter().map(|r| r.mean).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != 3 || self.rows.iter().any(|r| r.cells.len() != VIEW_ANGLES.len()) {
            return Err(Error::Config("result table must have 3 rows of 11 cells".into()));
        }
        for r in &self.rows {
            if r.cells.iter().flatten().any(|v| !(0.0..=100.0).contains(v)) {
                return Err(Error::Config(format!("{} accuracy out of range", r.condition)));
            }
        }
        Ok(())
    }
}

/// Rank-1 result with the raw per-probe predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Rank1Outcome {
    pub table: ResultTable,
    /// Gallery index matched by each probe.
    pub predictions: Vec<Option<usize>>,
    pub correct: usize,
    pub total: usize,
}

impl Rank1Outcome {
    /// Pooled accuracy over all probes, in percent.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Nearest-neighbour identification of every probe against the gallery,
/// aggregated per (condition, probe angle).
pub fn rank1(probe: &EmbeddingIndex, gallery: &EmbeddingIndex, cfg: &EvalConfig) -> Result<Rank1Outcome> {
    let predictions = rank1_predictions(probe, gallery, cfg.exclude_same_view)?;
    let mut hits = [[(0usize, 0usize); 11]; 3];
    let (mut correct, mut total) = (0, 0);
    for (p, pred) in probe.entries.iter().zip(&predictions) {
        let Some(col) = VIEW_ANGLES.iter().position(|&a| a == p.view_angle) else {
            continue;
        };
        let row = Condition::ALL.iter().position(|&c| c == p.condition).expect("known condition");
        let ok = pred.is_some_and(|g| gallery.entries[g].subject_id == p.subject_id);
        hits[row][col].0 += usize::from(ok);
        hits[row][col].1 += 1;
        correct += usize::from(ok);
        total += 1;
    }
    let cells = hits.map(|row| row.map(|(h, n)| (n > 0).then(|| 100.0 * h as f64 / n as f64)));
    Ok(Rank1Outcome {
        table: ResultTable::from_cells(cells),
        predictions,
        correct,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
    Json,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown table format {other:?}"))),
        }
    }
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:?}"))
}

fn md_cell(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.1}"))
}

pub fn emit_table(table: &ResultTable, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("condition");
            for a in VIEW_ANGLES {
                let _ = write!(out, ",{a}");
            }
            out.push_str(",mean\n");
            for r in &table.rows {
                out.push_str(r.condition.as_str());
                for c in &r.cells {
                    let _ = write!(out, ",{}", csv_cell(*c));
                }
                let _ = writeln!(out, ",{}", csv_cell(r.mean));
            }
        }
        TableFormat::Markdown => {
            out.push_str("| Condition |");
            for a in VIEW_ANGLES {
                let _ = write!(out, " {a}° |");
            }
            out.push_str(" Mean |\n|---|");
            out.push_str(&"---:|".repeat(VIEW_ANGLES.len() + 1));
            out.push('\n');
            for r in &table.rows {
                let _ = write!(out, "| {} |", r.condition);
                for c in &r.cells {
                    let _ = write!(out, " {} |", md_cell(*c));
                }
                let _ = writeln!(out, " {} |", md_cell(r.mean));
            }
        }
        TableFormat::Json => {
            out = serde_json::to_string_pretty(table).expect("table serialises");
            out.push('\n');
        }
    }
    out
}

/// Parses the CSV produced by [`emit_table`].
pub fn parse_csv(text: &str) -> Result<ResultTable> {
    let bad = |m: String| Error::Parse { line: 0, message: m };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty table".into()))?;
    if header.split(',').count() != VIEW_ANGLES.len() + 2 {
        return Err(bad(format!("bad header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let err = |m: String| Error::Parse { line: i + 2, message: m };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != VIEW_ANGLES.len() + 2 {
            return Err(err(format!("expected {} fields", VIEW_ANGLES.len() + 2)));
        }
        let condition = Condition::parse(fields[0]).ok_or_else(|| err(format!("unknown condition {:?}", fields[0])))?;
        let parse = |f: &str| -> Result<Option<f64>> {
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|_| err(format!("bad number {f:?}")))
            }
        };
        let cells = fields[1..=VIEW_ANGLES.len()].iter().map(|f| parse(f)).collect::<Result<Vec<_>>>()?;
        let mean = parse(fields[VIEW_ANGLES.len() + 1])?;
        rows.push(ConditionRow { condition, cells, mean });
    }
    let table = ResultTable { rows };
    table.validate()?;
    Ok(table)
}

/// One ablation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    /// Low-confidence frame removal on or off.
    pub preprocessing: bool,
    pub aggregation_mode: AggregationMode,
}

impl AblationVariant {
    pub fn new(name: &str, preprocessing: bool, aggregation_mode: AggregationMode) -> Self {
        Self {
            name: name.to_string(),
            preprocessing,
            aggregation_mode,
        }
    }

    /// Baseline, baseline + preprocessing, and baseline + preprocessing +
    /// hop extraction.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("Baseline (ResGCN)", false, AggregationMode::Polynomial),
            Self::new("Baseline + Preprocessing", true, AggregationMode::Polynomial),
            Self::new("Baseline + Preprocessing + Hop Extraction", true, AggregationMode::HopExtracted),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub table: ResultTable,
    /// Pooled rank-1 accuracy over all probes, percent.
    pub accuracy: f64,
}

/// Data for one ablation: a training set plus the evaluation gallery and
/// probes.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub train: Vec<PoseSequence>,
    pub gallery: Vec<PoseSequence>,
    pub probe: Vec<PoseSequence>,
}

impl EvalData {
    /// Closed-set protocol: the gallery sequences are also the training
    /// set, every other sequence is a probe.
    pub fn closed_set(seqs: &[PoseSequence], cfg: &EvalConfig) -> Self {
        let (gallery, probe) = split_gallery_probe(seqs, cfg);
        Self {
            train: gallery.clone(),
            gallery,
            probe,
        }
    }
}

/// Trains and scores one setup.
pub fn train_and_evaluate(
    setup: &TrainSetup,
    data: &EvalData,
    eval_cfg: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<(train::TrainReport, Rank1Outcome)> {
    let (report, trained) = train::train(setup, &data.train, &[], out_dir)?;
    let gallery = embed_all(&data.gallery, &trained.model, &trained.params, &setup.data)?;
    let probe = embed_all(&data.probe, &trained.model, &trained.params, &setup.data)?;
    Ok((report, rank1(&probe, &gallery, eval_cfg)?))
}

/// Trains every variant with the same seed and budget and scores it.
pub fn ablation_run(
    base: &TrainSetup,
    data: &EvalData,
    variants: &[AblationVariant],
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let mut setup = base.clone();
            setup.model.aggregation_mode = v.aggregation_mode;
            setup.data.filter_low_confidence = v.preprocessing;
            let (_, outcome) = train_and_evaluate(&setup, data, eval_cfg, None)?;
            Ok(AblationRow {
                variant: v.clone(),
                accuracy: outcome.accuracy(),
                table: outcome.table,
            })
        })
        .collect()
}

pub fn emit_ablation(rows: &[AblationRow], format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Json => {
            out = serde_json::to_string_pretty(rows).expect("rows serialise");
            out.push('\n');
        }
        TableFormat::Csv => {
            out.push_str("variant,NM,BG,CL,pooled\n");
            for r in rows {
                let m: Vec<String> = r.table.rows.iter().map(|c| csv_cell(c.mean)).collect();
                let _ = writeln!(out, "\"{}\",{},{:?}", r.variant.name, m.join(","), r.accuracy);
            }
        }
        TableFormat::Markdown => {
            out.push_str("| Method | NM | BG | CL | Pooled |\n|---|---:|---:|---:|---:|\n");
            for r in rows {
                let m: Vec<String> = r.table.rows.iter().map(|c| md_cell(c.mean)).collect();
                let _ = writeln!(out, "| {} | {} | {:.1} |", r.variant.name, m.join(" | "), r.accuracy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: &[f64], subject: &str, condition: Condition, angle: u32) -> IndexEntry {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        IndexEntry {
            embedding: v.iter().map(|x| x / n).collect(),
            subject_id: subject.into(),
            condition,
            sequence_index: 1,
            view_angle: angle,
        }
    }

    #[test]
    fn exact_match_and_single_subject() {
        let gallery = EmbeddingIndex::new(vec![
            entry(&[1.0, 0.0], "a", Condition::NM, 0),
            entry(&[0.0, 1.0], "b", Condition::NM, 0),
        ])
        .unwrap();
        let probe = EmbeddingIndex::new(vec![entry(&[0.0, 1.0], "b", Condition::CL, 90)]).unwrap();
        let out = rank1(&probe, &gallery, &EvalConfig::default()).unwrap();
        assert_eq!(out.predictions, vec![Some(1)]);
        assert_eq!(out.table.row(Condition::CL).cells[5], Some(100.0));
        assert_eq!(out.table.row(Condition::NM).mean, None);

        let one = EmbeddingIndex::new(vec![entry(&[1.0, 1.0], "a", Condition::NM, 0)]).unwrap();
        let probes = EmbeddingIndex::new(vec![
            entry(&[0.3, 1.0], "a", Condition::NM, 18),
            entry(&[1.0, 0.2], "z", Condition::NM, 18),
        ])
        .unwrap();
        let out = rank1(&probes, &one, &EvalConfig::default()).unwrap();
        assert_eq!(out.table.row(Condition::NM).cells[1], Some(50.0));
        assert_eq!(out.accuracy(), 50.0);
    }

    #[test]
    fn ties_go_to_lowest_index_and_exclusion() {
        let gallery = EmbeddingIndex::new(vec![
            entry(&[1.0, 0.0], "a", Condition::NM, 90),
            entry(&[1.0, 0.0], "b", Condition::NM, 0),
        ])
        .unwrap();
        let probe = EmbeddingIndex::new(vec![entry(&[1.0, 0.0], "b", Condition::NM, 90)]).unwrap();
        assert_eq!(rank1_predictions(&probe, &gallery, false).unwrap(), vec![Some(0)]);
        assert_eq!(rank1_predictions(&probe, &gallery, true).unwrap(), vec![Some(1)]);
        let only_same = EmbeddingIndex::new(vec![entry(&[1.0, 0.0], "a", Condition::NM, 90)]).unwrap();
        assert_eq!(rank1_predictions(&probe, &only_same, true).unwrap(), vec![None]);
        assert!(matches!(
            rank1_predictions(&probe, &EmbeddingIndex::default(), false),
            Err(Error::EmptyGallery)
        ));
    }

    #[test]
    fn index_rejects_bad_entries() {
        let mut e = entry(&[1.0, 0.0], "a", Condition::NM, 0);
        e.embedding = vec![2.0, 0.0];
        assert!(EmbeddingIndex::new(vec![e]).is_err());
        let a = entry(&[1.0, 0.0], "a", Condition::NM, 0);
        let b = entry(&[1.0, 0.0, 0.0], "a", Condition::NM, 0);
        assert!(EmbeddingIndex::new(vec![a, b]).is_err());
    }

    #[test]
    fn table_formats() {
        let zero = ResultTable::from_cells([[Some(0.0); 11]; 3]);
        let md = emit_table(&zero, TableFormat::Markdown);
        let header = md.lines().next().unwrap();
        assert_eq!(header.matches('|').count() - 1, 13);
        assert!(md.lines().nth(2).unwrap().contains("| 0.0 |"));
        assert!(emit_table(&zero, TableFormat::Csv).lines().nth(1).unwrap().ends_with(",0.0"));

        let mut cells = [[None; 11]; 3];
        cells[0][3] = Some(100.0 / 3.0);
        cells[0][4] = Some(50.0);
        cells[2][10] = Some(12.5);
        let t = ResultTable::from_cells(cells);
        assert_eq!(parse_csv(&emit_table(&t, TableFormat::Csv)).unwrap(), t);
        let json: ResultTable = serde_json::from_str(&emit_table(&t, TableFormat::Json)).unwrap();
        assert_eq!(json, t);
        assert!((t.row(Condition::NM).mean.unwrap() - (100.0 / 3.0 + 50.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn formats_parse() {
        assert_eq!("md".parse::<TableFormat>().unwrap(), TableFormat::Markdown);
        assert!("xml".parse::<TableFormat>().is_err());
    }
}

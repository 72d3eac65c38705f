//! File formats: JSON-lines annotation and prediction files, JSON experiment
//! configs, and the table files written by `antiuav simulate`.
//!
//! A sequence block starts with a header record and is followed by one record
//! per frame, indices counting up from 0:
//!
//! ```text
//! {"sequence":"seq01","frame_size":[640.0,512.0]}
//! {"frame":0,"box":[10.0,20.0,30.0,15.0],"attributes":["FM"]}
//! {"frame":1,"box":"Not Exist"}
//! ```
//!
//! Prediction headers carry only `sequence`, and prediction frames carry no
//! attributes. A file may hold several blocks; canonical files hold one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameSize};
use crate::metric::{
    attribute_slice, evaluate_dataset_with, evaluate_sequence, Aggregation, Attribute, EvalConfig,
    FrameAnnotation, FramePrediction, SequenceResult,
};
use crate::pipeline::{PipelineConfig, Strategy};
use crate::simulator::{
    ExperimentArm, ExperimentSpec, ExperimentTable, ScenarioSpec, SimDetectorModel, SimTrackerModel,
};

/// The absence marker used in place of a box.
pub const NOT_EXIST: &str = "Not Exist";

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSequence {
    pub id: String,
    pub frame_size: FrameSize,
    pub frames: Vec<FrameAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedSequence {
    pub id: String,
    pub frames: Vec<FramePrediction>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationHeader {
    sequence: String,
    #[serde(default)]
    frame_size: Option<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionHeader {
    sequence: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxField {
    Coords([f64; 4]),
    Marker(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    frame: usize,
    #[serde(rename = "box")]
    bbox: BoxField,
    #[serde(default)]
    attributes: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    frame: usize,
    #[serde(rename = "box")]
    bbox: BoxField,
}

#[derive(Serialize)]
struct AnnotationHeaderOut<'a> {
    sequence: &'a str,
    frame_size: [f64; 2],
}

#[derive(Serialize)]
struct PredictionHeaderOut<'a> {
    sequence: &'a str,
}

#[derive(Serialize)]
#[serde(untagged)]
enum BoxOut {
    Coords([f64; 4]),
    Marker(&'static str),
}

impl From<Option<&BoundingBox>> for BoxOut {
    fn from(b: Option<&BoundingBox>) -> Self {
        match b {
            Some(b) => BoxOut::Coords(b.to_array()),
            None => BoxOut::Marker(NOT_EXIST),
        }
    }
}

#[derive(Serialize)]
struct AnnotationRecordOut {
    frame: usize,
    #[serde(rename = "box")]
    bbox: BoxOut,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    attributes: Vec<&'static str>,
}

#[derive(Serialize)]
struct PredictionRecordOut {
    frame: usize,
    #[serde(rename = "box")]
    bbox: BoxOut,
}

/// One non-blank line of a JSON-lines file, classified.
enum Line<'a> {
    Header(Value),
    Frame(&'a str),
}

/// Classifies each non-blank line as header or frame record, keeping 1-based
/// line numbers.
fn scan_lines<'a>(text: &'a str, file: &str) -> Result<Vec<(usize, Line<'a>)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: file.to_string(),
            line: line_no,
            message: format!("not valid JSON: {e}"),
        })?;
        let Value::Object(map) = &value else {
            return Err(Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        if map.contains_key("sequence") {
            out.push((line_no, Line::Header(value)));
        } else {
            out.push((line_no, Line::Frame(line)));
        }
    }
    Ok(out)
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn decode_box(
    field: BoxField,
    file: &str,
    line: usize,
    frame: usize,
) -> Result<Option<BoundingBox>> {
    match field {
        BoxField::Coords([x, y, w, h]) => BoundingBox::new(x, y, w, h)
            .map(Some)
            .map_err(|e| parse_err(file, line, format!("frame {frame}: {e}"))),
        BoxField::Marker(m) if m == NOT_EXIST => Ok(None),
        BoxField::Marker(m) => Err(parse_err(
            file,
            line,
            format!("frame {frame}: box must be [x, y, w, h] or \"{NOT_EXIST}\", got \"{m}\""),
        )),
    }
}

/// Checks the record's index against the running count.
fn check_index(frame: usize, expected: usize, file: &str, line: usize) -> Result<()> {
    if frame != expected {
        return Err(parse_err(
            file,
            line,
            format!("frame index {frame} out of order, expected {expected}"),
        ));
    }
    Ok(())
}

fn finish_block<T>(id: &str, frames: &[T], file: &str, line: usize) -> Result<()> {
    if frames.is_empty() {
        return Err(parse_err(
            file,
            line,
            format!("sequence `{id}` has no frames"),
        ));
    }
    Ok(())
}

/// Parses annotation text; `file` only labels error messages.
pub fn parse_annotations(text: &str, file: &str) -> Result<Vec<AnnotatedSequence>> {
    let mut out: Vec<AnnotatedSequence> = Vec::new();
    let mut header_line = 0;
    for (line_no, line) in scan_lines(text, file)? {
        match line {
            Line::Header(value) => {
                if let Some(prev) = out.last() {
                    finish_block(&prev.id, &prev.frames, file, header_line)?;
                }
                let h: AnnotationHeader = serde_json::from_value(value)
                    .map_err(|e| parse_err(file, line_no, format!("bad header: {e}")))?;
                let frame_size = match h.frame_size {
                    Some([w, hgt]) => FrameSize::new(w, hgt)
                        .map_err(|e| parse_err(file, line_no, format!("bad frame_size: {e}")))?,
                    None => FrameSize::default(),
                };
                header_line = line_no;
                out.push(AnnotatedSequence {
                    id: h.sequence,
                    frame_size,
                    frames: Vec::new(),
                });
            }
            Line::Frame(src) => {
                let Some(seq) = out.last_mut() else {
                    return Err(parse_err(
                        file,
                        line_no,
                        "frame record before any sequence header",
                    ));
                };
                let r: AnnotationRecord = serde_json::from_str(src)
                    .map_err(|e| parse_err(file, line_no, format!("bad frame record: {e}")))?;
                check_index(r.frame, seq.frames.len(), file, line_no)?;
                let mut tags = Vec::with_capacity(r.attributes.len());
                for t in &r.attributes {
                    let tag: Attribute = t
                        .parse()
                        .map_err(|e| parse_err(file, line_no, format!("frame {}: {e}", r.frame)))?;
                    tags.push(tag);
                }
                let ann = match decode_box(r.bbox, file, line_no, r.frame)? {
                    Some(b) => FrameAnnotation::visible(b)
                        .map_err(|e| parse_err(file, line_no, format!("frame {}: {e}", r.frame)))?,
                    None => FrameAnnotation::absent(),
                };
                seq.frames.push(ann.with_attributes(tags));
            }
        }
    }
    if let Some(last) = out.last() {
        finish_block(&last.id, &last.frames, file, header_line)?;
    }
    check_unique_ids(out.iter().map(|s| s.id.as_str()), file)?;
    Ok(out)
}

/// Parses prediction text; `file` only labels error messages.
pub fn parse_predictions(text: &str, file: &str) -> Result<Vec<PredictedSequence>> {
    let mut out: Vec<PredictedSequence> = Vec::new();
    let mut header_line = 0;
    for (line_no, line) in scan_lines(text, file)? {
        match line {
            Line::Header(value) => {
                if let Some(prev) = out.last() {
                    finish_block(&prev.id, &prev.frames, file, header_line)?;
                }
                let h: PredictionHeader = serde_json::from_value(value)
                    .map_err(|e| parse_err(file, line_no, format!("bad header: {e}")))?;
                header_line = line_no;
                out.push(PredictedSequence {
                    id: h.sequence,
                    frames: Vec::new(),
                });
            }
            Line::Frame(src) => {
                let Some(seq) = out.last_mut() else {
                    return Err(parse_err(
                        file,
                        line_no,
                        "frame record before any sequence header",
                    ));
                };
                let r: PredictionRecord = serde_json::from_str(src)
                    .map_err(|e| parse_err(file, line_no, format!("bad frame record: {e}")))?;
                check_index(r.frame, seq.frames.len(), file, line_no)?;
                let bbox = decode_box(r.bbox, file, line_no, r.frame)?;
                seq.frames.push(FramePrediction { bbox });
            }
        }
    }
    if let Some(last) = out.last() {
        finish_block(&last.id, &last.frames, file, header_line)?;
    }
    check_unique_ids(out.iter().map(|s| s.id.as_str()), file)?;
    Ok(out)
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>, file: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!(
                "{file}: sequence `{id}` appears more than once"
            )));
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSequence>> {
    let path = path.as_ref();
    parse_annotations(&read_text(path)?, &path.display().to_string())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictedSequence>> {
    let path = path.as_ref();
    parse_predictions(&read_text(path)?, &path.display().to_string())
}

fn json_line(out: &mut String, value: &impl Serialize) {
    // these record types always serialize
    out.push_str(&serde_json::to_string(value).expect("record serializes"));
    out.push('\n');
}

/// Canonical text for a set of annotated sequences.
pub fn format_annotations(seqs: &[AnnotatedSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        json_line(
            &mut out,
            &AnnotationHeaderOut {
                sequence: &s.id,
                frame_size: s.frame_size.into(),
            },
        );
        for (i, f) in s.frames.iter().enumerate() {
            json_line(
                &mut out,
                &AnnotationRecordOut {
                    frame: i,
                    bbox: f.bbox().into(),
                    attributes: f.attributes().iter().map(|a| a.as_str()).collect(),
                },
            );
        }
    }
    out
}

/// Canonical text for a set of predicted sequences.
pub fn format_predictions(seqs: &[PredictedSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        json_line(&mut out, &PredictionHeaderOut { sequence: &s.id });
        for (i, f) in s.frames.iter().enumerate() {
            json_line(
                &mut out,
                &PredictionRecordOut {
                    frame: i,
                    bbox: f.bbox.as_ref().into(),
                },
            );
        }
    }
    out
}

pub fn save_annotations(path: impl AsRef<Path>, seqs: &[AnnotatedSequence]) -> Result<()> {
    Ok(fs::write(path, format_annotations(seqs))?)
}

pub fn save_predictions(path: impl AsRef<Path>, seqs: &[PredictedSequence]) -> Result<()> {
    Ok(fs::write(path, format_predictions(seqs))?)
}

/// Pairs every annotated sequence with its predictions, in annotation order.
pub fn align<'a>(
    annotations: &'a [AnnotatedSequence],
    predictions: &'a [PredictedSequence],
) -> Result<Vec<(&'a AnnotatedSequence, &'a PredictedSequence)>> {
    if predictions.is_empty() {
        return Err(Error::invalid("prediction file contains no sequences"));
    }
    if annotations.is_empty() {
        return Err(Error::invalid("annotation file contains no sequences"));
    }
    let by_id: BTreeMap<&str, &PredictedSequence> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    for p in predictions {
        if !annotations.iter().any(|a| a.id == p.id) {
            return Err(Error::invalid(format!(
                "sequence `{}` has predictions but no annotations",
                p.id
            )));
        }
    }
    annotations
        .iter()
        .map(|a| {
            let p = by_id.get(a.id.as_str()).ok_or_else(|| {
                Error::invalid(format!(
                    "sequence `{}` has annotations but no predictions",
                    a.id
                ))
            })?;
            if p.frames.len() != a.frames.len() {
                return Err(Error::invalid(format!(
                    "sequence `{}`: {} annotated frames but {} predicted frames",
                    a.id,
                    a.frames.len(),
                    p.frames.len()
                )));
            }
            Ok((a, *p))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceReport {
    pub id: String,
    pub result: SequenceResult,
    /// Present when an attribute filter was requested and the sequence has
    /// at least one tagged frame.
    pub slice: Option<SequenceResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub aggregation: Aggregation,
    pub sequences: Vec<SequenceReport>,
    pub dataset_acc: f64,
    pub attribute: Option<Attribute>,
    /// Mean slice Acc over the sequences that have tagged frames.
    pub attribute_acc: Option<f64>,
}

/// Scores aligned sequences in parallel; results keep annotation order.
pub fn evaluate_aligned(
    pairs: &[(&AnnotatedSequence, &PredictedSequence)],
    config: &EvalConfig,
    aggregation: Aggregation,
    attribute: Option<Attribute>,
) -> Result<EvalReport> {
    let sequences: Vec<SequenceReport> = pairs
        .par_iter()
        .map(|(a, p)| {
            let result = evaluate_sequence(&a.frames, &p.frames, config)
                .map_err(|e| Error::invalid(format!("sequence `{}`: {e}", a.id)))?;
            let slice = match attribute {
                Some(tag) => attribute_slice(&a.frames, &p.frames, tag, config)?,
                None => None,
            };
            Ok(SequenceReport {
                id: a.id.clone(),
                result,
                slice,
            })
        })
        .collect::<Result<_>>()?;
    let results: Vec<SequenceResult> = sequences.iter().map(|s| s.result.clone()).collect();
    let dataset_acc = evaluate_dataset_with(&results, aggregation)?;
    let slices: Vec<SequenceResult> = sequences.iter().filter_map(|s| s.slice.clone()).collect();
    let attribute_acc = if slices.is_empty() {
        None
    } else {
        Some(evaluate_dataset_with(&slices, aggregation)?)
    };
    Ok(EvalReport {
        config: *config,
        aggregation,
        sequences,
        dataset_acc,
        attribute,
        attribute_acc,
    })
}

pub fn evaluate_files(
    annotations: impl AsRef<Path>,
    predictions: impl AsRef<Path>,
    config: &EvalConfig,
    aggregation: Aggregation,
    attribute: Option<Attribute>,
) -> Result<EvalReport> {
    let ann = load_annotations(annotations)?;
    let pred = load_predictions(predictions)?;
    let pairs = align(&ann, &pred)?;
    evaluate_aligned(&pairs, config, aggregation, attribute)
}

/// Tab-separated report with fixed six-decimal formatting.
pub fn render_eval_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("sequence\tframes\tvisible\tfailures\taccuracy\tpenalty\tacc\n");
    for s in &report.sequences {
        let r = &s.result;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            s.id,
            r.num_frames,
            r.num_visible,
            r.num_failures,
            r.accuracy_term,
            r.penalty_term,
            r.acc
        );
    }
    let how = match report.aggregation {
        Aggregation::PerSequence => "per-sequence",
        Aggregation::PerFrame => "per-frame",
    };
    let _ = writeln!(
        out,
        "dataset\tacc={:.6}\tsequences={}\taggregation={how}\talpha={}\tbeta={}",
        report.dataset_acc,
        report.sequences.len(),
        report.config.alpha(),
        report.config.beta()
    );
    if let Some(tag) = report.attribute {
        for s in &report.sequences {
            match &s.slice {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "attribute\t{tag}\t{}\tframes={}\tacc={:.6}",
                        s.id, r.num_frames, r.acc
                    );
                }
                None => {
                    let _ = writeln!(out, "attribute\t{tag}\t{}\tframes=0\tacc=n/a", s.id);
                }
            }
        }
        match report.attribute_acc {
            Some(acc) => {
                let _ = writeln!(out, "attribute\t{tag}\tdataset\tacc={acc:.6}");
            }
            None => {
                let _ = writeln!(out, "attribute\t{tag}\tdataset\tacc=n/a");
            }
        }
    }
    out
}

fn default_theta_eh() -> f64 {
    PipelineConfig::default().theta_eh
}

fn default_theta_det() -> f64 {
    PipelineConfig::default().theta_det
}

/// Thresholds applied to every arm that does not set its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDefaults {
    #[serde(default = "default_theta_eh")]
    pub theta_eh: f64,
    #[serde(default = "default_theta_det")]
    pub theta_det: f64,
}

impl Default for PipelineDefaults {
    fn default() -> Self {
        Self {
            theta_eh: default_theta_eh(),
            theta_det: default_theta_det(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub mode: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_eh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_det: Option<f64>,
}

/// On-disk experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub metric: EvalConfig,
    #[serde(default)]
    pub pipeline: PipelineDefaults,
    pub scenario: ScenarioSpec,
    pub detector: SimDetectorModel,
    pub tracker: SimTrackerModel,
    pub arms: Vec<ArmConfig>,
    pub trials: usize,
    pub base_seed: u64,
}

/// Command-line overrides layered over a config file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConfigOverrides {
    pub base_seed: Option<u64>,
    pub trials: Option<usize>,
    pub theta_eh: Option<f64>,
    pub theta_det: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl ExperimentConfig {
    /// Config with every arm threshold spelled out.
    pub fn from_spec(spec: &ExperimentSpec) -> Self {
        Self {
            metric: spec.eval,
            pipeline: PipelineDefaults::default(),
            scenario: spec.scenario.clone(),
            detector: spec.detector,
            tracker: spec.tracker,
            arms: spec
                .arms
                .iter()
                .map(|a| ArmConfig {
                    mode: a.mode,
                    theta_eh: Some(a.theta_eh),
                    theta_det: Some(a.theta_det),
                })
                .collect(),
            trials: spec.trials,
            base_seed: spec.base_seed,
        }
    }

    pub fn apply(&mut self, o: &ConfigOverrides) -> Result<()> {
        if let Some(s) = o.base_seed {
            self.base_seed = s;
        }
        if let Some(t) = o.trials {
            self.trials = t;
        }
        if let Some(t) = o.theta_eh {
            self.pipeline.theta_eh = t;
        }
        if let Some(t) = o.theta_det {
            self.pipeline.theta_det = t;
        }
        if o.alpha.is_some() || o.beta.is_some() {
            self.metric = EvalConfig::new(
                o.alpha.unwrap_or(self.metric.alpha()),
                o.beta.unwrap_or(self.metric.beta()),
            )
            .map_err(|e| Error::config("metric", e.to_string()))?;
        }
        Ok(())
    }

    /// Fills arm thresholds from the pipeline defaults and validates the
    /// result.
    pub fn resolve(&self) -> Result<ExperimentSpec> {
        PipelineConfig::new(self.pipeline.theta_eh, self.pipeline.theta_det)
            .map_err(|e| Error::config("pipeline", e.to_string()))?;
        let spec = ExperimentSpec {
            scenario: self.scenario.clone(),
            detector: self.detector,
            tracker: self.tracker,
            arms: self
                .arms
                .iter()
                .map(|a| ExperimentArm {
                    mode: a.mode,
                    theta_eh: a.theta_eh.unwrap_or(self.pipeline.theta_eh),
                    theta_det: a.theta_det.unwrap_or(self.pipeline.theta_det),
                })
                .collect(),
            trials: self.trials,
            base_seed: self.base_seed,
            eval: self.metric,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses config JSON; errors carry the field path and line/column.
pub fn parse_experiment_config(text: &str, file: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config {
            path: if path == "." {
                file.to_string()
            } else {
                format!("{file}: {path}")
            },
            message: inner.to_string(),
        }
    })
}

pub fn load_experiment_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    parse_experiment_config(&read_text(path)?, &path.display().to_string())
}

/// Human-readable rows: `label  mean ± std  (se, n)`.
pub fn render_summary(table: &ExperimentTable) -> String {
    let width = table.rows.iter().map(|r| r.label.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:.6} ± {:.6}  (se {:.6}, n={})",
            r.label, r.mean_acc, r.std_acc, r.std_error, r.trials
        );
    }
    out
}

pub fn summary_tsv(table: &ExperimentTable) -> String {
    let mut out = String::from(
        "arm\tlabel\tmode\ttheta_eh\ttheta_det\ttrials\tmean_acc\tstd_acc\tstd_error\n",
    );
    for (i, r) in table.rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}\t{:.6}",
            r.label,
            r.arm.mode.label(),
            r.arm.theta_eh,
            r.arm.theta_det,
            r.trials,
            r.mean_acc,
            r.std_acc,
            r.std_error
        );
    }
    out
}

pub fn trials_tsv(table: &ExperimentTable) -> String {
    let mut out = String::from("arm\ttrial\tscenario_seed\tacc\taccuracy\tpenalty\n");
    for t in &table.trials {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            t.arm, t.trial, t.scenario_seed, t.acc, t.accuracy_term, t.penalty_term
        );
    }
    out
}

fn pretty(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub const SUMMARY_TSV: &str = "summary.tsv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TRIALS_TSV: &str = "trials.tsv";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Renders every output file first, then writes them in one pass.
pub fn write_experiment_outputs(
    dir: impl AsRef<Path>,
    spec: &ExperimentSpec,
    table: &ExperimentTable,
) -> Result<()> {
    let dir = dir.as_ref();
    let files = [
        (SUMMARY_TSV, summary_tsv(table)),
        (SUMMARY_JSON, pretty(&table.rows)?),
        (TRIALS_TSV, trials_tsv(table)),
        (RESOLVED_CONFIG, pretty(&ExperimentConfig::from_spec(spec))?),
    ];
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_FRAMES: &str = "{\"sequence\":\"s\",\"frame_size\":[640.0,512.0]}\n\
{\"frame\":0,\"box\":[1.0,2.0,3.0,4.0],\"attributes\":[\"FM\",\"TS\"]}\n\
{\"frame\":1,\"box\":\"Not Exist\"}\n";

    #[test]
    fn box_then_absence() {
        let seqs = parse_annotations(TWO_FRAMES, "t").unwrap();
        let vis: Vec<bool> = seqs[0].frames.iter().map(|f| f.is_visible()).collect();
        assert_eq!(vis, [true, false]);
        assert!(seqs[0].frames[0].has_attribute(Attribute::FM));
    }

    #[test]
    fn canonical_round_trip() {
        let seqs = parse_annotations(TWO_FRAMES, "t").unwrap();
        assert_eq!(format_annotations(&seqs), TWO_FRAMES);
    }

    #[test]
    fn negative_width_names_frame() {
        let text = "{\"sequence\":\"s\"}\n{\"frame\":0,\"box\":[0.0,0.0,-1.0,2.0]}\n";
        let err = parse_annotations(text, "a.jsonl").unwrap_err().to_string();
        assert!(err.contains("frame 0"), "{err}");
        assert!(err.starts_with("a.jsonl:2:"), "{err}");
    }

    #[test]
    fn malformed_inputs_are_errors() {
        for text in [
            "not json",
            "[1,2]",
            "{\"frame\":0,\"box\":\"Not Exist\"}",
            "{\"sequence\":\"s\"}\n{\"frame\":1,\"box\":\"Not Exist\"}",
            "{\"sequence\":\"s\"}\n{\"frame\":0,\"box\":\"gone\"}",
            "{\"sequence\":\"s\"}\n{\"frame\":0,\"box\":[1,2,3]}",
            "{\"sequence\":\"s\"}\n{\"frame\":0,\"box\":\"Not Exist\",\"attributes\":[\"XX\"]}",
            "{\"sequence\":\"s\"}",
            "{\"sequence\":\"s\"}\n{\"frame\":0,\"box\":\"Not Exist\"}\n{\"sequence\":\"s\"}\n{\"frame\":0,\"box\":\"Not Exist\"}",
        ] {
            assert!(parse_annotations(text, "t").is_err(), "{text}");
        }
    }

    #[test]
    fn misalignment_names_sequence_and_counts() {
        let ann = parse_annotations(TWO_FRAMES, "a").unwrap();
        let pred = parse_predictions(
            "{\"sequence\":\"s\"}\n{\"frame\":0,\"box\":\"Not Exist\"}\n",
            "p",
        )
        .unwrap();
        let err = align(&ann, &pred).unwrap_err().to_string();
        assert!(
            err.contains("`s`") && err.contains('2') && err.contains('1'),
            "{err}"
        );
        let err = align(&ann, &[]).unwrap_err().to_string();
        assert!(err.contains("no sequences"), "{err}");
    }

    #[test]
    fn config_errors_carry_paths() {
        let text = r#"{"scenario": {"num_frames": "ten"}}"#;
        let err = parse_experiment_config(text, "c.json")
            .unwrap_err()
            .to_string();
        assert!(err.contains("scenario.num_frames"), "{err}");
    }
}

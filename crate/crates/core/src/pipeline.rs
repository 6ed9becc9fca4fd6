//! Staged training-input pipeline with bounded prefetch queues.
//!
//! Each stage runs on its own worker thread and hands batches to the next
//! stage through a bounded FIFO queue of capacity `prefetch_depth`. With
//! `prefetch_depth == 0` all stages run back to back on one thread, which is
//! the fully synchronous layout.
//!
//! A stage's cost is simulated: its worker holds each batch until
//! `latency_ms + per_box_ms * boxes (+ transfer_cost_ms)` has elapsed since
//! it started on it. Real work attached to the stage (augmentation, sparse
//! encoding, matching, deltas) runs inside that window.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{build_anchor_grid, BBox, GeometryError, GridSpec};
use crate::matching::{compute_deltas, per_image_boxes, run_matcher, DeltaTarget, MatchAssignment, MatchError, MatcherSpec};
use crate::sparse_labels::{augment_jitter, encode_batch, LabelRecord, SparseLabelBatch};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("data underrun: need {needed} records, got {got}")]
    Underrun { needed: usize, got: usize },
    #[error("stage {stage:?} failed on batch {batch}: {source}")]
    Stage { stage: String, batch: usize, source: MatchError },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Host,
    Accelerator,
}

/// Real work performed by a stage, in addition to its simulated cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOp {
    #[default]
    None,
    Parse,
    Augment,
    Encode,
    Match,
    Deltas,
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    #[serde(default)]
    pub op: StageOp,
    /// Fixed cost per batch.
    #[serde(default)]
    pub latency_ms: f64,
    /// Additional cost per ground-truth box in the batch.
    #[serde(default)]
    pub per_box_ms: f64,
    #[serde(default)]
    pub placement: Placement,
    /// Charged when the previous stage runs on the other placement.
    #[serde(default)]
    pub transfer_cost_ms: f64,
}

impl StageSpec {
    pub fn simulated(name: &str, latency_ms: f64) -> Self {
        Self { name: name.into(), op: StageOp::None, latency_ms, per_box_ms: 0.0, placement: Placement::Host, transfer_cost_ms: 0.0 }
    }
}

fn default_drift() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stages: Vec<StageSpec>,
    pub batch_size: usize,
    pub prefetch_depth: usize,
    pub n_batches: usize,
    #[serde(default)]
    pub matcher: MatcherSpec,
    /// Anchor grid; required when a stage has `op: match`.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_drift")]
    pub augment_drift: u32,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::InvalidConfig("at least one stage is required".into()));
        }
        if self.batch_size == 0 || self.n_batches == 0 {
            return Err(PipelineError::InvalidConfig("batch_size and n_batches must be positive".into()));
        }
        for s in &self.stages {
            for (what, v) in [("latency_ms", s.latency_ms), ("per_box_ms", s.per_box_ms), ("transfer_cost_ms", s.transfer_cost_ms)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(PipelineError::InvalidConfig(format!("stage {:?}: {what} must be finite and >= 0", s.name)));
                }
            }
        }
        if self.grid.is_none() && self.stages.iter().any(|s| matches!(s.op, StageOp::Match | StageOp::Deltas)) {
            return Err(PipelineError::InvalidConfig("match/deltas stages need a grid".into()));
        }
        Ok(())
    }

    /// Simulated cost of stage `i` for a batch holding `boxes` ground-truth boxes.
    pub fn stage_cost_ms(&self, i: usize, boxes: f64) -> f64 {
        let s = &self.stages[i];
        let transfer = if i > 0 && self.stages[i - 1].placement != s.placement { s.transfer_cost_ms } else { 0.0 };
        s.latency_ms + s.per_box_ms * boxes + transfer
    }
}

/// Predicted batches per second: `1000 / max(stage ms)` with prefetching,
/// `1000 / sum(stage ms)` without. `boxes_per_batch` resolves per-box costs.
pub fn model_throughput(cfg: &PipelineConfig, boxes_per_batch: f64) -> f64 {
    let costs = (0..cfg.stages.len()).map(|i| cfg.stage_cost_ms(i, boxes_per_batch));
    let ms = if cfg.prefetch_depth == 0 { costs.sum() } else { costs.fold(0.0, f64::max) };
    if ms > 0.0 {
        1000.0 / ms
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub batches_per_sec: f64,
    pub images_per_sec: f64,
    pub wall_ms: f64,
    pub per_stage_busy_ms: Vec<f64>,
    pub per_stage_processed: Vec<usize>,
    pub predicted_batches_per_sec: f64,
    pub batch_size: usize,
    pub n_batches: usize,
    pub prefetch_depth: usize,
}

impl ThroughputReport {
    pub fn to_table(&self, cfg: &PipelineConfig) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>12} {:>10} {:>10}\n", "stage", "placement", "busy ms", "batches"));
        for (i, s) in cfg.stages.iter().enumerate() {
            let placement = match s.placement {
                Placement::Host => "host",
                Placement::Accelerator => "accelerator",
            };
            out.push_str(&format!(
                "{:<16} {:>12} {:>10.1} {:>10}\n",
                s.name, placement, self.per_stage_busy_ms[i], self.per_stage_processed[i]
            ));
        }
        out.push_str(&format!(
            "prefetch {}  wall {:.1} ms  measured {:.2} batches/s ({:.1} images/s)  predicted {:.2} batches/s\n",
            self.prefetch_depth, self.wall_ms, self.batches_per_sec, self.images_per_sec, self.predicted_batches_per_sec
        ));
        out
    }
}

/// Everything a batch carries between stages.
#[derive(Debug, Clone)]
pub struct Batch {
    pub seq: usize,
    pub records: Vec<LabelRecord>,
    pub sparse: Option<SparseLabelBatch>,
    pub assignment: Option<MatchAssignment>,
    pub deltas: Option<Vec<Vec<DeltaTarget>>>,
}

impl Batch {
    fn box_count(&self) -> usize {
        self.records.iter().map(|r| r.boxes.len()).sum()
    }

    fn ensure_sparse(&mut self) -> &SparseLabelBatch {
        if self.sparse.is_none() {
            self.sparse = Some(encode_batch(&self.records));
        }
        self.sparse.as_ref().expect("just set")
    }
}

/// Output of one batch after the last stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub seq: usize,
    pub image_ids: Vec<u64>,
    pub assignment: Option<MatchAssignment>,
    pub deltas: Option<Vec<Vec<DeltaTarget>>>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: ThroughputReport,
    pub outputs: Vec<BatchOutput>,
}

struct StageCtx<'a> {
    cfg: &'a PipelineConfig,
    anchors: &'a [BBox],
}

impl StageCtx<'_> {
    fn process(&self, i: usize, batch: &mut Batch) -> Result<(), PipelineError> {
        let start = Instant::now();
        let cost = self.cfg.stage_cost_ms(i, batch.box_count() as f64);
        let stage = &self.cfg.stages[i];
        let seq = batch.seq;
        let fail = |source| PipelineError::Stage { stage: stage.name.clone(), batch: seq, source };
        match stage.op {
            StageOp::None | StageOp::Parse | StageOp::Update => {}
            StageOp::Augment => {
                let seed = self.cfg.seed ^ (batch.seq as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                for (n, rec) in batch.records.iter_mut().enumerate() {
                    *rec = augment_jitter(rec, seed.wrapping_add(n as u64), self.cfg.augment_drift, true);
                }
                batch.sparse = None;
            }
            StageOp::Encode => {
                batch.sparse = Some(encode_batch(&batch.records));
            }
            StageOp::Match => {
                let sparse = batch.ensure_sparse().clone();
                let a = run_matcher(self.cfg.matcher, self.anchors, &sparse).map_err(fail)?;
                batch.assignment = Some(a);
            }
            StageOp::Deltas => {
                let sparse = batch.ensure_sparse().clone();
                let boxes = per_image_boxes(&sparse).map_err(fail)?;
                let assignment = match batch.assignment.take() {
                    Some(a) => a,
                    None => run_matcher(self.cfg.matcher, self.anchors, &sparse).map_err(fail)?,
                };
                batch.deltas = Some(compute_deltas(&assignment, self.anchors, &boxes).map_err(fail)?);
                batch.assignment = Some(assignment);
            }
        }
        let deadline = start + Duration::from_secs_f64(cost / 1000.0);
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        }
        Ok(())
    }
}

/// Pushes `n_batches * batch_size` records through the configured stages and
/// measures throughput.
pub fn run_pipeline<I>(cfg: &PipelineConfig, data: I) -> Result<PipelineRun, PipelineError>
where
    I: IntoIterator<Item = LabelRecord>,
{
    cfg.validate()?;
    let needed = cfg.n_batches * cfg.batch_size;
    let records: Vec<LabelRecord> = data.into_iter().take(needed).collect();
    if records.len() < needed {
        return Err(PipelineError::Underrun { needed, got: records.len() });
    }
    let anchors = match &cfg.grid {
        Some(g) => build_anchor_grid(g)?,
        None => Vec::new(),
    };
    let mut batches: Vec<Batch> = Vec::with_capacity(cfg.n_batches);
    let mut it = records.into_iter();
    for seq in 0..cfg.n_batches {
        let recs: Vec<LabelRecord> = it.by_ref().take(cfg.batch_size).collect();
        batches.push(Batch { seq, records: recs, sparse: None, assignment: None, deltas: None });
    }
    let mean_boxes = batches.iter().map(|b| b.box_count()).sum::<usize>() as f64 / cfg.n_batches as f64;
    let ctx = StageCtx { cfg, anchors: &anchors };

    let started = Instant::now();
    let (finished, busy, processed) = if cfg.prefetch_depth == 0 { run_synchronous(&ctx, batches)? } else { run_staged(&ctx, batches)? };
    let wall_ms = started.elapsed().as_secs_f64() * 1000.0;

    let batches_per_sec = finished.len() as f64 / (wall_ms / 1000.0);
    let outputs = finished
        .into_iter()
        .map(|b| BatchOutput {
            seq: b.seq,
            image_ids: b.records.iter().map(|r| r.image_id).collect(),
            assignment: b.assignment,
            deltas: b.deltas,
        })
        .collect();
    Ok(PipelineRun {
        report: ThroughputReport {
            batches_per_sec,
            images_per_sec: batches_per_sec * cfg.batch_size as f64,
            wall_ms,
            per_stage_busy_ms: busy,
            per_stage_processed: processed,
            predicted_batches_per_sec: model_throughput(cfg, mean_boxes),
            batch_size: cfg.batch_size,
            n_batches: cfg.n_batches,
            prefetch_depth: cfg.prefetch_depth,
        },
        outputs,
    })
}

type StageTotals = (Vec<Batch>, Vec<f64>, Vec<usize>);

fn run_synchronous(ctx: &StageCtx<'_>, batches: Vec<Batch>) -> Result<StageTotals, PipelineError> {
    let n = ctx.cfg.stages.len();
    let mut busy = vec![0.0; n];
    let mut processed = vec![0; n];
    let mut out = Vec::with_capacity(batches.len());
    for mut batch in batches {
        for i in 0..n {
            let t = Instant::now();
            ctx.process(i, &mut batch)?;
            busy[i] += t.elapsed().as_secs_f64() * 1000.0;
            processed[i] += 1;
        }
        out.push(batch);
    }
    Ok((out, busy, processed))
}

fn run_staged(ctx: &StageCtx<'_>, batches: Vec<Batch>) -> Result<StageTotals, PipelineError> {
    let n = ctx.cfg.stages.len();
    let depth = ctx.cfg.prefetch_depth;

    // queue i feeds stage i; queue n feeds the collector
    let mut senders: Vec<SyncSender<Batch>> = Vec::with_capacity(n + 1);
    let mut receivers: Vec<Receiver<Batch>> = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let (tx, rx) = sync_channel(depth);
        senders.push(tx);
        receivers.push(rx);
    }
    let feed = senders.remove(0);
    let collect = receivers.pop().expect("n + 1 queues");

    thread::scope(|scope| {
        let workers: Vec<_> = receivers
            .into_iter()
            .zip(senders)
            .enumerate()
            .map(|(i, (rx, tx))| {
                scope.spawn(move || -> Result<(f64, usize), PipelineError> {
                    let mut busy = 0.0;
                    let mut count = 0;
                    // the queue closing is the end-of-stream signal
                    for mut batch in rx {
                        let t = Instant::now();
                        ctx.process(i, &mut batch)?;
                        busy += t.elapsed().as_secs_f64() * 1000.0;
                        count += 1;
                        if tx.send(batch).is_err() {
                            break;
                        }
                    }
                    Ok((busy, count))
                })
            })
            .collect();

        let feeder = scope.spawn(move || {
            for b in batches {
                if feed.send(b).is_err() {
                    break;
                }
            }
        });

        let finished: Vec<Batch> = collect.iter().collect();
        feeder.join().expect("feeder thread panicked");
        let mut busy = Vec::with_capacity(n);
        let mut processed = Vec::with_capacity(n);
        let mut first_err = None;
        for w in workers {
            match w.join().expect("stage worker panicked") {
                Ok((b, c)) => {
                    busy.push(b);
                    processed.push(c);
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                    busy.push(0.0);
                    processed.push(0);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok((finished, busy, processed)),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub a: ThroughputReport,
    pub b: ThroughputReport,
    /// Measured throughput of `b` over `a`.
    pub speedup: f64,
    pub predicted_speedup: f64,
}

/// Runs both configurations over the same records and compares them.
pub fn compare_pipelines(cfg_a: &PipelineConfig, cfg_b: &PipelineConfig, data: &[LabelRecord]) -> Result<SpeedupReport, PipelineError> {
    let a = run_pipeline(cfg_a, data.iter().cloned())?.report;
    let b = run_pipeline(cfg_b, data.iter().cloned())?.report;
    Ok(SpeedupReport {
        speedup: b.batches_per_sec / a.batches_per_sec,
        predicted_speedup: b.predicted_batches_per_sec / a.predicted_batches_per_sec,
        a,
        b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{match_serial, Algo};
    use crate::sparse_labels::{gen_synthetic, SyntheticSpec};
    use approx::assert_abs_diff_eq;

    fn records(n: usize) -> Vec<LabelRecord> {
        let spec = SyntheticSpec { seed: 3, n_images: n, max_boxes: 5, image_w: 120, image_h: 90, class_count: 3 };
        gen_synthetic(&spec).unwrap().collect()
    }

    fn simulated(costs: &[f64], prefetch: usize, n_batches: usize) -> PipelineConfig {
        PipelineConfig {
            stages: costs.iter().enumerate().map(|(i, &c)| StageSpec::simulated(&format!("s{i}"), c)).collect(),
            batch_size: 2,
            prefetch_depth: prefetch,
            n_batches,
            matcher: MatcherSpec::default(),
            grid: None,
            augment_drift: 4,
            seed: 0,
        }
    }

    fn grid() -> GridSpec {
        GridSpec { image_w: 120.0, image_h: 90.0, grid_w: 6, grid_h: 4, templates: vec![(10.0, 10.0), (30.0, 20.0), (20.0, 40.0)] }
    }

    #[test]
    fn model_examples() {
        assert_eq!(model_throughput(&simulated(&[10.0, 5.0], 1, 1), 0.0), 100.0);
        assert_abs_diff_eq!(model_throughput(&simulated(&[10.0, 5.0], 0, 1), 0.0), 1000.0 / 15.0, epsilon = 1e-12);

        let mut cfg = simulated(&[10.0, 5.0], 0, 1);
        cfg.stages[1].placement = Placement::Accelerator;
        cfg.stages[1].transfer_cost_ms = 5.0;
        assert_eq!(model_throughput(&cfg, 0.0), 50.0);
        cfg.prefetch_depth = 2;
        assert_eq!(model_throughput(&cfg, 0.0), 100.0);
        cfg.stages[0].per_box_ms = 1.0;
        assert_eq!(model_throughput(&cfg, 4.0), 1000.0 / 14.0);
    }

    #[test]
    fn single_stage_wall_time() {
        let run = run_pipeline(&simulated(&[10.0], 1, 10), records(20)).unwrap();
        let r = &run.report;
        assert!(r.wall_ms >= 100.0 && r.wall_ms < 125.0, "wall {}", r.wall_ms);
        assert_eq!(r.predicted_batches_per_sec, 100.0);
        assert_eq!(r.images_per_sec, r.batches_per_sec * 2.0);
    }

    #[test]
    fn two_stages_prefetched_vs_sync() {
        let fast = run_pipeline(&simulated(&[10.0, 5.0], 1, 20), records(40)).unwrap().report;
        let slow = run_pipeline(&simulated(&[10.0, 5.0], 0, 20), records(40)).unwrap().report;
        assert!((fast.batches_per_sec / 100.0 - 1.0).abs() < 0.2, "{}", fast.batches_per_sec);
        assert!((slow.batches_per_sec / (1000.0 / 15.0) - 1.0).abs() < 0.2, "{}", slow.batches_per_sec);
        assert_eq!(fast.per_stage_processed, vec![20, 20]);
        assert_eq!(slow.per_stage_processed, vec![20, 20]);
    }

    #[test]
    fn underrun_and_config_errors() {
        assert!(matches!(run_pipeline(&simulated(&[1.0], 1, 5), records(9)), Err(PipelineError::Underrun { needed: 10, got: 9 })));
        assert!(matches!(run_pipeline(&simulated(&[], 1, 5), records(10)), Err(PipelineError::InvalidConfig(_))));
        let mut cfg = simulated(&[1.0], 1, 1);
        cfg.stages[0].op = StageOp::Match;
        assert!(matches!(run_pipeline(&cfg, records(2)), Err(PipelineError::InvalidConfig(_))));
        cfg.stages[0].latency_ms = -1.0;
        assert!(matches!(cfg.validate(), Err(PipelineError::InvalidConfig(_))));
    }

    fn full_stages(prefetch: usize, algo: Algo) -> PipelineConfig {
        let ops = [
            ("parse", StageOp::Parse),
            ("encode", StageOp::Encode),
            ("match", StageOp::Match),
            ("deltas", StageOp::Deltas),
            ("update", StageOp::Update),
        ];
        PipelineConfig {
            stages: ops.iter().map(|(name, op)| StageSpec { op: *op, ..StageSpec::simulated(name, 1.0) }).collect(),
            batch_size: 4,
            prefetch_depth: prefetch,
            n_batches: 6,
            matcher: MatcherSpec { algo, ..Default::default() },
            grid: Some(grid()),
            augment_drift: 0,
            seed: 0,
        }
    }

    #[test]
    fn outputs_match_standalone_and_keep_order() {
        let data = records(24);
        let anchors = build_anchor_grid(&grid()).unwrap();
        for prefetch in [0, 1, 3] {
            let run = run_pipeline(&full_stages(prefetch, Algo::Parallel), data.clone()).unwrap();
            assert_eq!(run.outputs.iter().map(|o| o.seq).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
            for (out, chunk) in run.outputs.iter().zip(data.chunks(4)) {
                let boxes: Vec<Vec<BBox>> = chunk.iter().map(|r| r.bboxes()).collect();
                assert_eq!(out.assignment.as_ref().unwrap(), &match_serial(&anchors, &boxes).unwrap());
                assert_eq!(out.deltas.as_ref().unwrap().len(), 4);
            }
            assert_eq!(run.report.per_stage_processed, vec![6; 5]);
        }
    }

    #[test]
    fn stage_failure_is_reported() {
        let mut cfg = full_stages(2, Algo::Serial);
        cfg.grid = Some(GridSpec { image_w: 120.0, image_h: 90.0, grid_w: 1, grid_h: 1, templates: vec![(10.0, 10.0)] });
        let err = run_pipeline(&cfg, records(24)).unwrap_err();
        assert!(matches!(err, PipelineError::Stage { source: MatchError::Capacity { .. }, .. }), "{err}");
    }

    #[test]
    fn self_comparison() {
        let cfg = simulated(&[6.0, 3.0], 2, 20);
        let rep = compare_pipelines(&cfg, &cfg, &records(40)).unwrap();
        assert_eq!(rep.predicted_speedup, 1.0);
        assert!((rep.speedup - 1.0).abs() < 0.1, "{}", rep.speedup);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"stages": [{"name": "a", "latency_ms": 2}], "batch_size": 1, "prefetch_depth": 0, "n_batches": 3}"#)
                .unwrap();
        assert_eq!(cfg.stages[0].placement, Placement::Host);
        assert_eq!(cfg.augment_drift, 4);
        assert_eq!(cfg.matcher.algo, Algo::Serial);
    }
}

//! Pipeline iteration latency: the closed-form objective, a recurrence
//! simulator and a second closed form that the simulator must match.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::stagecost::StageConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PipeError {
    #[error("pipeline has no stages")]
    Empty,
    #[error("microbatch count must be at least 1")]
    NoMicrobatches,
    #[error("stage {stage}: {msg}")]
    BadStage { stage: usize, msg: String },
    #[error("unknown gantt format `{0}` (expected rows-text or svg)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    /// Stable microbatch seconds.
    pub t: f64,
    /// Extra seconds of the imbalanced microbatch, run as a prologue.
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub g: u32,
    pub stages: Vec<StageTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configs: Option<Vec<StageConfig>>,
}

impl PipelinePlan {
    pub fn new(g: u32, timings: &[(f64, f64)]) -> Result<Self, PipeError> {
        let plan = PipelinePlan {
            g,
            stages: timings.iter().map(|&(t, d)| StageTiming { t, d }).collect(),
            configs: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), PipeError> {
        if self.stages.is_empty() {
            return Err(PipeError::Empty);
        }
        if self.g == 0 {
            return Err(PipeError::NoMicrobatches);
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.t.is_finite() && s.t > 0.0) {
                return Err(PipeError::BadStage {
                    stage: i + 1,
                    msg: format!("t = {} must be positive and finite", s.t),
                });
            }
            if !(s.d.is_finite() && s.d >= 0.0) {
                return Err(PipeError::BadStage {
                    stage: i + 1,
                    msg: format!("d = {} must be nonnegative and finite", s.d),
                });
            }
        }
        Ok(())
    }
}

/// `(G-1)·max t + Σ t + max_i (d_i − Σ_{j<i} t_j)`.
pub fn objective(plan: &PipelinePlan) -> Result<f64, PipeError> {
    plan.validate()?;
    Ok(objective_unchecked(plan.g, &plan.stages))
}

pub(crate) fn objective_unchecked(g: u32, stages: &[StageTiming]) -> f64 {
    let mut tmax = 0.0f64;
    let mut sum = 0.0;
    let mut imbalance = f64::NEG_INFINITY;
    for s in stages {
        imbalance = imbalance.max(s.d - sum);
        sum += s.t;
        tmax = tmax.max(s.t);
    }
    f64::from(g - 1) * tmax + sum + imbalance
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub microbatch: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrack {
    /// Prologue interval `[0, d)`; absent when d is zero.
    pub prologue: Option<(f64, f64)>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub stages: Vec<StageTrack>,
}

impl Timeline {
    pub fn makespan(&self) -> f64 {
        self.stages
            .iter()
            .filter_map(|s| s.events.last().map(|e| e.end))
            .fold(0.0, f64::max)
    }
}

/// Runs `F(i,k) = max(F(i−1,k), F(i,k−1)) + t_i` with `F(0,k) = 0` and
/// stage readiness `F(i,0) = d_i`; every prologue starts at time zero.
pub fn simulate(plan: &PipelinePlan) -> Result<(f64, Timeline), PipeError> {
    plan.validate()?;
    let g = plan.g as usize;
    let mut upstream = vec![0.0f64; g];
    let mut stages = Vec::with_capacity(plan.stages.len());
    for s in &plan.stages {
        let mut ready = s.d;
        let mut events = Vec::with_capacity(g);
        for (k, up) in upstream.iter_mut().enumerate() {
            let start = ready.max(*up);
            let end = start + s.t;
            events.push(Event {
                microbatch: k as u32 + 1,
                start,
                end,
            });
            *up = end;
            ready = end;
        }
        stages.push(StageTrack {
            prologue: (s.d > 0.0).then_some((0.0, s.d)),
            events,
        });
    }
    let makespan = upstream[g - 1];
    Ok((makespan, Timeline { stages }))
}

/// `max_j [d_j + Σ_{m≥j} t_m + (G−1)·max_{m≥j} t_m]` with `d_0 = 0` over
/// the full pipeline.
pub fn closed_form_makespan(plan: &PipelinePlan) -> Result<f64, PipeError> {
    plan.validate()?;
    let gm1 = f64::from(plan.g - 1);
    let mut best = f64::NEG_INFINITY;
    let mut suffix = 0.0f64;
    let mut suffix_max = 0.0f64;
    for s in plan.stages.iter().rev() {
        suffix += s.t;
        suffix_max = suffix_max.max(s.t);
        best = best.max(s.d + suffix + gm1 * suffix_max);
    }
    // j = 0: no readiness delay, whole pipeline
    Ok(best.max(suffix + gm1 * suffix_max))
}

pub const SVG_WIDTH: f64 = 960.0;
pub const SVG_ROW_HEIGHT: f64 = 28.0;
pub const SVG_MARGIN: f64 = 64.0;
pub const EVENT_COLOR: &str = "#4C78A8";
pub const PROLOGUE_COLOR: &str = "#F58518";

/// Renders a timeline as `rows-text` or `svg`.
pub fn export_gantt(timeline: &Timeline, format: &str) -> Result<String, PipeError> {
    match format {
        "rows-text" => Ok(rows_text(timeline)),
        "svg" => Ok(svg(timeline)),
        other => Err(PipeError::UnknownFormat(other.to_string())),
    }
}

fn rows_text(tl: &Timeline) -> String {
    let mut out = String::new();
    for (i, s) in tl.stages.iter().enumerate() {
        write!(out, "stage {}:", i + 1).unwrap();
        if let Some((a, b)) = s.prologue {
            write!(out, " P[{a:.6}, {b:.6})").unwrap();
        }
        for e in &s.events {
            write!(out, " {}[{:.6}, {:.6})", e.microbatch, e.start, e.end).unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "makespan: {:.6}", tl.makespan()).unwrap();
    out
}

fn svg(tl: &Timeline) -> String {
    let span = tl.makespan().max(f64::MIN_POSITIVE);
    let plot = SVG_WIDTH - 2.0 * SVG_MARGIN;
    let x = |v: f64| SVG_MARGIN + v / span * plot;
    let height = SVG_ROW_HEIGHT * (tl.stages.len() as f64 + 2.0);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{height}" viewBox="0 0 {SVG_WIDTH} {height}" font-family="monospace" font-size="11">"#
    )
    .unwrap();
    writeln!(
        out,
        r##"<rect width="100%" height="100%" fill="#FFFFFF"/>"##
    )
    .unwrap();
    for (i, s) in tl.stages.iter().enumerate() {
        let y = SVG_ROW_HEIGHT * (i as f64 + 1.0);
        let h = SVG_ROW_HEIGHT * 0.8;
        writeln!(
            out,
            r#"<text x="4" y="{:.2}">stage {}</text>"#,
            y + h * 0.7,
            i + 1
        )
        .unwrap();
        if let Some((a, b)) = s.prologue {
            writeln!(
                out,
                r#"<rect class="prologue" x="{:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{PROLOGUE_COLOR}"/>"#,
                x(a),
                x(b) - x(a)
            )
            .unwrap();
        }
        for e in &s.events {
            writeln!(
                out,
                r##"<rect class="event" x="{:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{EVENT_COLOR}" stroke="#FFFFFF"><title>mb {} [{}, {})</title></rect>"##,
                x(e.start),
                x(e.end) - x(e.start),
                e.microbatch,
                e.start,
                e.end
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

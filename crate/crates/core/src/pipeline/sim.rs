//! Deterministic discrete-event execution of the ping-pong schedule.
//!
//! Two exclusive resources (the attention fleet and the expert fleet) each
//! execute their work in admission order, layer by layer: micro-batches
//! `0..m` of layer 0, then `0..m` of layer 1, and so on. A resource whose next
//! item has not arrived waits for it rather than reordering. Dispatch and
//! combine are pure delays on a non-blocking link and occupy neither
//! resource. Micro-batch `i` is admitted at `i * T_f`, so the pipeline
//! advances at the pace of the slower stage.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{check_shape, StageTimes};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Attention,
    Expert,
    /// Non-exclusive; link events may overlap.
    Link,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Attn,
    Disp,
    Ffn,
    Comb,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::Attention => "attention",
            Resource::Expert => "expert",
            Resource::Link => "link",
        })
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Attn => "attn",
            Phase::Disp => "disp",
            Phase::Ffn => "ffn",
            Phase::Comb => "comb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub resource: Resource,
    pub microbatch: u32,
    pub layer: u32,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// From each micro-batch's first attention start to its last combine.
    pub iter_latency_per_microbatch: Vec<f64>,
    pub total_latency: f64,
    pub attention_idle_fraction: f64,
    pub expert_idle_fraction: f64,
    /// Ordered by start time, then resource, micro-batch, layer and phase.
    pub timeline: Vec<TimelineEvent>,
}

/// [`SimReport`] without the timeline, for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub microbatches: u32,
    pub layers: u32,
    pub total_latency: f64,
    pub mean_iter_latency: f64,
    pub max_iter_latency: f64,
    pub iter_latency_per_microbatch: Vec<f64>,
    pub attention_idle_fraction: f64,
    pub expert_idle_fraction: f64,
}

impl SimReport {
    pub fn mean_iter_latency(&self) -> f64 {
        let n = self.iter_latency_per_microbatch.len() as f64;
        self.iter_latency_per_microbatch.iter().sum::<f64>() / n
    }

    pub fn max_iter_latency(&self) -> f64 {
        self.iter_latency_per_microbatch.iter().copied().fold(0.0, f64::max)
    }

    pub fn summary(&self, m: u32, layers: u32) -> SimSummary {
        SimSummary {
            microbatches: m,
            layers,
            total_latency: self.total_latency,
            mean_iter_latency: self.mean_iter_latency(),
            max_iter_latency: self.max_iter_latency(),
            iter_latency_per_microbatch: self.iter_latency_per_microbatch.clone(),
            attention_idle_fraction: self.attention_idle_fraction,
            expert_idle_fraction: self.expert_idle_fraction,
        }
    }

    /// Writes `resource,microbatch,layer,phase,start_s,end_s`.
    pub fn write_timeline_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Parse {
            context: "timeline csv".into(),
            message: e.to_string(),
        };
        w.write_record(["resource", "microbatch", "layer", "phase", "start_s", "end_s"])
            .map_err(io)?;
        for ev in &self.timeline {
            w.write_record([
                ev.resource.to_string(),
                ev.microbatch.to_string(),
                ev.layer.to_string(),
                ev.phase.to_string(),
                ev.start.to_string(),
                ev.end.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Parse {
            context: "timeline csv".into(),
            message: e.to_string(),
        })
    }

    /// Checks resource exclusivity and per-micro-batch phase ordering.
    /// Returns a description of the first violation.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        for res in [Resource::Attention, Resource::Expert] {
            let mut evs: Vec<&TimelineEvent> = self.timeline.iter().filter(|e| e.resource == res).collect();
            evs.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in evs.windows(2) {
                if w[1].start < w[0].end {
                    return Err(format!("{res} overlap: {:?} and {:?}", w[0], w[1]));
                }
            }
        }
        let mbs = self.iter_latency_per_microbatch.len() as u32;
        for mb in 0..mbs {
            let mut evs: Vec<&TimelineEvent> = self.timeline.iter().filter(|e| e.microbatch == mb).collect();
            evs.sort_by_key(|e| (e.layer, e.phase));
            for w in evs.windows(2) {
                if w[1].start < w[0].end {
                    return Err(format!("micro-batch {mb} out of order: {:?} then {:?}", w[0], w[1]));
                }
            }
            let expected = [Phase::Attn, Phase::Disp, Phase::Ffn, Phase::Comb];
            for (i, e) in evs.iter().enumerate() {
                if e.layer != i as u32 / 4 || e.phase != expected[i % 4] {
                    return Err(format!("micro-batch {mb} has an unexpected event {e:?}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Ready,
    AttnDone,
    DispatchArrive,
    FfnDone,
    CombineArrive,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
    mb: u32,
    layer: u32,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Serves work items `layer * m + microbatch` strictly in index order.
struct Station {
    arrived: Vec<bool>,
    next: usize,
    m: u32,
    busy: bool,
    busy_time: f64,
}

impl Station {
    fn new(m: u32, layers: u32) -> Self {
        Station {
            arrived: vec![false; (m * layers) as usize],
            next: 0,
            m,
            busy: false,
            busy_time: 0.0,
        }
    }

    fn arrive(&mut self, mb: u32, layer: u32) {
        self.arrived[(layer * self.m + mb) as usize] = true;
    }

    /// The next item in order, if idle and it has arrived.
    fn take(&mut self) -> Option<(u32, u32)> {
        if self.busy || !self.arrived.get(self.next).copied().unwrap_or(false) {
            return None;
        }
        let k = self.next as u32;
        self.next += 1;
        self.busy = true;
        Some((k % self.m, k / self.m))
    }
}

struct Engine<F> {
    heap: BinaryHeap<Event>,
    seq: u64,
    delay: F,
}

impl<F: FnMut(Phase, u32, u32) -> f64> Engine<F> {
    fn push(&mut self, time: f64, kind: Kind, mb: u32, layer: u32) {
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
            mb,
            layer,
        });
        self.seq += 1;
    }
}

/// Runs the schedule with link delays supplied per message by `delay(phase, microbatch, layer)`.
pub fn simulate_with_delays<F>(times: &StageTimes, m: u32, layers: u32, delay: F) -> Result<SimReport>
where
    F: FnMut(Phase, u32, u32) -> f64,
{
    times.validate()?;
    check_shape(m, layers)?;
    let t_f = times.t_f();
    let mut eng = Engine {
        heap: BinaryHeap::new(),
        seq: 0,
        delay,
    };
    let mut attn = Station::new(m, layers);
    let mut expert = Station::new(m, layers);
    let mut timeline = Vec::with_capacity(4 * (m as usize) * (layers as usize));
    let mut first_start = vec![f64::NAN; m as usize];
    let mut finish = vec![0.0f64; m as usize];

    for mb in 0..m {
        eng.push(f64::from(mb) * t_f, Kind::Ready, mb, 0);
    }

    while let Some(ev) = eng.heap.pop() {
        let now = ev.time;
        match ev.kind {
            Kind::Ready => attn.arrive(ev.mb, ev.layer),
            Kind::AttnDone => {
                attn.busy = false;
                let d = (eng.delay)(Phase::Disp, ev.mb, ev.layer);
                timeline.push(TimelineEvent {
                    resource: Resource::Link,
                    microbatch: ev.mb,
                    layer: ev.layer,
                    phase: Phase::Disp,
                    start: now,
                    end: now + d,
                });
                eng.push(now + d, Kind::DispatchArrive, ev.mb, ev.layer);
            }
            Kind::DispatchArrive => expert.arrive(ev.mb, ev.layer),
            Kind::FfnDone => {
                expert.busy = false;
                let d = (eng.delay)(Phase::Comb, ev.mb, ev.layer);
                timeline.push(TimelineEvent {
                    resource: Resource::Link,
                    microbatch: ev.mb,
                    layer: ev.layer,
                    phase: Phase::Comb,
                    start: now,
                    end: now + d,
                });
                eng.push(now + d, Kind::CombineArrive, ev.mb, ev.layer);
            }
            Kind::CombineArrive => {
                if ev.layer + 1 < layers {
                    attn.arrive(ev.mb, ev.layer + 1);
                } else {
                    finish[ev.mb as usize] = now;
                }
            }
        }

        if let Some((mb, layer)) = attn.take() {
            {
                attn.busy_time += times.t_a;
                if layer == 0 {
                    first_start[mb as usize] = now;
                }
                timeline.push(TimelineEvent {
                    resource: Resource::Attention,
                    microbatch: mb,
                    layer,
                    phase: Phase::Attn,
                    start: now,
                    end: now + times.t_a,
                });
                eng.push(now + times.t_a, Kind::AttnDone, mb, layer);
            }
        }
        if let Some((mb, layer)) = expert.take() {
            {
                expert.busy_time += times.t_e;
                timeline.push(TimelineEvent {
                    resource: Resource::Expert,
                    microbatch: mb,
                    layer,
                    phase: Phase::Ffn,
                    start: now,
                    end: now + times.t_e,
                });
                eng.push(now + times.t_e, Kind::FfnDone, mb, layer);
            }
        }
    }

    let total_latency = finish.iter().copied().fold(0.0, f64::max);
    let idle = |busy: f64| {
        if total_latency > 0.0 {
            (1.0 - busy / total_latency).max(0.0)
        } else {
            0.0
        }
    };
    timeline.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then_with(|| (a.resource as u8).cmp(&(b.resource as u8)))
            .then_with(|| (a.microbatch, a.layer, a.phase).cmp(&(b.microbatch, b.layer, b.phase)))
    });
    Ok(SimReport {
        iter_latency_per_microbatch: finish.iter().zip(&first_start).map(|(f, s)| f - s).collect(),
        total_latency,
        attention_idle_fraction: idle(attn.busy_time),
        expert_idle_fraction: idle(expert.busy_time),
        timeline,
    })
}

/// Runs the schedule with a fixed link delay of `T_c` per message.
pub fn simulate(times: &StageTimes, m: u32, layers: u32) -> Result<SimReport> {
    let t_c = times.t_c;
    simulate_with_delays(times, m, layers, |_, _, _| t_c)
}

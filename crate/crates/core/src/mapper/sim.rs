//! Discrete-event simulation of a mapping plan, layer by layer.
//!
//! The backbone layers run in sequence, then the boundary tensors are
//! cloned, then every engine starts its queue of passes; an engine holds
//! one pass at a time and walks its layers in order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use super::{component_cost, cycles_to_ms, estimate, DeviceProfile, HwEstimate, MapError, MappingPlan};
use crate::netir::NetworkGraph;
use crate::transform::split_components;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
/// Completion events.
enum Event {
    BackboneLayer(usize),
    Cloned,
    EngineLayer { engine: usize, layer: usize },
}

struct Queue {
    heap: BinaryHeap<Reverse<(u64, u64, Event)>>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: u64, ev: Event) {
        self.heap.push(Reverse((time, self.seq, ev)));
        self.seq += 1;
    }
}

/// Cycle-exact latency by event simulation; resource figures are those of
/// the analytic model.
pub fn simulate(plan: &MappingPlan, graph: &NetworkGraph, device: &DeviceProfile) -> Result<HwEstimate, MapError> {
    let parts = split_components(graph);
    let backbone: Vec<u64> = component_cost(graph, &parts.non_bayesian, &plan.reuse)?
        .layers
        .iter()
        .map(|(_, c)| c.cycles)
        .collect();
    let engine: Vec<u64> = component_cost(graph, &parts.bayesian, &plan.reuse)?
        .layers
        .iter()
        .map(|(_, c)| c.cycles)
        .collect();
    let mut pending: Vec<VecDeque<usize>> = plan
        .engines
        .iter()
        .map(|e| e.passes.iter().copied().collect())
        .collect();

    let mut q = Queue {
        heap: BinaryHeap::new(),
        seq: 0,
    };
    let mut now = 0u64;
    let mut backbone_end = 0u64;
    let mut clone_end = 0u64;
    if backbone.is_empty() {
        q.push(0, Event::BackboneLayer(usize::MAX));
    } else {
        q.push(backbone[0], Event::BackboneLayer(0));
    }
    let start_pass = |q: &mut Queue, engine_id: usize, t: u64, pending: &mut Vec<VecDeque<usize>>| {
        if pending[engine_id].pop_front().is_some() && !engine.is_empty() {
            q.push(
                t + engine[0],
                Event::EngineLayer {
                    engine: engine_id,
                    layer: 0,
                },
            );
        }
    };
    while let Some(Reverse((t, _, ev))) = q.heap.pop() {
        now = now.max(t);
        match ev {
            Event::BackboneLayer(i) => {
                if i != usize::MAX && i + 1 < backbone.len() {
                    q.push(t + backbone[i + 1], Event::BackboneLayer(i + 1));
                } else {
                    backbone_end = t;
                    q.push(t + plan.clone_buffer as u64, Event::Cloned);
                }
            }
            Event::Cloned => {
                clone_end = t;
                for e in 0..pending.len() {
                    start_pass(&mut q, e, t, &mut pending);
                }
            }
            Event::EngineLayer { engine: e, layer } => {
                if layer + 1 < engine.len() {
                    q.push(
                        t + engine[layer + 1],
                        Event::EngineLayer {
                            engine: e,
                            layer: layer + 1,
                        },
                    );
                } else {
                    start_pass(&mut q, e, t, &mut pending);
                }
            }
        }
    }
    let analytic = estimate(plan, graph, device)?;
    Ok(HwEstimate {
        latency_cycles: now,
        latency_ms: cycles_to_ms(now, device.clock_mhz),
        backbone_cycles: backbone_end,
        clone_cycles: clone_end - backbone_end,
        bayesian_cycles: now - clone_end,
        ..analytic
    })
}

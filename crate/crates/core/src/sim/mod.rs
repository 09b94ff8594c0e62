//! Deterministic interval engine: synthesizes (or replays) probe
//! traffic, runs every detector, prices the factors, tallies votes, and
//! executes isolation decisions.
//!
//! Each interval proceeds through fixed phases: pending mitigation takes
//! effect, probes are delivered, every adjacent (observer, target) pair
//! measures its mismatch and updates its detector, penalties are priced
//! and threshold votes cast, then the utility decides per target. An
//! isolation decided in interval k reshapes the network for k+1; the
//! interval that decided it still ran on the old topology.
//!
//! All iteration is over ordered maps and sets, so a run is a pure
//! function of (network, scenario, probe source): repeating one yields
//! bitwise-identical traces.

pub mod scenario;
pub mod synth;
pub mod trace;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::detection::DetectorState;
use crate::dopf::{
    solve_dopf, DopfError, FixedReferenceProvider, ReferenceProvider, ReferenceSchedule,
    SolverOptions,
};
use crate::grid::{GridError, Network, ProsumerId};
use crate::penalty::{
    apply_mitigation, check_threshold, utility_decide, DetectorBank, IsolationVote,
    MitigationOutcome, PenaltyError, PenaltyRecord,
};
use crate::probing::{collect_window, dead_zone, energy_mismatch, ProbeBus, ProbeError};

pub use scenario::{AnomalyInjection, InjectionMode, ReferenceMode, Scenario, ScenarioError};
pub use synth::SynthError;
pub use trace::{
    DetectionRow, IsolationEvent, PenaltyRow, PowerRow, SimTrace, TraceError,
};

/// Where each interval's probe messages come from.
pub enum ProbeSource {
    /// Generate traffic from the references plus scripted injections.
    Synthesize,
    /// Replay a previously captured bus. Pairs whose windows are
    /// incomplete skip their detector update for that interval.
    Replay(ProbeBus),
}

/// A failure, tagged with the interval it occurred in (0 = setup).
#[derive(Debug, thiserror::Error)]
#[error("interval {interval}: {source}")]
pub struct SimError {
    pub interval: u64,
    #[source]
    pub source: SimErrorKind,
}

#[derive(Debug, thiserror::Error)]
pub enum SimErrorKind {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    References(#[from] DopfError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl SimError {
    fn at(interval: u64, source: impl Into<SimErrorKind>) -> Self {
        SimError {
            interval,
            source: source.into(),
        }
    }
}

/// Mutable run state.
pub struct World {
    /// Intervals completed so far.
    pub interval: u64,
    /// Topology epoch; increments each time an isolation takes effect.
    pub epoch: u32,
    pub net: Network,
    pub refs: ReferenceSchedule,
    pub detectors: DetectorBank,
    pub bus: ProbeBus,
    /// Decided this interval, applied when the next one starts.
    pending: Option<MitigationOutcome>,
}

/// One dispatch-solver invocation during a run (solve mode only).
#[derive(Debug, Clone, PartialEq)]
pub struct SolveCall {
    /// Interval the resulting schedule took effect.
    pub valid_from: u64,
    pub iterations: usize,
    pub wall_ms: f64,
}

/// Everything a finished run leaves behind. The final network and
/// references include any isolation decided in the last interval.
pub struct SimRun {
    pub trace: SimTrace,
    pub bus: ProbeBus,
    pub final_network: Network,
    pub final_refs: ReferenceSchedule,
    /// Empty when references were fixed tables.
    pub solver_calls: Vec<SolveCall>,
}

/// Solves on demand like the plain solver provider, but logs each call
/// so run reports can show iteration counts.
struct CountingSolverProvider {
    options: SolverOptions,
    calls: Rc<RefCell<Vec<SolveCall>>>,
}

impl ReferenceProvider for CountingSolverProvider {
    fn references(&self, net: &Network, valid_from: u64) -> Result<ReferenceSchedule, DopfError> {
        let solution = solve_dopf(&crate::grid::decouple(net), &self.options)?;
        self.calls.borrow_mut().push(SolveCall {
            valid_from,
            iterations: solution.iterations(),
            wall_ms: solution.wall_ms,
        });
        let mut schedule = solution.schedule;
        schedule.valid_from = valid_from;
        Ok(schedule)
    }
}

/// The engine: owns the world, the scenario, and the growing trace.
pub struct Sim {
    scenario: Scenario,
    provider: Box<dyn ReferenceProvider>,
    solver_calls: Rc<RefCell<Vec<SolveCall>>>,
    replay: bool,
    pub world: World,
    pub trace: SimTrace,
}

impl Sim {
    pub fn new(
        net: &Network,
        scenario: &Scenario,
        solver: SolverOptions,
        source: ProbeSource,
    ) -> Result<Self, SimError> {
        scenario
            .validate_against(net)
            .map_err(|e| SimError::at(0, e))?;
        let solver_calls = Rc::new(RefCell::new(Vec::new()));
        let provider: Box<dyn ReferenceProvider> = match &scenario.reference {
            ReferenceMode::Fixed {
                values,
                post_isolation,
            } => Box::new(FixedReferenceProvider::new(
                values.clone(),
                post_isolation.clone(),
            )),
            ReferenceMode::Solve => Box::new(CountingSolverProvider {
                options: solver,
                calls: Rc::clone(&solver_calls),
            }),
        };
        let refs = provider.references(net, 1).map_err(|e| SimError::at(0, e))?;
        let (bus, replay) = match source {
            ProbeSource::Synthesize => (ProbeBus::new(), false),
            ProbeSource::Replay(bus) => (bus, true),
        };
        let slack = net.slack().id.clone();
        let watched: Vec<ProsumerId> =
            net.ids().filter(|id| **id != slack).cloned().collect();
        Ok(Sim {
            scenario: scenario.clone(),
            provider,
            solver_calls,
            replay,
            world: World {
                interval: 0,
                epoch: 0,
                net: net.clone(),
                refs,
                detectors: DetectorBank::new(),
                bus,
                pending: None,
            },
            trace: SimTrace {
                horizon: 0,
                watched,
                ..SimTrace::default()
            },
        })
    }

    /// Executes the next interval.
    pub fn step(&mut self) -> Result<(), SimError> {
        let k = self.world.interval + 1;

        // Phase 0: a mitigation decided last interval takes effect now.
        if let Some(m) = self.world.pending.take() {
            self.world.net = m.network;
            self.world.refs = m.schedule;
            self.world.epoch += 1;
        }
        let world = &mut self.world;

        // Phase 1: probe delivery. Replay buses already hold their
        // messages; otherwise synthesize from references and injections.
        if !self.replay {
            let actuals = synth::interval_actuals(
                &world.net,
                &world.refs,
                &self.scenario.injections,
                k,
            )
            .map_err(|e| SimError::at(k, e))?;
            let flows =
                synth::line_flows(&world.net, &actuals).map_err(|e| SimError::at(k, e))?;
            synth::publish_interval(&mut world.bus, &flows, k, &self.scenario.probe)
                .map_err(|e| SimError::at(k, e))?;
        }

        // Delivered-power rows for every connected prosumer. A replay
        // bus may simply lack the interval; those rows are omitted.
        let ids: Vec<ProsumerId> = world.net.ids().cloned().collect();
        for id in &ids {
            match synth::delivered_power(&world.bus, &world.net, id, k, &self.scenario.probe) {
                Ok(actual) => {
                    let p_ref = world
                        .refs
                        .p_ref(id)
                        .ok_or_else(|| SimError::at(k, DopfError::MissingReference(id.clone())))?;
                    self.trace.power.push(PowerRow {
                        interval: k,
                        prosumer: id.clone(),
                        actual_mw: actual,
                        p_ref_mw: p_ref,
                        epoch: world.epoch,
                    });
                }
                Err(SynthError::Probe(ref p)) if incomplete(p) => {}
                Err(e) => return Err(SimError::at(k, e)),
            }
        }

        // Phases 2-6 per (target, observer), targets in id order so the
        // trace is sorted by (interval, target, observer). The slack
        // absorbs losses and imbalance by design, so it is never a
        // target.
        let slack = world.net.slack().id.clone();
        let mut votes: BTreeMap<ProsumerId, Vec<IsolationVote>> = BTreeMap::new();
        for target in ids.iter().filter(|id| **id != slack) {
            let observers = world.net.neighbors(target).map_err(|e| SimError::at(k, e))?;
            for observer in &observers {
                let window = match collect_window(
                    &world.bus,
                    &world.net,
                    observer,
                    target,
                    k,
                    &self.scenario.probe,
                ) {
                    Ok(w) => w,
                    // No complete window, no update: F carries over.
                    Err(ref p) if incomplete(p) => continue,
                    Err(e) => return Err(SimError::at(k, e)),
                };
                let report = energy_mismatch(&window, &world.refs, &self.scenario.probe)
                    .map_err(|e| SimError::at(k, e))?;
                let d = dead_zone(report.d, self.scenario.detector.eps_dz);
                let state = world
                    .detectors
                    .entry((observer.clone(), target.clone()))
                    .or_insert_with(|| DetectorState::new(observer.clone(), target.clone()));
                let step = state.update(d, &self.scenario.detector);
                self.trace.detection.push(DetectionRow {
                    interval: k,
                    observer: observer.clone(),
                    target: target.clone(),
                    d_mw: d,
                    rate: step.rate,
                    decay: step.decay,
                    f: step.f,
                });

                let record = PenaltyRecord::price(
                    observer.clone(),
                    target.clone(),
                    k,
                    step.f,
                    &self.scenario.penalty,
                );
                let vote = check_threshold(&record, self.scenario.penalty.c_th);
                self.trace.penalties.push(PenaltyRow {
                    record,
                    vote: vote.is_some(),
                });
                if let Some(v) = vote {
                    votes.entry(target.clone()).or_default().push(v);
                }
            }
        }

        // Phases 7-8: utility decisions in target order. Several
        // isolations in one interval chain: each applies to the network
        // left by the previous, while the vote check still uses the
        // topology the interval ran under.
        let mut base = world.net.clone();
        for target in ids.iter().filter(|id| **id != slack) {
            let cast = votes.get(target).map_or(&[][..], Vec::as_slice);
            let decision = utility_decide(
                cast,
                &world.net,
                target,
                k,
                self.scenario.penalty.vote_ratio,
            )
            .map_err(|e| SimError::at(k, e))?;
            if decision.isolated {
                let outcome = apply_mitigation(
                    &decision,
                    &base,
                    self.provider.as_ref(),
                    &mut world.detectors,
                )
                .map_err(|e| SimError::at(k, e))?
                .expect("isolating decision produces an outcome");
                self.trace.isolations.push(IsolationEvent {
                    interval: k,
                    target: target.clone(),
                    effective_from: k + 1,
                    partition_warning: outcome.partition_warning.clone(),
                });
                base = outcome.network.clone();
                world.pending = Some(outcome);
            }
            self.trace.decisions.push(decision);
        }

        world.interval = k;
        self.trace.horizon = k;
        Ok(())
    }

    /// Runs the scenario's full horizon and finalizes.
    pub fn run(mut self) -> Result<SimRun, SimError> {
        for _ in 0..self.scenario.horizon {
            self.step()?;
        }
        let mut world = self.world;
        // An isolation decided in the last interval still reshapes the
        // final state.
        if let Some(m) = world.pending.take() {
            world.net = m.network;
            world.refs = m.schedule;
        }
        Ok(SimRun {
            trace: self.trace,
            bus: world.bus,
            final_network: world.net,
            final_refs: world.refs,
            solver_calls: self.solver_calls.borrow().clone(),
        })
    }
}

/// Builds and runs in one call.
pub fn run(
    net: &Network,
    scenario: &Scenario,
    solver: SolverOptions,
    source: ProbeSource,
) -> Result<SimRun, SimError> {
    Sim::new(net, scenario, solver, source)?.run()
}

fn incomplete(e: &ProbeError) -> bool {
    matches!(e, ProbeError::IncompleteWindow { .. })
}

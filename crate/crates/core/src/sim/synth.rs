//! Ground truth behind the probes: per-interval injections and the
//! line-flow allocation the samples report.
//!
//! Every non-slack prosumer produces its reference, distorted by any
//! active injection; the slack absorbs the total so the synthesized
//! world balances exactly. Net injections are then allocated across tie
//! lines with a susceptance-weighted angle solve (the linearized
//! lossless flow model): flows are exactly antisymmetric per line
//! (`p_ij = -p_ji` to the bit) and each node's flow sum reproduces its
//! injection to solver precision, which the dead-zone filter absorbs.
//! The allocation only shapes per-line traces — detection consumes the
//! per-node sums.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::dopf::ReferenceSchedule;
use crate::grid::{GridError, Network, ProsumerId};
use crate::probing::{ProbeBus, ProbeError, ProbeParams, ProbeSample};
use crate::sim::scenario::AnomalyInjection;

/// Synthesis failures.
#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("no reference value for prosumer `{0}`")]
    MissingReference(ProsumerId),
    #[error("flow allocation failed: network is disconnected or degenerate")]
    Unsolvable,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Net MW injection per prosumer for interval `k`: references with
/// active injections applied in list order, slack overwritten last so
/// the total is exactly zero. Injections whose target is no longer in
/// the network (isolated mid-run) are skipped.
pub fn interval_actuals(
    net: &Network,
    refs: &ReferenceSchedule,
    injections: &[AnomalyInjection],
    k: u64,
) -> Result<BTreeMap<ProsumerId, f64>, SynthError> {
    let slack = net.slack().id.clone();
    let mut actuals = BTreeMap::new();
    for id in net.ids() {
        let p_ref = refs
            .p_ref(id)
            .ok_or_else(|| SynthError::MissingReference(id.clone()))?;
        actuals.insert(id.clone(), p_ref);
    }
    for inj in injections {
        if !inj.active_at(k) || inj.target == slack {
            continue;
        }
        if let Some(p) = actuals.get_mut(&inj.target) {
            *p = inj.apply(*p);
        }
    }
    let others: f64 = actuals
        .iter()
        .filter(|(id, _)| **id != slack)
        .map(|(_, p)| p)
        .sum();
    actuals.insert(slack, -others);
    Ok(actuals)
}

/// Allocates net injections to directed line flows. Returns MW at the
/// lower endpoint's end for each line in network order; the opposite
/// direction is the exact negation.
pub fn line_flows(
    net: &Network,
    actuals: &BTreeMap<ProsumerId, f64>,
) -> Result<Vec<(ProsumerId, ProsumerId, f64)>, SynthError> {
    let ids: Vec<&ProsumerId> = net.ids().collect();
    let index: BTreeMap<&ProsumerId, usize> =
        ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let slack = index[&net.slack().id];
    let n = ids.len();

    // Susceptance-weighted Laplacian; |y| stands in for the rare
    // resistive-only line so weights stay positive.
    let mut lap = DMatrix::zeros(n, n);
    for l in net.lines() {
        let (a, b) = (index[&l.a], index[&l.b]);
        let w = weight(l.admittance.b, l.admittance.g);
        lap[(a, a)] += w;
        lap[(b, b)] += w;
        lap[(a, b)] -= w;
        lap[(b, a)] -= w;
    }

    let mut theta = DVector::zeros(n);
    if n > 1 {
        let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
        let reduced = DMatrix::from_fn(n - 1, n - 1, |r, c| lap[(keep[r], keep[c])]);
        let rhs = DVector::from_fn(n - 1, |r, _| actuals[ids[keep[r]]]);
        let solved = reduced
            .cholesky()
            .ok_or(SynthError::Unsolvable)?
            .solve(&rhs);
        for (r, &i) in keep.iter().enumerate() {
            theta[i] = solved[r];
        }
    }

    let mut flows = Vec::with_capacity(net.lines().len());
    for l in net.lines() {
        let w = weight(l.admittance.b, l.admittance.g);
        let f = w * (theta[index[&l.a]] - theta[index[&l.b]]);
        flows.push((l.a.clone(), l.b.clone(), f));
    }
    Ok(flows)
}

fn weight(b: f64, g: f64) -> f64 {
    if b.abs() > 1e-12 {
        b.abs()
    } else {
        g.abs()
    }
}

/// Publishes one interval's flows: `L` identical samples per direction
/// (injections are constant within an interval), the reverse direction
/// the exact negation of the forward one.
pub fn publish_interval(
    bus: &mut ProbeBus,
    flows: &[(ProsumerId, ProsumerId, f64)],
    k: u64,
    params: &ProbeParams,
) -> Result<(), SynthError> {
    for (a, b, f) in flows {
        for idx in 1..=params.samples_per_interval {
            bus.publish(
                k,
                ProbeSample {
                    from: a.clone(),
                    to: b.clone(),
                    sample_index: idx,
                    power_mw: *f,
                },
            )?;
            bus.publish(
                k,
                ProbeSample {
                    from: b.clone(),
                    to: a.clone(),
                    sample_index: idx,
                    power_mw: -*f,
                },
            )?;
        }
    }
    Ok(())
}

/// A prosumer's delivered net power over interval `k` as the probes
/// recorded it: mean per-sample flow sum over its lines. This is the
/// same quantity detection compares against the reference, so it works
/// for replayed traces as well as synthesized ones.
pub fn delivered_power(
    bus: &ProbeBus,
    net: &Network,
    id: &ProsumerId,
    k: u64,
    params: &ProbeParams,
) -> Result<f64, SynthError> {
    let l = params.samples_per_interval;
    let mut total = 0.0;
    for nb in &net.neighbors(id)? {
        let line = bus.line(k, id, nb).ok_or(ProbeError::IncompleteWindow {
            observer: id.clone(),
            target: id.clone(),
            interval: k,
            to: nb.clone(),
            have: 0,
            want: l as usize,
        })?;
        if line.len() as u32 != l {
            return Err(ProbeError::IncompleteWindow {
                observer: id.clone(),
                target: id.clone(),
                interval: k,
                to: nb.clone(),
                have: line.len(),
                want: l as usize,
            }
            .into());
        }
        total += line.values().sum::<f64>();
    }
    Ok(total / l as f64)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use crate::dopf::{fixed_reference, PowerRef};
    use crate::fixtures;
    use crate::sim::scenario::InjectionMode;

    use super::*;

    fn refs(net: &Network) -> ReferenceSchedule {
        let values = [
            ("pi1", 23.56),
            ("pi2", 49.56),
            ("pi3", 39.04),
            ("pi4", -60.0),
            ("pi5", -50.0),
        ]
        .map(|(id, p)| (id.into(), PowerRef { p_mw: p, q_mvar: 0.0 }));
        fixed_reference(net, values, 0).unwrap()
    }

    fn scale_pi2(magnitude: f64, start: u64, end: Option<u64>) -> AnomalyInjection {
        AnomalyInjection {
            target: "pi2".into(),
            start_k: start,
            end_k: end,
            mode: InjectionMode::Scale,
            magnitude,
        }
    }

    #[test]
    fn slack_closes_the_balance_exactly() {
        let net = fixtures::five_bus();
        let a = interval_actuals(&net, &refs(&net), &[], 1).unwrap();
        let total: f64 = a.values().sum();
        assert_eq!(total, 0.0);
        assert_eq!(a[&"pi2".into()], 49.56);
    }

    #[test]
    fn active_injection_scales_only_its_target() {
        let net = fixtures::five_bus();
        let inj = [scale_pi2(1.15, 4, Some(5))];
        let a = interval_actuals(&net, &refs(&net), &inj, 4).unwrap();
        assert_relative_eq!(a[&"pi2".into()], 1.15 * 49.56, max_relative = 1e-15);
        assert_eq!(a[&"pi3".into()], 39.04);
        let quiet = interval_actuals(&net, &refs(&net), &inj, 5).unwrap();
        assert_eq!(quiet[&"pi2".into()], 49.56);
    }

    #[test]
    fn flows_are_antisymmetric_and_sum_to_injections() {
        let net = fixtures::five_bus();
        let a = interval_actuals(&net, &refs(&net), &[scale_pi2(0.9, 1, None)], 3).unwrap();
        let flows = line_flows(&net, &a).unwrap();
        assert_eq!(flows.len(), net.line_count());
        let mut sums: BTreeMap<ProsumerId, f64> =
            net.ids().map(|id| (id.clone(), 0.0)).collect();
        for (from, to, f) in &flows {
            *sums.get_mut(from).unwrap() += f;
            *sums.get_mut(to).unwrap() -= f;
        }
        for (id, s) in &sums {
            assert_relative_eq!(*s, a[id], epsilon = 1e-9);
        }
    }

    #[test]
    fn published_samples_negate_exactly() {
        let net = fixtures::five_bus();
        let params = ProbeParams::default();
        let a = interval_actuals(&net, &refs(&net), &[], 1).unwrap();
        let flows = line_flows(&net, &a).unwrap();
        let mut bus = ProbeBus::new();
        publish_interval(&mut bus, &flows, 1, &params).unwrap();
        for (from, to, _) in &flows {
            let fwd = bus.line(1, from, to).unwrap();
            let rev = bus.line(1, to, from).unwrap();
            assert_eq!(fwd.len(), 30);
            for idx in 1..=30u32 {
                assert_eq!(fwd[&idx].to_bits(), (-rev[&idx]).to_bits());
            }
        }
    }

    #[test]
    fn delivered_power_recovers_actuals() {
        let net = fixtures::five_bus();
        let params = ProbeParams::default();
        let inj = [scale_pi2(1.15, 4, Some(5))];
        let a = interval_actuals(&net, &refs(&net), &inj, 4).unwrap();
        let flows = line_flows(&net, &a).unwrap();
        let mut bus = ProbeBus::new();
        publish_interval(&mut bus, &flows, 4, &params).unwrap();
        for id in net.ids() {
            let p = delivered_power(&bus, &net, id, 4, &params).unwrap();
            assert_relative_eq!(p, a[id], epsilon = 1e-9);
        }
    }

    #[test]
    fn missing_reference_is_reported() {
        let net = fixtures::five_bus();
        let empty = ReferenceSchedule::new(BTreeMap::new(), 0);
        assert!(matches!(
            interval_actuals(&net, &empty, &[], 1),
            Err(SynthError::MissingReference(_))
        ));
    }
}

//! Case-file parsing and network validation.
//!
//! A case file is a TOML document with three sections:
//!
//! ```toml
//! [system]
//! base_mva = 100.0
//! slack = "pi1"
//!
//! [[prosumers]]
//! id = "pi1"
//! c2 = 0.05
//! c1 = 6.0
//! c0 = 0.0
//! p_min = 0.0
//! p_max = 200.0
//! q_min = -100.0
//! q_max = 100.0
//! v_min = 0.95
//! v_max = 1.05
//! load_p = 0.0
//! load_q = 0.0
//!
//! [[lines]]
//! from = "pi1"
//! to = "pi2"
//! g = 5.0
//! b = -15.0
//! ```
//!
//! Powers are MW/MVAr, voltages and admittances per-unit on `base_mva`.
//! Unknown fields are rejected. Lines accept an optional `mva_limit`
//! rating that is carried through but never enforced.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use super::{Admittance, Bounds, CostCurve, Network, Prosumer, ProsumerId, TieLine};

/// Validation failures for case files and programmatic construction. Each
/// variant names the offending entity.
#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("case file does not match the schema: {0}")]
    Schema(String),
    #[error("system base_mva must be positive and finite, got {0}")]
    BadBase(f64),
    #[error("duplicate prosumer id `{0}`")]
    DuplicateProsumer(ProsumerId),
    #[error("prosumer `{id}`: field `{field}` is not finite")]
    NonFinite { id: ProsumerId, field: String },
    #[error("prosumer `{id}`: {which} bounds have min {min} > max {max}")]
    BadBounds {
        id: ProsumerId,
        which: String,
        min: f64,
        max: f64,
    },
    #[error("no slack bus: `{0}` is not a declared prosumer")]
    SlackUnknown(ProsumerId),
    #[error("no slack bus declared")]
    NoSlack,
    #[error("multiple slack buses: `{0}` and `{1}`")]
    MultipleSlacks(ProsumerId, ProsumerId),
    #[error("line `{from}`-`{to}`: endpoint `{unknown}` is not a declared prosumer")]
    UnknownEndpoint {
        from: ProsumerId,
        to: ProsumerId,
        unknown: ProsumerId,
    },
    #[error("line `{0}`-`{0}`: endpoints must differ")]
    SelfLoop(ProsumerId),
    #[error("line `{0}`-`{1}`: admittance is zero; adjacency requires y != 0")]
    ZeroAdmittance(ProsumerId, ProsumerId),
    #[error("line `{0}`-`{1}`: admittance is not finite")]
    NonFiniteAdmittance(ProsumerId, ProsumerId),
    #[error("duplicate line between `{0}` and `{1}`")]
    DuplicateLine(ProsumerId, ProsumerId),
    #[error("network is disconnected: prosumer `{0}` is unreachable from the slack")]
    Disconnected(ProsumerId),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    system: SystemSection,
    prosumers: Vec<ProsumerEntry>,
    #[serde(default)]
    lines: Vec<LineEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSection {
    base_mva: f64,
    slack: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProsumerEntry {
    id: String,
    c2: f64,
    c1: f64,
    c0: f64,
    p_min: f64,
    p_max: f64,
    q_min: f64,
    q_max: f64,
    v_min: f64,
    v_max: f64,
    load_p: f64,
    load_q: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineEntry {
    from: String,
    to: String,
    g: f64,
    b: f64,
    mva_limit: Option<f64>,
}

/// Parses a case file into a validated [`Network`].
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let case: CaseFile = toml::from_str(text).map_err(|e| CaseError::Schema(e.to_string()))?;
    let slack_id = ProsumerId::new(case.system.slack.clone());
    let mut slack_seen = false;
    let prosumers: Vec<Prosumer> = case
        .prosumers
        .into_iter()
        .map(|e| {
            let id = ProsumerId::new(e.id);
            let is_slack = id == slack_id;
            slack_seen |= is_slack;
            Prosumer {
                cost: CostCurve::new(e.c2, e.c1, e.c0),
                p_bounds: Bounds::new(e.p_min, e.p_max),
                q_bounds: Bounds::new(e.q_min, e.q_max),
                v_bounds: Bounds::new(e.v_min, e.v_max),
                load_p: e.load_p,
                load_q: e.load_q,
                is_slack,
                id,
            }
        })
        .collect();
    if !slack_seen {
        return Err(CaseError::SlackUnknown(slack_id));
    }
    let lines: Vec<TieLine> = case
        .lines
        .into_iter()
        .map(|e| {
            let mut l = TieLine::new(
                ProsumerId::new(e.from),
                ProsumerId::new(e.to),
                Admittance::new(e.g, e.b),
            );
            l.mva_limit = e.mva_limit;
            l
        })
        .collect();
    validate(prosumers, lines, case.system.base_mva)
}

/// Full invariant check shared by [`parse_case`] and [`Network::new`].
pub(crate) fn validate(
    prosumers: Vec<Prosumer>,
    lines: Vec<TieLine>,
    base_mva: f64,
) -> Result<Network, CaseError> {
    if !(base_mva.is_finite() && base_mva > 0.0) {
        return Err(CaseError::BadBase(base_mva));
    }

    let mut map = BTreeMap::new();
    let mut slack: Option<ProsumerId> = None;
    for p in prosumers {
        check_prosumer(&p)?;
        if p.is_slack {
            if let Some(first) = &slack {
                return Err(CaseError::MultipleSlacks(first.clone(), p.id.clone()));
            }
            slack = Some(p.id.clone());
        }
        if map.insert(p.id.clone(), p.clone()).is_some() {
            return Err(CaseError::DuplicateProsumer(p.id));
        }
    }
    let slack = slack.ok_or(CaseError::NoSlack)?;

    let mut seen_pairs = BTreeSet::new();
    for l in &lines {
        if l.a == l.b {
            return Err(CaseError::SelfLoop(l.a.clone()));
        }
        for end in [&l.a, &l.b] {
            if !map.contains_key(end) {
                return Err(CaseError::UnknownEndpoint {
                    from: l.a.clone(),
                    to: l.b.clone(),
                    unknown: end.clone(),
                });
            }
        }
        if !(l.admittance.g.is_finite() && l.admittance.b.is_finite()) {
            return Err(CaseError::NonFiniteAdmittance(l.a.clone(), l.b.clone()));
        }
        if l.admittance.is_zero() {
            return Err(CaseError::ZeroAdmittance(l.a.clone(), l.b.clone()));
        }
        if !seen_pairs.insert((l.a.clone(), l.b.clone())) {
            return Err(CaseError::DuplicateLine(l.a.clone(), l.b.clone()));
        }
    }

    // Reachability from the slack; any unreached id names the violation.
    let mut seen = BTreeSet::new();
    let mut stack = vec![slack];
    while let Some(id) = stack.pop() {
        if !seen.insert(id.clone()) {
            continue;
        }
        for l in &lines {
            if let Some(other) = l.other(&id) {
                if !seen.contains(other) {
                    stack.push(other.clone());
                }
            }
        }
    }
    if let Some(unreached) = map.keys().find(|id| !seen.contains(*id)) {
        return Err(CaseError::Disconnected(unreached.clone()));
    }

    Ok(Network::from_validated(map, lines, base_mva))
}

fn check_prosumer(p: &Prosumer) -> Result<(), CaseError> {
    let fields = [
        ("c2", p.cost.c2),
        ("c1", p.cost.c1),
        ("c0", p.cost.c0),
        ("p_min", p.p_bounds.min),
        ("p_max", p.p_bounds.max),
        ("q_min", p.q_bounds.min),
        ("q_max", p.q_bounds.max),
        ("v_min", p.v_bounds.min),
        ("v_max", p.v_bounds.max),
        ("load_p", p.load_p),
        ("load_q", p.load_q),
    ];
    for (name, v) in fields {
        if !v.is_finite() {
            return Err(CaseError::NonFinite {
                id: p.id.clone(),
                field: name.to_owned(),
            });
        }
    }
    for (which, b) in [
        ("active power", &p.p_bounds),
        ("reactive power", &p.q_bounds),
        ("voltage", &p.v_bounds),
    ] {
        if b.min > b.max {
            return Err(CaseError::BadBounds {
                id: p.id.clone(),
                which: which.to_owned(),
                min: b.min,
                max: b.max,
            });
        }
    }
    if p.v_bounds.min <= 0.0 {
        return Err(CaseError::BadBounds {
            id: p.id.clone(),
            which: "voltage (must be positive)".to_owned(),
            min: p.v_bounds.min,
            max: p.v_bounds.max,
        });
    }
    Ok(())
}

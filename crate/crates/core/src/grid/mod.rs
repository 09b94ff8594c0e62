//! Prosumer network model: nodes, tie-lines, auxiliary-bus decoupling, and
//! topology edits.
//!
//! A [`Network`] is an undirected graph of [`Prosumer`]s joined by
//! [`TieLine`]s. Each prosumer abstracts a substation-level mix of
//! generation, load and storage behind a single bus. All admittances are
//! per-unit on the network MVA base; powers cross the API boundary in MW
//! and MVAr.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

mod case;

pub use case::{parse_case, CaseError};

/// Identifier of a prosumer node. Ordering is lexicographic and is used
/// everywhere deterministic iteration matters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProsumerId(pub String);

impl ProsumerId {
    pub fn new(id: impl Into<String>) -> Self {
        ProsumerId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProsumerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ProsumerId {
    fn from(s: &str) -> Self {
        ProsumerId(s.to_owned())
    }
}

/// Complex line admittance, per-unit: conductance `g` and susceptance `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Admittance {
    pub g: f64,
    pub b: f64,
}

impl Admittance {
    pub fn new(g: f64, b: f64) -> Self {
        Admittance { g, b }
    }

    pub fn as_complex(&self) -> Complex64 {
        Complex64::new(self.g, self.b)
    }

    pub fn is_zero(&self) -> bool {
        self.g == 0.0 && self.b == 0.0
    }

    pub fn scale(&self, factor: f64) -> Admittance {
        Admittance::new(self.g * factor, self.b * factor)
    }

    /// Series combination of two admittances: `y1*y2 / (y1 + y2)`.
    pub fn series(a: Admittance, b: Admittance) -> Admittance {
        let y = a.as_complex() * b.as_complex() / (a.as_complex() + b.as_complex());
        Admittance::new(y.re, y.im)
    }
}

/// Quadratic production cost curve `c2*P^2 + c1*P + c0` with P in MW,
/// cost in currency units per hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn new(c2: f64, c1: f64, c0: f64) -> Self {
        CostCurve { c2, c1, c0 }
    }

    pub fn zero() -> Self {
        CostCurve::new(0.0, 0.0, 0.0)
    }

    pub fn evaluate(&self, p_mw: f64) -> f64 {
        (self.c2 * p_mw + self.c1) * p_mw + self.c0
    }

    /// Marginal cost dC/dP at `p_mw`, in currency per MWh.
    pub fn marginal(&self, p_mw: f64) -> f64 {
        2.0 * self.c2 * p_mw + self.c1
    }
}

/// Closed interval bound pair. Invariant `min <= max` is checked at
/// network construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn new(min: f64, max: f64) -> Self {
        Bounds { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }
}

/// A prosumer node: dispatchable production behind a bus together with a
/// fixed local demand.
///
/// `p_bounds`/`q_bounds` bound the dispatchable production; the node's net
/// tie-line export is production minus `load_p`/`load_q`. Net power follows
/// the generation-positive sign convention: a load-dominant node has a
/// negative net power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prosumer {
    pub id: ProsumerId,
    /// Cost of dispatchable production.
    pub cost: CostCurve,
    /// Active production bounds, MW.
    pub p_bounds: Bounds,
    /// Reactive production bounds, MVAr.
    pub q_bounds: Bounds,
    /// Bus voltage magnitude bounds, per-unit.
    pub v_bounds: Bounds,
    /// Fixed local demand (P MW, Q MVAr).
    pub load_p: f64,
    pub load_q: f64,
    /// Slack designation; exactly one per network. The slack bus holds
    /// V = 1 pu, delta = 0 and absorbs the system power imbalance.
    pub is_slack: bool,
}

/// Tie-line between two prosumers. Endpoints are stored in id order so the
/// pair is canonical; the admittance must be nonzero (adjacency is defined
/// by nonzero admittance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieLine {
    pub a: ProsumerId,
    pub b: ProsumerId,
    pub admittance: Admittance,
    /// Apparent-power rating, MVA. Carried through parsing but not
    /// enforced by any solver in this crate.
    pub mva_limit: Option<f64>,
}

impl TieLine {
    /// Builds a tie-line with canonicalized endpoint order.
    pub fn new(x: ProsumerId, y: ProsumerId, admittance: Admittance) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        TieLine {
            a,
            b,
            admittance,
            mva_limit: None,
        }
    }

    pub fn key(&self) -> (&ProsumerId, &ProsumerId) {
        (&self.a, &self.b)
    }

    pub fn touches(&self, id: &ProsumerId) -> bool {
        &self.a == id || &self.b == id
    }

    /// The endpoint opposite to `id`, if `id` is an endpoint.
    pub fn other(&self, id: &ProsumerId) -> Option<&ProsumerId> {
        if &self.a == id {
            Some(&self.b)
        } else if &self.b == id {
            Some(&self.a)
        } else {
            None
        }
    }
}

/// The prosumer network. Immutable after construction; topology edits
/// produce new values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    prosumers: BTreeMap<ProsumerId, Prosumer>,
    lines: Vec<TieLine>,
    base_mva: f64,
}

/// Errors raised by topology queries and edits.
#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("unknown prosumer id `{0}`")]
    UnknownProsumer(ProsumerId),
    #[error("cannot isolate the slack bus `{0}`")]
    IsolateSlack(ProsumerId),
}

impl Network {
    /// Validates and builds a network. Checks every invariant the case
    /// parser relies on; see [`CaseError`] for the failure taxonomy.
    pub fn new(
        prosumers: Vec<Prosumer>,
        lines: Vec<TieLine>,
        base_mva: f64,
    ) -> Result<Self, CaseError> {
        case::validate(prosumers, lines, base_mva)
    }

    pub(crate) fn from_validated(
        prosumers: BTreeMap<ProsumerId, Prosumer>,
        lines: Vec<TieLine>,
        base_mva: f64,
    ) -> Self {
        Network {
            prosumers,
            lines,
            base_mva,
        }
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn prosumer_count(&self) -> usize {
        self.prosumers.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn prosumer(&self, id: &ProsumerId) -> Result<&Prosumer, GridError> {
        self.prosumers
            .get(id)
            .ok_or_else(|| GridError::UnknownProsumer(id.clone()))
    }

    pub fn contains(&self, id: &ProsumerId) -> bool {
        self.prosumers.contains_key(id)
    }

    /// Prosumers in id order.
    pub fn prosumers(&self) -> impl Iterator<Item = &Prosumer> {
        self.prosumers.values()
    }

    /// Prosumer ids in id order.
    pub fn ids(&self) -> impl Iterator<Item = &ProsumerId> {
        self.prosumers.keys()
    }

    pub fn lines(&self) -> &[TieLine] {
        &self.lines
    }

    pub fn slack(&self) -> &Prosumer {
        self.prosumers
            .values()
            .find(|p| p.is_slack)
            .expect("validated network has a slack")
    }

    pub fn line_between(&self, a: &ProsumerId, b: &ProsumerId) -> Option<&TieLine> {
        self.lines
            .iter()
            .find(|l| l.touches(a) && l.touches(b) && a != b)
    }

    /// Direct neighbors of `i`: every prosumer sharing a tie-line with it.
    pub fn neighbors(&self, i: &ProsumerId) -> Result<BTreeSet<ProsumerId>, GridError> {
        if !self.contains(i) {
            return Err(GridError::UnknownProsumer(i.clone()));
        }
        Ok(self
            .lines
            .iter()
            .filter_map(|l| l.other(i).cloned())
            .collect())
    }

    /// Neighbors plus neighbors-of-neighbors, excluding `i` itself.
    pub fn two_hop(&self, i: &ProsumerId) -> Result<BTreeSet<ProsumerId>, GridError> {
        let direct = self.neighbors(i)?;
        let mut reach = direct.clone();
        for j in &direct {
            reach.extend(self.neighbors(j)?);
        }
        reach.remove(i);
        Ok(reach)
    }

    /// Whether the graph is connected. An empty or single-node network
    /// counts as connected.
    pub fn is_connected(&self) -> bool {
        let Some(start) = self.prosumers.keys().next() else {
            return true;
        };
        let mut seen = BTreeSet::new();
        let mut stack = vec![start.clone()];
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                continue;
            }
            for l in &self.lines {
                if let Some(other) = l.other(&id) {
                    if !seen.contains(other) {
                        stack.push(other.clone());
                    }
                }
            }
        }
        seen.len() == self.prosumers.len()
    }

    /// Removes prosumer `i` and all its tie-lines, producing a new network.
    ///
    /// The slack cannot be removed. If the remainder is disconnected the
    /// outcome carries an explicit partition warning rather than failing:
    /// the caller decides how to treat islands.
    pub fn isolate(&self, i: &ProsumerId) -> Result<IsolationOutcome, GridError> {
        let victim = self.prosumer(i)?;
        if victim.is_slack {
            return Err(GridError::IsolateSlack(i.clone()));
        }
        let mut prosumers = self.prosumers.clone();
        prosumers.remove(i);
        let lines: Vec<TieLine> = self
            .lines
            .iter()
            .filter(|l| !l.touches(i))
            .cloned()
            .collect();
        let network = Network::from_validated(prosumers, lines, self.base_mva);
        let partition_warning = if network.is_connected() {
            None
        } else {
            Some(format!(
                "removing `{i}` disconnects the network: {} prosumers no longer form a single component",
                network.prosumer_count()
            ))
        };
        Ok(IsolationOutcome {
            network,
            partition_warning,
        })
    }

    /// Total fixed active demand, MW.
    pub fn total_load_p(&self) -> f64 {
        self.prosumers.values().map(|p| p.load_p).sum()
    }
}

/// Result of removing a prosumer: the reduced network plus an optional
/// warning when the remainder is no longer connected.
#[derive(Debug, Clone)]
pub struct IsolationOutcome {
    pub network: Network,
    pub partition_warning: Option<String>,
}

/// One auxiliary-bus pair inserted on a tie-line `(i, j)`: bus `b_ij`
/// attached to `i` and bus `b_ji` attached to `j`, both through the
/// attachment admittance `2*y_ij`. The series combination of the two
/// attachments reproduces the original line admittance.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPair {
    pub i: ProsumerId,
    pub j: ProsumerId,
    /// Original tie-line admittance `y_ij`.
    pub line: Admittance,
    /// Attachment admittance `2*y_ij`, identical on both sides.
    pub attachment: Admittance,
}

impl AuxPair {
    pub fn key(&self) -> (&ProsumerId, &ProsumerId) {
        (&self.i, &self.j)
    }
}

/// A network with every tie-line split by an auxiliary-bus pair, the form
/// consumed by the distributed OPF. Not itself decouplable: there is no
/// operation from `DecoupledNetwork` back into `decouple`.
#[derive(Debug, Clone)]
pub struct DecoupledNetwork {
    base: Network,
    pairs: Vec<AuxPair>,
}

impl DecoupledNetwork {
    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn pairs(&self) -> &[AuxPair] {
        &self.pairs
    }

    /// Attachment admittances seen from prosumer `i`, keyed by the
    /// neighbor on the far side of each auxiliary pair.
    pub fn attachments_of(&self, i: &ProsumerId) -> BTreeMap<ProsumerId, Admittance> {
        let mut out = BTreeMap::new();
        for p in &self.pairs {
            if &p.i == i {
                out.insert(p.j.clone(), p.attachment);
            } else if &p.j == i {
                out.insert(p.i.clone(), p.attachment);
            }
        }
        out
    }
}

/// Splits every tie-line with an auxiliary-bus pair; attachment admittance
/// is twice the line admittance on both sides.
pub fn decouple(net: &Network) -> DecoupledNetwork {
    let pairs = net
        .lines()
        .iter()
        .map(|l| AuxPair {
            i: l.a.clone(),
            j: l.b.clone(),
            line: l.admittance,
            attachment: l.admittance.scale(2.0),
        })
        .collect();
    DecoupledNetwork {
        base: net.clone(),
        pairs,
    }
}

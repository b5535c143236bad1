//! Buses, branches and the complex nodal admittance matrix.
//!
//! A [`Network`] is validated once at construction and is immutable
//! afterwards. Branches use the nominal π model: a series impedance
//! `r + jx` with half of the line charging susceptance at each end.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default system base for converting MW/MVAr to per-unit.
pub const DEFAULT_BASE_MVA: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    #[error("bus ids must be contiguous 1..={expected}; found {found}")]
    NonContiguousBusIds { expected: usize, found: usize },
    #[error("branch {index} references missing bus {bus}")]
    DanglingBranchEndpoint { index: usize, bus: usize },
    #[error("branch graph is disconnected ({reached} of {total} buses reachable from bus 1)")]
    DisconnectedGraph { reached: usize, total: usize },
    #[error("network has no slack bus")]
    NoSlackBus,
    #[error("network has {0} slack buses; exactly one is required")]
    MultipleSlackBuses(usize),
    #[error("network has no buses")]
    Empty,
    #[error("invalid bus {bus}: {reason}")]
    InvalidBus { bus: usize, reason: String },
    #[error("invalid branch {index} ({from}-{to}): {reason}")]
    InvalidBranch {
        index: usize,
        from: usize,
        to: usize,
        reason: String,
    },
    #[error("branch {index} ({from}-{to}) has zero impedance")]
    ZeroImpedanceBranch { index: usize, from: usize, to: usize },
    #[error("base MVA must be positive and finite, got {0}")]
    InvalidBase(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

impl BusKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "slack" | "ref" | "swing" => Some(BusKind::Slack),
            "pv" => Some(BusKind::PV),
            "pq" => Some(BusKind::PQ),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BusKind::Slack => "slack",
            BusKind::PV => "pv",
            BusKind::PQ => "pq",
        }
    }
}

/// One row of the bus table as it appears in a case file, before the
/// bus kind has been decided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusRow {
    pub id: usize,
    pub v_setpoint: f64,
    pub p_gen: f64,
    pub q_gen: f64,
    pub p_load: f64,
    pub q_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// 1-based bus number.
    pub id: usize,
    pub kind: BusKind,
    /// Voltage setpoint in pu. Only a starting hint at PQ buses.
    pub v_setpoint: f64,
    /// MW
    pub p_gen: f64,
    /// MVAr
    pub q_gen: f64,
    /// MW
    pub p_load: f64,
    /// MVAr
    pub q_load: f64,
}

impl Bus {
    pub fn from_row(row: &BusRow, kind: BusKind) -> Self {
        Bus {
            id: row.id,
            kind,
            v_setpoint: row.v_setpoint,
            p_gen: row.p_gen,
            q_gen: row.q_gen,
            p_load: row.p_load,
            q_load: row.q_load,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    /// Series resistance, pu.
    pub resistance: f64,
    /// Series reactance, pu.
    pub reactance: f64,
    /// Half of the total line charging susceptance, pu.
    pub half_charging: f64,
}

impl Branch {
    /// Series admittance `1 / (r + jx)`.
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.resistance, self.reactance).inv()
    }
}

/// Decide bus kinds for rows of a bus table that carries no kind column.
///
/// Bus 1 is the slack. Any other bus with a non-unity setpoint that also
/// produces power (`p_gen > 0` or `q_gen != 0`) is PV. Everything else is
/// PQ.
pub fn infer_bus_kinds(rows: &[BusRow]) -> Vec<BusKind> {
    rows.iter()
        .map(|row| {
            if row.id == 1 {
                BusKind::Slack
            } else if row.v_setpoint != 1.0 && (row.p_gen > 0.0 || row.q_gen != 0.0) {
                BusKind::PV
            } else {
                BusKind::PQ
            }
        })
        .collect()
}

/// Net injection `(P, Q)` of a bus in per-unit.
pub fn net_injection_pu(bus: &Bus, base_mva: f64) -> (f64, f64) {
    (
        (bus.p_gen - bus.p_load) / base_mva,
        (bus.q_gen - bus.q_load) / base_mva,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    base_mva: f64,
    slack: usize,
}

impl Network {
    /// Validate and assemble a network. Buses may be given in any order;
    /// they are stored sorted by id.
    pub fn new(
        mut buses: Vec<Bus>,
        branches: Vec<Branch>,
        base_mva: f64,
    ) -> Result<Self, NetworkError> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(NetworkError::InvalidBase(base_mva));
        }
        if buses.is_empty() {
            return Err(NetworkError::Empty);
        }
        buses.sort_by_key(|b| b.id);
        for pair in buses.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(NetworkError::DuplicateBusId(pair[0].id));
            }
        }
        let n = buses.len();
        for (k, bus) in buses.iter().enumerate() {
            if bus.id != k + 1 {
                return Err(NetworkError::NonContiguousBusIds {
                    expected: n,
                    found: bus.id,
                });
            }
            validate_bus(bus)?;
        }

        for (index, br) in branches.iter().enumerate() {
            for bus in [br.from_bus, br.to_bus] {
                if bus == 0 || bus > n {
                    return Err(NetworkError::DanglingBranchEndpoint { index, bus });
                }
            }
            validate_branch(index, br)?;
        }

        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(k, _)| k)
            .collect();
        let slack = match slacks.len() {
            0 => return Err(NetworkError::NoSlackBus),
            1 => slacks[0],
            k => return Err(NetworkError::MultipleSlackBuses(k)),
        };

        let reached = reachable_count(n, &branches);
        if reached != n {
            return Err(NetworkError::DisconnectedGraph { reached, total: n });
        }

        Ok(Network {
            buses,
            branches,
            base_mva,
            slack,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Zero-based index of the slack bus.
    pub fn slack_index(&self) -> usize {
        self.slack
    }

    /// Number of estimator state variables: every angle except the slack's
    /// plus every magnitude.
    pub fn state_dim(&self) -> usize {
        2 * self.buses.len() - 1
    }

    /// Specified net injections of every bus in pu.
    pub fn injections_pu(&self) -> Vec<(f64, f64)> {
        self.buses
            .iter()
            .map(|b| net_injection_pu(b, self.base_mva))
            .collect()
    }

    /// Copy of this network with every load multiplied by `scale[k]` at
    /// bus `k`.
    pub fn with_load_scale(&self, scale: impl Fn(usize) -> f64) -> Network {
        let mut out = self.clone();
        for (k, bus) in out.buses.iter_mut().enumerate() {
            let s = scale(k);
            bus.p_load *= s;
            bus.q_load *= s;
        }
        out
    }
}

/// Alias matching the operation name used throughout the docs.
pub fn build_network(
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    base_mva: f64,
) -> Result<Network, NetworkError> {
    Network::new(buses, branches, base_mva)
}

fn validate_bus(bus: &Bus) -> Result<(), NetworkError> {
    let bad = |reason: &str| {
        Err(NetworkError::InvalidBus {
            bus: bus.id,
            reason: reason.to_string(),
        })
    };
    if !(bus.v_setpoint.is_finite() && bus.v_setpoint > 0.0) {
        return bad("voltage setpoint must be positive");
    }
    if ![bus.p_gen, bus.q_gen, bus.p_load, bus.q_load]
        .iter()
        .all(|v| v.is_finite())
    {
        return bad("power values must be finite");
    }
    Ok(())
}

fn validate_branch(index: usize, br: &Branch) -> Result<(), NetworkError> {
    let bad = |reason: &str| {
        Err(NetworkError::InvalidBranch {
            index,
            from: br.from_bus,
            to: br.to_bus,
            reason: reason.to_string(),
        })
    };
    if br.from_bus == br.to_bus {
        return bad("from and to bus are the same");
    }
    if ![br.resistance, br.reactance, br.half_charging]
        .iter()
        .all(|v| v.is_finite())
    {
        return bad("parameters must be finite");
    }
    if br.resistance < 0.0 {
        return bad("resistance must be non-negative");
    }
    if br.half_charging < 0.0 {
        return bad("charging susceptance must be non-negative");
    }
    if br.reactance == 0.0 {
        if br.resistance == 0.0 {
            return Err(NetworkError::ZeroImpedanceBranch {
                index,
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        return bad("reactance must be nonzero");
    }
    Ok(())
}

fn reachable_count(n: usize, branches: &[Branch]) -> usize {
    let mut adj = vec![Vec::new(); n];
    for br in branches {
        adj[br.from_bus - 1].push(br.to_bus - 1);
        adj[br.to_bus - 1].push(br.from_bus - 1);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(k) = stack.pop() {
        for &j in &adj[k] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count
}

/// Complex bus admittance matrix, `Y = G + jB`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    entries: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[(i, j)]
    }
}

pub fn build_ybus(network: &Network) -> Result<AdmittanceMatrix, NetworkError> {
    let n = network.bus_count();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for (index, br) in network.branches().iter().enumerate() {
        if br.resistance == 0.0 && br.reactance == 0.0 {
            return Err(NetworkError::ZeroImpedanceBranch {
                index,
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        let (f, t) = (br.from_bus - 1, br.to_bus - 1);
        let ys = br.series_admittance();
        let shunt = Complex64::new(0.0, br.half_charging);
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
        y[(f, f)] += ys + shunt;
        y[(t, t)] += ys + shunt;
    }
    Ok(AdmittanceMatrix { entries: y })
}

//! Case bundles: a directory holding `buses.csv`, `lines.csv` and an
//! optional `case.json`.
//!
//! ```text
//! buses.csv  bus,vsp_pu,pg_mw,qg_mvar,pl_mw,ql_mvar[,kind]
//! lines.csv  from_bus,to_bus,r_pu,x_pu,b_half_pu
//! case.json  {"format_version": "1", "base_mva": 100.0,
//!             "bus_load_scale": {"3": 1.05}}
//! ```
//!
//! When the `kind` column is absent (or a cell is empty) bus kinds are
//! inferred with [`infer_bus_kinds`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    infer_bus_kinds, Bus, BusKind, BusRow, Branch, Network, NetworkError, DEFAULT_BASE_MVA,
};

pub const FORMAT_VERSION: &str = "1";
pub const BUSES_FILE: &str = "buses.csv";
pub const LINES_FILE: &str = "lines.csv";
pub const META_FILE: &str = "case.json";

const BUS_COLUMNS: [&str; 6] = ["bus", "vsp_pu", "pg_mw", "qg_mvar", "pl_mw", "ql_mvar"];
const LINE_COLUMNS: [&str; 5] = ["from_bus", "to_bus", "r_pu", "x_pu", "b_half_pu"];

/// The IEEE 14-bus data shipped with the crate.
pub mod ieee14 {
    pub const NAME: &str = "ieee14";
    pub const BUSES_CSV: &str = include_str!("../cases/ieee14/buses.csv");
    pub const LINES_CSV: &str = include_str!("../cases/ieee14/lines.csv");
    pub const CASE_JSON: &str = include_str!("../cases/ieee14/case.json");
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("{file}:{line}: column `{column}`: {reason}")]
    Parse {
        file: String,
        line: u64,
        column: String,
        reason: String,
    },
    #[error("invalid case: {0}")]
    Validation(#[from] NetworkError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CaseError {
    fn parse(file: &str, line: u64, column: &str, reason: impl Into<String>) -> Self {
        CaseError::Parse {
            file: file.to_string(),
            line,
            column: column.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    #[serde(default = "default_version")]
    pub format_version: String,
    #[serde(default = "default_base")]
    pub base_mva: f64,
    /// Extra per-bus load multipliers keyed by bus id, applied on top of
    /// the snapshot scale.
    #[serde(default)]
    pub bus_load_scale: BTreeMap<String, f64>,
}

fn default_version() -> String {
    FORMAT_VERSION.to_string()
}

fn default_base() -> f64 {
    DEFAULT_BASE_MVA
}

impl Default for CaseMeta {
    fn default() -> Self {
        CaseMeta {
            format_version: default_version(),
            base_mva: DEFAULT_BASE_MVA,
            bus_load_scale: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub network: Network,
    /// Directory the case came from, or `None` for the built-in bundle.
    pub source: Option<PathBuf>,
    pub format_version: String,
    /// Per-bus load multiplier (indexed by bus position); 1.0 by default.
    pub bus_load_scale: Vec<f64>,
}

impl CaseBundle {
    pub fn ieee14() -> Self {
        parse_case(ieee14::BUSES_CSV, ieee14::LINES_CSV, Some(ieee14::CASE_JSON))
            .expect("shipped ieee14 case is valid")
    }
}

/// Load a case directory. The name `ieee14` falls back to the built-in
/// bundle when no such directory exists.
pub fn load_case(dir: impl AsRef<Path>) -> Result<CaseBundle, CaseError> {
    let dir = dir.as_ref();
    if !dir.is_dir() && dir.as_os_str() == ieee14::NAME {
        return Ok(CaseBundle::ieee14());
    }
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|source| CaseError::Io { path, source })
    };
    let buses = read(BUSES_FILE)?;
    let lines = read(LINES_FILE)?;
    let meta = if dir.join(META_FILE).is_file() {
        Some(read(META_FILE)?)
    } else {
        None
    };
    let mut bundle = parse_case(&buses, &lines, meta.as_deref())?;
    bundle.source = Some(dir.to_path_buf());
    Ok(bundle)
}

pub fn parse_case(
    buses_csv: &str,
    lines_csv: &str,
    case_json: Option<&str>,
) -> Result<CaseBundle, CaseError> {
    let meta: CaseMeta = match case_json {
        Some(text) => serde_json::from_str(text).map_err(|e| {
            CaseError::parse(META_FILE, e.line() as u64, "-", e.to_string())
        })?,
        None => CaseMeta::default(),
    };
    if meta.format_version != FORMAT_VERSION {
        return Err(CaseError::parse(
            META_FILE,
            1,
            "format_version",
            format!("unsupported format version `{}`", meta.format_version),
        ));
    }

    let (rows, kinds) = parse_buses(buses_csv)?;
    let inferred = infer_bus_kinds(&rows);
    let buses: Vec<Bus> = rows
        .iter()
        .zip(kinds.iter().zip(inferred))
        .map(|(row, (explicit, guess))| Bus::from_row(row, explicit.unwrap_or(guess)))
        .collect();
    let branches = parse_lines(lines_csv)?;
    let network = Network::new(buses, branches, meta.base_mva)?;

    let mut bus_load_scale = vec![1.0; network.bus_count()];
    for (key, &scale) in &meta.bus_load_scale {
        let bus: usize = key.parse().map_err(|_| {
            CaseError::parse(META_FILE, 1, "bus_load_scale", format!("bad bus id `{key}`"))
        })?;
        if bus == 0 || bus > network.bus_count() {
            return Err(CaseError::parse(
                META_FILE,
                1,
                "bus_load_scale",
                format!("bus {bus} does not exist"),
            ));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(CaseError::parse(
                META_FILE,
                1,
                "bus_load_scale",
                format!("scale for bus {bus} must be positive"),
            ));
        }
        bus_load_scale[bus - 1] = scale;
    }

    Ok(CaseBundle {
        network,
        source: None,
        format_version: meta.format_version,
        bus_load_scale,
    })
}

struct Table {
    file: &'static str,
    columns: Vec<(String, usize)>,
    records: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(file: &'static str, text: &str, required: &[&str], optional: &[&str]) -> Result<Self, CaseError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| CaseError::parse(file, 1, "-", e.to_string()))?
            .clone();
        let mut columns = Vec::new();
        for &name in required.iter().chain(optional) {
            match headers.iter().position(|h| h == name) {
                Some(idx) => columns.push((name.to_string(), idx)),
                None if required.contains(&name) => {
                    return Err(CaseError::parse(file, 1, name, "missing column"))
                }
                None => {}
            }
        }
        if let Some(extra) = headers
            .iter()
            .find(|h| !required.contains(h) && !optional.contains(h))
        {
            return Err(CaseError::parse(file, 1, extra, "unknown column"));
        }
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                CaseError::parse(file, line, "-", e.to_string())
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            records.push((line, rec));
        }
        Ok(Table {
            file,
            columns,
            records,
        })
    }

    fn cell<'a>(&self, rec: &'a csv::StringRecord, column: &str) -> Option<&'a str> {
        self.columns
            .iter()
            .find(|(name, _)| name == column)
            .and_then(|(_, idx)| rec.get(*idx))
    }

    fn number(&self, line: u64, rec: &csv::StringRecord, column: &str) -> Result<f64, CaseError> {
        let raw = self
            .cell(rec, column)
            .ok_or_else(|| CaseError::parse(self.file, line, column, "missing value"))?;
        let v: f64 = raw
            .parse()
            .map_err(|_| CaseError::parse(self.file, line, column, format!("`{raw}` is not a number")))?;
        if !v.is_finite() {
            return Err(CaseError::parse(self.file, line, column, "value must be finite"));
        }
        Ok(v)
    }

    fn id(&self, line: u64, rec: &csv::StringRecord, column: &str) -> Result<usize, CaseError> {
        let raw = self
            .cell(rec, column)
            .ok_or_else(|| CaseError::parse(self.file, line, column, "missing value"))?;
        raw.parse().map_err(|_| {
            CaseError::parse(self.file, line, column, format!("`{raw}` is not a bus id"))
        })
    }
}

fn parse_buses(text: &str) -> Result<(Vec<BusRow>, Vec<Option<BusKind>>), CaseError> {
    let table = Table::read(BUSES_FILE, text, &BUS_COLUMNS, &["kind"])?;
    let mut rows = Vec::with_capacity(table.records.len());
    let mut kinds = Vec::with_capacity(table.records.len());
    for (line, rec) in &table.records {
        let line = *line;
        let row = BusRow {
            id: table.id(line, rec, "bus")?,
            v_setpoint: table.number(line, rec, "vsp_pu")?,
            p_gen: table.number(line, rec, "pg_mw")?,
            q_gen: table.number(line, rec, "qg_mvar")?,
            p_load: table.number(line, rec, "pl_mw")?,
            q_load: table.number(line, rec, "ql_mvar")?,
        };
        if row.v_setpoint <= 0.0 {
            return Err(CaseError::parse(BUSES_FILE, line, "vsp_pu", "voltage setpoint must be positive"));
        }
        let kind = match table.cell(rec, "kind") {
            None | Some("") => None,
            Some(raw) => Some(BusKind::parse(raw).ok_or_else(|| {
                CaseError::parse(BUSES_FILE, line, "kind", format!("unknown bus kind `{raw}`"))
            })?),
        };
        rows.push(row);
        kinds.push(kind);
    }
    Ok((rows, kinds))
}

fn parse_lines(text: &str) -> Result<Vec<Branch>, CaseError> {
    let table = Table::read(LINES_FILE, text, &LINE_COLUMNS, &[])?;
    table
        .records
        .iter()
        .map(|(line, rec)| {
            let line = *line;
            let br = Branch {
                from_bus: table.id(line, rec, "from_bus")?,
                to_bus: table.id(line, rec, "to_bus")?,
                resistance: table.number(line, rec, "r_pu")?,
                reactance: table.number(line, rec, "x_pu")?,
                half_charging: table.number(line, rec, "b_half_pu")?,
            };
            if br.reactance == 0.0 && br.resistance == 0.0 {
                return Err(CaseError::parse(LINES_FILE, line, "x_pu", "branch has zero impedance"));
            }
            Ok(br)
        })
        .collect()
}

/// Render a network as `(buses.csv, lines.csv, case.json)` text. Bus kinds
/// are written explicitly so parsing reproduces the same network.
pub fn render_case(network: &Network) -> (String, String, String) {
    let mut buses = String::from("bus,vsp_pu,pg_mw,qg_mvar,pl_mw,ql_mvar,kind\n");
    for b in network.buses() {
        let _ = writeln!(
            buses,
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            b.id,
            b.v_setpoint,
            b.p_gen,
            b.q_gen,
            b.p_load,
            b.q_load,
            b.kind.as_str()
        );
    }
    let mut lines = String::from("from_bus,to_bus,r_pu,x_pu,b_half_pu\n");
    for br in network.branches() {
        let _ = writeln!(
            lines,
            "{},{},{:?},{:?},{:?}",
            br.from_bus, br.to_bus, br.resistance, br.reactance, br.half_charging
        );
    }
    let meta = CaseMeta {
        base_mva: network.base_mva(),
        ..CaseMeta::default()
    };
    let json = serde_json::to_string_pretty(&meta).expect("case meta serializes");
    (buses, lines, json)
}

pub fn write_case(network: &Network, dir: impl AsRef<Path>) -> Result<(), CaseError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| CaseError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let (buses, lines, meta) = render_case(network);
    for (name, text) in [(BUSES_FILE, buses), (LINES_FILE, lines), (META_FILE, meta)] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| CaseError::Io { path, source })?;
    }
    Ok(())
}

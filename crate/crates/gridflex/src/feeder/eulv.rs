//! Converter from the public European LV test feeder CSV files
//! (Lines/LineCodes/Loads) to the feeder document schema.
//!
//! Column names are matched case-insensitively, so both the original
//! distribution files and common re-exports load without edits. The public
//! data carries no cable ampacities or flexibility limits, so line ratings
//! and customer device limits come from [`EulvOptions`].

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use super::{BaseDoc, CustomerDoc, FeederDoc, FeederError, LineDoc, NodeDoc, SlackDoc};

#[derive(Debug, Clone)]
pub struct EulvOptions {
    pub s_kva: f64,
    pub v_volts: f64,
    pub v0_pu2: f64,
    pub slack_bus: String,
    /// Rating applied to every line (the public data has no ampacities).
    pub default_s_max_kva: f64,
    pub p_max_kw: f64,
    pub q_max_kvar: f64,
}

impl Default for EulvOptions {
    fn default() -> Self {
        EulvOptions {
            s_kva: 500.0,
            v_volts: 416.0,
            v0_pu2: 1.0,
            slack_bus: "1".into(),
            default_s_max_kva: 200.0,
            p_max_kw: 5.0,
            q_max_kvar: 2.0,
        }
    }
}

pub fn convert(
    lines_csv: &Path,
    loads_csv: &Path,
    codes_csv: Option<&Path>,
    opts: &EulvOptions,
) -> Result<FeederDoc, FeederError> {
    let lines = std::fs::File::open(lines_csv)?;
    let loads = std::fs::File::open(loads_csv)?;
    let codes = match codes_csv {
        Some(p) => Some(std::fs::File::open(p)?),
        None => None,
    };
    convert_from_readers(lines, loads, codes, opts)
}

pub fn convert_from_readers<L: Read, D: Read, C: Read>(
    lines_csv: L,
    loads_csv: D,
    codes_csv: Option<C>,
    opts: &EulvOptions,
) -> Result<FeederDoc, FeederError> {
    let codes = match codes_csv {
        Some(r) => parse_linecodes(r)?,
        None => HashMap::new(),
    };
    let z_base = opts.v_volts * opts.v_volts / (opts.s_kva * 1000.0);

    let mut nodes: Vec<NodeDoc> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let push_node = |nodes: &mut Vec<NodeDoc>, seen: &mut HashMap<String, usize>, id: &str| {
        if !seen.contains_key(id) {
            seen.insert(id.to_string(), nodes.len());
            nodes.push(NodeDoc {
                id: id.to_string(),
                customer: None,
            });
        }
    };
    push_node(&mut nodes, &mut seen, &opts.slack_bus);

    let rows = read_rows(lines_csv, &["bus1", "bus2", "length"])?;
    let mut line_docs = Vec::new();
    for row in &rows {
        let bus1 = row.get_str("bus1")?;
        let bus2 = row.get_str("bus2")?;
        let mut length = row.get_f64("length")?;
        match row.get_str("units").as_deref().map(|u| u.to_lowercase()) {
            Ok(u) if u == "km" => length *= 1000.0,
            Ok(u) if u == "ft" => length *= 0.3048,
            _ => {} // metres
        }
        let (r_ohm_km, x_ohm_km) = if let Ok(code) = row.get_str("linecode") {
            let key = code.to_lowercase();
            let spec = codes.get(&key).ok_or_else(|| {
                FeederError::Schema(format!("line references unknown linecode `{code}`"))
            })?;
            (spec.0, spec.1)
        } else {
            (row.get_f64("r1")?, row.get_f64("x1")?)
        };
        let r_pu = r_ohm_km * (length / 1000.0) / z_base;
        let x_pu = x_ohm_km * (length / 1000.0) / z_base;
        push_node(&mut nodes, &mut seen, &bus1);
        push_node(&mut nodes, &mut seen, &bus2);
        line_docs.push(LineDoc {
            from: bus1,
            to: bus2,
            r_pu,
            x_pu,
            s_max_kva: opts.default_s_max_kva,
        });
    }

    let rows = read_rows(loads_csv, &["bus", "kw"])?;
    let mut customers = Vec::new();
    for row in &rows {
        let bus = row.get_str("bus")?;
        if !seen.contains_key(&bus) {
            return Err(FeederError::UnknownCustomerNode(bus));
        }
        let kw = row.get_f64("kw")?;
        let pf = row.get_f64("pf").unwrap_or(1.0);
        let q_kvar = if pf.abs() >= 1.0 {
            0.0
        } else {
            kw * (pf.abs().acos()).tan() * pf.signum()
        };
        customers.push(CustomerDoc {
            node: bus,
            p_max_kw: opts.p_max_kw,
            q_max_kvar: opts.q_max_kvar,
            p_fixed_kw: -kw,
            q_fixed_kvar: -q_kvar,
        });
    }

    Ok(FeederDoc {
        base: BaseDoc {
            s_kva: opts.s_kva,
            v_volts: opts.v_volts,
        },
        slack: SlackDoc {
            v0_pu2: opts.v0_pu2,
            node: Some(opts.slack_bus.clone()),
        },
        nodes,
        lines: line_docs,
        customers,
    })
}

/// (R1, X1) in ohms per km, keyed by lower-cased code name.
fn parse_linecodes<R: Read>(reader: R) -> Result<HashMap<String, (f64, f64)>, FeederError> {
    let rows = read_rows(reader, &["name", "r1", "x1"])?;
    let mut out = HashMap::new();
    for row in &rows {
        let name = row.get_str("name")?.to_lowercase();
        let mut r1 = row.get_f64("r1")?;
        let mut x1 = row.get_f64("x1")?;
        if let Ok(u) = row.get_str("units") {
            // Values are per the stated distance unit; normalize to per-km.
            match u.to_lowercase().as_str() {
                "m" => {
                    r1 *= 1000.0;
                    x1 *= 1000.0;
                }
                "ft" => {
                    r1 *= 1000.0 / 0.3048;
                    x1 *= 1000.0 / 0.3048;
                }
                _ => {}
            }
        }
        out.insert(name, (r1, x1));
    }
    Ok(out)
}

struct Row<'h> {
    headers: &'h HashMap<String, usize>,
    fields: Vec<String>,
}

impl Row<'_> {
    fn get_str(&self, key: &str) -> Result<String, FeederError> {
        self.headers
            .get(key)
            .and_then(|&i| self.fields.get(i))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| FeederError::Schema(format!("missing column `{key}`")))
    }

    fn get_f64(&self, key: &str) -> Result<f64, FeederError> {
        let raw = self.get_str(key)?;
        raw.parse::<f64>()
            .map_err(|_| FeederError::Schema(format!("column `{key}` holds non-numeric `{raw}`")))
    }
}

struct Rows {
    headers: HashMap<String, usize>,
    records: Vec<Vec<String>>,
}

impl Rows {
    fn iter(&self) -> impl Iterator<Item = Row<'_>> {
        self.records.iter().map(|fields| Row {
            headers: &self.headers,
            fields: fields.clone(),
        })
    }
}

impl<'a> IntoIterator for &'a Rows {
    type Item = Row<'a>;
    type IntoIter = Box<dyn Iterator<Item = Row<'a>> + 'a>;
    fn into_iter(self) -> Self::IntoIter {
        Box::new(self.iter())
    }
}

/// Parse a CSV allowing junk above the header row: the header is the first
/// row containing every required column name (case-insensitive).
fn read_rows<R: Read>(reader: R, required: &[&str]) -> Result<Rows, FeederError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut headers: Option<HashMap<String, usize>> = None;
    let mut records = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| FeederError::Schema(format!("csv parse error: {e}")))?;
        let fields: Vec<String> = record.iter().map(|f| f.trim().to_string()).collect();
        match &headers {
            None => {
                let lowered: HashMap<String, usize> = fields
                    .iter()
                    .enumerate()
                    .map(|(i, f)| (f.to_lowercase(), i))
                    .collect();
                if required.iter().all(|r| lowered.contains_key(*r)) {
                    headers = Some(lowered);
                }
            }
            Some(_) => {
                if fields.iter().any(|f| !f.is_empty()) {
                    records.push(fields);
                }
            }
        }
    }
    let headers = headers.ok_or_else(|| {
        FeederError::Schema(format!(
            "csv is missing required columns {:?} in any header row",
            required
        ))
    })?;
    Ok(Rows { headers, records })
}

//! Stacked half-space description of the network-feasible injection set.
//!
//! Voltage bounds, polygonal thermal limits, and customer device polygons
//! all become rows of `A p + B q <= c` over nodal active/reactive
//! injections. Every row carries a provenance tag so violations can be
//! traced back to the constraint family that produced them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{Feeder, Sensitivities};

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("inverted voltage bounds: v_min {v_min} >= v_max {v_max}")]
    InvertedBounds { v_min: f64, v_max: f64 },
    #[error("thermal facet half-count rho must be >= 2, got {0}")]
    RhoTooSmall(usize),
    #[error("dimension mismatch: block has {got} columns, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("rating list has {got} entries for {expected} lines")]
    RatingCount { got: usize, expected: usize },
}

/// Provenance of one constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowTag {
    VoltageUpper {
        node: usize,
    },
    VoltageLower {
        node: usize,
    },
    Thermal {
        line: usize,
        facet: usize,
    },
    /// Facets 0/1 bound +p/-p, facets 2/3 bound +q/-q.
    Customer {
        node: usize,
        facet: usize,
    },
}

impl RowTag {
    pub fn family(&self) -> &'static str {
        match self {
            RowTag::VoltageUpper { .. } => "voltage-upper",
            RowTag::VoltageLower { .. } => "voltage-lower",
            RowTag::Thermal { .. } => "thermal",
            RowTag::Customer { .. } => "customer",
        }
    }
}

/// A block of rows sharing a common origin, prior to stacking.
#[derive(Debug, Clone)]
pub struct ConstraintRows {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub tags: Vec<RowTag>,
}

/// The assembled system `A p + B q <= c` with `H = [A B]`.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
    tags: Vec<RowTag>,
}

impl ConstraintSystem {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn tags(&self) -> &[RowTag] {
        &self.tags
    }

    pub fn rows(&self) -> usize {
        self.c.len()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    /// Stacked `[A B]`, rows by 2N.
    pub fn h(&self) -> DMatrix<f64> {
        let l = self.rows();
        let n = self.n();
        let mut h = DMatrix::zeros(l, 2 * n);
        h.view_mut((0, 0), (l, n)).copy_from(&self.a);
        h.view_mut((0, n), (l, n)).copy_from(&self.b);
        h
    }

    /// Flexible-injection right-hand side `b_q = c - H s_fixed - B q`.
    pub fn b_q(&self, s_fixed: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        assert_eq!(s_fixed.len(), 2 * n, "s_fixed must stack p and q parts");
        assert_eq!(q.len(), n);
        let p_fix = s_fixed.rows(0, n);
        let q_fix = s_fixed.rows(n, n);
        let mut rhs = self.c.clone();
        rhs -= &self.a * p_fix;
        rhs -= &self.b * q_fix;
        rhs -= &self.b * q;
        rhs
    }

    /// Residuals `A p + B q - c` at a candidate point (positive = violated).
    pub fn residuals(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        &self.a * p + &self.b * q - &self.c
    }

    /// Serializable dump of `(A, B, c, tags)` for external verification.
    pub fn to_doc(&self) -> ConstraintDoc {
        ConstraintDoc {
            n: self.n(),
            rows: (0..self.rows())
                .map(|i| ConstraintRowDoc {
                    tag: self.tags[i],
                    a: self.a.row(i).iter().cloned().collect(),
                    b: self.b.row(i).iter().cloned().collect(),
                    c: self.c[i],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintDoc {
    pub n: usize,
    pub rows: Vec<ConstraintRowDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintRowDoc {
    pub tag: RowTag,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

/// Rows `R p + X q <= v_max - v0` and `-R p - X q <= v0 - v_min`.
pub fn voltage_rows(
    sens: &Sensitivities,
    v_min: f64,
    v_max: f64,
) -> Result<ConstraintRows, ConstraintError> {
    if v_min >= v_max {
        return Err(ConstraintError::InvertedBounds { v_min, v_max });
    }
    let n = sens.n();
    let mut a = DMatrix::zeros(2 * n, n);
    let mut b = DMatrix::zeros(2 * n, n);
    let mut c = DVector::zeros(2 * n);
    let mut tags = Vec::with_capacity(2 * n);
    for i in 0..n {
        a.row_mut(i).copy_from(&sens.r().row(i));
        b.row_mut(i).copy_from(&sens.x().row(i));
        c[i] = v_max - sens.v0();
        tags.push(RowTag::VoltageUpper { node: i });
    }
    for i in 0..n {
        a.row_mut(n + i).copy_from(&(-sens.r().row(i)));
        b.row_mut(n + i).copy_from(&(-sens.x().row(i)));
        c[n + i] = sens.v0() - v_min;
        tags.push(RowTag::VoltageLower { node: i });
    }
    Ok(ConstraintRows { a, b, c, tags })
}

/// Inner polygonal approximation of each line's apparent-power disc:
/// `cos(t_r) P_l + sin(t_r) Q_l <= S_l cos(pi/2rho)` at `t_r = pi r / rho`.
/// The shrink factor keeps every polygon point inside the disc.
pub fn thermal_rows(
    sens: &Sensitivities,
    s_max: &[f64],
    rho: usize,
) -> Result<ConstraintRows, ConstraintError> {
    if rho < 2 {
        return Err(ConstraintError::RhoTooSmall(rho));
    }
    let n = sens.n();
    if s_max.len() != n {
        return Err(ConstraintError::RatingCount {
            got: s_max.len(),
            expected: n,
        });
    }
    let facets = 2 * rho;
    let shrink = (std::f64::consts::PI / (2.0 * rho as f64)).cos();
    let mut a = DMatrix::zeros(n * facets, n);
    let mut b = DMatrix::zeros(n * facets, n);
    let mut c = DVector::zeros(n * facets);
    let mut tags = Vec::with_capacity(n * facets);
    for (line, &rating) in s_max.iter().enumerate() {
        let flow_row = sens.m().row(line);
        for r in 0..facets {
            let theta = std::f64::consts::PI * r as f64 / rho as f64;
            let (sin, cos) = theta.sin_cos();
            let row = line * facets + r;
            a.row_mut(row).copy_from(&(flow_row * cos));
            b.row_mut(row).copy_from(&(flow_row * sin));
            c[row] = rating * shrink;
            tags.push(RowTag::Thermal { line, facet: r });
        }
    }
    Ok(ConstraintRows { a, b, c, tags })
}

/// Device boxes per customer and zero-injection pins on customer-free nodes.
///
/// Customer rows are anchored at the nominal fixed operating point, so after
/// the `b_q` shift the flexible component sees the symmetric box
/// `|p_i| <= p_max`, `|q_i| <= q_max`. A zero limit therefore pins the
/// flexible injection to exactly zero regardless of the fixed load.
pub fn customer_rows(feeder: &Feeder) -> ConstraintRows {
    let n = feeder.n();
    let mut a = DMatrix::zeros(4 * n, n);
    let mut b = DMatrix::zeros(4 * n, n);
    let mut c = DVector::zeros(4 * n);
    let mut tags = Vec::with_capacity(4 * n);
    for node in 0..n {
        let base = 4 * node;
        let (p_max, q_max, p_fix, q_fix) = match feeder.customer_at(node) {
            Some(cust) => (cust.p_max, cust.q_max, cust.p_fixed, cust.q_fixed),
            None => (0.0, 0.0, 0.0, 0.0),
        };
        a[(base, node)] = 1.0;
        c[base] = p_max + p_fix;
        a[(base + 1, node)] = -1.0;
        c[base + 1] = p_max - p_fix;
        b[(base + 2, node)] = 1.0;
        c[base + 2] = q_max + q_fix;
        b[(base + 3, node)] = -1.0;
        c[base + 3] = q_max - q_fix;
        for facet in 0..4 {
            tags.push(RowTag::Customer { node, facet });
        }
    }
    ConstraintRows { a, b, c, tags }
}

/// Stack row blocks into one system, preserving tags.
pub fn assemble(blocks: Vec<ConstraintRows>) -> Result<ConstraintSystem, ConstraintError> {
    let n = blocks.first().map(|b| b.a.ncols()).unwrap_or(0);
    let total: usize = blocks.iter().map(|b| b.c.len()).sum();
    let mut a = DMatrix::zeros(total, n);
    let mut b = DMatrix::zeros(total, n);
    let mut c = DVector::zeros(total);
    let mut tags = Vec::with_capacity(total);
    let mut at = 0;
    for block in blocks {
        if block.a.ncols() != n || block.b.ncols() != n {
            return Err(ConstraintError::DimensionMismatch {
                got: block.a.ncols(),
                expected: n,
            });
        }
        let rows = block.c.len();
        a.view_mut((at, 0), (rows, n)).copy_from(&block.a);
        b.view_mut((at, 0), (rows, n)).copy_from(&block.b);
        c.rows_mut(at, rows).copy_from(&block.c);
        tags.extend(block.tags);
        at += rows;
    }
    Ok(ConstraintSystem { a, b, c, tags })
}

/// Assemble the default system for a feeder: voltage band, thermal polygons,
/// and customer boxes.
pub fn assemble_feeder_system(
    feeder: &Feeder,
    sens: &Sensitivities,
    v_min: f64,
    v_max: f64,
    rho: usize,
) -> Result<ConstraintSystem, ConstraintError> {
    let ratings: Vec<f64> = feeder.lines().iter().map(|l| l.s_max).collect();
    assemble(vec![
        voltage_rows(sens, v_min, v_max)?,
        thermal_rows(sens, &ratings, rho)?,
        customer_rows(feeder),
    ])
}

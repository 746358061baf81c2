//! Radial feeder representation and linearized sensitivity operators.
//!
//! A [`Feeder`] is loaded from a structured JSON document (see the book for
//! the schema) and validated for radiality. [`build_sensitivities`] derives
//! the linear operators `R`, `X`, `M` of the lossless linearized branch-flow
//! model: squared voltages respond as `v = R p + X q + v0·1` and line flows
//! as `P = M p`, with positive injections (exports) raising voltage.
//!
//! All internal quantities are per-unit on the document's declared base;
//! kilowatts appear only at the ingestion and reporting boundaries.

pub mod eulv;
pub mod synth;

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("i/o error reading feeder document: {0}")]
    Io(#[from] std::io::Error),
    #[error("feeder document is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("non-radial topology: {0}")]
    NonRadial(String),
    #[error("line references unknown node `{0}`")]
    DanglingLine(String),
    #[error("customer references unknown node `{0}`")]
    UnknownCustomerNode(String),
    #[error("duplicate customer assignment on node `{0}`")]
    DuplicateCustomer(String),
}

/// On-disk feeder schema. Power quantities in kW/kVAr/kVA, impedances in
/// per-unit on the declared base, `v0_pu2` in squared per-unit volts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederDoc {
    pub base: BaseDoc,
    pub slack: SlackDoc,
    pub nodes: Vec<NodeDoc>,
    pub lines: Vec<LineDoc>,
    pub customers: Vec<CustomerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseDoc {
    pub s_kva: f64,
    pub v_volts: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlackDoc {
    pub v0_pu2: f64,
    /// Slack bus id; defaults to the first entry of `nodes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub customer: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineDoc {
    pub from: String,
    pub to: String,
    pub r_pu: f64,
    pub x_pu: f64,
    pub s_max_kva: f64,
}

/// `p_fixed_kw`/`q_fixed_kvar` are net injections: consumption is negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomerDoc {
    pub node: String,
    pub p_max_kw: f64,
    pub q_max_kvar: f64,
    #[serde(default)]
    pub p_fixed_kw: f64,
    #[serde(default)]
    pub q_fixed_kvar: f64,
}

/// A line of the oriented tree. Line `i` is the edge directly above node `i`;
/// `from == None` means the parent is the slack bus.
#[derive(Debug, Clone)]
pub struct Line {
    pub from: Option<usize>,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Thermal rating, per-unit apparent power.
    pub s_max: f64,
}

/// Customer device limits and nominal fixed load, per-unit.
#[derive(Debug, Clone)]
pub struct Customer {
    pub node: usize,
    pub p_max: f64,
    pub q_max: f64,
    pub p_fixed: f64,
    pub q_fixed: f64,
}

/// Validated radial feeder. Immutable once shared; construction-time setters
/// exist so scenario materialization can override limits and loads.
#[derive(Debug, Clone)]
pub struct Feeder {
    base_kva: f64,
    base_volts: f64,
    v0: f64,
    slack_id: String,
    node_ids: Vec<String>,
    parent: Vec<Option<usize>>,
    lines: Vec<Line>,
    customers: Vec<Customer>,
    customer_of_node: Vec<Option<usize>>,
}

impl Feeder {
    pub fn from_doc(doc: &FeederDoc) -> Result<Self, FeederError> {
        if doc.base.s_kva <= 0.0 || doc.base.v_volts <= 0.0 {
            return Err(FeederError::Schema("base powers must be positive".into()));
        }
        if doc.slack.v0_pu2 <= 0.0 {
            return Err(FeederError::Schema("slack v0_pu2 must be positive".into()));
        }
        if doc.nodes.is_empty() {
            return Err(FeederError::Schema("feeder has no nodes".into()));
        }
        let slack_id = doc
            .slack
            .node
            .clone()
            .unwrap_or_else(|| doc.nodes[0].id.clone());

        let mut index_of: HashMap<&str, usize> = HashMap::new();
        let mut node_ids = Vec::new();
        let mut seen_slack = false;
        for node in &doc.nodes {
            if node.id == slack_id {
                if seen_slack {
                    return Err(FeederError::Schema(format!(
                        "duplicate node id `{}`",
                        node.id
                    )));
                }
                seen_slack = true;
                continue;
            }
            if index_of.insert(node.id.as_str(), node_ids.len()).is_some() {
                return Err(FeederError::Schema(format!(
                    "duplicate node id `{}`",
                    node.id
                )));
            }
            node_ids.push(node.id.clone());
        }
        if !seen_slack {
            return Err(FeederError::Schema(format!(
                "slack node `{slack_id}` not present in node list"
            )));
        }

        let n = node_ids.len();
        if doc.lines.len() != n {
            return Err(FeederError::NonRadial(format!(
                "{} lines for {} non-slack nodes (a radial feeder has exactly one line per node)",
                doc.lines.len(),
                n
            )));
        }

        // Undirected adjacency over slack (index n) and the non-slack nodes.
        let lookup = |id: &str| -> Result<usize, FeederError> {
            if id == slack_id {
                Ok(n)
            } else {
                index_of
                    .get(id)
                    .copied()
                    .ok_or_else(|| FeederError::DanglingLine(id.to_string()))
            }
        };
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        for (li, line) in doc.lines.iter().enumerate() {
            if line.r_pu < 0.0 || line.x_pu < 0.0 {
                return Err(FeederError::Schema(format!(
                    "line {} has negative impedance",
                    li
                )));
            }
            if line.s_max_kva <= 0.0 {
                return Err(FeederError::Schema(format!(
                    "line {} has non-positive rating",
                    li
                )));
            }
            let a = lookup(&line.from)?;
            let b = lookup(&line.to)?;
            if a == b {
                return Err(FeederError::NonRadial(format!(
                    "line {} is a self-loop",
                    li
                )));
            }
            adj[a].push((b, li));
            adj[b].push((a, li));
        }

        // BFS from the slack orients every edge; with exactly N edges, full
        // reachability implies the graph is a tree.
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut parent_line: Vec<Option<usize>> = vec![None; n];
        let mut visited = vec![false; n + 1];
        visited[n] = true;
        let mut queue = std::collections::VecDeque::from([n]);
        let mut reached = 0usize;
        while let Some(u) = queue.pop_front() {
            for &(v, li) in &adj[u] {
                if visited[v] {
                    continue;
                }
                visited[v] = true;
                reached += 1;
                parent[v] = if u == n { None } else { Some(u) };
                parent_line[v] = Some(li);
                queue.push_back(v);
            }
        }
        if reached != n {
            return Err(FeederError::NonRadial(format!(
                "{} of {} nodes unreachable from the slack (cycle elsewhere or disconnected)",
                n - reached,
                n
            )));
        }

        let base_kva = doc.base.s_kva;
        let mut lines = Vec::with_capacity(n);
        for node in 0..n {
            let li = parent_line[node].expect("reached node has a parent line");
            let src = &doc.lines[li];
            lines.push(Line {
                from: parent[node],
                to: node,
                r: src.r_pu,
                x: src.x_pu,
                s_max: src.s_max_kva / base_kva,
            });
        }

        let mut customers = Vec::with_capacity(doc.customers.len());
        let mut customer_of_node: Vec<Option<usize>> = vec![None; n];
        for cust in &doc.customers {
            if cust.node == slack_id {
                return Err(FeederError::UnknownCustomerNode(format!(
                    "{} (slack bus cannot host a customer)",
                    cust.node
                )));
            }
            let node = *index_of
                .get(cust.node.as_str())
                .ok_or_else(|| FeederError::UnknownCustomerNode(cust.node.clone()))?;
            if customer_of_node[node].is_some() {
                return Err(FeederError::DuplicateCustomer(cust.node.clone()));
            }
            if cust.p_max_kw < 0.0 || cust.q_max_kvar < 0.0 {
                return Err(FeederError::Schema(format!(
                    "customer on `{}` has negative device limits",
                    cust.node
                )));
            }
            customer_of_node[node] = Some(customers.len());
            customers.push(Customer {
                node,
                p_max: cust.p_max_kw / base_kva,
                q_max: cust.q_max_kvar / base_kva,
                p_fixed: cust.p_fixed_kw / base_kva,
                q_fixed: cust.q_fixed_kvar / base_kva,
            });
        }

        Ok(Feeder {
            base_kva,
            base_volts: doc.base.v_volts,
            v0: doc.slack.v0_pu2,
            slack_id,
            node_ids,
            parent,
            lines,
            customers,
            customer_of_node,
        })
    }

    pub fn to_doc(&self) -> FeederDoc {
        let mut nodes = vec![NodeDoc {
            id: self.slack_id.clone(),
            customer: None,
        }];
        nodes.extend(self.node_ids.iter().enumerate().map(|(i, id)| NodeDoc {
            id: id.clone(),
            customer: Some(self.customer_of_node[i].is_some()),
        }));
        let lines = self
            .lines
            .iter()
            .map(|line| LineDoc {
                from: match line.from {
                    Some(p) => self.node_ids[p].clone(),
                    None => self.slack_id.clone(),
                },
                to: self.node_ids[line.to].clone(),
                r_pu: line.r,
                x_pu: line.x,
                s_max_kva: line.s_max * self.base_kva,
            })
            .collect();
        let customers = self
            .customers
            .iter()
            .map(|c| CustomerDoc {
                node: self.node_ids[c.node].clone(),
                p_max_kw: c.p_max * self.base_kva,
                q_max_kvar: c.q_max * self.base_kva,
                p_fixed_kw: c.p_fixed * self.base_kva,
                q_fixed_kvar: c.q_fixed * self.base_kva,
            })
            .collect();
        FeederDoc {
            base: BaseDoc {
                s_kva: self.base_kva,
                v_volts: self.base_volts,
            },
            slack: SlackDoc {
                v0_pu2: self.v0,
                node: Some(self.slack_id.clone()),
            },
            nodes,
            lines,
            customers,
        }
    }

    /// Number of non-slack nodes (equals the number of lines).
    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn base_kva(&self) -> f64 {
        self.base_kva
    }

    pub fn base_volts(&self) -> f64 {
        self.base_volts
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn slack_id(&self) -> &str {
        &self.slack_id
    }

    pub fn node_id(&self, node: usize) -> &str {
        &self.node_ids[node]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn customers(&self) -> &[Customer] {
        &self.customers
    }

    pub fn customer_at(&self, node: usize) -> Option<&Customer> {
        self.customer_of_node[node].map(|c| &self.customers[c])
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    /// Line indices on the path from the slack down to `node`, root first.
    pub fn path_lines(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = Some(node);
        while let Some(v) = cur {
            path.push(v);
            cur = self.parent[v];
        }
        path.reverse();
        path
    }

    /// Stacked nominal fixed injections `[p_fixed; q_fixed]` over all nodes, pu.
    pub fn s_fixed(&self) -> DVector<f64> {
        let n = self.n();
        let mut s = DVector::zeros(2 * n);
        for c in &self.customers {
            s[c.node] = c.p_fixed;
            s[n + c.node] = c.q_fixed;
        }
        s
    }

    /// Replace device limits for every customer (kW/kVAr inputs).
    pub fn set_limits_kw(&mut self, limits: &[(f64, f64)]) {
        assert_eq!(limits.len(), self.customers.len());
        for (c, &(p_kw, q_kvar)) in self.customers.iter_mut().zip(limits) {
            c.p_max = p_kw / self.base_kva;
            c.q_max = q_kvar / self.base_kva;
        }
    }

    /// Replace nominal fixed loads for every customer (kW/kVAr net injections).
    pub fn set_fixed_loads_kw(&mut self, loads: &[(f64, f64)]) {
        assert_eq!(loads.len(), self.customers.len());
        for (c, &(p_kw, q_kvar)) in self.customers.iter_mut().zip(loads) {
            c.p_fixed = p_kw / self.base_kva;
            c.q_fixed = q_kvar / self.base_kva;
        }
    }
}

/// Load and validate a feeder document from disk.
pub fn load_feeder(path: &Path) -> Result<Feeder, FeederError> {
    let text = std::fs::read_to_string(path)?;
    let doc: FeederDoc = serde_json::from_str(&text)?;
    Feeder::from_doc(&doc)
}

/// Linear sensitivity operators of the linearized branch-flow model.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    r: DMatrix<f64>,
    x: DMatrix<f64>,
    m: DMatrix<f64>,
    v0: f64,
}

impl Sensitivities {
    /// Voltage sensitivity to active injections, `N×N`, pu² per pu.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Voltage sensitivity to reactive injections.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Downstream-indicator flow map: row `l` marks the subtree served by
    /// line `l`, so `P = M p` gives line flows as sums of downstream injections.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    /// Predicted squared voltages `v0·1 + R p + X q`.
    pub fn voltages(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::from_element(self.n(), self.v0);
        v += &self.r * p;
        v += &self.x * q;
        v
    }
}

/// Derive `R`, `X`, `M` from a validated feeder.
///
/// `R_ij = 2 Σ r_l` over the lines shared by the slack-to-`i` and slack-to-`j`
/// paths (`X` analogous); `M_li = 1` iff node `i` lies downstream of line `l`.
pub fn build_sensitivities(feeder: &Feeder) -> Sensitivities {
    let n = feeder.n();
    // Cumulative path impedance from the slack to every node.
    let mut order: Vec<usize> = (0..n).collect();
    // Parents were assigned by BFS, so a parent can appear after its child in
    // index order; process in topological order by repeated passes over depth.
    let mut depth = vec![usize::MAX; n];
    fn depth_of(node: usize, parent: &[Option<usize>], depth: &mut [usize]) -> usize {
        if depth[node] != usize::MAX {
            return depth[node];
        }
        let d = match parent[node] {
            None => 0,
            Some(p) => depth_of(p, parent, depth) + 1,
        };
        depth[node] = d;
        d
    }
    let parents: Vec<Option<usize>> = (0..n).map(|v| feeder.parent(v)).collect();
    for v in 0..n {
        depth_of(v, &parents, &mut depth);
    }
    order.sort_by_key(|&v| depth[v]);

    let mut cum_r = vec![0.0; n];
    let mut cum_x = vec![0.0; n];
    for &v in &order {
        let line = &feeder.lines()[v];
        let (pr, px) = match parents[v] {
            Some(p) => (cum_r[p], cum_x[p]),
            None => (0.0, 0.0),
        };
        cum_r[v] = pr + line.r;
        cum_x[v] = px + line.x;
    }

    // Lowest common ancestor by walking parents; fine for feeder-scale N.
    let lca = |mut a: usize, mut b: usize| -> Option<usize> {
        while depth[a] > depth[b] {
            a = parents[a]?;
        }
        while depth[b] > depth[a] {
            b = parents[b]?;
        }
        while a != b {
            a = parents[a]?;
            b = parents[b]?;
        }
        Some(a)
    };

    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (vr, vx) = match lca(i, j) {
                Some(k) => (2.0 * cum_r[k], 2.0 * cum_x[k]),
                None => (0.0, 0.0),
            };
            r[(i, j)] = vr;
            r[(j, i)] = vr;
            x[(i, j)] = vx;
            x[(j, i)] = vx;
        }
    }

    // M[l][i] = 1 iff line l (the edge above node l) is on the slack path of i.
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut cur = Some(i);
        while let Some(v) = cur {
            m[(v, i)] = 1.0;
            cur = parents[v];
        }
    }

    Sensitivities {
        r,
        x,
        m,
        v0: feeder.v0(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_node_doc() -> FeederDoc {
        serde_json::from_value(serde_json::json!({
            "base": {"s_kva": 100.0, "v_volts": 416.0},
            "slack": {"v0_pu2": 1.0},
            "nodes": [{"id": "slack"}, {"id": "a"}],
            "lines": [{"from": "slack", "to": "a", "r_pu": 0.1, "x_pu": 0.05, "s_max_kva": 100.0}],
            "customers": [{"node": "a", "p_max_kw": 5.0, "q_max_kvar": 2.0, "p_fixed_kw": -1.0, "q_fixed_kvar": -0.3}]
        }))
        .unwrap()
    }

    #[test]
    fn minimal_radial_feeder_loads() {
        let feeder = Feeder::from_doc(&two_node_doc()).unwrap();
        assert_eq!(feeder.n(), 1);
        assert_eq!(feeder.lines().len(), 1);
        assert_eq!(feeder.customers().len(), 1);
        let c = &feeder.customers()[0];
        assert_abs_diff_eq!(c.p_max, 0.05);
        assert_abs_diff_eq!(c.p_fixed, -0.01);
    }

    #[test]
    fn cycle_is_rejected() {
        let mut doc = two_node_doc();
        doc.nodes.push(NodeDoc {
            id: "b".into(),
            customer: None,
        });
        doc.lines.push(LineDoc {
            from: "a".into(),
            to: "b".into(),
            r_pu: 0.1,
            x_pu: 0.1,
            s_max_kva: 50.0,
        });
        doc.lines.push(LineDoc {
            from: "slack".into(),
            to: "b".into(),
            r_pu: 0.1,
            x_pu: 0.1,
            s_max_kva: 50.0,
        });
        let err = Feeder::from_doc(&doc).unwrap_err();
        assert!(matches!(err, FeederError::NonRadial(_)), "{err}");
    }

    #[test]
    fn duplicate_customer_rejected() {
        let mut doc = two_node_doc();
        doc.customers.push(doc.customers[0].clone());
        let err = Feeder::from_doc(&doc).unwrap_err();
        assert!(matches!(err, FeederError::DuplicateCustomer(_)));
    }

    #[test]
    fn single_line_sensitivities() {
        let feeder = Feeder::from_doc(&two_node_doc()).unwrap();
        let sens = build_sensitivities(&feeder);
        assert_abs_diff_eq!(sens.r()[(0, 0)], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.x()[(0, 0)], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.m()[(0, 0)], 1.0);
    }

    #[test]
    fn chain_sensitivities_match_path_enumeration() {
        let doc: FeederDoc = serde_json::from_value(serde_json::json!({
            "base": {"s_kva": 100.0, "v_volts": 416.0},
            "slack": {"v0_pu2": 1.0},
            "nodes": [{"id": "s"}, {"id": "a"}, {"id": "b"}],
            "lines": [
                {"from": "s", "to": "a", "r_pu": 0.1, "x_pu": 0.0, "s_max_kva": 100.0},
                {"from": "a", "to": "b", "r_pu": 0.1, "x_pu": 0.0, "s_max_kva": 100.0}
            ],
            "customers": []
        }))
        .unwrap();
        let feeder = Feeder::from_doc(&doc).unwrap();
        let sens = build_sensitivities(&feeder);
        let a = feeder.node_index("a").unwrap();
        let b = feeder.node_index("b").unwrap();
        assert_abs_diff_eq!(sens.r()[(a, a)], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.r()[(a, b)], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.r()[(b, a)], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.r()[(b, b)], 0.4, epsilon = 1e-12);

        // Independent oracle: explicit path enumeration over shared lines.
        for i in 0..2 {
            for j in 0..2 {
                let pi = feeder.path_lines(i);
                let pj = feeder.path_lines(j);
                let shared: f64 = pi
                    .iter()
                    .filter(|l| pj.contains(l))
                    .map(|&l| feeder.lines()[l].r)
                    .sum();
                assert_abs_diff_eq!(sens.r()[(i, j)], 2.0 * shared, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ancestor_rows_coincide() {
        // For i an ancestor of j, R_ij must equal R_ii.
        let feeder = synth::branched_test_feeder();
        let sens = build_sensitivities(&feeder);
        for j in 0..feeder.n() {
            let mut cur = feeder.parent(j);
            while let Some(i) = cur {
                assert_abs_diff_eq!(sens.r()[(i, j)], sens.r()[(i, i)], epsilon = 1e-12);
                cur = feeder.parent(i);
            }
        }
    }

    #[test]
    fn m_marks_slack_paths() {
        let feeder = synth::branched_test_feeder();
        let sens = build_sensitivities(&feeder);
        for i in 0..feeder.n() {
            let unit = DVector::from_fn(feeder.n(), |k, _| if k == i { 1.0 } else { 0.0 });
            let flows = sens.m() * &unit;
            let path = feeder.path_lines(i);
            for l in 0..feeder.n() {
                let expect = if path.contains(&l) { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(flows[l], expect);
            }
        }
    }

    #[test]
    fn r_x_are_positive_semidefinite() {
        let mut feeders = vec![synth::branched_test_feeder()];
        for seed in 0..10 {
            feeders.push(Feeder::from_doc(&synth::random_radial(seed, 9, 0.6)).unwrap());
        }
        for feeder in &feeders {
            let sens = build_sensitivities(feeder);
            for mat in [sens.r(), sens.x()] {
                let eig = mat.clone().symmetric_eigen();
                let min = eig
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                assert!(min >= -1e-10, "min eigenvalue {min}");
            }
        }
    }
}

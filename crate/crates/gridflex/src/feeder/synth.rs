//! Bundled feeder constructors.
//!
//! `eu_lv_style` builds the low-voltage benchmark feeder shipped with the
//! scenario files: a 416 V trunk-and-lateral layout with 55 customers,
//! cable parameters typical of European LV distribution, and seeded
//! residential fixed loads. The smaller constructors back tests and the
//! book's runnable snippets.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BaseDoc, CustomerDoc, Feeder, FeederDoc, LineDoc, NodeDoc, SlackDoc};

/// Power factor used for the seeded residential fixed loads.
const FIXED_LOAD_PF: f64 = 0.95;

/// EU-LV-style benchmark: a 1.1 km tapered main of 36 segments with 55
/// customers on short service drops along its length, +/-5 kW / +/-2 kVAr
/// device limits, fixed consumption drawn uniformly from [0, 1] kW at 0.95
/// power factor. The depth spread of the service positions reproduces the
/// strong head-to-tail sensitivity heterogeneity of the public feeder.
pub fn eu_lv_style(seed: u64) -> FeederDoc {
    // 500 kVA, 416 V base: z_base = 0.346 ohm.
    let s_kva = 500.0;
    let v_volts = 416.0;
    let z_base = v_volts * v_volts / (s_kva * 1000.0);

    // Tapered main (185 / 120 / 95 mm2 aluminium) and 35 mm2 service drops,
    // ohms per km.
    let main_sections = [
        CableKind {
            r_ohm_km: 0.164,
            x_ohm_km: 0.074,
            rating_kva: 300.0,
        },
        CableKind {
            r_ohm_km: 0.253,
            x_ohm_km: 0.074,
            rating_kva: 180.0,
        },
        CableKind {
            r_ohm_km: 0.320,
            x_ohm_km: 0.075,
            rating_kva: 110.0,
        },
    ];
    let service = CableKind {
        r_ohm_km: 0.868,
        x_ohm_km: 0.085,
        rating_kva: 25.0,
    };
    let n_main = 36usize;
    let main_len_km = 0.040;
    let service_len_km = 0.020;

    let mut nodes = vec![NodeDoc {
        id: "source".into(),
        customer: None,
    }];
    let mut lines = Vec::new();
    let mut customers = Vec::new();

    for m in 1..=n_main {
        nodes.push(NodeDoc {
            id: format!("M{m:02}"),
            customer: Some(false),
        });
        let from = if m == 1 {
            "source".to_string()
        } else {
            format!("M{:02}", m - 1)
        };
        let section = &main_sections[(m - 1) * main_sections.len() / n_main];
        lines.push(line(
            &from,
            &format!("M{m:02}"),
            section,
            main_len_km,
            z_base,
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cust = 55usize;
    for k in 0..n_cust {
        // Service positions spread along the main, skipping the first two
        // spans next to the transformer.
        let attach = 3 + k * (n_main - 3) / n_cust;
        let id = format!("C{:02}", k + 1);
        nodes.push(NodeDoc {
            id: id.clone(),
            customer: Some(true),
        });
        lines.push(line(
            &format!("M{attach:02}"),
            &id,
            &service,
            service_len_km,
            z_base,
        ));
        let p_fixed_kw = -rng.gen_range(0.0..=1.0);
        let q_fixed_kvar = p_fixed_kw * (FIXED_LOAD_PF.acos()).tan();
        customers.push(CustomerDoc {
            node: id.clone(),
            p_max_kw: 5.0,
            q_max_kvar: 2.0,
            p_fixed_kw,
            q_fixed_kvar,
        });
    }

    FeederDoc {
        base: BaseDoc { s_kva, v_volts },
        slack: SlackDoc {
            v0_pu2: 1.0,
            node: Some("source".into()),
        },
        nodes,
        lines,
        customers,
    }
}

/// Coordinated customers used by the bundled base case.
pub fn base_case_coordinated() -> Vec<String> {
    vec!["C44".into(), "C52".into(), "C53".into()]
}

struct CableKind {
    r_ohm_km: f64,
    x_ohm_km: f64,
    rating_kva: f64,
}

fn line(from: &str, to: &str, cable: &CableKind, len_km: f64, z_base: f64) -> LineDoc {
    LineDoc {
        from: from.into(),
        to: to.into(),
        r_pu: cable.r_ohm_km * len_km / z_base,
        x_pu: cable.x_ohm_km * len_km / z_base,
        s_max_kva: cable.rating_kva,
    }
}

/// Two-bus feeder: one line, one customer. Handy for closed-form checks.
pub fn two_bus(r_pu: f64, x_pu: f64, p_max_kw: f64, q_max_kvar: f64) -> FeederDoc {
    FeederDoc {
        base: BaseDoc {
            s_kva: 100.0,
            v_volts: 416.0,
        },
        slack: SlackDoc {
            v0_pu2: 1.0,
            node: Some("slack".into()),
        },
        nodes: vec![
            NodeDoc {
                id: "slack".into(),
                customer: None,
            },
            NodeDoc {
                id: "a".into(),
                customer: Some(true),
            },
        ],
        lines: vec![LineDoc {
            from: "slack".into(),
            to: "a".into(),
            r_pu,
            x_pu,
            s_max_kva: 1000.0,
        }],
        customers: vec![CustomerDoc {
            node: "a".into(),
            p_max_kw,
            q_max_kvar,
            p_fixed_kw: 0.0,
            q_fixed_kvar: 0.0,
        }],
    }
}

/// Feeder with `n` customers on negligible impedances and generous ratings,
/// so only the device boxes can bind. 10 kVA base keeps per-unit values large.
pub fn boxes_only(n: usize, p_max_kw: f64, q_max_kvar: f64) -> FeederDoc {
    let mut nodes = vec![NodeDoc {
        id: "slack".into(),
        customer: None,
    }];
    let mut lines = Vec::new();
    let mut customers = Vec::new();
    for i in 0..n {
        let id = format!("c{i}");
        nodes.push(NodeDoc {
            id: id.clone(),
            customer: Some(true),
        });
        lines.push(LineDoc {
            from: "slack".into(),
            to: id.clone(),
            r_pu: 1e-6,
            x_pu: 1e-6,
            s_max_kva: 1000.0,
        });
        customers.push(CustomerDoc {
            node: id.clone(),
            p_max_kw,
            q_max_kvar,
            p_fixed_kw: 0.0,
            q_fixed_kvar: 0.0,
        });
    }
    FeederDoc {
        base: BaseDoc {
            s_kva: 10.0,
            v_volts: 416.0,
        },
        slack: SlackDoc {
            v0_pu2: 1.0,
            node: Some("slack".into()),
        },
        nodes,
        lines,
        customers,
    }
}

/// Random small radial feeder for property tests and cross-formulation
/// checks: every node's parent is drawn uniformly from the nodes before it.
pub fn random_radial(seed: u64, n: usize, customer_share: f64) -> FeederDoc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![NodeDoc {
        id: "slack".into(),
        customer: None,
    }];
    let mut lines = Vec::new();
    let mut customers = Vec::new();
    for i in 0..n {
        let id = format!("n{i}");
        nodes.push(NodeDoc {
            id: id.clone(),
            customer: None,
        });
        let parent = if i == 0 {
            "slack".to_string()
        } else {
            let p = rng.gen_range(0..=i);
            if p == 0 {
                "slack".to_string()
            } else {
                format!("n{}", p - 1)
            }
        };
        lines.push(LineDoc {
            from: parent,
            to: id.clone(),
            r_pu: rng.gen_range(0.001..0.05),
            x_pu: rng.gen_range(0.001..0.03),
            s_max_kva: rng.gen_range(50.0..200.0),
        });
        if rng.gen_bool(customer_share) || i == 0 {
            customers.push(CustomerDoc {
                node: id,
                p_max_kw: rng.gen_range(1.0..8.0),
                q_max_kvar: rng.gen_range(0.5..3.0),
                p_fixed_kw: -rng.gen_range(0.0..1.0),
                q_fixed_kvar: -rng.gen_range(0.0..0.4),
            });
        }
    }
    FeederDoc {
        base: BaseDoc {
            s_kva: 100.0,
            v_volts: 416.0,
        },
        slack: SlackDoc {
            v0_pu2: 1.0,
            node: Some("slack".into()),
        },
        nodes,
        lines,
        customers,
    }
}

/// Small fixed branched feeder used across unit tests.
pub fn branched_test_feeder() -> Feeder {
    let doc: FeederDoc = serde_json::from_value(serde_json::json!({
        "base": {"s_kva": 100.0, "v_volts": 416.0},
        "slack": {"v0_pu2": 1.0},
        "nodes": [
            {"id": "s"}, {"id": "a"}, {"id": "b"}, {"id": "c"}, {"id": "d"}, {"id": "e"}
        ],
        "lines": [
            {"from": "s", "to": "a", "r_pu": 0.02, "x_pu": 0.01, "s_max_kva": 150.0},
            {"from": "a", "to": "b", "r_pu": 0.03, "x_pu": 0.015, "s_max_kva": 100.0},
            {"from": "a", "to": "c", "r_pu": 0.025, "x_pu": 0.012, "s_max_kva": 100.0},
            {"from": "b", "to": "d", "r_pu": 0.04, "x_pu": 0.02, "s_max_kva": 80.0},
            {"from": "c", "to": "e", "r_pu": 0.035, "x_pu": 0.018, "s_max_kva": 80.0}
        ],
        "customers": [
            {"node": "b", "p_max_kw": 5.0, "q_max_kvar": 2.0, "p_fixed_kw": -0.5, "q_fixed_kvar": -0.16},
            {"node": "d", "p_max_kw": 5.0, "q_max_kvar": 2.0, "p_fixed_kw": -0.8, "q_fixed_kvar": -0.26},
            {"node": "e", "p_max_kw": 5.0, "q_max_kvar": 2.0, "p_fixed_kw": -0.3, "q_fixed_kvar": -0.10}
        ]
    }))
    .unwrap();
    Feeder::from_doc(&doc).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eu_lv_style_has_55_customers() {
        let doc = eu_lv_style(7);
        let feeder = Feeder::from_doc(&doc).unwrap();
        assert_eq!(feeder.customers().len(), 55);
        assert_eq!(feeder.n(), 36 + 55);
        for c in feeder.customers() {
            assert!(c.p_fixed <= 0.0 && c.p_fixed >= -1.0 / 500.0);
        }
        for id in base_case_coordinated() {
            assert!(feeder.node_index(&id).is_some());
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = serde_json::to_string(&eu_lv_style(42)).unwrap();
        let b = serde_json::to_string(&eu_lv_style(42)).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&eu_lv_style(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_radial_validates() {
        for seed in 0..20 {
            let doc = random_radial(seed, 10, 0.7);
            Feeder::from_doc(&doc).expect("random radial feeder must validate");
        }
    }
}

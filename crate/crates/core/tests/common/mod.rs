#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use tpnb::dataset::{load_csv, partition_vertical, LabelColumn, Row, SplitPlan, Table};
use tpnb::envelope::Scheme;
use tpnb::perturb::{NoiseFamily, NoiseMode};
use tpnb::protocol::{Coordinator, CoordinatorConfig, Party, PartyConfig, UploadMode};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn synthetic8() -> Table {
    load_csv(fixture("synthetic8.csv"), &LabelColumn::Name("class".into())).unwrap()
}

/// Per-class (mean, std) of the eight PIMA attributes; classes "0" (500 rows)
/// and "1" (268 rows).
const PIMA_SHAPE: [(&str, (f64, f64), (f64, f64)); 8] = [
    ("preg", (3.30, 3.02), (4.87, 3.74)),
    ("plas", (109.98, 26.14), (141.26, 31.94)),
    ("pres", (68.18, 18.06), (70.82, 21.49)),
    ("skin", (19.66, 14.89), (22.16, 17.68)),
    ("insu", (68.79, 98.87), (100.34, 138.69)),
    ("mass", (30.30, 7.69), (35.14, 7.26)),
    ("pedi", (0.43, 0.30), (0.55, 0.37)),
    ("age", (31.19, 11.67), (37.07, 10.97)),
];

/// A 768 x 8 Gaussian table with PIMA's class balance and per-class moments.
pub fn pima_shaped(seed: u64) -> Table {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let rows = (0..768u64)
        .map(|i| {
            // 7919 is coprime to 768, so exactly 268 rows land in the positive class
            let positive = (i * 7919) % 768 < 268;
            let values = PIMA_SHAPE
                .iter()
                .map(|(_, neg, pos)| {
                    let (m, s) = if positive { *pos } else { *neg };
                    Normal::new(m, s).unwrap().sample(&mut rng)
                })
                .collect();
            Row {
                row_id: i,
                values,
                class_label: if positive { "1" } else { "0" }.into(),
            }
        })
        .collect();
    Table {
        name: "pima-shaped".into(),
        attribute_names: PIMA_SHAPE.iter().map(|(n, _, _)| n.to_string()).collect(),
        label_name: "class".into(),
        rows,
    }
}

/// Location of a user-supplied dataset: `$<var>` if set, else
/// `<workspace>/data/<file>` if it exists.
pub fn user_dataset(var: &str, file: &str) -> Option<PathBuf> {
    if let Ok(p) = std::env::var(var) {
        return Some(PathBuf::from(p));
    }
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(file);
    p.exists().then_some(p)
}

pub struct SessionSetup {
    pub scheme: Scheme,
    pub noise_mode: NoiseMode,
    pub noise_family: NoiseFamily,
    pub upload: UploadMode,
    pub split_plan: SplitPlan,
    pub split_index: usize,
    pub noise_seed: u64,
    pub session_id: String,
}

impl Default for SessionSetup {
    fn default() -> Self {
        Self {
            scheme: Scheme::Null,
            noise_mode: NoiseMode::default(),
            noise_family: NoiseFamily::default(),
            upload: UploadMode::default(),
            split_plan: SplitPlan::default(),
            split_index: 0,
            noise_seed: 1,
            session_id: "test-session".into(),
        }
    }
}

impl SessionSetup {
    pub fn coordinator(&self, min_sites: usize) -> Coordinator {
        Coordinator::new(CoordinatorConfig {
            session_id: self.session_id.clone(),
            min_sites,
            split_plan: self.split_plan.clone(),
            split_index: self.split_index,
            noise_mode: self.noise_mode,
            noise_family: self.noise_family,
            upload: self.upload,
            scheme: self.scheme,
            ..CoordinatorConfig::default()
        })
        .unwrap()
    }

    pub fn parties(&self, table: &Table, sites: usize) -> Vec<Party> {
        partition_vertical(table, sites)
            .unwrap()
            .into_iter()
            .map(|f| {
                Party::new(
                    Arc::new(f),
                    PartyConfig {
                        scheme: self.scheme,
                        noise_seed: self.noise_seed,
                        ..PartyConfig::default()
                    },
                )
            })
            .collect()
    }

    pub fn build(&self, table: &Table, sites: usize) -> (Coordinator, Vec<Party>) {
        (self.coordinator(sites), self.parties(table, sites))
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

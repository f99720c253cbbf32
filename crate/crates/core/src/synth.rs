//! Seeded synthetic tables used by tests, examples and the bundled data.
//!
//! The comparison family: every table holds two integer columns `x1`,
//! `x2`, a label `y` = `yes` when `x1 > x2`, and a table-specific set of
//! distractor columns drawn from a shared pool.

use rand::Rng;

use crate::numeric::rng;
use crate::table::{Cell, Column, DataType, Table};

/// Distractor columns: name plus either a categorical value pool or an
/// integer range.
#[derive(Clone, Copy, Debug)]
pub enum Distractor {
    Categorical(&'static str, &'static [&'static str]),
    Integer(&'static str, u32, u32),
}

impl Distractor {
    pub fn name(&self) -> &'static str {
        match self {
            Distractor::Categorical(n, _) | Distractor::Integer(n, _, _) => n,
        }
    }

    fn column(&self) -> Column {
        match self {
            Distractor::Categorical(n, _) => Column::new(*n, DataType::Categorical),
            Distractor::Integer(n, _, _) => Column::new(*n, DataType::Numerical),
        }
    }

    fn sample(&self, r: &mut impl Rng) -> String {
        match self {
            Distractor::Categorical(_, pool) => pool[r.random_range(0..pool.len())].to_string(),
            Distractor::Integer(_, lo, hi) => r.random_range(*lo..=*hi).to_string(),
        }
    }
}

pub const POOL: [Distractor; 9] = [
    Distractor::Categorical("colour", &["red", "green", "blue", "yellow"]),
    Distractor::Categorical("city", &["paris", "london", "tokyo", "rome"]),
    Distractor::Categorical("shape", &["circle", "square", "triangle"]),
    Distractor::Categorical("size", &["small", "medium", "large"]),
    Distractor::Categorical("weather", &["sunny", "rainy", "cloudy"]),
    Distractor::Categorical("material", &["wood", "metal", "glass"]),
    Distractor::Integer("age", 18, 80),
    Distractor::Integer("weight", 40, 120),
    Distractor::Integer("height", 150, 199),
];

/// Distractor sets of the pretraining tables (indices into [`POOL`]).
pub const PRETRAIN_SETS: [&[usize]; 5] = [&[0, 6], &[1, 3, 7], &[2, 8], &[4, 5, 6], &[0, 1, 8]];

/// A distractor set that no pretraining table uses.
pub const HELDOUT_SET: &[usize] = &[2, 4, 7];

pub const LABEL_YES: &str = "yes";
pub const LABEL_NO: &str = "no";
pub const TARGET: &str = "y";

/// Upper bound (exclusive) of `x1` and `x2`.
pub const VALUE_RANGE: u32 = 10;

/// `rows` rows of `x1, x2, <distractors>, y` with `x1 != x2`.
pub fn comparison_table(rows: usize, distractors: &[usize], seed: u64) -> Table {
    let mut r = rng::stream(seed, &[0x5359, distractors.len() as u64]);
    let mut schema = vec![
        Column::new("x1", DataType::Numerical),
        Column::new("x2", DataType::Numerical),
    ];
    schema.extend(distractors.iter().map(|&i| POOL[i].column()));
    schema.push(Column::new(TARGET, DataType::Categorical));
    let data = (0..rows)
        .map(|_| {
            let a = r.random_range(0..VALUE_RANGE);
            let mut b = r.random_range(0..VALUE_RANGE - 1);
            if b >= a {
                b += 1;
            }
            let mut row = vec![Cell::value(a.to_string()), Cell::value(b.to_string())];
            row.extend(
                distractors
                    .iter()
                    .map(|&i| Cell::value(POOL[i].sample(&mut r))),
            );
            row.push(Cell::value(if a > b { LABEL_YES } else { LABEL_NO }));
            row
        })
        .collect();
    Table::new(schema, data).expect("synthetic schema is valid")
}

/// One table per entry of [`PRETRAIN_SETS`].
pub fn pretrain_corpus(rows_per_table: usize, seed: u64) -> Vec<Table> {
    PRETRAIN_SETS
        .iter()
        .enumerate()
        .map(|(i, set)| comparison_table(rows_per_table, set, rng::derive_seed(seed, i as u64)))
        .collect()
}

/// Table with the held-out distractor set.
pub fn heldout_table(rows: usize, seed: u64) -> Table {
    comparison_table(rows, HELDOUT_SET, rng::derive_seed(seed, 0x4844))
}

/// Two clusters of rows over `cols` categorical columns: cluster `c` draws
/// every value from its own vocabulary. Returns the table and the cluster
/// of each row.
pub fn clustered_table(rows: usize, cols: usize, seed: u64) -> (Table, Vec<usize>) {
    const WORDS: [[&str; 4]; 2] = [
        ["red", "green", "blue", "yellow"],
        ["paris", "london", "tokyo", "rome"],
    ];
    let mut r = rng::stream(seed, &[0x434c]);
    let schema: Vec<Column> = (0..cols)
        .map(|j| Column::new(POOL[j % POOL.len()].name(), DataType::Categorical))
        .collect();
    let mut clusters = Vec::with_capacity(rows);
    let data = (0..rows)
        .map(|i| {
            let c = i % 2;
            clusters.push(c);
            (0..cols)
                .map(|_| Cell::value(WORDS[c][r.random_range(0..4)]))
                .collect()
        })
        .collect();
    (Table::new(schema, data).expect("distinct names"), clusters)
}

//! Synthetic datasets shaped like small clinical tables (a few hundred rows,
//! ten features on mixed scales).

use fedmesh_ml::data::Table;
use fedmesh_ml::rng::rng_for;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub rows: usize,
    pub features: usize,
    pub seed: u64,
    /// Prefix of a leading `id` column, e.g. a sentinel string.
    pub id_prefix: Option<String>,
}

impl SyntheticOptions {
    pub fn new(rows: usize, features: usize, seed: u64) -> Self {
        Self { rows, features, seed, id_prefix: None }
    }
}

fn header(opts: &SyntheticOptions) -> Vec<String> {
    let mut h = Vec::new();
    if opts.id_prefix.is_some() {
        h.push("id".to_string());
    }
    h.extend((0..opts.features).map(|j| format!("x{j}")));
    h.push("label".into());
    h
}

fn row(opts: &SyntheticOptions, i: usize, x: &[f64], y: f64) -> Vec<String> {
    let mut r = Vec::with_capacity(x.len() + 2);
    if let Some(p) = &opts.id_prefix {
        r.push(format!("{p}-{i}"));
    }
    r.extend(x.iter().map(f64::to_string));
    r.push(y.to_string());
    r
}

/// Per-feature offset and scale, so that unnormalized features differ.
fn feature_affine(j: usize) -> (f64, f64) {
    (10.0 * j as f64 - 20.0, 1.0 + (j % 4) as f64)
}

/// Two Gaussian classes with equal priors. The positive class is shifted
/// by `separation` standard deviations in every feature.
pub fn two_gaussians(opts: &SyntheticOptions, separation: f64) -> Table {
    let mut rng = rng_for(opts.seed, &[0x636c_6173]);
    let rows = (0..opts.rows)
        .map(|i| {
            let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let x: Vec<f64> = (0..opts.features)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let (off, sc) = feature_affine(j);
                    off + sc * (z + separation * y)
                })
                .collect();
            row(opts, i, &x, y)
        })
        .collect();
    Table { header: header(opts), rows }
}

/// `y = b0 + x b + noise`, with fixed coefficients drawn from the seed.
pub fn linear(opts: &SyntheticOptions, noise: f64) -> Table {
    let mut rng = rng_for(opts.seed, &[0x7265_6772]);
    let beta: Vec<f64> = (0..=opts.features).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let rows = (0..opts.rows)
        .map(|i| {
            let x: Vec<f64> = (0..opts.features)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let (off, sc) = feature_affine(j);
                    off + sc * z
                })
                .collect();
            let e: f64 = StandardNormal.sample(&mut rng);
            let y = beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>() + noise * e;
            row(opts, i, &x, y)
        })
        .collect();
    Table { header: header(opts), rows }
}

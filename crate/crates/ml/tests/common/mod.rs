#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fedmesh_core::app::{App, AppConfig, AppError, AppResult, SetupContext, SetupInfo, StepLog};
use fedmesh_core::ClientId;
use fedmesh_ml::data::{write_table, Table};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `y = x beta + noise * eps`, features roughly N(0, 1) shifted.
pub fn regression(n: usize, d: usize, noise: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, d, |_, j| normal(&mut r) * (1.0 + j as f64 * 0.5) + j as f64);
    let beta = DVector::from_fn(d + 1, |_, _| r.gen_range(-2.0..2.0));
    let y = DVector::from_fn(n, |i, _| beta[0] + (0..d).map(|j| x[(i, j)] * beta[j + 1]).sum::<f64>() + noise * normal(&mut r));
    (x, y, beta)
}

/// Two overlapping Gaussian classes.
pub fn classification(n: usize, d: usize, shift: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let y = DVector::from_fn(n, |_, _| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    let x = DMatrix::from_fn(n, d, |i, j| normal(&mut r) + if y[i] == 1.0 { shift / (1.0 + j as f64) } else { 0.0 });
    (x, y)
}

pub fn with_ones(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

pub fn write_csv(path: &Path, x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) {
    let mut header: Vec<String> = (0..x.ncols()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    let rows = rows
        .iter()
        .map(|&i| {
            let mut r: Vec<String> = (0..x.ncols()).map(|j| x[(i, j)].to_string()).collect();
            r.push(y[i].to_string());
            r
        })
        .collect();
    write_table(path, &Table { header, rows }).unwrap();
}

pub fn ids(n: usize) -> Vec<ClientId> {
    (0..n).map(|i| ClientId::from(format!("site{i}").as_str())).collect()
}

/// Passes payloads between in-memory apps the way the controller does;
/// client 0 coordinates.
pub fn drive(apps: &mut [Box<dyn App>], ids: &[ClientId]) -> AppResult<()> {
    let n = apps.len();
    for _ in 0..100_000 {
        let mut progressed = false;
        for i in 0..n {
            while apps[i].status().available {
                let status = apps[i].status();
                let data = apps[i].fetch_outgoing()?;
                progressed = true;
                if i == 0 {
                    match status.destination {
                        Some(d) if d == ids[0] => apps[0].deliver_incoming(data, Some(ids[0].clone()))?,
                        Some(d) => {
                            let j = ids.iter().position(|x| *x == d).expect("known destination");
                            apps[j].deliver_incoming(data, None)?;
                        }
                        None => {
                            for app in apps.iter_mut().skip(1) {
                                app.deliver_incoming(data.clone(), None)?;
                            }
                        }
                    }
                } else {
                    apps[0].deliver_incoming(data, Some(ids[i].clone()))?;
                }
            }
        }
        if apps.iter().all(|a| a.status().finished) {
            return Ok(());
        }
        if !progressed {
            return Err(AppError::failure("session stalled"));
        }
    }
    Err(AppError::failure("session did not finish"))
}

/// Runs one app step for every client; returns the step logs.
pub fn run_step(app: &str, config: &AppConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> AppResult<Vec<StepLog>> {
    let registry = fedmesh_ml::registry();
    let ids = ids(inputs.len());
    let mut apps = Vec::new();
    let mut logs = Vec::new();
    for (i, (input, output)) in inputs.iter().zip(outputs).enumerate() {
        std::fs::create_dir_all(output).unwrap();
        let mut app = registry.create(app, config)?;
        let log = StepLog::default();
        app.setup(SetupContext {
            info: SetupInfo { id: ids[i].clone(), master: i == 0, clients: ids.clone() },
            input_dir: input.clone(),
            output_dir: output.clone(),
            config: config.clone(),
            log: log.clone(),
        })?;
        apps.push(app);
        logs.push(log);
    }
    drive(&mut apps, &ids)?;
    Ok(logs)
}

pub fn dirs(root: &Path, name: &str, n: usize) -> Vec<PathBuf> {
    (0..n).map(|i| root.join(format!("{name}_{i}"))).collect()
}

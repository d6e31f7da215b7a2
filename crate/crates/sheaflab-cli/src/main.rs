//! Command-line harness: theorem-verification suite, synthetic
//! experiments, oracle diffusion trajectories, training on user datasets,
//! and complexity measurements. All outputs are CSV/JSON; every run
//! writes a resolved-config JSON next to its outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sheaflab::diffusion::{
    linear_probe, scn_forward, Activation, DiffusionConfig, ProbeConfig, SCNParams, Scheme,
};
use sheaflab::graph::{
    complete_graph, cycle_graph, path_graph, random_connected_graph, random_tree, synth_bipartite,
    synth_multiclass, Graph, LabeledDataset,
};
use sheaflab::laplacian::{assemble, normalize, NormalizationKind};
use sheaflab::learn::{
    save_checkpoint, train, write_history_csv, NSDModel, NSDModelConfig, TrainConfig,
};
use sheaflab::linalg::{spectral_norm, Mat};
use sheaflab::oracle::{
    diagonal_multiclass_sheaf, energy_increase_witness, homophily_sym_sheaf, impossibility_probe,
    orth_bundle_sheaf, regular_rotation_sheaf, signed_two_class_sheaf, ClassAssignment,
};
use sheaflab::sheaf::{householder_orthogonal, random_bundle, EdgeMaps, MapFamily, Sheaf};
use sheaflab::spectral::{
    check_gap_lower, check_gap_upper, check_harmonic_dim, dirichlet_energy, eigh, harmonic_space,
    project_harmonic, sym_normalized_laplacian, CheckReport, KERNEL_TOL,
};

// ---------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------

/// 0 success, 1 check failure / internal invariant violation,
/// 2 usage or format error.
enum CliError {
    Usage(String),
    Check(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) | CliError::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Check(m) | CliError::Internal(m) => m,
        }
    }
}

fn internal<E: Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------
// Config file: flat `key = value`, flags win, unknown keys rejected
// ---------------------------------------------------------------------

struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&PathBuf>, known: &[&str]) -> CliResult<FileConfig> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    usage(format!(
                        "config line {}: expected `key = value`, got `{raw}`",
                        lineno + 1
                    ))
                })?;
                let key = key.trim().to_string();
                if !known.contains(&key.as_str()) {
                    return Err(usage(format!("unknown config key `{key}`")));
                }
                map.insert(key, value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| usage(format!("config key `{key}` = `{raw}`: {e}"))),
        }
    }
}

/// Flag > config file > default.
fn resolve<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> CliResult<T>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(internal)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn prepare_out_dir(out_dir: &str) -> CliResult<PathBuf> {
    let dir = PathBuf::from(out_dir);
    fs::create_dir_all(&dir).map_err(|e| internal(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn thread_cap() -> usize {
    std::env::var("SHEAFLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

/// Runs `count` independent jobs across at most SHEAFLAB_THREADS workers
/// (default 1), returning results in job order regardless of scheduling.
fn run_jobs<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = thread_cap().min(count.max(1));
    if threads <= 1 {
        return (0..count).map(f).collect();
    }
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = f(i);
                results.lock().expect("job results lock")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("job results lock")
        .into_iter()
        .map(|o| o.expect("every job index filled"))
        .collect()
}

// ---------------------------------------------------------------------
// Shared numeric helpers
// ---------------------------------------------------------------------

fn rng_from(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt))
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Frobenius-normalized copy, so probe results are scale invariant.
fn normalized(x: &Mat) -> Mat {
    let norm = x.frob_norm();
    if norm > 1e-300 {
        x.scale(1.0 / norm)
    } else {
        x.clone()
    }
}

/// Each row scaled to unit norm: per-node feature directions.
fn row_normalized(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let norm: f64 = (0..x.cols()).map(|c| x[(r, c)] * x[(r, c)]).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for c in 0..x.cols() {
                out[(r, c)] /= norm;
            }
        }
    }
    out
}

/// Applies `w1` to every length-d stalk block of `x`.
fn apply_stalkwise(w1: &Mat, x: &Mat, d: usize) -> Mat {
    let n = x.rows() / d;
    let mut out = Mat::zeros(x.rows(), x.cols());
    for v in 0..n {
        out.set_block(v * d, 0, &w1.matmul(&x.block(v * d, 0, d, x.cols())));
    }
    out
}

/// Accuracy of the strongest linear readout of the diffusion limit:
/// projects `x` onto the harmonic space, rearranges stalks into node
/// feature rows, and probes with train = all nodes.
fn limit_probe_accuracy(s: &Sheaf, labels: &[usize], num_classes: usize, x: &Mat) -> CliResult<f64> {
    let delta = sym_normalized_laplacian(s).map_err(internal)?;
    let h = harmonic_space(&delta.matrix, KERNEL_TOL).map_err(internal)?;
    let projected = project_harmonic(&h, x);
    let feats = row_normalized(
        &sheaflab::diffusion::node_features(&projected, s.d()).map_err(internal)?,
    );
    let all: Vec<usize> = (0..s.graph().n()).collect();
    let acc = linear_probe(
        &feats,
        labels,
        num_classes,
        &all,
        &[],
        &ProbeConfig::default(),
    )
    .map_err(internal)?;
    Ok(acc.train)
}

/// Mean state vector (first feature column) per class.
fn class_means(x: &Mat, labels: &[usize], num_classes: usize, d: usize) -> Vec<Vec<f64>> {
    let n = x.rows() / d;
    let mut sums = vec![vec![0.0f64; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for v in 0..n {
        for r in 0..d {
            sums[labels[v]][r] += x[(v * d + r, 0)];
        }
        counts[labels[v]] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for e in s.iter_mut() {
                *e /= c as f64;
            }
        }
    }
    sums
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return f64::NAN;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Pairwise angles (degrees) between class mean states.
fn class_pair_angles(x: &Mat, labels: &[usize], num_classes: usize, d: usize) -> Vec<Vec<f64>> {
    let means = class_means(x, labels, num_classes, d);
    (0..num_classes)
        .map(|a| {
            (0..num_classes)
                .map(|b| angle_deg(&means[a], &means[b]))
                .collect()
        })
        .collect()
}

fn distance_to_multiple(angle: f64, step: f64) -> f64 {
    let rem = (angle % step + step) % step;
    rem.min(step - rem)
}

// ---------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "sheaflab",
    about = "Cellular sheaves on graphs: verification suites, diffusion experiments, training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the theorem-verification suites and write a JSON report.
    Verify(VerifyArgs),
    /// Two-class bipartite experiment: general vs symmetric d=1 learners.
    SyntheticBipartite(SynBipartiteArgs),
    /// Three-class heterophily experiment: 1D vs 2D stalks, angle census.
    SyntheticMulticlass(SynMulticlassArgs),
    /// Diffuse random features over a constructed sheaf and record the
    /// class geometry along the trajectory.
    OracleDiffuse(OracleDiffuseArgs),
    /// Train the diffusion model on a dataset directory.
    Train(TrainArgs),
    /// Measure one-layer wall time across problem sizes.
    Complexity(ComplexityArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    Gap,
    Harmonic,
    Energy,
    Separation,
}

impl Suite {
    fn as_str(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Gap => "gap",
            Suite::Harmonic => "harmonic",
            Suite::Energy => "energy",
            Suite::Separation => "separation",
        }
    }
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_draws: Option<usize>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynBipartiteArgs {
    #[arg(long)]
    n_a: Option<usize>,
    #[arg(long)]
    n_b: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    /// Distance between the two class feature means (features overlap
    /// heavily at the default).
    #[arg(long)]
    mean_sep: Option<f64>,
    /// Feature noise scale.
    #[arg(long)]
    sigma_feat: Option<f64>,
    /// Which learners to run: general, symmetric, or both.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated diffusion times for the probe curve.
    #[arg(long)]
    t_grid: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynMulticlassArgs {
    #[arg(long)]
    classes: Option<usize>,
    /// Target edge homophily of the fixture.
    #[arg(long)]
    h: Option<f64>,
    /// Comma-separated stalk widths to compare.
    #[arg(long)]
    d_grid: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct OracleDiffuseArgs {
    /// homophily | signed | diagonal | orth | rotation
    #[arg(long)]
    construction: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    /// Graph spec: cycle:N, path:N, complete:N, random:N,P
    #[arg(long)]
    graph: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    /// Intra-class weight (homophily) or edge weight (signed).
    #[arg(long)]
    alpha: Option<f64>,
    /// Diffusion horizon; defaults to 40 / spectral gap.
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory with graph.json, features.csv, labels.csv, splits.json.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    householder_count: Option<usize>,
    /// identity | relu | elu | leaky_relu:SLOPE
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    hybrid: Option<bool>,
    #[arg(long)]
    symmetric: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    wd_sheaf: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ComplexityArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Edge count of the base grid point; the doubled point uses 2x.
    #[arg(long)]
    m_base: Option<usize>,
    /// Timing trials per grid point (median reported).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::SyntheticBipartite(args) => cmd_synthetic_bipartite(args),
        Cmd::SyntheticMulticlass(args) => cmd_synthetic_multiclass(args),
        Cmd::OracleDiffuse(args) => cmd_oracle_diffuse(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Complexity(args) => cmd_complexity(args),
    };
    match outcome {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

// ---------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------

/// A named deterministic check; `expected_violation` marks witness cases
/// that pass by demonstrating a violation.
struct CheckJob {
    name: String,
    job: Box<dyn Fn() -> CliResult<CheckReport> + Sync + Send>,
}

fn small_graph_pool(seed: u64) -> Vec<Graph> {
    vec![
        cycle_graph(4),
        cycle_graph(5),
        cycle_graph(6),
        cycle_graph(7),
        cycle_graph(8),
        path_graph(6),
        complete_graph(4),
        random_tree(7, seed),
        random_connected_graph(7, 0.45, seed + 1).expect("small pool graph"),
        random_connected_graph(8, 0.4, seed + 2).expect("small pool graph"),
    ]
}

fn gap_suite(seed: u64, n_draws: usize) -> Vec<CheckJob> {
    let mut jobs: Vec<CheckJob> = Vec::new();
    let pool = small_graph_pool(seed);
    for i in 0..n_draws {
        let g = pool[i % pool.len()].clone();
        let d = 2 + i % 2;
        let s = seed + i as u64;
        jobs.push(CheckJob {
            name: format!("gap_upper[{i}]"),
            job: Box::new(move || {
                let bundle = random_bundle(&g, d, s).map_err(internal)?;
                Ok(check_gap_upper(&bundle).map_err(internal)?.check_report())
            }),
        });
    }
    for i in 0..n_draws.max(5) / 5 {
        let s = seed + 1000 + i as u64;
        jobs.push(CheckJob {
            name: format!("gap_upper_tree[{i}]"),
            job: Box::new(move || {
                let g = random_tree(6 + i % 3, s);
                let bundle = random_bundle(&g, 2 + i % 3, s).map_err(internal)?;
                Ok(check_gap_upper(&bundle).map_err(internal)?.check_report())
            }),
        });
    }
    let lower_pool = [cycle_graph(4), cycle_graph(6), cycle_graph(8), complete_graph(4)];
    for i in 0..n_draws {
        let g = lower_pool[i % lower_pool.len()].clone();
        let s = seed + 2000 + i as u64;
        jobs.push(CheckJob {
            name: format!("gap_lower[{i}]"),
            job: Box::new(move || {
                let bundle = random_bundle(&g, 2, s).map_err(internal)?;
                Ok(check_gap_lower(&bundle).map_err(internal)?.check_report())
            }),
        });
    }
    jobs
}

fn harmonic_suite(seed: u64, n_draws: usize) -> Vec<CheckJob> {
    let mut jobs: Vec<CheckJob> = Vec::new();
    let pool = small_graph_pool(seed + 7);
    for i in 0..n_draws {
        let g = pool[i % pool.len()].clone();
        let d = 2 + i % 3;
        let s = seed + 3000 + i as u64;
        jobs.push(CheckJob {
            name: format!("harmonic_dim[{i}]"),
            job: Box::new(move || {
                let bundle = random_bundle(&g, d, s).map_err(internal)?;
                Ok(check_harmonic_dim(&bundle).map_err(internal)?.check_report())
            }),
        });
    }
    // Path-independent oracles must report full-dimensional kernels.
    jobs.push(CheckJob {
        name: "harmonic_dim_orth_oracle".to_string(),
        job: Box::new(|| {
            let g = cycle_graph(8);
            let cls = ClassAssignment::from_labels((0..8).map(|v| v % 4).collect())
                .map_err(internal)?;
            let s = orth_bundle_sheaf(&g, &cls, 2).map_err(internal)?;
            Ok(check_harmonic_dim(&s).map_err(internal)?.check_report())
        }),
    });
    jobs.push(CheckJob {
        name: "harmonic_dim_rotation_oracle".to_string(),
        job: Box::new(|| {
            let g = cycle_graph(12);
            let cls = ClassAssignment::from_labels((0..12).map(|v| v % 6).collect())
                .map_err(internal)?;
            let s = regular_rotation_sheaf(&g, &cls).map_err(internal)?;
            Ok(check_harmonic_dim(&s).map_err(internal)?.check_report())
        }),
    });
    jobs
}

/// Random scalar sheaf whose per-edge map products are positive.
fn random_positive_scalar_sheaf(g: &Graph, rng: &mut ChaCha8Rng) -> CliResult<Sheaf> {
    let maps = (0..g.m())
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let fu = sign * rng.gen_range(0.3..1.5);
            let fv = sign * rng.gen_range(0.3..1.5);
            EdgeMaps {
                fu: Mat::from_vec(1, 1, vec![fu]),
                fv: Mat::from_vec(1, 1, vec![fv]),
            }
        })
        .collect();
    Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps).map_err(internal)
}

/// Random orthogonal sheaf with identical restriction maps per edge.
fn random_orth_sym_sheaf(g: &Graph, d: usize, rng: &mut ChaCha8Rng) -> CliResult<Sheaf> {
    let maps = (0..g.m())
        .map(|_| {
            let vs: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let m = householder_orthogonal(&vs, d).map_err(internal)?;
            Ok(EdgeMaps {
                fu: m.clone(),
                fv: m,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Sheaf::new(g.clone(), d, MapFamily::Orthogonal, maps).map_err(internal)
}

fn energy_suite(seed: u64, n_draws: usize) -> Vec<CheckJob> {
    let mut jobs: Vec<CheckJob> = Vec::new();
    for i in 0..n_draws {
        let s = seed + 4000 + i as u64;
        jobs.push(CheckJob {
            name: format!("energy_scalar[{i}]"),
            job: Box::new(move || {
                let mut rng = rng_from(s, 0);
                let g = random_connected_graph(6 + (s % 6) as usize, 0.5, s).map_err(internal)?;
                let sheaf = random_positive_scalar_sheaf(&g, &mut rng)?;
                let f = 3;
                let params = SCNParams {
                    w1: random_mat(1, 1, &mut rng),
                    w2: random_mat(f, f, &mut rng),
                    sigma: Activation::Relu,
                };
                let x = random_mat(g.n(), f, &mut rng);
                Ok(sheaflab::diffusion::check_energy_decrease(&sheaf, &params, &x)
                    .map_err(internal)?
                    .check_report())
            }),
        });
        jobs.push(CheckJob {
            name: format!("energy_orth_sym[{i}]"),
            job: Box::new(move || {
                let mut rng = rng_from(s, 1);
                let d = 2 + (s % 3) as usize;
                let g = random_connected_graph(5 + (s % 4) as usize, 0.5, s + 1)
                    .map_err(internal)?;
                let sheaf = random_orth_sym_sheaf(&g, d, &mut rng)?;
                let f = 2;
                let params = SCNParams {
                    w1: random_mat(d, d, &mut rng),
                    w2: random_mat(f, f, &mut rng),
                    sigma: Activation::LeakyRelu(0.2),
                };
                let x = random_mat(g.n() * d, f, &mut rng);
                Ok(sheaflab::diffusion::check_energy_decrease(&sheaf, &params, &x)
                    .map_err(internal)?
                    .check_report())
            }),
        });
    }
    // Witness: arbitrarily small W1 that still raises the energy of a
    // harmonic state — passes by exhibiting the violation.
    for (i, eps) in [1e-1, 1e-3].into_iter().enumerate() {
        let s = seed + 4900 + i as u64;
        jobs.push(CheckJob {
            name: format!("energy_witness[eps={eps}]"),
            job: Box::new(move || {
                let g = random_connected_graph(7, 0.5, s).map_err(internal)?;
                let w = energy_increase_witness(&g, 2, eps).map_err(internal)?;
                let delta = sym_normalized_laplacian(&w.sheaf).map_err(internal)?;
                let e_in = dirichlet_energy(&w.sheaf, &delta, &w.x).map_err(internal)?;
                let pushed = apply_stalkwise(&w.w1, &w.x, 2);
                let e_out = dirichlet_energy(&w.sheaf, &delta, &pushed).map_err(internal)?;
                let w1_norm = spectral_norm(&w.w1);
                Ok(CheckReport {
                    prop: "energy_witness_increase".to_string(),
                    inputs: json!({
                        "eps": eps,
                        "w1_norm": w1_norm,
                        "expected_violation": true,
                    }),
                    lhs: e_out,
                    rhs: e_in,
                    holds: e_in <= 1e-10 && e_out > 0.0 && w1_norm < eps,
                    tolerance: 1e-10,
                })
            }),
        });
    }
    jobs
}

/// Symmetric scalar sheaf: one random nonzero scalar per edge, shared by
/// both restriction maps.
fn random_symmetric_scalar_sheaf(g: &Graph, rng: &mut ChaCha8Rng) -> CliResult<Sheaf> {
    let maps = (0..g.m())
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let w = sign * rng.gen_range(0.3..1.5);
            EdgeMaps {
                fu: Mat::from_vec(1, 1, vec![w]),
                fv: Mat::from_vec(1, 1, vec![w]),
            }
        })
        .collect();
    Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps).map_err(internal)
}

/// Random invertible scalar sheaf (entries bounded away from zero).
fn random_invertible_scalar_sheaf(g: &Graph, rng: &mut ChaCha8Rng) -> CliResult<Sheaf> {
    let draw = |rng: &mut ChaCha8Rng| {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.2..1.5)
    };
    let maps = (0..g.m())
        .map(|_| EdgeMaps {
            fu: Mat::from_vec(1, 1, vec![draw(rng)]),
            fv: Mat::from_vec(1, 1, vec![draw(rng)]),
        })
        .collect();
    Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps).map_err(internal)
}

fn separation_suite(seed: u64, n_draws: usize) -> Vec<CheckJob> {
    let mut jobs: Vec<CheckJob> = Vec::new();
    // (a) sign-alternating sheaves fully separate two bipartite classes.
    for i in 0..10 {
        let s = seed + 5000 + i as u64;
        jobs.push(CheckJob {
            name: format!("separation_signed[{i}]"),
            job: Box::new(move || {
                let data =
                    synth_bipartite(3 + i % 3, 3 + (i + 1) % 3, 0.6, 1.0, 0.5, s)
                        .map_err(internal)?;
                let cls = ClassAssignment::from_labels(data.labels.clone()).map_err(internal)?;
                let mut rng = rng_from(s, 2);
                let alpha: Vec<f64> = (0..data.graph.m())
                    .map(|_| rng.gen_range(0.5..2.0))
                    .collect();
                let sheaf =
                    signed_two_class_sheaf(&data.graph, &cls, &alpha).map_err(internal)?;
                let x = random_mat(data.graph.n(), 3, &mut rng);
                let probe = impossibility_probe(&sheaf, &cls, &x).map_err(internal)?;
                Ok(CheckReport {
                    prop: "signed_full_separation".to_string(),
                    inputs: json!({
                        "n": data.graph.n(),
                        "m": data.graph.m(),
                        "harmonic_dim": probe.harmonic_dim,
                    }),
                    lhs: probe.accuracy,
                    rhs: 1.0,
                    holds: probe.accuracy >= 1.0 && probe.separable,
                    tolerance: 0.0,
                })
            }),
        });
    }
    // (b) symmetric transports on balanced bipartite graphs cannot beat
    // the class prior by more than 5 points.
    for i in 0..n_draws {
        let s = seed + 5100 + i as u64;
        jobs.push(CheckJob {
            name: format!("separation_symmetric_cap[{i}]"),
            job: Box::new(move || {
                let half = 4 + i % 3;
                let data = synth_bipartite(half, half, 0.6, 1.0, 0.5, s).map_err(internal)?;
                let cls = ClassAssignment::from_labels(data.labels.clone()).map_err(internal)?;
                let mut rng = rng_from(s, 3);
                let sheaf = random_symmetric_scalar_sheaf(&data.graph, &mut rng)?;
                let x = random_mat(data.graph.n(), 3, &mut rng);
                let probe = impossibility_probe(&sheaf, &cls, &x).map_err(internal)?;
                Ok(probe.check_report(0.5 + 0.05))
            }),
        });
    }
    // (c) diagonal maps with d = C separate three classes exactly.
    jobs.push(CheckJob {
        name: "separation_diagonal_d3".to_string(),
        job: Box::new(move || {
            let g = random_connected_graph(9, 0.5, seed + 5200).map_err(internal)?;
            let labels: Vec<usize> = (0..9).map(|v| v % 3).collect();
            let cls = ClassAssignment::from_labels(labels.clone()).map_err(internal)?;
            let sheaf = diagonal_multiclass_sheaf(&g, &cls, 3).map_err(internal)?;
            let mut rng = rng_from(seed, 4);
            let x = random_mat(9 * 3, 2, &mut rng);
            let acc = limit_probe_accuracy(&sheaf, &labels, 3, &x)?;
            Ok(CheckReport {
                prop: "diagonal_full_separation".to_string(),
                inputs: json!({"d": 3, "classes": 3}),
                lhs: acc,
                rhs: 1.0,
                holds: acc >= 1.0,
                tolerance: 0.0,
            })
        }),
    });
    // (d) orthogonal bundles: full separation and right-angle geometry.
    for (name, n, c, d) in [("o2_c4", 8usize, 4usize, 2usize), ("o4_c8", 16, 8, 4)] {
        jobs.push(CheckJob {
            name: format!("separation_orth_{name}"),
            job: Box::new(move || {
                let g = cycle_graph(n);
                let labels: Vec<usize> = (0..n).map(|v| v % c).collect();
                let cls = ClassAssignment::from_labels(labels.clone()).map_err(internal)?;
                let sheaf = orth_bundle_sheaf(&g, &cls, d).map_err(internal)?;
                let mut rng = rng_from(seed, 5 + n as u64);
                let x = random_mat(n * d, 2, &mut rng);
                let acc = limit_probe_accuracy(&sheaf, &labels, c, &x)?;
                let delta = sym_normalized_laplacian(&sheaf).map_err(internal)?;
                let h = harmonic_space(&delta.matrix, KERNEL_TOL).map_err(internal)?;
                let projected = project_harmonic(&h, &x);
                let angles = class_pair_angles(&projected, &labels, c, d);
                let mut worst = 0.0f64;
                for a in 0..c {
                    for b in 0..c {
                        if a != b {
                            worst = worst.max(distance_to_multiple(angles[a][b], 90.0));
                        }
                    }
                }
                Ok(CheckReport {
                    prop: "orth_full_separation".to_string(),
                    inputs: json!({
                        "d": d,
                        "classes": c,
                        "worst_angle_deviation_deg": worst,
                    }),
                    lhs: acc,
                    rhs: 1.0,
                    holds: acc >= 1.0 && worst <= 1.0,
                    tolerance: 1.0,
                })
            }),
        });
    }
    // (e) any invertible scalar sheaf leaves some of three classes inside
    // the others' hull — passes by exhibiting the violation.
    for i in 0..n_draws {
        let s = seed + 5300 + i as u64;
        jobs.push(CheckJob {
            name: format!("separation_hull_violation[{i}]"),
            job: Box::new(move || {
                let g = random_connected_graph(9, 0.5, s).map_err(internal)?;
                let labels: Vec<usize> = (0..9).map(|v| v % 3).collect();
                let cls = ClassAssignment::from_labels(labels).map_err(internal)?;
                let mut rng = rng_from(s, 6);
                let sheaf = random_invertible_scalar_sheaf(&g, &mut rng)?;
                let x = random_mat(9, 3, &mut rng);
                let probe = impossibility_probe(&sheaf, &cls, &x).map_err(internal)?;
                Ok(CheckReport {
                    prop: "multiclass_hull_violation".to_string(),
                    inputs: json!({
                        "classes": 3,
                        "accuracy": probe.accuracy,
                        "expected_violation": true,
                    }),
                    lhs: if probe.hull_violation { 1.0 } else { 0.0 },
                    rhs: 1.0,
                    holds: probe.hull_violation && !probe.separable,
                    tolerance: 0.0,
                })
            }),
        });
    }
    jobs
}

fn cmd_verify(args: VerifyArgs) -> CliResult<()> {
    const KEYS: &[&str] = &["seed", "n_draws", "out_dir"];
    let file = FileConfig::load(args.config.as_ref(), KEYS)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let n_draws = resolve(args.n_draws, &file, "n_draws", 50)?;
    let out_dir = resolve(args.out_dir, &file, "out_dir", "out/verify".to_string())?;
    if n_draws == 0 {
        return Err(usage("n_draws must be at least 1"));
    }
    let dir = prepare_out_dir(&out_dir)?;
    write_json(
        &dir.join("resolved_config.json"),
        &json!({
            "command": "verify",
            "suite": args.suite.as_str(),
            "seed": seed,
            "n_draws": n_draws,
            "out_dir": out_dir,
            "threads": thread_cap(),
        }),
    )?;

    let mut jobs: Vec<CheckJob> = Vec::new();
    if matches!(args.suite, Suite::All | Suite::Gap) {
        jobs.extend(gap_suite(seed, n_draws));
    }
    if matches!(args.suite, Suite::All | Suite::Harmonic) {
        jobs.extend(harmonic_suite(seed, n_draws));
    }
    if matches!(args.suite, Suite::All | Suite::Energy) {
        jobs.extend(energy_suite(seed, n_draws));
    }
    if matches!(args.suite, Suite::All | Suite::Separation) {
        jobs.extend(separation_suite(seed, n_draws));
    }

    let results = run_jobs(jobs.len(), |i| (jobs[i].job)());
    let mut reports = Vec::with_capacity(jobs.len());
    let mut failed = 0usize;
    for (job, result) in jobs.iter().zip(results) {
        let report = result?;
        let ok = report.holds;
        println!(
            "[{}] {} — {} (lhs={:.6e}, rhs={:.6e})",
            if ok { "PASS" } else { "FAIL" },
            job.name,
            report.prop,
            report.lhs,
            report.rhs
        );
        if !ok {
            failed += 1;
        }
        reports.push(json!({
            "name": job.name,
            "report": serde_json::to_value(&report).map_err(internal)?,
        }));
    }
    let total = reports.len();
    write_json(
        &dir.join("verify_report.json"),
        &json!({
            "suite": args.suite.as_str(),
            "total": total,
            "passed": total - failed,
            "failed": failed,
            "checks": reports,
        }),
    )?;
    println!("{} checks, {} passed, {failed} failed", total, total - failed);
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {total} checks failed")));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// synthetic-bipartite
// ---------------------------------------------------------------------

fn parse_f64_list(raw: &str) -> CliResult<Vec<f64>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| usage(format!("grid entry `{tok}`: {e}")))
        })
        .collect()
}

fn parse_usize_list(raw: &str) -> CliResult<Vec<usize>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|e| usage(format!("grid entry `{tok}`: {e}")))
        })
        .collect()
}

struct BipartiteModelOutcome {
    label: String,
    model_test_acc: f64,
    probe_rows: Vec<(f64, f64, f64)>,
    transports: Vec<f64>,
    negative_fraction: f64,
}

/// Trains one d=1 learner (optionally symmetric) on the bipartite fixture
/// and probes linear separability of the continuously diffused encoder
/// features under the trained sheaf at each grid time.
fn run_bipartite_model(
    data: &LabeledDataset,
    symmetric: bool,
    t_grid: &[f64],
    epochs: usize,
    lr: f64,
    layers: usize,
    channels: usize,
    seed: u64,
) -> CliResult<BipartiteModelOutcome> {
    let cfg = NSDModelConfig {
        in_features: data.features.cols(),
        num_classes: data.num_classes,
        d: 1,
        channels,
        layers,
        family: MapFamily::General,
        householder_count: 1,
        sigma: Activation::Elu,
        symmetric,
        hybrid: false,
    };
    let mut model = NSDModel::new(cfg, seed).map_err(internal)?;
    let tc = TrainConfig {
        lr,
        epochs,
        weight_decay_sheaf: 0.0,
        weight_decay_regular: 0.0,
        patience: epochs,
        seed,
    };
    let result = train(&mut model, data, &tc).map_err(internal)?;

    let trace = model.unroll(data).map_err(internal)?;
    let sheaf = trace
        .sheaves
        .last()
        .ok_or_else(|| internal("model must have at least one layer"))?;
    let transports: Vec<f64> = sheaf
        .maps()
        .iter()
        .map(|em| em.fu[(0, 0)] * em.fv[(0, 0)])
        .collect();
    let negative = transports.iter().filter(|&&t| t < 0.0).count();
    let negative_fraction = negative as f64 / transports.len().max(1) as f64;

    // Continuous diffusion of the encoder output under the learned sheaf.
    let l = assemble(sheaf);
    let delta = normalize(&l, NormalizationKind::AugSym).map_err(internal)?;
    let x0 = trace.states[0].clone();
    let probe_cfg = ProbeConfig::default();
    let mut probe_rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let state = if t <= 0.0 {
            x0.clone()
        } else {
            let dcfg = DiffusionConfig::new(Scheme::Rk4, 1.0f64.min(t), t, usize::MAX);
            sheaflab::diffusion::diffuse(&delta, &x0, &dcfg)
                .map_err(internal)?
                .final_state()
                .clone()
        };
        let feats = sheaflab::diffusion::node_features(&normalized(&state), 1)
            .map_err(internal)?;
        let acc = linear_probe(
            &feats,
            &data.labels,
            data.num_classes,
            &data.train,
            &data.test,
            &probe_cfg,
        )
        .map_err(internal)?;
        probe_rows.push((t, acc.train, acc.test.unwrap_or(f64::NAN)));
    }
    Ok(BipartiteModelOutcome {
        label: if symmetric { "symmetric" } else { "general" }.to_string(),
        model_test_acc: result.best.test_acc,
        probe_rows,
        transports,
        negative_fraction,
    })
}

fn cmd_synthetic_bipartite(args: SynBipartiteArgs) -> CliResult<()> {
    const KEYS: &[&str] = &[
        "n_a", "n_b", "p", "mean_sep", "sigma_feat", "model", "t_grid", "epochs", "lr",
        "layers", "channels", "seed", "out_dir",
    ];
    let file = FileConfig::load(args.config.as_ref(), KEYS)?;
    let n_a = resolve(args.n_a, &file, "n_a", 20)?;
    let n_b = resolve(args.n_b, &file, "n_b", 20)?;
    let p = resolve(args.p, &file, "p", 0.3)?;
    let mean_sep = resolve(args.mean_sep, &file, "mean_sep", 1.0)?;
    let sigma_feat = resolve(args.sigma_feat, &file, "sigma_feat", 1.0)?;
    let model = resolve(args.model, &file, "model", "both".to_string())?;
    let t_grid_raw = resolve(
        args.t_grid,
        &file,
        "t_grid",
        "0,1,2,4,8,16,32,64".to_string(),
    )?;
    let epochs = resolve(args.epochs, &file, "epochs", 600)?;
    let lr = resolve(args.lr, &file, "lr", 0.02)?;
    let layers = resolve(args.layers, &file, "layers", 4)?;
    let channels = resolve(args.channels, &file, "channels", 2)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let out_dir = resolve(args.out_dir, &file, "out_dir", "out/bipartite".to_string())?;
    let t_grid = parse_f64_list(&t_grid_raw)?;
    let run_general = matches!(model.as_str(), "both" | "general");
    let run_symmetric = matches!(model.as_str(), "both" | "symmetric");
    if !run_general && !run_symmetric {
        return Err(usage(format!(
            "model must be general, symmetric, or both, got `{model}`"
        )));
    }

    let dir = prepare_out_dir(&out_dir)?;
    write_json(
        &dir.join("resolved_config.json"),
        &json!({
            "command": "synthetic-bipartite",
            "n_a": n_a, "n_b": n_b, "p": p, "model": model,
            "t_grid": t_grid, "epochs": epochs, "lr": lr,
            "layers": layers, "channels": channels,
            "mean_sep": mean_sep, "sigma_feat": sigma_feat,
            "seed": seed, "out_dir": out_dir,
        }),
    )?;

    // Heavily overlapping class features: a linear readout of the raw
    // features stays near chance, and only diffusion over a learned
    // sign-consistent sheaf separates the partition.
    let data = synth_bipartite(n_a, n_b, p, mean_sep, sigma_feat, seed).map_err(internal)?;

    let mut outcomes = Vec::new();
    if run_general {
        outcomes.push(run_bipartite_model(
            &data, false, &t_grid, epochs, lr, layers, channels, seed,
        )?);
    }
    if run_symmetric {
        outcomes.push(run_bipartite_model(
            &data, true, &t_grid, epochs, lr, layers, channels, seed,
        )?);
    }

    let mut csv = String::from("model,t,train_probe_acc,test_probe_acc\n");
    for o in &outcomes {
        for &(t, tr, te) in &o.probe_rows {
            csv.push_str(&format!("{},{t},{tr},{te}\n", o.label));
        }
    }
    fs::write(dir.join("probe_curve.csv"), csv).map_err(internal)?;

    let summary: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| {
            let last = o.probe_rows.last().copied().unwrap_or((0.0, 0.0, 0.0));
            json!({
                "model": o.label,
                "model_test_acc": o.model_test_acc,
                "final_t": last.0,
                "final_train_probe_acc": last.1,
                "final_test_probe_acc": last.2,
                "negative_transport_fraction": o.negative_fraction,
                "transports": o.transports,
            })
        })
        .collect();
    write_json(
        &dir.join("summary.json"),
        &json!({
            "n": data.graph.n(),
            "m": data.graph.m(),
            "edge_homophily": data.edge_homophily(),
            "models": summary,
        }),
    )?;
    for o in &outcomes {
        let last = o.probe_rows.last().copied().unwrap_or((0.0, 0.0, 0.0));
        println!(
            "{}: final test probe acc {:.4}, negative transports {:.1}%",
            o.label,
            last.2,
            100.0 * o.negative_fraction
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------
// synthetic-multiclass
// ---------------------------------------------------------------------

struct MulticlassRun {
    d: usize,
    seed: u64,
    best_epoch: usize,
    train_acc: f64,
    val_acc: f64,
    test_acc: f64,
}

fn multiclass_model_config(
    d: usize,
    in_features: usize,
    num_classes: usize,
    channels: usize,
    layers: usize,
) -> NSDModelConfig {
    NSDModelConfig {
        in_features,
        num_classes,
        d,
        channels,
        layers,
        family: if d == 1 {
            MapFamily::General
        } else {
            MapFamily::Orthogonal
        },
        householder_count: if d == 1 { 1 } else { 2 },
        sigma: Activation::Elu,
        symmetric: false,
        hybrid: false,
    }
}

fn cmd_synthetic_multiclass(args: SynMulticlassArgs) -> CliResult<()> {
    const KEYS: &[&str] = &[
        "classes", "h", "d_grid", "n", "seeds", "epochs", "lr", "layers", "channels", "seed",
        "out_dir",
    ];
    let file = FileConfig::load(args.config.as_ref(), KEYS)?;
    let classes = resolve(args.classes, &file, "classes", 3)?;
    let h = resolve(args.h, &file, "h", 0.2)?;
    let d_grid_raw = resolve(args.d_grid, &file, "d_grid", "1,2".to_string())?;
    let n = resolve(args.n, &file, "n", 60)?;
    let seeds = resolve(args.seeds, &file, "seeds", 5)?;
    let epochs = resolve(args.epochs, &file, "epochs", 150)?;
    let lr = resolve(args.lr, &file, "lr", 0.02)?;
    // Three unroll layers: shallower stacks do not benefit from the extra
    // stalk dimension on this fixture, deeper ones overfit the 48-node
    // training split.
    let layers = resolve(args.layers, &file, "layers", 3)?;
    let channels = resolve(args.channels, &file, "channels", 2)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let out_dir = resolve(args.out_dir, &file, "out_dir", "out/multiclass".to_string())?;
    let d_grid = parse_usize_list(&d_grid_raw)?;
    if d_grid.is_empty() || seeds == 0 {
        return Err(usage("d_grid and seeds must be nonempty"));
    }

    let dir = prepare_out_dir(&out_dir)?;
    write_json(
        &dir.join("resolved_config.json"),
        &json!({
            "command": "synthetic-multiclass",
            "classes": classes, "h": h, "d_grid": d_grid, "n": n,
            "seeds": seeds, "epochs": epochs, "lr": lr,
            "layers": layers, "channels": channels,
            "seed": seed, "out_dir": out_dir,
        }),
    )?;

    let mut runs: Vec<MulticlassRun> = Vec::new();
    let mut angle_rows = String::from("d,seed,edge,u,v,intra,angle_deg\n");
    let mut intra_angles = Vec::new();
    let mut inter_angles = Vec::new();
    let mut d1_limit = Vec::new();
    for rep in 0..seeds {
        let fixture_seed = seed + rep as u64;
        let data = synth_multiclass(n, classes, h, 2, fixture_seed).map_err(internal)?;
        for &d in &d_grid {
            let cfg =
                multiclass_model_config(d, data.features.cols(), classes, channels, layers);
            let mut model = NSDModel::new(cfg, fixture_seed + 17).map_err(internal)?;
            let tc = TrainConfig {
                lr,
                epochs,
                weight_decay_sheaf: 5e-4,
                weight_decay_regular: 5e-4,
                patience: epochs,
                seed: fixture_seed,
            };
            let result = train(&mut model, &data, &tc).map_err(internal)?;
            runs.push(MulticlassRun {
                d,
                seed: fixture_seed,
                best_epoch: result.best_epoch,
                train_acc: result.best.train_acc,
                val_acc: result.best.val_acc,
                test_acc: result.best.test_acc,
            });

            let trace = model.unroll(&data).map_err(internal)?;
            let sheaf = trace.sheaves.last().expect("layers >= 1");
            if d == 2 {
                // Rotation census over learned transports F_v^T F_u.
                for (e, &(u, v)) in data.graph.edges().iter().enumerate() {
                    let em = &sheaf.maps()[e];
                    let p = em.fv.transpose().matmul(&em.fu);
                    let angle = p[(1, 0)].atan2(p[(0, 0)]).abs().to_degrees();
                    let intra = data.labels[u] == data.labels[v];
                    angle_rows.push_str(&format!(
                        "{d},{fixture_seed},{e},{u},{v},{},{angle}\n",
                        intra as u8
                    ));
                    if intra {
                        intra_angles.push(angle);
                    } else {
                        inter_angles.push(angle);
                    }
                }
            }
            if d == 1 {
                // The scalar model cannot fully separate three classes at
                // the diffusion limit.
                let cls =
                    ClassAssignment::from_labels(data.labels.clone()).map_err(internal)?;
                let probe = impossibility_probe(sheaf, &cls, trace.states.last().unwrap())
                    .map_err(internal)?;
                d1_limit.push(json!({
                    "seed": fixture_seed,
                    "limit_probe_acc": probe.accuracy,
                    "hull_violation": probe.hull_violation,
                }));
            }
        }
    }

    let mut csv = String::from("d,seed,best_epoch,train_acc,val_acc,test_acc\n");
    for r in &runs {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.d, r.seed, r.best_epoch, r.train_acc, r.val_acc, r.test_acc
        ));
    }
    fs::write(dir.join("accuracy.csv"), csv).map_err(internal)?;
    fs::write(dir.join("angles.csv"), angle_rows).map_err(internal)?;

    let mean = |values: &[f64]| -> f64 {
        if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let mut per_d = Vec::new();
    for &d in &d_grid {
        let accs: Vec<f64> = runs.iter().filter(|r| r.d == d).map(|r| r.test_acc).collect();
        per_d.push(json!({"d": d, "mean_test_acc": mean(&accs), "runs": accs.len()}));
    }
    write_json(
        &dir.join("summary.json"),
        &json!({
            "per_d": per_d,
            "mean_intra_angle_deg": mean(&intra_angles),
            "mean_inter_angle_deg": mean(&inter_angles),
            "d1_diffusion_limit": d1_limit,
        }),
    )?;
    for entry in &per_d {
        println!(
            "d={}: mean test acc {:.4}",
            entry["d"], entry["mean_test_acc"]
        );
    }
    if !intra_angles.is_empty() || !inter_angles.is_empty() {
        println!(
            "rotation census: mean intra angle {:.2} deg, mean inter angle {:.2} deg",
            mean(&intra_angles),
            mean(&inter_angles)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------
// oracle-diffuse
// ---------------------------------------------------------------------

fn parse_graph_spec(spec: &str, seed: u64) -> CliResult<Graph> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "cycle" => Ok(cycle_graph(
            rest.parse().map_err(|e| usage(format!("cycle size: {e}")))?,
        )),
        "path" => Ok(path_graph(
            rest.parse().map_err(|e| usage(format!("path size: {e}")))?,
        )),
        "complete" => Ok(complete_graph(
            rest.parse()
                .map_err(|e| usage(format!("complete size: {e}")))?,
        )),
        "random" => {
            let (n, p) = rest
                .split_once(',')
                .ok_or_else(|| usage("random spec is random:N,P"))?;
            let n: usize = n.parse().map_err(|e| usage(format!("random n: {e}")))?;
            let p: f64 = p.parse().map_err(|e| usage(format!("random p: {e}")))?;
            random_connected_graph(n, p, seed).map_err(|e| usage(e.to_string()))
        }
        other => Err(usage(format!(
            "unknown graph spec `{other}` (cycle:N, path:N, complete:N, random:N,P)"
        ))),
    }
}

fn cmd_oracle_diffuse(args: OracleDiffuseArgs) -> CliResult<()> {
    const KEYS: &[&str] = &[
        "construction", "classes", "graph", "d", "alpha", "t_max", "seed", "out_dir",
    ];
    let file = FileConfig::load(args.config.as_ref(), KEYS)?;
    let construction = resolve(args.construction, &file, "construction", "orth".to_string())?;
    let classes = resolve(args.classes, &file, "classes", 4)?;
    let graph_spec = resolve(args.graph, &file, "graph", "cycle:12".to_string())?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let alpha = resolve(args.alpha, &file, "alpha", 4.0)?;
    let out_dir = resolve(args.out_dir, &file, "out_dir", "out/oracle".to_string())?;
    let g = parse_graph_spec(&graph_spec, seed)?;
    let n = g.n();
    if classes < 2 || classes > n {
        return Err(usage(format!("classes must be in 2..={n}, got {classes}")));
    }

    // Homophily wants contiguous blocks (every node keeps an intra-class
    // neighbor on path-like graphs); the others use round-robin labels.
    let labels: Vec<usize> = if construction == "homophily" {
        (0..n).map(|v| v * classes / n).collect()
    } else {
        (0..n).map(|v| v % classes).collect()
    };
    let cls = ClassAssignment::from_labels(labels.clone()).map_err(internal)?;
    let mut rng = rng_from(seed, 8);
    let sheaf = match construction.as_str() {
        "homophily" => homophily_sym_sheaf(&g, &cls, alpha).map_err(|e| usage(e.to_string()))?,
        "signed" => {
            let alpha_e = vec![alpha.max(1e-6); g.m()];
            signed_two_class_sheaf(&g, &cls, &alpha_e).map_err(|e| usage(e.to_string()))?
        }
        "diagonal" => {
            let d = resolve(args.d, &file, "d", classes)?;
            diagonal_multiclass_sheaf(&g, &cls, d).map_err(|e| usage(e.to_string()))?
        }
        "orth" => {
            let d = resolve(args.d, &file, "d", 2)?;
            orth_bundle_sheaf(&g, &cls, d).map_err(|e| usage(e.to_string()))?
        }
        "rotation" => regular_rotation_sheaf(&g, &cls).map_err(|e| usage(e.to_string()))?,
        other => {
            return Err(usage(format!(
                "unknown construction `{other}` \
                 (homophily, signed, diagonal, orth, rotation)"
            )))
        }
    };
    let d = sheaf.d();

    let delta = sym_normalized_laplacian(&sheaf).map_err(internal)?;
    let spectrum = eigh(&delta.matrix.to_dense().map_err(internal)?)
        .map_err(internal)?;
    let gap = spectrum
        .eigenvalues()
        .iter()
        .copied()
        .find(|&l| l > KERNEL_TOL)
        .unwrap_or(1.0);
    let t_max = match resolve(args.t_max, &file, "t_max", f64::NAN)? {
        t if t.is_nan() => (40.0 / gap).clamp(10.0, 20_000.0),
        t if t > 0.0 => t,
        t => return Err(usage(format!("t_max must be positive, got {t}"))),
    };

    let dir = prepare_out_dir(&out_dir)?;
    write_json(
        &dir.join("resolved_config.json"),
        &json!({
            "command": "oracle-diffuse",
            "construction": construction, "classes": classes,
            "graph": graph_spec, "d": d, "alpha": alpha,
            "t_max": t_max, "spectral_gap": gap,
            "seed": seed, "out_dir": out_dir,
        }),
    )?;

    let x0 = random_mat(n * d, 2, &mut rng);
    let steps = (t_max.ceil() as usize).max(1);
    let record_every = (steps / 50).max(1);
    let dcfg = DiffusionConfig::new(Scheme::Rk4, t_max / steps as f64, t_max, record_every);
    let traj = sheaflab::diffusion::diffuse(&delta, &x0, &dcfg).map_err(internal)?;

    let mut csv = String::from("t,dirichlet_energy");
    for c in 0..classes {
        csv.push_str(&format!(",class{c}_x,class{c}_y"));
    }
    csv.push('\n');
    for (i, &t) in traj.times.iter().enumerate() {
        let means = class_means(&traj.states[i], &labels, classes, d);
        csv.push_str(&format!("{t},{}", traj.energies[i]));
        for m in &means {
            let y = if d >= 2 { m[1] } else { 0.0 };
            csv.push_str(&format!(",{},{y}", m[0]));
        }
        csv.push('\n');
    }
    fs::write(dir.join("trajectory.csv"), csv).map_err(internal)?;

    let final_state = traj.final_state();
    let angles = class_pair_angles(final_state, &labels, classes, d);
    let mut adjacent = Vec::new();
    for c in 0..classes {
        adjacent.push(angles[c][(c + 1) % classes]);
    }
    write_json(
        &dir.join("summary.json"),
        &json!({
            "final_t": traj.final_time(),
            "final_energy": traj.energies.last(),
            "pairwise_class_angles_deg": angles,
            "adjacent_class_angles_deg": adjacent,
        }),
    )?;
    println!(
        "diffused to t={:.1} (gap {:.3e}); adjacent class angles: {}",
        traj.final_time(),
        gap,
        adjacent
            .iter()
            .map(|a| format!("{a:.2}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

fn load_dataset(dir: &Path) -> CliResult<LabeledDataset> {
    if !dir.is_dir() {
        return Err(usage(format!("dataset directory {} not found", dir.display())));
    }
    let read = |name: &str| -> CliResult<String> {
        fs::read_to_string(dir.join(name))
            .map_err(|e| usage(format!("{}: {e}", dir.join(name).display())))
    };
    let graph_doc: serde_json::Value =
        serde_json::from_str(&read("graph.json")?).map_err(|e| usage(format!("graph.json: {e}")))?;
    let n = graph_doc["n"]
        .as_u64()
        .ok_or_else(|| usage("graph.json: missing n"))? as usize;
    let edges: Vec<(usize, usize)> = graph_doc["edges"]
        .as_array()
        .ok_or_else(|| usage("graph.json: missing edges"))?
        .iter()
        .map(|pair| {
            let arr = pair
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| usage("graph.json: edge must be [u, v]"))?;
            let u = arr[0].as_u64().ok_or_else(|| usage("graph.json: bad endpoint"))?;
            let v = arr[1].as_u64().ok_or_else(|| usage("graph.json: bad endpoint"))?;
            Ok((u as usize, v as usize))
        })
        .collect::<CliResult<_>>()?;
    let graph = Graph::new(n, &edges).map_err(|e| usage(format!("graph.json: {e}")))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in read("features.csv")?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| usage(format!("features.csv line {}: {e}", lineno + 1)))
            })
            .collect::<CliResult<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(usage(format!(
                    "features.csv line {}: ragged row",
                    lineno + 1
                )));
            }
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(usage(format!(
            "features.csv has {} rows for {n} nodes",
            rows.len()
        )));
    }
    let k = rows.first().map(|r| r.len()).unwrap_or(0);
    let features = Mat::from_fn(n, k, |r, c| rows[r][c]);

    let labels: Vec<usize> = read("labels.csv")?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| usage(format!("labels.csv: {e}")))
        })
        .collect::<CliResult<_>>()?;
    if labels.len() != n {
        return Err(usage(format!(
            "labels.csv has {} labels for {n} nodes",
            labels.len()
        )));
    }

    let splits: serde_json::Value = serde_json::from_str(&read("splits.json")?)
        .map_err(|e| usage(format!("splits.json: {e}")))?;
    let split = |key: &str| -> CliResult<Vec<usize>> {
        splits[key]
            .as_array()
            .ok_or_else(|| usage(format!("splits.json: missing {key}")))?
            .iter()
            .map(|v| {
                let idx = v
                    .as_u64()
                    .ok_or_else(|| usage(format!("splits.json: bad index in {key}")))?
                    as usize;
                if idx >= n {
                    return Err(usage(format!("splits.json: index {idx} out of range")));
                }
                Ok(idx)
            })
            .collect()
    };
    let num_classes = splits["num_classes"]
        .as_u64()
        .ok_or_else(|| usage("splits.json: missing num_classes"))? as usize;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(usage(format!("label {bad} outside 0..{num_classes}")));
    }
    Ok(LabeledDataset {
        graph,
        features,
        labels,
        num_classes,
        train: split("train")?,
        val: split("val")?,
        test: split("test")?,
    })
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    const KEYS: &[&str] = &[
        "family", "d", "channels", "layers", "householder_count", "sigma", "hybrid",
        "symmetric", "lr", "wd", "wd_sheaf", "epochs", "patience", "seed", "out_dir",
    ];
    let file = FileConfig::load(args.config.as_ref(), KEYS)?;
    let family_raw = resolve(args.family, &file, "family", "general".to_string())?;
    let family = MapFamily::parse(&family_raw)
        .ok_or_else(|| usage(format!("unknown family `{family_raw}`")))?;
    let d = resolve(args.d, &file, "d", 2)?;
    let channels = resolve(args.channels, &file, "channels", 2)?;
    let layers = resolve(args.layers, &file, "layers", 2)?;
    let householder_count = resolve(args.householder_count, &file, "householder_count", d.min(2))?;
    let sigma_raw = resolve(args.sigma, &file, "sigma", "elu".to_string())?;
    let sigma = sheaflab::learn::activation_from_string(&sigma_raw)
        .map_err(|e| usage(e.to_string()))?;
    let hybrid = resolve(args.hybrid, &file, "hybrid", false)?;
    let symmetric = resolve(args.symmetric, &file, "symmetric", false)?;
    let lr = resolve(args.lr, &file, "lr", 0.02)?;
    let wd = resolve(args.wd, &file, "wd", 5e-4)?;
    let wd_sheaf = resolve(args.wd_sheaf, &file, "wd_sheaf", 5e-4)?;
    let epochs = resolve(args.epochs, &file, "epochs", 200)?;
    let patience = resolve(args.patience, &file, "patience", 50)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let out_dir = resolve(args.out_dir, &file, "out_dir", "out/train".to_string())?;

    let data = load_dataset(&args.data_dir)?;
    let cfg = NSDModelConfig {
        in_features: data.features.cols(),
        num_classes: data.num_classes,
        d,
        channels,
        layers,
        family,
        householder_count,
        sigma,
        symmetric,
        hybrid,
    };
    let mut model = NSDModel::new(cfg, seed).map_err(|e| usage(e.to_string()))?;
    let dir = prepare_out_dir(&out_dir)?;
    write_json(
        &dir.join("resolved_config.json"),
        &json!({
            "command": "train",
            "data_dir": args.data_dir.display().to_string(),
            "family": family.as_str(), "d": d, "channels": channels,
            "layers": layers, "householder_count": householder_count,
            "sigma": sigma_raw, "hybrid": hybrid, "symmetric": symmetric,
            "lr": lr, "wd": wd, "wd_sheaf": wd_sheaf,
            "epochs": epochs, "patience": patience,
            "seed": seed, "out_dir": out_dir,
            "param_count": model.param_count(),
        }),
    )?;

    let tc = TrainConfig {
        lr,
        epochs,
        weight_decay_sheaf: wd_sheaf,
        weight_decay_regular: wd,
        patience,
        seed,
    };
    let result = train(&mut model, &data, &tc).map_err(internal)?;

    let mut history = Vec::new();
    write_history_csv(&mut history, &result.history).map_err(internal)?;
    fs::write(dir.join("history.csv"), history).map_err(internal)?;
    let metrics = json!({
        "best_epoch": result.best_epoch,
        "loss": result.best.loss,
        "train_acc": result.best.train_acc,
        "val_acc": result.best.val_acc,
        "test_acc": result.best.test_acc,
    });
    let file = fs::File::create(dir.join("checkpoint.json")).map_err(internal)?;
    save_checkpoint(file, &model, result.best_epoch, &metrics).map_err(internal)?;
    println!(
        "best epoch {}: train_acc={:.4} val_acc={:.4} test_acc={:.4}",
        result.best_epoch, result.best.train_acc, result.best.val_acc, result.best.test_acc
    );
    Ok(())
}

// ---------------------------------------------------------------------
// complexity
// ---------------------------------------------------------------------

/// Connected graph with exactly `m` edges: a spanning path plus random
/// distinct extra pairs.
fn graph_with_edge_count(n: usize, m: usize, seed: u64) -> CliResult<Graph> {
    let max_m = n * (n - 1) / 2;
    if m < n - 1 || m > max_m {
        return Err(usage(format!(
            "m = {m} out of range [{}, {max_m}] for n = {n}",
            n - 1
        )));
    }
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|v| (v, v + 1)).collect();
    let mut present: std::collections::BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    let mut rng = rng_from(seed, 9);
    while edges.len() < m {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if present.insert(key) {
            edges.push(key);
        }
    }
    Graph::new(n, &edges).map_err(internal)
}

/// Median seconds over `trials` of `body`, with repetitions calibrated so
/// each trial is long enough to time reliably.
fn median_seconds(trials: usize, mut body: impl FnMut()) -> f64 {
    let t0 = Instant::now();
    body();
    let once = t0.elapsed().as_secs_f64().max(1e-8);
    let reps = ((0.05 / once).ceil() as usize).clamp(2, 20000);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        for _ in 0..reps {
            body();
        }
        samples.push(t.elapsed().as_secs_f64() / reps as f64);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    samples[samples.len() / 2]
}

/// Median seconds for one full diffusion layer (assemble + normalize +
/// propagate — the sheaf is rebuilt every layer in the learned model, so
/// assembly belongs to the layer cost).
fn time_one_layer(
    g: &Graph,
    d: usize,
    c: usize,
    family: MapFamily,
    trials: usize,
    seed: u64,
) -> CliResult<f64> {
    let sheaf = sheaflab::sheaf::random_sheaf(g, d, family, seed).map_err(internal)?;
    let mut rng = rng_from(seed, 10);
    let x = random_mat(g.n() * d, c, &mut rng);
    let params = SCNParams {
        w1: Mat::eye(d),
        w2: Mat::eye(c),
        sigma: Activation::Identity,
    };
    let mut failure = None;
    let secs = median_seconds(trials, || {
        if let Err(e) = scn_forward(&sheaf, &params, &x) {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(internal(e)),
        None => Ok(secs),
    }
}

/// Median seconds for one propagation step `(I - Delta)(X W2)` through
/// the block machinery with a precomputed operator. Comparable to
/// [`time_flat_gcn`], which does the same arithmetic on flat arrays.
fn time_propagation(g: &Graph, c: usize, trials: usize, seed: u64) -> CliResult<f64> {
    let sheaf = sheaflab::sheaf::random_sheaf(g, 1, MapFamily::General, seed).map_err(internal)?;
    let delta = sym_normalized_laplacian(&sheaf).map_err(internal)?;
    let mut rng = rng_from(seed, 10);
    let x = random_mat(g.n(), c, &mut rng);
    let params = SCNParams {
        w1: Mat::eye(1),
        w2: Mat::eye(c),
        sigma: Activation::Identity,
    };
    let mut failure = None;
    let secs = median_seconds(trials, || {
        if let Err(e) = sheaflab::diffusion::scn_forward_with(&delta, 1, &params, &x) {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(internal(e)),
        None => Ok(secs),
    }
}

/// Plain graph-convolution step on flat arrays (precomputed normalized
/// adjacency structure, dense feature transform, neighbor accumulation):
/// the same arithmetic as [`time_propagation`] without block machinery.
fn time_flat_gcn(g: &Graph, c: usize, trials: usize, seed: u64) -> CliResult<f64> {
    let n = g.n();
    let mut rng = rng_from(seed, 10);
    let x = random_mat(n, c, &mut rng);
    let w2 = Mat::eye(c);
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|v| 1.0 / (g.degree(v) as f64).max(1.0).sqrt())
        .collect();
    let neighbors: Vec<Vec<usize>> = (0..n).map(|v| g.neighbors(v).to_vec()).collect();
    let secs = median_seconds(trials, || {
        let z = x.matmul(&w2);
        let mut out = Mat::zeros(n, c);
        for v in 0..n {
            for j in 0..c {
                let mut acc = z[(v, j)];
                for &u in &neighbors[v] {
                    acc -= inv_sqrt_deg[v] * inv_sqrt_deg[u] * z[(u, j)];
                }
                out[(v, j)] = acc;
            }
        }
        std::hint::black_box(&out);
    });
    Ok(secs)
}

fn cmd_complexity(args: ComplexityArgs) -> CliResult<()> {
    const KEYS: &[&str] = &["n", "c", "d", "m_base", "trials", "seed", "out_dir"];
    let file = FileConfig::load(args.config.as_ref(), KEYS)?;
    let n = resolve(args.n, &file, "n", 400)?;
    let c = resolve(args.c, &file, "c", 8)?;
    let d = resolve(args.d, &file, "d", 2)?;
    let m_base = resolve(args.m_base, &file, "m_base", 4000)?;
    let trials = resolve(args.trials, &file, "trials", 5)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let out_dir = resolve(args.out_dir, &file, "out_dir", "out/complexity".to_string())?;
    if trials == 0 {
        return Err(usage("trials must be at least 1"));
    }

    let dir = prepare_out_dir(&out_dir)?;
    write_json(
        &dir.join("resolved_config.json"),
        &json!({
            "command": "complexity",
            "n": n, "c": c, "d": d, "m_base": m_base,
            "trials": trials, "seed": seed, "out_dir": out_dir,
        }),
    )?;

    let g1 = graph_with_edge_count(n, m_base, seed)?;
    let g2 = graph_with_edge_count(n, 2 * m_base, seed + 1)?;
    let t_diag_1 = time_one_layer(&g1, d, c, MapFamily::Diagonal, trials, seed)?;
    let t_diag_2 = time_one_layer(&g2, d, c, MapFamily::Diagonal, trials, seed)?;
    let ratio = t_diag_2 / t_diag_1;
    let t_general = time_one_layer(&g1, d, c, MapFamily::General, trials, seed)?;
    let t_block_prop = time_propagation(&g1, c, trials, seed)?;
    let t_gcn = time_flat_gcn(&g1, c, trials, seed)?;

    let mut csv = String::from("label,n,m,c,d,family,seconds\n");
    csv.push_str(&format!("layer_diag_base,{n},{m_base},{c},{d},diagonal,{t_diag_1}\n"));
    csv.push_str(&format!(
        "layer_diag_double,{n},{},{c},{d},diagonal,{t_diag_2}\n",
        2 * m_base
    ));
    csv.push_str(&format!(
        "layer_general_base,{n},{m_base},{c},{d},general,{t_general}\n"
    ));
    csv.push_str(&format!(
        "propagate_block_scalar,{n},{m_base},{c},1,general,{t_block_prop}\n"
    ));
    csv.push_str(&format!("propagate_flat_gcn,{n},{m_base},{c},1,none,{t_gcn}\n"));
    fs::write(dir.join("timings.csv"), csv).map_err(internal)?;

    write_json(
        &dir.join("summary.json"),
        &json!({
            "m_doubling_ratio": ratio,
            "within_linear_band": (1.5..=2.5).contains(&ratio),
            "general_over_diagonal": t_general / t_diag_1,
            "block_scalar_over_flat_gcn": t_block_prop / t_gcn,
        }),
    )?;
    println!(
        "m doubling ratio {ratio:.2} (linear target 2.0); general/diagonal {:.2}; \
         block-scalar/flat {:.2}",
        t_general / t_diag_1,
        t_block_prop / t_gcn
    );
    Ok(())
}


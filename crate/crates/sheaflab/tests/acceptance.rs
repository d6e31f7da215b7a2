//! Acceptance gate: every release criterion in one integration target.
//! Each test prints exactly one `PASS criterion N: ...` (or `FAIL ...`)
//! line, so `cargo test --test acceptance -- --nocapture` reads as a
//! checklist. Tests serialize on a global lock because several criteria
//! assert wall-clock budgets.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sheaflab::diffusion::{
    check_energy_decrease, diffuse, linear_probe, node_features, steady_state_error, Activation,
    DiffusionConfig, ProbeConfig, SCNParams, Scheme,
};
use sheaflab::graph::{
    complete_graph, cycle_graph, path_graph, random_connected_graph, random_tree, synth_bipartite,
    synth_multiclass, Graph, LabeledDataset,
};
use sheaflab::laplacian::{assemble, normalize, NormalizationKind};
use sheaflab::learn::{
    finite_difference_report, train, NSDModel, NSDModelConfig, TrainConfig,
};
use sheaflab::linalg::{spectral_norm, sym_matfun, Mat};
use sheaflab::oracle::{
    diagonal_multiclass_sheaf, energy_increase_witness, homophily_sym_sheaf, impossibility_probe,
    orth_bundle_sheaf, regular_rotation_sheaf, signed_two_class_sheaf, ClassAssignment,
};
use sheaflab::sheaf::{
    householder_orthogonal, random_bundle, random_sheaf, trivial_sheaf, EdgeMaps, MapFamily, Sheaf,
};
use sheaflab::spectral::{
    check_gap_lower, check_gap_upper, check_harmonic_dim, dirichlet_energy, eigh, harmonic_space,
    lambda_star, project_harmonic, sym_normalized_laplacian, KERNEL_TOL,
};

// -----------------------------------------------------------------------
// shared plumbing
// -----------------------------------------------------------------------

fn lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner())
}

/// Prints the one-line verdict for a criterion, then enforces it.
fn gate(criterion: usize, what: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("{verdict} criterion {criterion}: {what} — {detail}");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn rng_from(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt))
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Frobenius-normalized copy.
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
/// harmonic projection, stalks rearranged into node rows, unit-direction
/// rows, probe trained on all nodes.
fn limit_probe_accuracy(s: &Sheaf, labels: &[usize], num_classes: usize, x: &Mat) -> f64 {
    let delta = sym_normalized_laplacian(s).unwrap();
    let h = harmonic_space(&delta.matrix, KERNEL_TOL).unwrap();
    let projected = project_harmonic(&h, x);
    let feats = row_normalized(&node_features(&projected, s.d()).unwrap());
    let all: Vec<usize> = (0..s.graph().n()).collect();
    linear_probe(&feats, labels, num_classes, &all, &[], &ProbeConfig::default())
        .unwrap()
        .train
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

fn distance_to_multiple(angle: f64, step: f64) -> f64 {
    let rem = (angle % step + step) % step;
    rem.min(step - rem)
}

/// Scalar sheaf whose per-edge map product is positive (both restriction
/// scalars share a sign).
fn random_positive_scalar_sheaf(g: &Graph, rng: &mut ChaCha8Rng) -> Sheaf {
    let maps = (0..g.m())
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            EdgeMaps {
                fu: Mat::from_vec(1, 1, vec![sign * rng.gen_range(0.3..1.5)]),
                fv: Mat::from_vec(1, 1, vec![sign * rng.gen_range(0.3..1.5)]),
            }
        })
        .collect();
    Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps).unwrap()
}

/// Orthogonal sheaf with identical restriction maps on each edge.
fn random_orth_sym_sheaf(g: &Graph, d: usize, rng: &mut ChaCha8Rng) -> Sheaf {
    let maps = (0..g.m())
        .map(|_| {
            let vs: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let m = householder_orthogonal(&vs, d).unwrap();
            EdgeMaps { fu: m.clone(), fv: m }
        })
        .collect();
    Sheaf::new(g.clone(), d, MapFamily::Orthogonal, maps).unwrap()
}

/// Symmetric scalar sheaf: one nonzero scalar per edge, shared by both
/// restriction maps.
fn random_symmetric_scalar_sheaf(g: &Graph, rng: &mut ChaCha8Rng) -> Sheaf {
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
    Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps).unwrap()
}

/// Invertible scalar sheaf with entries bounded away from zero.
fn random_invertible_scalar_sheaf(g: &Graph, rng: &mut ChaCha8Rng) -> Sheaf {
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
    Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps).unwrap()
}

/// Pool of connected graphs with n <= 8 for the exhaustive-walk checks.
fn small_graph_pool() -> Vec<Graph> {
    let mut pool = vec![
        cycle_graph(4),
        cycle_graph(5),
        cycle_graph(6),
        cycle_graph(7),
        cycle_graph(8),
        path_graph(3),
        path_graph(6),
        path_graph(8),
        complete_graph(4),
        random_tree(5, 31),
        random_tree(7, 32),
        random_tree(8, 33),
    ];
    for seed in 0..4u64 {
        pool.push(random_connected_graph(6 + (seed as usize) % 3, 0.5, 40 + seed).unwrap());
    }
    pool
}

// -----------------------------------------------------------------------
// criterion 1: trivial-sheaf equivalence with the graph Laplacian
// -----------------------------------------------------------------------

#[test]
fn criterion_01_trivial_sheaf_matches_graph_laplacian() {
    let _guard = lock();
    let started = Instant::now();
    let mut worst_sym = 0.0f64;
    for i in 0..20u64 {
        let n = 5 + (i as usize * 7) % 26; // 5..=30
        let g = random_connected_graph(n, 0.4, 100 + i).unwrap();
        let s = trivial_sheaf(&g, 1).unwrap();
        let dense = assemble(&s).to_dense().unwrap();

        // D - A reference.
        let mut reference = Mat::zeros(n, n);
        for v in 0..n {
            reference[(v, v)] = g.degree(v) as f64;
        }
        for &(u, v) in g.edges() {
            reference[(u, v)] = -1.0;
            reference[(v, u)] = -1.0;
        }
        assert_eq!(dense.data(), reference.data(), "L != D - A on graph {i}");

        // I - D^{-1/2} A D^{-1/2} reference.
        let delta = sym_normalized_laplacian(&s).unwrap().matrix.to_dense().unwrap();
        let mut norm_ref = Mat::eye(n);
        for &(u, v) in g.edges() {
            let w = -1.0 / ((g.degree(u) as f64).sqrt() * (g.degree(v) as f64).sqrt());
            norm_ref[(u, v)] = w;
            norm_ref[(v, u)] = w;
        }
        worst_sym = worst_sym.max(delta.sub(&norm_ref).max_abs());
    }
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        1,
        "trivial d=1 sheaf reproduces the graph Laplacian",
        worst_sym <= 1e-14 && elapsed < 1.0,
        &format!("20 graphs, max |Delta - (I - D^-1/2 A D^-1/2)| = {worst_sym:.3e}, {elapsed:.2}s"),
    );
}

// -----------------------------------------------------------------------
// criterion 2: normalized spectrum in [0, 2] and contraction factor <= 1
// -----------------------------------------------------------------------

#[test]
fn criterion_02_normalized_spectrum_range() {
    let _guard = lock();
    let started = Instant::now();
    let families = [
        MapFamily::Scalar,
        MapFamily::Diagonal,
        MapFamily::Orthogonal,
        MapFamily::General,
    ];
    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    let mut max_star = f64::NEG_INFINITY;
    for i in 0..100u64 {
        let family = families[(i % 4) as usize];
        let d = if family == MapFamily::Scalar { 1 } else { 2 + ((i / 4) % 3) as usize };
        let n = 4 + (i as usize) % 17; // 4..=20
        let g = random_connected_graph(n, 0.5, 900 + i).unwrap();
        let s = random_sheaf(&g, d, family, 1000 + i).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        let eigs = eigh(&delta.matrix.to_dense().unwrap()).unwrap();
        for &l in eigs.eigenvalues() {
            min_eig = min_eig.min(l);
            max_eig = max_eig.max(l);
        }
        max_star = max_star.max(lambda_star(eigs.eigenvalues()));
    }
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        2,
        "normalized spectra stay in [0, 2] with contraction factor <= 1",
        min_eig >= -1e-9 && max_eig <= 2.0 + 1e-9 && max_star <= 1.0 + 1e-12 && elapsed < 30.0,
        &format!(
            "100 sheaves, eigenvalues in [{min_eig:.2e}, {max_eig:.12}], max lambda* = {max_star:.12}, {elapsed:.2}s"
        ),
    );
}

// -----------------------------------------------------------------------
// criterion 3: deviation-radius upper bound on the spectral gap
// -----------------------------------------------------------------------

#[test]
fn criterion_03_gap_upper_bound_on_bundles() {
    let _guard = lock();
    let pool = small_graph_pool();
    let mut violations = 0usize;
    let mut checked = 0usize;
    for i in 0..50u64 {
        let g = &pool[(i as usize) % pool.len()];
        let d = 2 + (i % 3) as usize;
        let s = random_bundle(g, d, 200 + i).unwrap();
        let report = check_gap_upper(&s).unwrap();
        assert!(report.exhaustive, "n <= 8 must enumerate walks exhaustively");
        checked += 1;
        if !report.holds {
            violations += 1;
        }
    }
    // Acyclic transport is always path independent: the gap closes.
    let mut worst_tree_gap = 0.0f64;
    for i in 0..10u64 {
        let g = random_tree(4 + (i as usize) % 5, 300 + i);
        let s = random_bundle(&g, 2 + (i % 3) as usize, 310 + i).unwrap();
        let report = check_gap_upper(&s).unwrap();
        worst_tree_gap = worst_tree_gap.max(report.lambda0);
    }
    gate(
        3,
        "smallest eigenvalue <= (deviation radius)^2 / 2 on orthogonal bundles",
        violations == 0 && worst_tree_gap <= 1e-8,
        &format!("{checked} bundles, {violations} violations, worst tree lambda0 = {worst_tree_gap:.2e}"),
    );
}

// -----------------------------------------------------------------------
// criterion 4: holonomy lower bound on the spectral gap
// -----------------------------------------------------------------------

#[test]
fn criterion_04_gap_lower_bound_on_bundles() {
    let _guard = lock();
    let graphs = [cycle_graph(4), cycle_graph(6), cycle_graph(8), complete_graph(4)];
    let mut violations = 0usize;
    for i in 0..50u64 {
        let g = &graphs[(i as usize) % graphs.len()];
        let s = random_bundle(g, 2, 400 + i).unwrap();
        let report = check_gap_lower(&s).unwrap();
        if !report.holds {
            violations += 1;
        }
    }
    gate(
        4,
        "smallest eigenvalue >= eps^2 / (2 diam n d_max) on O(2) bundles",
        violations == 0,
        &format!("50 bundles on cycles and K4, {violations} violations"),
    );
}

// -----------------------------------------------------------------------
// criterion 5: harmonic dimension vs stalk dimension
// -----------------------------------------------------------------------

#[test]
fn criterion_05_harmonic_dimension() {
    let _guard = lock();
    let pool = small_graph_pool();
    let mut violations = 0usize;
    let mut curved_with_full_kernel = 0usize;
    for i in 0..100u64 {
        let g = &pool[(i as usize) % pool.len()];
        let d = 2 + (i % 3) as usize;
        let s = random_bundle(g, d, 500 + i).unwrap();
        let report = check_harmonic_dim(&s).unwrap();
        if !report.holds {
            violations += 1;
        }
        if report.r_hat > 1e-6 && report.h >= report.d {
            curved_with_full_kernel += 1;
        }
    }
    // Trees: transport is trivially path independent, kernel is full.
    let mut tree_full = true;
    for i in 0..10u64 {
        let g = random_tree(4 + (i as usize) % 5, 520 + i);
        let s = random_bundle(&g, 2 + (i % 3) as usize, 530 + i).unwrap();
        let report = check_harmonic_dim(&s).unwrap();
        tree_full &= report.h == report.d && report.path_independent;
    }
    // Path-independent oracle constructions: kernel dimension equals d.
    let mut oracle_full = true;
    {
        let g = cycle_graph(8);
        let labels: Vec<usize> = (0..8).map(|v| v % 4).collect();
        let cls = ClassAssignment::from_labels(labels).unwrap();
        let s = orth_bundle_sheaf(&g, &cls, 2).unwrap();
        let report = check_harmonic_dim(&s).unwrap();
        oracle_full &= report.h == 2 && report.path_independent;
    }
    {
        let g = cycle_graph(12);
        let labels: Vec<usize> = (0..12).map(|v| v % 6).collect();
        let cls = ClassAssignment::from_labels(labels).unwrap();
        let s = regular_rotation_sheaf(&g, &cls).unwrap();
        let report = check_harmonic_dim(&s).unwrap();
        oracle_full &= report.h == s.d() && report.path_independent;
    }
    // Scalar oracle constructions (d = 1): kernel dimension is exactly 1.
    {
        let data = synth_bipartite(5, 5, 0.6, 1.0, 0.5, 71).unwrap();
        let cls = ClassAssignment::from_labels(data.labels.clone()).unwrap();
        let alphas = vec![1.0; data.graph.m()];
        let signed = signed_two_class_sheaf(&data.graph, &cls, &alphas).unwrap();

        // Homophily weighting needs intra-class edges: two 5-cycles plus
        // one bridge, labels split by component.
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for base in [0usize, 5] {
            for i in 0..5 {
                edges.push((base + i, base + (i + 1) % 5));
            }
        }
        edges.push((4, 5));
        let homophilous = Graph::new(10, &edges).unwrap();
        let cls2 =
            ClassAssignment::from_labels((0..10).map(|v| usize::from(v >= 5)).collect()).unwrap();
        let homo = homophily_sym_sheaf(&homophilous, &cls2, 2.0).unwrap();

        for s in [signed, homo] {
            let delta = sym_normalized_laplacian(&s).unwrap();
            oracle_full &= harmonic_space(&delta.matrix, KERNEL_TOL).unwrap().dim() == 1;
        }
        let g9 = random_connected_graph(9, 0.5, 72).unwrap();
        let cls9 = ClassAssignment::from_labels((0..9).map(|v| v % 3).collect()).unwrap();
        let s = diagonal_multiclass_sheaf(&g9, &cls9, 3).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        oracle_full &= harmonic_space(&delta.matrix, KERNEL_TOL).unwrap().dim() == 3;
    }
    gate(
        5,
        "kernel dimension <= d, equal exactly for path-independent transport",
        violations == 0 && curved_with_full_kernel == 0 && tree_full && oracle_full,
        &format!(
            "100 bundles ({violations} violations, {curved_with_full_kernel} curved-with-full-kernel), trees full: {tree_full}, oracles full: {oracle_full}"
        ),
    );
}

// -----------------------------------------------------------------------
// criterion 6: diffusion converges to the harmonic projection
// -----------------------------------------------------------------------

#[test]
fn criterion_06_diffusion_reaches_steady_state() {
    let _guard = lock();
    let started = Instant::now();
    let families = [
        MapFamily::Orthogonal,
        MapFamily::General,
        MapFamily::Diagonal,
        MapFamily::Scalar,
    ];
    let mut fixtures = 0usize;
    let mut worst_vs_projection = 0.0f64;
    let mut worst_vs_expm = 0.0f64;
    let mut attempt = 0u64;
    while fixtures < 20 && attempt < 200 {
        attempt += 1;
        let family = families[(attempt % 4) as usize];
        let d = if family == MapFamily::Scalar { 1 } else { 2 + (attempt % 2) as usize };
        let n = 4 + (attempt as usize) % 6;
        let g = if family == MapFamily::Orthogonal {
            random_tree(n, 600 + attempt) // nontrivial kernel: project onto d dims
        } else {
            random_connected_graph(n, 0.5, 600 + attempt).unwrap()
        };
        let s = random_sheaf(&g, d, family, 650 + attempt).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        let dense = delta.matrix.to_dense().unwrap();
        let eigs = eigh(&dense).unwrap();
        let gap = eigs
            .eigenvalues()
            .iter()
            .copied()
            .filter(|&l| l > KERNEL_TOL)
            .fold(f64::INFINITY, f64::min);
        if !(gap.is_finite() && gap > 1e-2) {
            continue; // keep horizons short; every kept fixture has gap > 1e-4
        }
        fixtures += 1;
        let t_max = 40.0 / gap;
        let mut rng = rng_from(660, attempt);
        let x0 = random_mat(dense.rows(), 2, &mut rng);
        let cfg = DiffusionConfig::new(Scheme::Rk4, 1.0f64.min(t_max), t_max, usize::MAX);

        let h = harmonic_space(&delta.matrix, KERNEL_TOL).unwrap();
        let err_proj = steady_state_error(&delta, &x0, &h, &cfg).unwrap();
        worst_vs_projection = worst_vs_projection.max(err_proj);

        let endpoint = diffuse(&delta, &x0, &cfg).unwrap().final_state().clone();
        let oracle = sym_matfun(&dense, |l| (-t_max * l).exp()).unwrap().matmul(&x0);
        let err_expm = endpoint.sub(&oracle).frob_norm() / x0.frob_norm().max(1.0);
        worst_vs_expm = worst_vs_expm.max(err_expm);
    }
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        6,
        "long-horizon diffusion matches expm oracle and harmonic projection",
        fixtures == 20
            && worst_vs_projection <= 1e-6
            && worst_vs_expm <= 1e-6
            && elapsed < 10.0,
        &format!(
            "{fixtures} fixtures, worst error vs projection {worst_vs_projection:.2e}, vs expm {worst_vs_expm:.2e}, {elapsed:.2}s"
        ),
    );
}

// -----------------------------------------------------------------------
// criterion 7: linear separation powers and impossibility results
// -----------------------------------------------------------------------

#[test]
fn criterion_07_separation_suite() {
    let _guard = lock();
    // (a) sign-alternating sheaves fully separate two bipartite classes.
    let mut signed_ok = true;
    for i in 0..10usize {
        let s = 5000 + i as u64;
        let data = synth_bipartite(3 + i % 3, 3 + (i + 1) % 3, 0.6, 1.0, 0.5, s).unwrap();
        let cls = ClassAssignment::from_labels(data.labels.clone()).unwrap();
        let mut rng = rng_from(s, 2);
        let alpha: Vec<f64> = (0..data.graph.m()).map(|_| rng.gen_range(0.5..2.0)).collect();
        let sheaf = signed_two_class_sheaf(&data.graph, &cls, &alpha).unwrap();
        let x = random_mat(data.graph.n(), 3, &mut rng);
        let probe = impossibility_probe(&sheaf, &cls, &x).unwrap();
        signed_ok &= probe.accuracy >= 1.0 && probe.separable;
    }

    // (b) symmetric transports on balanced bipartite graphs cannot beat
    // the class prior by more than 5 points; 100 random draws.
    let mut cap_ok = true;
    let mut worst_cap = 0.0f64;
    for i in 0..100usize {
        let s = 5100 + i as u64;
        let half = 4 + i % 3;
        let data = synth_bipartite(half, half, 0.6, 1.0, 0.5, s).unwrap();
        let cls = ClassAssignment::from_labels(data.labels.clone()).unwrap();
        let mut rng = rng_from(s, 3);
        let sheaf = random_symmetric_scalar_sheaf(&data.graph, &mut rng);
        let x = random_mat(data.graph.n(), 3, &mut rng);
        let probe = impossibility_probe(&sheaf, &cls, &x).unwrap();
        worst_cap = worst_cap.max(probe.accuracy);
        cap_ok &= probe.accuracy <= 0.5 + 0.05;
    }

    // (c) diagonal maps with d = C = 3 separate three classes exactly.
    let diag_acc = {
        let g = random_connected_graph(9, 0.5, 5200).unwrap();
        let labels: Vec<usize> = (0..9).map(|v| v % 3).collect();
        let cls = ClassAssignment::from_labels(labels.clone()).unwrap();
        let sheaf = diagonal_multiclass_sheaf(&g, &cls, 3).unwrap();
        let mut rng = rng_from(0, 4);
        let x = random_mat(9 * 3, 2, &mut rng);
        limit_probe_accuracy(&sheaf, &labels, 3, &x)
    };

    // (d) orthogonal bundles: full separation and right-angle geometry.
    let mut orth_ok = true;
    let mut worst_angle_dev = 0.0f64;
    for (n, c, d) in [(8usize, 4usize, 2usize), (16, 8, 4)] {
        let g = cycle_graph(n);
        let labels: Vec<usize> = (0..n).map(|v| v % c).collect();
        let cls = ClassAssignment::from_labels(labels.clone()).unwrap();
        let sheaf = orth_bundle_sheaf(&g, &cls, d).unwrap();
        let mut rng = rng_from(0, 5 + n as u64);
        let x = random_mat(n * d, 2, &mut rng);
        let acc = limit_probe_accuracy(&sheaf, &labels, c, &x);
        let delta = sym_normalized_laplacian(&sheaf).unwrap();
        let h = harmonic_space(&delta.matrix, KERNEL_TOL).unwrap();
        let projected = project_harmonic(&h, &x);
        let means = class_means(&projected, &labels, c, d);
        for a in 0..c {
            for b in 0..c {
                if a != b {
                    worst_angle_dev =
                        worst_angle_dev.max(distance_to_multiple(angle_deg(&means[a], &means[b]), 90.0));
                }
            }
        }
        orth_ok &= acc >= 1.0;
    }
    orth_ok &= worst_angle_dev <= 1.0;

    // (e) every invertible scalar sheaf leaves one of three classes inside
    // the others' hull.
    let mut hull_ok = true;
    for i in 0..50usize {
        let s = 5300 + i as u64;
        let g = random_connected_graph(9, 0.5, s).unwrap();
        let cls = ClassAssignment::from_labels((0..9).map(|v| v % 3).collect()).unwrap();
        let mut rng = rng_from(s, 6);
        let sheaf = random_invertible_scalar_sheaf(&g, &mut rng);
        let x = random_mat(9, 3, &mut rng);
        let probe = impossibility_probe(&sheaf, &cls, &x).unwrap();
        hull_ok &= probe.hull_violation && !probe.separable;
    }

    gate(
        7,
        "separation powers: signed/diagonal/orthogonal succeed, symmetric and 3-class scalar cannot",
        signed_ok && cap_ok && diag_acc >= 1.0 && orth_ok && hull_ok,
        &format!(
            "signed {signed_ok}, symmetric worst probe {worst_cap:.3} (cap 0.55), diagonal acc {diag_acc:.2}, orth ok {orth_ok} (angle dev {worst_angle_dev:.3} deg), hull violations {hull_ok}"
        ),
    );
}

// -----------------------------------------------------------------------
// criterion 8: energy contraction bound and the small-map witness
// -----------------------------------------------------------------------

#[test]
fn criterion_08_energy_bound_and_witness() {
    let _guard = lock();
    let mut violations = 0usize;
    for i in 0..200u64 {
        let s = 4000 + i;
        // Positive-product scalar family with ReLU.
        {
            let mut rng = rng_from(s, 0);
            let g = random_connected_graph(6 + (s % 6) as usize, 0.5, s).unwrap();
            let sheaf = random_positive_scalar_sheaf(&g, &mut rng);
            let params = SCNParams {
                w1: random_mat(1, 1, &mut rng),
                w2: random_mat(3, 3, &mut rng),
                sigma: Activation::Relu,
            };
            let x = random_mat(g.n(), 3, &mut rng);
            if !check_energy_decrease(&sheaf, &params, &x).unwrap().check_report().holds {
                violations += 1;
            }
        }
        // Symmetric orthogonal family with LeakyReLU.
        {
            let mut rng = rng_from(s, 1);
            let d = 2 + (s % 3) as usize;
            let g = random_connected_graph(5 + (s % 4) as usize, 0.5, s + 1).unwrap();
            let sheaf = random_orth_sym_sheaf(&g, d, &mut rng);
            let params = SCNParams {
                w1: random_mat(d, d, &mut rng),
                w2: random_mat(2, 2, &mut rng),
                sigma: Activation::LeakyRelu(0.2),
            };
            let x = random_mat(g.n() * d, 2, &mut rng);
            if !check_energy_decrease(&sheaf, &params, &x).unwrap().check_report().holds {
                violations += 1;
            }
        }
    }

    // Witness: arbitrarily small stalk-wise map that raises the energy of
    // a harmonic state.
    let mut witness_ok = true;
    for (i, eps) in [1e-1, 1e-3].into_iter().enumerate() {
        let g = random_connected_graph(7, 0.5, 4900 + i as u64).unwrap();
        let w = energy_increase_witness(&g, 2, eps).unwrap();
        let delta = sym_normalized_laplacian(&w.sheaf).unwrap();
        let e_in = dirichlet_energy(&w.sheaf, &delta, &w.x).unwrap();
        let pushed = apply_stalkwise(&w.w1, &w.x, 2);
        let e_out = dirichlet_energy(&w.sheaf, &delta, &pushed).unwrap();
        witness_ok &= e_in <= 1e-10 && e_out > 0.0 && spectral_norm(&w.w1) < eps;
    }

    gate(
        8,
        "layer output energy bounded by lambda* |W1|^2 |W2|^2 x input energy",
        violations == 0 && witness_ok,
        &format!("400 draws across two families, {violations} violations; small-map witness raises harmonic energy: {witness_ok}"),
    );
}

// -----------------------------------------------------------------------
// criterion 9: reverse-mode gradients match finite differences
// -----------------------------------------------------------------------

#[test]
fn criterion_09_gradients_match_finite_differences() {
    let _guard = lock();
    let started = Instant::now();
    let data = synth_multiclass(10, 2, 0.5, 2, 77).unwrap();
    let mut worst = 0.0f64;
    let mut worst_label = String::new();
    for family in [MapFamily::Diagonal, MapFamily::Orthogonal, MapFamily::General] {
        for layers in [1usize, 2] {
            let cfg = NSDModelConfig {
                in_features: data.features.cols(),
                num_classes: data.num_classes,
                d: 2,
                channels: 2,
                layers,
                family,
                householder_count: 2,
                sigma: Activation::Elu,
                symmetric: false,
                hybrid: false,
            };
            let model = NSDModel::new(cfg, 5 + layers as u64).unwrap();
            for block in finite_difference_report(&model, &data, 1e-5).unwrap() {
                if block.relative_error > worst {
                    worst = block.relative_error;
                    worst_label = format!("{}/{layers}-layer {}", family.as_str(), block.name);
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        9,
        "autodiff gradients agree with central differences on every block",
        worst <= 1e-4 && elapsed < 60.0,
        &format!("worst relative error {worst:.2e} ({worst_label}), {elapsed:.2}s"),
    );
}

// -----------------------------------------------------------------------
// criterion 10: bipartite two-class experiment
// -----------------------------------------------------------------------

struct BipartiteOutcome {
    final_test_probe: f64,
    max_test_probe: f64,
    negative_fraction: f64,
}

/// Trains one d=1 learner on the bipartite fixture and probes linear
/// separability of the continuously diffused encoder features under the
/// trained sheaf across a grid of diffusion times.
fn run_bipartite_model(data: &LabeledDataset, symmetric: bool, seed: u64) -> BipartiteOutcome {
    let cfg = NSDModelConfig {
        in_features: data.features.cols(),
        num_classes: data.num_classes,
        d: 1,
        channels: 2,
        layers: 4,
        family: MapFamily::General,
        householder_count: 1,
        sigma: Activation::Elu,
        symmetric,
        hybrid: false,
    };
    let mut model = NSDModel::new(cfg, seed).unwrap();
    let tc = TrainConfig {
        lr: 0.02,
        epochs: 600,
        weight_decay_sheaf: 0.0,
        weight_decay_regular: 0.0,
        patience: 600,
        seed,
    };
    train(&mut model, data, &tc).unwrap();

    let trace = model.unroll(data).unwrap();
    let sheaf = trace.sheaves.last().unwrap();
    let negative = sheaf
        .maps()
        .iter()
        .filter(|em| em.fu[(0, 0)] * em.fv[(0, 0)] < 0.0)
        .count();
    let negative_fraction = negative as f64 / sheaf.maps().len().max(1) as f64;

    let l = assemble(sheaf);
    let delta = normalize(&l, NormalizationKind::AugSym).unwrap();
    let x0 = trace.states[0].clone();
    let mut final_test_probe = f64::NAN;
    let mut max_test_probe = 0.0f64;
    for t in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        let state = if t <= 0.0 {
            x0.clone()
        } else {
            let cfg = DiffusionConfig::new(Scheme::Rk4, 1.0f64.min(t), t, usize::MAX);
            diffuse(&delta, &x0, &cfg).unwrap().final_state().clone()
        };
        let feats = node_features(&normalized(&state), 1).unwrap();
        let acc = linear_probe(
            &feats,
            &data.labels,
            data.num_classes,
            &data.train,
            &data.test,
            &ProbeConfig::default(),
        )
        .unwrap();
        let test = acc.test.unwrap_or(f64::NAN);
        max_test_probe = max_test_probe.max(test);
        final_test_probe = test;
    }
    BipartiteOutcome {
        final_test_probe,
        max_test_probe,
        negative_fraction,
    }
}

#[test]
fn criterion_10_bipartite_reproduction() {
    let _guard = lock();
    let started = Instant::now();
    let data = synth_bipartite(20, 20, 0.3, 1.0, 1.0, 0).unwrap();
    let general = run_bipartite_model(&data, false, 0);
    let symmetric = run_bipartite_model(&data, true, 0);
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        10,
        "general maps solve the bipartite task at large diffusion time, symmetric maps cannot",
        general.final_test_probe >= 0.99
            && symmetric.max_test_probe <= 0.9
            && general.negative_fraction >= 0.95
            && elapsed < 120.0,
        &format!(
            "general probe at t=64: {:.3} (negative transports {:.0}%), symmetric max probe {:.3}, {elapsed:.1}s",
            general.final_test_probe,
            100.0 * general.negative_fraction,
            symmetric.max_test_probe
        ),
    );
}

// -----------------------------------------------------------------------
// criterion 11: three-class heterophilic fixture, d = 2 vs d = 1
// -----------------------------------------------------------------------

#[test]
fn criterion_11_multiclass_stalk_width_advantage() {
    let _guard = lock();
    let mut mean_acc = [0.0f64; 2]; // [d=1, d=2]
    let mut intra_angles: Vec<f64> = Vec::new();
    let mut inter_angles: Vec<f64> = Vec::new();
    for rep in 0..5u64 {
        let fixture_seed = rep;
        let data = synth_multiclass(60, 3, 0.2, 2, fixture_seed).unwrap();
        for d in [1usize, 2] {
            let cfg = NSDModelConfig {
                in_features: data.features.cols(),
                num_classes: 3,
                d,
                channels: 2,
                layers: 3,
                family: if d == 1 { MapFamily::General } else { MapFamily::Orthogonal },
                householder_count: if d == 1 { 1 } else { 2 },
                sigma: Activation::Elu,
                symmetric: false,
                hybrid: false,
            };
            let mut model = NSDModel::new(cfg, fixture_seed + 17).unwrap();
            let tc = TrainConfig {
                lr: 0.02,
                epochs: 150,
                weight_decay_sheaf: 5e-4,
                weight_decay_regular: 5e-4,
                patience: 150,
                seed: fixture_seed,
            };
            let result = train(&mut model, &data, &tc).unwrap();
            mean_acc[d - 1] += result.best.test_acc / 5.0;

            if d == 2 {
                let trace = model.unroll(&data).unwrap();
                let sheaf = trace.sheaves.last().unwrap();
                for (e, &(u, v)) in data.graph.edges().iter().enumerate() {
                    let em = &sheaf.maps()[e];
                    let p = em.fv.transpose().matmul(&em.fu);
                    let angle = p[(1, 0)].atan2(p[(0, 0)]).abs().to_degrees();
                    if data.labels[u] == data.labels[v] {
                        intra_angles.push(angle);
                    } else {
                        inter_angles.push(angle);
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let gap = mean_acc[1] - mean_acc[0];
    let intra = mean(&intra_angles);
    let inter = mean(&inter_angles);
    gate(
        11,
        "width-2 stalks beat scalar stalks on the heterophilic 3-class fixture",
        gap >= 0.05 && inter > intra,
        &format!(
            "mean test acc d=1 {:.3}, d=2 {:.3} (gap {gap:+.3}); rotation angles intra {intra:.1} deg < inter {inter:.1} deg",
            mean_acc[0], mean_acc[1]
        ),
    );
}

// -----------------------------------------------------------------------
// criterion 12: one-layer cost scales linearly in the edge count
// -----------------------------------------------------------------------

/// Connected graph with exactly `m` edges: a spanning path plus random
/// distinct extras.
fn graph_with_edge_count(n: usize, m: usize, seed: u64) -> Graph {
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
    Graph::new(n, &edges).unwrap()
}

/// Median seconds over `trials`, with repetitions calibrated so each
/// trial is long enough to time reliably.
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
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

#[test]
fn criterion_12_layer_cost_linear_in_edges() {
    let _guard = lock();
    let (n, c, d) = (400usize, 8usize, 2usize);
    let mut secs = [0.0f64; 2];
    for (slot, m) in [(0usize, 4000usize), (1, 8000)] {
        let g = graph_with_edge_count(n, m, 7);
        let sheaf = random_sheaf(&g, d, MapFamily::Diagonal, 70 + slot as u64).unwrap();
        let mut rng = rng_from(71, slot as u64);
        let x = random_mat(n * d, c, &mut rng);
        let params = SCNParams {
            w1: Mat::eye(d),
            w2: Mat::eye(c),
            sigma: Activation::Identity,
        };
        secs[slot] = median_seconds(5, || {
            sheaflab::diffusion::scn_forward(&sheaf, &params, &x).unwrap();
        });
    }
    let ratio = secs[1] / secs[0];
    gate(
        12,
        "doubling the edge count doubles the one-layer wall time (diagonal family)",
        (1.5..=2.5).contains(&ratio),
        &format!(
            "m 4000 -> 8000: {:.3} ms -> {:.3} ms, ratio {ratio:.2}",
            secs[0] * 1e3,
            secs[1] * 1e3
        ),
    );
}

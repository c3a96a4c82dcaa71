//! Choosing a small representative set of permeability samples: each sample
//! is simulated under equal well rates, samples are compared by how
//! differently their injected front moves, the distance matrix is embedded in
//! the plane and the embedding is clustered.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::env::{EnvConfig, LevelModel};
use crate::error::{Error, Result};
use crate::fvsim::{simulate_control_step, FlowState, PermeabilityField};

/// Default number of time intervals per episode for the response integral.
pub const DEFAULT_TIME_INTERVALS: usize = 20;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 1000;

/// Concentration snapshots of one equal-rate episode, `n_intervals + 1`
/// uniformly spaced times including the start.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub dt: f64,
    pub snapshots: Vec<Vec<f64>>,
}

/// Symmetric pairwise distances with a zero diagonal, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Domain("distance matrix is not square".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        let d = Self { n, values };
        for i in 0..n {
            if d.get(i, i) != 0.0 {
                return Err(Error::Domain(format!("distance matrix has nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let (a, b) = (d.get(i, j), d.get(j, i));
                if !(a >= 0.0) || a != b {
                    return Err(Error::Domain(format!("distance matrix entry ({i}, {j}) is negative or asymmetric")));
                }
            }
        }
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.get(i, j).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Equal-rate episode on one permeability of `level`.
fn level_response(level: &LevelModel, perm_id: usize, n_intervals: usize) -> Result<Response> {
    let cfg = &level.config;
    let wells = level.rates(&vec![1.0; cfg.n_wells()])?;
    let dt = cfg.episode_time / n_intervals as f64;
    let mut state = FlowState::initial(*level.grid());
    let mut snapshots = Vec::with_capacity(n_intervals + 1);
    snapshots.push(state.concentration.values.clone());
    for _ in 0..n_intervals {
        state = simulate_control_step(&state, level.system(perm_id), &wells, cfg.porosity, dt, &cfg.transport)?.0;
        snapshots.push(state.concentration.values.clone());
    }
    Ok(Response { dt, snapshots })
}

/// Concentration responses of every field under equal well rates. Fields
/// live on `config.grid` or a finer grid with the same extent.
pub fn simulate_responses(perms: &[PermeabilityField], config: &EnvConfig, n_intervals: usize) -> Result<Vec<Response>> {
    if n_intervals == 0 {
        return Err(Error::Config("response needs at least one time interval".into()));
    }
    let Some(first) = perms.first() else {
        return Ok(Vec::new());
    };
    let level = LevelModel::new(config.clone(), first.grid, perms)?;
    (0..perms.len()).into_par_iter().map(|k| level_response(&level, k, n_intervals)).collect()
}

/// `Σ_cells ∫ (c_a − c_b)² dt` with the trapezoid rule.
pub fn response_distance(a: &Response, b: &Response) -> Result<f64> {
    if a.snapshots.len() != b.snapshots.len() || a.dt != b.dt {
        return Err(Error::Domain("responses sampled on different time grids".into()));
    }
    let sq: Vec<f64> = a
        .snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect();
    let n = sq.len();
    let inner: f64 = sq[1..n - 1].iter().sum();
    Ok(a.dt * (0.5 * (sq[0] + sq[n - 1]) + inner))
}

pub fn connectivity_distance(
    a: &PermeabilityField,
    b: &PermeabilityField,
    config: &EnvConfig,
    n_intervals: usize,
) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::Domain("fields live on different grids".into()));
    }
    let r = simulate_responses(&[a.clone(), b.clone()], config, n_intervals)?;
    response_distance(&r[0], &r[1])
}

pub fn distance_matrix(responses: &[Response]) -> Result<DistanceMatrix> {
    let n = responses.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if j > i { response_distance(&responses[i], &responses[j]) } else { Ok(0.0) }).collect())
        .collect::<Result<_>>()?;
    let mut full = rows;
    for i in 0..n {
        for j in 0..i {
            full[i][j] = full[j][i];
        }
    }
    DistanceMatrix::from_rows(full)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    /// All eigenvalues of the centered matrix, largest first.
    pub eigenvalues: Vec<f64>,
    /// Fewer than two positive eigenvalues were found.
    pub degenerate: bool,
}

/// Classical multidimensional scaling into the plane. Entries of `d` are
/// taken as squared distances.
pub fn classical_mds(d: &DistanceMatrix) -> Result<Embedding> {
    let n = d.n();
    if n < 3 {
        return Err(Error::Domain(format!("embedding needs at least 3 samples, got {n}")));
    }
    let mut b = DMatrix::from_fn(n, n, |i, j| d.get(i, j));
    let row_mean: Vec<f64> = (0..n).map(|i| b.row(i).sum() / n as f64).collect();
    let all_mean = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (b[(i, j)] - row_mean[i] - row_mean[j] + all_mean);
        }
    }
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let scale = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let positive = |v: f64| v > 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut coords = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if !positive(lambda) {
            continue;
        }
        let s = lambda.sqrt();
        for (i, c) in coords.iter_mut().enumerate() {
            c[axis] = s * eig.eigenvectors[(i, k)];
        }
    }
    let degenerate = !positive(eigenvalues[1]);
    if degenerate {
        log::warn!("degenerate embedding: fewer than two positive eigenvalues ({:?})", &eigenvalues[..2]);
    }
    Ok(Embedding { coords, eigenvalues, degenerate })
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centers: Vec<[f64; 2]>,
    pub wcss: f64,
}

/// Within-cluster sum of squared distances to the given centers.
pub fn wcss(points: &[[f64; 2]], labels: &[usize], centers: &[[f64; 2]]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum()
}

fn nearest(p: &[f64; 2], centers: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (c, q) in centers.iter().enumerate().skip(1) {
        if sq_dist(p, q) < sq_dist(p, &centers[best]) {
            best = c;
        }
    }
    best
}

fn seed_centers<R: Rng + ?Sized>(points: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centers
}

fn lloyd(points: &[[f64; 2]], mut centers: Vec<[f64; 2]>) -> Clustering {
    let k = centers.len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sum = vec![[0.0; 2]; k];
        let mut count = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sum[l][0] += p[0];
            sum[l][1] += p[1];
            count[l] += 1;
        }
        for c in 0..k {
            if count[c] > 0 {
                centers[c] = [sum[c][0] / count[c] as f64, sum[c][1] / count[c] as f64];
            }
        }
        for c in 0..k {
            if count[c] == 0 {
                // Farthest point from its own center takes over the empty one.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                    })
                    .expect("nonempty points");
                count[labels[far]] -= 1;
                labels[far] = c;
                count[c] = 1;
                centers[c] = points[far];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let wcss = wcss(points, &labels, &centers);
    Clustering { labels, centers, wcss }
}

/// Lloyd's algorithm from k-means++ seeds; best of [`KMEANS_RESTARTS`] runs.
pub fn kmeans<R: Rng + ?Sized>(points: &[[f64; 2]], k: usize, rng: &mut R) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::Usage(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..KMEANS_RESTARTS {
        let c = lloyd(points, seed_centers(points, k, rng));
        if best.as_ref().is_none_or(|b| c.wcss < b.wcss) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Index of the member nearest to each center, lowest index on ties. A
/// cluster without members yields no representative.
pub fn select_representatives(coords: &[[f64; 2]], labels: &[usize], centers: &[[f64; 2]]) -> Result<Vec<usize>> {
    if coords.len() != labels.len() {
        return Err(Error::Usage("coordinates and labels differ in length".into()));
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; centers.len()];
    for (i, (p, &l)) in coords.iter().zip(labels).enumerate() {
        let slot = best.get_mut(l).ok_or_else(|| Error::Usage(format!("label {l} has no center")))?;
        let d = sq_dist(p, &centers[l]);
        if slot.is_none_or(|(_, bd)| d < bd) {
            *slot = Some((i, d));
        }
    }
    Ok(best.into_iter().flatten().map(|(i, _)| i).collect())
}

#[derive(Debug, Clone)]
pub struct ScenarioSelection {
    pub distances: DistanceMatrix,
    pub embedding: Embedding,
    pub clustering: Clustering,
    /// Indices into the input samples, one per cluster.
    pub representatives: Vec<usize>,
}

pub fn select_scenarios<R: Rng + ?Sized>(
    perms: &[PermeabilityField],
    config: &EnvConfig,
    k: usize,
    n_intervals: usize,
    rng: &mut R,
) -> Result<ScenarioSelection> {
    if k == 0 || k > perms.len() {
        return Err(Error::Config(format!("cannot pick {k} representatives from {} samples", perms.len())));
    }
    let responses = simulate_responses(perms, config, n_intervals)?;
    let distances = distance_matrix(&responses)?;
    let embedding = classical_mds(&distances)?;
    let clustering = kmeans(&embedding.coords, k, rng)?;
    let representatives = select_representatives(&embedding.coords, &clustering.labels, &clustering.centers)?;
    Ok(ScenarioSelection { distances, embedding, clustering, representatives })
}

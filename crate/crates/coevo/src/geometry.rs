//! Embedding-space geometry for strategy batches: seeded k-means, planar
//! PCA projection, polar angles, and circular dispersion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("no points to cluster")]
    EmptyInput,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("only {distinct} distinct points for k = {k}")]
    DegenerateClustering { distinct: usize, k: usize },
    #[error("point {index} has dimension {got}, batch dimension is {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
}

/// Embedding vector for the strategy at batch position `index`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyEmbedding {
    pub index: usize,
    pub vector: Vec<f64>,
}

/// Result of k-means: centers, per-point assignment, and the distance of
/// each point to its own center.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Clustering {
    /// Point indices assigned to cluster `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == c).then_some(i))
            .collect()
    }
}

fn check_dims(points: &[Vec<f64>]) -> Result<usize, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let d = points[0].len();
    for (index, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(GeometryError::DimensionMismatch {
                index,
                got: p.len(),
                expected: d,
            });
        }
    }
    Ok(d)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| *q == p) {
            distinct.push(p);
        }
    }
    distinct.len()
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer; decorrelates restart streams
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Weighted k-means++ seeding.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // distinct-point precondition makes this unreachable, but stay safe
            (0..points.len())
                .find(|&i| !centers.contains(&points[i]))
                .unwrap_or(0)
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist_sq(p, centers.last().unwrap()));
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut assignment = Vec::with_capacity(points.len());
    let mut sse = 0.0;
    for p in points {
        let (mut best, mut best_d) = (0usize, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = dist_sq(p, center);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        assignment.push(best);
        sse += best_d;
    }
    (assignment, sse)
}

fn update_centers(points: &[Vec<f64>], assignment: &[usize], k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, &x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    let mut centers = Vec::with_capacity(k);
    for (sum, count) in sums.into_iter().zip(&counts) {
        if *count > 0 {
            centers.push(sum.iter().map(|s| s / *count as f64).collect());
        } else {
            centers.push(Vec::new()); // repaired by caller
        }
    }
    centers
}

fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    d: usize,
    init: Vec<Vec<f64>>,
    max_iters: usize,
    tol: f64,
) -> (Clustering, Vec<f64>) {
    let mut centers = init;
    let mut sse_trace = Vec::new();
    let (mut assignment, sse) = assign(points, &centers);
    sse_trace.push(sse);
    for _ in 0..max_iters {
        let mut next = update_centers(points, &assignment, k, d);
        // Re-seed any emptied cluster at the point farthest from its center;
        // this strictly lowers SSE, keeping the trace monotone.
        for c in 0..k {
            if next[c].is_empty() {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = dist_sq(&points[a], &next[assignment[a]]);
                        let db = dist_sq(&points[b], &next[assignment[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                next[c] = points[far].clone();
            }
        }
        let shift: f64 = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| if b.is_empty() { 0.0 } else { dist_sq(a, b) })
            .sum();
        centers = next;
        let (next_assignment, next_sse) = assign(points, &centers);
        sse_trace.push(next_sse);
        let stable = next_assignment == assignment;
        assignment = next_assignment;
        if stable || shift <= tol {
            break;
        }
    }
    // make each returned center the exact mean of its final members
    let finals = update_centers(points, &assignment, k, d);
    for c in 0..k {
        if !finals[c].is_empty() {
            centers[c] = finals[c].clone();
        }
    }
    let (assignment, final_sse) = assign(points, &centers);
    sse_trace.push(final_sse);
    let distances = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| dist_sq(p, &centers[a]).sqrt())
        .collect();
    (
        Clustering {
            k,
            centers,
            assignment,
            distances,
        },
        sse_trace,
    )
}

const KMEANS_RESTARTS: u64 = 12;

/// Seeded k-means: k-means++ initialization plus Lloyd iterations, best SSE
/// over internal restarts. Deterministic for a given seed.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<Clustering, GeometryError> {
    kmeans_with_trace(points, k, seed, max_iters, tol).map(|(c, _)| c)
}

/// As [`kmeans`], also returning the SSE after each assignment phase of the
/// winning restart. The trace is non-increasing.
pub fn kmeans_with_trace(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(Clustering, Vec<f64>), GeometryError> {
    let d = check_dims(points)?;
    if k == 0 {
        return Err(GeometryError::InvalidK);
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(GeometryError::DegenerateClustering { distinct, k });
    }
    let mut best: Option<(Clustering, Vec<f64>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, restart));
        let init = seed_centers(points, k, &mut rng);
        let (clustering, trace) = lloyd(points, k, d, init, max_iters, tol);
        let sse = *trace.last().unwrap();
        let better = match &best {
            None => true,
            Some((_, best_trace)) => sse < *best_trace.last().unwrap(),
        };
        if better {
            best = Some((clustering, trace));
        }
    }
    Ok(best.unwrap())
}

/// Planar projection of a centered point set.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    pub coords: Vec<[f64; 2]>,
    /// True when the input had no variance at all; coordinates are zeros.
    pub zero_variance: bool,
}

// Relative cutoff below which the second principal variance is treated as
// rank deficiency rather than signal.
const RANK_TOL: f64 = 1e-12;

/// Projects centered vectors onto their top two principal axes.
///
/// Covariance uses the population convention (divide by n). Each axis sign
/// is fixed so its largest-magnitude loading is positive; ties take the
/// lowest coordinate. A zero second eigenvalue yields zero second
/// coordinates; identical inputs yield the all-zero projection, flagged.
pub fn pca_project_2d(centered: &[Vec<f64>]) -> Result<Projection2d, GeometryError> {
    let d = check_dims(centered)?;
    let n = centered.len();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for p in centered {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += p[a] * p[b];
            }
        }
    }
    cov /= n as f64;
    let trace: f64 = (0..d).map(|a| cov[(a, a)]).sum();
    if trace <= 1e-30 {
        return Ok(Projection2d {
            coords: vec![[0.0, 0.0]; n],
            zero_variance: true,
        });
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let axis = |col: usize| -> Vec<f64> {
        let v = eig.eigenvectors.column(order[col]);
        let mut w: Vec<f64> = v.iter().copied().collect();
        let lead = (0..d)
            .max_by(|&a, &b| {
                w[a].abs()
                    .partial_cmp(&w[b].abs())
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        if w[lead] < 0.0 {
            for x in &mut w {
                *x = -*x;
            }
        }
        w
    };
    let w1 = axis(0);
    let lambda1 = eig.eigenvalues[order[0]].max(0.0);
    let (w2, lambda2) = if d >= 2 {
        (axis(1), eig.eigenvalues[order[1]].max(0.0))
    } else {
        (vec![0.0; d], 0.0)
    };
    let keep_second = lambda2 > RANK_TOL * lambda1;
    let coords = centered
        .iter()
        .map(|p| {
            let x: f64 = p.iter().zip(&w1).map(|(a, b)| a * b).sum();
            let y: f64 = if keep_second {
                p.iter().zip(&w2).map(|(a, b)| a * b).sum()
            } else {
                0.0
            };
            [x, y]
        })
        .collect();
    Ok(Projection2d {
        coords,
        zero_variance: false,
    })
}

/// Four-quadrant angle of each planar point, in (-pi, pi]. Points at the
/// origin map to angle 0 and are flagged.
pub fn polar_angles(coords: &[[f64; 2]]) -> (Vec<f64>, Vec<bool>) {
    let mut angles = Vec::with_capacity(coords.len());
    let mut at_origin = Vec::with_capacity(coords.len());
    for &[x, y] in coords {
        if x == 0.0 && y == 0.0 {
            angles.push(0.0);
            at_origin.push(true);
        } else {
            angles.push(y.atan2(x));
            at_origin.push(false);
        }
    }
    (angles, at_origin)
}

/// One minus the mean resultant length; 0 for fully aligned angles, up to 1
/// for angles that cancel.
pub fn circular_dispersion(angles: &[f64]) -> f64 {
    if angles.is_empty() {
        return 0.0;
    }
    let n = angles.len() as f64;
    let c: f64 = angles.iter().map(|a| a.cos()).sum::<f64>() / n;
    let s: f64 = angles.iter().map(|a| a.sin()).sum::<f64>() / n;
    1.0 - (c * c + s * s).sqrt()
}

/// Which point sets a PCA basis is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaScope {
    /// Separate basis per cluster, fitted on that cluster's centered members.
    #[default]
    PerCluster,
    /// One basis fitted on all centered vectors.
    Global,
}

/// Per-strategy planar geometry: centered vectors, 2D coordinates, and
/// polar angles relative to each point's cluster center.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarProjection {
    pub centered: Vec<Vec<f64>>,
    pub coords: Vec<[f64; 2]>,
    pub angles: Vec<f64>,
    pub at_origin: Vec<bool>,
    /// Clusters whose members were all identical; their projections are zero.
    pub zero_variance_clusters: Vec<usize>,
}

/// Centers each point on its cluster center and projects to the plane.
pub fn project_clusters(
    points: &[Vec<f64>],
    clustering: &Clustering,
    scope: PcaScope,
) -> Result<PolarProjection, GeometryError> {
    let d = check_dims(points)?;
    assert_eq!(points.len(), clustering.assignment.len());
    let centered: Vec<Vec<f64>> = points
        .iter()
        .zip(&clustering.assignment)
        .map(|(p, &a)| {
            p.iter()
                .zip(&clustering.centers[a])
                .map(|(x, c)| x - c)
                .collect()
        })
        .collect();
    let mut coords = vec![[0.0, 0.0]; points.len()];
    let mut zero_variance_clusters = Vec::new();
    match scope {
        PcaScope::Global => {
            let proj = pca_project_2d(&centered)?;
            coords = proj.coords;
            if proj.zero_variance {
                zero_variance_clusters = (0..clustering.k).collect();
            }
        }
        PcaScope::PerCluster => {
            for c in 0..clustering.k {
                let members = clustering.members(c);
                if members.is_empty() {
                    continue;
                }
                let subset: Vec<Vec<f64>> =
                    members.iter().map(|&i| centered[i].clone()).collect();
                let proj = pca_project_2d(&subset)?;
                if proj.zero_variance {
                    zero_variance_clusters.push(c);
                }
                for (slot, xy) in members.iter().zip(proj.coords) {
                    coords[*slot] = xy;
                }
            }
        }
    }
    let _ = d;
    let (angles, at_origin) = polar_angles(&coords);
    Ok(PolarProjection {
        centered,
        coords,
        angles,
        at_origin,
        zero_variance_clusters,
    })
}

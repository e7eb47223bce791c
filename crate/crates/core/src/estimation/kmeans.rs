//! k-means clustering and cluster-based starting values.

use rand::Rng;
use rayon::prelude::*;

use crate::emission::TensorEmission;
use crate::error::{Error, Result};
use crate::gaussian::GaussianEmission;
use crate::hmm::{Emission, HmmModel, SequenceSet, TransitionMatrix};

use super::objective::IidSplineObjective;
use super::optim::{maximize, BfgsConfig};
use super::params::{pack, EmissionSpec, ModelSpec, ParameterVector};

/// Empty-cluster re-seeds allowed per seeding before giving up.
pub const RESEED_CAP: usize = 10;
const LLOYD_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster of each point; clusters ordered by the first center coordinate.
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub within_ss: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], y: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(c, y);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seed<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].to_vec());
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

fn lloyd(points: &[&[f64]], mut centers: Vec<Vec<f64>>) -> Result<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let k = centers.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut reseeds = 0;
    for _ in 0..LLOYD_MAX_ITER {
        let mut changed = false;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (c, _) = nearest(&centers, p);
            if c != *l {
                *l = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            reseeds += 1;
            if reseeds > RESEED_CAP {
                return Err(Error::EmptyCluster { retries: RESEED_CAP });
            }
            // move the empty center to the point farthest from its own center
            let far = points
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (p, &l))| (i, sq_dist(p, &centers[l])))
                .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
                .0;
            centers[empty] = points[far].to_vec();
            labels.fill(usize::MAX);
            continue;
        }
        for ((c, s), &n) in centers.iter_mut().zip(&sums).zip(&counts) {
            for (cv, sv) in c.iter_mut().zip(s) {
                *cv = sv / n as f64;
            }
        }
        if !changed {
            break;
        }
    }
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        *l = nearest(&centers, p).0;
    }
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::EmptyCluster { retries: reseeds });
    }
    let wss = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    Ok((labels, centers, wss))
}

/// k-means with k-means++ seeding; the seeding with the smallest within-cluster
/// sum of squares is kept.
pub fn kmeans<R: Rng>(points: &[&[f64]], k: usize, seedings: usize, rng: &mut R) -> Result<Clustering> {
    if k == 0 || points.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    let mut last_err = None;
    for _ in 0..seedings.max(1) {
        let centers = plus_plus_seed(points, k, rng);
        match lloyd(points, centers) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.2 < b.2) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((labels, centers, within_ss)) = best else {
        return Err(last_err.unwrap_or(Error::InitFailure));
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a][0].total_cmp(&centers[b][0]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (r, &o) in order.iter().enumerate() {
        rank[o] = r;
    }
    Ok(Clustering {
        labels: labels.into_iter().map(|l| rank[l]).collect(),
        centers: order.iter().map(|&o| centers[o].clone()).collect(),
        within_ss,
    })
}

/// Sample mean and maximum-likelihood (divide by n) covariance.
pub fn sample_moments(points: &[&[f64]]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n);
    (mean, cov)
}

/// Gaussian fitted to a cluster by its sample moments; a growing ridge is added
/// when the covariance is singular.
pub fn cluster_gaussian(points: &[&[f64]]) -> Result<GaussianEmission> {
    let (mean, mut cov) = sample_moments(points);
    let d = mean.len();
    let scale = (0..d).map(|a| cov[a][a]).fold(0.0, f64::max).max(1.0);
    let mut ridge = 1e-8 * scale;
    for _ in 0..12 {
        if let Ok(g) = GaussianEmission::new(mean.clone(), &cov) {
            return Ok(g);
        }
        for (a, row) in cov.iter_mut().enumerate() {
            row[a] += ridge;
        }
        ridge *= 10.0;
    }
    Err(Error::InitFailure)
}

/// Spline density fitted to i.i.d. points, starting from the uniform coefficients.
pub fn cluster_spline(template: &TensorEmission, points: &[&[f64]], cfg: &BfgsConfig) -> Result<TensorEmission> {
    let obj = IidSplineObjective::new(template.clone(), points)?;
    let x0 = vec![0.0; obj.n_params()];
    let r = maximize(|x| obj.evaluate(x), x0, cfg)?;
    let mut beta = Vec::with_capacity(r.x.len() + 1);
    beta.push(0.0);
    beta.extend_from_slice(&r.x);
    TensorEmission::from_beta(template.bases().to_vec(), beta)
}

/// `(1 - w) a + w / K` in coefficient space, re-expressed relative to the reference.
pub fn blend_uniform(t: &TensorEmission, w: f64) -> Result<TensorEmission> {
    if w <= 0.0 {
        return Ok(t.clone());
    }
    let k = t.coefficients().len() as f64;
    let mixed: Vec<f64> = t.coefficients().iter().map(|a| ((1.0 - w) * a + w / k).ln()).collect();
    let beta = mixed.iter().map(|v| v - mixed[0]).collect();
    TensorEmission::from_beta(t.bases().to_vec(), beta)
}

/// Settings of the cluster-based starting values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub seedings: usize,
    /// BFGS settings of the per-cluster spline fits.
    pub cluster_fit: BfgsConfig,
    /// Diagonal of the starting t.p.m.
    pub persistence: f64,
    /// Weight of the uniform coefficients mixed into each cluster fit.
    pub uniform_blend: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            seedings: 10,
            cluster_fit: BfgsConfig {
                max_iter: 200,
                ..BfgsConfig::default()
            },
            persistence: 0.9,
            uniform_blend: 0.0,
        }
    }
}

/// Starting values: k-means on the pooled observed vectors, one emission fitted
/// per cluster, persistent t.p.m. (covariate slopes zero).
pub fn kmeans_init<R: Rng>(data: &SequenceSet, spec: &ModelSpec, cfg: &InitConfig, rng: &mut R) -> Result<ParameterVector> {
    spec.check_data(data)?;
    let pooled = data.pooled();
    let n = spec.n_states;
    let clustering = kmeans(&pooled, n, cfg.seedings, rng)?;
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); n];
    for (p, &l) in pooled.iter().zip(&clustering.labels) {
        members[l].push(p);
    }
    let emissions = match &spec.emission {
        EmissionSpec::Spline { bases } => {
            let template = TensorEmission::uniform(bases.clone())?;
            members
                .par_iter()
                .map(|m| {
                    let t = cluster_spline(&template, m, &cfg.cluster_fit)?;
                    blend_uniform(&t, cfg.uniform_blend).map(Emission::Spline)
                })
                .collect::<Result<Vec<_>>>()?
        }
        EmissionSpec::Gaussian { .. } => members
            .iter()
            .map(|m| cluster_gaussian(m).map(Emission::Gaussian))
            .collect::<Result<Vec<_>>>()?,
    };
    let matrix = TransitionMatrix::persistent(n, cfg.persistence)?;
    let model = HmmModel::stationary(matrix, emissions)?;
    pack(&model, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::Sequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_clouds(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = if i % 3 == 0 { 5.0 } else { -5.0 };
            pts.push(vec![c + noise.sample(rng), -c + noise.sample(rng)]);
            truth.push(usize::from(c > 0.0));
        }
        (pts, truth)
    }

    #[test]
    fn separated_clouds_recovered_up_to_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pts, truth) = two_clouds(&mut rng);
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let c = kmeans(&refs, 2, 10, &mut rng).unwrap();
        let agree = c.labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(agree == 200 || agree == 0);
        // ordering by first center coordinate
        assert!(c.centers[0][0] < c.centers[1][0]);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = [vec![0.0], vec![1.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(kmeans(&refs, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn duplicate_points_exhaust_reseeds() {
        let pts = vec![vec![1.0, 1.0]; 6];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(kmeans(&refs, 2, 2, &mut rng), Err(Error::EmptyCluster { .. })));
    }

    #[test]
    fn gaussian_init_equals_cluster_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (pts, _) = two_clouds(&mut rng);
        let seq = Sequence::from_rows("s", &pts).unwrap();
        let data = SequenceSet::single(seq);
        let spec = ModelSpec::gaussian(2, 2).unwrap();
        let init = kmeans_init(&data, &spec, &InitConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let model = init.to_model(&spec).unwrap();
        for state in 0..2 {
            // independent two-pass oracle on the cluster with the matching sign
            let members: Vec<&Vec<f64>> = pts.iter().filter(|p| (p[0] > 0.0) == (state == 1)).collect();
            let n = members.len() as f64;
            let mx = members.iter().map(|p| p[0]).sum::<f64>() / n;
            let my = members.iter().map(|p| p[1]).sum::<f64>() / n;
            let sxy = members.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n;
            let sxx = members.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n;
            let Emission::Gaussian(g) = &model.emissions[state] else { panic!() };
            assert!((g.mean()[0] - mx).abs() < 1e-10 && (g.mean()[1] - my).abs() < 1e-10);
            let cov = g.covariance();
            assert!((cov[0][1] - sxy).abs() < 1e-10 && (cov[0][0] - sxx).abs() < 1e-10);
        }
        assert!((model.transition_matrix().unwrap().get(0, 0) - 0.9).abs() < 1e-14);
    }

    #[test]
    fn singular_cluster_gets_ridge() {
        let pts = [vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let g = cluster_gaussian(&refs).unwrap();
        assert!(g.log_density(&[2.0, 4.0]).unwrap().is_finite());
    }
}

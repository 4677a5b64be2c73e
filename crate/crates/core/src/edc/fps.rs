use crate::error::{Error, Result};
use crate::exec;
use crate::gaussian::GaussianCloud;

/// Indices of a greedy farthest-point subset of size `k`, in ascending order.
/// The first pick is the most opaque Gaussian (lowest index on ties); every
/// later pick maximises the distance to the chosen set (lowest index on ties).
pub fn farthest_gaussian_indices(cloud: &GaussianCloud, k: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot sample {k} of {n} gaussians")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let pos = cloud.positions();
    let mut seed = 0;
    for (i, g) in cloud.iter().enumerate() {
        if g.opacity_logit > cloud.gaussians[seed].opacity_logit {
            seed = i;
        }
    }
    let mut chosen = vec![seed];
    // chosen entries sit at -inf so duplicates are never picked twice
    let mut dist = vec![f64::INFINITY; n];
    dist[seed] = f64::NEG_INFINITY;
    let mut last = seed;
    const CHUNK: usize = 4096;
    while chosen.len() < k {
        let p = pos[last];
        exec::for_each_chunk_mut(&mut dist, CHUNK, |ci, c| {
            for (j, d) in c.iter_mut().enumerate() {
                *d = d.min((pos[ci * CHUNK + j] - p).norm_squared());
            }
        });
        let mut best = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        dist[best] = f64::NEG_INFINITY;
        last = best;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn farthest_gaussian_sample(cloud: &GaussianCloud, k: usize) -> Result<GaussianCloud> {
    let idx = farthest_gaussian_indices(cloud, k)?;
    Ok(idx.into_iter().map(|i| cloud.gaussians[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{Gaussian, IDENTITY_QUAT};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn at(x: f64, y: f64, z: f64, logit: f64) -> Gaussian {
        Gaussian {
            position: Vector3::new(x, y, z),
            rotation: IDENTITY_QUAT,
            log_scale: Vector3::repeat(-2.0),
            opacity_logit: logit,
            color: Vector3::repeat(0.5),
        }
    }

    #[test]
    fn line_example() {
        let c: GaussianCloud = (0..4).map(|i| at(i as f64, 0.0, 0.0, 0.0)).collect();
        assert_eq!(farthest_gaussian_indices(&c, 2).unwrap(), vec![0, 3]);
        assert_eq!(farthest_gaussian_sample(&c, 4).unwrap(), c);
        assert!(farthest_gaussian_sample(&c, 5).is_err());
        assert!(farthest_gaussian_sample(&c, 0).is_err());
    }

    #[test]
    fn single_pick_is_most_opaque() {
        let c: GaussianCloud = [0.1, 2.0, -1.0, 2.0].iter().enumerate().map(|(i, &l)| at(i as f64, 0.0, 0.0, l)).collect();
        assert_eq!(farthest_gaussian_indices(&c, 1).unwrap(), vec![1]);
    }

    /// Quadratic reference that recomputes every min-distance from scratch.
    fn oracle(pos: &[[f64; 3]], seed: usize, k: usize) -> Vec<usize> {
        let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
        let mut chosen = vec![seed];
        while chosen.len() < k {
            let score = |i: usize| chosen.iter().map(|&c| d2(&pos[i], &pos[c])).fold(f64::INFINITY, f64::min);
            let best = (0..pos.len())
                .filter(|i| !chosen.contains(i))
                .fold(None, |b: Option<usize>, i| match b {
                    Some(b) if score(b) >= score(i) => Some(b),
                    _ => Some(i),
                })
                .unwrap();
            chosen.push(best);
        }
        chosen.sort_unstable();
        chosen
    }

    proptest! {
        #[test]
        fn matches_quadratic_oracle(pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..40), frac in 0.0f64..1.0) {
            let c: GaussianCloud = pts.iter().map(|p| at(p[0], p[1], p[2], 0.0)).collect();
            let k = 1 + ((pts.len() - 1) as f64 * frac) as usize;
            let got = farthest_gaussian_indices(&c, k).unwrap();
            prop_assert_eq!(got.clone(), oracle(&pts, 0, k));
            prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

//! Small seeded k-means with medoid extraction, used by the DPL builder to
//! pick representative history sessions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm; returns the index of the medoid point of each
/// non-empty cluster, sorted ascending so output is order-stable.
pub fn kmeans_medoids(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("kmeans points".into()));
    }
    let k = k.min(points.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..points.len()).collect();
    indices.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = indices[..k].iter().map(|&i| points[i].clone()).collect();

    let mut assignment = vec![0usize; points.len()];
    for _ in 0..50 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    squared_distance(p, &centroids[a]).total_cmp(&squared_distance(p, &centroids[b]))
                })
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                moved = true;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let dim = centroid.len();
            let mut fresh = vec![0.0; dim];
            for m in &members {
                for (f, v) in fresh.iter_mut().zip(m.iter()) {
                    *f += v;
                }
            }
            for f in &mut fresh {
                *f /= members.len() as f64;
            }
            *centroid = fresh;
        }
        if !moved {
            break;
        }
    }

    let mut medoids = Vec::new();
    for c in 0..k {
        let best = points
            .iter()
            .enumerate()
            .filter(|(i, _)| assignment[*i] == c)
            .min_by(|(_, a), (_, b)| {
                squared_distance(a, &centroids[c]).total_cmp(&squared_distance(b, &centroids[c]))
            })
            .map(|(i, _)| i);
        if let Some(i) = best {
            medoids.push(i);
        }
    }
    medoids.sort_unstable();
    medoids.dedup();
    Ok(medoids)
}

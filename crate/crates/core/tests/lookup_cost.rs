use std::hint::black_box;
use std::time::Instant;

use freeze_core::cache::{CacheContents, LayerCache};
use freeze_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 32;

fn centroid_cache(clusters: usize, rng: &mut ChaCha8Rng) -> LayerCache {
    LayerCache {
        layer_index: 0,
        embed_dim: DIM,
        contents: CacheContents::Centroid {
            centroids: Matrix::new(
                clusters,
                DIM,
                (0..clusters * DIM)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap(),
            labels: (0..clusters as u32).map(|c| c % 10).collect(),
            fractions: vec![0.9; clusters],
        },
    }
}

/// Mean nanoseconds per lookup over one pass of `queries`.
fn pass(cache: &LayerCache, queries: &[Vec<f32>]) -> f64 {
    let start = Instant::now();
    for q in queries {
        black_box(cache.lookup(black_box(q)).unwrap());
    }
    start.elapsed().as_nanos() as f64 / queries.len() as f64
}

#[test]
fn centroid_lookup_cost_is_linear_in_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let queries: Vec<Vec<f32>> = (0..500)
        .map(|_| (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let sizes = [100.0, 200.0, 400.0, 800.0];
    let caches: Vec<LayerCache> = sizes
        .iter()
        .map(|&c| centroid_cache(c as usize, &mut rng))
        .collect();
    // Round-robin passes, best per size, so background load hits every size alike.
    let mut times = vec![f64::INFINITY; sizes.len()];
    for _ in 0..25 {
        for (t, cache) in times.iter_mut().zip(&caches) {
            *t = t.min(pass(cache, &queries));
        }
    }

    // Least-squares line t = a + b * C.
    let n = sizes.len() as f64;
    let mx = sizes.iter().sum::<f64>() / n;
    let my = times.iter().sum::<f64>() / n;
    let sxy: f64 = sizes
        .iter()
        .zip(&times)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let sxx: f64 = sizes.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    assert!(b > 0.0, "cost does not grow with C: {times:?}");
    for (c, t) in sizes.iter().zip(&times) {
        let fit = a + b * c;
        assert!(
            (t - fit).abs() <= 0.25 * fit,
            "C={c}: {t:.0} ns vs fitted {fit:.0} ns (all: {times:?})"
        );
    }
}

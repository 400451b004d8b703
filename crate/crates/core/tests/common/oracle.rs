//! Brute-force references for surface distances and connectivity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const N: usize = 8;

pub fn coords(v: usize) -> [i64; 3] {
    [(v % N) as i64, ((v / N) % N) as i64, (v / (N * N)) as i64]
}

/// Surface voxels: foreground with a face neighbour that is background or
/// lies outside the grid.
pub fn surface(mask: &[bool]) -> Vec<[i64; 3]> {
    let inside = |p: [i64; 3]| p.iter().all(|&c| (0..N as i64).contains(&c));
    let at = |p: [i64; 3]| mask[(p[2] as usize * N + p[1] as usize) * N + p[0] as usize];
    (0..mask.len())
        .filter(|&v| mask[v])
        .map(coords)
        .filter(|&p| {
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                .iter()
                .any(|d| {
                    let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                    !inside(q) || !at(q)
                })
        })
        .collect()
}

pub fn directed(a: &[[i64; 3]], b: &[[i64; 3]], sp: [f64; 3]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (0..3).map(|k| ((p[k] - q[k]) as f64 * sp[k]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn pct95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    v[lo] + (v[pos.ceil() as usize] - v[lo]) * (pos - lo as f64)
}

pub fn random_labels(rng: &mut ChaCha8Rng, density: f64) -> Vec<u16> {
    (0..N * N * N).map(|_| u16::from(rng.random_bool(density))).collect()
}

/// Union-find over explicit 26-neighbour pairs.
pub fn oracle_components(mask: &[bool], s: [usize; 3]) -> Vec<usize> {
    let n = mask.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let pos = |i: usize| [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]];
    for a in 0..n {
        for b in a + 1..n {
            if !(mask[a] && mask[b]) {
                continue;
            }
            let (pa, pb) = (pos(a), pos(b));
            if (0..3).all(|k| pa[k].abs_diff(pb[k]) <= 1) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}


/// All-pairs Hausdorff (max, P95) of label 1 on the `N³` grid.
pub fn brute_hausdorff(a: &[u16], b: &[u16], sp: [f64; 3]) -> (f64, f64) {
    let sa = surface(&a.iter().map(|&l| l == 1).collect::<Vec<_>>());
    let sb = surface(&b.iter().map(|&l| l == 1).collect::<Vec<_>>());
    let (ab, ba) = (directed(&sa, &sb, sp), directed(&sb, &sa, sp));
    let max = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
    (max, pct95(ab).max(pct95(ba)))
}

use extremeseg::interactions::{egd_map, geodesic_distance, roi_from_points, EgdParams, InteractionSet};
use extremeseg::stats::{dsc, max_diameter_transverse, paired_t_test, student_t_two_sided_p, volume_mm3};
use extremeseg::volume::mvol::{read_mask, read_volume, write_mask, write_volume, Dtype};
use extremeseg::{Geometry, Mask3D, Modality, Volume3D};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn rotation(a: f64, b: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    // Rz(a)·Rx(b)
    [[ca, -sa * cb, sa * sb], [sa, ca * cb, -ca * sb], [0.0, sb, cb]]
}

/// Cheapest simple path from any seed to every node, by exhaustive DFS.
fn brute_force_paths(intensity: &[f32], dims: [usize; 3], spacing: [f64; 3], seeds: &[usize], lambda: f64) -> Vec<f64> {
    let n = intensity.len();
    let nbrs = |i: usize| {
        let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        let mut out = Vec::new();
        for a in 0..3 {
            for d in [-1i64, 1] {
                let mut q = c;
                let v = c[a] as i64 + d;
                if v < 0 || v >= dims[a] as i64 {
                    continue;
                }
                q[a] = v as usize;
                out.push((q[0] + dims[0] * (q[1] + dims[1] * q[2]), spacing[a]));
            }
        }
        out
    };
    fn dfs(
        node: usize,
        cost: f64,
        visited: u64,
        best: &mut [f64],
        nbrs: &dyn Fn(usize) -> Vec<(usize, f64)>,
        w: &dyn Fn(usize, usize, f64) -> f64,
    ) {
        best[node] = best[node].min(cost);
        for (m, mm) in nbrs(node) {
            if visited & (1 << m) == 0 {
                dfs(m, cost + w(node, m, mm), visited | (1 << m), best, nbrs, w);
            }
        }
    }
    let w = |a: usize, b: usize, mm: f64| (1.0 - lambda) * mm + lambda * (intensity[a] as f64 - intensity[b] as f64).abs();
    let mut best = vec![f64::INFINITY; n];
    for &s in seeds {
        dfs(s, 0.0, 1 << s, &mut best, &nbrs, &w);
    }
    best
}

fn mask_strategy() -> impl Strategy<Value = ([usize; 3], [f64; 3], Vec<u8>, Vec<u8>)> {
    (1usize..=8, 1usize..=8, 1usize..=8, 0.25f64..3.0, 0.25f64..3.0, 0.25f64..5.0).prop_flat_map(
        |(x, y, z, sx, sy, sz)| {
            let n = x * y * z;
            (
                Just([x, y, z]),
                Just([sx, sy, sz]),
                prop::collection::vec(0u8..=1, n),
                prop::collection::vec(0u8..=1, n),
            )
        },
    )
}

proptest! {
    #[test]
    fn geometry_round_trip(
        dims in (1usize..40, 1usize..40, 1usize..20),
        spacing in (0.2f64..5.0, 0.2f64..5.0, 0.2f64..8.0),
        origin in (-200.0f64..200.0, -200.0f64..200.0, -200.0f64..200.0),
        angles in (-3.1f64..3.1, -3.1f64..3.1),
        v in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let g = Geometry::new(
            [dims.0, dims.1, dims.2],
            [spacing.0, spacing.1, spacing.2],
            [origin.0, origin.1, origin.2],
            rotation(angles.0, angles.1),
        ).unwrap();
        let p = [v.0 * dims.0 as f64, v.1 * dims.1 as f64, v.2 * dims.2 as f64];
        let back = g.voxel_from_world(g.world_from_continuous(p));
        for a in 0..3 {
            prop_assert!((back[a] - p[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn mvol_round_trip(
        dims in (1usize..6, 1usize..6, 1usize..5),
        seed in any::<u64>(),
        spacing in (0.3f64..3.0, 0.3f64..3.0, 0.3f64..6.0),
    ) {
        let g = Geometry::new([dims.0, dims.1, dims.2], [spacing.0, spacing.1, spacing.2], [1.5, -2.0, 3.25], rotation(0.3, -0.2)).unwrap();
        let n = g.len();
        let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 - 500.0).collect();
        let v = Volume3D::new(g.clone(), data, Modality::Ct).unwrap();
        let m = Mask3D::new(g, (0..n).map(|i| ((i as u64 ^ seed) & 1) as u8).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for dt in [Dtype::F32, Dtype::I16] {
            let p = dir.path().join("case.mvol");
            write_volume(&p, &v, dt).unwrap();
            prop_assert_eq!(read_volume(&p).unwrap(), v.clone());
        }
        let p = dir.path().join("seg.mvol");
        write_mask(&p, &m).unwrap();
        prop_assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn egd_matches_exhaustive_paths(
        perm in 0usize..3,
        intensity in prop::collection::vec(-3.0f32..3.0, 18),
        lambda in 0.0f64..=1.0,
        spacing in (0.5f64..2.0, 0.5f64..2.0, 0.5f64..4.0),
        seeds in prop::collection::btree_set(0usize..18, 1..=3),
    ) {
        let dims = [[3, 3, 2], [3, 2, 3], [2, 3, 3]][perm];
        let spacing = [spacing.0, spacing.1, spacing.2];
        let seeds: Vec<usize> = seeds.into_iter().collect();
        let coords: Vec<[usize; 3]> = seeds
            .iter()
            .map(|&i| [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])])
            .collect();
        let d = geodesic_distance(&intensity, dims, spacing, &coords, lambda).unwrap();
        let oracle = brute_force_paths(&intensity, dims, spacing, &seeds, lambda);
        for (a, b) in d.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn egd_properties(
        intensity in prop::collection::vec(-2.0f32..2.0, 60),
        lambda in 0.0f64..=1.0,
        seed in 0usize..60,
    ) {
        let dims = [5, 4, 3];
        let c = [seed % 5, (seed / 5) % 4, seed / 20];
        let p1 = EgdParams { lambda, nu: 1.0, connectivity: 6 };
        let p2 = EgdParams { nu: 2.0, ..p1 };
        let m1 = egd_map(&intensity, dims, [1.0, 1.0, 2.0], &[c], p1).unwrap();
        let m2 = egd_map(&intensity, dims, [1.0, 1.0, 2.0], &[c], p2).unwrap();
        let (v1, v2) = (m1.values(), m2.values());
        prop_assert_eq!(v1[seed], 1.0);
        for (a, b) in v1.iter().zip(&v2) {
            prop_assert!(*a > 0.0 && *a <= 1.0);
            prop_assert!((a * a - b).abs() < 1e-12);
        }
        // EGD never increases away from the seed along a shortest-path tree:
        // every non-seed voxel has a neighbour at least as close.
        let dist = m1.distance();
        for i in 0..60 {
            if i == seed { continue; }
            let q = [i % 5, (i / 5) % 4, i / 20];
            let mut ok = false;
            for a in 0..3 {
                for d in [-1i64, 1] {
                    let v = q[a] as i64 + d;
                    if v < 0 || v >= dims[a] as i64 { continue; }
                    let mut r = q;
                    r[a] = v as usize;
                    ok |= dist[r[0] + 5 * (r[1] + 4 * r[2])] <= dist[i];
                }
            }
            prop_assert!(ok);
        }
    }

    #[test]
    fn roi_contains_every_click(
        pts in prop::collection::vec((0usize..30, 0usize..30, 0usize..12), 6),
        div in (1usize..5, 1usize..5, 1usize..3),
    ) {
        let dims = [30, 30, 12];
        let mut v = [[0.0; 3]; 6];
        for (i, p) in pts.iter().enumerate() {
            v[i] = [p.0 as f64, p.1 as f64, p.2 as f64];
        }
        let set = InteractionSet::from_voxels(v);
        let divisors = [1 << div.0.min(3), 1 << div.1.min(3), div.2];
        let roi = roi_from_points(&set, divisors, dims).unwrap();
        for p in &pts {
            prop_assert!(roi.contains_image_voxel([p.0 as i64, p.1 as i64, p.2 as i64]));
        }
        let size = roi.size();
        for a in 0..3 {
            prop_assert_eq!(size[a] % divisors[a], 0);
        }
    }

    #[test]
    fn metrics_match_set_oracles((dims, spacing, a, b) in mask_strategy()) {
        let g = Geometry::simple(dims, spacing).unwrap();
        let ma = Mask3D::new(g.clone(), a.clone()).unwrap();
        let mb = Mask3D::new(g, b.clone()).unwrap();
        let sa: Vec<usize> = (0..a.len()).filter(|&i| a[i] == 1).collect();
        let sb: Vec<usize> = (0..b.len()).filter(|&i| b[i] == 1).collect();
        let inter = sa.iter().filter(|i| sb.contains(i)).count();
        let expect = if sa.is_empty() && sb.is_empty() { 1.0 } else { 2.0 * inter as f64 / (sa.len() + sb.len()) as f64 };
        prop_assert_eq!(dsc(&ma, &mb).unwrap(), expect);
        prop_assert_eq!(dsc(&mb, &ma).unwrap(), expect);
        prop_assert_eq!(volume_mm3(&ma), sa.len() as f64 * (spacing[0] * spacing[1] * spacing[2]));
        if sa.is_empty() {
            prop_assert!(max_diameter_transverse(&ma).is_err());
        } else {
            let mut best = 0f64;
            for &i in &sa {
                for &j in &sa {
                    let (ci, cj) = (ma.geometry().coords(i), ma.geometry().coords(j));
                    if ci[2] != cj[2] { continue; }
                    let dx = (ci[0] as f64 - cj[0] as f64) * spacing[0];
                    let dy = (ci[1] as f64 - cj[1] as f64) * spacing[1];
                    best = best.max((dx * dx + dy * dy).sqrt());
                }
            }
            prop_assert_eq!(max_diameter_transverse(&ma).unwrap(), best);
        }
    }
}

#[test]
fn t_test_p_values_match_reference_distribution() {
    for df in [1.0, 4.0, 30.0] {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        for t in [0.5, 2.0, 4.0] {
            let reference = 2.0 * (1.0 - dist.cdf(t));
            let p = student_t_two_sided_p(t, df);
            assert!((p - reference).abs() < 1e-3, "df {df} t {t}: {p} vs {reference}");
            assert!((student_t_two_sided_p(-t, df) - p).abs() < 1e-15);
        }
    }
    let r = paired_t_test(&[2.0, 3.0, 4.0, 5.0, 6.0], &[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let reference = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, 4.0).unwrap().cdf(r.t));
    assert!((r.p_two_sided - reference).abs() < 1e-6);
}

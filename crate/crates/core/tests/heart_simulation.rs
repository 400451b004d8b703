use mehtc::heartrecon::{
    full_coverage_planes, make_pair, make_synthetic_heart, make_synthetic_heart_on, rasterize_slices, simulate_misalignment,
    standard_protocol, ErrorModel, Protocol, ProtocolConfig, ReconGrid, SlicePlane, SliceView, DENSE_CLASSES,
};
use mehtc::volio::{Geometry, LabelMap, LabelSchema, SchemaView};

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[test]
fn zero_sigma_leaves_planes_untouched() {
    let p = SlicePlane::new([80.0, 70.0, 60.0], [0.2, -0.5, 1.0], 150.0, 8.0, SliceView::Sax(3)).unwrap();
    for i in 0..20 {
        assert_eq!(simulate_misalignment(&p, &ErrorModel::none(), i).unwrap(), p);
    }
}

#[test]
fn misalignment_has_the_configured_spread() {
    let p = SlicePlane::new([0.0; 3], [0.3, 0.4, 1.0], 100.0, 8.0, SliceView::Lax4ch).unwrap();
    let em = ErrorModel { sigma_position: 2.0, sigma_breathhold: 3.0, seed: 11 };
    let mut offsets = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..1000 {
        let q = simulate_misalignment(&p, &em, i).unwrap();
        assert_eq!((q.normal, q.axis_u, q.axis_v), (p.normal, p.axis_u, p.axis_v));
        let d = [q.origin[0] - p.origin[0], q.origin[1] - p.origin[1], q.origin[2] - p.origin[2]];
        offsets[0].push(dot(d, p.normal));
        offsets[1].push(dot(d, p.axis_u));
        offsets[2].push(dot(d, p.axis_v));
    }
    for (o, sigma) in offsets.iter().zip([2.0, 3.0, 3.0]) {
        let mean = o.iter().sum::<f64>() / o.len() as f64;
        let std = (o.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (o.len() - 1) as f64).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.1, "std {std} for sigma {sigma}");
        assert!(mean.abs() < 4.0 * sigma / (o.len() as f64).sqrt());
    }
}

fn dense_from(dims: [usize; 3], spacing: f64, f: impl Fn(usize) -> u16) -> LabelMap {
    let n = dims.iter().product();
    LabelMap::new(Geometry::new(dims, [spacing; 3]), (0..n).map(f).collect(), LabelSchema::get(SchemaView::Completion9)).unwrap()
}

#[test]
fn axial_mid_plane_copies_one_layer() {
    let (n, s) = (12, 2.0);
    let dense = dense_from([n; 3], s, |v| (v % 9) as u16);
    let k = 5;
    let plane = SlicePlane::new([11.0, 11.0, k as f64 * s], [0.0, 0.0, 1.0], 100.0, s, SliceView::Sax(0)).unwrap();
    let sparse = rasterize_slices(&dense, &[plane], &ErrorModel::none()).unwrap();
    assert_eq!(sparse.schema.view, SchemaView::Completion7);
    for v in 0..n * n * n {
        let want = if v / (n * n) == k && dense.data[v] < 7 { dense.data[v] } else { 0 };
        assert_eq!(sparse.data[v], want, "voxel {v}");
    }
}

#[test]
fn oblique_slab_selects_voxels_by_distance() {
    let (n, s) = (20, 1.5);
    let dense = dense_from([n; 3], s, |_| 1);
    let normal = [0.4, -0.7, 0.6];
    let len = dot(normal, normal).sqrt();
    let nn = normal.map(|x| x / len);
    let origin = [14.0, 13.0, 15.0];
    let plane = SlicePlane::new(origin, normal, 1000.0, 4.0, SliceView::Lax2ch).unwrap();
    let sparse = rasterize_slices(&dense, &[plane], &ErrorModel::none()).unwrap();
    let mut hits = 0;
    for v in 0..n * n * n {
        let p = [(v % n) as f64 * s, ((v / n) % n) as f64 * s, (v / (n * n)) as f64 * s];
        let d = dot([p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]], nn).abs();
        if (d - 2.0).abs() < 1e-9 {
            continue;
        }
        assert_eq!(sparse.data[v] == 1, d < 2.0, "voxel {v} at distance {d}");
        hits += usize::from(d < 2.0);
    }
    assert!(hits > 0);
}

#[test]
fn full_coverage_reproduces_the_dense_map() {
    let grid = ReconGrid::default();
    let dense = make_synthetic_heart(4).unwrap();
    let sparse = rasterize_slices(&dense, &full_coverage_planes(&grid).unwrap(), &ErrorModel::none()).unwrap();
    for (s, d) in sparse.data.iter().zip(&dense.data) {
        assert_eq!(*s, if *d >= 7 { 0 } else { *d });
    }
}

#[test]
fn heart_anatomy_at_full_resolution() {
    let heart = make_synthetic_heart(0).unwrap();
    assert_eq!(heart.geometry.dims, [160; 3]);
    for cls in 0..DENSE_CLASSES as u16 {
        assert!(heart.count(cls) >= 100, "class {cls}: {} voxels", heart.count(cls));
    }
    // the cavity is wrapped in myocardium
    let n = 160;
    for v in (0..heart.data.len()).filter(|&v| heart.data[v] == 1) {
        let (i, j, k) = (v % n, (v / n) % n, v / (n * n));
        assert!(i > 0 && j > 0 && k > 0 && i + 1 < n && j + 1 < n && k + 1 < n);
        for w in [v - 1, v + 1, v - n, v + n, v - n * n, v + n * n] {
            assert!(matches!(heart.data[w], 1 | 2), "cavity voxel {v} touches label {}", heart.data[w]);
        }
    }
}

#[test]
fn simulation_is_deterministic() {
    let grid = ReconGrid { size: 32, box_mm: 160.0 };
    let em = ErrorModel { seed: 5, ..ErrorModel::default() };
    let a = make_pair(9, &grid, &ProtocolConfig::default(), &em).unwrap();
    let b = make_pair(9, &grid, &ProtocolConfig::default(), &em).unwrap();
    assert_eq!(a.sparse, b.sparse);
    assert_eq!(a.dense, b.dense);
    assert_ne!(make_synthetic_heart_on(10, &grid).unwrap(), a.dense);
}

#[test]
fn protocol_json_round_trip() {
    let dense = make_synthetic_heart_on(2, &ReconGrid { size: 32, box_mm: 160.0 }).unwrap();
    let protocol = Protocol { planes: standard_protocol(&dense, &ProtocolConfig::default()).unwrap() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("protocol.json");
    protocol.save(&path).unwrap();
    assert_eq!(Protocol::load(&path).unwrap(), protocol);
}

use std::path::Path;

use mehtc::volio::{
    read_header, read_labels, read_volume, resample, resample_labels, resampled_geometry, write_labels, write_volume, Geometry,
    LabelMap, LabelSchema, Loaded, SchemaView, Volume,
};
use mehtc::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimal little-endian NIfTI-1 file assembled field by field.
struct RawHeader {
    dim: [i16; 8],
    datatype: i16,
    bitpix: i16,
    pixdim: [f32; 8],
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
    magic: [u8; 4],
}

impl RawHeader {
    fn new(dims: [i16; 3]) -> Self {
        RawHeader {
            dim: [3, dims[0], dims[1], dims[2], 1, 1, 1, 1],
            datatype: 16,
            bitpix: 32,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
            magic: *b"n+1\0",
        }
    }

    fn file(&self, data: &[f32]) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in self.dim.iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&self.datatype.to_le_bytes());
        b[72..74].copy_from_slice(&self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[252..254].copy_from_slice(&self.qform_code.to_le_bytes());
        b[254..256].copy_from_slice(&self.sform_code.to_le_bytes());
        for (i, q) in self.quatern.iter().chain(&self.qoffset).enumerate() {
            b[256 + 4 * i..260 + 4 * i].copy_from_slice(&q.to_le_bytes());
        }
        for r in 0..3 {
            for c in 0..4 {
                let at = 280 + 16 * r + 4 * c;
                b[at..at + 4].copy_from_slice(&self.srow[r][c].to_le_bytes());
            }
        }
        b[344..348].copy_from_slice(&self.magic);
        for v in data {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }
}

fn image(path: &Path) -> Volume {
    match read_volume(path, None).unwrap() {
        Loaded::Image(v) => v,
        Loaded::Labels(_) => panic!("expected an image"),
    }
}

fn close(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5)
}

#[test]
fn float_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Geometry::new([5, 4, 3], [0.7, 1.3, 2.5]);
    g.origin = [-10.5, 3.25, 7.0];
    // 90 degrees about z, then k flipped (left-handed frame)
    g.direction = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]];
    let data: Vec<f32> = (0..60).map(|_| rng.random_range(-1e3f32..1e3)).collect();
    let v = Volume::new(g.clone(), data).unwrap();
    for name in ["a.nii", "a.nii.gz"] {
        let p = dir.path().join(name);
        write_volume(&v, &p).unwrap();
        let back = image(&p);
        assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.geometry.dims, g.dims);
        assert!(close(back.geometry.spacing, g.spacing));
        assert!(close(back.geometry.origin, g.origin));
        for r in 0..3 {
            assert!(close(back.geometry.direction[r], g.direction[r]));
        }
    }
    let raw = std::fs::read(dir.path().join("a.nii")).unwrap();
    assert_eq!(i32::from_le_bytes(raw[0..4].try_into().unwrap()), 348);
    assert_eq!(raw.len(), 352 + 60 * 4);
    assert_eq!(&raw[344..348], b"n+1\0");
}

#[test]
fn label_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let schema = LabelSchema::get(SchemaView::Completion9);
    let data: Vec<u16> = (0..4 * 4 * 2).map(|i| (i % 9) as u16).collect();
    let m = LabelMap::new(Geometry::new([4, 4, 2], [1.0, 1.0, 3.0]), data, schema.clone()).unwrap();
    let p = dir.path().join("l.nii.gz");
    write_labels(&m, &p).unwrap();
    assert_eq!(read_labels(&p, &schema).unwrap(), m);
    assert_eq!(read_header(&p).unwrap().datatype, 4);
    // labels outside the schema are rejected
    assert!(matches!(read_labels(&p, &LabelSchema::get(SchemaView::Sax)), Err(Error::Data(_))));
}

#[test]
fn bad_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = RawHeader::new([2, 2, 2]);
    h.magic = *b"xyz\0";
    let p = dir.path().join("bad.nii");
    std::fs::write(&p, h.file(&[0.0; 8])).unwrap();
    let err = read_volume(&p, None).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn multi_frame_series_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = RawHeader::new([2, 2, 2]);
    h.dim[0] = 4;
    h.dim[4] = 3;
    let p = dir.path().join("series.nii");
    std::fs::write(&p, h.file(&[0.0; 24])).unwrap();
    assert!(matches!(read_volume(&p, None), Err(Error::Format { .. })));
}

#[test]
fn sform_affine_is_decoded() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = RawHeader::new([3, 2, 2]);
    h.sform_code = 1;
    // i -> -y at 2 mm, j -> +x at 0.5 mm, k -> +z at 3 mm
    h.srow = [[0.0, 0.5, 0.0, 10.0], [-2.0, 0.0, 0.0, 20.0], [0.0, 0.0, 3.0, -5.0]];
    let p = dir.path().join("s.nii");
    std::fs::write(&p, h.file(&[0.0; 12])).unwrap();
    let g = image(&p).geometry;
    assert!(close(g.spacing, [2.0, 0.5, 3.0]));
    assert!(close(g.origin, [10.0, 20.0, -5.0]));
    assert!(close(g.world([1.0, 1.0, 1.0]), [10.5, 18.0, -2.0]));
    assert!(close(g.index([10.5, 18.0, -2.0]), [1.0, 1.0, 1.0]));
}

#[test]
fn qform_quaternion_is_decoded() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = RawHeader::new([2, 2, 2]);
    h.qform_code = 1;
    // 180 degrees about z, k axis flipped by qfac
    h.quatern = [0.0, 0.0, 1.0];
    h.qoffset = [1.0, 2.0, 3.0];
    h.pixdim = [-1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0];
    let p = dir.path().join("q.nii");
    std::fs::write(&p, h.file(&[0.0; 8])).unwrap();
    let g = image(&p).geometry;
    assert!(close(g.world([1.0, 0.0, 0.0]), [-1.0, 2.0, 3.0]));
    assert!(close(g.world([0.0, 1.0, 0.0]), [1.0, -1.0, 3.0]));
    assert!(close(g.world([0.0, 0.0, 1.0]), [1.0, 2.0, -1.0]));
}

#[test]
fn trilinear_resampling_reproduces_a_ramp() {
    let g = Geometry::new([20, 16, 12], [1.0, 1.5, 2.0]);
    let ramp = |p: [f64; 3]| 0.3 * p[0] - 0.2 * p[1] + 0.7 * p[2] + 1.0;
    let mut data = Vec::new();
    for k in 0..12 {
        for j in 0..16 {
            for i in 0..20 {
                data.push(ramp(g.world([i as f64, j as f64, k as f64])) as f32);
            }
        }
    }
    let v = Volume::new(g.clone(), data).unwrap();
    let target = [0.6, 2.1, 1.3];
    let out = resample(&v, target).unwrap();
    assert_eq!(out.geometry, resampled_geometry(&g, target).unwrap());
    let o = &out.geometry;
    // the physical box is preserved up to rounding of the extents
    for a in 0..3 {
        assert!((o.dims[a] as f64 * target[a] - g.dims[a] as f64 * g.spacing[a]).abs() <= target[a] / 2.0 + 1e-9);
    }
    let mut checked = 0;
    for k in 0..o.dims[2] {
        for j in 0..o.dims[1] {
            for i in 0..o.dims[0] {
                let w = o.world([i as f64, j as f64, k as f64]);
                let src = g.index(w);
                if (0..3).all(|a| src[a] >= 0.0 && src[a] <= (g.dims[a] - 1) as f64) {
                    let got = out.data[(k * o.dims[1] + j) * o.dims[0] + i] as f64;
                    assert!((got - ramp(w)).abs() < 1e-4, "{got} vs {}", ramp(w));
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > o.voxels() / 2);
}

#[test]
fn nearest_label_resampling_keeps_the_label_set() {
    let schema = LabelSchema::get(SchemaView::Sax);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<u16> = (0..10 * 10 * 6).map(|_| rng.random_range(0..4)).collect();
    let m = LabelMap::new(Geometry::new([10, 10, 6], [1.0, 1.0, 2.0]), data, schema).unwrap();
    let up = resample_labels(&m, [0.5, 0.5, 0.7]).unwrap();
    let set = |d: &[u16]| {
        let mut s: Vec<u16> = d.to_vec();
        s.sort();
        s.dedup();
        s
    };
    assert_eq!(set(&up.data), set(&m.data));
    let down = resample_labels(&m, [2.0, 2.0, 4.0]).unwrap();
    assert!(set(&down.data).iter().all(|l| set(&m.data).contains(l)));
}

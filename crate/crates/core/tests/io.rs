mod common;

use std::path::Path;

use proptest::prelude::*;

use soromorph::io::{density_volume, parse_waveform, read_volume, write_volume, DensityVolume};
use soromorph::scenario::Scenario;
use soromorph::surface::{extract_isosurface, to_polyline_csv};
use soromorph::Error;

#[test]
fn bundled_scenarios_round_trip_through_text() {
    for name in ["gradcheck_desk2d", "walker_desk2d", "climber_desk2d", "walker_full"] {
        let ls = common::load(name);
        let text = ls.scenario.to_text().unwrap();
        let again = Scenario::parse(&text, Path::new("roundtrip")).unwrap();
        assert_eq!(again, ls.scenario, "{name}");
    }
}

#[test]
fn full_size_walker_loads() {
    let s = common::load("walker_full").scenario;
    assert_eq!(s.dimension, 3);
    assert_eq!(s.grid.resolution, 100);
    assert_eq!(s.grid.spacing_m, 1.75e-3);
    assert_eq!(s.body.size_m, vec![0.035; 3]);
    assert_eq!(s.time.dt_s, 1e-5);
    assert_eq!(s.fluid.density_kg_m3, 100.0);
    assert_eq!(s.optimizer.constraint_max, 0.0125);
    s.validate().unwrap();
}

#[test]
fn oversized_chamber_is_rejected() {
    let ls = common::load("gradcheck_desk2d");
    let mut s = ls.scenario.clone();
    s.body.chamber_size_m = vec![0.05, 0.05];
    assert!(matches!(s.validate(), Err(Error::Validation(_))));
}

#[test]
fn unknown_scenario_keys_name_the_line() {
    let ls = common::load("gradcheck_desk2d");
    let text = ls.text.replace("[grid]\n", "[grid]\nresolutoin = 3\n");
    match Scenario::parse(&text, Path::new("bad.scenario")) {
        Err(Error::Parse { line, message, .. }) => {
            assert!(line > 1);
            assert!(message.contains("resolutoin"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn waveform_errors() {
    let p = Path::new("w.csv");
    assert!(matches!(parse_waveform(p, "", None), Err(Error::Format { .. })));
    assert!(matches!(parse_waveform(p, "0,1\n0.1,2\n0.1,3\n", None), Err(Error::Format { .. })));
    assert!(matches!(parse_waveform(p, "0,1\nabc,2\n", None), Err(Error::Parse { line: 2, .. })));
    let w = parse_waveform(p, "time_s,pressure_pa\n0,0\n0.1,5\n", None).unwrap();
    assert!((w.period() - 0.2).abs() < 1e-15);
}

#[test]
fn design_density_volume_is_written_and_read_back() {
    let (_, pb) = common::problem::<2>("gradcheck_desk2d");
    let gamma: Vec<f64> = (0..pb.sim.n_design()).map(|i| (i % 3) as f64 / 2.0).collect();
    let vol = density_volume(&pb, &gamma).unwrap();
    assert_eq!(vol.dims[2], 1);
    assert!(vol.values.iter().all(|v| (0.0..=1.0).contains(v)));
    let dir = tempfile::tempdir().unwrap();
    for name in ["d.vol", "d.csv"] {
        let path = dir.path().join(name);
        write_volume(&path, &vol).unwrap();
        assert_eq!(read_volume(&path).unwrap(), vol);
    }
}

fn radial(n: usize, f: impl Fn(f64) -> f64, planar: bool) -> DensityVolume {
    let h = 1.0 / (n - 1) as f64;
    let nz = if planar { 1 } else { n };
    let mut values = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..nz {
                let z = if planar { 0.0 } else { k as f64 * h - 0.5 };
                let r = ((i as f64 * h - 0.5).powi(2) + (j as f64 * h - 0.5).powi(2) + z * z).sqrt();
                values.push(f(r));
            }
        }
    }
    DensityVolume::new([n, n, nz], h, [0.0; 3], values).unwrap()
}

#[test]
fn contour_of_a_disc_is_closed() {
    let vol = radial(41, |r| 0.5 * (1.0 - ((r - 0.3) / 0.05).tanh()), true);
    let mesh = extract_isosurface(&vol, 0.5).unwrap();
    assert!(mesh.triangles.is_empty());
    assert!(mesh.watertight);
    assert_eq!(mesh.components, 1);
    let area = mesh.enclosed_measure();
    assert!((area - std::f64::consts::PI * 0.09).abs() < 0.01, "{area}");
    let csv = to_polyline_csv(&mesh);
    assert_eq!(csv.lines().count(), mesh.segments.len() + 1);
}

#[test]
fn two_blobs_are_two_components() {
    let n = 41;
    let h = 1.0 / (n - 1) as f64;
    let mut values = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (i as f64 * h, j as f64 * h);
            let a = ((x - 0.25).powi(2) + (y - 0.5).powi(2)).sqrt();
            let b = ((x - 0.75).powi(2) + (y - 0.5).powi(2)).sqrt();
            values.push(if a.min(b) < 0.15 { 1.0 } else { 0.0 });
        }
    }
    let vol = DensityVolume::new([n, n, 1], h, [0.0; 3], values).unwrap();
    let mesh = extract_isosurface(&vol, 0.5).unwrap();
    assert_eq!(mesh.components, 2);
    assert!(mesh.watertight);
}

#[test]
fn higher_level_encloses_less() {
    let vol = radial(25, |r| (1.0 - 2.0 * r).clamp(0.0, 1.0), false);
    let mut last = f64::INFINITY;
    for level in [0.2, 0.4, 0.6, 0.8] {
        let m = extract_isosurface(&vol, level).unwrap();
        assert!(m.watertight);
        let v = m.enclosed_measure();
        assert!(v < last, "{level}: {v} !< {last}");
        last = v;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_bytes_round_trip(
        dims in (1usize..6, 1usize..6, 1usize..6),
        spacing in 1e-4f64..1.0,
        origin in proptest::array::uniform3(-1.0f64..1.0),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let n = dims.0 * dims.1 * dims.2;
        let values: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=1.0)).collect();
        let v = DensityVolume::new([dims.0, dims.1, dims.2], spacing, origin, values).unwrap();
        let back = DensityVolume::from_bytes(Path::new("x.vol"), &v.to_bytes()).unwrap();
        prop_assert_eq!(&back, &v);
        let back = DensityVolume::from_csv(Path::new("x.csv"), &v.to_csv()).unwrap();
        prop_assert_eq!(back, v);
    }
}

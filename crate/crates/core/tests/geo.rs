use rand::Rng;
use urbanssl::geo::{
    compute_radius, destination, ground_resolution, haversine_m, load_cities, point_in_disc, point_in_mask,
    sample_points, LatLon, SamplePoint, SamplingDisc, WaterMask,
};
use urbanssl::{seed, Error};

#[test]
fn radius_is_monotone_in_population() {
    let mut r = seed::substream(1, 0);
    for _ in 0..1000 {
        let a = r.gen_range(1..10_000_000u64);
        let b = a + r.gen_range(1..1_000_000u64);
        assert!(compute_radius(a, 0.05).unwrap() < compute_radius(b, 0.05).unwrap());
    }
    assert!(compute_radius(0, 0.05).is_err());
    assert!(compute_radius(10, 0.0).is_err());
}

#[test]
fn disc_boundary_and_far_points() {
    let center = LatLon { latitude: 10.0, longitude: 20.0 };
    let d = SamplingDisc::new(center, 10.0).unwrap();
    assert!(point_in_disc(&SamplePoint::at(10.0, 20.0), &d));
    assert!(!point_in_disc(&SamplePoint::at(11.0, 20.0), &d));
    let north = haversine_m(center, LatLon { latitude: 11.0, longitude: 20.0 });
    assert!((north - 111_195.0).abs() < 1.0, "{north}");

    let d = SamplingDisc::new(center, 1_500.0).unwrap();
    let edge = destination(center, 1.0, 1_500.0 * (1.0 - 1e-12));
    assert!(point_in_disc(&SamplePoint::at(edge.latitude, edge.longitude), &d));
}

#[test]
fn mask_rings() {
    let square = WaterMask::new(vec![vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]]).unwrap();
    assert!(point_in_mask(&SamplePoint::at(0.5, 0.5), &square));
    assert!(!point_in_mask(&SamplePoint::at(2.0, 2.0), &square));
    assert!(!point_in_mask(&SamplePoint::at(0.5, 0.5), &WaterMask::empty()));
    assert!(matches!(WaterMask::new(vec![vec![(0.0, 0.0), (1.0, 1.0)]]), Err(Error::Validation(_))));
    assert!(WaterMask::parse("0 0, 0 1, 1 1\n0 0, 1").is_err());
}

#[test]
fn fuzzed_samples_respect_disc_and_mask() {
    let mut r = seed::substream(2, 0);
    for trial in 0..50 {
        let center = LatLon { latitude: r.gen_range(-60.0..60.0), longitude: r.gen_range(-179.0..179.0) };
        let radius = r.gen_range(100.0..20_000.0);
        let disc = SamplingDisc::new(center, radius).unwrap();
        let deg = radius / 111_000.0;
        let ring: Vec<(f64, f64)> = (0..5)
            .map(|_| (center.latitude + r.gen_range(-deg..deg), center.longitude + r.gen_range(-deg..deg)))
            .collect();
        let mask = WaterMask::new(vec![ring]).unwrap();
        for p in sample_points(&disc, &mask, 200, trial).unwrap() {
            assert!(point_in_disc(&p, &disc));
            assert!(!point_in_mask(&p, &mask));
        }
    }
}

#[test]
fn seeds_reproduce_and_differ() {
    let disc = SamplingDisc::new(LatLon { latitude: 35.0, longitude: 139.0 }, 5_000.0).unwrap();
    let mask = WaterMask::empty();
    assert_eq!(sample_points(&disc, &mask, 50, 9).unwrap(), sample_points(&disc, &mask, 50, 9).unwrap());
    let mut same = 0;
    for s in 0..1000u64 {
        let a = &sample_points(&disc, &mask, 1, s).unwrap()[0];
        let b = &sample_points(&disc, &mask, 1, s + 1000).unwrap()[0];
        same += (a == b) as usize;
    }
    assert_eq!(same, 0);
}

#[test]
fn covered_disc_is_an_error() {
    let disc = SamplingDisc::new(LatLon { latitude: 1.0, longitude: 1.0 }, 100.0).unwrap();
    let mask = WaterMask::new(vec![vec![(0.0, 0.0), (0.0, 2.0), (2.0, 2.0), (2.0, 0.0)]]).unwrap();
    assert!(matches!(sample_points(&disc, &mask, 3, 0), Err(Error::DiscMasked { .. })));
}

#[test]
fn ground_resolution_halves_per_zoom() {
    let eq = ground_resolution(0.0, 16, 256).unwrap();
    assert!((eq - 611.5).abs() < 0.1, "{eq}");
    assert!((ground_resolution(60.0, 16, 256).unwrap() - eq / 2.0).abs() < 1e-9);
    for z in 0..22 {
        let a = ground_resolution(45.0, z, 256).unwrap();
        let b = ground_resolution(45.0, z + 1, 256).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
    }
    assert!(ground_resolution(86.0, 16, 256).is_err());
}

#[test]
fn city_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cities.csv");
    std::fs::write(&path, "name,country,latitude,longitude,population\nOslo, Norway, 59.91, 10.75, 700000\n").unwrap();
    let cities = load_cities(&path).unwrap();
    assert_eq!(cities[0].name, "Oslo");
    assert!(cities[0].disc(0.05).unwrap().radius_m > 0.0);
    std::fs::write(&path, "name,country,latitude,longitude,population\nX,Y,95,0,10\n").unwrap();
    assert!(load_cities(&path).is_err());
}

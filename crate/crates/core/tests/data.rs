mod common;

use common::check_geometry;
use dacca::data::{self, DomainStyle, Manifest, SceneConfig};
use dacca::labels::UNLABELED;
use dacca::Domain;

fn cfg() -> SceneConfig {
    SceneConfig::default()
}

#[test]
fn hundred_scenes_pass_geometry_oracle() {
    for domain in [Domain::Source, Domain::Target] {
        let scenes = data::generate_dataset(42, 100, &cfg(), &DomainStyle::for_domain(domain));
        for s in &scenes {
            check_geometry(s, cfg().stroke_width);
            assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn clean_source_paints_lane_colours_exactly() {
    let st = DomainStyle::source();
    for s in data::generate_dataset(8, 20, &cfg(), &st) {
        let hw = s.height() * s.width();
        for p in 0..hw {
            if s.label.is_lane(p) {
                let want = data::lane_color(s.label.get(p) as usize);
                for ch in 0..3 {
                    assert_eq!(s.image.values()[ch * hw + p], want[ch] * st.lane_brightness);
                }
            }
        }
    }
}

#[test]
fn flipped_scenes_still_pass_the_oracle() {
    for s in data::generate_dataset(5, 30, &cfg(), &DomainStyle::source()) {
        let f = s.flipped();
        // mirroring moves each lane to the other side but keeps its class
        for (a, b) in s.lanes.iter().zip(&f.lanes) {
            for (p, q) in a.iter().zip(b) {
                assert_eq!(p.0 + q.0, (s.width() - 1) as f64);
            }
        }
        assert_eq!(f.flipped(), s);
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = data::generate_dataset(3, 6, &cfg(), &DomainStyle::target());
    let manifest = Manifest {
        count: 6,
        num_lanes: 2,
        height: 64,
        width: 64,
        domain: Domain::Target,
        labels_hidden: false,
        seed: 3,
        config_hash: "abc".into(),
    };
    data::write_dataset(dir.path(), &manifest, &scenes).unwrap();
    let back = data::read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, manifest);
    for (a, b) in scenes.iter().zip(&back.scenes) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.lanes, b.lanes);
        for (x, y) in a.image.values().iter().zip(b.image.values()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
        check_geometry(b, cfg().stroke_width);
    }
}

#[test]
fn hidden_manifest_drops_labels_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = data::generate_dataset(4, 3, &cfg(), &DomainStyle::target());
    let manifest = Manifest {
        count: 3,
        num_lanes: 2,
        height: 64,
        width: 64,
        domain: Domain::Target,
        labels_hidden: true,
        seed: 4,
        config_hash: "x".into(),
    };
    data::write_dataset(dir.path(), &manifest, &scenes).unwrap();
    let back = data::read_dataset(dir.path()).unwrap();
    for s in &back.scenes {
        assert!(s.label.classes().iter().all(|&c| c == UNLABELED));
        assert!(s.lanes.iter().all(|l| l.is_empty()));
    }
}

mod common;

use common::*;
use proptest::prelude::*;
use tellscan::error::Error;
use tellscan::geoingest::{GeoRef, SampleWindow};
use tellscan::raster::Image;
use tellscan::sitemap::{extract_candidates, render_heatmap, Heatmap, Registry, Status, DEFAULT_DEDUPE_M};

fn tile_georef() -> GeoRef {
    SampleWindow::new((4_910_000.0, 3_932_000.0), 2000.0, 64)
        .unwrap()
        .georef()
}

#[test]
fn tile_pixels_are_31_25_m() {
    let w = SampleWindow::new((4_910_000.0, 3_932_000.0), 2000.0, 64).unwrap();
    assert_eq!(w.pixel_size(), 31.25);
    assert_eq!(w.georef().pixel_area(), 976.5625);
    let g = w.georef();
    let (x0, y0) = g.pixel_to_world(0.0, 0.0);
    let (x1, y1) = g.pixel_to_world(64.0, 64.0);
    assert_eq!((x1 - x0, y0 - y1), (2000.0, 2000.0));
}

#[test]
fn geo_round_trip() {
    check_geo_round_trip(10_000, 21).unwrap();
}

#[test]
fn world_file_round_trip() {
    let g = GeoRef::new(31.25, 0.5, -0.25, -31.25, 4_910_000.125, 3_932_000.5).unwrap();
    assert_eq!(GeoRef::from_world_file(&g.to_world_file()).unwrap(), g);

    let dir = tempfile::tempdir().unwrap();
    let h = Heatmap::new(Image::filled(1, 4, 4, 0.25), tile_georef(), "T", "Bing").unwrap();
    let (img, world) = render_heatmap(&h, dir.path(), &[]).unwrap();
    assert!(img.exists());
    let back = GeoRef::from_world_file(&std::fs::read_to_string(world).unwrap()).unwrap();
    assert_eq!(back, h.georef);
}

#[test]
fn two_blocks_give_two_candidates() {
    let g = tile_georef();
    let mut prob = Image::filled(1, 16, 16, 0.1);
    for (r0, c0, p) in [(2, 2, 0.9), (10, 12, 0.7)] {
        for r in r0..r0 + 2 {
            for c in c0..c0 + 2 {
                prob.set(0, r, c, p);
            }
        }
    }
    let h = Heatmap::new(prob, g, "W7", "Bing").unwrap();
    let cands = extract_candidates(&h, 0.5, 2500.0).unwrap();
    assert_eq!(cands.len(), 2);
    assert_eq!(cands[0].id, "W7.C01");
    assert_eq!(cands[0].peak, 0.9);
    assert_eq!(cands[0].area_m2, 4.0 * 976.5625);
    assert_eq!(cands[0].centroid, g.pixel_to_world(2.5, 2.5));
    assert_eq!(cands[1].centroid, g.pixel_to_world(12.5, 10.5));
    // one pixel short of the area gate
    assert!(extract_candidates(&h, 0.5, 4.0 * 976.5625 + 1.0).unwrap().is_empty());
}

#[test]
fn heatmap_rejects_bad_input() {
    assert!(Heatmap::new(Image::filled(1, 2, 2, 1.5), tile_georef(), "T", "x").is_err());
    assert!(Heatmap::new(Image::filled(3, 2, 2, 0.5), tile_georef(), "T", "x").is_err());
}

#[test]
fn registry_scenario() {
    check_registry_scenario().unwrap();
}

#[test]
fn update_errors() {
    let mut reg = Registry::new(DEFAULT_DEDUPE_M);
    reg.merge(&[candidate("A", 0.0, 0.0, 0.8)], 0).unwrap();
    assert!(matches!(reg.update("B", Status::Confirmed, 1), Err(Error::Lookup(_))));
    assert!(matches!(reg.update("A", Status::Predicted, 1), Err(Error::State(_))));
    reg.update("A", Status::Rejected, 2).unwrap();
    assert!(matches!(reg.update("A", Status::Confirmed, 3), Err(Error::State(_))));
}

#[test]
fn near_candidates_collapse_to_the_strongest() {
    let mut reg = Registry::new(250.0);
    let chain = [
        candidate("A", 0.0, 0.0, 0.6),
        candidate("B", 200.0, 0.0, 0.9),
        candidate("C", 400.0, 0.0, 0.7),
        candidate("D", 1000.0, 0.0, 0.5),
    ];
    reg.merge(&chain, 0).unwrap();
    let ids: Vec<&str> = reg.entries().iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["B", "D"]);
    assert!(reg.audit_text().contains("MERGE\tB\tabsorbed A,C"));
}

proptest! {
    #[test]
    fn foreground_area_shrinks_with_threshold(
        vals in proptest::collection::vec(0.0f64..=1.0, 64),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let h = Heatmap::new(Image::from_vec(1, 8, 8, vals).unwrap(), tile_georef(), "P", "x").unwrap();
        let area = |t| extract_candidates(&h, t, 0.0).unwrap().iter().map(|c| c.area_m2).sum::<f64>();
        prop_assert!(area(hi) <= area(lo));
    }

    #[test]
    fn merge_is_idempotent(pts in proptest::collection::vec((0.0f64..3000.0, 0.0f64..3000.0, 0.05f64..1.0), 1..20)) {
        let cands: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y, p))| candidate(&format!("S{i:02}"), x, y, p))
            .collect();
        let mut reg = Registry::new(DEFAULT_DEDUPE_M);
        reg.merge(&cands, 0).unwrap();
        let once = reg.entries().to_vec();
        reg.merge(&cands, 1).unwrap();
        prop_assert_eq!(reg.entries(), &once[..]);
        reg.merge(&once, 2).unwrap();
        prop_assert_eq!(reg.entries(), &once[..]);
        // survivors are pairwise farther apart than the dedupe distance
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                let d = (a.centroid.0 - b.centroid.0).hypot(a.centroid.1 - b.centroid.1);
                prop_assert!(d > DEFAULT_DEDUPE_M);
            }
        }
    }
}

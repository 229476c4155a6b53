use std::path::Path;
use std::process::{Command, Output};

use weave_core::analyzer::{self, DensityMap, MapSource, Orientation};
use weave_core::raster::{self, GrayImage};

fn weave_lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weave-lab")).args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_first_truth(csv: &str, v: f64, h: f64) {
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(&row[..2], &[0.0, 0.0]);
    assert!((row[2] - v).abs() < 1e-9 && (row[3] - h).abs() < 1e-9, "{csv}");
}

#[test]
fn synth_writes_image_truth_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let o = weave_lab(
        dir.path(),
        &["synth", "--warp", "10", "--weft", "15", "--width-cm", "3", "--height-cm", "2", "--out", "c.png"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let img = raster::load_gray(&dir.path().join("c.png")).unwrap();
    assert_eq!((img.height(), img.width(), img.ppcm()), (400, 600, 200.0));
    let truth = std::fs::read_to_string(dir.path().join("c.truth.csv")).unwrap();
    let mut lines = truth.lines();
    assert_eq!(lines.next(), Some("cm_y,cm_x,v_true,h_true"));
    assert_eq!(lines.count(), 6);
    assert_first_truth(&truth, 10.0, 15.0);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(weave_lab(dir.path(), &["synth", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(weave_lab(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        weave_lab(
            dir.path(),
            &["match", "--a", "x", "--b", "y", "--out-png", "p", "--report", "r", "--transform", "spin"]
        )
        .status
        .code(),
        Some(2)
    );
    std::fs::write(dir.path().join("bad.cfg"), "nope = 3\n").unwrap();
    let o = weave_lab(dir.path(), &["--config", "bad.cfg", "synth", "--out", "c.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn version_names_the_weight_format() {
    let o = weave_lab(Path::new("."), &["--version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("WLW1"));
}

#[test]
fn small_plate_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    raster::save_png(&GrayImage::filled(100, 100, 200.0, 128.0), &dir.path().join("tiny.png")).unwrap();
    let o = weave_lab(dir.path(), &["ft-analyze", "--input", "tiny.png", "--out-prefix", "m"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("PlateTooSmall"), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.cfg"), "# canvas\nwarp = 9\nweft = 9\nwidth_cm = 2\nheight_cm = 2\n").unwrap();
    let o = weave_lab(dir.path(), &["--config", "s.cfg", "synth", "--weft", "16", "--out", "c.png"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let truth = std::fs::read_to_string(dir.path().join("c.truth.csv")).unwrap();
    assert_first_truth(&truth, 9.0, 16.0);

    std::fs::write(dir.path().join("a.cfg"), "overlap = 0.5\n").unwrap();
    let o = weave_lab(dir.path(), &["--config", "a.cfg", "ft-analyze", "--input", "c.png", "--out-prefix", "m"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = analyzer::read_map_csv(&dir.path().join("m.v.csv")).unwrap();
    assert_eq!((v.stride, v.rows, v.cols), (100, 3, 3));
    assert!(dir.path().join("m.h.png").exists());
}

#[test]
fn ft_analyze_recovers_synthetic_densities() {
    let dir = tempfile::tempdir().unwrap();
    let o = weave_lab(
        dir.path(),
        &["synth", "--warp", "12", "--weft", "17", "--width-cm", "3", "--height-cm", "3", "--out", "c.png"],
    );
    assert!(o.status.success());
    let o = weave_lab(dir.path(), &["ft-analyze", "--input", "c.png", "--preprocess", "--out-prefix", "m"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = analyzer::read_map_csv(&dir.path().join("m.v.csv")).unwrap();
    let h = analyzer::read_map_csv(&dir.path().join("m.h.csv")).unwrap();
    assert_eq!(
        (v.orientation, h.orientation, v.source),
        (Orientation::Vertical, Orientation::Horizontal, MapSource::Ft)
    );
    assert!(v.values.iter().all(|x| (x - 12.0).abs() < 0.25));
    assert!(h.values.iter().all(|x| (x - 17.0).abs() < 0.25));
}

fn profile_map(rows: usize, shift: usize) -> DensityMap {
    let mut m = DensityMap::new_missing(Orientation::Horizontal, MapSource::Ft, 200, rows, 4);
    for i in 0..rows {
        let k = i + shift;
        for j in 0..4 {
            m.set(i, j, Some(10.0 + ((k * k) % 11) as f64 * 0.3 + j as f64 * 0.01));
        }
    }
    m
}

#[test]
fn match_finds_a_nonzero_offset_through_a_flip() {
    let dir = tempfile::tempdir().unwrap();
    let a = profile_map(20, 0);
    // b holds rows 5.. of a, stored upside down.
    let b = analyzer::transform_map(&profile_map(14, 5), analyzer::MapTransform::FlipV);
    analyzer::write_map_csv(&a, &dir.path().join("a.csv")).unwrap();
    analyzer::write_map_csv(&b, &dir.path().join("b.csv")).unwrap();
    let o = weave_lab(
        dir.path(),
        &["match", "--a", "a.csv", "--b", "b.csv", "--transform", "flip_v", "--out-png", "c.png", "--report", "r.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("r.json")).unwrap();
    assert!(report.contains("\"offset\":5"), "{report}");
    assert!(report.contains("\"correlation\":1"), "{report}");
    assert!(report.contains("\"n_cells\":14"), "{report}");
    assert!(std::fs::read(dir.path().join("c.png")).unwrap().starts_with(b"\x89PNG"));
}

#[test]
fn match_rejects_mixed_orientations() {
    let dir = tempfile::tempdir().unwrap();
    let a = profile_map(6, 0);
    let mut b = profile_map(6, 0);
    b.orientation = Orientation::Vertical;
    analyzer::write_map_csv(&a, &dir.path().join("a.csv")).unwrap();
    analyzer::write_map_csv(&b, &dir.path().join("b.csv")).unwrap();
    let o =
        weave_lab(dir.path(), &["match", "--a", "a.csv", "--b", "b.csv", "--out-png", "c.png", "--report", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("IncompatibleOrientations"));
}

#[test]
fn ss_refine_without_agreement_keeps_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(weave_lab(d, &["build-corpus", "--out", "corpus", "--canvases", "3", "--max-records", "60"])
        .status
        .success());
    let o = weave_lab(
        d,
        &[
            "train",
            "--corpus",
            "corpus",
            "--input-side",
            "16",
            "--filters",
            "2",
            "--dense",
            "4,1",
            "--stage-blocks",
            "1",
            "--max-epochs",
            "1",
            "--patience",
            "1",
            "--out",
            "w.wlw",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(d.join("history.csv")).unwrap().starts_with("epoch,train_nmae,val_nmae"));
    assert!(weave_lab(d, &["synth", "--width-cm", "3", "--height-cm", "3", "--out", "p.png"]).status.success());
    let o = weave_lab(
        d,
        &[
            "ss-refine",
            "--input",
            "p.png",
            "--weights",
            "w.wlw",
            "--threshold",
            "0",
            "--out",
            "r.wlw",
            "--report",
            "r.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("NoAgreementPool"));
    assert_eq!(std::fs::read(d.join("w.wlw")).unwrap(), std::fs::read(d.join("r.wlw")).unwrap());
    assert!(std::fs::read_to_string(d.join("r.json")).unwrap().contains("no_agreement_pool"));
}

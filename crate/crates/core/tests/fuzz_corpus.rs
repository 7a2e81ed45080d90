//! Replays the checked-in fuzz seeds through the same checks as the fuzz
//! targets. Seeds named `valid_*` must decode; every seed must not panic.

use std::fs;
use std::path::{Path, PathBuf};

use nvde::io::{self, Checkpoint, PoseFile, TensorArchive};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    assert!(!paths.is_empty(), "no seeds in {}", dir.display());
    paths
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn expect(name: &str, ok: bool) {
    if name.starts_with("valid_") {
        assert!(ok, "{name} should decode");
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in seeds("checkpoint") {
        let archive = TensorArchive::decode(&data);
        if let Ok(a) = &archive {
            assert_eq!(&TensorArchive::decode(&a.encode().unwrap()).unwrap(), a);
        }
        expect(&name, archive.is_ok());
        if let Ok(c) = Checkpoint::decode(&data) {
            let bytes = c.encode().unwrap();
            assert_eq!(bytes, data, "{name}: checkpoint re-encodes byte-identically");
            assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
        }
    }
    let tiny = &seeds("checkpoint").into_iter().find(|(n, _)| n == "valid_tiny.nvde").unwrap().1;
    assert!(Checkpoint::decode(tiny).is_ok());
}

#[test]
fn pfm_seeds() {
    for (name, data) in seeds("pfm") {
        let img = io::decode_pfm(&data);
        if let Ok(img) = &img {
            let again = io::decode_pfm(&io::encode_pfm(img).unwrap()).unwrap();
            // PFM stores f32
            for (a, b) in again.data().iter().zip(img.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        expect(&name, img.is_ok());
    }
}

#[test]
fn png_seeds() {
    for (name, data) in seeds("png") {
        let img = io::decode_png(&data);
        if let Ok(img) = &img {
            assert_eq!(&io::decode_png(&io::encode_png(img).unwrap()).unwrap(), img);
        }
        expect(&name, img.is_ok());
    }
}

#[test]
fn scene_json_seeds() {
    for (name, data) in seeds("scene_json") {
        let parsed = std::str::from_utf8(&data).ok().map(io::parse_scene);
        let ok = matches!(parsed, Some(Ok(_)));
        if name == "two_plane_specular.json" {
            assert!(ok);
        }
        if name == "wrong_plane_order.json" {
            assert!(!ok, "planes must be ordered far to near");
        }
    }
}

#[test]
fn pose_json_seeds() {
    for (name, data) in seeds("pose_json") {
        let parsed = std::str::from_utf8(&data).ok().map(PoseFile::parse);
        if let Some(Ok(f)) = &parsed {
            assert_eq!(f.decoded().unwrap().len(), f.poses.len());
        }
        expect(&name, matches!(parsed, Some(Ok(_))));
        if name == "nan_pose.json" || name == "short_row.json" {
            assert!(!matches!(parsed, Some(Ok(_))), "{name}");
        }
    }
}

#[test]
fn pose_string_seeds() {
    for (name, data) in seeds("pose_string") {
        let text = String::from_utf8(data).unwrap();
        let ok = io::parse_pose_string(&text).is_ok();
        let want = !matches!(name.as_str(), "too_few.txt" | "non_finite.txt");
        assert_eq!(ok, want, "{name}: {text:?}");
    }
}
